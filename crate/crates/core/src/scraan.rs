//! Stochastic compositional optimization of the RAAN objective.
//!
//! The objective is written as `R(w) = Σ_i π_i f(g_i(w))` with `f(g) = g1/g2`
//! and `π_i = 1/(AC |D^{c_i}_{a_i}|)` (for balanced cells `π_i = 1/n`). A
//! per-sample table `u ≈ g_i` is maintained by exponential moving averages
//! of minibatch estimates `ĝ_i`, and the parameter gradient is estimated as
//! `G = Σ_{i∈batch} ∇ĝ_i(w)ᵀ ∇f(u_i) / (AC b_{c_i a_i})`, where `b_{ca}` counts
//! the batch members of cell `(c, a)`. This stratified weighting replaces the
//! uniform `1/B` so that per-cell batch quotas do not tilt the objective; with
//! the whole dataset as the batch it is exactly `π_i`.

use crate::aan::{self, grad_f, inner_from_terms, AanError, GroupIndex, InnerValue};
use crate::data::{stratified_batches, DataError, Dataset};
use crate::fairness::{self, EvalFrame};
use crate::model::{self, ModelError, ModelParams, Scope};
use crate::numkit::{dot, DenseMatrix, SeededRng};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScraanError {
    #[error(transparent)]
    Aan(#[from] AanError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("estimator row {0} was never updated")]
    UnvisitedRow(usize),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("gradient has {got} entries, scope {scope:?} needs {expected}")]
    GradientLength {
        scope: Scope,
        expected: usize,
        got: usize,
    },
}

pub type Result<T> = std::result::Result<T, ScraanError>;

/// Moving-average estimates `u_i = (u¹_i, u²_i)` of the inner function, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorTable {
    u: Vec<[f64; 2]>,
    visited: Vec<bool>,
    u0: f64,
}

impl EstimatorTable {
    pub fn new(n: usize, u0: f64) -> Result<Self> {
        if !(u0 > 0.0 && u0.is_finite()) {
            return Err(ScraanError::Config(format!("u0 must be positive, got {u0}")));
        }
        Ok(Self {
            u: vec![[0.0; 2]; n],
            visited: vec![false; n],
            u0,
        })
    }

    pub fn n(&self) -> usize {
        self.u.len()
    }

    pub fn u0(&self) -> f64 {
        self.u0
    }

    pub fn is_visited(&self, i: usize) -> bool {
        self.visited[i]
    }

    /// The row, or `None` if it was never updated.
    pub fn get(&self, i: usize) -> Option<InnerValue> {
        self.visited[i].then(|| InnerValue {
            g1: self.u[i][0],
            g2: self.u[i][1],
        })
    }

    /// Seeds a row directly (marks it visited; the floor still applies).
    pub fn set(&mut self, i: usize, g: InnerValue) {
        self.u[i] = [g.g1, g.g2.max(self.u0)];
        self.visited[i] = true;
    }

    /// `u¹ ← (1−γ)u¹ + γĝ₁`, `u² ← max((1−γ)u² + γĝ₂, u0)`; a row's first
    /// update uses `γ = 1`.
    pub fn ug_update(&mut self, i: usize, ghat: InnerValue, gamma: f64) -> Result<[f64; 2]> {
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(ScraanError::Config(format!("gamma must lie in (0,1], got {gamma}")));
        }
        if !(ghat.g1.is_finite() && ghat.g2.is_finite()) {
            return Err(ScraanError::Config(format!("non-finite estimate for row {i}")));
        }
        let g = if self.visited[i] { gamma } else { 1.0 };
        let row = &mut self.u[i];
        row[0] = (1.0 - g) * row[0] + g * ghat.g1;
        row[1] = ((1.0 - g) * row[1] + g * ghat.g2).max(self.u0);
        self.visited[i] = true;
        Ok(*row)
    }
}

/// Neighbor positions of batch position `p` (same class, different attribute).
fn batch_neighbors(batch: &[usize], p: usize, gi: &GroupIndex) -> Vec<usize> {
    let i = batch[p];
    (0..batch.len())
        .filter(|&q| gi.is_neighbor(i, batch[q]))
        .collect()
}

/// Minibatch inner estimates for the centers at batch positions `centers`.
///
/// `z_batch` rows and `losses_batch` are aligned with `batch` (global
/// indices). Centers with no neighbor inside the batch are omitted.
/// Returns `(global index, ĝ)` pairs.
pub fn ghat_batch(
    z_batch: &DenseMatrix,
    losses_batch: &[f64],
    centers: &[usize],
    batch: &[usize],
    gi: &GroupIndex,
    tau: f64,
) -> Result<Vec<(usize, InnerValue)>> {
    check_batch(z_batch.rows(), losses_batch.len(), batch.len())?;
    let mut out = Vec::with_capacity(centers.len());
    for &p in centers {
        let zp = z_batch.row(p);
        let terms = batch_neighbors(batch, p, gi)
            .into_iter()
            .map(|q| (dot(zp, z_batch.row(q)), losses_batch[q]));
        if let Some(g) = inner_from_terms(terms, gi, tau)? {
            out.push((batch[p], g));
        }
    }
    Ok(out)
}

fn check_batch(z_rows: usize, losses: usize, batch: usize) -> Result<()> {
    if z_rows != batch || losses != batch {
        return Err(ScraanError::Config(format!(
            "batch of {batch} indices but {z_rows} embedding rows and {losses} losses"
        )));
    }
    Ok(())
}

/// Number of batch members in each (class, attribute) cell.
fn batch_cell_counts(batch: &[usize], gi: &GroupIndex) -> Vec<usize> {
    let mut counts = vec![0; gi.num_cells()];
    for &i in batch {
        counts[gi.label(i) * gi.num_attributes() + gi.attribute(i)] += 1;
    }
    counts
}

/// Stratified weight `1/(AC b_c)` of a batch member whose cell has `b_c`
/// members in the batch. Each cell then carries total weight `1/(AC)`
/// whatever the sampler's per-cell quotas, and for the full dataset this
/// is exactly `π_i`.
fn batch_center_weight(i: usize, counts: &[usize], gi: &GroupIndex) -> f64 {
    let b_c = counts[gi.label(i) * gi.num_attributes() + gi.attribute(i)];
    1.0 / (gi.num_cells() as f64 * b_c as f64)
}

/// Compositional gradient estimator over one batch, every batch position acting as a center.
///
/// Head-only scope differentiates only the loss terms (`∇ĝ₂ ≡ 0` for a
/// frozen encoder). Full scope adds the exact similarity terms, pushed
/// through the normalization chain by the model backward pass.
pub fn grad_estimator(
    params: &ModelParams,
    cache: &model::ForwardCache,
    labels_batch: &[usize],
    table: &EstimatorTable,
    batch: &[usize],
    gi: &GroupIndex,
    tau: f64,
    scope: Scope,
) -> Result<Vec<f64>> {
    let b = batch.len();
    check_batch(cache.batch_size(), labels_batch.len(), b)?;
    let losses = model::ce_loss_per_sample(&cache.logits, labels_batch)?;
    let n = gi.n() as f64;
    let cells = gi.num_cells() as f64;
    let z = &cache.z;
    let counts = batch_cell_counts(batch, gi);
    let mut coef = vec![0.0; b];
    let mut dz = (scope == Scope::Full).then(|| DenseMatrix::zeros(b, z.cols()));
    for p in 0..b {
        let i = batch[p];
        let nb = batch_neighbors(batch, p, gi);
        if nb.is_empty() {
            continue;
        }
        let u = table.get(i).ok_or(ScraanError::UnvisitedRow(i))?;
        let [df1, df2] = grad_f(u)?;
        let k = n / (cells * nb.len() as f64);
        let base = batch_center_weight(i, &counts, gi) * k;
        for &q in &nb {
            let e = (dot(z.row(p), z.row(q)) / tau).exp();
            if !e.is_finite() {
                return Err(AanError::Overflow(tau).into());
            }
            coef[q] += base * e * df1;
            if let Some(dz) = dz.as_mut() {
                let d = base * e / tau * (losses[q] * df1 + df2);
                for c in 0..z.cols() {
                    let (zp, zq) = (z.get(p, c), z.get(q, c));
                    dz.row_mut(p)[c] += d * zq;
                    dz.row_mut(q)[c] += d * zp;
                }
            }
        }
    }
    Ok(model::backward(
        params,
        cache,
        labels_batch,
        &coef,
        dz.as_ref(),
        scope,
    )?)
}

/// Exact full-data gradient of RAAN with respect to the parameters in
/// `scope`, from an eval-mode forward pass over all samples.
pub fn raan_full_gradient(
    params: &ModelParams,
    x: &DenseMatrix,
    gi: &GroupIndex,
    tau: f64,
    scope: Scope,
) -> Result<Vec<f64>> {
    let cache = model::forward(params, x, false, &mut SeededRng::new(0))?;
    let losses = model::ce_loss_per_sample(&cache.logits, gi.labels())?;
    let g = aan::raan_gradient(&cache.z, &losses, gi, tau)?;
    Ok(model::backward(
        params,
        &cache,
        gi.labels(),
        &g.loss_coef,
        Some(&g.dz),
        scope,
    )?)
}

/// Exact RAAN value of the model on `(x, gi)` in eval mode.
pub fn raan_objective(params: &ModelParams, x: &DenseMatrix, gi: &GroupIndex, tau: f64) -> Result<f64> {
    let cache = model::forward(params, x, false, &mut SeededRng::new(0))?;
    let losses = model::ce_loss_per_sample(&cache.logits, gi.labels())?;
    Ok(aan::raan_value(&cache.z, &losses, gi, tau)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub alpha: f64,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha > 0.0 && self.alpha.is_finite() {
            Ok(())
        } else {
            Err(ScraanError::Config(format!("alpha must be positive, got {}", self.alpha)))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub alpha: f64,
    pub eps: f64,
    pub eta1: f64,
    pub eta2: f64,
    pub amsgrad: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            alpha: 1e-3,
            eps: 1e-8,
            eta1: 0.9,
            eta2: 0.999,
            amsgrad: false,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            bad.push(format!("alpha must be positive, got {}", self.alpha));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            bad.push(format!("eps must be positive, got {}", self.eps));
        }
        if !(0.0..1.0).contains(&self.eta1) {
            bad.push(format!("eta1 must lie in [0,1), got {}", self.eta1));
        }
        if !(0.0..1.0).contains(&self.eta2) {
            bad.push(format!("eta2 must lie in [0,1), got {}", self.eta2));
        }
        if self.eta1 > self.eta2.sqrt() {
            bad.push(format!(
                "eta1 = {} exceeds sqrt(eta2) = {:.6}",
                self.eta1,
                self.eta2.sqrt()
            ));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(ScraanError::Config(bad.join("; ")))
        }
    }
}

/// First and second moment buffers for [`uw_adam`].
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub h: Vec<f64>,
    pub v: Vec<f64>,
    pub v_hat: Vec<f64>,
}

impl OptState {
    pub fn new(len: usize) -> Self {
        Self {
            h: vec![0.0; len],
            v: vec![0.0; len],
            v_hat: vec![0.0; len],
        }
    }
}

fn check_grad(params: &ModelParams, g: &[f64], scope: Scope) -> Result<()> {
    let expected = params.num_params(scope);
    if g.len() != expected {
        return Err(ScraanError::GradientLength {
            scope,
            expected,
            got: g.len(),
        });
    }
    Ok(())
}

/// `w ← w − α G`.
pub fn uw_sgd(params: &mut ModelParams, g: &[f64], cfg: &SgdConfig, scope: Scope) -> Result<()> {
    cfg.validate()?;
    check_grad(params, g, scope)?;
    let mut w = params.flatten(scope);
    for (wk, gk) in w.iter_mut().zip(g) {
        *wk -= cfg.alpha * gk;
    }
    params.assign_flat(scope, &w)?;
    Ok(())
}

/// `h ← η₁h + (1−η₁)G`, `v ← η₂v̂ + (1−η₂)G²`, `v̂ ← v` (or `max(v̂, v)` with
/// AMSGrad), `w ← w − α h/√(ε + v̂)`. No bias correction.
pub fn uw_adam(
    params: &mut ModelParams,
    state: &mut OptState,
    g: &[f64],
    cfg: &AdamConfig,
    scope: Scope,
) -> Result<()> {
    cfg.validate()?;
    check_grad(params, g, scope)?;
    if state.h.len() != g.len() || state.v.len() != g.len() || state.v_hat.len() != g.len() {
        return Err(ScraanError::Config("optimizer state does not match the gradient length".into()));
    }
    let mut w = params.flatten(scope);
    for k in 0..g.len() {
        state.h[k] = cfg.eta1 * state.h[k] + (1.0 - cfg.eta1) * g[k];
        state.v[k] = cfg.eta2 * state.v_hat[k] + (1.0 - cfg.eta2) * g[k] * g[k];
        state.v_hat[k] = if cfg.amsgrad {
            state.v_hat[k].max(state.v[k])
        } else {
            state.v[k]
        };
        w[k] -= cfg.alpha * state.h[k] / (cfg.eps + state.v_hat[k]).sqrt();
    }
    params.assign_flat(scope, &w)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Sgd(SgdConfig),
    Adam(AdamConfig),
}

impl Optimizer {
    pub fn validate(&self) -> Result<()> {
        match self {
            Optimizer::Sgd(c) => c.validate(),
            Optimizer::Adam(c) => c.validate(),
        }
    }

    /// Applies one update; `state` is created lazily for the Adam variant.
    pub fn step(
        &self,
        params: &mut ModelParams,
        state: &mut Option<OptState>,
        g: &[f64],
        scope: Scope,
    ) -> Result<()> {
        match self {
            Optimizer::Sgd(c) => uw_sgd(params, g, c, scope),
            Optimizer::Adam(c) => {
                let st = state.get_or_insert_with(|| OptState::new(g.len()));
                uw_adam(params, st, g, c, scope)
            }
        }
    }
}

/// Step size and averaging weight `α = 1/(n^{2/5} T^{3/5})`, `γ = n^{2/5}/T^{2/5}`; requires `T > n`.
pub fn theory_hparams(n: usize, t: usize) -> Result<(f64, f64)> {
    if n == 0 || t <= n {
        return Err(ScraanError::Config(format!(
            "theory step sizes need T > n >= 1, got n = {n}, T = {t}"
        )));
    }
    let (n, t) = (n as f64, t as f64);
    Ok((1.0 / (n.powf(0.4) * t.powf(0.6)), n.powf(0.4) / t.powf(0.4)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Cross entropy in both stages (stage 2 keeps training the whole model).
    CeOnly,
    /// Stage 2 optimizes the head with SCRAAN on frozen embeddings.
    RaanHeadOnly,
    /// Stage 2 optimizes encoder and head jointly with SCRAAN.
    RlRaanFull,
    /// Stage 2 optimizes the head with (class × attribute)-balanced cross
    /// entropy, the large-temperature limit of RAAN.
    BalancedCe,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::CeOnly => "ce_only",
            Method::RaanHeadOnly => "raan_head_only",
            Method::RlRaanFull => "rl_raan_full",
            Method::BalancedCe => "balanced_ce",
        }
    }

    pub fn uses_raan(&self) -> bool {
        matches!(self, Method::RaanHeadOnly | Method::RlRaanFull)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub batch_size: usize,
    pub gamma: f64,
    /// Temperature; also used for the logged RAAN value under non-RAAN methods.
    pub tau: f64,
    pub method: Method,
    pub seed: u64,
    /// Minimum number of indices per (class, attribute) cell in every batch.
    pub min_per_cell: usize,
    pub u0: f64,
    /// Size of the fixed subset on which the exact RAAN value is logged.
    pub eval_subset: usize,
}

impl TrainConfig {
    pub fn new(method: Method, seed: u64) -> Self {
        Self {
            stage1_epochs: 10,
            stage2_epochs: 10,
            batch_size: 128,
            gamma: 0.9,
            tau: 1.0,
            method,
            seed,
            min_per_cell: 8,
            u0: 1e-8,
            eval_subset: 2000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            bad.push(format!("gamma must lie in (0,1], got {}", self.gamma));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            bad.push(format!("tau must be positive, got {}", self.tau));
        }
        if self.min_per_cell == 0 {
            bad.push("min_per_cell must be >= 1".to_string());
        }
        if self.batch_size == 0 {
            bad.push("batch_size must be >= 1".to_string());
        }
        if !(self.u0 > 0.0) {
            bad.push(format!("u0 must be positive, got {}", self.u0));
        }
        if self.eval_subset == 0 {
            bad.push("eval_subset must be >= 1".to_string());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(ScraanError::Config(bad.join("; ")))
        }
    }
}

/// One row of the per-epoch metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub stage: usize,
    pub raan_value: f64,
    pub ce_loss: f64,
    pub accuracy: f64,
    pub dp_gap: f64,
    pub eo_gap: f64,
    pub worst_group_acc: f64,
}

pub const METRICS_HEADER: &str = "epoch,stage,raan_value,ce_loss,accuracy,dp_gap,eo_gap,worst_group_acc";

pub fn write_metrics_csv(log: &[EpochMetrics], path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::new();
    out.push_str(METRICS_HEADER);
    out.push('\n');
    for m in log {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            m.epoch, m.stage, m.raan_value, m.ce_loss, m.accuracy, m.dp_gap, m.eo_gap, m.worst_group_acc
        ));
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

/// Fairness metrics of eval-mode predictions; NaN where the frame is not binary
/// or a group is missing.
pub fn fairness_of(params: &ModelParams, ds: &Dataset) -> Result<fairness::FairnessReport> {
    let preds = model::predict(params, &ds.features)?;
    let nan = fairness::FairnessReport {
        accuracy: f64::NAN,
        dp_gap: f64::NAN,
        eo_gap: f64::NAN,
        worst_group_acc: f64::NAN,
    };
    let frame = match EvalFrame::new(preds.clone(), ds.labels.clone(), ds.attributes.clone()) {
        Ok(f) => f,
        Err(_) => {
            let hits = preds.iter().zip(&ds.labels).filter(|(p, y)| p == y).count();
            return Ok(fairness::FairnessReport {
                accuracy: hits as f64 / ds.n() as f64,
                ..nan
            });
        }
    };
    let acc = fairness::accuracy(&frame).unwrap_or(f64::NAN);
    Ok(fairness::FairnessReport {
        accuracy: acc,
        dp_gap: fairness::dp_gap(&frame).unwrap_or(f64::NAN),
        eo_gap: fairness::eo_gap(&frame).unwrap_or(f64::NAN),
        worst_group_acc: fairness::worst_group_accuracy(&frame).unwrap_or(f64::NAN),
    })
}

/// Source of the rows fed to a SCRAAN step.
#[derive(Debug, Clone, Copy)]
pub enum StepInput<'a> {
    /// Precomputed unit-norm embeddings of all samples (frozen encoder).
    Embeddings(&'a DenseMatrix),
    /// Raw features of all samples (encoder recomputed per batch).
    Features(&'a DenseMatrix),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    /// `‖G‖²` of the estimate used for the update.
    pub grad_sq_norm: f64,
    /// Centers that had at least one neighbor in the batch.
    pub centers: usize,
}

/// One SCRAAN iteration: minibatch estimates, table update, gradient
/// estimate, parameter update.
#[derive(Debug, Clone)]
pub struct RaanStepper {
    pub table: EstimatorTable,
    pub tau: f64,
    pub gamma: f64,
    pub optimizer: Optimizer,
    pub state: Option<OptState>,
    /// Dropout during the step's forward pass.
    pub train_mode: bool,
}

impl RaanStepper {
    pub fn new(n: usize, tau: f64, gamma: f64, u0: f64, optimizer: Optimizer) -> Result<Self> {
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(ScraanError::Config(format!("gamma must lie in (0,1], got {gamma}")));
        }
        optimizer.validate()?;
        Ok(Self {
            table: EstimatorTable::new(n, u0)?,
            tau,
            gamma,
            optimizer,
            state: None,
            train_mode: true,
        })
    }

    /// Computes the gradient estimate for `batch` after refreshing the table;
    /// does not touch the parameters.
    pub fn estimate(
        &mut self,
        params: &ModelParams,
        input: StepInput<'_>,
        batch: &[usize],
        gi: &GroupIndex,
        rng: &mut SeededRng,
    ) -> Result<(Vec<f64>, Scope, usize)> {
        let (cache, scope) = match input {
            StepInput::Embeddings(z) => (
                model::forward_from_embeddings(params, &z.select_rows(batch), self.train_mode, rng)?,
                Scope::HeadOnly,
            ),
            StepInput::Features(x) => (
                model::forward(params, &x.select_rows(batch), self.train_mode, rng)?,
                Scope::Full,
            ),
        };
        let labels: Vec<usize> = batch.iter().map(|&i| gi.label(i)).collect();
        let losses = model::ce_loss_per_sample(&cache.logits, &labels)?;
        let centers: Vec<usize> = (0..batch.len()).collect();
        let ghat = ghat_batch(&cache.z, &losses, &centers, batch, gi, self.tau)?;
        for &(i, g) in &ghat {
            self.table.ug_update(i, g, self.gamma)?;
        }
        let g = grad_estimator(params, &cache, &labels, &self.table, batch, gi, self.tau, scope)?;
        Ok((g, scope, ghat.len()))
    }

    pub fn step(
        &mut self,
        params: &mut ModelParams,
        input: StepInput<'_>,
        batch: &[usize],
        gi: &GroupIndex,
        rng: &mut SeededRng,
    ) -> Result<StepInfo> {
        let (g, scope, centers) = self.estimate(params, input, batch, gi, rng)?;
        let grad_sq_norm = g.iter().map(|v| v * v).sum();
        self.optimizer.step(params, &mut self.state, &g, scope)?;
        Ok(StepInfo {
            grad_sq_norm,
            centers,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: ModelParams,
    pub log: Vec<EpochMetrics>,
}

struct Evaluator<'a> {
    train: &'a Dataset,
    eval: &'a Dataset,
    subset: Vec<usize>,
    subset_gi: Option<GroupIndex>,
    tau: f64,
}

impl<'a> Evaluator<'a> {
    fn new(train: &'a Dataset, eval: &'a Dataset, cfg: &TrainConfig, rng: &mut SeededRng) -> Self {
        let n = train.n();
        let subset: Vec<usize> = if n <= cfg.eval_subset {
            (0..n).collect()
        } else {
            let mut idx: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut idx);
            idx.truncate(cfg.eval_subset);
            idx.sort_unstable();
            idx
        };
        let sub = train.subset(&subset);
        let subset_gi = sub.group_index().ok();
        Self {
            train,
            eval,
            subset,
            subset_gi,
            tau: cfg.tau,
        }
    }

    fn metrics(&self, params: &ModelParams, epoch: usize, stage: usize) -> Result<EpochMetrics> {
        let cache = model::forward(params, &self.train.features, false, &mut SeededRng::new(0))?;
        let losses = model::ce_loss_per_sample(&cache.logits, &self.train.labels)?;
        let ce_loss = losses.iter().sum::<f64>() / losses.len() as f64;
        let raan_value = match &self.subset_gi {
            Some(gi) => {
                let z = cache.z.select_rows(&self.subset);
                let l: Vec<f64> = self.subset.iter().map(|&i| losses[i]).collect();
                aan::raan_value(&z, &l, gi, self.tau)?
            }
            None => f64::NAN,
        };
        let rep = fairness_of(params, self.eval)?;
        Ok(EpochMetrics {
            epoch,
            stage,
            raan_value,
            ce_loss,
            accuracy: rep.accuracy,
            dp_gap: rep.dp_gap,
            eo_gap: rep.eo_gap,
            worst_group_acc: rep.worst_group_acc,
        })
    }
}

/// Mean cross-entropy (or any per-sample weighted CE) step over one batch.
fn weighted_ce_step(
    params: &mut ModelParams,
    input: StepInput<'_>,
    batch: &[usize],
    ds: &Dataset,
    weights: &[f64],
    opt: &Optimizer,
    state: &mut Option<OptState>,
    rng: &mut SeededRng,
) -> Result<()> {
    let (cache, scope) = match input {
        StepInput::Embeddings(z) => (
            model::forward_from_embeddings(params, &z.select_rows(batch), true, rng)?,
            Scope::HeadOnly,
        ),
        StepInput::Features(x) => (
            model::forward(params, &x.select_rows(batch), true, rng)?,
            Scope::Full,
        ),
    };
    let labels: Vec<usize> = batch.iter().map(|&i| ds.labels[i]).collect();
    let g = model::backward_weighted(params, &cache, &labels, weights, scope)?;
    opt.step(params, state, &g, scope)
}

/// Two-stage training.
///
/// Stage 1 trains the whole model with mean cross entropy. Stage 2 depends
/// on `cfg.method` (see [`Method`]); head-only variants encode the training
/// set once with the encoder in eval mode and never touch the encoder.
/// Optimizer state is reset at the stage boundary. Metrics are logged after
/// every epoch: the exact RAAN value and mean CE on the training data (RAAN
/// on a fixed subset of at most `eval_subset` samples), accuracy and
/// fairness gaps on `eval` (training data when `None`).
pub fn train(
    ds: &Dataset,
    gi: &GroupIndex,
    params: ModelParams,
    cfg: &TrainConfig,
    opt: &Optimizer,
    eval: Option<&Dataset>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    opt.validate()?;
    if gi.n() != ds.n() {
        return Err(ScraanError::Config("group index does not match the dataset".into()));
    }
    let root = SeededRng::new(cfg.seed);
    let mut batch_rng = root.fork(1);
    let mut drop_rng = root.fork(2);
    let mut subset_rng = root.fork(3);
    let evaluator = Evaluator::new(ds, eval.unwrap_or(ds), cfg, &mut subset_rng);
    let mut params = params;
    let mut log = Vec::with_capacity(cfg.stage1_epochs + cfg.stage2_epochs);
    let mut epoch = 0;

    let mut state = None;
    for _ in 0..cfg.stage1_epochs {
        for batch in stratified_batches(gi, cfg.batch_size, cfg.min_per_cell, &mut batch_rng)? {
            let w = vec![1.0 / batch.len() as f64; batch.len()];
            weighted_ce_step(
                &mut params,
                StepInput::Features(&ds.features),
                &batch,
                ds,
                &w,
                opt,
                &mut state,
                &mut drop_rng,
            )?;
        }
        epoch += 1;
        log.push(evaluator.metrics(&params, epoch, 1)?);
    }

    if cfg.stage2_epochs == 0 {
        return Ok(TrainOutput { params, log });
    }
    let frozen = match cfg.method {
        Method::RaanHeadOnly | Method::BalancedCe => {
            Some(model::encode(&params, &ds.features, false, &mut SeededRng::new(0))?.0)
        }
        _ => None,
    };
    let input = match &frozen {
        Some(z) => StepInput::Embeddings(z),
        None => StepInput::Features(&ds.features),
    };
    let mut state = None;
    let mut stepper = if cfg.method.uses_raan() {
        Some(RaanStepper::new(ds.n(), cfg.tau, cfg.gamma, cfg.u0, *opt)?)
    } else {
        None
    };
    for _ in 0..cfg.stage2_epochs {
        for batch in stratified_batches(gi, cfg.batch_size, cfg.min_per_cell, &mut batch_rng)? {
            match cfg.method {
                Method::CeOnly => {
                    let w = vec![1.0 / batch.len() as f64; batch.len()];
                    weighted_ce_step(&mut params, input, &batch, ds, &w, opt, &mut state, &mut drop_rng)?;
                }
                Method::BalancedCe => {
                    let counts = batch_cell_counts(&batch, gi);
                    let w: Vec<f64> = batch
                        .iter()
                        .map(|&i| batch_center_weight(i, &counts, gi))
                        .collect();
                    weighted_ce_step(&mut params, input, &batch, ds, &w, opt, &mut state, &mut drop_rng)?;
                }
                Method::RaanHeadOnly | Method::RlRaanFull => {
                    let st = stepper.as_mut().expect("stepper exists for RAAN methods");
                    st.step(&mut params, input, &batch, gi, &mut drop_rng)?;
                }
            }
        }
        epoch += 1;
        log.push(evaluator.metrics(&params, epoch, 2)?);
    }
    Ok(TrainOutput { params, log })
}

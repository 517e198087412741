//! MLP split into a feature encoder and a classification head.
//!
//! The encoder maps inputs to embeddings that are L2-normalized row by row;
//! the normalization is part of the differentiated graph. The head maps
//! embeddings to class logits. Hidden layers use ReLU followed by inverted
//! dropout (active only in training mode).
//!
//! Parameters are exposed as one flat vector per [`Scope`]: encoder layers
//! first, then head layers, each layer as its row-major `in x out` weight
//! followed by its bias.

use crate::numkit::{
    dot, l2_normalize_rows, log_sum_exp, matmul, transpose_matmul, DenseMatrix, NumError,
    SeededRng,
};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("input has {got} columns, model expects {expected}")]
    InputDim { expected: usize, got: usize },
    #[error("label {label} at row {row} is outside [0, {classes})")]
    Label { row: usize, label: usize, classes: usize },
    #[error("length mismatch: {what} has {got} entries, expected {expected}")]
    Length {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("forward cache holds no encoder intermediates; rerun the forward pass with scope=full")]
    MissingEncoderCache,
    #[error("flat parameter vector has {got} entries, scope {scope:?} needs {expected}")]
    FlatLength {
        scope: Scope,
        expected: usize,
        got: usize,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

/// Which parameters a gradient or update covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    HeadOnly,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub encoder_hidden_dims: Vec<usize>,
    pub embedding_dim: usize,
    pub head_hidden_dims: Vec<usize>,
    pub num_classes: usize,
    pub dropout_rate: f64,
    #[serde(default)]
    pub activation: Activation,
}

impl MlpConfig {
    /// Tabular preset: encoder with one hidden layer of 50 units, two-layer
    /// head with a hidden layer of 50 units, ReLU and dropout 0.2.
    pub fn tabular(input_dim: usize, num_classes: usize) -> Self {
        Self {
            input_dim,
            encoder_hidden_dims: vec![50],
            embedding_dim: 50,
            head_hidden_dims: vec![50],
            num_classes,
            dropout_rate: 0.2,
            activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = std::iter::once(self.input_dim)
            .chain(self.encoder_hidden_dims.iter().copied())
            .chain(std::iter::once(self.embedding_dim))
            .chain(self.head_hidden_dims.iter().copied());
        if dims.into_iter().any(|d| d == 0) {
            return Err(ModelError::Config("all layer dimensions must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(ModelError::Config("num_classes must be >= 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(ModelError::Config("dropout_rate must lie in [0, 1)".into()));
        }
        Ok(())
    }

    fn encoder_shapes(&self) -> Vec<(usize, usize)> {
        chain_shapes(
            self.input_dim,
            &self.encoder_hidden_dims,
            self.embedding_dim,
        )
    }

    fn head_shapes(&self) -> Vec<(usize, usize)> {
        chain_shapes(self.embedding_dim, &self.head_hidden_dims, self.num_classes)
    }
}

fn chain_shapes(input: usize, hidden: &[usize], output: usize) -> Vec<(usize, usize)> {
    let mut dims = Vec::with_capacity(hidden.len() + 2);
    dims.push(input);
    dims.extend_from_slice(hidden);
    dims.push(output);
    dims.windows(2).map(|w| (w[0], w[1])).collect()
}

/// Affine layer `x -> x W + b` with `W` stored as `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: DenseMatrix::zeros(fan_in, fan_out),
            bias: vec![0.0; fan_out],
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.weight.shape()
    }

    fn num_params(&self) -> usize {
        self.weight.data().len() + self.bias.len()
    }

    fn apply(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        let mut out = matmul(x, &self.weight)?;
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(&self.bias) {
                *o += b;
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: MlpConfig,
    pub encoder: Vec<Layer>,
    pub head: Vec<Layer>,
}

/// Fan-in scaled uniform initialization: every weight is drawn from
/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` in layer order (encoder first, row-major);
/// biases start at zero.
pub fn init_params(cfg: &MlpConfig, rng: &mut SeededRng) -> Result<ModelParams> {
    cfg.validate()?;
    let mut build = |shapes: Vec<(usize, usize)>| {
        shapes
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let mut layer = Layer::zeros(fan_in, fan_out);
                for w in layer.weight.data_mut() {
                    *w = rng.uniform_range(-bound, bound);
                }
                layer
            })
            .collect::<Vec<_>>()
    };
    let encoder = build(cfg.encoder_shapes());
    let head = build(cfg.head_shapes());
    Ok(ModelParams {
        config: cfg.clone(),
        encoder,
        head,
    })
}

impl ModelParams {
    pub fn zeros(cfg: &MlpConfig) -> Result<Self> {
        cfg.validate()?;
        let mk = |shapes: Vec<(usize, usize)>| {
            shapes
                .into_iter()
                .map(|(i, o)| Layer::zeros(i, o))
                .collect::<Vec<_>>()
        };
        Ok(Self {
            config: cfg.clone(),
            encoder: mk(cfg.encoder_shapes()),
            head: mk(cfg.head_shapes()),
        })
    }

    fn layers(&self, scope: Scope) -> impl Iterator<Item = &Layer> {
        let enc: &[Layer] = match scope {
            Scope::Full => &self.encoder,
            Scope::HeadOnly => &[],
        };
        enc.iter().chain(self.head.iter())
    }

    pub fn num_encoder_params(&self) -> usize {
        self.encoder.iter().map(Layer::num_params).sum()
    }

    pub fn num_params(&self, scope: Scope) -> usize {
        self.layers(scope).map(Layer::num_params).sum()
    }

    /// Flat copy of the parameters covered by `scope`.
    pub fn flatten(&self, scope: Scope) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params(scope));
        for l in self.layers(scope) {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// Overwrites the parameters covered by `scope` from a flat vector.
    pub fn assign_flat(&mut self, scope: Scope, flat: &[f64]) -> Result<()> {
        let expected = self.num_params(scope);
        if flat.len() != expected {
            return Err(ModelError::FlatLength {
                scope,
                expected,
                got: flat.len(),
            });
        }
        let mut pos = 0;
        let mut fill = |layers: &mut [Layer]| {
            for l in layers {
                let nw = l.weight.data().len();
                l.weight.data_mut().copy_from_slice(&flat[pos..pos + nw]);
                pos += nw;
                let nb = l.bias.len();
                l.bias.copy_from_slice(&flat[pos..pos + nb]);
                pos += nb;
            }
        };
        if scope == Scope::Full {
            fill(&mut self.encoder);
        }
        fill(&mut self.head);
        Ok(())
    }
}

/// Intermediates of one affine layer (plus activation and dropout for hidden layers).
#[derive(Debug, Clone)]
struct LayerTrace {
    input: DenseMatrix,
    pre: DenseMatrix,
    /// Inverted-dropout multipliers (0 or 1/(1-rate)); `None` when dropout was off.
    mask: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct EncoderCache {
    traces: Vec<LayerTrace>,
    norms: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct HeadCache {
    traces: Vec<LayerTrace>,
}

/// Everything a backward pass needs from the matching forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    encoder: Option<EncoderCache>,
    head: HeadCache,
    /// Unit-norm embeddings, one row per sample.
    pub z: DenseMatrix,
    pub logits: DenseMatrix,
}

impl ForwardCache {
    pub fn has_encoder(&self) -> bool {
        self.encoder.is_some()
    }

    pub fn batch_size(&self) -> usize {
        self.z.rows()
    }
}

fn run_stack(
    layers: &[Layer],
    x: &DenseMatrix,
    dropout: f64,
    train_mode: bool,
    rng: &mut SeededRng,
) -> Result<(DenseMatrix, Vec<LayerTrace>)> {
    let mut h = x.clone();
    let mut traces = Vec::with_capacity(layers.len());
    let last = layers.len() - 1;
    for (li, layer) in layers.iter().enumerate() {
        let pre = layer.apply(&h)?;
        let input = std::mem::replace(&mut h, pre.clone());
        let mut mask = None;
        if li < last {
            for v in h.data_mut() {
                *v = v.max(0.0);
            }
            if train_mode && dropout > 0.0 {
                let keep = 1.0 / (1.0 - dropout);
                let m: Vec<f64> = (0..h.data().len())
                    .map(|_| if rng.uniform() < dropout { 0.0 } else { keep })
                    .collect();
                for (v, k) in h.data_mut().iter_mut().zip(&m) {
                    *v *= k;
                }
                mask = Some(m);
            }
        }
        traces.push(LayerTrace { input, pre, mask });
    }
    Ok((h, traces))
}

/// Backpropagates `d_out` through a stack; accumulates parameter gradients
/// into `grads` (same layout as [`ModelParams::flatten`] for these layers)
/// and returns the gradient with respect to the stack input.
fn backprop_stack(
    layers: &[Layer],
    traces: &[LayerTrace],
    d_out: DenseMatrix,
    grads: &mut [f64],
    need_input_grad: bool,
) -> Result<Option<DenseMatrix>> {
    let offsets: Vec<usize> = layers
        .iter()
        .scan(0, |acc, l| {
            let o = *acc;
            *acc += l.num_params();
            Some(o)
        })
        .collect();
    let last = layers.len() - 1;
    let mut d = d_out;
    for li in (0..layers.len()).rev() {
        let layer = &layers[li];
        let tr = &traces[li];
        if li < last {
            // through dropout then ReLU
            for (k, dv) in d.data_mut().iter_mut().enumerate() {
                let m = tr.mask.as_ref().map_or(1.0, |m| m[k]);
                *dv = if tr.pre.data()[k] > 0.0 { *dv * m } else { 0.0 };
            }
        }
        let dw = transpose_matmul(&tr.input, &d)?;
        let off = offsets[li];
        let nw = dw.data().len();
        for (g, v) in grads[off..off + nw].iter_mut().zip(dw.data()) {
            *g += v;
        }
        let bias_grads = &mut grads[off + nw..off + nw + layer.bias.len()];
        for r in 0..d.rows() {
            for (g, v) in bias_grads.iter_mut().zip(d.row(r)) {
                *g += v;
            }
        }
        if li > 0 || need_input_grad {
            // d_input = d * W^T
            let (fan_in, fan_out) = layer.shape();
            let mut d_in = DenseMatrix::zeros(d.rows(), fan_in);
            for r in 0..d.rows() {
                let drow = d.row(r);
                let out = d_in.row_mut(r);
                for (i, o) in out.iter_mut().enumerate() {
                    *o = dot(drow, &layer.weight.data()[i * fan_out..(i + 1) * fan_out]);
                }
            }
            d = d_in;
        }
    }
    Ok(if need_input_grad { Some(d) } else { None })
}

/// Encoder forward pass producing unit-norm embeddings.
pub fn encode(
    params: &ModelParams,
    x: &DenseMatrix,
    train_mode: bool,
    rng: &mut SeededRng,
) -> Result<(DenseMatrix, EncoderCache)> {
    if x.cols() != params.config.input_dim {
        return Err(ModelError::InputDim {
            expected: params.config.input_dim,
            got: x.cols(),
        });
    }
    let (raw, traces) = run_stack(
        &params.encoder,
        x,
        params.config.dropout_rate,
        train_mode,
        rng,
    )?;
    let z = l2_normalize_rows(&raw)?;
    let norms = (0..raw.rows())
        .map(|r| crate::numkit::norm(raw.row(r)))
        .collect();
    Ok((z, EncoderCache { traces, norms }))
}

/// Head forward pass from embeddings to logits.
pub fn head_logits(
    params: &ModelParams,
    z: &DenseMatrix,
    train_mode: bool,
    rng: &mut SeededRng,
) -> Result<(DenseMatrix, HeadCache)> {
    if z.cols() != params.config.embedding_dim {
        return Err(ModelError::InputDim {
            expected: params.config.embedding_dim,
            got: z.cols(),
        });
    }
    let (logits, traces) = run_stack(
        &params.head,
        z,
        params.config.dropout_rate,
        train_mode,
        rng,
    )?;
    Ok((logits, HeadCache { traces }))
}

/// Full forward pass; the encoder intermediates are kept so both scopes can
/// be differentiated.
pub fn forward(
    params: &ModelParams,
    x: &DenseMatrix,
    train_mode: bool,
    rng: &mut SeededRng,
) -> Result<ForwardCache> {
    let (z, enc) = encode(params, x, train_mode, rng)?;
    let (logits, head) = head_logits(params, &z, train_mode, rng)?;
    Ok(ForwardCache {
        encoder: Some(enc),
        head,
        z,
        logits,
    })
}

/// Head-only forward pass from fixed embeddings. The resulting cache only
/// supports [`Scope::HeadOnly`] gradients.
pub fn forward_from_embeddings(
    params: &ModelParams,
    z: &DenseMatrix,
    train_mode: bool,
    rng: &mut SeededRng,
) -> Result<ForwardCache> {
    let (logits, head) = head_logits(params, z, train_mode, rng)?;
    Ok(ForwardCache {
        encoder: None,
        head,
        z: z.clone(),
        logits,
    })
}

/// Per-sample cross entropy `-log softmax(logits_j)[label_j]`.
pub fn ce_loss_per_sample(logits: &DenseMatrix, labels: &[usize]) -> Result<Vec<f64>> {
    check_labels(logits, labels)?;
    Ok((0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            (log_sum_exp(row) - row[labels[r]]).max(0.0)
        })
        .collect())
}

fn check_labels(logits: &DenseMatrix, labels: &[usize]) -> Result<()> {
    if labels.len() != logits.rows() {
        return Err(ModelError::Length {
            what: "labels",
            expected: logits.rows(),
            got: labels.len(),
        });
    }
    let classes = logits.cols();
    for (row, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(ModelError::Label {
                row,
                label,
                classes,
            });
        }
    }
    Ok(())
}

/// Gradient of `Σ_j w_j ℓ_j + Σ_j ⟨extra_dz_j, z_j⟩` with respect to the
/// parameters in `scope`.
///
/// `extra_dz` is an upstream gradient on the unit-norm embeddings (used for
/// the similarity terms of the robust objective); it requires `Scope::Full`
/// to have any effect and is ignored for `HeadOnly`.
pub fn backward(
    params: &ModelParams,
    cache: &ForwardCache,
    labels: &[usize],
    sample_weights: &[f64],
    extra_dz: Option<&DenseMatrix>,
    scope: Scope,
) -> Result<Vec<f64>> {
    check_labels(&cache.logits, labels)?;
    let n = cache.logits.rows();
    if sample_weights.len() != n {
        return Err(ModelError::Length {
            what: "sample_weights",
            expected: n,
            got: sample_weights.len(),
        });
    }
    let enc_cache = match scope {
        Scope::Full => Some(cache.encoder.as_ref().ok_or(ModelError::MissingEncoderCache)?),
        Scope::HeadOnly => None,
    };
    let mut dlogits = cache.logits.clone();
    for r in 0..n {
        let row = dlogits.row_mut(r);
        let lse = log_sum_exp(row);
        for v in row.iter_mut() {
            *v = (*v - lse).exp();
        }
        row[labels[r]] -= 1.0;
        for v in row.iter_mut() {
            *v *= sample_weights[r];
        }
    }
    let n_enc = match scope {
        Scope::Full => params.num_encoder_params(),
        Scope::HeadOnly => 0,
    };
    let mut grads = vec![0.0; params.num_params(scope)];
    let dz = backprop_stack(
        &params.head,
        &cache.head.traces,
        dlogits,
        &mut grads[n_enc..],
        enc_cache.is_some(),
    )?;
    if let (Some(enc), Some(mut dz)) = (enc_cache, dz) {
        if let Some(extra) = extra_dz {
            if extra.shape() != dz.shape() {
                return Err(ModelError::Length {
                    what: "extra_dz",
                    expected: dz.data().len(),
                    got: extra.data().len(),
                });
            }
            for (a, b) in dz.data_mut().iter_mut().zip(extra.data()) {
                *a += b;
            }
        }
        encoder_backward(params, enc, &cache.z, dz, &mut grads[..n_enc])?;
    }
    Ok(grads)
}

/// Backpropagates an embedding gradient through the normalization and the encoder stack.
fn encoder_backward(
    params: &ModelParams,
    enc: &EncoderCache,
    z: &DenseMatrix,
    mut dz: DenseMatrix,
    grads: &mut [f64],
) -> Result<()> {
    // z = u / |u|  =>  du = (dz - z (z . dz)) / |u|
    for r in 0..dz.rows() {
        let zr = z.row(r);
        let proj = dot(zr, dz.row(r));
        let inv = 1.0 / enc.norms[r];
        for (d, zv) in dz.row_mut(r).iter_mut().zip(zr) {
            *d = (*d - zv * proj) * inv;
        }
    }
    backprop_stack(&params.encoder, &enc.traces, dz, grads, false)?;
    Ok(())
}

/// Gradient of `Σ_j w_j ℓ_j` for the given scope.
pub fn backward_weighted(
    params: &ModelParams,
    cache: &ForwardCache,
    labels: &[usize],
    sample_weights: &[f64],
    scope: Scope,
) -> Result<Vec<f64>> {
    backward(params, cache, labels, sample_weights, None, scope)
}

/// Gradient of the embedding inner product `z_i · z_j` with respect to the
/// encoder parameters (batch-local indices).
pub fn backward_similarity(
    params: &ModelParams,
    cache: &ForwardCache,
    i: usize,
    j: usize,
) -> Result<Vec<f64>> {
    let enc = cache.encoder.as_ref().ok_or(ModelError::MissingEncoderCache)?;
    let mut grads = vec![0.0; params.num_encoder_params()];
    if i == j {
        // |z_i|^2 is identically one
        return Ok(grads);
    }
    let mut dz = DenseMatrix::zeros(cache.z.rows(), cache.z.cols());
    dz.row_mut(i).copy_from_slice(cache.z.row(j));
    dz.row_mut(j).copy_from_slice(cache.z.row(i));
    encoder_backward(params, enc, &cache.z, dz, &mut grads)?;
    Ok(grads)
}

/// Class predictions (argmax of logits, ties to the lower index) in eval mode.
pub fn predict(params: &ModelParams, x: &DenseMatrix) -> Result<Vec<usize>> {
    let mut rng = SeededRng::new(0);
    let cache = forward(params, x, false, &mut rng)?;
    Ok(argmax_rows(&cache.logits))
}

pub fn argmax_rows(m: &DenseMatrix) -> Vec<usize> {
    (0..m.rows())
        .map(|r| {
            let row = m.row(r);
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

const CHECKPOINT_MAGIC: &str = "raan-mlp 1";

fn write_dims(out: &mut String, key: &str, dims: &[usize]) {
    out.push_str(key);
    for d in dims {
        let _ = write!(out, " {d}");
    }
    out.push('\n');
}

fn write_values(out: &mut String, values: &[f64]) {
    let mut first = true;
    for v in values {
        if !first {
            out.push(' ');
        }
        first = false;
        let _ = write!(out, "{v:?}");
    }
    out.push('\n');
}

impl ModelParams {
    /// Text checkpoint: a config header followed by each layer's shape line,
    /// one line per weight row and one bias line. Values use Rust's shortest
    /// round-trip float formatting, so `from_checkpoint(to_checkpoint(p)) == p` bitwise.
    pub fn to_checkpoint(&self) -> String {
        let c = &self.config;
        let mut out = String::new();
        out.push_str(CHECKPOINT_MAGIC);
        out.push('\n');
        write_dims(&mut out, "input_dim", &[c.input_dim]);
        write_dims(&mut out, "encoder_hidden_dims", &c.encoder_hidden_dims);
        write_dims(&mut out, "embedding_dim", &[c.embedding_dim]);
        write_dims(&mut out, "head_hidden_dims", &c.head_hidden_dims);
        write_dims(&mut out, "num_classes", &[c.num_classes]);
        let _ = writeln!(out, "dropout_rate {:?}", c.dropout_rate);
        out.push_str("activation relu\n");
        for (part, layers) in [("encoder", &self.encoder), ("head", &self.head)] {
            for (k, l) in layers.iter().enumerate() {
                let (i, o) = l.shape();
                let _ = writeln!(out, "layer {part} {k} {i} {o}");
                for r in 0..i {
                    write_values(&mut out, l.weight.row(r));
                }
                write_values(&mut out, &l.bias);
            }
        }
        out
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let bad = |m: String| ModelError::Checkpoint(m);
        let mut lines = text.lines();
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| bad(format!("unexpected end of file while reading {what}")))
        };
        if next("magic")?.trim() != CHECKPOINT_MAGIC {
            return Err(bad("missing 'raan-mlp 1' header".into()));
        }
        fn keyed<'a>(line: &'a str, key: &str) -> std::result::Result<Vec<&'a str>, ModelError> {
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some(k) if k == key => Ok(parts.collect()),
                _ => Err(ModelError::Checkpoint(format!("expected key '{key}', got '{line}'"))),
            }
        }
        fn usizes(v: &[&str]) -> std::result::Result<Vec<usize>, ModelError> {
            v.iter()
                .map(|s| {
                    s.parse::<usize>()
                        .map_err(|e| ModelError::Checkpoint(format!("bad integer '{s}': {e}")))
                })
                .collect()
        }
        fn floats(line: &str, expected: usize) -> std::result::Result<Vec<f64>, ModelError> {
            let v = line
                .split_whitespace()
                .map(|s| {
                    s.parse::<f64>()
                        .map_err(|e| ModelError::Checkpoint(format!("bad float '{s}': {e}")))
                })
                .collect::<std::result::Result<Vec<f64>, _>>()?;
            if v.len() != expected {
                return Err(ModelError::Checkpoint(format!(
                    "expected {expected} values, found {}",
                    v.len()
                )));
            }
            Ok(v)
        }
        let single = |v: Vec<usize>, key: &str| {
            if v.len() == 1 {
                Ok(v[0])
            } else {
                Err(bad(format!("'{key}' needs exactly one value")))
            }
        };
        let input_dim = single(usizes(&keyed(next("input_dim")?, "input_dim")?)?, "input_dim")?;
        let encoder_hidden_dims = usizes(&keyed(next("encoder_hidden_dims")?, "encoder_hidden_dims")?)?;
        let embedding_dim = single(
            usizes(&keyed(next("embedding_dim")?, "embedding_dim")?)?,
            "embedding_dim",
        )?;
        let head_hidden_dims = usizes(&keyed(next("head_hidden_dims")?, "head_hidden_dims")?)?;
        let num_classes = single(usizes(&keyed(next("num_classes")?, "num_classes")?)?, "num_classes")?;
        let dr = keyed(next("dropout_rate")?, "dropout_rate")?;
        let dropout_rate = dr
            .first()
            .and_then(|s| s.parse::<f64>().ok())
            .ok_or_else(|| bad("bad dropout_rate".into()))?;
        let act = keyed(next("activation")?, "activation")?;
        if act != ["relu"] {
            return Err(bad(format!("unsupported activation {act:?}")));
        }
        let config = MlpConfig {
            input_dim,
            encoder_hidden_dims,
            embedding_dim,
            head_hidden_dims,
            num_classes,
            dropout_rate,
            activation: Activation::Relu,
        };
        let mut params = ModelParams::zeros(&config)?;
        for (part, layers) in [("encoder", &mut params.encoder), ("head", &mut params.head)] {
            for (k, l) in layers.iter_mut().enumerate() {
                let (i, o) = l.shape();
                let header = format!("layer {part} {k} {i} {o}");
                let got = next("layer header")?;
                if got.trim() != header {
                    return Err(bad(format!("expected '{header}', got '{got}'")));
                }
                for r in 0..i {
                    let row = floats(next("weight row")?, o)?;
                    l.weight.row_mut(r).copy_from_slice(&row);
                }
                l.bias = floats(next("bias")?, o)?;
            }
        }
        Ok(params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_checkpoint())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_config() -> MlpConfig {
        MlpConfig {
            input_dim: 3,
            encoder_hidden_dims: vec![5],
            embedding_dim: 4,
            head_hidden_dims: vec![],
            num_classes: 2,
            dropout_rate: 0.2,
            activation: Activation::Relu,
        }
    }

    fn toy_input(rng: &mut SeededRng, n: usize, d: usize) -> DenseMatrix {
        DenseMatrix::from_vec(n, d, (0..n * d).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let cfg = MlpConfig {
            input_dim: 7,
            encoder_hidden_dims: vec![50],
            embedding_dim: 6,
            head_hidden_dims: vec![],
            num_classes: 2,
            dropout_rate: 0.0,
            activation: Activation::Relu,
        };
        let a = init_params(&cfg, &mut SeededRng::new(9)).unwrap();
        let b = init_params(&cfg, &mut SeededRng::new(9)).unwrap();
        assert_eq!(a.flatten(Scope::Full), b.flatten(Scope::Full));
        let shapes: Vec<_> = a.encoder.iter().map(Layer::shape).collect();
        assert_eq!(shapes, vec![(7, 50), (50, 6)]);
        assert_eq!(a.head[0].shape(), (6, 2));
        assert!(a.encoder.iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn init_weights_are_centered() {
        let cfg = MlpConfig {
            input_dim: 400,
            encoder_hidden_dims: vec![],
            embedding_dim: 250,
            head_hidden_dims: vec![],
            num_classes: 2,
            dropout_rate: 0.0,
            activation: Activation::Relu,
        };
        let p = init_params(&cfg, &mut SeededRng::new(3)).unwrap();
        let w = p.encoder[0].weight.data();
        assert_eq!(w.len(), 100_000);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let bound = 1.0 / 20.0;
        // U(-b, b) has standard deviation b / sqrt(3)
        let se = bound / 3f64.sqrt() / (w.len() as f64).sqrt();
        assert!(mean.abs() < 3.0 * se, "mean {mean} se {se}");
        assert!(w.iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn eval_encode_is_deterministic_and_unit_norm() {
        let cfg = toy_config();
        let mut rng = SeededRng::new(1);
        let p = init_params(&cfg, &mut rng).unwrap();
        let x = toy_input(&mut rng, 9, 3);
        let (z1, _) = encode(&p, &x, false, &mut SeededRng::new(5)).unwrap();
        let (z2, _) = encode(&p, &x, false, &mut SeededRng::new(6)).unwrap();
        assert_eq!(z1, z2);
        for i in 0..9 {
            assert!((crate::numkit::norm(z1.row(i)) - 1.0).abs() < 1e-12);
            for j in 0..9 {
                let s = dot(z1.row(i), z1.row(j));
                assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&s));
            }
        }
    }

    #[test]
    fn identity_encoder_normalizes() {
        let cfg = MlpConfig {
            input_dim: 2,
            encoder_hidden_dims: vec![],
            embedding_dim: 2,
            head_hidden_dims: vec![],
            num_classes: 2,
            dropout_rate: 0.0,
            activation: Activation::Relu,
        };
        let mut p = ModelParams::zeros(&cfg).unwrap();
        p.encoder[0].weight = DenseMatrix::identity(2);
        let x = DenseMatrix::from_rows(&[[3.0, 4.0]]).unwrap();
        let (z, _) = encode(&p, &x, false, &mut SeededRng::new(0)).unwrap();
        assert!((z.get(0, 0) - 0.6).abs() < 1e-15 && (z.get(0, 1) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn head_shapes_and_zero_weights() {
        let cfg = toy_config();
        let p = ModelParams::zeros(&cfg).unwrap();
        let mut rng = SeededRng::new(2);
        let z = crate::numkit::l2_normalize_rows(&toy_input(&mut rng, 17, 4)).unwrap();
        let (logits, _) = head_logits(&p, &z, false, &mut rng).unwrap();
        assert_eq!(logits.shape(), (17, 2));
        assert!(logits.data().iter().all(|&v| v == 0.0));

        let p = init_params(&cfg, &mut SeededRng::new(4)).unwrap();
        let (a, _) = head_logits(&p, &z, false, &mut SeededRng::new(10)).unwrap();
        let (b, _) = head_logits(&p, &z, false, &mut SeededRng::new(11)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dimension_errors() {
        let cfg = toy_config();
        let p = ModelParams::zeros(&cfg).unwrap();
        let x = DenseMatrix::zeros(2, 5);
        assert!(matches!(
            encode(&p, &x, false, &mut SeededRng::new(0)),
            Err(ModelError::InputDim { expected: 3, got: 5 })
        ));
        assert!(matches!(
            head_logits(&p, &x, false, &mut SeededRng::new(0)),
            Err(ModelError::InputDim { expected: 4, got: 5 })
        ));
    }

    #[test]
    fn cross_entropy_values() {
        let logits = DenseMatrix::from_rows(&[[0.0, 0.0], [3.0, 3.0]]).unwrap();
        let l = ce_loss_per_sample(&logits, &[0, 1]).unwrap();
        for v in l {
            assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
        }
        let logits = DenseMatrix::from_rows(&[[800.0, -800.0]]).unwrap();
        let l = ce_loss_per_sample(&logits, &[0]).unwrap();
        assert!(l[0] >= 0.0 && l[0] < 1e-300);
        assert!(matches!(
            ce_loss_per_sample(&logits, &[2]),
            Err(ModelError::Label { label: 2, .. })
        ));
    }

    #[test]
    fn cross_entropy_matches_direct_formula() {
        let mut rng = SeededRng::new(8);
        let logits = toy_input(&mut rng, 20, 3);
        let labels: Vec<usize> = (0..20).map(|i| i % 3).collect();
        let l = ce_loss_per_sample(&logits, &labels).unwrap();
        for r in 0..20 {
            let row = logits.row(r);
            let s: f64 = row.iter().map(|v| v.exp()).sum();
            let direct = -(row[labels[r]].exp() / s).ln();
            assert!((l[r] - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_weights_give_zero_gradient() {
        let cfg = toy_config();
        let mut rng = SeededRng::new(12);
        let p = init_params(&cfg, &mut rng).unwrap();
        let x = toy_input(&mut rng, 4, 3);
        let cache = forward(&p, &x, false, &mut rng).unwrap();
        let g = backward_weighted(&p, &cache, &[0, 1, 0, 1], &[0.0; 4], Scope::Full).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn full_scope_needs_encoder_cache() {
        let cfg = toy_config();
        let mut rng = SeededRng::new(12);
        let p = init_params(&cfg, &mut rng).unwrap();
        let z = crate::numkit::l2_normalize_rows(&toy_input(&mut rng, 3, 4)).unwrap();
        let cache = forward_from_embeddings(&p, &z, false, &mut rng).unwrap();
        assert!(matches!(
            backward_weighted(&p, &cache, &[0, 1, 0], &[1.0; 3], Scope::Full),
            Err(ModelError::MissingEncoderCache)
        ));
        assert!(matches!(
            backward_similarity(&p, &cache, 0, 1),
            Err(ModelError::MissingEncoderCache)
        ));
        assert!(backward_weighted(&p, &cache, &[0, 1, 0], &[1.0; 3], Scope::HeadOnly).is_ok());
    }

    #[test]
    fn self_similarity_gradient_is_zero() {
        let cfg = toy_config();
        let mut rng = SeededRng::new(13);
        let p = init_params(&cfg, &mut rng).unwrap();
        let x = toy_input(&mut rng, 4, 3);
        let cache = forward(&p, &x, false, &mut rng).unwrap();
        let g = backward_similarity(&p, &cache, 2, 2).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_encoder_similarity_gradient_by_hand() {
        // z = Wx / |Wx| with W = I (2x2) and orthogonal unit inputs e1, e2.
        // d(z1.z2)/dW = (I - z1 z1^T) z2 x1^T + (I - z2 z2^T) z1 x2^T
        //             = e2 e1^T + e1 e2^T  (since z1 = e1, z2 = e2, norms 1).
        // With W stored as in x out (z = x W), dW[in][out] = [[0,1],[1,0]].
        let cfg = MlpConfig {
            input_dim: 2,
            encoder_hidden_dims: vec![],
            embedding_dim: 2,
            head_hidden_dims: vec![],
            num_classes: 2,
            dropout_rate: 0.0,
            activation: Activation::Relu,
        };
        let mut p = ModelParams::zeros(&cfg).unwrap();
        p.encoder[0].weight = DenseMatrix::identity(2);
        let x = DenseMatrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let cache = forward(&p, &x, false, &mut SeededRng::new(0)).unwrap();
        let g = backward_similarity(&p, &cache, 0, 1).unwrap();
        // bias gradient is the row sum of the pre-normalization gradients: (1, 1)
        let expected = [0.0, 1.0, 1.0, 0.0, 1.0, 1.0];
        for (a, b) in g.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15, "{g:?}");
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let cfg = MlpConfig::tabular(6, 3);
        let p = init_params(&cfg, &mut SeededRng::new(77)).unwrap();
        let text = p.to_checkpoint();
        let q = ModelParams::from_checkpoint(&text).unwrap();
        assert_eq!(p.config, q.config);
        let (a, b) = (p.flatten(Scope::Full), q.flatten(Scope::Full));
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(ModelParams::from_checkpoint("nonsense").is_err());
    }

    #[test]
    fn flat_round_trip() {
        let cfg = toy_config();
        let mut p = init_params(&cfg, &mut SeededRng::new(1)).unwrap();
        let mut flat = p.flatten(Scope::HeadOnly);
        flat.iter_mut().for_each(|v| *v += 1.0);
        p.assign_flat(Scope::HeadOnly, &flat).unwrap();
        assert_eq!(p.flatten(Scope::HeadOnly), flat);
        assert!(p.assign_flat(Scope::Full, &flat).is_err());
    }
}

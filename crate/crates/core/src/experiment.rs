//! Config-driven experiment runner.
//!
//! One TOML file describes a full run (see `configs/` for annotated
//! presets). Relative paths inside a config resolve against the directory
//! containing the config file.

use crate::data::{
    gen_gaussian_groups, gen_spurious_envs, load_csv, save_csv, CsvSchema, DataError, Dataset, EnvSpec,
    GaussianGroupSpec,
};
use crate::model::{self, init_params, Activation, MlpConfig, ModelError};
use crate::numkit::SeededRng;
use crate::scraan::{
    self, fairness_of, write_metrics_csv, AdamConfig, Method, Optimizer, ScraanError, SgdConfig,
    TrainConfig,
};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{path}: invalid configuration:\n  {}", .violations.join("\n  "))]
    Invalid {
        path: PathBuf,
        violations: Vec<String>,
    },
    #[error("dataset: {0}")]
    Data(#[from] DataError),
    #[error("dataset {path}: {source}")]
    Load { path: PathBuf, source: DataError },
    #[error("model: {0}")]
    Model(#[from] ModelError),
    #[error("training: {0}")]
    Train(#[from] ScraanError),
    #[error("compare: {0}")]
    Compare(String),
    #[error("unknown data preset '{0}' (expected gaussian_biased, gaussian_fair, spurious_train or spurious_test)")]
    UnknownPreset(String),
}

impl ExperimentError {
    /// Whether the failure is a configuration problem (as opposed to a runtime one).
    pub fn is_validation(&self) -> bool {
        matches!(self, ExperimentError::Parse { .. } | ExperimentError::Invalid { .. })
    }
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    seed: Option<u64>,
    dataset: Option<RawDataset>,
    model: Option<RawModel>,
    training: Option<RawTraining>,
    optimizer: Option<RawOptimizer>,
    output: Option<RawOutput>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDataset {
    generator: Option<String>,
    per_cell: Option<usize>,
    train_p_e: Option<Vec<f64>>,
    test_p_e: Option<f64>,
    samples_per_env: Option<usize>,
    test_samples: Option<usize>,
    feature_dim: Option<usize>,
    class_signal: Option<f64>,
    attr_signal: Option<f64>,
    noise_std: Option<f64>,
    csv_path: Option<PathBuf>,
    test_csv_path: Option<PathBuf>,
    label_column: Option<String>,
    attribute_column: Option<String>,
    num_classes: Option<usize>,
    num_attributes: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    encoder_hidden_dims: Option<Vec<usize>>,
    embedding_dim: Option<usize>,
    head_hidden_dims: Option<Vec<usize>>,
    dropout_rate: Option<f64>,
    activation: Option<Activation>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTraining {
    method: Option<Method>,
    stage1_epochs: Option<usize>,
    stage2_epochs: Option<usize>,
    batch_size: Option<usize>,
    tau: Option<f64>,
    gamma: Option<f64>,
    min_per_cell: Option<usize>,
    u0: Option<f64>,
    eval_subset: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOptimizer {
    kind: Option<String>,
    lr: Option<f64>,
    eps: Option<f64>,
    eta1: Option<f64>,
    eta2: Option<f64>,
    amsgrad: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    dir: Option<PathBuf>,
    emit_embeddings: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    Gaussian {
        spec: GaussianGroupSpec,
    },
    Spurious {
        train: Vec<EnvSpec>,
        test: EnvSpec,
    },
    Csv {
        path: PathBuf,
        test_path: Option<PathBuf>,
        schema: CsvSchema,
    },
}

/// Validated experiment description.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub path: PathBuf,
    pub seed: u64,
    pub dataset: DatasetSource,
    /// The `[dataset]` table as written, for like-for-like checks in [`compare`].
    dataset_table: RawDataset,
    pub encoder_hidden_dims: Vec<usize>,
    pub embedding_dim: usize,
    pub head_hidden_dims: Vec<usize>,
    pub dropout_rate: f64,
    pub training: TrainConfig,
    pub optimizer: Optimizer,
    pub output_dir: PathBuf,
    pub emit_embeddings: bool,
}

const GENERATORS: [&str; 3] = ["gaussian_biased", "gaussian_fair", "spurious"];

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

struct Checker {
    violations: Vec<String>,
}

impl Checker {
    fn require<T: Clone>(&mut self, v: &Option<T>, field: &str) -> Option<T> {
        if v.is_none() {
            self.violations.push(format!("{field} is required"));
        }
        v.clone()
    }

    fn check(&mut self, ok: bool, msg: impl FnOnce() -> String) {
        if !ok {
            self.violations.push(msg());
        }
    }
}

fn interpret(raw: RawConfig, path: &Path) -> std::result::Result<ExperimentConfig, Vec<String>> {
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut ck = Checker { violations: Vec::new() };
    let seed = raw.seed.unwrap_or(0);

    // dataset
    let ds = raw.dataset.clone().unwrap_or_default();
    if raw.dataset.is_none() {
        ck.violations.push("dataset section is required".into());
    }
    let dataset = match (&ds.generator, &ds.csv_path) {
        (Some(_), Some(_)) => {
            ck.violations
                .push("dataset.generator and dataset.csv_path are mutually exclusive; set exactly one".into());
            None
        }
        (None, None) => {
            if raw.dataset.is_some() {
                ck.violations
                    .push("dataset needs exactly one source: dataset.generator or dataset.csv_path".into());
            }
            None
        }
        (Some(g), None) => match g.as_str() {
            "gaussian_biased" | "gaussian_fair" => {
                let per_cell = ds.per_cell.unwrap_or(500);
                ck.check(per_cell >= 1, || "dataset.per_cell must be >= 1".into());
                let spec = if g == "gaussian_biased" {
                    GaussianGroupSpec::biased(per_cell)
                } else {
                    GaussianGroupSpec::fair(per_cell)
                };
                Some(DatasetSource::Gaussian { spec })
            }
            "spurious" => {
                let mut env = EnvSpec::new(0.0, ds.samples_per_env.unwrap_or(1000));
                if let Some(d) = ds.feature_dim {
                    env.feature_dim = d;
                }
                if let Some(v) = ds.class_signal {
                    env.class_signal = v;
                }
                if let Some(v) = ds.attr_signal {
                    env.attr_signal = v;
                }
                if let Some(v) = ds.noise_std {
                    env.noise_std = v;
                }
                let train_pe = ds.train_p_e.clone().unwrap_or_else(|| vec![0.1, 0.2]);
                let test_pe = ds.test_p_e.unwrap_or(0.9);
                ck.check(!train_pe.is_empty(), || "dataset.train_p_e must list at least one environment".into());
                for (k, p) in train_pe.iter().enumerate() {
                    ck.check((0.0..=1.0).contains(p), || {
                        format!("dataset.train_p_e[{k}] must lie in [0,1], got {p}")
                    });
                }
                ck.check((0.0..=1.0).contains(&test_pe), || {
                    format!("dataset.test_p_e must lie in [0,1], got {test_pe}")
                });
                ck.check(env.samples_per_env >= 2 && env.samples_per_env % 2 == 0, || {
                    "dataset.samples_per_env must be a positive even number".into()
                });
                let test_n = ds.test_samples.unwrap_or(env.samples_per_env);
                ck.check(test_n >= 2 && test_n % 2 == 0, || {
                    "dataset.test_samples must be a positive even number".into()
                });
                ck.check(env.feature_dim >= 2, || "dataset.feature_dim must be >= 2".into());
                ck.check(env.noise_std >= 0.0, || "dataset.noise_std must be >= 0".into());
                let train = train_pe
                    .iter()
                    .map(|&p| EnvSpec { p_e: p, ..env.clone() })
                    .collect();
                let test = EnvSpec {
                    p_e: test_pe,
                    samples_per_env: test_n,
                    ..env
                };
                Some(DatasetSource::Spurious { train, test })
            }
            other => {
                ck.violations.push(format!(
                    "dataset.generator '{other}' is unknown (expected one of {})",
                    GENERATORS.join(", ")
                ));
                None
            }
        },
        (None, Some(p)) => {
            let schema = CsvSchema {
                label_column: ds.label_column.clone().unwrap_or_else(|| "label".into()),
                attribute_column: ds.attribute_column.clone().unwrap_or_else(|| "attribute".into()),
                num_classes: ds.num_classes.unwrap_or(2),
                num_attributes: ds.num_attributes.unwrap_or(2),
            };
            ck.check(schema.num_classes >= 2, || "dataset.num_classes must be >= 2".into());
            ck.check(schema.num_attributes >= 2, || "dataset.num_attributes must be >= 2".into());
            Some(DatasetSource::Csv {
                path: resolve(&base, p),
                test_path: ds.test_csv_path.as_ref().map(|t| resolve(&base, t)),
                schema,
            })
        }
    };
    let cells = match &dataset {
        Some(DatasetSource::Csv { schema, .. }) => schema.num_classes * schema.num_attributes,
        _ => 4,
    };

    // model
    let m = raw.model.clone().unwrap_or_default();
    let encoder_hidden_dims = m.encoder_hidden_dims.unwrap_or_else(|| vec![50]);
    let embedding_dim = m.embedding_dim.unwrap_or(50);
    let head_hidden_dims = m.head_hidden_dims.unwrap_or_else(|| vec![50]);
    let dropout_rate = m.dropout_rate.unwrap_or(0.2);
    ck.check(encoder_hidden_dims.iter().all(|&d| d >= 1), || {
        "model.encoder_hidden_dims entries must be >= 1".into()
    });
    ck.check(head_hidden_dims.iter().all(|&d| d >= 1), || {
        "model.head_hidden_dims entries must be >= 1".into()
    });
    ck.check(embedding_dim >= 1, || "model.embedding_dim must be >= 1".into());
    ck.check((0.0..1.0).contains(&dropout_rate), || {
        format!("model.dropout_rate must lie in [0,1), got {dropout_rate}")
    });

    // training
    let t = raw.training.clone().unwrap_or_default();
    if raw.training.is_none() {
        ck.violations.push("training section is required".into());
    }
    let method = if raw.training.is_some() {
        ck.require(&t.method, "training.method")
    } else {
        None
    };
    let mut training = TrainConfig::new(method.unwrap_or(Method::CeOnly), seed);
    if let Some(m) = method {
        if m.uses_raan() {
            for (v, f) in [(&t.tau, "training.tau"), (&t.gamma, "training.gamma")] {
                ck.check(v.is_some(), || format!("{f} is required when training.method = {}", m.name()));
            }
        }
    }
    training.stage1_epochs = t.stage1_epochs.unwrap_or(training.stage1_epochs);
    training.stage2_epochs = t.stage2_epochs.unwrap_or(training.stage2_epochs);
    training.batch_size = t.batch_size.unwrap_or(training.batch_size);
    training.tau = t.tau.unwrap_or(training.tau);
    training.gamma = t.gamma.unwrap_or(training.gamma);
    training.min_per_cell = t.min_per_cell.unwrap_or(training.min_per_cell);
    training.u0 = t.u0.unwrap_or(training.u0);
    training.eval_subset = t.eval_subset.unwrap_or(training.eval_subset);
    ck.check(training.gamma > 0.0 && training.gamma <= 1.0, || {
        format!("training.gamma must lie in (0,1], got {}", training.gamma)
    });
    ck.check(training.tau > 0.0 && training.tau.is_finite(), || {
        format!("training.tau must be positive, got {}", training.tau)
    });
    ck.check(training.min_per_cell >= 1, || "training.min_per_cell must be >= 1".into());
    ck.check(training.batch_size >= cells * training.min_per_cell, || {
        format!(
            "training.batch_size must be at least cells ({cells}) x training.min_per_cell ({}) = {}, got {}",
            training.min_per_cell,
            cells * training.min_per_cell,
            training.batch_size
        )
    });
    ck.check(training.u0 > 0.0, || format!("training.u0 must be positive, got {}", training.u0));
    ck.check(training.eval_subset >= 1, || "training.eval_subset must be >= 1".into());

    // optimizer
    let o = raw.optimizer.clone().unwrap_or_default();
    let lr = o.lr.unwrap_or(1e-3);
    ck.check(lr > 0.0 && lr.is_finite(), || format!("optimizer.lr must be positive, got {lr}"));
    let optimizer = match o.kind.as_deref().unwrap_or("adam") {
        "sgd" => Optimizer::Sgd(SgdConfig { alpha: lr }),
        kind => {
            ck.check(kind == "adam", || {
                format!("optimizer.kind '{kind}' is unknown (expected adam or sgd)")
            });
            let d = AdamConfig::default();
            let c = AdamConfig {
                alpha: lr,
                eps: o.eps.unwrap_or(d.eps),
                eta1: o.eta1.unwrap_or(d.eta1),
                eta2: o.eta2.unwrap_or(d.eta2),
                amsgrad: o.amsgrad.unwrap_or(false),
            };
            ck.check(c.eps > 0.0, || format!("optimizer.eps must be positive, got {}", c.eps));
            ck.check((0.0..1.0).contains(&c.eta1), || {
                format!("optimizer.eta1 must lie in [0,1), got {}", c.eta1)
            });
            ck.check((0.0..1.0).contains(&c.eta2), || {
                format!("optimizer.eta2 must lie in [0,1), got {}", c.eta2)
            });
            ck.check(c.eta1 <= c.eta2.sqrt(), || {
                format!(
                    "optimizer.eta1 must not exceed sqrt(optimizer.eta2): {} > {:.6}",
                    c.eta1,
                    c.eta2.sqrt()
                )
            });
            Optimizer::Adam(c)
        }
    };

    // output
    let out = raw.output.clone().unwrap_or_default();
    let dir = ck.require(&out.dir, "output.dir");

    if !ck.violations.is_empty() {
        return Err(ck.violations);
    }
    Ok(ExperimentConfig {
        path: path.to_path_buf(),
        seed,
        dataset: dataset.expect("checked above"),
        dataset_table: ds,
        encoder_hidden_dims,
        embedding_dim,
        head_hidden_dims,
        dropout_rate,
        training,
        optimizer,
        output_dir: resolve(&base, &dir.expect("checked above")),
        emit_embeddings: out.emit_embeddings.unwrap_or(false),
    })
}

/// Parses and validates a config file.
pub fn load_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ExperimentError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    let raw: RawConfig = toml::from_str(&text).map_err(|e| ExperimentError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    interpret(raw, path).map_err(|violations| ExperimentError::Invalid {
        path: path.to_path_buf(),
        violations,
    })
}

/// Every violated invariant of a config file; empty when the file is valid.
/// Only an unreadable file is an error.
pub fn validate_config(path: impl AsRef<Path>) -> Result<Vec<String>> {
    match load_config(path) {
        Ok(_) => Ok(Vec::new()),
        Err(ExperimentError::Parse { message, .. }) => Ok(vec![message.trim().to_string()]),
        Err(ExperimentError::Invalid { violations, .. }) => Ok(violations),
        Err(e) => Err(e),
    }
}

impl ExperimentConfig {
    /// Non-fatal remarks about the config (currently: multi-valued attributes).
    pub fn warnings(&self) -> Vec<String> {
        match &self.dataset {
            DatasetSource::Csv { schema, .. } if schema.num_attributes > 2 => vec![format!(
                "dataset.num_attributes = {} is experimental: neighborhoods and fairness metrics are validated for binary attributes only",
                schema.num_attributes
            )],
            _ => Vec::new(),
        }
    }

    pub fn method(&self) -> Method {
        self.training.method
    }

    /// Same config with another seed (training and data generation).
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        c.training.seed = seed;
        c
    }

    /// Training set and optional held-out evaluation set.
    pub fn build_datasets(&self) -> Result<(Dataset, Option<Dataset>)> {
        let root = SeededRng::new(self.seed);
        Ok(match &self.dataset {
            DatasetSource::Gaussian { spec } => (
                gen_gaussian_groups(spec, &mut root.fork(100))?,
                Some(gen_gaussian_groups(spec, &mut root.fork(101))?),
            ),
            DatasetSource::Spurious { train, test } => {
                let (envs, test) = gen_spurious_envs(train, test, &mut root.fork(100))?;
                (Dataset::concat("train", &envs)?, Some(test))
            }
            DatasetSource::Csv {
                path,
                test_path,
                schema,
            } => {
                let load = |p: &PathBuf| {
                    load_csv(p, schema).map_err(|source| ExperimentError::Load {
                        path: p.clone(),
                        source,
                    })
                };
                (load(path)?, test_path.as_ref().map(load).transpose()?)
            }
        })
    }

    pub fn model_config(&self, input_dim: usize, num_classes: usize) -> MlpConfig {
        MlpConfig {
            input_dim,
            encoder_hidden_dims: self.encoder_hidden_dims.clone(),
            embedding_dim: self.embedding_dim,
            head_hidden_dims: self.head_hidden_dims.clone(),
            num_classes,
            dropout_rate: self.dropout_rate,
            activation: Activation::Relu,
        }
    }
}

/// Final evaluation written to `final_metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: String,
    pub seed: u64,
    pub evaluated_on: String,
    pub accuracy: f64,
    pub dp_gap: f64,
    pub eo_gap: f64,
    pub worst_group_acc: f64,
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|source| ExperimentError::Write {
        path: path.to_path_buf(),
        source,
    })
}

/// Runs the two-stage pipeline and writes `metrics.csv`, `final_metrics.json`,
/// `model.ckpt` and (if enabled) `embeddings.csv` into the output directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary> {
    let (train, test) = cfg.build_datasets()?;
    let gi = train.group_index()?;
    let mcfg = cfg.model_config(train.dim(), train.num_classes);
    let params = init_params(&mcfg, &mut SeededRng::new(cfg.seed).fork(7))?;
    let out = scraan::train(&train, &gi, params, &cfg.training, &cfg.optimizer, test.as_ref())?;

    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir).map_err(|source| ExperimentError::Write {
        path: dir.clone(),
        source,
    })?;
    write_metrics_csv(&out.log, dir.join("metrics.csv"))?;
    let eval = test.as_ref().unwrap_or(&train);
    let rep = fairness_of(&out.params, eval)?;
    let summary = RunSummary {
        method: cfg.method().name().to_string(),
        seed: cfg.seed,
        evaluated_on: if test.is_some() { "test" } else { "train" }.to_string(),
        accuracy: rep.accuracy,
        dp_gap: rep.dp_gap,
        eo_gap: rep.eo_gap,
        worst_group_acc: rep.worst_group_acc,
    };
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_file(&dir.join("final_metrics.json"), &(json + "\n"))?;
    write_file(&dir.join("model.ckpt"), &out.params.to_checkpoint())?;
    if cfg.emit_embeddings {
        let (z, _) = model::encode(&out.params, &train.features, false, &mut SeededRng::new(0))?;
        let mut s = String::from("sample_id,attribute,label");
        for k in 0..z.cols() {
            let _ = write!(s, ",z{k}");
        }
        s.push('\n');
        for i in 0..z.rows() {
            let _ = write!(s, "{},{},{}", i, train.attributes[i], train.labels[i]);
            for v in z.row(i) {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        write_file(&dir.join("embeddings.csv"), &s)?;
    }
    Ok(summary)
}

/// Loads, optionally re-seeds, and runs a config file.
pub fn run_config(path: impl AsRef<Path>, seed: Option<u64>) -> Result<RunSummary> {
    let cfg = load_config(path)?;
    let cfg = match seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    };
    run_experiment(&cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub method: String,
    pub runs: usize,
    /// `(mean, std)` for accuracy, ΔDP, ΔEO and worst-group accuracy.
    pub stats: [(f64, f64); 4],
}

pub const COMPARE_HEADER: &str = "method,runs,accuracy_mean,accuracy_std,dp_gap_mean,dp_gap_std,eo_gap_mean,eo_gap_std,worst_group_acc_mean,worst_group_acc_std";

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Runs every config (for each seed in `seeds`, or its own seed when empty)
/// and writes a per-method mean ± sample-std table to `out`.
///
/// With explicit seeds each run writes into `<output.dir>/seed<k>`.
/// All configs must share an identical `[dataset]` table.
pub fn compare(paths: &[PathBuf], seeds: &[u64], out: impl AsRef<Path>) -> Result<Vec<CompareRow>> {
    if paths.is_empty() {
        return Err(ExperimentError::Compare("no configs given".into()));
    }
    let configs = paths.iter().map(load_config).collect::<Result<Vec<_>>>()?;
    if configs.len() * seeds.len().max(1) < 2 {
        return Err(ExperimentError::Compare(
            "need at least two runs (pass several configs or several --seeds)".into(),
        ));
    }
    for c in &configs[1..] {
        if c.dataset_table != configs[0].dataset_table {
            return Err(ExperimentError::Compare(format!(
                "dataset blocks differ between {} and {}; compared runs must use the same data",
                configs[0].path.display(),
                c.path.display()
            )));
        }
    }
    let mut groups: Vec<(String, Vec<RunSummary>)> = Vec::new();
    for c in &configs {
        let runs: Vec<ExperimentConfig> = if seeds.is_empty() {
            vec![c.clone()]
        } else {
            seeds
                .iter()
                .map(|&s| {
                    let mut r = c.with_seed(s);
                    r.output_dir = c.output_dir.join(format!("seed{s}"));
                    r
                })
                .collect()
        };
        for r in runs {
            let s = run_experiment(&r)?;
            match groups.iter_mut().find(|(m, _)| *m == s.method) {
                Some((_, v)) => v.push(s),
                None => groups.push((s.method.clone(), vec![s])),
            }
        }
    }
    let rows: Vec<CompareRow> = groups
        .into_iter()
        .map(|(method, runs)| {
            let col = |f: fn(&RunSummary) -> f64| mean_std(&runs.iter().map(f).collect::<Vec<_>>());
            CompareRow {
                method,
                runs: runs.len(),
                stats: [
                    col(|r| r.accuracy),
                    col(|r| r.dp_gap),
                    col(|r| r.eo_gap),
                    col(|r| r.worst_group_acc),
                ],
            }
        })
        .collect();
    let mut s = String::from(COMPARE_HEADER);
    s.push('\n');
    for r in &rows {
        let _ = write!(s, "{},{}", r.method, r.runs);
        for (m, sd) in r.stats {
            let _ = write!(s, ",{m},{sd}");
        }
        s.push('\n');
    }
    let out = out.as_ref();
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|source| ExperimentError::Write {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    write_file(out, &s)?;
    Ok(rows)
}

/// Writes a generated dataset to CSV. Presets: `gaussian_biased`,
/// `gaussian_fair` (500 per cell), `spurious_train` (environments with
/// p_e 0.1 and 0.2, 1000 samples each) and `spurious_test` (p_e 0.9).
pub fn gen_data(preset: &str, seed: u64, out: impl AsRef<Path>) -> Result<Dataset> {
    let root = SeededRng::new(seed);
    let ds = match preset {
        "gaussian_biased" => gen_gaussian_groups(&GaussianGroupSpec::biased(500), &mut root.fork(100))?,
        "gaussian_fair" => gen_gaussian_groups(&GaussianGroupSpec::fair(500), &mut root.fork(100))?,
        "spurious_train" | "spurious_test" => {
            let (envs, test) = gen_spurious_envs(
                &[EnvSpec::new(0.1, 1000), EnvSpec::new(0.2, 1000)],
                &EnvSpec::new(0.9, 1000),
                &mut root.fork(100),
            )?;
            if preset == "spurious_train" {
                Dataset::concat("train", &envs)?
            } else {
                test
            }
        }
        other => return Err(ExperimentError::UnknownPreset(other.to_string())),
    };
    save_csv(&ds, out)?;
    Ok(ds)
}

//! Datasets, synthetic generators, CSV I/O and the stratified batch sampler.
//!
//! CSV format: comma separated, UTF-8, header row, `.` decimal point. One
//! column holds the integer class label, one the integer attribute, and
//! every other column is a numeric feature (in header order).

use crate::aan::{build_group_index, AanError, GroupIndex};
use crate::numkit::{DenseMatrix, SeededRng};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Group(#[from] AanError),
    #[error("column '{0}' not found in header")]
    MissingColumn(String),
    #[error("row {row}, column '{column}': cannot parse '{value}' as a {expected}")]
    Parse {
        row: usize,
        column: String,
        value: String,
        expected: &'static str,
    },
    #[error("row {row}, column '{column}': value {value} is outside [0, {bound})")]
    Cardinality {
        row: usize,
        column: String,
        value: usize,
        bound: usize,
    },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("infeasible batch quota: {0}")]
    Quota(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub features: DenseMatrix,
    pub labels: Vec<usize>,
    pub attributes: Vec<usize>,
    pub num_classes: usize,
    pub num_attributes: usize,
    pub feature_names: Vec<String>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        features: DenseMatrix,
        labels: Vec<usize>,
        attributes: Vec<usize>,
        num_classes: usize,
        num_attributes: usize,
    ) -> Result<Self> {
        let feature_names = (0..features.cols()).map(|k| format!("x{k}")).collect();
        let ds = Self {
            name: name.into(),
            features,
            labels,
            attributes,
            num_classes,
            num_attributes,
            feature_names,
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        let n = self.features.rows();
        if n == 0 {
            return Err(DataError::Invalid("dataset has no rows".into()));
        }
        if self.labels.len() != n || self.attributes.len() != n {
            return Err(DataError::Invalid(format!(
                "{n} feature rows but {} labels and {} attributes",
                self.labels.len(),
                self.attributes.len()
            )));
        }
        if self.feature_names.len() != self.features.cols() {
            return Err(DataError::Invalid("feature name count differs from columns".into()));
        }
        if let Some(i) = self.labels.iter().position(|&y| y >= self.num_classes) {
            return Err(DataError::Invalid(format!("label at row {i} is >= {}", self.num_classes)));
        }
        if let Some(i) = self.attributes.iter().position(|&a| a >= self.num_attributes) {
            return Err(DataError::Invalid(format!(
                "attribute at row {i} is >= {}",
                self.num_attributes
            )));
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.features.rows()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn group_index(&self) -> Result<GroupIndex> {
        Ok(build_group_index(
            &self.labels,
            &self.attributes,
            self.num_classes,
            self.num_attributes,
        )?)
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            attributes: idx.iter().map(|&i| self.attributes[i]).collect(),
            num_classes: self.num_classes,
            num_attributes: self.num_attributes,
            feature_names: self.feature_names.clone(),
        }
    }

    /// Row-wise concatenation of datasets with identical schemas.
    pub fn concat(name: impl Into<String>, parts: &[Dataset]) -> Result<Dataset> {
        let first = parts
            .first()
            .ok_or_else(|| DataError::Invalid("nothing to concatenate".into()))?;
        let mut data = Vec::new();
        let (mut labels, mut attributes) = (Vec::new(), Vec::new());
        for p in parts {
            if p.dim() != first.dim()
                || p.num_classes != first.num_classes
                || p.num_attributes != first.num_attributes
            {
                return Err(DataError::Invalid("concatenated datasets differ in schema".into()));
            }
            data.extend_from_slice(p.features.data());
            labels.extend_from_slice(&p.labels);
            attributes.extend_from_slice(&p.attributes);
        }
        let rows = labels.len();
        let mut ds = Dataset::new(
            name,
            DenseMatrix::from_vec(rows, first.dim(), data).map_err(|e| DataError::Invalid(e.to_string()))?,
            labels,
            attributes,
            first.num_classes,
            first.num_attributes,
        )?;
        ds.feature_names = first.feature_names.clone();
        Ok(ds)
    }
}

/// One Gaussian blob with diagonal covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianCell {
    pub label: usize,
    pub attribute: usize,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianGroupSpec {
    pub cells: Vec<GaussianCell>,
}

impl GaussianGroupSpec {
    /// Four cells in 2-D: class means `(∓class_offset, 0)`, attribute `a`
    /// shifted by `(0, ±attr_shift)` (minus for `a = 0`), isotropic variance.
    pub fn two_by_two(class_offset: f64, attr_shift: f64, variance: f64, per_cell: usize) -> Self {
        let mut cells = Vec::with_capacity(4);
        for label in 0..2 {
            for attribute in 0..2 {
                let cx = if label == 0 { -class_offset } else { class_offset };
                let cy = if attribute == 0 { -attr_shift } else { attr_shift };
                cells.push(GaussianCell {
                    label,
                    attribute,
                    mean: vec![cx, cy],
                    variance: vec![variance; 2],
                    count: per_cell,
                });
            }
        }
        Self { cells }
    }

    /// Biased regime: the attribute moves points within each class.
    pub fn biased(per_cell: usize) -> Self {
        Self::two_by_two(1.0, 0.75, 0.4, per_cell)
    }

    /// Fair regime: attribute groups share each class distribution.
    pub fn fair(per_cell: usize) -> Self {
        Self::two_by_two(1.0, 0.0, 0.4, per_cell)
    }

    fn validate(&self) -> Result<(usize, usize, usize)> {
        let first = self
            .cells
            .first()
            .ok_or_else(|| DataError::Invalid("gaussian spec has no cells".into()))?;
        let dim = first.mean.len();
        if dim == 0 {
            return Err(DataError::Invalid("gaussian means must be non-empty".into()));
        }
        for (k, c) in self.cells.iter().enumerate() {
            if c.mean.len() != dim || c.variance.len() != dim {
                return Err(DataError::Invalid(format!("cell {k}: mean/variance dimension differs")));
            }
            if c.count == 0 {
                return Err(DataError::Invalid(format!("cell {k}: count must be >= 1")));
            }
            if c.variance.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                return Err(DataError::Invalid(format!("cell {k}: variances must be positive")));
            }
        }
        let classes = self.cells.iter().map(|c| c.label).max().unwrap_or(0) + 1;
        let attrs = self.cells.iter().map(|c| c.attribute).max().unwrap_or(0) + 1;
        Ok((dim, classes.max(2), attrs.max(2)))
    }
}

/// Draws every cell's points in spec order.
pub fn gen_gaussian_groups(spec: &GaussianGroupSpec, rng: &mut SeededRng) -> Result<Dataset> {
    let (dim, classes, attrs) = spec.validate()?;
    let mut data = Vec::new();
    let (mut labels, mut attributes) = (Vec::new(), Vec::new());
    for c in &spec.cells {
        let sd: Vec<f64> = c.variance.iter().map(|v| v.sqrt()).collect();
        for _ in 0..c.count {
            for d in 0..dim {
                data.push(c.mean[d] + sd[d] * rng.normal());
            }
            labels.push(c.label);
            attributes.push(c.attribute);
        }
    }
    let n = labels.len();
    Dataset::new(
        "gaussian",
        DenseMatrix::from_vec(n, dim, data).map_err(|e| DataError::Invalid(e.to_string()))?,
        labels,
        attributes,
        classes,
        attrs,
    )
}

/// One label-switching environment.
///
/// Labels are balanced; within each class exactly `round(p_e · n/2)`
/// samples get the switched attribute `a = 1 − y`, the rest `a = y`, so
/// `p(a = z | y = 1 − z)` equals `p_e` to within one sample. Features are
/// `±class_signal` on axis 0, `±attr_signal` on axis 1 (sign from `y` and
/// `a` respectively) plus isotropic Gaussian noise on every axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub p_e: f64,
    pub samples_per_env: usize,
    pub feature_dim: usize,
    pub class_signal: f64,
    pub attr_signal: f64,
    pub noise_std: f64,
}

impl EnvSpec {
    pub fn new(p_e: f64, samples_per_env: usize) -> Self {
        Self {
            p_e,
            samples_per_env,
            feature_dim: 8,
            class_signal: 0.5,
            attr_signal: 1.0,
            noise_std: 1.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_e) {
            return Err(DataError::Invalid(format!("p_e = {} is outside [0, 1]", self.p_e)));
        }
        if self.samples_per_env == 0 || self.samples_per_env % 2 != 0 {
            return Err(DataError::Quota(format!(
                "samples_per_env = {} must be a positive even number for balanced classes",
                self.samples_per_env
            )));
        }
        if self.feature_dim < 2 {
            return Err(DataError::Invalid("feature_dim must be >= 2".into()));
        }
        if !(self.noise_std >= 0.0) {
            return Err(DataError::Invalid("noise_std must be >= 0".into()));
        }
        Ok(())
    }

    /// Number of switched-attribute samples per class.
    pub fn switched_per_class(&self) -> usize {
        (self.p_e * (self.samples_per_env / 2) as f64).round() as usize
    }
}

fn gen_env(spec: &EnvSpec, name: String, rng: &mut SeededRng) -> Result<Dataset> {
    spec.validate()?;
    let half = spec.samples_per_env / 2;
    let k = spec.switched_per_class();
    let mut labels = Vec::with_capacity(spec.samples_per_env);
    let mut attributes = Vec::with_capacity(spec.samples_per_env);
    for y in 0..2usize {
        let mut switched: Vec<bool> = (0..half).map(|j| j < k).collect();
        rng.shuffle(&mut switched);
        for s in switched {
            labels.push(y);
            attributes.push(if s { 1 - y } else { y });
        }
    }
    let n = labels.len();
    let d = spec.feature_dim;
    let mut data = Vec::with_capacity(n * d);
    for i in 0..n {
        let sy = if labels[i] == 1 { 1.0 } else { -1.0 };
        let sa = if attributes[i] == 1 { 1.0 } else { -1.0 };
        for axis in 0..d {
            let signal = match axis {
                0 => sy * spec.class_signal,
                1 => sa * spec.attr_signal,
                _ => 0.0,
            };
            data.push(signal + spec.noise_std * rng.normal());
        }
    }
    Dataset::new(
        name,
        DenseMatrix::from_vec(n, d, data).map_err(|e| DataError::Invalid(e.to_string()))?,
        labels,
        attributes,
        2,
        2,
    )
}

/// Training environments followed by one test environment, each drawn
/// from its own fork of `rng`.
pub fn gen_spurious_envs(
    train_specs: &[EnvSpec],
    test_spec: &EnvSpec,
    rng: &mut SeededRng,
) -> Result<(Vec<Dataset>, Dataset)> {
    if train_specs.is_empty() {
        return Err(DataError::Invalid("at least one training environment is required".into()));
    }
    let dim = test_spec.feature_dim;
    if train_specs.iter().any(|s| s.feature_dim != dim) {
        return Err(DataError::Invalid("all environments must share feature_dim".into()));
    }
    let base = rng.next_u64();
    let mut train = Vec::with_capacity(train_specs.len());
    for (e, spec) in train_specs.iter().enumerate() {
        let mut r = SeededRng::new(base).fork(e as u64);
        train.push(gen_env(spec, format!("env{e}"), &mut r)?);
    }
    let mut r = SeededRng::new(base).fork(train_specs.len() as u64);
    let test = gen_env(test_spec, "test".into(), &mut r)?;
    Ok((train, test))
}

/// Column roles for [`load_csv`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub label_column: String,
    pub attribute_column: String,
    pub num_classes: usize,
    pub num_attributes: usize,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            label_column: "label".into(),
            attribute_column: "attribute".into(),
            num_classes: 2,
            num_attributes: 2,
        }
    }
}

/// Loads a dataset; row numbers in errors count data rows from 1 (the header is not counted).
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let label_col = find(&schema.label_column)?;
    let attr_col = find(&schema.attribute_column)?;
    let feature_cols: Vec<usize> = (0..header.len())
        .filter(|&k| k != label_col && k != attr_col)
        .collect();
    let mut data = Vec::new();
    let (mut labels, mut attributes) = (Vec::new(), Vec::new());
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let row = r + 1;
        let cell = |k: usize| record.get(k).unwrap_or("").trim();
        let int = |k: usize, bound: usize| -> Result<usize> {
            let v = cell(k).parse::<usize>().map_err(|_| DataError::Parse {
                row,
                column: header[k].clone(),
                value: cell(k).to_string(),
                expected: "non-negative integer",
            })?;
            if v >= bound {
                return Err(DataError::Cardinality {
                    row,
                    column: header[k].clone(),
                    value: v,
                    bound,
                });
            }
            Ok(v)
        };
        labels.push(int(label_col, schema.num_classes)?);
        attributes.push(int(attr_col, schema.num_attributes)?);
        for &k in &feature_cols {
            let v = cell(k).parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                DataError::Parse {
                    row,
                    column: header[k].clone(),
                    value: cell(k).to_string(),
                    expected: "finite number",
                }
            })?;
            data.push(v);
        }
    }
    let n = labels.len();
    let features = DenseMatrix::from_vec(n, feature_cols.len(), data)
        .map_err(|e| DataError::Invalid(e.to_string()))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "csv".into());
    let mut ds = Dataset::new(
        name,
        features,
        labels,
        attributes,
        schema.num_classes,
        schema.num_attributes,
    )?;
    ds.feature_names = feature_cols.iter().map(|&k| header[k].clone()).collect();
    Ok(ds)
}

/// Writes features (shortest round-trip decimals) followed by `label` and `attribute` columns.
pub fn save_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = ds.feature_names.clone();
    header.push("label".into());
    header.push("attribute".into());
    w.write_record(&header)?;
    for i in 0..ds.n() {
        let mut rec: Vec<String> = ds.features.row(i).iter().map(|v| v.to_string()).collect();
        rec.push(ds.labels[i].to_string());
        rec.push(ds.attributes[i].to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// One epoch of batches, each holding at least `m` distinct indices from
/// every (class, attribute) cell.
///
/// Per batch: `m` indices are drawn from each cell (cycling through a
/// shuffled copy of the cell, reshuffled on wrap-around), then the batch is
/// filled from a shuffled pass over indices not yet seen this epoch. The
/// epoch ends once every index has appeared, so the last batch may be short.
pub fn stratified_batches(
    gi: &GroupIndex,
    batch_size: usize,
    m: usize,
    rng: &mut SeededRng,
) -> Result<Vec<Vec<usize>>> {
    let need = gi.num_cells() * m;
    if m == 0 {
        return Err(DataError::Quota("per-cell quota must be >= 1".into()));
    }
    if batch_size < need {
        return Err(DataError::Quota(format!(
            "batch_size {batch_size} < cells ({}) x per-cell quota ({m}) = {need}",
            gi.num_cells()
        )));
    }
    if let Some(((c, a), cell)) = gi.cells().find(|(_, cell)| cell.len() < m) {
        return Err(DataError::Quota(format!(
            "cell (class {c}, attribute {a}) has {} samples, fewer than the quota {m}",
            cell.len()
        )));
    }
    let n = gi.n();
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let mut cell_cycles: Vec<(Vec<usize>, usize)> = gi
        .cells()
        .map(|(_, cell)| {
            let mut v = cell.to_vec();
            rng.shuffle(&mut v);
            (v, 0)
        })
        .collect();
    let mut covered = vec![false; n];
    let mut in_batch = vec![false; n];
    let mut remaining = n;
    let mut cursor = 0;
    let mut batches = Vec::new();
    while remaining > 0 {
        let mut batch = Vec::with_capacity(batch_size);
        for (cycle, pos) in cell_cycles.iter_mut() {
            let mut taken = 0;
            while taken < m {
                if *pos == cycle.len() {
                    rng.shuffle(cycle);
                    *pos = 0;
                }
                let j = cycle[*pos];
                *pos += 1;
                if in_batch[j] {
                    continue;
                }
                in_batch[j] = true;
                batch.push(j);
                taken += 1;
                if !covered[j] {
                    covered[j] = true;
                    remaining -= 1;
                }
            }
        }
        while batch.len() < batch_size && cursor < n {
            let j = order[cursor];
            cursor += 1;
            if covered[j] {
                continue;
            }
            covered[j] = true;
            remaining -= 1;
            in_batch[j] = true;
            batch.push(j);
        }
        for &j in &batch {
            in_batch[j] = false;
        }
        batches.push(batch);
    }
    Ok(batches)
}

//! Adversarial-attribute neighborhoods and the robust objective built on them.
//!
//! For a sample `i` with class `c` and attribute `a`, its neighborhood is
//! `P_i = D^c \ D^c_a`: same-class samples carrying a different attribute.
//! Each center spreads a unit of weight over `P_i` with the KL-regularized
//! worst case, which is a temperature softmax over embedding similarities.

use crate::numkit::{dot, stable_softmax, DenseMatrix, NumError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AanError {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("length mismatch: {what} has {got} entries, expected {expected}")]
    Length {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{what} {value} at index {index} is outside [0, {bound})")]
    OutOfRange {
        what: &'static str,
        index: usize,
        value: usize,
        bound: usize,
    },
    #[error("empty (class, attribute) cells: {}", fmt_cells(.0))]
    EmptyCells(Vec<(usize, usize)>),
    #[error("sample {0} has no adversarial-attribute neighbor in the given subset")]
    EmptyNeighborhood(usize),
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("normalizer component must be positive, got {0}")]
    NonPositiveNormalizer(f64),
    #[error("exp(similarity / tau) overflowed at tau = {0}; use a larger temperature")]
    Overflow(f64),
    #[error("simplex oracle did not converge after {iterations} iterations (last move {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
}

fn fmt_cells(cells: &[(usize, usize)]) -> String {
    cells
        .iter()
        .map(|(c, a)| format!("(class {c}, attribute {a})"))
        .collect::<Vec<_>>()
        .join(", ")
}

pub type Result<T> = std::result::Result<T, AanError>;

/// Partition of sample indices by (class, attribute) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupIndex {
    num_classes: usize,
    num_attributes: usize,
    labels: Vec<usize>,
    attributes: Vec<usize>,
    cells: Vec<Vec<usize>>,
    class_lists: Vec<Vec<usize>>,
}

pub fn build_group_index(
    labels: &[usize],
    attributes: &[usize],
    num_classes: usize,
    num_attributes: usize,
) -> Result<GroupIndex> {
    if attributes.len() != labels.len() {
        return Err(AanError::Length {
            what: "attributes",
            expected: labels.len(),
            got: attributes.len(),
        });
    }
    let mut cells = vec![Vec::new(); num_classes * num_attributes];
    let mut class_lists = vec![Vec::new(); num_classes];
    for (i, (&c, &a)) in labels.iter().zip(attributes).enumerate() {
        if c >= num_classes {
            return Err(AanError::OutOfRange {
                what: "label",
                index: i,
                value: c,
                bound: num_classes,
            });
        }
        if a >= num_attributes {
            return Err(AanError::OutOfRange {
                what: "attribute",
                index: i,
                value: a,
                bound: num_attributes,
            });
        }
        cells[c * num_attributes + a].push(i);
        class_lists[c].push(i);
    }
    let empty: Vec<(usize, usize)> = (0..num_classes)
        .flat_map(|c| (0..num_attributes).map(move |a| (c, a)))
        .filter(|&(c, a)| cells[c * num_attributes + a].is_empty())
        .collect();
    if !empty.is_empty() {
        return Err(AanError::EmptyCells(empty));
    }
    Ok(GroupIndex {
        num_classes,
        num_attributes,
        labels: labels.to_vec(),
        attributes: attributes.to_vec(),
        cells,
        class_lists,
    })
}

impl GroupIndex {
    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_attributes(&self) -> usize {
        self.num_attributes
    }

    /// `A * C`, the number of cells.
    pub fn num_cells(&self) -> usize {
        self.num_classes * self.num_attributes
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn attribute(&self, i: usize) -> usize {
        self.attributes[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn attributes(&self) -> &[usize] {
        &self.attributes
    }

    /// `D^c_a`, sorted ascending.
    pub fn cell(&self, c: usize, a: usize) -> &[usize] {
        &self.cells[c * self.num_attributes + a]
    }

    /// Cells in (class-major, attribute-minor) order.
    pub fn cells(&self) -> impl Iterator<Item = ((usize, usize), &[usize])> {
        self.cells.iter().enumerate().map(move |(k, v)| {
            ((k / self.num_attributes, k % self.num_attributes), v.as_slice())
        })
    }

    /// `D^c`, sorted ascending.
    pub fn class_list(&self, c: usize) -> &[usize] {
        &self.class_lists[c]
    }

    /// The cell containing sample `i`.
    pub fn own_cell(&self, i: usize) -> &[usize] {
        self.cell(self.labels[i], self.attributes[i])
    }

    /// Whether `j ∈ P_i`.
    pub fn is_neighbor(&self, i: usize, j: usize) -> bool {
        self.labels[i] == self.labels[j] && self.attributes[i] != self.attributes[j]
    }

    /// `P_i = D^c \ D^c_a`, sorted ascending. For binary attributes this is
    /// the single opposite cell.
    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        let (c, a) = (self.labels[i], self.attributes[i]);
        if self.num_attributes == 2 {
            return self.cell(c, 1 - a).to_vec();
        }
        self.class_lists[c]
            .iter()
            .copied()
            .filter(|&j| self.attributes[j] != a)
            .collect()
    }

    /// Per-center weight `1 / (A C |D^{c_i}_{a_i}|)` under which the mean of
    /// the per-center robust losses equals the RAAN objective.
    pub fn center_weight(&self, i: usize) -> f64 {
        1.0 / (self.num_cells() as f64 * self.own_cell(i).len() as f64)
    }
}

/// Scalar pair `(g1, g2)` of the inner function: weighted-loss numerator and normalizer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InnerValue {
    pub g1: f64,
    pub g2: f64,
}

impl InnerValue {
    /// `f(g) = g1 / g2`.
    pub fn f(&self) -> f64 {
        self.g1 / self.g2
    }

    pub fn scale(&self, c: f64) -> InnerValue {
        InnerValue {
            g1: c * self.g1,
            g2: c * self.g2,
        }
    }
}

/// `∇f(g) = (1/g2, -g1/g2²)`.
pub fn grad_f(g: InnerValue) -> Result<[f64; 2]> {
    if g.g2 <= 0.0 || g.g2.is_nan() {
        return Err(AanError::NonPositiveNormalizer(g.g2));
    }
    Ok([1.0 / g.g2, -g.g1 / (g.g2 * g.g2)])
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(AanError::Temperature(tau))
    }
}

fn check_z(z: &DenseMatrix, gi: &GroupIndex) -> Result<()> {
    if z.rows() != gi.n() {
        return Err(AanError::Length {
            what: "embedding rows",
            expected: gi.n(),
            got: z.rows(),
        });
    }
    Ok(())
}

fn check_losses(losses: &[f64], gi: &GroupIndex) -> Result<()> {
    if losses.len() != gi.n() {
        return Err(AanError::Length {
            what: "losses",
            expected: gi.n(),
            got: losses.len(),
        });
    }
    Ok(())
}

/// Closed-form KL-DRO weights of center `i` over `neighbors`:
/// `p_ij = softmax_j(z_i·z_j / τ)`.
pub fn pair_weights(z: &DenseMatrix, i: usize, neighbors: &[usize], tau: f64) -> Result<Vec<f64>> {
    check_tau(tau)?;
    if neighbors.is_empty() {
        return Err(AanError::EmptyNeighborhood(i));
    }
    let zi = z.row(i);
    let sims: Vec<f64> = neighbors.iter().map(|&j| dot(zi, z.row(j))).collect();
    Ok(stable_softmax(&sims, tau)?)
}

/// Numerical maximizer of `Σ p_j s_j − τ KL(p ‖ uniform)` over the simplex.
///
/// Scaled projected gradient ascent: the ascent direction is the gradient
/// projected onto the simplex tangent space in the metric `diag(p/τ)` (the
/// inverse curvature of the entropy term), with step halving until the
/// iterate stays strictly positive and the objective does not decrease.
/// Stops when successive iterates move less than 1e-10 (max norm), at most
/// 10⁴ iterations. Test oracle only; it never evaluates the closed form.
pub fn dro_oracle(similarities: &[f64], tau: f64) -> Result<Vec<f64>> {
    const MAX_ITER: usize = 10_000;
    const TOL: f64 = 1e-10;
    check_tau(tau)?;
    let n = similarities.len();
    if n == 0 {
        return Err(AanError::Num(NumError::Empty("dro_oracle")));
    }
    let nf = n as f64;
    let objective = |p: &[f64]| -> f64 {
        p.iter()
            .zip(similarities)
            .map(|(&pj, &sj)| pj * sj - tau * pj * (nf * pj).ln())
            .sum()
    };
    let mut p = vec![1.0 / nf; n];
    let mut obj = objective(&p);
    let mut residual = f64::INFINITY;
    for _ in 0..MAX_ITER {
        let grad: Vec<f64> = p
            .iter()
            .zip(similarities)
            .map(|(&pj, &sj)| sj - tau * (1.0 + (nf * pj).ln()))
            .collect();
        let lambda: f64 = p.iter().zip(&grad).map(|(pj, gj)| pj * gj).sum();
        let dir: Vec<f64> = p
            .iter()
            .zip(&grad)
            .map(|(&pj, &gj)| pj / tau * (gj - lambda))
            .collect();
        let mut step = 1.0;
        let mut next;
        loop {
            next = p
                .iter()
                .zip(&dir)
                .map(|(pj, dj)| pj + step * dj)
                .collect::<Vec<f64>>();
            if next.iter().all(|&v| v > 0.0) {
                let s: f64 = next.iter().sum();
                next.iter_mut().for_each(|v| *v /= s);
                let cand = objective(&next);
                if cand >= obj - 1e-15 * obj.abs().max(1.0) {
                    obj = cand;
                    break;
                }
            }
            step *= 0.5;
            if step < 1e-30 {
                return Err(AanError::NoConvergence {
                    iterations: MAX_ITER,
                    residual,
                });
            }
        }
        residual = p
            .iter()
            .zip(&next)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        p = next;
        if residual < TOL {
            return Ok(p);
        }
    }
    Err(AanError::NoConvergence {
        iterations: MAX_ITER,
        residual,
    })
}

/// Aggregated per-sample robust weights
/// `p_j = Σ_{i ∈ P_j} p_ij / |D^{c_i}_{a_i}|`.
///
/// For binary attributes `|D^{c_i}_{a_i}| = |P_j|`, so this is the
/// `(1/|P_j|) Σ_{i∈P_j} p_ij` aggregation; for more attributes the cell-size
/// factor keeps the identity `RAAN = Σ_j p_j ℓ_j / (AC)` exact.
pub fn sample_weights(z: &DenseMatrix, gi: &GroupIndex, tau: f64) -> Result<Vec<f64>> {
    check_z(z, gi)?;
    let mut p = vec![0.0; gi.n()];
    for i in 0..gi.n() {
        let nb = gi.neighbors(i);
        let w = pair_weights(z, i, &nb, tau)?;
        let scale = 1.0 / gi.own_cell(i).len() as f64;
        for (&j, wij) in nb.iter().zip(w) {
            p[j] += wij * scale;
        }
    }
    Ok(p)
}

/// Per-center robust losses `ℓ_i^AAN = Σ_{j∈P_i} p_ij ℓ_j`.
pub fn aan_losses(z: &DenseMatrix, losses: &[f64], gi: &GroupIndex, tau: f64) -> Result<Vec<f64>> {
    check_z(z, gi)?;
    check_losses(losses, gi)?;
    (0..gi.n())
        .map(|i| {
            let nb = gi.neighbors(i);
            let w = pair_weights(z, i, &nb, tau)?;
            Ok(nb.iter().zip(w).map(|(&j, wij)| wij * losses[j]).sum())
        })
        .collect()
}

/// RAAN via aggregated weights: `(1/(AC)) Σ_j p_j ℓ_j`.
pub fn raan_value(z: &DenseMatrix, losses: &[f64], gi: &GroupIndex, tau: f64) -> Result<f64> {
    check_losses(losses, gi)?;
    let p = sample_weights(z, gi, tau)?;
    let total: f64 = p.iter().zip(losses).map(|(pj, lj)| pj * lj).sum();
    Ok(total / gi.num_cells() as f64)
}

/// RAAN via per-center robust losses:
/// `(1/C) Σ_c (1/A) Σ_a (1/|D^c_a|) Σ_{i∈D^c_a} ℓ_i^AAN`.
pub fn raan_value_by_centers(
    z: &DenseMatrix,
    losses: &[f64],
    gi: &GroupIndex,
    tau: f64,
) -> Result<f64> {
    let aan = aan_losses(z, losses, gi, tau)?;
    Ok(cell_balanced_mean(&aan, gi))
}

/// `(1/(AC)) Σ_{(c,a)} mean_{j∈D^c_a} v_j`.
pub fn cell_balanced_mean(values: &[f64], gi: &GroupIndex) -> f64 {
    let total: f64 = gi
        .cells()
        .map(|(_, cell)| cell.iter().map(|&j| values[j]).sum::<f64>() / cell.len() as f64)
        .sum();
    total / gi.num_cells() as f64
}

/// Inner function of center `i` restricted to `subset`:
/// `g = (n/(AC)) (1/|P̂_i|) Σ_{j∈P̂_i} exp(z_i·z_j/τ) (ℓ_j, 1)` with
/// `P̂_i = P_i ∩ subset`. With `subset` = all samples this is the exact `g_i`.
///
/// The exponentials are not shifted (the constant matters for the moving
/// averages), so `τ` much below 1/700 overflows and is reported as an error.
pub fn inner_g(
    z: &DenseMatrix,
    losses: &[f64],
    i: usize,
    subset: &[usize],
    gi: &GroupIndex,
    tau: f64,
) -> Result<InnerValue> {
    check_tau(tau)?;
    check_z(z, gi)?;
    check_losses(losses, gi)?;
    let zi = z.row(i);
    let terms = subset
        .iter()
        .filter(|&&j| gi.is_neighbor(i, j))
        .map(|&j| (dot(zi, z.row(j)), losses[j]));
    inner_from_terms(terms, gi, tau)?.ok_or(AanError::EmptyNeighborhood(i))
}

/// Shared kernel: `terms` yields `(similarity, loss)` for each neighbor in
/// the subset; `None` when there are none.
pub(crate) fn inner_from_terms(
    terms: impl Iterator<Item = (f64, f64)>,
    gi: &GroupIndex,
    tau: f64,
) -> Result<Option<InnerValue>> {
    let (mut s1, mut s2, mut count) = (0.0, 0.0, 0usize);
    for (s, l) in terms {
        let e = (s / tau).exp();
        s1 += e * l;
        s2 += e;
        count += 1;
    }
    if count == 0 {
        return Ok(None);
    }
    if !s1.is_finite() || !s2.is_finite() {
        return Err(AanError::Overflow(tau));
    }
    let k = gi.n() as f64 / (gi.num_cells() as f64 * count as f64);
    Ok(Some(InnerValue {
        g1: k * s1,
        g2: k * s2,
    }))
}

/// Compositional form `Σ_i π_i f(g_i)` with center weights
/// `π_i = 1/(AC |D^{c_i}_{a_i}|)`; equals [`raan_value`] for any cell sizes.
pub fn compositional_value(
    z: &DenseMatrix,
    losses: &[f64],
    gi: &GroupIndex,
    tau: f64,
) -> Result<f64> {
    let all: Vec<usize> = (0..gi.n()).collect();
    let mut total = 0.0;
    for i in 0..gi.n() {
        total += gi.center_weight(i) * inner_g(z, losses, i, &all, gi, tau)?.f();
    }
    Ok(total)
}

/// Unweighted compositional mean `(1/n) Σ_i f(g_i)`. Coincides with
/// [`raan_value`] only when all cells have the same size.
pub fn compositional_value_uniform(
    z: &DenseMatrix,
    losses: &[f64],
    gi: &GroupIndex,
    tau: f64,
) -> Result<f64> {
    let all: Vec<usize> = (0..gi.n()).collect();
    let mut total = 0.0;
    for i in 0..gi.n() {
        total += inner_g(z, losses, i, &all, gi, tau)?.f();
    }
    Ok(total / gi.n() as f64)
}

/// Exact partial derivatives of RAAN with respect to the per-sample losses
/// and the unit-norm embeddings.
#[derive(Debug, Clone)]
pub struct RaanGradient {
    /// `∂R/∂ℓ_j = p_j / (AC)`.
    pub loss_coef: Vec<f64>,
    /// `∂R/∂z_j`, one row per sample.
    pub dz: DenseMatrix,
}

/// `∂R/∂s_ik = π_i p_ik (ℓ_k − ℓ_i^AAN) / τ` for every center `i` and
/// `k ∈ P_i`, pushed onto both embeddings of the pair.
pub fn raan_gradient(
    z: &DenseMatrix,
    losses: &[f64],
    gi: &GroupIndex,
    tau: f64,
) -> Result<RaanGradient> {
    check_z(z, gi)?;
    check_losses(losses, gi)?;
    let n = gi.n();
    let mut loss_coef = vec![0.0; n];
    let mut dz = DenseMatrix::zeros(n, z.cols());
    for i in 0..n {
        let nb = gi.neighbors(i);
        let w = pair_weights(z, i, &nb, tau)?;
        let pi = gi.center_weight(i);
        let li: f64 = nb.iter().zip(&w).map(|(&k, wk)| wk * losses[k]).sum();
        for (&k, &wik) in nb.iter().zip(&w) {
            loss_coef[k] += pi * wik;
            let d = pi * wik * (losses[k] - li) / tau;
            for c in 0..z.cols() {
                let (zi, zk) = (z.get(i, c), z.get(k, c));
                dz.row_mut(i)[c] += d * zk;
                dz.row_mut(k)[c] += d * zi;
            }
        }
    }
    Ok(RaanGradient { loss_coef, dz })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{l2_normalize_rows, SeededRng};

    fn toy_index() -> GroupIndex {
        build_group_index(&[0, 0, 0, 1, 1, 1], &[0, 0, 1, 0, 1, 1], 2, 2).unwrap()
    }

    fn random_unit(rng: &mut SeededRng, n: usize, d: usize) -> DenseMatrix {
        let m = DenseMatrix::from_vec(n, d, (0..n * d).map(|_| rng.normal()).collect()).unwrap();
        l2_normalize_rows(&m).unwrap()
    }

    #[test]
    fn cells_and_neighborhoods() {
        let gi = toy_index();
        assert_eq!(gi.cell(0, 0), &[0, 1]);
        assert_eq!(gi.cell(0, 1), &[2]);
        assert_eq!(gi.cell(1, 0), &[3]);
        assert_eq!(gi.cell(1, 1), &[4, 5]);
        assert_eq!(gi.neighbors(0), vec![2]);
        assert_eq!(gi.neighbors(2), vec![0, 1]);
        assert_eq!(gi.class_list(1), &[3, 4, 5]);
        let mut all: Vec<usize> = gi.cells().flat_map(|(_, c)| c.to_vec()).collect();
        all.sort();
        assert_eq!(all, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn empty_cell_is_reported() {
        let err = build_group_index(&[0, 0, 1], &[0, 1, 0], 2, 2).unwrap_err();
        assert_eq!(err.to_string(), "empty (class, attribute) cells: (class 1, attribute 1)");
        assert!(matches!(
            build_group_index(&[0, 2], &[0, 1], 2, 2),
            Err(AanError::OutOfRange { what: "label", index: 1, .. })
        ));
    }

    #[test]
    fn three_attribute_neighborhood_excludes_own_cell() {
        let gi = build_group_index(&[0, 0, 0, 0, 1, 1, 1], &[0, 1, 2, 1, 0, 1, 2], 2, 3).unwrap();
        assert_eq!(gi.neighbors(1), vec![0, 2]);
        assert_eq!(gi.neighbors(0), vec![1, 2, 3]);
        for i in 0..gi.n() {
            let nb = gi.neighbors(i);
            assert!(!nb.contains(&i));
            assert!(nb.iter().all(|&j| gi.attribute(j) != gi.attribute(i)));
        }
    }

    #[test]
    fn pair_weights_limits() {
        let z = DenseMatrix::from_rows(&[[1.0, 0.0], [0.6, 0.8], [0.6, -0.8], [0.0, 1.0]]).unwrap();
        let w = pair_weights(&z, 0, &[1, 2], 0.7).unwrap();
        assert!((w[0] - 0.5).abs() < 1e-15 && (w[1] - 0.5).abs() < 1e-15);
        let w = pair_weights(&z, 1, &[0, 3], 1e-3).unwrap();
        assert!(w[1] > 1.0 - 1e-6, "{w:?}");
        assert!(matches!(
            pair_weights(&z, 0, &[], 1.0),
            Err(AanError::EmptyNeighborhood(0))
        ));
    }

    #[test]
    fn oracle_symmetry_and_flat_limit() {
        let p = dro_oracle(&[0.3, 0.3], 0.2).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-12 && (p[1] - 0.5).abs() < 1e-12);
        let p = dro_oracle(&[0.9, -0.4, 0.1, 0.0], 1e3).unwrap();
        assert!(p.iter().all(|v| (v - 0.25).abs() < 1e-3));
    }

    #[test]
    fn oracle_matches_closed_form() {
        let mut rng = SeededRng::new(17);
        for _ in 0..100 {
            let m = 2 + rng.below(30);
            let tau = [0.1, 0.5, 1.0, 2.0][rng.below(4)];
            let s: Vec<f64> = (0..m).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
            let a = dro_oracle(&s, tau).unwrap();
            let b = stable_softmax(&s, tau).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn weights_monotone_in_similarity() {
        let mut rng = SeededRng::new(5);
        let s: Vec<f64> = (0..6).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let before = stable_softmax(&s, 0.4).unwrap();
        let mut s2 = s.clone();
        s2[2] += 0.05;
        let after = stable_softmax(&s2, 0.4).unwrap();
        for k in 0..6 {
            if k == 2 {
                assert!(after[k] > before[k]);
            } else {
                assert!(after[k] < before[k]);
            }
        }
    }

    #[test]
    fn symmetric_embedding_gives_inverse_cell_sizes() {
        // all embeddings identical => every similarity equals one
        let gi = toy_index();
        let z = DenseMatrix::from_vec(6, 2, [1.0, 0.0].repeat(6)).unwrap();
        let p = sample_weights(&z, &gi, 0.3).unwrap();
        for j in 0..6 {
            assert!((p[j] - 1.0 / gi.own_cell(j).len() as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn forms_agree_on_random_instances() {
        let mut rng = SeededRng::new(2);
        for _ in 0..20 {
            let n = 12 + rng.below(30);
            let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
            let attrs: Vec<usize> = (0..n).map(|i| (i / 2) % 2).collect();
            let gi = build_group_index(&labels, &attrs, 2, 2).unwrap();
            let z = random_unit(&mut rng, n, 3);
            let losses: Vec<f64> = (0..n).map(|_| rng.uniform_range(0.0, 2.0)).collect();
            let tau = rng.uniform_range(0.1, 2.0);
            let a = raan_value(&z, &losses, &gi, tau).unwrap();
            let b = raan_value_by_centers(&z, &losses, &gi, tau).unwrap();
            let c = compositional_value(&z, &losses, &gi, tau).unwrap();
            assert!((a - b).abs() <= 1e-10 * a.abs());
            assert!((a - c).abs() <= 1e-10 * a.abs());
        }
    }

    #[test]
    fn uniform_compositional_mean_needs_balanced_cells() {
        let mut rng = SeededRng::new(4);
        let labels = [0, 0, 0, 0, 1, 1, 1, 1];
        let attrs = [0, 0, 1, 1, 0, 0, 1, 1];
        let gi = build_group_index(&labels, &attrs, 2, 2).unwrap();
        let z = random_unit(&mut rng, 8, 3);
        let losses: Vec<f64> = (0..8).map(|_| rng.uniform()).collect();
        let a = raan_value(&z, &losses, &gi, 0.5).unwrap();
        let u = compositional_value_uniform(&z, &losses, &gi, 0.5).unwrap();
        assert!((a - u).abs() <= 1e-12 * a);
    }

    #[test]
    fn zero_losses_give_zero_objective() {
        let gi = toy_index();
        let z = random_unit(&mut SeededRng::new(1), 6, 2);
        assert_eq!(raan_value(&z, &[0.0; 6], &gi, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn single_neighbor_ratio_is_its_loss() {
        let gi = toy_index();
        let z = random_unit(&mut SeededRng::new(3), 6, 2);
        let losses = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        let g = inner_g(&z, &losses, 0, &[0, 1, 2, 3], &gi, 0.3).unwrap();
        assert!((g.f() - 0.3).abs() < 1e-15);
        assert_eq!(g.scale(7.5).f(), g.f());
        assert!(matches!(
            inner_g(&z, &losses, 0, &[1, 3, 4], &gi, 0.3),
            Err(AanError::EmptyNeighborhood(0))
        ));
    }

    #[test]
    fn grad_f_values() {
        assert_eq!(grad_f(InnerValue { g1: 0.0, g2: 1.0 }).unwrap(), [1.0, 0.0]);
        assert_eq!(grad_f(InnerValue { g1: 2.0, g2: 4.0 }).unwrap(), [0.25, -0.125]);
        assert!(grad_f(InnerValue { g1: 1.0, g2: 0.0 }).is_err());
    }

    #[test]
    fn tiny_temperature_overflow_is_an_error() {
        let gi = toy_index();
        let z = DenseMatrix::from_vec(6, 2, [1.0, 0.0].repeat(6)).unwrap();
        let all: Vec<usize> = (0..6).collect();
        assert!(matches!(
            inner_g(&z, &[1.0; 6], 0, &all, &gi, 1e-3),
            Err(AanError::Overflow(_))
        ));
    }
}

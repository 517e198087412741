#![allow(dead_code)]

use raan::aan::{build_group_index, GroupIndex};
use raan::model::{init_params, Activation, MlpConfig, ModelParams};
use raan::numkit::{l2_normalize_rows, DenseMatrix, SeededRng};

/// Random labels/attributes over a `C × A` grid with every cell occupied
/// (the first `C·A` samples cover the cells, the rest are random).
pub fn random_groups(n: usize, c: usize, a: usize, rng: &mut SeededRng) -> (Vec<usize>, Vec<usize>) {
    assert!(n >= c * a);
    let mut labels = Vec::with_capacity(n);
    let mut attrs = Vec::with_capacity(n);
    for k in 0..n {
        if k < c * a {
            labels.push(k / a);
            attrs.push(k % a);
        } else {
            labels.push(rng.below(c));
            attrs.push(rng.below(a));
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    (
        order.iter().map(|&k| labels[k]).collect(),
        order.iter().map(|&k| attrs[k]).collect(),
    )
}

pub fn random_index(n: usize, rng: &mut SeededRng) -> GroupIndex {
    let (y, a) = random_groups(n, 2, 2, rng);
    build_group_index(&y, &a, 2, 2).unwrap()
}

pub fn random_matrix(rows: usize, cols: usize, rng: &mut SeededRng) -> DenseMatrix {
    let data = (0..rows * cols).map(|_| rng.normal()).collect();
    DenseMatrix::from_vec(rows, cols, data).unwrap()
}

pub fn random_unit_rows(rows: usize, cols: usize, rng: &mut SeededRng) -> DenseMatrix {
    l2_normalize_rows(&random_matrix(rows, cols, rng)).unwrap()
}

pub fn random_losses(n: usize, rng: &mut SeededRng) -> Vec<f64> {
    (0..n).map(|_| rng.uniform_range(0.05, 3.0)).collect()
}

/// Small network for finite-difference checks (51 parameters).
pub fn toy_config() -> MlpConfig {
    MlpConfig {
        input_dim: 3,
        encoder_hidden_dims: vec![4],
        embedding_dim: 3,
        head_hidden_dims: vec![3],
        num_classes: 2,
        dropout_rate: 0.0,
        activation: Activation::Relu,
    }
}

/// Like `init_params` but with non-zero biases so every path is exercised.
pub fn toy_params(cfg: &MlpConfig, rng: &mut SeededRng) -> ModelParams {
    let mut p = init_params(cfg, rng).unwrap();
    for layer in p.encoder.iter_mut().chain(p.head.iter_mut()) {
        for b in layer.bias.iter_mut() {
            *b = rng.uniform_range(-0.3, 0.3);
        }
    }
    p
}

pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Finite-difference comparison measure: `|a − f| / max(1e-8, |a| + |f|)`.
pub fn fd_rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

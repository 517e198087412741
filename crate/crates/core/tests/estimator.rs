mod common;

use common::*;
use proptest::prelude::*;
use raan::aan::{inner_g, InnerValue};
use raan::data::stratified_batches;
use raan::model::{self, ce_loss_per_sample, Scope};
use raan::numkit::SeededRng;
use raan::scraan::{
    ghat_batch, raan_full_gradient, uw_adam, AdamConfig, EstimatorTable, OptState, Optimizer, RaanStepper,
    SgdConfig, StepInput,
};

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn full_batch_estimate_with_unit_gamma_is_exact() {
    let cfg = toy_config();
    for seed in 0..5 {
        let mut rng = SeededRng::new(seed);
        let n = 14;
        let gi = random_index(n, &mut rng);
        let x = random_matrix(n, cfg.input_dim, &mut rng);
        let params = toy_params(&cfg, &mut rng);
        let all: Vec<usize> = (0..n).collect();
        let opt = Optimizer::Sgd(SgdConfig { alpha: 0.1 });

        let mut stepper = RaanStepper::new(n, 0.8, 1.0, 1e-8, opt).unwrap();
        stepper.train_mode = false;
        let (g, scope, centers) = stepper
            .estimate(&params, StepInput::Features(&x), &all, &gi, &mut rng)
            .unwrap();
        assert_eq!((scope, centers), (Scope::Full, n));
        let exact = raan_full_gradient(&params, &x, &gi, 0.8, Scope::Full).unwrap();
        assert!(max_abs_diff(&g, &exact) < 1e-8);

        let (z, _) = model::encode(&params, &x, false, &mut rng).unwrap();
        let mut stepper = RaanStepper::new(n, 0.8, 1.0, 1e-8, opt).unwrap();
        stepper.train_mode = false;
        let (g, scope, _) = stepper
            .estimate(&params, StepInput::Embeddings(&z), &all, &gi, &mut rng)
            .unwrap();
        assert_eq!(scope, Scope::HeadOnly);
        let exact = raan_full_gradient(&params, &x, &gi, 0.8, Scope::HeadOnly).unwrap();
        assert!(max_abs_diff(&g, &exact) < 1e-8);
    }
}

#[test]
fn full_batch_inner_estimates_equal_exact_inner_values() {
    let mut rng = SeededRng::new(4);
    let n = 20;
    let gi = random_index(n, &mut rng);
    let z = random_unit_rows(n, 3, &mut rng);
    let l = random_losses(n, &mut rng);
    let all: Vec<usize> = (0..n).collect();
    let est = ghat_batch(&z, &l, &all, &all, &gi, 0.5).unwrap();
    assert_eq!(est.len(), n);
    for (i, g) in est {
        let exact = inner_g(&z, &l, i, &all, &gi, 0.5).unwrap();
        assert!(rel_err(g.g1, exact.g1, 1e-300) < 1e-12);
        assert!(rel_err(g.g2, exact.g2, 1e-300) < 1e-12);
    }
}

/// Mean of the minibatch inner estimate over stratified draws vs the exact value.
#[test]
fn inner_estimates_are_unbiased_under_stratified_sampling() {
    let mut rng = SeededRng::new(8);
    let n = 16;
    let gi = random_index(n, &mut rng);
    let z = random_unit_rows(n, 3, &mut rng);
    let l = random_losses(n, &mut rng);
    let all: Vec<usize> = (0..n).collect();
    let draws = 4000;
    let mut sums = vec![[0.0f64; 4]; n]; // Σg1, Σg1², Σg2, Σg2²
    let mut counts = vec![0usize; n];
    let mut sampler = SeededRng::new(99);
    for _ in 0..draws {
        let batch = stratified_batches(&gi, 4, 1, &mut sampler).unwrap().swap_remove(0);
        let zb = z.select_rows(&batch);
        let lb: Vec<f64> = batch.iter().map(|&i| l[i]).collect();
        let pos: Vec<usize> = (0..batch.len()).collect();
        for (i, g) in ghat_batch(&zb, &lb, &pos, &batch, &gi, 1.0).unwrap() {
            let s = &mut sums[i];
            s[0] += g.g1;
            s[1] += g.g1 * g.g1;
            s[2] += g.g2;
            s[3] += g.g2 * g.g2;
            counts[i] += 1;
        }
    }
    for i in 0..n {
        let exact = inner_g(&z, &l, i, &all, &gi, 1.0).unwrap();
        let k = counts[i] as f64;
        assert!(k > 100.0);
        for (m, t) in [(0, exact.g1), (2, exact.g2)] {
            let mean = sums[i][m] / k;
            let var = (sums[i][m + 1] / k - mean * mean).max(0.0);
            let se = (var / k).sqrt();
            assert!((mean - t).abs() <= 3.0 * se + 1e-12, "center {i}: mean {mean} vs {t} (se {se})");
        }
    }
}

proptest! {
    #[test]
    fn normalizer_never_drops_below_floor(
        seed in any::<u64>(),
        gamma in 0.01f64..=1.0,
        u0 in 1e-10f64..1e-2,
    ) {
        let mut rng = SeededRng::new(seed);
        let mut table = EstimatorTable::new(3, u0).unwrap();
        for _ in 0..50 {
            let i = rng.below(3);
            let g2 = if rng.bernoulli(0.3) { 0.0 } else { rng.uniform_range(0.0, 2.0) };
            let row = table.ug_update(i, InnerValue { g1: rng.normal(), g2 }, gamma).unwrap();
            prop_assert!(row[1] >= u0);
        }
    }

    #[test]
    fn amsgrad_second_moment_is_monotone(seed in any::<u64>()) {
        let cfg = toy_config();
        let mut rng = SeededRng::new(seed);
        let mut params = toy_params(&cfg, &mut rng);
        let len = params.num_params(Scope::Full);
        let mut state = OptState::new(len);
        let adam = AdamConfig { amsgrad: true, ..AdamConfig::default() };
        let mut prev = state.v_hat.clone();
        for t in 0..200 {
            let scale = if t % 50 < 25 { 1.0 } else { 1e-3 };
            let g: Vec<f64> = (0..len).map(|_| scale * rng.normal()).collect();
            uw_adam(&mut params, &mut state, &g, &adam, Scope::Full).unwrap();
            prop_assert!(state.v_hat.iter().zip(&prev).all(|(a, b)| a >= b));
            prev.clone_from(&state.v_hat);
        }
    }
}

#[test]
fn stepping_reduces_the_objective_on_a_toy_problem() {
    let cfg = toy_config();
    let mut rng = SeededRng::new(31);
    let n = 24;
    let gi = random_index(n, &mut rng);
    let x = random_matrix(n, cfg.input_dim, &mut rng);
    let mut params = toy_params(&cfg, &mut rng);
    let start = raan::scraan::raan_objective(&params, &x, &gi, 1.0).unwrap();
    let mut stepper = RaanStepper::new(
        n,
        1.0,
        0.5,
        1e-8,
        Optimizer::Adam(AdamConfig { alpha: 0.01, ..AdamConfig::default() }),
    )
    .unwrap();
    stepper.train_mode = false;
    let mut sampler = SeededRng::new(1);
    for _ in 0..100 {
        for batch in stratified_batches(&gi, 12, 2, &mut sampler).unwrap() {
            stepper
                .step(&mut params, StepInput::Features(&x), &batch, &gi, &mut rng)
                .unwrap();
        }
    }
    let end = raan::scraan::raan_objective(&params, &x, &gi, 1.0).unwrap();
    assert!(end < start, "{start} -> {end}");
    let cache = model::forward(&params, &x, false, &mut rng).unwrap();
    assert!(ce_loss_per_sample(&cache.logits, gi.labels()).unwrap().iter().all(|l| l.is_finite()));
}

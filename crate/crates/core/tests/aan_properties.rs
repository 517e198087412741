mod common;

use common::*;
use proptest::prelude::*;
use raan::aan::{
    aan_losses, build_group_index, cell_balanced_mean, compositional_value, dro_oracle, inner_g, pair_weights,
    raan_value, raan_value_by_centers, sample_weights,
};
use raan::numkit::{DenseMatrix, SeededRng};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pair_weights_form_a_distribution(seed in any::<u64>(), k in 1usize..30, tau in 0.05f64..5.0) {
        let mut rng = SeededRng::new(seed);
        let z = random_unit_rows(k + 1, 4, &mut rng);
        let nb: Vec<usize> = (1..=k).collect();
        let w = pair_weights(&z, 0, &nb, tau).unwrap();
        prop_assert_eq!(w.len(), k);
        prop_assert!(w.iter().all(|&p| p > 0.0 && p <= 1.0));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn closed_form_maximizes_the_regularized_objective(seed in any::<u64>(), k in 2usize..20, tau in 0.2f64..3.0) {
        let mut rng = SeededRng::new(seed);
        let s: Vec<f64> = (0..k).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let z = {
            // embed the similarities: z_0 = e_0, z_j = (s_j, sqrt(1 - s_j²), 0, ...)
            let mut m = DenseMatrix::zeros(k + 1, k + 1);
            m.set(0, 0, 1.0);
            for (j, &sj) in s.iter().enumerate() {
                m.set(j + 1, 0, sj);
                m.set(j + 1, j + 1, (1.0 - sj * sj).sqrt());
            }
            m
        };
        let nb: Vec<usize> = (1..=k).collect();
        let closed = pair_weights(&z, 0, &nb, tau).unwrap();
        let oracle = dro_oracle(&s, tau).unwrap();
        for (a, b) in closed.iter().zip(&oracle) {
            prop_assert!((a - b).abs() < 1e-6, "closed {a} vs oracle {b}");
        }
    }

    #[test]
    fn objective_forms_agree(seed in any::<u64>(), n in 4usize..40, tau in 0.1f64..3.0) {
        let mut rng = SeededRng::new(seed);
        let gi = random_index(n, &mut rng);
        let z = random_unit_rows(n, 3, &mut rng);
        let l = random_losses(n, &mut rng);
        let a = raan_value(&z, &l, &gi, tau).unwrap();
        let b = raan_value_by_centers(&z, &l, &gi, tau).unwrap();
        let c = compositional_value(&z, &l, &gi, tau).unwrap();
        prop_assert!(rel_err(a, b, 1e-300) < 1e-10);
        prop_assert!(rel_err(a, c, 1e-300) < 1e-10);
    }

    #[test]
    fn aggregated_weights_have_unit_mass(seed in any::<u64>(), n in 4usize..40, tau in 0.1f64..3.0) {
        let mut rng = SeededRng::new(seed);
        let gi = random_index(n, &mut rng);
        let z = random_unit_rows(n, 3, &mut rng);
        let p = sample_weights(&z, &gi, tau).unwrap();
        let mass: f64 = p.iter().sum::<f64>() / gi.num_cells() as f64;
        prop_assert!((mass - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn robust_loss_lies_between_neighbor_extremes(seed in any::<u64>(), n in 4usize..30, tau in 0.1f64..3.0) {
        let mut rng = SeededRng::new(seed);
        let gi = random_index(n, &mut rng);
        let z = random_unit_rows(n, 3, &mut rng);
        let l = random_losses(n, &mut rng);
        let aan = aan_losses(&z, &l, &gi, tau).unwrap();
        for i in 0..n {
            let nb = gi.neighbors(i);
            let lo = nb.iter().map(|&j| l[j]).fold(f64::INFINITY, f64::min);
            let hi = nb.iter().map(|&j| l[j]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(aan[i] >= lo - 1e-12 && aan[i] <= hi + 1e-12);
        }
    }

    #[test]
    fn inner_ratio_is_the_robust_loss(seed in any::<u64>(), n in 4usize..30, tau in 0.2f64..3.0) {
        let mut rng = SeededRng::new(seed);
        let gi = random_index(n, &mut rng);
        let z = random_unit_rows(n, 3, &mut rng);
        let l = random_losses(n, &mut rng);
        let aan = aan_losses(&z, &l, &gi, tau).unwrap();
        let all: Vec<usize> = (0..n).collect();
        for i in 0..n {
            let g = inner_g(&z, &l, i, &all, &gi, tau).unwrap();
            prop_assert!(rel_err(g.f(), aan[i], 1e-300) < 1e-12);
        }
    }

    #[test]
    fn attribute_relabeling_leaves_the_objective_unchanged(seed in any::<u64>(), n in 4usize..30, tau in 0.1f64..3.0) {
        let mut rng = SeededRng::new(seed);
        let (y, a) = random_groups(n, 2, 2, &mut rng);
        let gi = build_group_index(&y, &a, 2, 2).unwrap();
        let flipped: Vec<usize> = a.iter().map(|v| 1 - v).collect();
        let gf = build_group_index(&y, &flipped, 2, 2).unwrap();
        let z = random_unit_rows(n, 3, &mut rng);
        let l = random_losses(n, &mut rng);
        let r1 = raan_value(&z, &l, &gi, tau).unwrap();
        let r2 = raan_value(&z, &l, &gf, tau).unwrap();
        prop_assert!(rel_err(r1, r2, 1e-300) < 1e-12);
    }

    #[test]
    fn constant_losses_give_that_constant(seed in any::<u64>(), n in 4usize..30, tau in 0.1f64..3.0, c in 0.0f64..5.0) {
        let mut rng = SeededRng::new(seed);
        let gi = random_index(n, &mut rng);
        let z = random_unit_rows(n, 3, &mut rng);
        let r = raan_value(&z, &vec![c; n], &gi, tau).unwrap();
        prop_assert!((r - c).abs() <= 1e-12 * c.max(1.0));
    }
}

#[test]
fn large_temperature_recovers_balanced_mean() {
    let mut rng = SeededRng::new(3);
    for _ in 0..20 {
        let gi = random_index(30, &mut rng);
        let z = random_unit_rows(30, 4, &mut rng);
        let l = random_losses(30, &mut rng);
        let r = raan_value(&z, &l, &gi, 1e6).unwrap();
        assert!(rel_err(r, cell_balanced_mean(&l, &gi), 1e-300) < 1e-6);
    }
}

use lfiw::estimators::{
    effective_sample_size, estimate_from_values, standard_config_grid, transform_weights,
    WeightConfig,
};
use lfiw::synthetic::{run_fig1_experiment, Fig1Config, MomentToy, MomentToyConfig};
use proptest::prelude::*;

#[test]
fn oracle_weights_recover_mixture_second_moment() {
    let toy = MomentToy::build(&MomentToyConfig::for_seed(3)).unwrap();
    let (pts, w) = toy.oracle_batch(0);
    assert_eq!(pts.len(), 5000);
    let f: Vec<f64> = pts.iter().map(|p| p.first() * p.first()).collect();
    let r = estimate_from_values(&w, &f, &WeightConfig::default()).unwrap();
    assert!(
        (r.value - toy.truth()).abs() <= 3.0 * r.stderr,
        "{} vs {} (stderr {})",
        r.value,
        toy.truth(),
        r.stderr
    );
}

#[test]
fn standard_grid_layout() {
    let g = standard_config_grid();
    assert_eq!(g.len(), 10);
    assert_eq!(g[0], WeightConfig::flattened(0.0));
    assert_eq!(g[4], WeightConfig::default());
    assert!(g[9].self_normalize);
    assert_eq!(g.iter().filter(|c| c.beta > 0.0).count(), 4);
}

// Forty outer trials with 1000 bootstrap retrainings each; minutes of CPU.
#[test]
#[ignore]
fn bootstrap_band_covers_bayes_curve_at_zero() {
    let mut covered = 0;
    for seed in 0..40 {
        let r = run_fig1_experiment(&Fig1Config::for_seed(1000, seed, Some(1000))).unwrap();
        let i = r.grid.iter().position(|x| x.abs() < 1e-12).unwrap();
        let (lo, hi) = (
            r.band_lo.as_ref().unwrap()[i],
            r.band_hi.as_ref().unwrap()[i],
        );
        if lo <= r.c_opt[i] && r.c_opt[i] <= hi {
            covered += 1;
        }
    }
    assert!(covered * 100 >= 85 * 40, "covered {covered}/40");
}

fn weights_and_values() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    prop::collection::vec((1e-4f64..1e4, -100.0f64..100.0), 1..60)
        .prop_map(|v| v.into_iter().unzip())
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 256, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn ess_is_between_one_and_n((w, _) in weights_and_values()) {
        let ess = effective_sample_size(&w);
        prop_assert!(ess >= 1.0 - 1e-9 && ess <= w.len() as f64 + 1e-9);
        let flat = transform_weights(&w, &WeightConfig::flattened(0.0)).unwrap();
        prop_assert!((effective_sample_size(&flat) - w.len() as f64).abs() <= 1e-9);
    }

    #[test]
    fn clipping_is_a_floor((w, _) in weights_and_values(), beta in 0.0f64..10.0) {
        let t = transform_weights(&w, &WeightConfig::clipped(beta)).unwrap();
        for (a, b) in t.iter().zip(&w) {
            prop_assert!(*a >= beta && *a >= *b);
            prop_assert!(*a == b.max(beta));
        }
    }

    #[test]
    fn flattening_then_clipping_order(
        (w, _) in weights_and_values(),
        alpha in 0.0f64..=1.0,
        beta in 0.0f64..5.0,
    ) {
        let cfg = WeightConfig { alpha, beta, ..WeightConfig::default() };
        let t = transform_weights(&w, &cfg).unwrap();
        for (a, b) in t.iter().zip(&w) {
            prop_assert!((a - b.powf(alpha).max(beta)).abs() <= 1e-12 * a.max(1.0));
        }
    }

    #[test]
    fn estimate_is_linear_in_f((w, f) in weights_and_values(), a in -5.0f64..5.0, c in -5.0f64..5.0) {
        for cfg in [WeightConfig::default(), WeightConfig::self_normalized()] {
            let base = estimate_from_values(&w, &f, &cfg).unwrap().value;
            let g: Vec<f64> = f.iter().map(|v| a * v + c).collect();
            let lin = estimate_from_values(&w, &g, &cfg).unwrap().value;
            let shift = if cfg.self_normalize {
                c
            } else {
                c * w.iter().sum::<f64>() / w.len() as f64
            };
            prop_assert!((lin - (a * base + shift)).abs() <= 1e-9 * (1.0 + lin.abs()));
        }
    }

    #[test]
    fn self_normalized_constant_f_is_exact((w, _) in weights_and_values(), c in -50.0f64..50.0) {
        let f = vec![c; w.len()];
        let r = estimate_from_values(&w, &f, &WeightConfig::self_normalized()).unwrap();
        prop_assert!((r.value - c).abs() <= 1e-9 * c.abs().max(1.0));
    }
}

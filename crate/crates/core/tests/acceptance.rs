//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Exits nonzero when a criterion fails that is not listed in `KNOWN_FAILURES`.
//! Run a subset with `cargo test --test acceptance -- 3 5 8`.

use lfiw::estimators::{
    bias_variance_decompose, estimate_from_values, standard_config_grid, transform_weights,
    Statistic, WeightConfig,
};
use lfiw::mbope::{self, OpeConfig};
use lfiw::metrics::{frechet_distance, kernel_distance, FeatureSet};
use lfiw::ratio::{
    calibration_report, sigmoid, train_classifier, weight_from_probability, LabeledRatioDataset,
    SamplePoint, TrainConfig,
};
use lfiw::resample::{
    empirical_distribution, random_simplex, random_triple, DiscreteDistributionPair, ResampledModel,
};
use lfiw::rng;
use lfiw::sampling::CategoricalSampler;
use lfiw::stats;
use lfiw::synthetic::{run_fig1_experiment, Fig1Config, MomentToy, MomentToyConfig};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

/// Criteria that fail at desk scale; each has an entry in the decisions ledger.
const KNOWN_FAILURES: &[usize] = &[7];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn within(limit: Duration, t: Instant, o: Outcome) -> Outcome {
    let el = t.elapsed();
    if el > limit {
        outcome(
            false,
            format!("{} (runtime {:.1?} over {:?})", o.detail, el, limit),
        )
    } else {
        outcome(o.pass, format!("{} [{:.1?}]", o.detail, el))
    }
}

fn c1_oracle_identity() -> Outcome {
    let t = Instant::now();
    let mut rng = rng::stream(1, "pairs", 0);
    let (mut worst_w, mut worst_e) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let k = rng.random_range(2..=8);
        let pair =
            DiscreteDistributionPair::new(random_simplex(&mut rng, k), random_simplex(&mut rng, k))
                .unwrap();
        let gamma = rng.random_range(0.2..5.0);
        let oracle = pair.oracle_weights();
        let bayes = pair.bayes_probabilities(gamma).unwrap();
        for (c, o) in bayes.iter().zip(&oracle) {
            let w = weight_from_probability(*c, gamma);
            worst_w = worst_w.max((w - o).abs() / o.max(1.0));
        }
        for _ in 0..5 {
            let f: Vec<f64> = (0..k).map(|_| rng.random_range(-10.0..10.0)).collect();
            let est = pair.exact_default_estimate(&oracle, &f).unwrap();
            worst_e = worst_e.max((est - pair.expectation_p(&f)).abs());
        }
    }
    within(
        Duration::from_secs(5),
        t,
        outcome(
            worst_w <= 1e-12 && worst_e <= 1e-12,
            format!("max weight error {worst_w:.2e}, max estimate error {worst_e:.2e}"),
        ),
    )
}

fn c2_fig1() -> Outcome {
    let t = Instant::now();
    let seeds: Vec<u64> = (0..20).collect();
    let large: Vec<f64> = seeds
        .iter()
        .map(|&s| {
            run_fig1_experiment(&Fig1Config::for_seed(1000, s, None))
                .unwrap()
                .mean_abs_gap
        })
        .collect();
    let small: Vec<f64> = seeds
        .iter()
        .map(|&s| {
            run_fig1_experiment(&Fig1Config::for_seed(50, s, None))
                .unwrap()
                .mean_abs_gap
        })
        .collect();
    let mean_large = stats::mean(&large);
    let wins = large.iter().zip(&small).filter(|(l, s)| l < s).count();
    let band = |n| {
        run_fig1_experiment(&Fig1Config::for_seed(n, 0, Some(1000)))
            .unwrap()
            .median_band_width()
            .unwrap()
    };
    let (band_large, band_small) = (band(1000), band(50));
    within(
        Duration::from_secs(600),
        t,
        outcome(
            mean_large <= 0.05 && wins * 5 >= 20 * 4 && band_large < band_small,
            format!(
                "mean gap n=1000 {mean_large:.4}, smaller than n=50 in {wins}/20, median band {band_large:.3} vs {band_small:.3}"
            ),
        ),
    )
}

fn c3_estimator_algebra() -> Outcome {
    let t = Instant::now();
    let mut runner = TestRunner::new(Config {
        cases: 2000,
        failure_persistence: None,
        ..Config::default()
    });
    let strategy = (
        prop::collection::vec((1e-3f64..1e3, -50.0f64..50.0), 1..40),
        0.1f64..10.0,
    );
    let result = runner.run(&strategy, |(wf, gamma)| {
        let (raw, f): (Vec<f64>, Vec<f64>) = wf.into_iter().unzip();
        let uniform = transform_weights(&raw, &WeightConfig::flattened(0.0)).unwrap();
        prop_assert!(uniform.iter().all(|&w| (w - 1.0).abs() <= 1e-9));
        let ident = transform_weights(&raw, &WeightConfig::clipped(0.0)).unwrap();
        prop_assert!(ident
            .iter()
            .zip(&raw)
            .all(|(a, b)| (a - b).abs() <= 1e-9 * b.max(1.0)));
        let sn = transform_weights(&raw, &WeightConfig::self_normalized()).unwrap();
        prop_assert!((sn.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        let scaled: Vec<f64> = raw.iter().map(|w| w * gamma).collect();
        let a = estimate_from_values(&raw, &f, &WeightConfig::self_normalized())
            .unwrap()
            .value;
        let b = estimate_from_values(&scaled, &f, &WeightConfig::self_normalized())
            .unwrap()
            .value;
        prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
        let lo = f.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = f.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(a >= lo - 1e-9 && a <= hi + 1e-9);
        Ok(())
    });
    within(
        Duration::from_secs(1),
        t,
        match result {
            Ok(()) => outcome(true, "2000 cases"),
            Err(e) => outcome(false, e.to_string()),
        },
    )
}

fn c4_mixture_bias() -> Outcome {
    let t = Instant::now();
    let mut wins = 0;
    for seed in 0..50 {
        let toy = MomentToy::build(&MomentToyConfig::for_seed(seed)).unwrap();
        let (pts, w) = toy.batch(0).unwrap();
        let f: Vec<f64> = pts.iter().map(|p| p.first() * p.first()).collect();
        let sn = estimate_from_values(&w, &f, &WeightConfig::self_normalized())
            .unwrap()
            .value;
        let un = estimate_from_values(&w, &f, &WeightConfig::flattened(0.0))
            .unwrap()
            .value;
        if (sn - toy.truth()).abs() < (un - toy.truth()).abs() {
            wins += 1;
        }
    }
    within(
        Duration::from_secs(300),
        t,
        outcome(
            wins * 5 >= 50 * 4,
            format!("weighted closer in {wins}/50 seeds"),
        ),
    )
}

fn c5_sir() -> Outcome {
    let t = Instant::now();
    let mut rng = rng::stream(5, "pair", 0);
    let pair =
        DiscreteDistributionPair::new(random_simplex(&mut rng, 10), random_simplex(&mut rng, 10))
            .unwrap();
    let w = pair.oracle_weights();
    let target = pair.resampled(&w).unwrap();
    let sampler = CategoricalSampler::new(pair.p_theta()).unwrap();
    let tv: Vec<f64> = [1usize, 10, 100]
        .iter()
        .map(|&n| {
            let m =
                ResampledModel::new(sampler.clone(), |x: &SamplePoint| w[x.first() as usize], n)
                    .unwrap();
            let draws = m
                .sir_draws(100_000, rng::derive_seed(5, "sir", n as u64))
                .unwrap();
            stats::total_variation(&empirical_distribution(&draws, 10), &target)
        })
        .collect();
    within(
        Duration::from_secs(60),
        t,
        outcome(
            tv[2] <= 0.05 && tv[2] <= tv[1] + 0.01 && tv[1] <= tv[0] + 0.01,
            format!("TV at T=1,10,100: {:.4} {:.4} {:.4}", tv[0], tv[1], tv[2]),
        ),
    )
}

fn c6_necessary_conditions() -> Outcome {
    let t = Instant::now();
    let mut rng = rng::stream(6, "triples", 0);
    let (mut improving, mut violations) = (0, 0);
    for _ in 0..1000 {
        let k = rng.random_range(2..=8);
        let (pair, w) = random_triple(&mut rng, k);
        if pair.exact_delta_kl(&w).unwrap() <= 0.0 {
            improving += 1;
            let d = pair.exact_kl_diagnostics(&w).unwrap();
            if d.nec1_gap < -1e-12 || d.nec2_gap < -1e-12 {
                violations += 1;
            }
        }
    }
    let pair = DiscreteDistributionPair::new(
        vec![
            0.1514145655124709,
            0.003121805918170529,
            0.7147109871624675,
            0.1307526414068911,
        ],
        vec![
            0.10185053621624678,
            0.49329884828140963,
            0.07779289690095524,
            0.3270577186013884,
        ],
    )
    .unwrap();
    let w = [
        0.158399181188647,
        0.772162609776353,
        3.255041677177879,
        4.9820683623396524,
    ];
    let d = pair.exact_kl_diagnostics(&w).unwrap();
    let delta = pair.exact_delta_kl(&w).unwrap();
    let witness = d.nec1_gap >= 0.0 && d.nec2_gap >= 0.0 && delta > 0.0;
    within(
        Duration::from_secs(5),
        t,
        outcome(
            violations == 0 && witness,
            format!("{violations} violations among {improving} improving triples, witness delta {delta:.4}"),
        ),
    )
}

fn c7_bias_variance() -> Outcome {
    let t = Instant::now();
    let grid = standard_config_grid();
    let sn = grid.iter().position(|c| c.self_normalize).unwrap();
    let (mut wins, mut worst) = (0, 0.0f64);
    for seed in 0..20 {
        let toy = MomentToy::build(&MomentToyConfig::for_seed(seed)).unwrap();
        let statistics = vec![
            Statistic::new("x", |p: &SamplePoint| p.first()),
            Statistic::new("x2", |p: &SamplePoint| p.first() * p.first()),
        ];
        let reports = bias_variance_decompose(
            &grid,
            &statistics,
            &[toy.mixture.mean(), toy.truth()],
            |i| toy.batch(i),
            20,
        )
        .unwrap();
        for r in reports.iter().flat_map(|r| &r.records) {
            worst = worst.max((r.mse - r.bias * r.bias - r.variance).abs());
        }
        let abs: Vec<f64> = reports.iter().map(|r| r.records[1].bias.abs()).collect();
        if abs.iter().all(|&b| abs[sn] <= b) {
            wins += 1;
        }
    }
    outcome(
        worst <= 1e-9 && wins * 10 >= 20 * 6,
        format!(
            "identity error {worst:.2e}, self-normalized lowest |bias| in {wins}/20 seeds [{:.1?}]",
            t.elapsed()
        ),
    )
}

fn brute_kid(x: &[Vec<f64>], y: &[Vec<f64>], h: f64) -> f64 {
    let k = |a: &[f64], b: &[f64]| {
        let d2: f64 = a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum();
        (-d2 / (2.0 * h * h)).exp()
    };
    let within = |s: &[Vec<f64>]| {
        let mut acc = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if i != j {
                    acc += k(&s[i], &s[j]);
                }
            }
        }
        acc / (s.len() * (s.len() - 1)) as f64
    };
    let mut cross = 0.0;
    for a in x {
        for b in y {
            cross += k(a, b);
        }
    }
    within(x) + within(y) - 2.0 * cross / (x.len() * y.len()) as f64
}

fn gaussian_rows(n: usize, d: usize, shift: f64, rng: &mut lfiw::rng::SimRng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            (0..d)
                .map(|_| shift + Distribution::<f64>::sample(&StandardNormal, rng))
                .collect()
        })
        .collect()
}

fn c8_metrics() -> Outcome {
    let t = Instant::now();
    let mut rng = rng::stream(8, "metrics", 0);
    let s = FeatureSet::new(gaussian_rows(200, 4, 0.0, &mut rng)).unwrap();
    let self_fid = frechet_distance(&s, &s).unwrap();
    let one_d = |v: &[f64]| FeatureSet::new(v.iter().map(|&x| vec![x]).collect()).unwrap();
    let fid9 = frechet_distance(&one_d(&[-1.0, 1.0]), &one_d(&[2.0, 4.0])).unwrap();
    let fid1 = frechet_distance(&one_d(&[-1.0, 1.0]), &one_d(&[-2.0, 2.0])).unwrap();
    let x = gaussian_rows(50, 3, 0.0, &mut rng);
    let y = gaussian_rows(50, 3, 0.5, &mut rng);
    let kid = kernel_distance(
        &FeatureSet::new(x.clone()).unwrap(),
        &FeatureSet::new(y.clone()).unwrap(),
        1.5,
    )
    .unwrap();
    let kid_err = (kid - brute_kid(&x, &y, 1.5)).abs();

    let real = FeatureSet::new(gaussian_rows(1000, 2, 0.0, &mut rng)).unwrap();
    let model_rows: Vec<Vec<f64>> = (0..1000)
        .map(|_| {
            let shift = if rng.random::<bool>() { 5.0 } else { 0.0 };
            gaussian_rows(1, 2, shift, &mut rng).remove(0)
        })
        .collect();
    let density =
        |r: &[f64], c: f64| (-0.5 * r.iter().map(|v| (v - c) * (v - c)).sum::<f64>()).exp();
    let w: Vec<f64> = model_rows
        .iter()
        .map(|r| density(r, 0.0) / (0.5 * density(r, 0.0) + 0.5 * density(r, 5.0)))
        .collect();
    let model = FeatureSet::new(model_rows).unwrap();
    let fid_raw = frechet_distance(&model, &real).unwrap();
    let fid_w = frechet_distance(&model.with_weights(w).unwrap(), &real).unwrap();
    within(
        Duration::from_secs(60),
        t,
        outcome(
            self_fid <= 1e-8
                && (fid9 - 9.0).abs() <= 1e-10
                && (fid1 - 1.0).abs() <= 1e-10
                && kid_err <= 1e-12
                && fid_w < fid_raw,
            format!(
                "FID(S,S) {self_fid:.1e}, analytic {fid9} {fid1}, KID oracle error {kid_err:.1e}, weighted FID {fid_w:.3} vs {fid_raw:.3}"
            ),
        ),
    )
}

fn c9_mbope() -> Outcome {
    let t = Instant::now();
    let (env, behavior, eval) = mbope::chain4();
    let horizon = env.horizon();
    let (mut err_model, mut err_lfiw, mut err_step) = (0.0, 0.0, 0.0);
    let (mut d0, mut dt, mut worst_h0) = (0.0, 0.0, 0.0f64);
    for seed in 0..10 {
        let cfg = OpeConfig {
            seed,
            h_values: vec![0, horizon],
            ..OpeConfig::default()
        };
        let r = mbope::run_ope_experiment(&env, &behavior, &eval, &cfg).unwrap();
        err_model += (r.model_value.value - r.truth).abs() / 10.0;
        err_lfiw += (r.lfiw_value.value - r.truth).abs() / 10.0;
        err_step += (r.stepwise_value.value - r.truth).abs() / 10.0;
        worst_h0 = worst_h0.max((r.curve[0].value - r.model_value.value).abs());
        d0 += r.curve[0].delta.unwrap().abs() / 10.0;
        dt += r.curve[1].delta.unwrap().abs() / 10.0;
    }
    within(
        Duration::from_secs(120),
        t,
        outcome(
            err_lfiw < err_model && err_step < err_model && worst_h0 <= 1e-12 && dt < d0,
            format!(
                "mean |error| model {err_model:.3}, trajectory {err_lfiw:.3}, stepwise {err_step:.3}; |delta| H=0 {d0:.3}, H=T {dt:.3}; H=0 gap {worst_h0:.1e}"
            ),
        ),
    )
}

fn write_rows(path: &Path, rows: &[Vec<f64>]) {
    let text: String = rows
        .iter()
        .map(|r| {
            r.iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(",")
                + "\n"
        })
        .collect();
    std::fs::write(path, text).unwrap();
}

fn run_cli(args: &[&str]) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_lfiw"))
        .args(args)
        .env_remove("LFIW_OUT")
        .status()
        .unwrap()
        .code()
        .unwrap_or(-1)
}

fn c10_determinism() -> Outcome {
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
    let mut rng = rng::stream(10, "inputs", 0);
    write_rows(
        Path::new(&p("pos.csv")),
        &gaussian_rows(200, 2, 0.0, &mut rng),
    );
    write_rows(
        Path::new(&p("neg.csv")),
        &gaussian_rows(200, 2, 0.7, &mut rng),
    );
    let (pos, neg) = (p("pos.csv"), p("neg.csv"));
    let clf = format!("{}/classifier.json", p("train-ratio-0"));
    let commands: Vec<(&str, Vec<String>)> = vec![
        (
            "train-ratio",
            vec![
                "--positives".into(),
                pos.clone(),
                "--negatives".into(),
                neg.clone(),
                "--epochs".into(),
                "20".into(),
            ],
        ),
        (
            "estimate",
            vec!["--classifier".into(), clf, "--samples".into(), neg.clone()],
        ),
        (
            "resample",
            vec![
                "--symbols".into(),
                "6".into(),
                "--draws".into(),
                "20000".into(),
            ],
        ),
        ("metrics", vec!["--model".into(), neg, "--real".into(), pos]),
        (
            "fig1",
            vec!["--n".into(), "50".into(), "--resamples".into(), "20".into()],
        ),
        ("augment", vec![]),
        (
            "ope",
            vec![
                "--n-traj".into(),
                "50".into(),
                "--H-sweep".into(),
                "0,5,20".into(),
            ],
        ),
        ("bias-variance", vec!["--trials".into(), "3".into()]),
    ];
    let mut failures = Vec::new();
    for (cmd, extra) in &commands {
        let mut manifests = Vec::new();
        for rep in 0..2 {
            let out = p(&format!("{cmd}-{rep}"));
            let mut args = vec![*cmd, "--seed", "7", "--out", out.as_str()];
            args.extend(extra.iter().map(String::as_str));
            if run_cli(&args) != 0 {
                failures.push(format!("{cmd} failed"));
                continue;
            }
            let manifest = format!("{out}/manifest.json");
            if run_cli(&["verify", &manifest]) != 0 {
                failures.push(format!("{cmd} verify"));
            }
            let m: serde_json::Value =
                serde_json::from_str(&std::fs::read_to_string(&manifest).unwrap()).unwrap();
            manifests.push(m["outputs"].clone());
        }
        let identical = manifests.len() == 2 && manifests[0] == manifests[1] && {
            let files = manifests[0].as_array().unwrap();
            files.iter().all(|f| {
                let name = f["path"].as_str().unwrap();
                std::fs::read(format!("{}/{name}", p(&format!("{cmd}-0")))).ok()
                    == std::fs::read(format!("{}/{name}", p(&format!("{cmd}-1")))).ok()
            })
        };
        if !identical {
            failures.push(format!("{cmd} outputs differ"));
        }
    }
    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            format!(
                "{} subcommands byte-identical, verify exit 0 [{:.1?}]",
                commands.len(),
                t.elapsed()
            )
        } else {
            failures.join("; ")
        },
    )
}

fn c11_calibration() -> Outcome {
    let t = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..5 {
        let mut rng = rng::stream(seed, "logistic-data", 0);
        let (mut pos, mut neg) = (Vec::new(), Vec::new());
        for _ in 0..2000 {
            let x: Vec<f64> = (0..2).map(|_| StandardNormal.sample(&mut rng)).collect();
            let c = sigmoid(1.5 * x[0] - 0.8 * x[1] + 0.3);
            let point = SamplePoint::new(x).unwrap();
            if rng.random::<f64>() < c {
                pos.push(point);
            } else {
                neg.push(point);
            }
        }
        let ds = LabeledRatioDataset::new(pos, neg).unwrap();
        let clf = train_classifier(
            &ds,
            &TrainConfig {
                seed,
                ..TrainConfig::logistic()
            },
        )
        .unwrap();
        worst = worst.max(calibration_report(&clf, &ds, 10).unwrap().ece);
    }
    outcome(
        worst <= 0.05,
        format!("worst ECE over 5 seeds {worst:.4} [{:.1?}]", t.elapsed()),
    )
}

fn main() {
    let selected: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("oracle identity", c1_oracle_identity),
        ("classifier curve", c2_fig1),
        ("estimator algebra", c3_estimator_algebra),
        ("mixture bias reduction", c4_mixture_bias),
        ("SIR convergence", c5_sir),
        ("necessary conditions", c6_necessary_conditions),
        ("bias-variance", c7_bias_variance),
        ("metrics sanity", c8_metrics),
        ("model-based OPE", c9_mbope),
        ("determinism", c10_determinism),
        ("calibration", c11_calibration),
    ];
    let mut unexpected = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let o = run();
        let known = KNOWN_FAILURES.contains(&id);
        let tag = match (o.pass, known) {
            (true, _) => "PASS",
            (false, true) => "FAIL (known)",
            (false, false) => "FAIL",
        };
        println!("criterion {id:>2} {name}: {tag}: {}", o.detail);
        if !o.pass && !known {
            unexpected.push(id);
        }
    }
    if !unexpected.is_empty() {
        eprintln!("unexpected failures: {unexpected:?}");
        std::process::exit(1);
    }
}

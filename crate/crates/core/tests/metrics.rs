use lfiw::estimators::WeightConfig;
use lfiw::metrics::{
    debiased_metric_suite, extract_features, frechet_distance, inception_style_score,
    kernel_distance, FeatureExtractor, FeatureSet, LabelDistribution, RandomProjection,
};
use lfiw::rng::{self, SimRng};
use lfiw::SamplePoint;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn gaussian(n: usize, d: usize, shift: f64, r: &mut SimRng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            (0..d)
                .map(|_| shift + Distribution::<f64>::sample(&StandardNormal, r))
                .collect()
        })
        .collect()
}

fn brute_mmd(x: &[Vec<f64>], y: &[Vec<f64>], h: f64) -> f64 {
    let k = |a: &[f64], b: &[f64]| {
        let d2: f64 = a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum();
        (-d2 / (2.0 * h * h)).exp()
    };
    let within = |s: &[Vec<f64>]| {
        let n = s.len();
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    acc += k(&s[i], &s[j]);
                }
            }
        }
        acc / (n * (n - 1)) as f64
    };
    let cross: f64 = x.iter().flat_map(|a| y.iter().map(move |b| k(a, b))).sum();
    within(x) + within(y) - 2.0 * cross / (x.len() * y.len()) as f64
}

#[test]
fn two_class_inception_score() {
    let preds = LabelDistribution::new(vec![vec![0.9, 0.1], vec![0.1, 0.9]]).unwrap();
    let kl = 0.9 * (0.9f64 / 0.5).ln() + 0.1 * (0.1f64 / 0.5).ln();
    assert!((inception_style_score(&preds).unwrap() - kl.exp()).abs() < 1e-12);
}

#[test]
fn kernel_distance_far_clusters_matches_oracle() {
    let x = vec![vec![0.0, 0.0], vec![0.1, 0.0], vec![0.0, 0.2]];
    let y = vec![
        vec![50.0, 50.0],
        vec![50.3, 50.0],
        vec![50.0, 49.9],
        vec![50.1, 50.1],
    ];
    let v = kernel_distance(
        &FeatureSet::new(x.clone()).unwrap(),
        &FeatureSet::new(y.clone()).unwrap(),
        1.0,
    )
    .unwrap();
    assert!((v - brute_mmd(&x, &y, 1.0)).abs() < 1e-12);
    assert!(v > 1.8);
}

#[test]
fn kernel_distance_null_is_small() {
    let small = (0..20u64)
        .filter(|&seed| {
            let mut r = rng::stream(seed, "kid-null", 0);
            let a = FeatureSet::new(gaussian(500, 2, 0.0, &mut r)).unwrap();
            let b = FeatureSet::new(gaussian(500, 2, 0.0, &mut r)).unwrap();
            kernel_distance(&a, &b, 1.0).unwrap().abs() <= 0.01
        })
        .count();
    assert!(small >= 18, "{small}/20");
}

#[test]
fn oracle_weights_suppress_spurious_mode() {
    let mut r = rng::stream(9, "toy", 0);
    let real = FeatureSet::new(gaussian(800, 2, 0.0, &mut r)).unwrap();
    let model_rows: Vec<Vec<f64>> = (0..800)
        .map(|_| {
            let shift = if r.random::<bool>() { 5.0 } else { 0.0 };
            gaussian(1, 2, shift, &mut r).remove(0)
        })
        .collect();
    let dens = |x: &[f64], c: f64| (-0.5 * x.iter().map(|v| (v - c).powi(2)).sum::<f64>()).exp();
    let w: Vec<f64> = model_rows
        .iter()
        .map(|x| dens(x, 0.0) / (0.5 * dens(x, 0.0) + 0.5 * dens(x, 5.0)))
        .collect();
    let model = FeatureSet::new(model_rows).unwrap();
    let suite = debiased_metric_suite(
        &model,
        &real,
        None,
        &w,
        &WeightConfig::self_normalized(),
        1.0,
    )
    .unwrap();
    assert!(suite.fid_lfiw < suite.fid_raw);
    assert!(suite.kid_lfiw < suite.kid_raw);
    assert!(suite.is_raw.is_none());
}

#[test]
fn disjoint_real_halves_reference_score() {
    let mut r = rng::stream(0, "reference", 0);
    let rows = gaussian(2000, 8, 0.0, &mut r);
    let a = FeatureSet::new(rows[..1000].to_vec()).unwrap();
    let b = FeatureSet::new(rows[1000..].to_vec()).unwrap();
    let fid = frechet_distance(&a, &b).unwrap();
    // Finite-sample floor: roughly d(d+1)/n for two independent halves.
    assert!(fid > 0.0 && fid < 0.2, "{fid}");
}

#[test]
fn projection_is_seeded() {
    let rows: Vec<SamplePoint> = (0..5)
        .map(|i| SamplePoint::new(vec![i as f64, 1.0, -(i as f64)]).unwrap())
        .collect();
    let a = RandomProjection::new(3, 2, 1).unwrap();
    let b = RandomProjection::new(3, 2, 1).unwrap();
    let c = RandomProjection::new(3, 2, 2).unwrap();
    assert_eq!(a.output_dim(), 2);
    let fa = extract_features(&a, &rows).unwrap();
    assert_eq!(fa.rows(), extract_features(&b, &rows).unwrap().rows());
    assert_ne!(fa.rows(), extract_features(&c, &rows).unwrap().rows());
}

fn rows(n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-5.0f64..5.0, d), n)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn frechet_is_symmetric_and_nonnegative(a in rows(12, 3), b in rows(9, 3)) {
        let (a, b) = (FeatureSet::new(a).unwrap(), FeatureSet::new(b).unwrap());
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        prop_assert!(ab >= -1e-9);
        prop_assert!((ab - ba).abs() <= 1e-7 * (1.0 + ab));
        prop_assert!(frechet_distance(&a, &a).unwrap().abs() <= 1e-8);
    }

    #[test]
    fn kernel_distance_matches_oracle(a in rows(8, 2), b in rows(6, 2), h in 0.3f64..4.0) {
        let v = kernel_distance(&FeatureSet::new(a.clone()).unwrap(), &FeatureSet::new(b.clone()).unwrap(), h).unwrap();
        prop_assert!((v - brute_mmd(&a, &b, h)).abs() <= 1e-12);
    }

    #[test]
    fn uniform_weights_change_nothing(a in rows(10, 2), b in rows(7, 2), c in 0.1f64..10.0) {
        let (fa, fb) = (FeatureSet::new(a).unwrap(), FeatureSet::new(b).unwrap());
        let fw = fa.clone().with_weights(vec![c; 10]).unwrap();
        prop_assert!((frechet_distance(&fa, &fb).unwrap() - frechet_distance(&fw, &fb).unwrap()).abs() <= 1e-7);
        prop_assert!((kernel_distance(&fa, &fb, 1.0).unwrap() - kernel_distance(&fw, &fb, 1.0).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn inception_score_lies_in_one_to_k(raw in prop::collection::vec(prop::collection::vec(0.01f64..1.0, 4), 2..20)) {
        let rows: Vec<Vec<f64>> = raw
            .into_iter()
            .map(|r| {
                let s: f64 = r.iter().sum();
                r.into_iter().map(|v| v / s).collect()
            })
            .collect();
        let is = inception_style_score(&LabelDistribution::new(rows).unwrap()).unwrap();
        prop_assert!((1.0..=4.0).contains(&is));
    }
}

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use vidiff::eval::{
    fit_gaussian, frechet_distance, inception_score, psd_sqrt, FeatureStats, MomentAccumulator,
};
use vidiff::rng::SeededRng;

fn spd(d: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = SeededRng::new(seed);
    let a = DMatrix::from_fn(d, d, |_, _| rng.normal());
    &a * a.transpose() / d as f64 + DMatrix::identity(d, d) * 0.05
}

fn stats(d: usize, seed: u64) -> FeatureStats {
    let mut rng = SeededRng::new(seed + 7);
    FeatureStats {
        n: 100,
        mu: DVector::from_fn(d, |_, _| rng.normal()),
        cov: spd(d, seed),
    }
}

#[test]
fn sqrt_residual_small_up_to_64() {
    for (i, d) in [1, 2, 5, 16, 33, 64].into_iter().enumerate() {
        let m = spd(d, i as u64);
        let r = psd_sqrt(&m, 1e-10).unwrap();
        let resid = (&r * &r - &m).norm() / m.norm();
        assert!(resid < 1e-6, "d={d} residual {resid:e}");
    }
}

#[test]
fn analytic_frechet_cases() {
    let a = stats(6, 1);
    assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-9);
    let v = DVector::from_vec(vec![0.5, -1.0, 2.0, 0.0, 0.25, 3.0]);
    let shifted = FeatureStats {
        mu: &a.mu + &v,
        ..a.clone()
    };
    assert!((frechet_distance(&a, &shifted).unwrap() - v.dot(&v)).abs() < 1e-8);
    // 1-D: (m1 - m2)^2 + (s1 - s2)^2
    let one = |m: f64, s: f64| FeatureStats {
        n: 10,
        mu: DVector::from_element(1, m),
        cov: DMatrix::from_element(1, 1, s * s),
    };
    let got = frechet_distance(&one(1.0, 2.0), &one(-0.5, 0.7)).unwrap();
    assert!((got - (1.5f64.powi(2) + 1.3f64.powi(2))).abs() < 1e-12);
}

#[test]
fn interpolation_strictly_decreases_distance() {
    let a = stats(4, 3);
    let b = stats(4, 4);
    let mut last = f64::INFINITY;
    for k in 0..5 {
        let w = k as f64 / 5.0;
        let mid = FeatureStats {
            n: 100,
            mu: &a.mu * (1.0 - w) + &b.mu * w,
            cov: &a.cov * (1.0 - w) + &b.cov * w,
        };
        let fd = frechet_distance(&mid, &b).unwrap();
        assert!(fd < last, "step {k}: {fd} not below {last}");
        last = fd;
    }
}

#[test]
fn inception_score_extremes() {
    let k = 10;
    // one class for every row: IS = 1
    let same: Vec<Vec<f64>> = (0..40).map(|_| one_hot(k, 3)).collect();
    assert!((inception_score(&same, 4).unwrap().0 - 1.0).abs() < 1e-9);
    // confident and evenly spread over all classes: IS = K
    let spread: Vec<Vec<f64>> = (0..40).map(|i| one_hot(k, i % k)).collect();
    assert!((inception_score(&spread, 4).unwrap().0 - k as f64).abs() < 1e-9);
    // uniform predictions: IS = 1
    let uniform = vec![vec![1.0 / k as f64; k]; 20];
    assert!((inception_score(&uniform, 2).unwrap().0 - 1.0).abs() < 1e-9);
}

fn one_hot(k: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; k];
    v[i] = 1.0;
    v
}

#[test]
fn merged_accumulators_match_single_pass() {
    let mut rng = SeededRng::new(9);
    let rows: Vec<Vec<f64>> = (0..57)
        .map(|_| (0..5).map(|_| rng.normal() * 3.0 + 1.0).collect())
        .collect();
    let whole = fit_gaussian(&rows).unwrap();
    let mut parts: Vec<MomentAccumulator> = Vec::new();
    for chunk in rows.chunks(13) {
        let mut acc = MomentAccumulator::new(5);
        for r in chunk {
            acc.push(r).unwrap();
        }
        parts.push(acc);
    }
    let mut merged = MomentAccumulator::new(5);
    for p in &parts {
        merged.merge(p).unwrap();
    }
    let m = merged.finish().unwrap();
    assert_eq!(m.n, whole.n);
    assert!((&m.mu - &whole.mu).norm() < 1e-12);
    assert!((&m.cov - &whole.cov).norm() < 1e-10);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn frechet_symmetric_and_non_negative(d in 1usize..12, s1 in 0u64..500, s2 in 500u64..1000) {
        let (a, b) = (stats(d, s1), stats(d, s2));
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() < 1e-8 * ab.abs().max(1.0));
        prop_assert!(ab >= -1e-8);
    }

    #[test]
    fn inception_score_within_bounds(seed in 0u64..1000, n in 2usize..60, k in 2usize..12) {
        let mut rng = SeededRng::new(seed);
        let probs: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let raw: Vec<f64> = (0..k).map(|_| (rng.normal() * 3.0).exp()).collect();
                let s: f64 = raw.iter().sum();
                raw.iter().map(|v| v / s).collect()
            })
            .collect();
        let (is, _) = inception_score(&probs, 10).unwrap();
        prop_assert!(is >= 1.0 - 1e-6 && is <= k as f64 + 1e-6, "IS {is}");
    }
}

use dlformer::data::{Normalizer, WindowSample};
use dlformer::metrics::{dtw, r2, rmse, score};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Minimum cost over every monotone warping path, by exhaustive recursion.
fn dtw_enumerate(a: &[f64], b: &[f64]) -> f64 {
    fn walk(a: &[f64], b: &[f64], i: usize, j: usize) -> f64 {
        let here = (a[i] - b[j]).abs();
        if i + 1 == a.len() && j + 1 == b.len() {
            return here;
        }
        let mut best = f64::INFINITY;
        if i + 1 < a.len() {
            best = best.min(walk(a, b, i + 1, j));
        }
        if j + 1 < b.len() {
            best = best.min(walk(a, b, i, j + 1));
        }
        if i + 1 < a.len() && j + 1 < b.len() {
            best = best.min(walk(a, b, i + 1, j + 1));
        }
        here + best
    }
    walk(a, b, 0, 0)
}

fn rmse_naive(y: &[f64], p: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..y.len() {
        s += (y[i] - p[i]).powi(2);
    }
    (s / y.len() as f64).sqrt()
}

fn r2_naive(y: &[f64], p: &[f64]) -> f64 {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..y.len() {
        num += (y[i] - p[i]).powi(2);
        den += (y[i] - mean).powi(2);
    }
    1.0 - num / den
}

#[test]
fn metrics_match_brute_force_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(2..=8);
        let m = rng.random_range(1..=8);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let b: Vec<f64> = (0..m).map(|_| rng.random_range(-5.0..5.0)).collect();
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        worst = worst.max((dtw(&a, &b).unwrap() - dtw_enumerate(&a, &b)).abs());
        worst = worst.max((rmse(&a, &p).unwrap() - rmse_naive(&a, &p)).abs());
        worst = worst.max((r2(&a, &p).unwrap() - r2_naive(&a, &p)).abs());
    }
    assert!(worst <= 1e-9, "{worst:e}");
}

#[test]
fn dtw_fixed_cases() {
    assert_eq!(dtw(&[0.0, 0.0, 0.0], &[1.0, 1.0, 1.0]).unwrap(), 3.0);
    assert_eq!(dtw(&[1.0, 2.0, 3.0], &[1.0, 2.0, 2.0, 3.0]).unwrap(), 0.0);
    assert_eq!(dtw_enumerate(&[0.0, 0.0, 0.0], &[1.0, 1.0, 1.0]), 3.0);
    assert_eq!(dtw_enumerate(&[1.0, 2.0, 3.0], &[1.0, 2.0, 2.0, 3.0]), 0.0);
}

fn series(max: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-100.0f64..100.0, 1..=max)
}

proptest! {
    #[test]
    fn dtw_properties(a in series(12), b in series(12)) {
        prop_assert_eq!(dtw(&a, &a).unwrap(), 0.0);
        let ab = dtw(&a, &b).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - dtw(&b, &a).unwrap()).abs() <= 1e-9 * (1.0 + ab));
        if a.len() == b.len() {
            let diag: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
            prop_assert!(ab <= diag + 1e-9);
        }
    }

    #[test]
    fn rmse_squared_recovers_sse(pairs in prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 1..40)) {
        let (y, p): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let sse: f64 = y.iter().zip(&p).map(|(a, b)| (a - b).powi(2)).sum();
        let r = rmse(&y, &p).unwrap();
        prop_assert!((r * r * y.len() as f64 - sse).abs() <= 1e-9 * (1.0 + sse));
    }

    #[test]
    fn rmse_monotone_in_one_error(y in series(10), i in 0usize..10, e in 0.0f64..10.0, extra in 0.01f64..10.0) {
        let i = i % y.len();
        let mut p1 = y.clone();
        p1[i] += e;
        let mut p2 = y.clone();
        p2[i] += e + extra;
        prop_assert!(rmse(&y, &p2).unwrap() > rmse(&y, &p1).unwrap());
    }

    #[test]
    fn r2_at_most_one(y in series(10), p in series(10)) {
        let n = y.len().min(p.len());
        if let Ok(v) = r2(&y[..n], &p[..n]) {
            prop_assert!(v <= 1.0 + 1e-12);
        }
    }
}

fn window(y: Vec<f64>) -> WindowSample {
    WindowSample {
        features: 1,
        lags: 1,
        x: vec![0.0],
        y_ref: vec![0.0],
        y,
        anchor: 0,
    }
}

#[test]
fn score_denormalizes_and_ignores_order() {
    let norm = Normalizer {
        means: vec![10.0],
        stds: vec![2.0],
    };
    let samples = vec![window(vec![0.0, 1.0]), window(vec![-1.0, 0.5]), window(vec![2.0, 0.0])];
    let preds = vec![vec![0.5, 1.0], vec![-1.0, 0.0], vec![1.0, 1.0]];
    let cell = score(&samples, &preds, &norm, 0).unwrap();
    let y: Vec<f64> = samples.iter().flat_map(|s| s.y.iter().map(|v| v * 2.0 + 10.0)).collect();
    let p: Vec<f64> = preds.iter().flat_map(|v| v.iter().map(|v| v * 2.0 + 10.0)).collect();
    assert!((cell.rmse - rmse_naive(&y, &p)).abs() < 1e-12);
    assert!((cell.r2.unwrap() - r2_naive(&y, &p)).abs() < 1e-12);
    let want_dtw = (0..3)
        .map(|w| dtw_enumerate(&y[2 * w..2 * w + 2], &p[2 * w..2 * w + 2]))
        .sum::<f64>()
        / 3.0;
    assert!((cell.dtw - want_dtw).abs() < 1e-12);

    let order = [2, 0, 1];
    let s2: Vec<_> = order.iter().map(|&i| samples[i].clone()).collect();
    let p2: Vec<_> = order.iter().map(|&i| preds[i].clone()).collect();
    let cell2 = score(&s2, &p2, &norm, 0).unwrap();
    assert!((cell.rmse - cell2.rmse).abs() < 1e-12);
    assert!((cell.dtw - cell2.dtw).abs() < 1e-12);

    let flat = vec![window(vec![3.0]), window(vec![3.0])];
    assert_eq!(score(&flat, &[vec![3.0], vec![3.0]], &norm, 0).unwrap().r2, None);
    assert!(score(&[], &[], &norm, 0).is_err());
}

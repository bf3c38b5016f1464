use mtsens::rng;
use mtsens::sumtrees::{fit, SumOfTreesConfig};
use rand::Rng;
use rand_distr::{Distribution, Normal};

fn uniform(n: usize, p: usize, seed: u64) -> Vec<f64> {
    let mut r = rng::stream(seed, &[]);
    (0..n * p).map(|_| r.random::<f64>()).collect()
}

fn rmse(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
}

/// Closed-form least squares of y on [1, x1, ..., xp] via normal equations.
fn least_squares_fit(x: &[f64], p: usize, y: &[f64]) -> Vec<f64> {
    let n = y.len();
    let k = p + 1;
    let row = |i: usize| -> Vec<f64> { std::iter::once(1.0).chain(x[i * p..(i + 1) * p].iter().copied()).collect() };
    let mut a = vec![vec![0.0; k + 1]; k];
    for i in 0..n {
        let r = row(i);
        for u in 0..k {
            for v in 0..k {
                a[u][v] += r[u] * r[v];
            }
            a[u][k] += r[u] * y[i];
        }
    }
    for c in 0..k {
        for r in 0..k {
            if r != c {
                let f = a[r][c] / a[c][c];
                for cc in c..=k {
                    a[r][cc] -= f * a[c][cc];
                }
            }
        }
    }
    let beta: Vec<f64> = (0..k).map(|u| a[u][k] / a[u][u]).collect();
    (0..n).map(|i| row(i).iter().zip(&beta).map(|(a, b)| a * b).sum()).collect()
}

#[test]
fn linear_signal_tracks_least_squares() {
    let n = 500;
    let x = uniform(n, 1, 1);
    let noise = Normal::new(0.0, 0.1).unwrap();
    let mut r = rng::stream(2, &[]);
    let y: Vec<f64> = x.iter().map(|&v| 2.0 * v + noise.sample(&mut r)).collect();
    let m = fit(&x, n, 1, &y, &SumOfTreesConfig { seed: 3, ..Default::default() }).unwrap();
    let pred = m.predict_mean(&x, n).unwrap();
    let ls = least_squares_fit(&x, 1, &y);
    assert!(rmse(&pred, &ls) < 0.1, "{}", rmse(&pred, &ls));
    let sigma = m.sigma_draws().iter().sum::<f64>() / m.kept() as f64;
    assert!((0.07..=0.14).contains(&sigma), "{sigma}");
}

#[test]
fn interaction_surface_beats_additive_fit() {
    let n = 1000;
    let x = uniform(n, 2, 4);
    let noise = Normal::new(0.0, 0.05).unwrap();
    let mut r = rng::stream(5, &[]);
    let truth: Vec<f64> = (0..n).map(|i| 4.0 * (x[2 * i] - 0.5) * (x[2 * i + 1] - 0.5)).collect();
    let y: Vec<f64> = truth.iter().map(|t| t + noise.sample(&mut r)).collect();
    let m = fit(&x, n, 2, &y, &SumOfTreesConfig { seed: 6, ..Default::default() }).unwrap();
    let tree_rmse = rmse(&m.predict_mean(&x, n).unwrap(), &truth);
    let linear_rmse = rmse(&least_squares_fit(&x, 2, &y), &truth);
    assert!(tree_rmse <= 0.5 * linear_rmse, "{tree_rmse} vs {linear_rmse}");
}

#[test]
fn noise_keeps_trees_shallow() {
    let n = 300;
    let x = uniform(n, 3, 7);
    let mut r = rng::stream(8, &[]);
    let y: Vec<f64> = (0..n).map(|_| r.random::<f64>()).collect();
    let m = fit(&x, n, 3, &y, &SumOfTreesConfig { seed: 9, ..SumOfTreesConfig::fast() }).unwrap();
    let d = m.diagnostics();
    assert!(d.mean_depth < 4.0, "{}", d.mean_depth);
    assert!(d.grow_accepted > 0);
}

#[test]
fn constant_response_predicts_constant() {
    let n = 50;
    let x = uniform(n, 2, 10);
    let m = fit(&x, n, 2, &vec![0.7; n], &SumOfTreesConfig { seed: 1, ..SumOfTreesConfig::fast() }).unwrap();
    assert!(m.degenerate());
    for v in m.predict_mean(&x, n).unwrap() {
        assert!((v - 0.7).abs() < 0.01);
    }
}

#[test]
fn in_sample_error_below_response_sd() {
    let n = 200;
    let x = uniform(n, 2, 11);
    let mut r = rng::stream(12, &[]);
    let y: Vec<f64> = (0..n).map(|i| (x[2 * i] > 0.5) as u8 as f64 + 0.3 * r.random::<f64>()).collect();
    let m = fit(&x, n, 2, &y, &SumOfTreesConfig { seed: 13, ..SumOfTreesConfig::fast() }).unwrap();
    let mean = y.iter().sum::<f64>() / n as f64;
    let sd = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    assert!(rmse(&m.predict_mean(&x, n).unwrap(), &y) <= sd);
    assert!(m.sigma_draws().iter().all(|s| *s > 0.0));
}

#[test]
fn prediction_rejects_wrong_width() {
    let n = 40;
    let x = uniform(n, 2, 14);
    let y: Vec<f64> = (0..n).map(|i| x[2 * i]).collect();
    let m = fit(&x, n, 2, &y, &SumOfTreesConfig { keep: 10, seed: 1, ..SumOfTreesConfig::fast() }).unwrap();
    assert!(m.predict_draws(&[0.1, 0.2, 0.3], 1).is_err());
}

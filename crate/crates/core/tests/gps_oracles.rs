use mtsens::dataset::{validate_overlap, ColumnKind, ColumnMeta, ObservationalDataset};
use mtsens::gps::{fit_gps, fit_multilogit_weighted, stratum_means, GpsModel, MultilogitConfig};
use mtsens::rng;
use mtsens::simlab::gen_illustrative;
use rand::Rng;

/// Plain Newton-Raphson binary logistic regression on [1, x].
fn logistic_newton(x: &[f64], d: usize, y: &[f64]) -> Vec<f64> {
    let n = y.len();
    let k = d + 1;
    let mut beta = vec![0.0; k];
    for _ in 0..100 {
        let mut grad = vec![0.0; k];
        let mut hess = vec![0.0; k * k];
        for i in 0..n {
            let row: Vec<f64> = std::iter::once(1.0).chain(x[i * d..(i + 1) * d].iter().copied()).collect();
            let eta: f64 = row.iter().zip(&beta).map(|(a, b)| a * b).sum();
            let p = 1.0 / (1.0 + (-eta).exp());
            for a in 0..k {
                grad[a] += (y[i] - p) * row[a];
                for b in 0..k {
                    hess[a * k + b] += p * (1.0 - p) * row[a] * row[b];
                }
            }
        }
        // Gaussian elimination on the k×k system.
        let mut m: Vec<Vec<f64>> = (0..k).map(|a| {
            let mut r = hess[a * k..(a + 1) * k].to_vec();
            r.push(grad[a]);
            r
        }).collect();
        for c in 0..k {
            let piv = (c..k).max_by(|&a, &b| m[a][c].abs().total_cmp(&m[b][c].abs())).unwrap();
            m.swap(c, piv);
            for r in 0..k {
                if r != c {
                    let f = m[r][c] / m[c][c];
                    for cc in c..=k {
                        m[r][cc] -= f * m[c][cc];
                    }
                }
            }
        }
        let step: Vec<f64> = (0..k).map(|a| m[a][k] / m[a][a]).collect();
        for a in 0..k {
            beta[a] += step[a];
        }
        if step.iter().map(|s| s.abs()).fold(0.0, f64::max) < 1e-13 {
            break;
        }
    }
    beta
}

#[test]
fn two_arm_multilogit_matches_binary_logistic() {
    let (n, d) = (400, 2);
    let mut r = rng::stream(31, &[]);
    let x: Vec<f64> = (0..n * d).map(|_| r.random::<f64>() * 2.0 - 1.0).collect();
    let arms: Vec<usize> = (0..n)
        .map(|i| {
            let p = 1.0 / (1.0 + (-(0.3 + 1.2 * x[i * d] - 0.7 * x[i * d + 1])).exp());
            if r.random::<f64>() < p { 2 } else { 1 }
        })
        .collect();
    let y: Vec<f64> = arms.iter().map(|&a| (a == 2) as u8 as f64).collect();
    let beta = logistic_newton(&x, d, &y);
    let fit = fit_multilogit_weighted(&x, d, &arms, 2, &vec![1.0; n], &MultilogitConfig { ridge: 0.0, max_iter: 200, tol: 1e-12 })
        .unwrap();
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let eta = beta[0] + beta[1] * row[0] + beta[2] * row[1];
        let want = 1.0 / (1.0 + (-eta).exp());
        let got = fit.predict(row)[1];
        assert!((got - want).abs() < 1e-6, "unit {i}: {got} vs {want}");
    }
}

#[test]
fn stratified_means_track_empirical_frequencies() {
    let t = gen_illustrative(3000, true, 41).unwrap();
    let ds = t.observed();
    let gps = fit_gps(ds, &GpsModel::Stratified { columns: vec![0], prior_weight: 1.0 }, 200, 5).unwrap();
    let means = stratum_means(ds, &gps, &[0]);
    for x in 0..2i64 {
        let units: Vec<usize> = (0..ds.n()).filter(|&i| ds.value(i, 0) as i64 == x).collect();
        let tol = 2.0 / (units.len() as f64).sqrt();
        for a in 1..=3 {
            let freq = units.iter().filter(|&&i| ds.treatment()[i] == a).count() as f64 / units.len() as f64;
            let got = means[&vec![x]][a - 1];
            assert!((got - freq).abs() <= tol, "x={x} arm={a}: {got} vs {freq}");
        }
    }
}

#[test]
fn multilogit_matches_stratified_on_binary_covariate() {
    let t = gen_illustrative(1500, true, 42).unwrap();
    let ds = t.observed();
    let strat = stratum_means(ds, &fit_gps(ds, &GpsModel::Stratified { columns: vec![0], prior_weight: 1.0 }, 50, 6).unwrap(), &[0]);
    let logit = stratum_means(ds, &fit_gps(ds, &GpsModel::Multilogit(MultilogitConfig::default()), 50, 6).unwrap(), &[0]);
    for (k, v) in &strat {
        for a in 0..3 {
            assert!((v[a] - logit[k][a]).abs() <= 0.03, "{k:?} arm {}: {} vs {}", a + 1, v[a], logit[k][a]);
        }
    }
}

#[test]
fn draws_are_reproducible_and_simplexes() {
    let t = gen_illustrative(500, true, 43).unwrap();
    let model = GpsModel::Multilogit(MultilogitConfig::default());
    let a = fit_gps(t.observed(), &model, 8, 77).unwrap();
    let b = fit_gps(t.observed(), &model, 8, 77).unwrap();
    assert_eq!(a.values(), b.values());
    for row in a.values().chunks(3) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-8);
        assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
    }
    assert_ne!(a.values(), fit_gps(t.observed(), &model, 8, 78).unwrap().values());
}

#[test]
fn overlap_report_flags_extreme_units() {
    let n = 300;
    let mut r = rng::stream(44, &[]);
    let x: Vec<f64> = (0..n).map(|_| r.random::<f64>() * 6.0 - 3.0).collect();
    let arms: Vec<usize> = x.iter().map(|&v| if r.random::<f64>() < 1.0 / (1.0 + (-3.0 * v).exp()) { 1 } else { 2 }).collect();
    let ds = ObservationalDataset::new(vec![ColumnMeta { name: "x".into(), kind: ColumnKind::Continuous }], x, arms, vec![0; n], vec![1, 2])
        .unwrap();
    let gps = fit_gps(&ds, &GpsModel::Multilogit(MultilogitConfig::default()), 5, 1).unwrap();
    let report = validate_overlap(&ds, &gps, 0.05).unwrap();
    assert!(!report.flagged.is_empty());
    assert!(report.flagged.iter().all(|u| ds.value(u.unit, 0).abs() > 0.5));
    assert!(validate_overlap(&ds, &gps, 0.5).is_err());
}

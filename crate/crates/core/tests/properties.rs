use std::collections::BTreeMap;

use mtsens::confounding::{adjust_outcome, bias, sample_c, CMatrix, ConfoundingSpec, PriorSpec};
use mtsens::dataset::{read_csv, write_csv, ColumnKind, ColumnMeta, ObservationalDataset, TreatmentPair};
use mtsens::engine::{pool, summarize};
use mtsens::gps::{clamp_row, CLAMP_FLOOR};
use mtsens::rng;
use mtsens::simlab::{metrics, Axis};
use proptest::prelude::*;

fn simplex(j: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, j).prop_map(|w| {
        let s: f64 = w.iter().sum();
        w.into_iter().map(|v| v / s).collect()
    })
}

fn cmatrix(j: usize) -> impl Strategy<Value = CMatrix> {
    prop::collection::vec(-1.0f64..1.0, j * j).prop_map(move |v| {
        let mut c = CMatrix::zeros(j);
        for a in 1..=j {
            for l in (1..=j).filter(|&l| l != a) {
                c.set(a, l, v[(a - 1) * j + l - 1]);
            }
        }
        c
    })
}

fn instance() -> impl Strategy<Value = (usize, Vec<f64>, CMatrix, CMatrix, usize, usize)> {
    (2usize..6).prop_flat_map(|j| (Just(j), simplex(j), cmatrix(j), cmatrix(j), 1..=j, 1..=j)).prop_filter_map(
        "distinct arms",
        |(j, p, c, d, a, b)| (a != b).then_some((j, p, c, d, a, b)),
    )
}

fn combine(c: &CMatrix, d: &CMatrix, s: f64, t: f64) -> CMatrix {
    let j = c.n_arms();
    let mut out = CMatrix::zeros(j);
    for a in 1..=j {
        for l in (1..=j).filter(|&l| l != a) {
            out.set(a, l, s * c.get(a, l) + t * d.get(a, l));
        }
    }
    out
}

proptest! {
    #[test]
    fn bias_is_linear_in_c((_, p, c, d, a, b) in instance(), s in -2.0f64..2.0, t in -2.0f64..2.0) {
        let pair = TreatmentPair { j: a, k: b };
        let lhs = bias(pair, &p, &combine(&c, &d, s, t)).unwrap();
        let rhs = s * bias(pair, &p, &c).unwrap() + t * bias(pair, &p, &d).unwrap();
        prop_assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn bias_is_antisymmetric((_, p, c, _, a, b) in instance()) {
        let pair = TreatmentPair { j: a, k: b };
        let fwd = bias(pair, &p, &c).unwrap();
        let rev = bias(pair.swapped(), &p, &c).unwrap();
        prop_assert!((fwd + rev).abs() < 1e-12);
    }

    #[test]
    fn zero_own_row_leaves_outcome_unchanged((j, p, c, _, a, _) in instance(), y in 0u8..=1) {
        let mut c = c;
        for l in (1..=j).filter(|&l| l != a) {
            c.set(a, l, 0.0);
        }
        prop_assert_eq!(adjust_outcome(y as f64, a, &p, &c).unwrap(), y as f64);
    }

    #[test]
    fn adjusted_outcome_stays_in_range((_, p, c, _, a, _) in instance(), y in 0u8..=1) {
        let v = adjust_outcome(y as f64, a, &p, &c).unwrap();
        prop_assert!((-1.0..=2.0).contains(&v));
    }

    /// Exhaustive enumeration over strata: with per-stratum arm probabilities
    /// and arm-conditional potential-outcome means, the correction cancels the
    /// bias and the adjusted contrast equals the true contrast.
    #[test]
    fn correction_removes_bias_by_enumeration(
        j in 2usize..5,
        strata in 1usize..4,
        seed in any::<u64>(),
    ) {
        use rand::Rng;
        let mut r = rng::stream(seed, &[]);
        let weights: Vec<f64> = (0..strata).map(|_| r.random::<f64>() + 0.1).collect();
        let wsum: f64 = weights.iter().sum();
        let (mut naive_tot, mut adj_tot, mut true_tot, mut bias_tot) = (vec![0.0; j * j], vec![0.0; j * j], vec![0.0; j * j], vec![0.0; j * j]);
        for w in weights.iter().map(|w| w / wsum) {
            let raw: Vec<f64> = (0..j).map(|_| r.random::<f64>() + 0.05).collect();
            let rs: f64 = raw.iter().sum();
            let p: Vec<f64> = raw.iter().map(|v| v / rs).collect();
            // m[a][i] = E[Y(i) | A = a, stratum]
            let m: Vec<Vec<f64>> = (0..j).map(|_| (0..j).map(|_| r.random::<f64>()).collect()).collect();
            let mut c = CMatrix::zeros(j);
            for i in 0..j {
                for l in (0..j).filter(|&l| l != i) {
                    c.set(i + 1, l + 1, m[i][i] - m[l][i]);
                }
            }
            let marginal: Vec<f64> = (0..j).map(|i| (0..j).map(|a| p[a] * m[a][i]).sum()).collect();
            for a in 1..=j {
                for b in (1..=j).filter(|&b| b != a) {
                    let idx = (a - 1) * j + b - 1;
                    naive_tot[idx] += w * (m[a - 1][a - 1] - m[b - 1][b - 1]);
                    adj_tot[idx] += w * (adjust_outcome(m[a - 1][a - 1], a, &p, &c).unwrap()
                        - adjust_outcome(m[b - 1][b - 1], b, &p, &c).unwrap());
                    true_tot[idx] += w * (marginal[a - 1] - marginal[b - 1]);
                    bias_tot[idx] += w * bias(TreatmentPair { j: a, k: b }, &p, &c).unwrap();
                }
            }
        }
        for idx in 0..j * j {
            prop_assert!((bias_tot[idx] + adj_tot[idx] - naive_tot[idx]).abs() < 1e-12);
            prop_assert!((adj_tot[idx] - true_tot[idx]).abs() < 1e-12);
        }
    }

    #[test]
    fn third_arm_functions_matter(
        p in simplex(3),
        ckl in -1.0f64..1.0,
        cjl in -1.0f64..1.0,
    ) {
        prop_assume!((ckl - cjl).abs() > 1e-3);
        let pair = TreatmentPair { j: 1, k: 2 };
        let c = CMatrix::zeros(3).with(2, 3, ckl).with(1, 3, cjl);
        let b = bias(pair, &p, &c).unwrap();
        prop_assert!(b.abs() > 0.0);
        prop_assert!((b + p[2] * (ckl - cjl)).abs() < 1e-12);
        prop_assert_eq!(bias(pair, &p, &CMatrix::zeros(3)).unwrap(), 0.0);
    }

    #[test]
    fn uniform_draws_respect_support(lo in -1.0f64..1.0, width in 0.0f64..1.0, seed in any::<u64>()) {
        let hi = (lo + width).min(1.0);
        let spec = ConfoundingSpec::new(3).with(1, 3, PriorSpec::uniform(lo, hi)).unwrap()
            .with(3, 2, PriorSpec::TruncNormal { center: lo, spread: 0.3, lo, hi }).unwrap();
        let draws = sample_c(&spec, 20, &mut rng::stream(seed, &[])).unwrap();
        for d in &draws {
            for (j, l) in [(1, 3), (3, 2)] {
                let v = d.get(j, l).values()[0];
                prop_assert!(v >= lo && v <= hi);
            }
            prop_assert_eq!(d.get(2, 1).values()[0], 0.0);
        }
    }

    #[test]
    fn clamped_rows_are_simplexes(row in prop::collection::vec(0.0f64..1.0, 2..6)) {
        prop_assume!(row.iter().sum::<f64>() > 0.0);
        let s: f64 = row.iter().sum();
        let orig: Vec<f64> = row.iter().map(|v| v / s).collect();
        let mut clamped = orig.clone();
        clamp_row(&mut clamped);
        prop_assert!((clamped.iter().sum::<f64>() - 1.0).abs() < 1e-8);
        for (a, b) in orig.iter().zip(&clamped) {
            prop_assert!(*b > 0.0 && *b < 1.0);
            prop_assert!((a - b).abs() <= CLAMP_FLOOR * orig.len() as f64);
        }
    }

    #[test]
    fn csv_round_trip(
        rows in prop::collection::vec((0u8..=1, 0usize..3, -1e6f64..1e6, 0i64..4), 3..40),
        labels in prop::sample::subsequence(vec![-3i64, 0, 2, 7, 11], 3),
    ) {
        let mut rows = rows;
        for (a, row) in rows.iter_mut().take(3).enumerate() {
            row.1 = a;
        }
        let ds = ObservationalDataset::new(
            vec![
                ColumnMeta { name: "x".into(), kind: ColumnKind::Continuous },
                ColumnMeta { name: "grade".into(), kind: ColumnKind::Ordinal },
            ],
            rows.iter().flat_map(|r| [r.2, r.3 as f64]).collect(),
            rows.iter().map(|r| r.1 + 1).collect(),
            rows.iter().map(|r| r.0).collect(),
            labels.clone(),
        ).unwrap();
        let mut buf = Vec::new();
        write_csv(&ds, &mut buf).unwrap();
        let back = read_csv(buf.as_slice(), &ds.schema()).unwrap();
        prop_assert_eq!(&back, &ds);
        for (i, &a) in ds.treatment().iter().enumerate() {
            prop_assert_eq!(back.arm_of_label(ds.label_of_arm(a)), Some(ds.treatment()[i]));
        }
    }

    #[test]
    fn summaries_are_ordered(samples in prop::collection::vec(-3.0f64..3.0, 1..200)) {
        let s = summarize(&samples);
        prop_assert!(s.lower <= s.mean && s.mean <= s.upper);
    }

    #[test]
    fn pooled_length_is_product(fits in 1usize..6, k in 1usize..20) {
        let seqs: Vec<Vec<f64>> = (0..fits).map(|f| (0..k).map(|i| (f * k + i) as f64).collect()).collect();
        let p = pool(TreatmentPair { j: 1, k: 2 }, &seqs).unwrap();
        prop_assert_eq!(p.samples.len(), fits * k);
        prop_assert_eq!(p.fit_means.len(), fits);
    }

    #[test]
    fn rmse_dominates_aab(errs in prop::collection::vec(-1.0f64..1.0, 1..50)) {
        let sums: Vec<_> = errs.iter().map(|e| summarize(&[*e])).collect();
        let m = metrics(&sums, 0.0).unwrap();
        prop_assert!(m.rmse + 1e-12 >= m.aab);
        prop_assert!((0.0..=1.0).contains(&m.coverage));
    }

    #[test]
    fn axis_points_stay_in_range(lo in -1.0f64..1.0, span in 0.0f64..1.0, step in 0.01f64..1.0) {
        let axis = Axis { lo, hi: (lo + span).min(1.0), step };
        let pts = axis.points().unwrap();
        prop_assert_eq!(pts.len(), axis.len().unwrap());
        prop_assert!(pts.iter().all(|v| *v >= axis.lo - 1e-9 && *v <= axis.hi + 1e-9));
    }
}

#[test]
fn stratified_prior_must_cover_observed_values() {
    let ds = ObservationalDataset::new(
        vec![ColumnMeta { name: "x1".into(), kind: ColumnKind::Binary }],
        vec![0.0, 1.0, 0.0, 1.0],
        vec![1, 2, 1, 2],
        vec![0, 1, 1, 0],
        vec![1, 2],
    )
    .unwrap();
    let partial = PriorSpec::Stratified { column: 0, strata: BTreeMap::from([(0, PriorSpec::point(0.1))]) };
    let spec = ConfoundingSpec::new(2).with(1, 2, partial).unwrap();
    assert!(spec.check_against(&ds).is_err());
}

//! Calibrates the contextual simulation design and prints it as JSON.
//!
//! The structural coefficients below are fixed by hand. The outcome offsets
//! tau, the X1 assignment coefficients of arms 1 and 3, and the assignment
//! intercepts are solved so that, under 1:1:1 allocation and strong overlap,
//! the observed event rates are (0.38, 0.34, 0.51) and the CATEs are
//! (0.05, -0.11, -0.16). Intercepts for every other (ratio, overlap) setting
//! are then solved to hit the target allocation.
//!
//! Targets are evaluated as exact conditional expectations over a fixed
//! covariate sample, so the system is smooth in the parameters.
//!
//!     cargo run --release -p mtsens --example calibrate_contextual > crates/core/data/contextual.json

use mtsens::linalg;
use mtsens::rng;
use mtsens::simlab::{
    contextual_covariates, ArmRatio, ContextualDefaults, ContextualDgpConfig, LinearPredictor, NonlinearTerm, Overlap,
    PerOverlap, Term, Transform, UmcLevel, CONTEXTUAL_P,
};
use statrs::distribution::{ContinuousCDF, Gamma};

const TARGET_RATES: [f64; 3] = [0.38, 0.34, 0.51];
const TARGET_CATE: [f64; 3] = [0.05, -0.11, -0.16];
const GAMMA: PerOverlap<f64> = PerOverlap { strong: 1.0, moderate: 1.6, weak: 2.2 };
const N_CAL: usize = 200_000;
const N_TRUTH: usize = 400_000;

fn t(column: usize, coef: [f64; 3]) -> Term {
    Term { column, coef }
}

fn nl(transform: Transform, coef: [f64; 3]) -> NonlinearTerm {
    NonlinearTerm { transform, coef }
}

fn product(a: usize, b: usize, coef: [f64; 3]) -> NonlinearTerm {
    nl(Transform::Product { a, b }, coef)
}

fn structure() -> (LinearPredictor, LinearPredictor) {
    let x12_median = Gamma::new(2.0, 2.0).unwrap().inverse_cdf(0.5);
    let assignment = LinearPredictor {
        linear: vec![
            t(1, [0.5, 0.0, -0.5]),
            t(2, [0.3, 0.0, -0.2]),
            t(4, [1.1, -0.2, -1.2]),
            t(6, [0.2, -0.1, 0.0]),
            t(9, [0.1, 0.0, -0.1]),
            t(11, [0.15, 0.0, -0.1]),
            t(12, [0.2, 0.0, 0.1]),
            t(13, [1.5, 0.0, -1.5]),
            t(14, [0.3, 0.0, -0.3]),
            t(15, [-0.25, 0.0, 0.3]),
        ],
        nonlinear: vec![
            nl(Transform::Square { column: 1 }, [0.1, 0.0, -0.1]),
            nl(Transform::AboveMedian { column: 3, median: 0.5 }, [0.3, 0.0, 0.0]),
            product(13, 11, [0.3, 0.0, -0.3]),
            product(13, 12, [0.3, 0.0, -0.3]),
            product(14, 15, [0.03, 0.0, -0.03]),
            product(14, 11, [0.06, 0.0, -0.06]),
            product(14, 12, [0.06, 0.0, -0.06]),
            product(15, 11, [-0.06, 0.0, 0.06]),
            product(15, 12, [0.05, 0.0, -0.05]),
        ],
    };
    let outcome = LinearPredictor {
        linear: vec![
            t(1, [-1.5, -1.3, -1.6]),
            t(3, [0.5, 0.3, 0.4]),
            t(4, [1.0, 0.9, 1.1]),
            t(5, [0.2, 0.3, 0.1]),
            t(7, [0.2, 0.1, 0.3]),
            t(10, [0.1, 0.15, 0.0]),
            t(11, [0.1, 0.05, 0.15]),
            t(12, [0.3, 0.2, 0.25]),
            t(13, [1.2, 1.0, 1.4]),
            t(14, [0.2, 0.25, 0.15]),
            t(15, [0.15, 0.1, 0.2]),
        ],
        nonlinear: vec![
            nl(Transform::ExpScaled { column: 2, scale: 0.5 }, [0.3, 0.2, 0.4]),
            nl(Transform::Square { column: 5 }, [-0.1, -0.05, -0.08]),
            nl(Transform::AboveMedian { column: 12, median: x12_median }, [0.2, 0.3, 0.1]),
            product(13, 11, [0.3, 0.4, 0.2]),
            product(13, 12, [0.2, 0.3, 0.25]),
            product(14, 15, [0.03, 0.04, 0.02]),
            product(14, 11, [0.05, 0.06, 0.04]),
            product(14, 12, [0.05, 0.04, 0.06]),
            product(15, 11, [0.05, 0.04, 0.05]),
            product(15, 12, [0.04, 0.05, 0.03]),
        ],
    };
    (assignment, outcome)
}

fn sample(n: usize, path: u64) -> Vec<[f64; CONTEXTUAL_P]> {
    let mut r = rng::stream(2024, &[rng::domain::CALIBRATION, path]);
    (0..n).map(|_| contextual_covariates(&mut r)).collect()
}

struct Moments {
    shares: [f64; 3],
    rates: [f64; 3],
    means: [f64; 3],
}

fn moments(cfg: &ContextualDgpConfig, xs: &[[f64; CONTEXTUAL_P]]) -> Moments {
    let (mut pi, mut pimu, mut mu) = ([0.0; 3], [0.0; 3], [0.0; 3]);
    for x in xs {
        let p = cfg.gps_row(x);
        let m = cfg.mu_row(x);
        for a in 0..3 {
            pi[a] += p[a];
            pimu[a] += p[a] * m[a];
            mu[a] += m[a];
        }
    }
    let n = xs.len() as f64;
    Moments {
        shares: pi.map(|v| v / n),
        rates: std::array::from_fn(|a| pimu[a] / pi[a]),
        means: mu.map(|v| v / n),
    }
}

/// Damped Gauss-Newton with a forward-difference Jacobian.
fn solve(mut theta: Vec<f64>, f: impl Fn(&[f64]) -> Vec<f64>) -> Vec<f64> {
    let d = theta.len();
    for it in 0..50 {
        let r = f(&theta);
        let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        eprintln!("iteration {it}: residual {norm:.3e}");
        if norm < 1e-10 {
            return theta;
        }
        let h = 1e-6;
        let mut jac = vec![0.0; r.len() * d];
        for c in 0..d {
            let mut tp = theta.clone();
            tp[c] += h;
            let rp = f(&tp);
            for (row, (a, b)) in rp.iter().zip(&r).enumerate() {
                jac[row * d + c] = (a - b) / h;
            }
        }
        let mut jtj = vec![0.0; d * d];
        let mut jtr = vec![0.0; d];
        for a in 0..d {
            for b in 0..d {
                jtj[a * d + b] = (0..r.len()).map(|row| jac[row * d + a] * jac[row * d + b]).sum();
            }
            jtr[a] = -(0..r.len()).map(|row| jac[row * d + a] * r[row]).sum::<f64>();
        }
        let step = linalg::cholesky_solve(&jtj, &jtr, d).expect("calibration Jacobian is full rank");
        let mut scale = 1.0;
        loop {
            let trial: Vec<f64> = theta.iter().zip(&step).map(|(t, s)| t + scale * s).collect();
            let tn = f(&trial).iter().map(|v| v * v).sum::<f64>().sqrt();
            if tn < norm || scale < 1e-4 {
                theta = trial;
                break;
            }
            scale *= 0.5;
        }
    }
    panic!("calibration did not converge");
}

fn with_params(base: &ContextualDgpConfig, theta: &[f64]) -> ContextualDgpConfig {
    let mut cfg = base.clone();
    cfg.tau = [theta[0], theta[1], theta[2]];
    cfg.assignment.linear[0].coef = [theta[3], 0.0, theta[4]];
    cfg.alpha = [0.0, theta[5], theta[6]];
    cfg
}

fn solve_alpha(base: &ContextualDgpConfig, ratio: ArmRatio, xs: &[[f64; CONTEXTUAL_P]]) -> [f64; 3] {
    let shares = ratio.shares();
    let start = vec![(shares[1] / shares[0]).ln(), (shares[2] / shares[0]).ln()];
    let theta = solve(start, |th| {
        let cfg = ContextualDgpConfig { alpha: [0.0, th[0], th[1]], ..base.clone() };
        let m = moments(&cfg, xs);
        vec![m.shares[1] - shares[1], m.shares[2] - shares[2]]
    });
    [0.0, theta[0], theta[1]]
}

/// Large-sample biases of the naive, marginal-c0 and c̄ adjusted CATEs
/// when the level's covariates are hidden.
fn limits(cfg: &ContextualDgpConfig, xs: &[[f64; CONTEXTUAL_P]]) -> [[f64; 3]; 3] {
    let nodes = cfg.hidden_nodes();
    let rows: Vec<([f64; 3], [[f64; 3]; 3])> = xs.iter().map(|x| cfg.observed_conditionals(x, &nodes)).collect();
    let n = xs.len() as f64;
    let (mut pl, mut plm, mut plc) = ([0.0; 3], [[0.0; 3]; 3], [[0.0; 3]; 3]);
    for (p, m) in &rows {
        for l in 0..3 {
            pl[l] += p[l];
            for j in 0..3 {
                plm[l][j] += p[l] * m[l][j];
                plc[j][l] += p[l] * (m[j][j] - m[l][j]);
            }
        }
    }
    let marginal = |j: usize, l: usize| plm[j][j] / pl[j] - plm[l][j] / pl[l];
    let cbar = |j: usize, l: usize| plc[j][l] / pl[l];
    let mut arms = [[0.0; 3]; 3];
    for (p, m) in &rows {
        for j in 0..3 {
            let others = |c: &dyn Fn(usize, usize) -> f64| (0..3).filter(|&l| l != j).map(|l| p[l] * c(j, l)).sum::<f64>();
            arms[0][j] += m[j][j] / n;
            arms[1][j] += (m[j][j] - others(&marginal)) / n;
            arms[2][j] += (m[j][j] - others(&cbar)) / n;
        }
    }
    let mo = moments(cfg, xs);
    let truth = [mo.means[0] - mo.means[1], mo.means[0] - mo.means[2], mo.means[1] - mo.means[2]];
    arms.map(|v| {
        let c = [v[0] - v[1], v[0] - v[2], v[1] - v[2]];
        std::array::from_fn(|i| c[i] - truth[i])
    })
}

fn main() {
    let (assignment, outcome) = structure();
    let xs = sample(N_CAL, 0);
    let base = ContextualDgpConfig {
        n: N_CAL,
        alpha: [0.0; 3],
        gamma: GAMMA.strong,
        umc: UmcLevel::I,
        assignment,
        outcome,
        tau: [0.0; 3],
        seed: 0,
    };
    let theta = solve(vec![-0.5, -0.7, 0.0, 1.0, -1.0, 0.0, 0.0], |th| {
        let m = moments(&with_params(&base, th), &xs);
        vec![
            m.rates[0] - TARGET_RATES[0],
            m.rates[1] - TARGET_RATES[1],
            m.rates[2] - TARGET_RATES[2],
            m.means[0] - m.means[1] - TARGET_CATE[0],
            m.means[0] - m.means[2] - TARGET_CATE[1],
            m.shares[1] - 1.0 / 3.0,
            m.shares[2] - 1.0 / 3.0,
        ]
    });
    let cal = with_params(&base, &theta);
    let alphas = |ratio: ArmRatio| PerOverlap {
        strong: solve_alpha(&ContextualDgpConfig { gamma: GAMMA.strong, ..cal.clone() }, ratio, &xs),
        moderate: solve_alpha(&ContextualDgpConfig { gamma: GAMMA.moderate, ..cal.clone() }, ratio, &xs),
        weak: solve_alpha(&ContextualDgpConfig { gamma: GAMMA.weak, ..cal.clone() }, ratio, &xs),
    };
    let alpha_balanced = alphas(ArmRatio::Balanced);
    let alpha_balanced_strong = alpha_balanced.strong;
    let alpha_registry = alphas(ArmRatio::Registry);

    // Population values on a fresh, larger sample.
    let big = sample(N_TRUTH, 1);
    let m = moments(&ContextualDgpConfig { alpha: alpha_balanced.strong, ..cal.clone() }, &big);
    let out = ContextualDefaults {
        assignment: cal.assignment.clone(),
        outcome: cal.outcome.clone(),
        tau: cal.tau,
        gamma: GAMMA,
        alpha_balanced,
        alpha_registry,
        cate: [m.means[0] - m.means[1], m.means[0] - m.means[2], m.means[1] - m.means[2]],
        event_rates: m.rates,
    };
    for o in [Overlap::Strong, Overlap::Moderate, Overlap::Weak] {
        let c = ContextualDgpConfig { gamma: GAMMA.get(o), alpha: out.alpha(ArmRatio::Registry, o), ..cal.clone() };
        let min_mass = big[..20_000].iter().map(|x| c.gps_row(x).into_iter().fold(1.0, f64::min)).sum::<f64>() / 20_000.0;
        eprintln!("{o:?}: mean minimum GPS {min_mass:.4}, rates {:?}", moments(&c, &big[..200_000]).rates);
    }
    let strong = ContextualDgpConfig { alpha: alpha_balanced_strong, ..cal.clone() };
    let min_mass = big[..20_000].iter().map(|x| strong.gps_row(x).into_iter().fold(1.0, f64::min)).sum::<f64>() / 20_000.0;
    eprintln!("1:1:1 strong: mean minimum GPS {min_mass:.4}");
    for umc in [UmcLevel::I, UmcLevel::II, UmcLevel::III] {
        let [naive, marginal, cbar] = limits(&ContextualDgpConfig { umc, ..strong.clone() }, &big[..5_000]);
        eprintln!("{umc:?} limiting bias: naive {naive:.3?}, marginal c0 {marginal:.3?}, c-bar {cbar:.3?}");
    }
    eprintln!("cate {:?} rates {:?}", out.cate, out.event_rates);
    println!("{}", serde_json::to_string_pretty(&out).unwrap());
}

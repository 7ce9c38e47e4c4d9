//! Self-check suites: closed-form persistence against the exact oracle,
//! metric axioms, transport against brute force, and gradients against
//! finite differences.

use nalgebra::DMatrix;
use rand::Rng;
use serde::Serialize;

use crate::assignment;
use crate::descent::{check_gradients, GradCheckOptions};
use crate::error::Result;
use crate::geometry::{PointCloud, RngStream};
use crate::kernels::{k_omega, mmd, MmdMode, RbfParams};
use crate::losses::PenaltyParams;
use crate::objective::{LossConfig, MainLoss, RegConfig, RegKind};
use crate::ppm::{ph_small, subsample_size, OmegaPoint, PersistenceMeasure};
use crate::transport::{omega_distance, wasserstein2_diagrams, wasserstein2_ppm};
use crate::vr::{vr_persistence, PersistenceDiagram, DEFAULT_MAX_POINTS};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub name: String,
    pub cases: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub details: Vec<String>,
}

impl SuiteReport {
    fn new(name: &str, tolerance: f64) -> Self {
        Self {
            name: name.to_string(),
            cases: 0,
            max_error: 0.0,
            tolerance,
            passed: true,
            details: Vec::new(),
        }
    }

    fn record(&mut self, err: f64) {
        self.cases += 1;
        if err.is_nan() || err > self.tolerance {
            self.passed = false;
        }
        self.max_error = self
            .max_error
            .max(if err.is_nan() { f64::INFINITY } else { err });
    }

    fn fail(&mut self, msg: String) {
        self.passed = false;
        self.details.push(msg);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub suites: Vec<SuiteReport>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(|s| s.passed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Random clouds per dimension for the closed-form check.
    pub oracle_cases: usize,
    pub transport_instances: usize,
    /// Test hook forwarded to the gradient checker.
    pub corrupt_gradients: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            oracle_cases: 1000,
            transport_instances: 200,
            corrupt_gradients: false,
        }
    }
}

pub fn run_all(opts: &VerifyOptions) -> Result<VerifyReport> {
    Ok(VerifyReport {
        suites: vec![
            oracle_suite(opts.oracle_cases, opts.seed)?,
            metric_suite(opts.seed)?,
            transport_suite(opts.transport_instances, opts.seed)?,
            gradient_suite(opts.seed, opts.corrupt_gradients)?,
        ],
    })
}

fn uniform_cloud(rng: &mut RngStream, n: usize) -> Result<PointCloud> {
    PointCloud::from_flat(2, (0..2 * n).map(|_| rng.random::<f64>()).collect())
}

/// Largest disagreement between the closed form and the exact diagram of
/// a `2q + 2`-point cloud; infinite when their feature counts differ.
pub fn closed_form_vs_oracle(cloud: &PointCloud, q: usize) -> Result<f64> {
    let points: Vec<&[f64]> = cloud.points().collect();
    let small = ph_small(&points, q)?;
    let diagrams = vr_persistence(cloud, q)?;
    let oracle = &diagrams[q];
    Ok(match (small.point.as_pair(), oracle.points.as_slice()) {
        (None, []) => 0.0,
        (Some((b, l)), [p]) => (b - p.birth).abs().max((l - p.lifetime).abs()),
        _ => f64::INFINITY,
    })
}

pub fn oracle_suite(cases: usize, seed: u64) -> Result<SuiteReport> {
    let mut report = SuiteReport::new("closed form vs Vietoris-Rips oracle", 1e-9);
    let root = RngStream::new(seed);
    for q in 0..2 {
        let mut rng = root.derive(10 + q as u64);
        let before = report.cases;
        for case in 0..cases {
            let cloud = uniform_cloud(&mut rng, subsample_size(q))?;
            let err = closed_form_vs_oracle(&cloud, q)?;
            if err > report.tolerance {
                report
                    .details
                    .push(format!("q={q} case {case}: error {err}"));
            }
            report.record(err);
        }
        report
            .details
            .push(format!("q={q}: {} cases", report.cases - before));
    }
    Ok(report)
}

fn random_measure(rng: &mut RngStream, len: usize) -> PersistenceMeasure {
    let entries = (0..len)
        .map(|_| {
            if rng.random::<f64>() < 0.25 {
                OmegaPoint::Trivial
            } else {
                OmegaPoint::feature(rng.random::<f64>(), rng.random::<f64>() * 0.9 + 0.05)
            }
        })
        .collect();
    PersistenceMeasure::from_entries(1, entries)
}

fn random_point(rng: &mut RngStream) -> OmegaPoint {
    if rng.random::<f64>() < 0.1 {
        OmegaPoint::Trivial
    } else {
        OmegaPoint::feature(rng.random::<f64>() * 2.0, rng.random::<f64>() * 2.0 + 1e-3)
    }
}

/// Smallest eigenvalue of the `k_Ω` Gram matrix of `points`.
pub fn gram_min_eigenvalue(points: &[OmegaPoint], params: &RbfParams) -> f64 {
    let n = points.len();
    let gram = DMatrix::from_fn(n, n, |i, j| k_omega(&points[i], &points[j], params));
    gram.symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

pub fn metric_suite(seed: u64) -> Result<SuiteReport> {
    let mut report = SuiteReport::new("metric axioms and positive semidefiniteness", 1e-9);
    let mut rng = RngStream::new(seed).derive(20);
    for sigma in [0.1, 1.0] {
        let params = RbfParams::new(sigma)?;
        for _ in 0..100 {
            let len = rng.random_range(1..8);
            let a = random_measure(&mut rng, len);
            let len = rng.random_range(1..8);
            let b = random_measure(&mut rng, len);
            let len = rng.random_range(1..8);
            let c = random_measure(&mut rng, len);
            let (ab, ba) = (mmd(&a, &b, &params)?, mmd(&b, &a, &params)?);
            let (ac, cb) = (mmd(&a, &c, &params)?, mmd(&c, &b, &params)?);
            report.record((ab - ba).abs());
            report.record((ab - ac - cb).max(0.0));
            report.record(mmd(&a, &a.clone(), &params)?);
        }
    }
    for _ in 0..1000 {
        let (x, y, z) = (
            random_point(&mut rng),
            random_point(&mut rng),
            random_point(&mut rng),
        );
        let (xy, yx) = (omega_distance(&x, &y), omega_distance(&y, &x));
        report.record((xy - yx).abs());
        report.record((xy - omega_distance(&x, &z) - omega_distance(&z, &y)).max(0.0));
        report.record(omega_distance(&x, &x));
    }
    for _ in 0..20 {
        let len = rng.random_range(1..=10);
        let points: Vec<OmegaPoint> = (0..len).map(|_| random_point(&mut rng)).collect();
        let min_eig = gram_min_eigenvalue(&points, &RbfParams::new(0.1)?);
        report.record((-min_eig).max(0.0));
    }
    Ok(report)
}

fn brute_force_permutation(cost: &[f64], n: usize) -> f64 {
    fn go(cost: &[f64], n: usize, row: usize, used: &mut [bool], acc: f64, best: &mut f64) {
        if row == n {
            *best = best.min(acc);
            return;
        }
        for j in 0..n {
            if !used[j] {
                used[j] = true;
                go(cost, n, row + 1, used, acc + cost[row * n + j], best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(cost, n, 0, &mut vec![false; n], 0.0, &mut best);
    best
}

/// Minimum over partial matchings, enumerated directly: each point of `a`
/// goes to an unused point of `b` or to `*`; unmatched points of `b` go to
/// `*`.
pub fn brute_force_diagram_distance(a: &[(f64, f64)], b: &[(f64, f64)]) -> f64 {
    fn go(
        a: &[(f64, f64)],
        b: &[(f64, f64)],
        i: usize,
        used: &mut [bool],
        acc: f64,
        best: &mut f64,
    ) {
        if i == a.len() {
            let rest: f64 = b
                .iter()
                .zip(used.iter())
                .filter(|(_, u)| !**u)
                .map(|(p, _)| p.1 * p.1)
                .sum();
            *best = best.min(acc + rest);
            return;
        }
        go(a, b, i + 1, used, acc + a[i].1 * a[i].1, best);
        for j in 0..b.len() {
            if !used[j] {
                used[j] = true;
                let d = omega_distance(
                    &OmegaPoint::feature(a[i].0, a[i].1),
                    &OmegaPoint::feature(b[j].0, b[j].1),
                );
                go(a, b, i + 1, used, acc + d * d, best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(a, b, 0, &mut vec![false; b.len()], 0.0, &mut best);
    best.sqrt()
}

pub fn transport_suite(instances: usize, seed: u64) -> Result<SuiteReport> {
    let mut report = SuiteReport::new("optimal transport vs brute force", 1e-10);
    let mut rng = RngStream::new(seed).derive(30);
    for k in 0..instances {
        let s = 1 + k % 7;
        let a = random_measure(&mut rng, s);
        let b = random_measure(&mut rng, s);
        let mut cost = vec![0.0; s * s];
        for i in 0..s {
            for j in 0..s {
                cost[i * s + j] = omega_distance(&a.entries[i], &b.entries[j]).powi(2);
            }
        }
        let brute = (brute_force_permutation(&cost, s) / s as f64).sqrt();
        report.record((wasserstein2_ppm(&a, &b)? - brute).abs());
        let solved = assignment::solve(&cost, s, s)?.cost;
        report.record((solved - brute_force_permutation(&cost, s)).abs());
    }
    for _ in 0..instances {
        let pairs = |rng: &mut RngStream| -> Vec<(f64, f64)> {
            let len = rng.random_range(0..=4);
            (0..len)
                .map(|_| (rng.random::<f64>(), rng.random::<f64>() * 0.8 + 0.01))
                .collect()
        };
        let (pa, pb) = (pairs(&mut rng), pairs(&mut rng));
        let (da, db) = (
            PersistenceDiagram::from_pairs(1, &pa),
            PersistenceDiagram::from_pairs(1, &pb),
        );
        let w = wasserstein2_diagrams(&da, &db)?;
        report.record((w - brute_force_diagram_distance(&pa, &pb)).abs());
        let empty = PersistenceDiagram::empty(1);
        let via_empty = wasserstein2_diagrams(&da, &empty)? + wasserstein2_diagrams(&empty, &db)?;
        report.record((w - via_empty).max(0.0));
    }
    let examples = [
        (
            vec![(0.0, 1.0), (0.4, 0.3)],
            vec![(0.0, 1.0), (0.4, 0.3)],
            0.0,
        ),
        (vec![(0.0, 2.0)], vec![], 2.0),
        (vec![(0.0, 1.0)], vec![(0.3, 1.0)], 0.3),
    ];
    for (a, b, want) in examples {
        let w = wasserstein2_diagrams(
            &PersistenceDiagram::from_pairs(1, &a),
            &PersistenceDiagram::from_pairs(1, &b),
        )?;
        let err = (w - want).abs();
        if err > report.tolerance {
            report.fail(format!(
                "worked example {a:?} vs {b:?}: got {w}, expected {want}"
            ));
        }
        report.record(err);
    }
    Ok(report)
}

fn ppm_reg(s: usize) -> RegConfig {
    RegConfig {
        kind: RegKind::PpmReg,
        lambda: 1.0,
        lambda0: 1.0,
        lambda1: 6000.0,
        sigma: 0.1,
        s,
        mode: MmdMode::Norm,
        replacement: false,
        resample_reference: true,
        max_points: DEFAULT_MAX_POINTS,
    }
}

/// Loss configurations exercised by the gradient suite, with the
/// tolerance each must meet.
pub fn gradient_configs() -> Vec<(&'static str, LossConfig, f64)> {
    let penalty = PenaltyParams {
        lambda_p: 0.5,
        beta: 80.0,
        c_delta: 0.04,
    };
    vec![
        (
            "cramer",
            LossConfig {
                main: MainLoss::Cramer,
                loss_weight: 1.0,
                reg: None,
                penalty: None,
            },
            1e-6,
        ),
        (
            "cramer + ppm-reg + penalty",
            LossConfig {
                main: MainLoss::Cramer,
                loss_weight: 1.6,
                reg: Some(ppm_reg(16)),
                penalty: Some(penalty),
            },
            1e-4,
        ),
        (
            "mmd + ppm-reg + penalty",
            LossConfig {
                main: MainLoss::Mmd { sigma: 0.1 },
                loss_weight: 5.0,
                reg: Some(ppm_reg(16)),
                penalty: Some(penalty),
            },
            1e-4,
        ),
    ]
}

pub fn gradient_suite(seed: u64, corrupt: bool) -> Result<SuiteReport> {
    let mut report = SuiteReport::new("analytic gradients vs finite differences", 1e-4);
    for (name, cfg, tolerance) in gradient_configs() {
        let opts = GradCheckOptions {
            tolerance,
            seed,
            corrupt,
            ..Default::default()
        };
        let r = check_gradients(&cfg, &opts)?;
        for t in &r.terms {
            report.cases += t.cases;
            report.max_error = report.max_error.max(t.max_rel_error);
            report.details.push(format!(
                "{name} / {}: max relative error {:.3e} over {} clouds (tolerance {tolerance:e})",
                t.term, t.max_rel_error, t.cases
            ));
            if !t.passed {
                report.passed = false;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_suites_pass() {
        let report = run_all(&VerifyOptions {
            oracle_cases: 200,
            transport_instances: 40,
            ..Default::default()
        })
        .unwrap();
        for s in &report.suites {
            assert!(s.passed, "{s:?}");
        }
    }

    #[test]
    fn corrupted_gradients_fail() {
        assert!(!gradient_suite(0, true).unwrap().passed);
    }

    #[test]
    fn diagram_brute_force_examples() {
        assert!((brute_force_diagram_distance(&[(0.0, 1.0)], &[(0.3, 1.0)]) - 0.3).abs() < 1e-15);
        assert_eq!(brute_force_diagram_distance(&[(0.0, 2.0)], &[]), 2.0);
    }
}

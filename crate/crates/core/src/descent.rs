//! Heavy-ball gradient descent on point coordinates, trajectory
//! recording, and a finite-difference gradient checker.

use std::io::Write;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, OptimizerConfig};
use crate::error::{Error, Result};
use crate::geometry::{generate_shape, PointCloud, RngStream};
use crate::kernels::PpmDraw;
use crate::objective::{
    composite_value, composite_value_and_grad, EvalContext, LossBreakdown, LossConfig, MainLoss,
};
use crate::ppm::{subsample_tie_margin, SubsampleSet};
use crate::transport::wasserstein2_diagrams;
use crate::vr::{vr_persistence_capped, PersistenceDiagram, DEFAULT_MAX_POINTS};

/// Runs `f` on a pool of `workers` threads (0 means all available).
pub fn with_workers<T, F>(workers: usize, f: F) -> Result<T>
where
    T: Send,
    F: FnOnce() -> T + Send,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::config(format!("cannot build a pool of {workers} workers: {e}")))?;
    Ok(pool.install(f))
}

/// Velocity buffer and step parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub velocity: Vec<f64>,
    pub step_size: f64,
    pub momentum: f64,
    pub nesterov: bool,
}

impl OptimizerState {
    pub fn new(cloud: &PointCloud, opt: &OptimizerConfig) -> Result<Self> {
        opt.validate()?;
        Ok(Self {
            velocity: vec![0.0; cloud.coords().len()],
            step_size: opt.step_size,
            momentum: opt.momentum,
            nesterov: opt.nesterov,
        })
    }

    /// Point at which the gradient is taken: `x` itself, or `x + μv` with
    /// Nesterov momentum.
    pub fn lookahead(&self, cloud: &PointCloud) -> Result<PointCloud> {
        if self.nesterov {
            let shift: Vec<f64> = self.velocity.iter().map(|v| self.momentum * v).collect();
            cloud.displaced(&shift)
        } else {
            Ok(cloud.clone())
        }
    }

    /// `v ← μv - η g`, then `x ← x + v`.
    pub fn apply(&mut self, cloud: &PointCloud, grad: &[f64]) -> Result<PointCloud> {
        if grad.len() != self.velocity.len() || cloud.coords().len() != self.velocity.len() {
            return Err(Error::contract(
                "gradient, velocity and cloud shapes differ",
            ));
        }
        if let Some(bad) = grad.iter().find(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient entry {bad}")));
        }
        for (v, g) in self.velocity.iter_mut().zip(grad) {
            *v = self.momentum * *v - self.step_size * g;
        }
        cloud.displaced(&self.velocity)
    }
}

/// Source of per-step subsamples, with optional caching of everything
/// that depends only on the fixed reference cloud.
#[derive(Debug, Clone)]
pub struct StepSampler {
    rng: RngStream,
    cached_reference: Option<[SubsampleSet; 2]>,
    reference_diagrams: Option<Vec<PersistenceDiagram>>,
}

impl StepSampler {
    pub fn new(rng: RngStream) -> Self {
        Self {
            rng,
            cached_reference: None,
            reference_diagrams: None,
        }
    }

    pub fn context(
        &mut self,
        cfg: &LossConfig,
        trained: &PointCloud,
        reference: &PointCloud,
    ) -> Result<EvalContext> {
        let Some(r) = cfg.active_reg() else {
            return Ok(EvalContext::default());
        };
        if !r.kind.uses_subsamples() {
            if self.reference_diagrams.is_none() {
                self.reference_diagrams =
                    Some(vr_persistence_capped(reference, 1, r.max_points)?.diagrams);
            }
            return Ok(EvalContext {
                draw: None,
                reference_diagrams: self.reference_diagrams.clone(),
            });
        }
        let draw = if r.resample_reference {
            PpmDraw::draw(
                trained.len(),
                reference.len(),
                r.s,
                r.replacement,
                &mut self.rng,
            )?
        } else {
            let trained_sets =
                PpmDraw::draw_side(trained.len(), r.s, r.replacement, &mut self.rng)?;
            if self.cached_reference.is_none() {
                self.cached_reference = Some(PpmDraw::draw_side(
                    reference.len(),
                    r.s,
                    r.replacement,
                    &mut self.rng,
                )?);
            }
            PpmDraw {
                trained: trained_sets,
                reference: self.cached_reference.clone().expect("cached above"),
            }
        };
        Ok(EvalContext {
            draw: Some(draw),
            reference_diagrams: None,
        })
    }
}

/// One optimizer step with fresh subsamples. Returns the new cloud and the
/// loss terms at the point where the gradient was taken.
pub fn step(
    cloud: &PointCloud,
    reference: &PointCloud,
    cfg: &LossConfig,
    state: &mut OptimizerState,
    sampler: &mut StepSampler,
) -> Result<(PointCloud, LossBreakdown)> {
    let at = state.lookahead(cloud)?;
    let ctx = sampler.context(cfg, &at, reference)?;
    let (terms, grad) = composite_value_and_grad(&at, reference, cfg, &ctx, true)?;
    let grad = grad.expect("gradient requested");
    let next = state.apply(cloud, grad.as_slice())?;
    Ok((next, terms))
}

/// One recorded step of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub step: usize,
    pub value: f64,
    pub main: f64,
    pub reg0: f64,
    pub reg1: f64,
    pub reg: f64,
    pub penalty: f64,
    pub centroid_gap: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pd_distance: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_seconds: Option<f64>,
}

impl TrajectoryRecord {
    fn new(step: usize, t: &LossBreakdown) -> Self {
        Self {
            step,
            value: t.total,
            main: t.main,
            reg0: t.reg0,
            reg1: t.reg1,
            reg: t.reg,
            penalty: t.penalty,
            centroid_gap: t.centroid_gap,
            pd_distance: None,
            wall_seconds: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub records: Vec<TrajectoryRecord>,
}

impl Trajectory {
    pub fn last(&self) -> Option<&TrajectoryRecord> {
        self.records.last()
    }

    pub fn write_ndjson<W: Write>(&self, mut out: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")
                .map_err(|e| Error::io("trajectory", e))?;
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "step",
            "value",
            "main",
            "reg0",
            "reg1",
            "reg",
            "penalty",
            "centroid_gap",
            "pd_distance",
            "wall_seconds",
        ])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.records {
            w.write_record([
                r.step.to_string(),
                r.value.to_string(),
                r.main.to_string(),
                r.reg0.to_string(),
                r.reg1.to_string(),
                r.reg.to_string(),
                r.penalty.to_string(),
                r.centroid_gap.to_string(),
                opt(r.pd_distance),
                opt(r.wall_seconds),
            ])?;
        }
        w.flush().map_err(|e| Error::io("trajectory", e))?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub trajectory: Trajectory,
    pub initial: PointCloud,
    pub final_cloud: PointCloud,
    pub reference: PointCloud,
}

/// Random streams of a run, derived from the seed.
const STREAM_TRAINED: u64 = 1;
const STREAM_REFERENCE: u64 = 2;
const STREAM_STEPS: u64 = 3;

/// Initial and reference clouds of a configuration.
pub fn experiment_clouds(cfg: &ExperimentConfig) -> Result<(PointCloud, PointCloud)> {
    let root = RngStream::new(cfg.seed);
    let trained = generate_shape(&cfg.trained, &mut root.derive(STREAM_TRAINED))?;
    let reference = generate_shape(&cfg.reference, &mut root.derive(STREAM_REFERENCE))?;
    if trained.dim() != reference.dim() {
        return Err(Error::config(format!(
            "trained cloud has dimension {}, reference {}",
            trained.dim(),
            reference.dim()
        )));
    }
    Ok((trained, reference))
}

fn pd_cap(cfg: &ExperimentConfig) -> usize {
    cfg.reg.map(|r| r.max_points).unwrap_or(DEFAULT_MAX_POINTS)
}

/// Dimension-1 diagram distance between a cloud and the reference diagram.
pub fn pd_distance(
    cloud: &PointCloud,
    reference_dim1: &PersistenceDiagram,
    cap: usize,
) -> Result<f64> {
    let d = vr_persistence_capped(cloud, 1, cap)?;
    wasserstein2_diagrams(&d.diagrams[1], reference_dim1)
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    run_experiment_with(cfg, |_, _, _| Ok(()))
}

/// Runs the configured number of steps, calling `on_record` for every
/// record with the cloud it describes and the reference cloud.
pub fn run_experiment_with<F>(cfg: &ExperimentConfig, mut on_record: F) -> Result<RunOutput>
where
    F: FnMut(&TrajectoryRecord, &PointCloud, &PointCloud) -> Result<()>,
{
    cfg.validate()?;
    let (initial, reference) = experiment_clouds(cfg)?;
    let reference_dim1 = if cfg.pd_distance {
        Some(
            vr_persistence_capped(&reference, 1, pd_cap(cfg))?
                .diagrams
                .swap_remove(1),
        )
    } else {
        None
    };
    let mut sampler = StepSampler::new(RngStream::new(cfg.seed).derive(STREAM_STEPS));
    let mut state = OptimizerState::new(&initial, &cfg.optimizer)?;
    let mut cloud = initial.clone();
    let mut trajectory = Trajectory::default();
    let start = Instant::now();

    let mut record = |t: usize,
                      terms: &LossBreakdown,
                      cloud: &PointCloud,
                      traj: &mut Trajectory|
     -> Result<()> {
        let mut rec = TrajectoryRecord::new(t, terms);
        if let Some(d1) = &reference_dim1 {
            rec.pd_distance = Some(pd_distance(cloud, d1, pd_cap(cfg))?);
        }
        if cfg.output.timing {
            rec.wall_seconds = Some(start.elapsed().as_secs_f64());
        }
        on_record(&rec, cloud, &reference)?;
        traj.records.push(rec);
        Ok(())
    };

    for t in 0..cfg.steps {
        let loss = cfg.loss_at(t);
        let recording = t % cfg.record_every == 0;
        let at = state.lookahead(&cloud)?;
        let ctx = sampler.context(&loss, &at, &reference)?;
        let (terms, grad) = composite_value_and_grad(&at, &reference, &loss, &ctx, true)?;
        if recording {
            let terms = if state.nesterov {
                composite_value_and_grad(&cloud, &reference, &loss, &ctx, false)?.0
            } else {
                terms
            };
            record(t, &terms, &cloud, &mut trajectory)?;
        }
        let grad = grad.expect("gradient requested");
        cloud = state.apply(&cloud, grad.as_slice()).map_err(|e| match e {
            Error::NonFinite(msg) => Error::NonFinite(format!("{msg} at step {t}")),
            other => other,
        })?;
    }
    let loss = cfg.loss_at(cfg.steps);
    let ctx = sampler.context(&loss, &cloud, &reference)?;
    let (terms, _) = composite_value_and_grad(&cloud, &reference, &loss, &ctx, false)?;
    record(cfg.steps, &terms, &cloud, &mut trajectory)?;

    Ok(RunOutput {
        trajectory,
        initial,
        final_cloud: cloud,
        reference,
    })
}

/// Settings for [`check_gradients`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckOptions {
    pub sizes: Vec<usize>,
    pub trials: usize,
    /// Subsample count used for the frozen draws.
    pub s: usize,
    pub tolerance: f64,
    pub step: f64,
    pub seed: u64,
    /// Clouds whose within-subsample distances come closer than this are
    /// redrawn, so that no witness changes inside the difference stencil.
    pub min_tie_margin: f64,
    /// Test hook: perturb the analytic gradient before comparing.
    pub corrupt: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            sizes: vec![8],
            trials: 20,
            s: 16,
            tolerance: 1e-4,
            step: 1e-5,
            seed: 0,
            min_tie_margin: 1e-3,
            corrupt: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TermReport {
    pub term: String,
    pub cases: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradReport {
    pub tolerance: f64,
    pub terms: Vec<TermReport>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.terms.iter().all(|t| t.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.terms
            .iter()
            .map(|t| t.max_rel_error)
            .fold(0.0, f64::max)
    }
}

/// Largest coordinate-wise relative error between an analytic gradient
/// and central differences of `f`.
pub fn max_relative_error(
    cloud: &PointCloud,
    analytic: &[f64],
    step: f64,
    f: impl Fn(&PointCloud) -> Result<f64>,
) -> Result<f64> {
    let len = cloud.coords().len();
    let mut numeric = vec![0.0; len];
    let mut delta = vec![0.0; len];
    for k in 0..len {
        delta[k] = step;
        let plus = f(&cloud.displaced(&delta)?)?;
        delta[k] = -step;
        let minus = f(&cloud.displaced(&delta)?)?;
        delta[k] = 0.0;
        numeric[k] = (plus - minus) / (2.0 * step);
    }
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6 * scale).max(1e-12))
        .fold(0.0, f64::max))
}

fn random_cloud(rng: &mut RngStream, n: usize) -> Result<PointCloud> {
    PointCloud::from_flat(2, (0..2 * n).map(|_| rng.random::<f64>()).collect())
}

/// Splits a loss configuration into its enabled terms plus the full
/// composite, each as a standalone configuration.
fn gradient_terms(cfg: &LossConfig) -> Vec<(String, LossConfig)> {
    let empty = LossConfig {
        main: MainLoss::None,
        loss_weight: 1.0,
        reg: None,
        penalty: None,
    };
    let mut terms = Vec::new();
    match cfg.main {
        MainLoss::None => {}
        MainLoss::Cramer => terms.push((
            "cramer".to_string(),
            LossConfig {
                main: cfg.main,
                ..empty
            },
        )),
        MainLoss::Mmd { .. } => terms.push((
            "ambient-mmd".to_string(),
            LossConfig {
                main: cfg.main,
                ..empty
            },
        )),
    }
    if let Some(r) = cfg.active_reg() {
        terms.push((
            r.kind.name().to_string(),
            LossConfig {
                reg: Some(*r),
                ..empty
            },
        ));
    }
    if let Some(p) = cfg.penalty {
        terms.push((
            "centroid-penalty".to_string(),
            LossConfig {
                penalty: Some(p),
                ..empty
            },
        ));
    }
    if terms.len() > 1 {
        terms.push(("composite".to_string(), *cfg));
    }
    terms
}

/// Compares analytic gradients with central differences for every enabled
/// term on random clouds with frozen subsamples.
pub fn check_gradients(cfg: &LossConfig, opts: &GradCheckOptions) -> Result<GradReport> {
    cfg.validate()?;
    let mut rng = RngStream::new(opts.seed);
    let mut reports = Vec::new();
    for (name, mut term) in gradient_terms(cfg) {
        if let Some(r) = term.reg.as_mut() {
            r.s = opts.s;
        }
        let mut worst = 0.0f64;
        let mut cases = 0;
        for &n in &opts.sizes {
            for _ in 0..opts.trials {
                let (a, b, ctx) = loop {
                    let a = random_cloud(&mut rng, n)?;
                    let b = random_cloud(&mut rng, n)?;
                    let ctx = EvalContext::draw(&term, n, n, &mut rng)?;
                    let margin = ctx
                        .draw
                        .as_ref()
                        .map(|d| {
                            subsample_tie_margin(&a, &d.trained[0])
                                .min(subsample_tie_margin(&a, &d.trained[1]))
                        })
                        .unwrap_or(f64::INFINITY);
                    if margin >= opts.min_tie_margin {
                        break (a, b, ctx);
                    }
                };
                let (_, grad) = composite_value_and_grad(&a, &b, &term, &ctx, true)?;
                let mut grad = grad.expect("gradient requested").into_vec();
                if opts.corrupt {
                    for g in grad.iter_mut() {
                        *g = 1.1 * *g + 1e-3;
                    }
                }
                let err = max_relative_error(&a, &grad, opts.step, |c| {
                    composite_value(c, &b, &term, &ctx)
                })?;
                worst = worst.max(err);
                cases += 1;
            }
        }
        reports.push(TermReport {
            term: name,
            cases,
            max_rel_error: worst,
            passed: worst < opts.tolerance,
        });
    }
    Ok(GradReport {
        tolerance: opts.tolerance,
        terms: reports,
    })
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::geometry::ShapeSpec;
    use crate::kernels::MmdMode;
    use crate::losses::PenaltyParams;
    use crate::objective::{RegConfig, RegKind};

    #[test]
    fn momentum_recurrence_closed_form() {
        // f(x) = |x|², gradient 2x: x_{t+1} = x_t + v_{t+1}, v_{t+1} = μ v_t - 2η x_t
        let opt = OptimizerConfig {
            step_size: 0.05,
            momentum: 0.9,
            nesterov: false,
        };
        let mut cloud = PointCloud::new(vec![vec![1.0, -2.0]]).unwrap();
        let mut state = OptimizerState::new(&cloud, &opt).unwrap();
        let (mut x, mut v) = ([1.0f64, -2.0], [0.0f64; 2]);
        for _ in 0..200 {
            let grad: Vec<f64> = cloud.coords().iter().map(|c| 2.0 * c).collect();
            cloud = state.apply(&cloud, &grad).unwrap();
            for k in 0..2 {
                v[k] = 0.9 * v[k] - 0.05 * 2.0 * x[k];
                x[k] += v[k];
            }
            for k in 0..2 {
                assert!((cloud.coords()[k] - x[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_gradient_and_plain_descent() {
        let cloud = PointCloud::new(vec![vec![0.3, 0.4], vec![1.0, 1.0]]).unwrap();
        let opt = OptimizerConfig {
            step_size: 0.1,
            momentum: 0.0,
            nesterov: false,
        };
        let mut state = OptimizerState::new(&cloud, &opt).unwrap();
        assert_eq!(state.apply(&cloud, &[0.0; 4]).unwrap(), cloud);
        let next = state.apply(&cloud, &[1.0, 2.0, 0.0, -1.0]).unwrap();
        assert_eq!(next.coords(), &[0.3 - 0.1, 0.4 - 0.2, 1.0, 1.0 + 0.1]);
        assert!(state.apply(&cloud, &[f64::NAN, 0.0, 0.0, 0.0]).is_err());
    }

    fn small_config(steps: usize) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::preset("circle-cramer-ppm")
            .unwrap()
            .scaled(24, 32, steps);
        cfg.record_every = 5;
        cfg
    }

    #[test]
    fn zero_steps_gives_initial_record() {
        let out = run_experiment(&small_config(0)).unwrap();
        assert_eq!(out.trajectory.records.len(), 1);
        assert_eq!(out.trajectory.records[0].step, 0);
        assert_eq!(out.final_cloud, out.initial);
    }

    #[test]
    fn run_is_deterministic_across_workers() {
        let cfg = small_config(12);
        let a = with_workers(1, || run_experiment(&cfg)).unwrap().unwrap();
        let b = with_workers(4, || run_experiment(&cfg)).unwrap().unwrap();
        assert_eq!(a.trajectory, b.trajectory);
        assert_eq!(a.final_cloud, b.final_cloud);
        let steps: Vec<usize> = a.trajectory.records.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![0, 5, 10, 12]);
    }

    #[test]
    fn cached_reference_and_nesterov_run() {
        let mut cfg = small_config(6);
        cfg.reg.as_mut().unwrap().resample_reference = false;
        cfg.optimizer.nesterov = true;
        let out = run_experiment(&cfg).unwrap();
        assert!(out.trajectory.records.iter().all(|r| r.value.is_finite()));
    }

    #[test]
    fn gradient_checker_detects_corruption() {
        let cfg = LossConfig {
            main: MainLoss::Cramer,
            loss_weight: 1.6,
            reg: Some(RegConfig {
                kind: RegKind::PpmReg,
                lambda: 1.0,
                lambda0: 1.0,
                lambda1: 6000.0,
                sigma: 0.1,
                s: 16,
                mode: MmdMode::Norm,
                replacement: false,
                resample_reference: true,
                max_points: DEFAULT_MAX_POINTS,
            }),
            penalty: Some(PenaltyParams {
                lambda_p: 0.5,
                beta: 80.0,
                c_delta: 0.04,
            }),
        };
        let opts = GradCheckOptions {
            trials: 3,
            ..Default::default()
        };
        let report = check_gradients(&cfg, &opts).unwrap();
        assert_eq!(report.terms.len(), 4);
        assert!(report.passed(), "{report:?}");
        let bad = check_gradients(
            &cfg,
            &GradCheckOptions {
                corrupt: true,
                ..opts
            },
        )
        .unwrap();
        assert!(!bad.passed());
    }

    #[test]
    fn trajectory_writers() {
        let out = run_experiment(&small_config(5)).unwrap();
        let mut nd = Vec::new();
        out.trajectory.write_ndjson(&mut nd).unwrap();
        let text = String::from_utf8(nd).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.contains("\"pd_distance\""));
        let mut csv = Vec::new();
        out.trajectory.write_csv(&mut csv).unwrap();
        assert!(String::from_utf8(csv).unwrap().starts_with("step,value"));
    }

    #[test]
    fn mismatched_dimensions_rejected() {
        let mut cfg = small_config(1);
        cfg.reference = ShapeSpec::GaussianBlob {
            count: 24,
            stddev: 1.0,
            center: vec![0.0, 0.0, 0.0],
        };
        assert!(run_experiment(&cfg).is_err());
    }
}

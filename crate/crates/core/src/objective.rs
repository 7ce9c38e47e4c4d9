//! The composite value `V = w·L + λT + f_p` and its gradient with respect
//! to the trained cloud.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, RngStream};
use crate::kernels::{ppm_pair, ppm_reg_from_measures, MmdMode, PpmDraw, RbfParams, RegWeights};
use crate::losses::{
    ambient_mmd_with_grad, centroid_gap, centroid_penalty_with_grad, cramer_distance_with_grad,
    LossWithGrad, PenaltyParams,
};
use crate::ppm::{ppm_backward, GradAccumulator};
use crate::transport::{
    diagram_backward, wasserstein2_diagrams_with_grad, wasserstein2_ppm_with_grad,
};
use crate::vr::{vr_persistence_capped, PersistenceDiagram, DEFAULT_MAX_POINTS};

/// Main loss on ambient coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MainLoss {
    None,
    Cramer,
    Mmd { sigma: f64 },
}

/// Topological regularizer: MMD between PPMs (the default), 2-Wasserstein
/// between PPMs, or 2-Wasserstein between full VR diagrams.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegKind {
    #[default]
    PpmReg,
    WPpmReg,
    PdReg,
}

impl RegKind {
    pub fn name(self) -> &'static str {
        match self {
            RegKind::PpmReg => "ppm-reg",
            RegKind::WPpmReg => "w-ppm-reg",
            RegKind::PdReg => "pd-reg",
        }
    }

    pub fn uses_subsamples(self) -> bool {
        !matches!(self, RegKind::PdReg)
    }
}

fn default_true() -> bool {
    true
}

fn default_max_points() -> usize {
    DEFAULT_MAX_POINTS
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegConfig {
    #[serde(default)]
    pub kind: RegKind,
    pub lambda: f64,
    pub lambda0: f64,
    pub lambda1: f64,
    pub sigma: f64,
    pub s: usize,
    #[serde(default)]
    pub mode: MmdMode,
    /// Draw subsample indices with replacement.
    #[serde(default)]
    pub replacement: bool,
    /// Re-draw the reference subsamples every step; otherwise draw once.
    #[serde(default = "default_true")]
    pub resample_reference: bool,
    /// Point cap for full VR persistence (PD-Reg).
    #[serde(default = "default_max_points")]
    pub max_points: usize,
}

impl RegConfig {
    pub fn weights(&self) -> RegWeights {
        RegWeights {
            lambda: self.lambda,
            lambda0: self.lambda0,
            lambda1: self.lambda1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights().validate()?;
        RbfParams::new(self.sigma)?;
        if self.s == 0 {
            return Err(Error::config("subsample count s must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub main: MainLoss,
    /// Multiplier on the main loss.
    #[serde(default = "one")]
    pub loss_weight: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reg: Option<RegConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub penalty: Option<PenaltyParams>,
}

fn one() -> f64 {
    1.0
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.loss_weight >= 0.0 && self.loss_weight.is_finite()) {
            return Err(Error::config(format!(
                "loss_weight must be non-negative, got {}",
                self.loss_weight
            )));
        }
        if let MainLoss::Mmd { sigma } = self.main {
            RbfParams::new(sigma)?;
        }
        if let Some(r) = &self.reg {
            r.validate()?;
        }
        if let Some(p) = &self.penalty {
            p.validate()?;
        }
        Ok(())
    }

    /// Regularizer that contributes to the value, if any.
    pub fn active_reg(&self) -> Option<&RegConfig> {
        self.reg
            .as_ref()
            .filter(|r| r.lambda > 0.0 && (r.lambda0 > 0.0 || r.lambda1 > 0.0))
    }
}

/// Frozen randomness and cached reference data for one evaluation.
#[derive(Debug, Clone, Default)]
pub struct EvalContext {
    pub draw: Option<PpmDraw>,
    /// Dimension-0 and dimension-1 diagrams of the reference cloud.
    pub reference_diagrams: Option<Vec<PersistenceDiagram>>,
}

impl EvalContext {
    /// Draws the subsamples the configured regularizer needs.
    pub fn draw(
        cfg: &LossConfig,
        trained_len: usize,
        reference_len: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let draw = match cfg.active_reg() {
            Some(r) if r.kind.uses_subsamples() => Some(PpmDraw::draw(
                trained_len,
                reference_len,
                r.s,
                r.replacement,
                rng,
            )?),
            _ => None,
        };
        Ok(Self {
            draw,
            reference_diagrams: None,
        })
    }
}

/// Per-term values of one evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub main: f64,
    pub reg0: f64,
    pub reg1: f64,
    pub reg: f64,
    pub penalty: f64,
    pub centroid_gap: f64,
}

fn add_term(total: &mut Option<GradAccumulator>, part: Option<GradAccumulator>, weight: f64) {
    if let (Some(t), Some(p)) = (total.as_mut(), part) {
        t.add_scaled(&p, weight);
    }
}

/// Evaluates `V` and, when requested, its gradient with respect to
/// `trained`.
pub fn composite_value_and_grad(
    trained: &PointCloud,
    reference: &PointCloud,
    cfg: &LossConfig,
    ctx: &EvalContext,
    with_grad: bool,
) -> Result<(LossBreakdown, Option<GradAccumulator>)> {
    cfg.validate()?;
    let mut out = LossBreakdown::default();
    let mut grad = with_grad.then(|| GradAccumulator::for_cloud(trained));

    let main = match cfg.main {
        MainLoss::None => None,
        MainLoss::Cramer => Some(cramer_distance_with_grad(trained, reference, with_grad)?),
        MainLoss::Mmd { sigma } => {
            Some(ambient_mmd_with_grad(trained, reference, sigma, with_grad)?)
        }
    };
    if let Some(LossWithGrad { value, grad: g }) = main {
        out.main = value;
        out.total += cfg.loss_weight * value;
        add_term(&mut grad, g, cfg.loss_weight);
    }

    if let Some(r) = cfg.active_reg() {
        let (t0, t1, g) = regularizer(trained, reference, r, ctx, with_grad)?;
        out.reg0 = t0;
        out.reg1 = t1;
        out.reg = r.lambda0 * t0 + r.lambda1 * t1;
        out.total += r.lambda * out.reg;
        add_term(&mut grad, g, r.lambda);
    }

    out.centroid_gap = centroid_gap(trained, reference)?;
    if let Some(p) = &cfg.penalty {
        let LossWithGrad { value, grad: g } =
            centroid_penalty_with_grad(trained, reference, p, with_grad)?;
        out.penalty = value;
        out.total += value;
        add_term(&mut grad, g, 1.0);
    }

    if let Some(g) = &grad {
        if !g.all_finite() {
            return Err(Error::NonFinite("gradient of the composite value".into()));
        }
    }
    if !out.total.is_finite() {
        return Err(Error::NonFinite(format!("composite value {}", out.total)));
    }
    Ok((out, grad))
}

pub fn composite_value(
    trained: &PointCloud,
    reference: &PointCloud,
    cfg: &LossConfig,
    ctx: &EvalContext,
) -> Result<f64> {
    Ok(
        composite_value_and_grad(trained, reference, cfg, ctx, false)?
            .0
            .total,
    )
}

/// `T₀`, `T₁` and the gradient of `λ₀T₀ + λ₁T₁` (without `λ`).
fn regularizer(
    trained: &PointCloud,
    reference: &PointCloud,
    r: &RegConfig,
    ctx: &EvalContext,
    with_grad: bool,
) -> Result<(f64, f64, Option<GradAccumulator>)> {
    let mut grad = with_grad.then(|| GradAccumulator::for_cloud(trained));
    let need_draw = || {
        ctx.draw
            .as_ref()
            .ok_or_else(|| Error::contract("the regularizer needs frozen subsamples"))
    };
    match r.kind {
        RegKind::PpmReg => {
            let draw = need_draw()?;
            let pa = ppm_pair(trained, &draw.trained)?;
            let pb = ppm_pair(reference, &draw.reference)?;
            let params = RbfParams::new(r.sigma)?;
            let terms = ppm_reg_from_measures(
                trained,
                &pa,
                reference,
                &pb,
                &r.weights(),
                &params,
                r.mode,
                grad.as_mut(),
                None,
            )?;
            Ok((terms.t0, terms.t1, grad))
        }
        RegKind::WPpmReg => {
            let draw = need_draw()?;
            let pa = ppm_pair(trained, &draw.trained)?;
            let pb = ppm_pair(reference, &draw.reference)?;
            let mut t = [0.0; 2];
            for q in 0..2 {
                let w = r.weights().of_dim(q);
                if w == 0.0 {
                    continue;
                }
                let (value, g) = wasserstein2_ppm_with_grad(&pa[q], &pb[q])?;
                t[q] = value;
                if let Some(acc) = grad.as_mut() {
                    let up: Vec<_> = g.iter().map(|e| scale_entry(e, w)).collect();
                    ppm_backward(trained, &pa[q], &up, acc)?;
                }
            }
            Ok((t[0], t[1], grad))
        }
        RegKind::PdReg => {
            let max_dim = if r.lambda1 > 0.0 { 1 } else { 0 };
            let da = vr_persistence_capped(trained, max_dim, r.max_points)?.diagrams;
            let own;
            let db = match &ctx.reference_diagrams {
                Some(d) if d.len() > max_dim => d,
                _ => {
                    own = vr_persistence_capped(reference, max_dim, r.max_points)?.diagrams;
                    &own
                }
            };
            let mut t = [0.0; 2];
            for q in 0..=max_dim {
                let w = r.weights().of_dim(q);
                if w == 0.0 {
                    continue;
                }
                let (value, g) = wasserstein2_diagrams_with_grad(&da[q], &db[q])?;
                t[q] = value;
                if let Some(acc) = grad.as_mut() {
                    let up: Vec<_> = g.iter().map(|e| scale_entry(e, w)).collect();
                    diagram_backward(trained, &da[q], &up, acc)?;
                }
            }
            Ok((t[0], t[1], grad))
        }
    }
}

fn scale_entry(e: &crate::ppm::EntryGrad, w: f64) -> crate::ppm::EntryGrad {
    crate::ppm::EntryGrad {
        birth: w * e.birth,
        lifetime: w * e.lifetime,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::cramer_distance;
    use rand::Rng;

    fn random_cloud(rng: &mut RngStream, n: usize) -> PointCloud {
        PointCloud::new(
            (0..n)
                .map(|_| vec![rng.random::<f64>(), rng.random::<f64>()])
                .collect(),
        )
        .unwrap()
    }

    fn reg(kind: RegKind) -> RegConfig {
        RegConfig {
            kind,
            lambda: 1.0,
            lambda0: 1.0,
            lambda1: 3.0,
            sigma: 0.1,
            s: 16,
            mode: MmdMode::Norm,
            replacement: false,
            resample_reference: true,
            max_points: DEFAULT_MAX_POINTS,
        }
    }

    #[test]
    fn zero_weights_give_zero() {
        let mut rng = RngStream::new(1);
        let a = random_cloud(&mut rng, 8);
        let b = random_cloud(&mut rng, 8);
        let cfg = LossConfig {
            main: MainLoss::Cramer,
            loss_weight: 0.0,
            reg: Some(RegConfig {
                lambda: 0.0,
                ..reg(RegKind::PpmReg)
            }),
            penalty: Some(PenaltyParams {
                lambda_p: 0.0,
                beta: 80.0,
                c_delta: 0.1,
            }),
        };
        let ctx = EvalContext::draw(&cfg, 8, 8, &mut rng).unwrap();
        let (v, g) = composite_value_and_grad(&a, &b, &cfg, &ctx, true).unwrap();
        assert_eq!(v.total, 0.0);
        assert_eq!(g.unwrap().max_abs(), 0.0);
    }

    #[test]
    fn reg_off_is_main_loss() {
        let mut rng = RngStream::new(2);
        let a = random_cloud(&mut rng, 8);
        let b = random_cloud(&mut rng, 8);
        let cfg = LossConfig {
            main: MainLoss::Cramer,
            loss_weight: 1.0,
            reg: None,
            penalty: None,
        };
        let v = composite_value(&a, &b, &cfg, &EvalContext::default()).unwrap();
        assert_eq!(v, cramer_distance(&a, &b).unwrap());
    }

    #[test]
    fn missing_draw_is_an_error() {
        let mut rng = RngStream::new(3);
        let a = random_cloud(&mut rng, 8);
        let cfg = LossConfig {
            main: MainLoss::None,
            loss_weight: 1.0,
            reg: Some(reg(RegKind::PpmReg)),
            penalty: None,
        };
        assert!(composite_value(&a, &a, &cfg, &EvalContext::default()).is_err());
    }

    #[test]
    fn wasserstein_regularizers_evaluate() {
        let mut rng = RngStream::new(4);
        let a = random_cloud(&mut rng, 12);
        let b = random_cloud(&mut rng, 12);
        for kind in [RegKind::WPpmReg, RegKind::PdReg] {
            let cfg = LossConfig {
                main: MainLoss::None,
                loss_weight: 1.0,
                reg: Some(reg(kind)),
                penalty: None,
            };
            let ctx = EvalContext::draw(&cfg, 12, 12, &mut rng).unwrap();
            let (v, g) = composite_value_and_grad(&a, &b, &cfg, &ctx, true).unwrap();
            assert!(v.total > 0.0);
            assert!(g.unwrap().max_abs() > 0.0);
            let (same, _) = composite_value_and_grad(
                &b,
                &b,
                &cfg,
                &EvalContext {
                    draw: ctx.draw.clone().map(|d| PpmDraw {
                        trained: d.reference.clone(),
                        ..d
                    }),
                    reference_diagrams: None,
                },
                false,
            )
            .unwrap();
            assert!(same.total.abs() < 1e-12);
        }
    }
}

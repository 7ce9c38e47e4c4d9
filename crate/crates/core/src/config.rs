//! Experiment configuration files (TOML) and the built-in presets.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::ShapeSpec;
use crate::kernels::MmdMode;
use crate::losses::PenaltyParams;
use crate::objective::{LossConfig, MainLoss, RegConfig, RegKind};
use crate::vr::DEFAULT_MAX_POINTS;

fn default_record_every() -> usize {
    100
}

fn default_true() -> bool {
    true
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub step_size: f64,
    pub momentum: f64,
    #[serde(default)]
    pub nesterov: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            step_size: 0.05,
            momentum: 0.9,
            nesterov: false,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::config(format!(
                "step_size must be positive, got {}",
                self.step_size
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}

/// Cosine annealing of `λ₁` from `lambda1_max` at step 0 down to
/// `lambda1_min` at `t_end`, constant afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CosineSchedule {
    pub lambda1_min: f64,
    pub lambda1_max: f64,
    pub t_end: usize,
}

impl CosineSchedule {
    pub fn at(&self, t: usize) -> f64 {
        if t >= self.t_end {
            return self.lambda1_min;
        }
        let phase = t as f64 * std::f64::consts::PI / self.t_end as f64;
        self.lambda1_min + 0.5 * (self.lambda1_max - self.lambda1_min) * (1.0 + phase.cos())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1_min >= 0.0
            && self.lambda1_max >= self.lambda1_min
            && self.lambda1_max.is_finite())
        {
            return Err(Error::config(
                "schedule needs 0 <= lambda1_min <= lambda1_max",
            ));
        }
        if self.t_end == 0 {
            return Err(Error::config("schedule t_end must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryFormat {
    #[default]
    Ndjson,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default)]
    pub format: TrajectoryFormat,
    /// Write one SVG frame per record.
    #[serde(default = "default_true")]
    pub frames: bool,
    /// Add wall-clock seconds to each record (makes files run-dependent).
    #[serde(default)]
    pub timing: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            format: TrajectoryFormat::Ndjson,
            frames: true,
            timing: false,
        }
    }
}

/// One shape-matching run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default)]
    pub seed: u64,
    pub steps: usize,
    #[serde(default = "default_record_every")]
    pub record_every: usize,
    /// Evaluate the dimension-1 diagram distance at each record.
    #[serde(default = "default_true")]
    pub pd_distance: bool,
    /// Worker threads; 0 uses all available.
    #[serde(default)]
    pub workers: usize,
    /// Multiplier on the main loss.
    #[serde(default = "one")]
    pub loss_weight: f64,
    pub trained: ShapeSpec,
    pub reference: ShapeSpec,
    pub main: MainLoss,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reg: Option<RegConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub penalty: Option<PenaltyParams>,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<CosineSchedule>,
    #[serde(default)]
    pub output: OutputConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Canonical TOML text; parsing it gives back an equal config.
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.record_every == 0 {
            return Err(Error::config("record_every must be at least 1"));
        }
        self.trained.validate()?;
        self.reference.validate()?;
        self.loss().validate()?;
        self.optimizer.validate()?;
        if let Some(s) = &self.schedule {
            s.validate()?;
            if self.reg.is_none() {
                return Err(Error::config("a lambda1 schedule needs a [reg] section"));
            }
        }
        Ok(())
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            main: self.main,
            loss_weight: self.loss_weight,
            reg: self.reg,
            penalty: self.penalty,
        }
    }

    /// Loss configuration at step `t`, with the `λ₁` schedule applied.
    pub fn loss_at(&self, t: usize) -> LossConfig {
        let mut loss = self.loss();
        if let (Some(s), Some(r)) = (&self.schedule, loss.reg.as_mut()) {
            r.lambda1 = s.at(t);
        }
        loss
    }

    /// Shrinks a preset to `count` points per cloud and `s` subsamples.
    pub fn scaled(mut self, count: usize, s: usize, steps: usize) -> Self {
        for spec in [&mut self.trained, &mut self.reference] {
            match spec {
                ShapeSpec::Circle { count: c, .. }
                | ShapeSpec::TwoCircles { count: c, .. }
                | ShapeSpec::GaussianBlob { count: c, .. } => *c = count,
                ShapeSpec::FromFile { .. } => {}
            }
        }
        if let Some(r) = self.reg.as_mut() {
            r.s = s;
        }
        self.steps = steps;
        self
    }

    pub fn preset(name: &str) -> Result<Self> {
        preset(name)
    }
}

const SHAPE_POINTS: usize = 512;

fn reg_defaults(lambda0: f64) -> RegConfig {
    RegConfig {
        kind: RegKind::PpmReg,
        lambda: 1.0,
        lambda0,
        lambda1: 6000.0,
        sigma: 0.1,
        s: 2000,
        mode: MmdMode::Squared,
        replacement: false,
        resample_reference: true,
        max_points: DEFAULT_MAX_POINTS,
    }
}

fn reference_shape(shape: &str) -> Option<ShapeSpec> {
    match shape {
        "circle" => Some(ShapeSpec::Circle {
            count: SHAPE_POINTS,
            radius: 1.0,
            center: vec![0.0, 0.0],
            sampling: Default::default(),
        }),
        "two-circles" => Some(ShapeSpec::TwoCircles {
            count: SHAPE_POINTS,
            radius: 1.0,
            centers: [vec![-0.5, 0.0], vec![0.5, 0.0]],
            sampling: Default::default(),
        }),
        _ => None,
    }
}

/// Penalty strength for the imperfect-convergence presets, tuned so the
/// centroid gap settles near `c_δ = 0.04` with the MMD loss.
pub const IMPERFECT_LAMBDA_P: f64 = 0.7;

pub const IMPERFECT_C_DELTAS: [&str; 3] = ["0", "0.04", "0.12"];

/// Names accepted by [`ExperimentConfig::preset`].
pub fn preset_names() -> Vec<String> {
    let mut names = Vec::new();
    for shape in ["circle", "two-circles"] {
        for loss in ["cramer", "cramer-ppm", "mmd", "mmd-ppm"] {
            names.push(format!("{shape}-{loss}"));
        }
    }
    for shape in ["circle", "two-circles"] {
        for loss in ["mmd", "mmd-ppm"] {
            for c in IMPERFECT_C_DELTAS {
                names.push(format!("imperfect-{shape}-{loss}-c{c}"));
            }
        }
    }
    names
}

fn preset(name: &str) -> Result<ExperimentConfig> {
    let unknown = || {
        Error::config(format!(
            "unknown preset `{name}`; known: {}",
            preset_names().join(", ")
        ))
    };
    let (imperfect, rest) = match name.strip_prefix("imperfect-") {
        Some(rest) => (true, rest),
        None => (false, name),
    };
    let (rest, c_delta) = if imperfect {
        let (head, c) = rest.rsplit_once("-c").ok_or_else(unknown)?;
        if !IMPERFECT_C_DELTAS.contains(&c) {
            return Err(unknown());
        }
        (head, Some(c.parse::<f64>().map_err(|_| unknown())?))
    } else {
        (rest, None)
    };
    let (shape, loss) = ["circle", "two-circles"]
        .iter()
        .find_map(|s| {
            rest.strip_prefix(s)
                .and_then(|l| l.strip_prefix('-'))
                .map(|l| (*s, l))
        })
        .ok_or_else(unknown)?;
    let (main, with_reg) = match loss {
        "cramer" if !imperfect => (MainLoss::Cramer, false),
        "cramer-ppm" if !imperfect => (MainLoss::Cramer, true),
        "mmd" => (MainLoss::Mmd { sigma: 0.1 }, false),
        "mmd-ppm" => (MainLoss::Mmd { sigma: 0.1 }, true),
        _ => return Err(unknown()),
    };
    let loss_weight = match (main, with_reg) {
        (MainLoss::Cramer, true) => 1.6,
        (MainLoss::Mmd { .. }, true) => 5.0,
        _ => 1.0,
    };
    let cfg = ExperimentConfig {
        name: Some(name.to_string()),
        seed: 0,
        steps: 16000,
        record_every: 100,
        pd_distance: true,
        workers: 0,
        loss_weight,
        trained: ShapeSpec::GaussianBlob {
            count: SHAPE_POINTS,
            stddev: 0.3,
            center: vec![0.0, 0.0],
        },
        reference: reference_shape(shape).ok_or_else(unknown)?,
        main,
        reg: with_reg.then(|| reg_defaults(if imperfect { 0.3 } else { 1.0 })),
        penalty: c_delta.map(|c_delta| PenaltyParams {
            lambda_p: IMPERFECT_LAMBDA_P,
            beta: 80.0,
            c_delta,
        }),
        optimizer: OptimizerConfig {
            step_size: if imperfect { 0.01 } else { 0.05 },
            momentum: 0.9,
            nesterov: false,
        },
        schedule: None,
        output: OutputConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_is_valid_and_round_trips() {
        for name in preset_names() {
            let cfg = ExperimentConfig::preset(&name).unwrap();
            let text = cfg.to_toml_string().unwrap();
            assert_eq!(
                ExperimentConfig::from_toml_str(&text).unwrap(),
                cfg,
                "{name}"
            );
        }
        assert_eq!(preset_names().len(), 20);
    }

    #[test]
    fn preset_values() {
        let c = ExperimentConfig::preset("circle-cramer-ppm").unwrap();
        assert_eq!(c.loss_weight, 1.6);
        let r = c.reg.unwrap();
        assert_eq!(
            (r.lambda, r.lambda0, r.lambda1, r.sigma, r.s),
            (1.0, 1.0, 6000.0, 0.1, 2000)
        );
        assert_eq!(c.optimizer.step_size, 0.05);
        let m = ExperimentConfig::preset("two-circles-mmd-ppm").unwrap();
        assert_eq!(m.loss_weight, 5.0);
        let i = ExperimentConfig::preset("imperfect-circle-mmd-ppm-c0.12").unwrap();
        assert_eq!(i.optimizer.step_size, 0.01);
        assert_eq!(i.reg.unwrap().lambda0, 0.3);
        assert_eq!(i.penalty.unwrap().c_delta, 0.12);
        assert_eq!(i.penalty.unwrap().beta, 80.0);
        assert!(ExperimentConfig::preset("circle-sinkhorn").is_err());
        assert!(ExperimentConfig::preset("imperfect-circle-cramer-c0").is_err());
        assert!(ExperimentConfig::preset("imperfect-circle-mmd-c0.5").is_err());
    }

    #[test]
    fn unknown_keys_rejected_with_line() {
        let text = "steps = 10\nbogus = 1\n[trained]\nkind = \"circle\"\ncount = 4\n\
                    [reference]\nkind = \"circle\"\ncount = 4\n[main]\nkind = \"cramer\"\n";
        let err = ExperimentConfig::from_toml_str(text)
            .unwrap_err()
            .to_string();
        assert!(err.contains("bogus") && err.contains("line 2"), "{err}");
        let ok = text.replace("bogus = 1\n", "");
        assert!(ExperimentConfig::from_toml_str(&ok).is_ok());
        let bad = ok.replace("count = 4\n[main]", "count = 0\n[main]");
        assert!(ExperimentConfig::from_toml_str(&bad).is_err());
    }

    #[test]
    fn cosine_schedule() {
        let s = CosineSchedule {
            lambda1_min: 10.0,
            lambda1_max: 110.0,
            t_end: 100,
        };
        assert_eq!(s.at(0), 110.0);
        assert!((s.at(50) - 60.0).abs() < 1e-12);
        assert_eq!(s.at(100), 10.0);
        assert_eq!(s.at(500), 10.0);
    }
}

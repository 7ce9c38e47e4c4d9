//! Wall-clock timing of regularizer gradient steps over a grid of cloud
//! sizes and subsample counts.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::OptimizerConfig;
use crate::descent::{step, OptimizerState, StepSampler};
use crate::error::{Error, Result};
use crate::geometry::{generate_shape, CircleSampling, RngStream, ShapeSpec};
use crate::kernels::MmdMode;
use crate::objective::{LossConfig, MainLoss, RegConfig, RegKind};
use crate::vr::DEFAULT_MAX_POINTS;

fn default_warmup() -> usize {
    10
}

fn default_timed() -> usize {
    100
}

fn default_repetitions() -> usize {
    3
}

fn default_max_points() -> usize {
    DEFAULT_MAX_POINTS
}

/// Grid of benchmark cases: every variant at every size and `s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchGrid {
    pub sizes: Vec<usize>,
    pub s_values: Vec<usize>,
    pub variants: Vec<RegKind>,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default = "default_warmup")]
    pub warmup_steps: usize,
    #[serde(default = "default_timed")]
    pub timed_steps: usize,
    #[serde(default)]
    pub seed: u64,
    /// PD-Reg cases above this many points are skipped.
    #[serde(default = "default_max_points")]
    pub max_points: usize,
}

impl BenchGrid {
    pub fn new(sizes: Vec<usize>, s_values: Vec<usize>, variants: Vec<RegKind>) -> Self {
        Self {
            sizes,
            s_values,
            variants,
            repetitions: default_repetitions(),
            warmup_steps: default_warmup(),
            timed_steps: default_timed(),
            seed: 0,
            max_points: DEFAULT_MAX_POINTS,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let grid: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.repetitions < 3 {
            return Err(Error::config("benchmarks need at least 3 repetitions"));
        }
        if self.sizes.is_empty() || self.s_values.is_empty() || self.variants.is_empty() {
            return Err(Error::config("benchmark grid has an empty axis"));
        }
        if self.sizes.iter().any(|&n| n < 4) || self.s_values.contains(&0) {
            return Err(Error::config(
                "benchmark sizes must be at least 4 and s at least 1",
            ));
        }
        if self.timed_steps == 0 {
            return Err(Error::config("timed_steps must be at least 1"));
        }
        Ok(())
    }
}

/// Timing of one grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub variant: RegKind,
    pub n: usize,
    pub s: usize,
    pub repetitions: usize,
    pub timed_steps: usize,
    pub mean_seconds: f64,
    pub std_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// Human-readable notes for skipped cells.
    pub skipped: Vec<String>,
}

impl BenchReport {
    pub fn find(&self, variant: RegKind, n: usize, s: usize) -> Option<&BenchRow> {
        self.rows
            .iter()
            .find(|r| r.variant == variant && r.n == n && r.s == s)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "variant",
            "n",
            "s",
            "repetitions",
            "timed_steps",
            "mean_seconds",
            "std_seconds",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.variant.name().to_string(),
                r.n.to_string(),
                r.s.to_string(),
                r.repetitions.to_string(),
                r.timed_steps.to_string(),
                r.mean_seconds.to_string(),
                r.std_seconds.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("benchmark report", e))?;
        Ok(())
    }
}

/// Regularizer-only loss used for timing: Gaussian blob matched to a circle.
pub fn bench_loss(variant: RegKind, s: usize, max_points: usize) -> LossConfig {
    LossConfig {
        main: MainLoss::None,
        loss_weight: 1.0,
        reg: Some(RegConfig {
            kind: variant,
            lambda: 1.0,
            lambda0: 1.0,
            lambda1: 6000.0,
            sigma: 0.1,
            s,
            mode: MmdMode::Norm,
            replacement: false,
            resample_reference: true,
            max_points,
        }),
        penalty: None,
    }
}

/// Seconds for `timed` steps after `warmup` untimed ones, once per
/// repetition, each repetition restarting from the same initial cloud.
pub fn time_steps(variant: RegKind, n: usize, s: usize, grid: &BenchGrid) -> Result<Vec<f64>> {
    let root = RngStream::new(grid.seed);
    let initial = generate_shape(
        &ShapeSpec::GaussianBlob {
            count: n,
            stddev: 0.3,
            center: vec![0.0, 0.0],
        },
        &mut root.derive(1),
    )?;
    let reference = generate_shape(
        &ShapeSpec::Circle {
            count: n,
            radius: 1.0,
            center: vec![0.0, 0.0],
            sampling: CircleSampling::Random,
        },
        &mut root.derive(2),
    )?;
    let loss = bench_loss(variant, s, grid.max_points);
    let opt = OptimizerConfig::default();
    let mut times = Vec::with_capacity(grid.repetitions);
    for rep in 0..grid.repetitions {
        let mut sampler = StepSampler::new(root.derive(100 + rep as u64));
        let mut state = OptimizerState::new(&initial, &opt)?;
        let mut cloud = initial.clone();
        for _ in 0..grid.warmup_steps {
            cloud = step(&cloud, &reference, &loss, &mut state, &mut sampler)?.0;
        }
        let start = Instant::now();
        for _ in 0..grid.timed_steps {
            cloud = step(&cloud, &reference, &loss, &mut state, &mut sampler)?.0;
        }
        times.push(start.elapsed().as_secs_f64());
    }
    Ok(times)
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Runs the whole grid. `on_row` sees each finished row (for progress).
pub fn run_bench(grid: &BenchGrid, mut on_row: impl FnMut(&BenchRow)) -> Result<BenchReport> {
    grid.validate()?;
    let mut report = BenchReport::default();
    for &variant in &grid.variants {
        for &n in &grid.sizes {
            for &s in &grid.s_values {
                if variant == RegKind::PdReg && n > grid.max_points {
                    report.skipped.push(format!(
                        "{} at n={n} skipped: above the {}-point limit of the exact diagram oracle",
                        variant.name(),
                        grid.max_points
                    ));
                    continue;
                }
                let times = time_steps(variant, n, s, grid)?;
                let (mean_seconds, std_seconds) = mean_std(&times);
                let row = BenchRow {
                    variant,
                    n,
                    s,
                    repetitions: grid.repetitions,
                    timed_steps: grid.timed_steps,
                    mean_seconds,
                    std_seconds,
                };
                on_row(&row);
                report.rows.push(row);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_grid_runs() {
        let mut grid = BenchGrid::new(vec![8, 12], vec![4], vec![RegKind::PpmReg, RegKind::PdReg]);
        grid.warmup_steps = 1;
        grid.timed_steps = 2;
        grid.max_points = 10;
        let report = run_bench(&grid, |_| {}).unwrap();
        assert_eq!(report.rows.len(), 3);
        assert_eq!(report.skipped.len(), 1);
        assert!(report.find(RegKind::PpmReg, 12, 4).unwrap().mean_seconds >= 0.0);
        let mut out = Vec::new();
        report.write_csv(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap().lines().count(), 4);
    }

    #[test]
    fn grid_validation() {
        let mut grid = BenchGrid::new(vec![8], vec![4], vec![RegKind::PpmReg]);
        grid.repetitions = 2;
        assert!(grid.validate().is_err());
        let text = "sizes = [128]\ns_values = [512]\nvariants = [\"ppm-reg\", \"pd-reg\"]\n";
        let parsed = BenchGrid::from_toml_str(text).unwrap();
        assert_eq!(parsed.variants, vec![RegKind::PpmReg, RegKind::PdReg]);
        assert_eq!(parsed.timed_steps, 100);
        assert!(BenchGrid::from_toml_str("sizes = [128]\n").is_err());
    }
}

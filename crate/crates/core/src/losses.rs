//! Losses on ambient point clouds: energy (Cramér) distance, RBF-MMD and
//! the centroid-gap penalty, each with its gradient with respect to the
//! first cloud.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::kernels::guarded_sqrt;
use crate::ppm::GradAccumulator;

const ROW_CHUNK: usize = 16;

fn check_clouds(a: &PointCloud, b: &PointCloud) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::contract("loss of an empty cloud"));
    }
    if a.dim() != b.dim() {
        return Err(Error::contract(format!(
            "clouds of dimension {} and {}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Per-row sums against the own cloud and the other cloud, plus the
/// corresponding derivative sums for the row's point.
struct RowTerms {
    own: f64,
    cross: f64,
    d_own: Vec<f64>,
    d_cross: Vec<f64>,
}

/// `f(x, y)` returns the pair value and accumulates `∂f/∂x` into `grad`.
fn row_terms<F>(a: &PointCloud, b: &PointCloud, with_grad: bool, f: F) -> Vec<RowTerms>
where
    F: Fn(&[f64], &[f64], Option<&mut [f64]>) -> f64 + Sync,
{
    let dim = a.dim();
    (0..a.len())
        .into_par_iter()
        .with_min_len(ROW_CHUNK)
        .map(|i| {
            let x = a.point(i);
            let mut t = RowTerms {
                own: 0.0,
                cross: 0.0,
                d_own: vec![0.0; if with_grad { dim } else { 0 }],
                d_cross: vec![0.0; if with_grad { dim } else { 0 }],
            };
            for y in a.points() {
                t.own += f(x, y, with_grad.then_some(t.d_own.as_mut_slice()));
            }
            for y in b.points() {
                t.cross += f(x, y, with_grad.then_some(t.d_cross.as_mut_slice()));
            }
            t
        })
        .collect()
}

fn within_sum(c: &PointCloud, f: impl Fn(&[f64], &[f64]) -> f64 + Sync) -> f64 {
    let rows: Vec<f64> = (0..c.len())
        .into_par_iter()
        .with_min_len(ROW_CHUNK)
        .map(|i| c.points().map(|y| f(c.point(i), y)).sum())
        .collect();
    rows.iter().sum()
}

fn distance_term(x: &[f64], y: &[f64], grad: Option<&mut [f64]>) -> f64 {
    let d = crate::geometry::euclidean(x, y);
    if let Some(g) = grad {
        if d > 0.0 {
            for k in 0..x.len() {
                g[k] += (x[k] - y[k]) / d;
            }
        }
    }
    d
}

fn rbf_term(sigma: f64) -> impl Fn(&[f64], &[f64], Option<&mut [f64]>) -> f64 + Sync {
    move |x, y, grad| {
        let r2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
        let k = (-r2 / (2.0 * sigma)).exp();
        if let Some(g) = grad {
            for j in 0..x.len() {
                g[j] -= k * (x[j] - y[j]) / sigma;
            }
        }
        k
    }
}

/// Value plus optional gradient with respect to the first cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWithGrad {
    pub value: f64,
    pub grad: Option<GradAccumulator>,
}

/// Combines `c_own·Σ own - c_cross·Σ cross + rest` and the matching
/// gradient, where the own-cloud double sum contributes twice by symmetry.
fn assemble(
    a: &PointCloud,
    rows: &[RowTerms],
    c_own: f64,
    c_cross: f64,
    rest: f64,
    with_grad: bool,
) -> (f64, Option<GradAccumulator>) {
    let own: f64 = rows.iter().map(|r| r.own).sum();
    let cross: f64 = rows.iter().map(|r| r.cross).sum();
    let value = c_own * own - c_cross * cross + rest;
    let grad = with_grad.then(|| {
        let mut g = GradAccumulator::for_cloud(a);
        for (i, r) in rows.iter().enumerate() {
            for (k, out) in g.point_mut(i).iter_mut().enumerate() {
                *out = 2.0 * c_own * r.d_own[k] - c_cross * r.d_cross[k];
            }
        }
        g
    });
    (value, grad)
}

/// Energy distance `2 E|x - y| - E|x - x'| - E|y - y'|` between the empirical
/// measures, with self-pairs included in the within-cloud means.
pub fn cramer_distance_with_grad(
    a: &PointCloud,
    b: &PointCloud,
    with_grad: bool,
) -> Result<LossWithGrad> {
    check_clouds(a, b)?;
    let (n, m) = (a.len() as f64, b.len() as f64);
    let rows = row_terms(a, b, with_grad, distance_term);
    let syy = within_sum(b, crate::geometry::euclidean);
    let (value, grad) = assemble(
        a,
        &rows,
        -1.0 / (n * n),
        -2.0 / (n * m),
        -syy / (m * m),
        with_grad,
    );
    Ok(LossWithGrad {
        value: value.max(0.0),
        grad,
    })
}

pub fn cramer_distance(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    Ok(cramer_distance_with_grad(a, b, false)?.value)
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::config(format!(
            "kernel width sigma must be positive, got {sigma}"
        )))
    }
}

/// Biased MMD² with kernel `exp(-|x - y|² / 2σ)` on ambient points,
/// clamped at zero.
pub fn ambient_mmd_squared_with_grad(
    a: &PointCloud,
    b: &PointCloud,
    sigma: f64,
    with_grad: bool,
) -> Result<LossWithGrad> {
    check_clouds(a, b)?;
    check_sigma(sigma)?;
    let (n, m) = (a.len() as f64, b.len() as f64);
    let term = rbf_term(sigma);
    let rows = row_terms(a, b, with_grad, &term);
    let syy = within_sum(b, |x, y| term(x, y, None));
    let (value, grad) = assemble(
        a,
        &rows,
        1.0 / (n * n),
        2.0 / (n * m),
        syy / (m * m),
        with_grad,
    );
    Ok(LossWithGrad {
        value: value.max(0.0),
        grad,
    })
}

/// MMD (the norm) with the guarded square root.
pub fn ambient_mmd_with_grad(
    a: &PointCloud,
    b: &PointCloud,
    sigma: f64,
    with_grad: bool,
) -> Result<LossWithGrad> {
    let sq = ambient_mmd_squared_with_grad(a, b, sigma, with_grad)?;
    let (value, deriv) = guarded_sqrt(sq.value);
    let grad = sq.grad.map(|mut g| {
        g.scale(deriv);
        g
    });
    Ok(LossWithGrad { value, grad })
}

pub fn ambient_mmd(a: &PointCloud, b: &PointCloud, sigma: f64) -> Result<f64> {
    Ok(ambient_mmd_with_grad(a, b, sigma, false)?.value)
}

/// Penalty `(λ_p/β) ln(1 + exp(β(c_δ - gap)))` on the centroid gap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PenaltyParams {
    pub lambda_p: f64,
    pub beta: f64,
    pub c_delta: f64,
}

impl PenaltyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_p >= 0.0 && self.lambda_p.is_finite()) {
            return Err(Error::config(format!(
                "lambda_p must be non-negative, got {}",
                self.lambda_p
            )));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::config(format!(
                "beta must be positive, got {}",
                self.beta
            )));
        }
        if !(self.c_delta >= 0.0 && self.c_delta.is_finite()) {
            return Err(Error::config(format!(
                "c_delta must be non-negative, got {}",
                self.c_delta
            )));
        }
        Ok(())
    }

    /// Penalty value and its derivative with respect to the gap.
    pub fn of_gap(&self, gap: f64) -> (f64, f64) {
        let z = self.beta * (self.c_delta - gap);
        (
            self.lambda_p / self.beta * softplus(z),
            -self.lambda_p * sigmoid(z),
        )
    }
}

/// `ln(1 + e^z)` without overflow.
pub fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Euclidean distance between the two centroids.
pub fn centroid_gap(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    check_clouds(a, b)?;
    Ok(crate::geometry::euclidean(&a.centroid()?, &b.centroid()?))
}

pub fn centroid_penalty_with_grad(
    a: &PointCloud,
    b: &PointCloud,
    params: &PenaltyParams,
    with_grad: bool,
) -> Result<LossWithGrad> {
    check_clouds(a, b)?;
    params.validate()?;
    let (ca, cb) = (a.centroid()?, b.centroid()?);
    let gap = crate::geometry::euclidean(&ca, &cb);
    let (value, d_gap) = params.of_gap(gap);
    let grad = with_grad.then(|| {
        let mut g = GradAccumulator::for_cloud(a);
        if gap > 0.0 {
            let n = a.len() as f64;
            let dir: Vec<f64> = ca
                .iter()
                .zip(&cb)
                .map(|(x, y)| d_gap * (x - y) / (gap * n))
                .collect();
            for i in 0..a.len() {
                g.point_mut(i).copy_from_slice(&dir);
            }
        }
        g
    });
    Ok(LossWithGrad { value, grad })
}

pub fn centroid_penalty(a: &PointCloud, b: &PointCloud, params: &PenaltyParams) -> Result<f64> {
    Ok(centroid_penalty_with_grad(a, b, params, false)?.value)
}

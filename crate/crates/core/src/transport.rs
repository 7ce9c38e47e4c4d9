//! 2-Wasserstein distances on Ω: partial matching between persistence
//! diagrams and balanced transport between PPMs with equal counts.
//!
//! Ω carries the quotient metric `d(z₁, z₂) = min(|z₁ - z₂|, ℓ₁ + ℓ₂)` with
//! `d(z, *) = ℓ` in birth-lifetime coordinates. Many libraries instead use
//! birth-death coordinates with an L∞ or √2-scaled diagonal distance, so
//! values here are not interchangeable with theirs.

use crate::assignment;
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::ppm::{EntryGrad, GradAccumulator, OmegaPoint, PersistenceMeasure};
use crate::vr::PersistenceDiagram;

pub fn omega_distance(z1: &OmegaPoint, z2: &OmegaPoint) -> f64 {
    match (z1.as_pair(), z2.as_pair()) {
        (Some(a), Some(b)) => pair_distance(a, b),
        (Some((_, l)), None) | (None, Some((_, l))) => l,
        (None, None) => 0.0,
    }
}

#[inline]
fn pair_distance((b1, l1): (f64, f64), (b2, l2): (f64, f64)) -> f64 {
    ((b1 - b2).powi(2) + (l1 - l2).powi(2)).sqrt().min(l1 + l2)
}

/// Derivative of `d(z₁, z₂)²` with respect to `z₁`.
fn pair_cost_grad((b1, l1): (f64, f64), (b2, l2): (f64, f64)) -> EntryGrad {
    let euclid2 = (b1 - b2).powi(2) + (l1 - l2).powi(2);
    if euclid2 <= (l1 + l2).powi(2) {
        EntryGrad {
            birth: 2.0 * (b1 - b2),
            lifetime: 2.0 * (l1 - l2),
        }
    } else {
        EntryGrad {
            birth: 0.0,
            lifetime: 2.0 * (l1 + l2),
        }
    }
}

/// One element of an optimal partial matching.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Match {
    Pair(usize, usize),
    FirstToDiagonal(usize),
    SecondToDiagonal(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagramMatching {
    pub distance: f64,
    pub matches: Vec<Match>,
}

/// Optimal partial matching: each point is matched to a point of the
/// other diagram or to `*`, solved as a square assignment of size
/// `|d1| + |d2|`.
pub fn match_diagrams(d1: &PersistenceDiagram, d2: &PersistenceDiagram) -> Result<DiagramMatching> {
    if d1.q != d2.q {
        return Err(Error::contract(format!(
            "Wasserstein distance between diagrams of dimension {} and {}",
            d1.q, d2.q
        )));
    }
    let (n1, n2) = (d1.len(), d2.len());
    let size = n1 + n2;
    let mut cost = vec![0.0; size * size];
    for i in 0..size {
        for j in 0..size {
            cost[i * size + j] = match (i < n1, j < n2) {
                (true, true) => {
                    let (a, b) = (&d1.points[i], &d2.points[j]);
                    pair_distance((a.birth, a.lifetime), (b.birth, b.lifetime)).powi(2)
                }
                (true, false) => d1.points[i].lifetime.powi(2),
                (false, true) => d2.points[j].lifetime.powi(2),
                (false, false) => 0.0,
            };
        }
    }
    let sol = assignment::solve(&cost, size, size)?;
    let mut matches = Vec::with_capacity(size);
    for (i, &j) in sol.row_to_col.iter().enumerate() {
        match (i < n1, j < n2) {
            (true, true) => matches.push(Match::Pair(i, j)),
            (true, false) => matches.push(Match::FirstToDiagonal(i)),
            (false, true) => matches.push(Match::SecondToDiagonal(j)),
            (false, false) => {}
        }
    }
    Ok(DiagramMatching {
        distance: sol.cost.max(0.0).sqrt(),
        matches,
    })
}

pub fn wasserstein2_diagrams(d1: &PersistenceDiagram, d2: &PersistenceDiagram) -> Result<f64> {
    Ok(match_diagrams(d1, d2)?.distance)
}

/// Distance and its derivative with respect to the points of `d1`, holding
/// the optimal matching fixed.
pub fn wasserstein2_diagrams_with_grad(
    d1: &PersistenceDiagram,
    d2: &PersistenceDiagram,
) -> Result<(f64, Vec<EntryGrad>)> {
    let m = match_diagrams(d1, d2)?;
    let mut grad = vec![EntryGrad::default(); d1.len()];
    if m.distance > 0.0 {
        let outer = 0.5 / m.distance;
        for mt in &m.matches {
            let g = match *mt {
                Match::Pair(i, j) => {
                    let (a, b) = (&d1.points[i], &d2.points[j]);
                    (
                        i,
                        pair_cost_grad((a.birth, a.lifetime), (b.birth, b.lifetime)),
                    )
                }
                Match::FirstToDiagonal(i) => (
                    i,
                    EntryGrad {
                        birth: 0.0,
                        lifetime: 2.0 * d1.points[i].lifetime,
                    },
                ),
                Match::SecondToDiagonal(_) => continue,
            };
            grad[g.0] = EntryGrad {
                birth: outer * g.1.birth,
                lifetime: outer * g.1.lifetime,
            };
        }
    }
    Ok((m.distance, grad))
}

/// Pushes diagram-point derivatives onto the defining edges: the birth is
/// the length of `birth_edge` (0 in dimension 0) and the lifetime is the
/// length of `death_edge` minus the birth.
pub fn diagram_backward(
    cloud: &PointCloud,
    diagram: &PersistenceDiagram,
    upstream: &[EntryGrad],
    accum: &mut GradAccumulator,
) -> Result<()> {
    if upstream.len() != diagram.len() {
        return Err(Error::contract(
            "one upstream gradient per diagram point is required",
        ));
    }
    if !accum.matches(cloud) {
        return Err(Error::contract("gradient buffer does not match the cloud"));
    }
    for (p, g) in diagram.points.iter().zip(upstream) {
        if let Some((i, j)) = p.birth_edge {
            accum.add_distance(cloud, i, j, g.birth - g.lifetime);
        }
        let (i, j) = p.death_edge;
        accum.add_distance(cloud, i, j, g.lifetime);
    }
    Ok(())
}

fn check_measures(m1: &PersistenceMeasure, m2: &PersistenceMeasure) -> Result<()> {
    if m1.q != m2.q {
        return Err(Error::contract(format!(
            "Wasserstein distance between PPMs of dimension {} and {}",
            m1.q, m2.q
        )));
    }
    if m1.len() != m2.len() || m1.is_empty() {
        return Err(Error::contract(format!(
            "balanced transport needs equal non-zero entry counts, got {} and {}",
            m1.len(),
            m2.len()
        )));
    }
    Ok(())
}

fn ppm_assignment(
    m1: &PersistenceMeasure,
    m2: &PersistenceMeasure,
) -> Result<assignment::Assignment> {
    check_measures(m1, m2)?;
    let s = m1.len();
    let mut cost = vec![0.0; s * s];
    for (i, a) in m1.entries.iter().enumerate() {
        for (j, b) in m2.entries.iter().enumerate() {
            cost[i * s + j] = omega_distance(a, b).powi(2);
        }
    }
    assignment::solve(&cost, s, s)
}

/// `√((1/s) min_σ Σ d(xᵢ, y_σ(i))²)` with uniform weights `1/s`.
pub fn wasserstein2_ppm(m1: &PersistenceMeasure, m2: &PersistenceMeasure) -> Result<f64> {
    let sol = ppm_assignment(m1, m2)?;
    Ok((sol.cost / m1.len() as f64).max(0.0).sqrt())
}

/// Distance and derivative with respect to the entries of `m1` through the
/// fixed optimal plan. Trivial entries get zero.
pub fn wasserstein2_ppm_with_grad(
    m1: &PersistenceMeasure,
    m2: &PersistenceMeasure,
) -> Result<(f64, Vec<EntryGrad>)> {
    let sol = ppm_assignment(m1, m2)?;
    let s = m1.len() as f64;
    let w = (sol.cost / s).max(0.0).sqrt();
    let mut grad = vec![EntryGrad::default(); m1.len()];
    if w > 0.0 {
        let outer = 0.5 / (w * s);
        for (i, &j) in sol.row_to_col.iter().enumerate() {
            let Some(a) = m1.entries[i].as_pair() else {
                continue;
            };
            let g = match m2.entries[j].as_pair() {
                Some(b) => pair_cost_grad(a, b),
                None => EntryGrad {
                    birth: 0.0,
                    lifetime: 2.0 * a.1,
                },
            };
            grad[i] = EntryGrad {
                birth: outer * g.birth,
                lifetime: outer * g.lifetime,
            };
        }
    }
    Ok((w, grad))
}

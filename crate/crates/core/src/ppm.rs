//! Principal persistence measures.
//!
//! A subsample of exactly `2q + 2` points has at most one `q`-dimensional
//! Vietoris-Rips feature, and it can be read off the distance matrix
//! directly: for each point `x` let `x¹`, `x²` be the farthest and second
//! farthest points of the subsample (the subsample includes `x` itself).
//! Then
//!
//! ```text
//! t_b = max_x d(x, x²),   t_d = min_x d(x, x¹)
//! ```
//!
//! and the feature is `(t_b, t_d - t_b)` when `t_d > t_b`, otherwise the
//! subsample contributes the collapsed point `*`. The empirical measure of
//! `s` such outcomes is the PPM; each outcome keeps the index pairs that
//! realize `t_b` and `t_d` so gradients can be pushed back to coordinates.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{euclidean, PointCloud, RngStream};

/// A point of the quotient half-plane: a feature `(birth, lifetime)` with
/// positive lifetime, or the collapsed point `*`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OmegaPoint {
    Feature { birth: f64, lifetime: f64 },
    Trivial,
}

impl OmegaPoint {
    pub fn feature(birth: f64, lifetime: f64) -> Self {
        if lifetime > 0.0 {
            OmegaPoint::Feature { birth, lifetime }
        } else {
            OmegaPoint::Trivial
        }
    }

    pub fn is_trivial(&self) -> bool {
        matches!(self, OmegaPoint::Trivial)
    }

    pub fn lifetime(&self) -> f64 {
        match self {
            OmegaPoint::Feature { lifetime, .. } => *lifetime,
            OmegaPoint::Trivial => 0.0,
        }
    }

    pub fn as_pair(&self) -> Option<(f64, f64)> {
        match *self {
            OmegaPoint::Feature { birth, lifetime } => Some((birth, lifetime)),
            OmegaPoint::Trivial => None,
        }
    }
}

/// Index pairs selected by the closed form for one subsample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WitnessRecord {
    /// Indices into the parent cloud, in subsample order.
    pub indices: Vec<usize>,
    /// Parent indices realizing `t_b`.
    pub birth_pair: (usize, usize),
    /// Parent indices realizing `t_d`.
    pub death_pair: (usize, usize),
    pub trivial: bool,
}

/// Empirical PPM: `s` outcomes, each with mass `1/s` (trivial ones included).
#[derive(Debug, Clone, PartialEq)]
pub struct PersistenceMeasure {
    pub q: usize,
    pub entries: Vec<OmegaPoint>,
    pub witnesses: Vec<WitnessRecord>,
}

impl PersistenceMeasure {
    /// A measure without witnesses, for direct construction in tests and
    /// transport computations.
    pub fn from_entries(q: usize, entries: Vec<OmegaPoint>) -> Self {
        Self {
            q,
            entries,
            witnesses: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn features(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.entries.iter().filter_map(OmegaPoint::as_pair)
    }

    pub fn trivial_count(&self) -> usize {
        self.entries.iter().filter(|e| e.is_trivial()).count()
    }

    /// One JSON object per entry.
    pub fn write_ndjson<W: Write>(&self, mut out: W) -> Result<()> {
        #[derive(Serialize)]
        #[serde(untagged)]
        enum Line {
            Feature { q: usize, birth: f64, lifetime: f64 },
            Trivial { q: usize, trivial: bool },
        }
        for e in &self.entries {
            let line = match *e {
                OmegaPoint::Feature { birth, lifetime } => Line::Feature {
                    q: self.q,
                    birth,
                    lifetime,
                },
                OmegaPoint::Trivial => Line::Trivial {
                    q: self.q,
                    trivial: true,
                },
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")
                .map_err(|e| Error::io("<ndjson output>", e))?;
        }
        Ok(())
    }
}

/// Closed-form result on local subsample positions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmallPh {
    pub point: OmegaPoint,
    pub t_birth: f64,
    pub t_death: f64,
    pub birth_pair: (usize, usize),
    pub death_pair: (usize, usize),
}

pub fn subsample_size(q: usize) -> usize {
    2 * q + 2
}

fn ordered(a: usize, b: usize) -> (usize, usize) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

fn ph_small_with<F: Fn(usize, usize) -> f64>(m: usize, dist: F) -> SmallPh {
    // (distance, pair) of the current max over rows of d(x, x²)
    let mut birth: Option<(f64, (usize, usize))> = None;
    // (distance, pair) of the current min over rows of d(x, x¹)
    let mut death: Option<(f64, (usize, usize))> = None;
    for a in 0..m {
        let mut first = (f64::NEG_INFINITY, usize::MAX);
        let mut second = (f64::NEG_INFINITY, usize::MAX);
        for b in 0..m {
            let d = if a == b { 0.0 } else { dist(a, b) };
            if d > first.0 {
                second = first;
                first = (d, b);
            } else if d > second.0 {
                second = (d, b);
            }
        }
        let bp = (second.0, ordered(a, second.1));
        birth = match birth {
            Some(cur) if cur.0 > bp.0 || (cur.0 == bp.0 && cur.1 <= bp.1) => Some(cur),
            _ => Some(bp),
        };
        let dp = (first.0, ordered(a, first.1));
        death = match death {
            Some(cur) if cur.0 < dp.0 || (cur.0 == dp.0 && cur.1 <= dp.1) => Some(cur),
            _ => Some(dp),
        };
    }
    let (t_birth, birth_pair) = birth.expect("subsample is non-empty");
    let (t_death, death_pair) = death.expect("subsample is non-empty");
    let point = if t_death > t_birth {
        OmegaPoint::Feature {
            birth: t_birth,
            lifetime: t_death - t_birth,
        }
    } else {
        OmegaPoint::Trivial
    };
    SmallPh {
        point,
        t_birth,
        t_death,
        birth_pair,
        death_pair,
    }
}

/// `PH_q` of exactly `2q + 2` points via the closed form. Pairs in the
/// result are positions within `points`; ties go to the lowest pair.
pub fn ph_small(points: &[&[f64]], q: usize) -> Result<SmallPh> {
    let m = subsample_size(q);
    if points.len() != m {
        return Err(Error::contract(format!(
            "PH_{q} closed form needs exactly {m} points, got {}",
            points.len()
        )));
    }
    Ok(ph_small_with(m, |a, b| euclidean(points[a], points[b])))
}

fn ph_small_indexed(
    cloud: &PointCloud,
    indices: &[usize],
    q: usize,
) -> (OmegaPoint, WitnessRecord) {
    let r = ph_small_with(indices.len(), |a, b| cloud.dist(indices[a], indices[b]));
    let lift = |(a, b): (usize, usize)| (indices[a], indices[b]);
    debug_assert_eq!(indices.len(), subsample_size(q));
    (
        r.point,
        WitnessRecord {
            indices: indices.to_vec(),
            birth_pair: lift(r.birth_pair),
            death_pair: lift(r.death_pair),
            trivial: r.point.is_trivial(),
        },
    )
}

/// Smallest gap between two distinct pairwise distances inside any one
/// subsample. Witness selections cannot change under coordinate
/// perturbations much smaller than this.
pub fn subsample_tie_margin(cloud: &PointCloud, subsamples: &SubsampleSet) -> f64 {
    let mut margin = f64::INFINITY;
    let mut dists = Vec::new();
    for idx in subsamples.iter() {
        dists.clear();
        for (a, &i) in idx.iter().enumerate() {
            for &j in &idx[a + 1..] {
                dists.push(cloud.dist(i, j));
            }
        }
        dists.sort_by(f64::total_cmp);
        margin = dists.windows(2).map(|w| w[1] - w[0]).fold(margin, f64::min);
        if let Some(&d) = dists.first() {
            margin = margin.min(d);
        }
    }
    margin
}

/// Index lists for `s` subsamples of size `2q + 2`, stored flat.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubsampleSet {
    pub q: usize,
    indices: Vec<usize>,
}

impl SubsampleSet {
    pub fn new(q: usize, indices: Vec<usize>) -> Result<Self> {
        if !indices.len().is_multiple_of(subsample_size(q)) {
            return Err(Error::contract(format!(
                "{} indices do not split into subsamples of size {}",
                indices.len(),
                subsample_size(q)
            )));
        }
        Ok(Self { q, indices })
    }

    pub fn count(&self) -> usize {
        self.indices.len() / subsample_size(self.q)
    }

    pub fn iter(&self) -> std::slice::ChunksExact<'_, usize> {
        self.indices.chunks_exact(subsample_size(self.q))
    }

    pub fn max_index(&self) -> Option<usize> {
        self.indices.iter().copied().max()
    }
}

/// Draws `s` uniform subsamples sequentially from `rng`. Without
/// replacement the indices within one subsample are distinct; each
/// subsample is stored in ascending order.
pub fn draw_subsamples(
    n: usize,
    q: usize,
    s: usize,
    replacement: bool,
    rng: &mut RngStream,
) -> Result<SubsampleSet> {
    let m = subsample_size(q);
    if s == 0 {
        return Err(Error::config("subsample count s must be at least 1"));
    }
    if n == 0 || (!replacement && n < m) {
        return Err(Error::config(format!(
            "cloud of {n} points is too small for PH_{q} subsamples of {m} points without replacement"
        )));
    }
    let mut indices = Vec::with_capacity(s * m);
    for _ in 0..s {
        let start = indices.len();
        if replacement {
            indices.extend((0..m).map(|_| rng.random_range(0..n)));
        } else {
            indices.extend(rand::seq::index::sample(rng, n, m).iter());
        }
        indices[start..].sort_unstable();
    }
    Ok(SubsampleSet { q, indices })
}

pub fn compute_ppm_from_subsamples(
    cloud: &PointCloud,
    subsamples: &SubsampleSet,
) -> Result<PersistenceMeasure> {
    if let Some(max) = subsamples.max_index() {
        if max >= cloud.len() {
            return Err(Error::contract(format!(
                "subsample index {max} out of range for a cloud of {} points",
                cloud.len()
            )));
        }
    }
    let q = subsamples.q;
    let chunks: Vec<&[usize]> = subsamples.iter().collect();
    let (entries, witnesses): (Vec<_>, Vec<_>) = chunks
        .par_iter()
        .with_min_len(64)
        .map(|idx| ph_small_indexed(cloud, idx, q))
        .unzip();
    Ok(PersistenceMeasure {
        q,
        entries,
        witnesses,
    })
}

pub fn compute_ppm(
    cloud: &PointCloud,
    q: usize,
    s: usize,
    rng: &mut RngStream,
    replacement: bool,
) -> Result<PersistenceMeasure> {
    let subsamples = draw_subsamples(cloud.len(), q, s, replacement, rng)?;
    compute_ppm_from_subsamples(cloud, &subsamples)
}

/// Upstream derivative with respect to one Ω entry.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EntryGrad {
    pub birth: f64,
    pub lifetime: f64,
}

/// Per-coordinate gradient buffer for a point cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct GradAccumulator {
    dim: usize,
    grad: Vec<f64>,
}

impl GradAccumulator {
    pub fn new(n: usize, dim: usize) -> Self {
        Self {
            dim,
            grad: vec![0.0; n * dim],
        }
    }

    pub fn for_cloud(cloud: &PointCloud) -> Self {
        Self::new(cloud.len(), cloud.dim())
    }

    pub fn len(&self) -> usize {
        self.grad.len() / self.dim.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.grad.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.grad
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.grad
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.grad
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.grad[i * self.dim..(i + 1) * self.dim]
    }

    pub fn point_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.grad[i * self.dim..(i + 1) * self.dim]
    }

    pub fn matches(&self, cloud: &PointCloud) -> bool {
        self.dim == cloud.dim() && self.grad.len() == cloud.coords().len()
    }

    /// Adds `coeff * ∇ d(x_i, x_j)`; the gradient at `x_i = x_j` is taken as 0.
    pub fn add_distance(&mut self, cloud: &PointCloud, i: usize, j: usize, coeff: f64) {
        if coeff == 0.0 || i == j {
            return;
        }
        let d = cloud.dist(i, j);
        if d == 0.0 {
            return;
        }
        let scale = coeff / d;
        let dim = self.dim;
        for k in 0..dim {
            let diff = (cloud.point(i)[k] - cloud.point(j)[k]) * scale;
            self.grad[i * dim + k] += diff;
            self.grad[j * dim + k] -= diff;
        }
    }

    pub fn add_scaled(&mut self, other: &GradAccumulator, scale: f64) {
        assert_eq!(self.grad.len(), other.grad.len(), "gradient shape mismatch");
        for (a, b) in self.grad.iter_mut().zip(&other.grad) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.grad.iter_mut().for_each(|g| *g *= factor);
    }

    pub fn max_abs(&self) -> f64 {
        self.grad.iter().fold(0.0, |m, g| m.max(g.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.grad.iter().all(|g| g.is_finite())
    }
}

/// Pushes per-entry derivatives back onto the witness pairs. Since
/// `lifetime = t_d - t_b`, the lifetime derivative reaches both pairs.
pub fn ppm_backward(
    cloud: &PointCloud,
    measure: &PersistenceMeasure,
    upstream: &[EntryGrad],
    accum: &mut GradAccumulator,
) -> Result<()> {
    if upstream.len() != measure.entries.len() || measure.witnesses.len() != measure.entries.len() {
        return Err(Error::contract(format!(
            "{} upstream gradients, {} entries, {} witnesses",
            upstream.len(),
            measure.entries.len(),
            measure.witnesses.len()
        )));
    }
    if !accum.matches(cloud) {
        return Err(Error::contract("gradient buffer does not match the cloud"));
    }
    let n = cloud.len();
    for (w, g) in measure.witnesses.iter().zip(upstream) {
        if w.trivial {
            continue;
        }
        let (bi, bj) = w.birth_pair;
        let (di, dj) = w.death_pair;
        if bi.max(bj).max(di).max(dj) >= n {
            return Err(Error::contract("witness index outside the cloud"));
        }
        accum.add_distance(cloud, bi, bj, g.birth - g.lifetime);
        accum.add_distance(cloud, di, dj, g.lifetime);
    }
    Ok(())
}

//! Point clouds, Euclidean distances, seeded random streams and the shape
//! generators used by the matching experiments.

use std::f64::consts::TAU;
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An ordered set of points in R^n stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    dim: usize,
    coords: Vec<f64>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec<f64>>) -> Result<Self> {
        let dim = points.first().map(Vec::len).unwrap_or(0);
        let mut coords = Vec::with_capacity(points.len() * dim);
        for (i, p) in points.iter().enumerate() {
            if p.len() != dim {
                return Err(Error::contract(format!(
                    "point {i} has dimension {} but expected {dim}",
                    p.len()
                )));
            }
            coords.extend_from_slice(p);
        }
        Self::from_flat(dim, coords)
    }

    pub fn from_flat(dim: usize, coords: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::contract("point cloud dimension must be at least 1"));
        }
        if !coords.len().is_multiple_of(dim) {
            return Err(Error::contract(format!(
                "{} coordinates do not split into points of dimension {dim}",
                coords.len()
            )));
        }
        if let Some(pos) = coords.iter().position(|c| !c.is_finite()) {
            return Err(Error::NonFinite(format!(
                "coordinate {} of point {} is {}",
                pos % dim,
                pos / dim,
                coords[pos]
            )));
        }
        Ok(Self { dim, coords })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.coords.chunks_exact(self.dim)
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    /// Euclidean distance between points `i` and `j`.
    #[inline]
    pub fn dist(&self, i: usize, j: usize) -> f64 {
        euclidean(self.point(i), self.point(j))
    }

    /// Returns a copy with `delta` added to the flat coordinate vector.
    pub fn displaced(&self, delta: &[f64]) -> Result<Self> {
        if delta.len() != self.coords.len() {
            return Err(Error::contract(format!(
                "displacement has {} entries, cloud has {}",
                delta.len(),
                self.coords.len()
            )));
        }
        let coords = self.coords.iter().zip(delta).map(|(c, d)| c + d).collect();
        Self::from_flat(self.dim, coords)
    }

    /// Selects a sub-cloud by index (repeats allowed).
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut coords = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            coords.extend_from_slice(self.point(i));
        }
        Self {
            dim: self.dim,
            coords,
        }
    }

    /// Largest pairwise distance (0 for fewer than two points).
    pub fn diameter(&self) -> f64 {
        let n = self.len();
        let mut best = 0.0f64;
        for i in 0..n {
            for j in i + 1..n {
                best = best.max(self.dist(i, j));
            }
        }
        best
    }

    pub fn centroid(&self) -> Result<Vec<f64>> {
        centroid(self)
    }
}

#[inline]
pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Dense symmetric matrix of pairwise Euclidean distances.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn size(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }
}

pub fn pairwise_distances(cloud: &PointCloud) -> Result<DistanceMatrix> {
    if cloud.is_empty() {
        return Err(Error::contract("pairwise distances of an empty cloud"));
    }
    let n = cloud.len();
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = cloud.dist(i, j);
            data[i * n + j] = d;
            data[j * n + i] = d;
        }
    }
    Ok(DistanceMatrix { n, data })
}

pub fn centroid(cloud: &PointCloud) -> Result<Vec<f64>> {
    if cloud.is_empty() {
        return Err(Error::contract("centroid of an empty cloud"));
    }
    let mut c = vec![0.0; cloud.dim()];
    for p in cloud.points() {
        for (acc, x) in c.iter_mut().zip(p) {
            *acc += x;
        }
    }
    let n = cloud.len() as f64;
    c.iter_mut().for_each(|x| *x /= n);
    Ok(c)
}

/// Seeded random stream.
///
/// Draws are always consumed sequentially by a single owner; parallel code
/// receives pre-drawn values, so results never depend on the worker count.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// An independent stream derived from the same seed.
    pub fn derive(&self, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream);
        Self {
            seed: self.seed,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CircleSampling {
    /// Uniformly random angles.
    #[default]
    Random,
    /// Angles 0, 2π/n, 4π/n, ...
    Even,
}

fn default_radius() -> f64 {
    1.0
}

fn origin() -> Vec<f64> {
    vec![0.0, 0.0]
}

fn default_two_centers() -> [Vec<f64>; 2] {
    [vec![-0.5, 0.0], vec![0.5, 0.0]]
}

/// Description of a generated (or loaded) point cloud.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ShapeSpec {
    Circle {
        count: usize,
        #[serde(default = "default_radius")]
        radius: f64,
        #[serde(default = "origin")]
        center: Vec<f64>,
        #[serde(default)]
        sampling: CircleSampling,
    },
    /// Two circles of equal radius; points split evenly (first circle gets
    /// the extra point when `count` is odd).
    TwoCircles {
        count: usize,
        #[serde(default = "default_radius")]
        radius: f64,
        #[serde(default = "default_two_centers")]
        centers: [Vec<f64>; 2],
        #[serde(default)]
        sampling: CircleSampling,
    },
    GaussianBlob {
        count: usize,
        stddev: f64,
        #[serde(default = "origin")]
        center: Vec<f64>,
    },
    FromFile {
        path: String,
        #[serde(default)]
        header: bool,
    },
}

impl ShapeSpec {
    pub fn validate(&self) -> Result<()> {
        let check_count = |count: usize| {
            if count == 0 {
                Err(Error::config("shape count must be at least 1"))
            } else {
                Ok(())
            }
        };
        let check_positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(format!(
                    "shape {name} must be positive, got {v}"
                )))
            }
        };
        let check_center = |c: &[f64]| {
            if c.len() == 2 && c.iter().all(|x| x.is_finite()) {
                Ok(())
            } else {
                Err(Error::config("circle centers must be finite 2-vectors"))
            }
        };
        match self {
            ShapeSpec::Circle {
                count,
                radius,
                center,
                ..
            } => {
                check_count(*count)?;
                check_positive("radius", *radius)?;
                check_center(center)
            }
            ShapeSpec::TwoCircles {
                count,
                radius,
                centers,
                ..
            } => {
                check_count(*count)?;
                check_positive("radius", *radius)?;
                centers.iter().try_for_each(|c| check_center(c))
            }
            ShapeSpec::GaussianBlob {
                count,
                stddev,
                center,
            } => {
                check_count(*count)?;
                check_positive("stddev", *stddev)?;
                if center.is_empty() || center.iter().any(|x| !x.is_finite()) {
                    return Err(Error::config(
                        "blob center must be a finite non-empty vector",
                    ));
                }
                Ok(())
            }
            ShapeSpec::FromFile { path, .. } => {
                if path.is_empty() {
                    Err(Error::config("from_file shape needs a path"))
                } else {
                    Ok(())
                }
            }
        }
    }
}

fn circle_points(
    out: &mut Vec<f64>,
    count: usize,
    radius: f64,
    center: &[f64],
    sampling: CircleSampling,
    rng: &mut RngStream,
) {
    for i in 0..count {
        let angle = match sampling {
            CircleSampling::Even => TAU * i as f64 / count as f64,
            CircleSampling::Random => rng.random::<f64>() * TAU,
        };
        out.push(center[0] + radius * angle.cos());
        out.push(center[1] + radius * angle.sin());
    }
}

pub fn generate_shape(spec: &ShapeSpec, rng: &mut RngStream) -> Result<PointCloud> {
    spec.validate()?;
    match spec {
        ShapeSpec::Circle {
            count,
            radius,
            center,
            sampling,
        } => {
            let mut coords = Vec::with_capacity(2 * count);
            circle_points(&mut coords, *count, *radius, center, *sampling, rng);
            PointCloud::from_flat(2, coords)
        }
        ShapeSpec::TwoCircles {
            count,
            radius,
            centers,
            sampling,
        } => {
            let first = count.div_ceil(2);
            let mut coords = Vec::with_capacity(2 * count);
            circle_points(&mut coords, first, *radius, &centers[0], *sampling, rng);
            circle_points(
                &mut coords,
                count - first,
                *radius,
                &centers[1],
                *sampling,
                rng,
            );
            PointCloud::from_flat(2, coords)
        }
        ShapeSpec::GaussianBlob {
            count,
            stddev,
            center,
        } => {
            let dim = center.len();
            let mut coords = Vec::with_capacity(dim * count);
            for _ in 0..*count {
                for c in center {
                    let z: f64 = StandardNormal.sample(rng);
                    coords.push(c + stddev * z);
                }
            }
            PointCloud::from_flat(dim, coords)
        }
        ShapeSpec::FromFile { path, header } => read_cloud_csv(path, *header),
    }
}

/// Reads one point per row. Decimal parsing is locale-independent.
pub fn read_cloud_csv(path: impl AsRef<Path>, header: bool) -> Result<PointCloud> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(header)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let row = record
            .iter()
            .map(|field| {
                field.parse::<f64>().map_err(|e| {
                    Error::config(format!(
                        "{}: row {}: cannot parse {field:?} as a number ({e})",
                        path.display(),
                        line + 1
                    ))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::config(format!("{}: no points", path.display())));
    }
    PointCloud::new(rows)
}

/// Writes one point per row using the shortest round-tripping decimal form.
pub fn write_cloud_csv(cloud: &PointCloud, path: impl AsRef<Path>, header: bool) -> Result<()> {
    let mut writer = csv::WriterBuilder::new().from_path(path.as_ref())?;
    if header {
        writer.write_record((0..cloud.dim()).map(|k| format!("x{k}")))?;
    }
    for p in cloud.points() {
        writer.write_record(p.iter().map(|x| x.to_string()))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

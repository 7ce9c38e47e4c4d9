//! Exact Vietoris-Rips persistence in dimensions 0 and 1.
//!
//! Dimension 0 comes from Kruskal's algorithm: every class is born at 0 and
//! dies at the weight of the minimum-spanning-tree edge that merges it.
//! Dimension 1 is computed by reducing the coboundary matrix over Z/2 in
//! reverse filtration order. Minimum-spanning-tree edges are never
//! columns (they are already paired with vertices), and a column whose
//! smallest coface appears at the same filtration value and is still
//! unpaired is paired immediately without building its coboundary.
//!
//! Simplices are ordered by diameter, then by dimension, then
//! lexicographically by their sorted vertex tuple. Essential classes are
//! not reported.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashMap};
use std::io::Write;

use crate::error::{Error, Result};
use crate::geometry::{pairwise_distances, DistanceMatrix, PointCloud};

pub const DEFAULT_MAX_POINTS: usize = 1024;

/// A finite diagram point with the edges whose lengths define it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiagramPoint {
    pub birth: f64,
    pub lifetime: f64,
    /// `None` for dimension 0, where every class is born at 0.
    pub birth_edge: Option<(usize, usize)>,
    pub death_edge: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PersistenceDiagram {
    pub q: usize,
    pub points: Vec<DiagramPoint>,
}

impl PersistenceDiagram {
    pub fn from_pairs(q: usize, pairs: &[(f64, f64)]) -> Self {
        Self {
            q,
            points: pairs
                .iter()
                .map(|&(birth, lifetime)| DiagramPoint {
                    birth,
                    lifetime,
                    birth_edge: None,
                    death_edge: (0, 0),
                })
                .collect(),
        }
    }

    pub fn empty(q: usize) -> Self {
        Self {
            q,
            points: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn pairs(&self) -> Vec<(f64, f64)> {
        self.points.iter().map(|p| (p.birth, p.lifetime)).collect()
    }

    /// Pairs sorted by (birth, lifetime), for multiset comparisons.
    pub fn sorted_pairs(&self) -> Vec<(f64, f64)> {
        let mut v = self.pairs();
        v.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        v
    }
}

/// Writes `q,birth,lifetime` rows (with header) for each diagram.
pub fn write_diagrams_csv<W: Write>(diagrams: &[PersistenceDiagram], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["q", "birth", "lifetime"])?;
    for d in diagrams {
        for p in &d.points {
            w.write_record([d.q.to_string(), p.birth.to_string(), p.lifetime.to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::io("<diagram output>", e))?;
    Ok(())
}

/// Diagrams plus the number of zero-lifetime pairs that were dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct VrResult {
    pub diagrams: Vec<PersistenceDiagram>,
    pub dropped: [usize; 2],
}

struct UnionFind {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            rank: vec![0; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            Ordering::Less => self.parent[ra] = rb,
            Ordering::Greater => self.parent[rb] = ra,
            Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
        true
    }
}

#[derive(Debug, Clone, Copy)]
struct Edge {
    diam: f64,
    a: u32,
    b: u32,
}

impl Edge {
    fn cmp_filtration(&self, other: &Self) -> Ordering {
        self.diam
            .total_cmp(&other.diam)
            .then(self.a.cmp(&other.a))
            .then(self.b.cmp(&other.b))
    }
}

#[derive(Debug, Clone, Copy)]
struct Triangle {
    diam: f64,
    v: [u32; 3],
}

impl PartialEq for Triangle {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Triangle {}

impl PartialOrd for Triangle {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Triangle {
    fn cmp(&self, other: &Self) -> Ordering {
        self.diam.total_cmp(&other.diam).then(self.v.cmp(&other.v))
    }
}

fn sorted3(a: u32, b: u32, c: u32) -> [u32; 3] {
    let mut v = [a, b, c];
    v.sort_unstable();
    v
}

/// Cofaces of edge `(a, b)` in increasing filtration-tie order
/// (ascending third vertex gives ascending lexicographic tuples).
fn cofaces<'a>(dist: &'a DistanceMatrix, e: &Edge) -> impl Iterator<Item = Triangle> + 'a {
    let (a, b, d) = (e.a as usize, e.b as usize, e.diam);
    let (ra, rb) = (dist.row(a), dist.row(b));
    let e = *e;
    (0..dist.size())
        .filter(move |&k| k != a && k != b)
        .map(move |k| Triangle {
            diam: d.max(ra[k]).max(rb[k]),
            v: sorted3(e.a, e.b, k as u32),
        })
}

type MinHeap = BinaryHeap<Reverse<Triangle>>;

fn pop_pivot(heap: &mut MinHeap) -> Option<Triangle> {
    loop {
        let Reverse(top) = heap.pop()?;
        match heap.peek() {
            Some(Reverse(next)) if *next == top => {
                heap.pop();
            }
            _ => return Some(top),
        }
    }
}

/// Longest edge of a triangle; ties go to the lexicographically lowest pair.
fn longest_edge(dist: &DistanceMatrix, t: &Triangle) -> (usize, usize) {
    let [a, b, c] = t.v.map(|x| x as usize);
    let mut best = (a, b);
    let mut best_d = dist.get(a, b);
    for (i, j) in [(a, c), (b, c)] {
        if dist.get(i, j) > best_d {
            best = (i, j);
            best_d = dist.get(i, j);
        }
    }
    best
}

pub fn vr_persistence(cloud: &PointCloud, max_dim: usize) -> Result<Vec<PersistenceDiagram>> {
    Ok(vr_persistence_capped(cloud, max_dim, DEFAULT_MAX_POINTS)?.diagrams)
}

pub fn vr_persistence_capped(
    cloud: &PointCloud,
    max_dim: usize,
    max_points: usize,
) -> Result<VrResult> {
    if cloud.is_empty() {
        return Err(Error::contract("persistence of an empty cloud"));
    }
    if max_dim > 1 {
        return Err(Error::config(format!(
            "Vietoris-Rips persistence is available in dimensions 0 and 1, not {max_dim}"
        )));
    }
    if cloud.len() > max_points {
        return Err(Error::config(format!(
            "cloud of {} points exceeds the Vietoris-Rips cap of {max_points}",
            cloud.len()
        )));
    }
    let dist = pairwise_distances(cloud)?;
    Ok(vr_from_distances(&dist, max_dim))
}

pub fn vr_from_distances(dist: &DistanceMatrix, max_dim: usize) -> VrResult {
    let n = dist.size();
    let mut edges = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for a in 0..n {
        for b in a + 1..n {
            edges.push(Edge {
                diam: dist.get(a, b),
                a: a as u32,
                b: b as u32,
            });
        }
    }
    edges.sort_unstable_by(Edge::cmp_filtration);

    let mut dropped = [0usize; 2];
    let mut uf = UnionFind::new(n);
    let mut in_tree = vec![false; edges.len()];
    let mut dim0 = Vec::with_capacity(n.saturating_sub(1));
    for (pos, e) in edges.iter().enumerate() {
        if uf.union(e.a as usize, e.b as usize) {
            in_tree[pos] = true;
            if e.diam > 0.0 {
                dim0.push(DiagramPoint {
                    birth: 0.0,
                    lifetime: e.diam,
                    birth_edge: None,
                    death_edge: (e.a as usize, e.b as usize),
                });
            } else {
                dropped[0] += 1;
            }
        }
    }
    let mut diagrams = vec![PersistenceDiagram { q: 0, points: dim0 }];
    if max_dim >= 1 {
        let (dim1, zero) = reduce_dim1(dist, &edges, &in_tree);
        dropped[1] = zero;
        diagrams.push(PersistenceDiagram { q: 1, points: dim1 });
    }
    VrResult { diagrams, dropped }
}

fn reduce_dim1(
    dist: &DistanceMatrix,
    edges: &[Edge],
    in_tree: &[bool],
) -> (Vec<DiagramPoint>, usize) {
    // pivot triangle -> edges (positions) of the reduced column's cochain
    let mut pivots: HashMap<[u32; 3], Vec<usize>> = HashMap::new();
    let mut points = Vec::new();
    let mut zero = 0usize;
    let mut heap: MinHeap = BinaryHeap::new();

    for col in (0..edges.len()).rev() {
        if in_tree[col] {
            continue;
        }
        let e = &edges[col];

        // apparent pair: smallest coface at the same diameter and unpaired
        if let Some(t) = cofaces(dist, e).find(|t| t.diam == e.diam) {
            if let std::collections::hash_map::Entry::Vacant(e) = pivots.entry(t.v) {
                e.insert(vec![col]);
                zero += 1;
                continue;
            }
        }

        heap.clear();
        heap.extend(cofaces(dist, e).map(Reverse));
        let mut cochain = vec![col];
        let pivot = loop {
            match pop_pivot(&mut heap) {
                None => break None,
                Some(p) => match pivots.get(&p.v) {
                    None => break Some(p),
                    Some(other) => {
                        heap.push(Reverse(p));
                        for &o in other {
                            heap.extend(cofaces(dist, &edges[o]).map(Reverse));
                        }
                        cochain.extend_from_slice(other);
                    }
                },
            }
        };
        let Some(pivot) = pivot else {
            continue; // essential class
        };
        if pivot.diam > e.diam {
            points.push(DiagramPoint {
                birth: e.diam,
                lifetime: pivot.diam - e.diam,
                birth_edge: Some((e.a as usize, e.b as usize)),
                death_edge: longest_edge(dist, &pivot),
            });
        } else {
            zero += 1;
        }
        cochain.sort_unstable();
        let mut reduced = Vec::with_capacity(cochain.len());
        for c in cochain {
            if reduced.last() == Some(&c) {
                reduced.pop();
            } else {
                reduced.push(c);
            }
        }
        pivots.insert(pivot.v, reduced);
    }
    (points, zero)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(v: &[[f64; 2]]) -> PointCloud {
        PointCloud::new(v.iter().map(|p| p.to_vec()).collect()).unwrap()
    }

    #[test]
    fn unit_square() {
        let d =
            vr_persistence(&cloud(&[[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]), 1).unwrap();
        assert_eq!(d[0].sorted_pairs(), vec![(0.0, 1.0); 3]);
        assert_eq!(d[1].len(), 1);
        let p = d[1].points[0];
        assert_eq!(p.birth, 1.0);
        assert!((p.lifetime - (2f64.sqrt() - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn dense_circle_has_one_big_cycle() {
        let pts: Vec<[f64; 2]> = (0..100)
            .map(|i| {
                let t = std::f64::consts::TAU * i as f64 / 100.0;
                [t.cos(), t.sin()]
            })
            .collect();
        let d = vr_persistence(&cloud(&pts), 1).unwrap();
        let big = d[1].points.iter().filter(|p| p.lifetime > 0.5).count();
        assert_eq!(big, 1);
    }

    #[test]
    fn single_point_and_cap() {
        let d = vr_persistence(&cloud(&[[0.0, 0.0]]), 1).unwrap();
        assert!(d[0].is_empty() && d[1].is_empty());
        let c = cloud(&[[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]]);
        assert!(matches!(
            vr_persistence_capped(&c, 1, 2),
            Err(Error::Config(_))
        ));
        assert!(vr_persistence(&c, 2).is_err());
    }

    #[test]
    fn duplicates_count_as_dropped_pairs() {
        let c = cloud(&[[0.0, 0.0], [0.0, 0.0], [1.0, 0.0]]);
        let r = vr_persistence_capped(&c, 0, 10).unwrap();
        assert_eq!(r.diagrams[0].len() + r.dropped[0], 2);
        assert_eq!(r.dropped[0], 1);
    }

    #[test]
    fn csv_export() {
        let d =
            vr_persistence(&cloud(&[[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]), 1).unwrap();
        let mut buf = Vec::new();
        write_diagrams_csv(&d, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "q,birth,lifetime");
        assert_eq!(lines.len(), 5);
        assert!(lines[4].starts_with("1,1,0.414"));
    }
}

//! Exact k-nearest-neighbour similarity graph over mean word vectors.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::text::{EmbeddingTable, Tweet};

pub const DEFAULT_K: usize = 10;
pub const DEFAULT_UNLABELED_CAP: usize = 50_000;
const LEAF_SIZE: usize = 16;

pub fn euclidean(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("euclidean distance between dims {} and {}", a.len(), b.len())));
    }
    Ok(euclidean_unchecked(a, b))
}

#[inline]
fn euclidean_unchecked(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone)]
enum KdNode {
    Leaf(Vec<usize>),
    Split {
        dim: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

/// Median-split k-d tree with buckets of up to 16 points.
#[derive(Debug, Clone)]
pub struct KdTree {
    dim: usize,
    points: Vec<f64>,
    nodes: Vec<KdNode>,
}

impl KdTree {
    pub fn build(points: &[Vec<f64>]) -> Result<Self> {
        let first = points.first().ok_or_else(|| Error::Data("k-d tree needs at least one point".into()))?;
        let dim = first.len();
        if dim == 0 {
            return Err(Error::Data("k-d tree points must have at least one coordinate".into()));
        }
        let mut flat = Vec::with_capacity(points.len() * dim);
        for (i, p) in points.iter().enumerate() {
            if p.len() != dim {
                return Err(Error::Shape(format!("point {i} has dim {}, expected {dim}", p.len())));
            }
            if let Some(c) = p.iter().position(|v| v.is_nan()) {
                return Err(Error::Data(format!("point {i} has NaN coordinate {c}")));
            }
            flat.extend_from_slice(p);
        }
        let mut tree = Self {
            dim,
            points: flat,
            nodes: Vec::new(),
        };
        let mut ids: Vec<usize> = (0..points.len()).collect();
        tree.build_node(&mut ids, 0);
        Ok(tree)
    }

    fn coord(&self, id: usize, dim: usize) -> f64 {
        self.points[id * self.dim + dim]
    }

    pub fn point(&self, id: usize) -> &[f64] {
        &self.points[id * self.dim..(id + 1) * self.dim]
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn build_node(&mut self, ids: &mut [usize], depth: usize) -> usize {
        if ids.len() <= LEAF_SIZE {
            self.nodes.push(KdNode::Leaf(ids.to_vec()));
            return self.nodes.len() - 1;
        }
        let dim = depth % self.dim;
        let mid = ids.len() / 2;
        ids.select_nth_unstable_by(mid, |&a, &b| {
            self.coord(a, dim).total_cmp(&self.coord(b, dim)).then(a.cmp(&b))
        });
        let value = self.coord(ids[mid], dim);
        let slot = self.nodes.len();
        self.nodes.push(KdNode::Leaf(Vec::new()));
        let (lo, hi) = ids.split_at_mut(mid);
        let left = self.build_node(lo, depth + 1);
        let right = self.build_node(hi, depth + 1);
        self.nodes[slot] = KdNode::Split { dim, value, left, right };
        slot
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[KdNode], i: usize) -> usize {
            match &nodes[i] {
                KdNode::Leaf(_) => 0,
                KdNode::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
            }
        }
        walk(&self.nodes, 0)
    }

    /// Every stored point id, in leaf order.
    pub fn leaf_ids(&self) -> Vec<usize> {
        self.nodes
            .iter()
            .filter_map(|n| match n {
                KdNode::Leaf(ids) => Some(ids.iter().copied()),
                _ => None,
            })
            .flatten()
            .collect()
    }

    /// The `k` nearest stored points to point `query`, excluding itself,
    /// sorted by `(distance, id)`. `k >= n` is truncated to `n - 1`.
    pub fn knn(&self, query: usize, k: usize) -> Vec<(usize, f64)> {
        let n = self.len();
        let k = if k >= n {
            log::warn!("k={k} with only {n} points; returning {} neighbours", n - 1);
            n - 1
        } else {
            k
        };
        self.knn_point(self.point(query), k, Some(query))
    }

    pub fn knn_point(&self, query: &[f64], k: usize, exclude: Option<usize>) -> Vec<(usize, f64)> {
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        if k > 0 {
            self.search(0, query, k, exclude, &mut best);
        }
        best.into_iter().map(|(d, id)| (id, d)).collect()
    }

    fn search(&self, node: usize, q: &[f64], k: usize, exclude: Option<usize>, best: &mut Vec<(f64, usize)>) {
        match &self.nodes[node] {
            KdNode::Leaf(ids) => {
                for &id in ids {
                    if Some(id) == exclude {
                        continue;
                    }
                    let d = euclidean_unchecked(q, self.point(id));
                    let cand = (d, id);
                    if best.len() < k || less(cand, best[best.len() - 1]) {
                        let pos = best.partition_point(|&b| less(b, cand));
                        best.insert(pos, cand);
                        best.truncate(k);
                    }
                }
            }
            KdNode::Split { dim, value, left, right } => {
                let diff = q[*dim] - value;
                let (near, far) = if diff < 0.0 { (*left, *right) } else { (*right, *left) };
                self.search(near, q, k, exclude, best);
                // Rounding in the squared-sum can make a point's computed
                // distance dip just below the plane distance; keep a margin so
                // the search stays exact.
                let worst = best.last().map_or(f64::INFINITY, |b| b.0);
                if best.len() < k || diff.abs() <= worst * (1.0 + 1e-12) + 1e-300 {
                    self.search(far, q, k, exclude, best);
                }
            }
        }
    }
}

#[inline]
fn less(a: (f64, usize), b: (f64, usize)) -> bool {
    a.0 < b.0 || (a.0 == b.0 && a.1 < b.1)
}

/// Which training pool a graph node came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Origin {
    SourceLabeled,
    SourceUnlabeled,
    TargetUnlabeled,
    #[default]
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct NodeMeta {
    pub origin: Origin,
    pub label: Option<usize>,
}

/// Directed kNN graph: each node lists its `k` nearest other nodes by
/// ascending `(distance, id)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityGraph {
    k: usize,
    dim: usize,
    adjacency: Vec<Vec<(usize, f64)>>,
    meta: Vec<NodeMeta>,
}

impl SimilarityGraph {
    pub fn from_points(points: &[Vec<f64>], meta: Vec<NodeMeta>, k: usize) -> Result<Self> {
        let n = points.len();
        if n < 2 {
            return Err(Error::Config(format!("similarity graph needs at least 2 nodes, got {n}")));
        }
        if k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if meta.len() != n {
            return Err(Error::Shape(format!("{} node records for {n} points", meta.len())));
        }
        let tree = KdTree::build(points)?;
        let k_eff = k.min(n - 1);
        if k_eff < k {
            log::warn!("k={k} with {n} nodes; using {k_eff} neighbours per node");
        }
        let adjacency = (0..n)
            .into_par_iter()
            .map(|i| tree.knn_point(tree.point(i), k_eff, Some(i)))
            .collect();
        Ok(Self {
            k: k_eff,
            dim: tree.dim,
            adjacency,
            meta,
        })
    }

    /// Graph over the mean word vectors of `tweets`, in the given order.
    pub fn build(tweets: &[Tweet], meta: Vec<NodeMeta>, table: &EmbeddingTable, k: usize) -> Result<Self> {
        let points = tweets.iter().map(|t| table.mean_vector(t)).collect::<Result<Vec<_>>>()?;
        Self::from_points(&points, meta, k)
    }

    pub fn len(&self) -> usize {
        self.adjacency.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adjacency.is_empty()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn neighbors(&self, i: usize) -> &[(usize, f64)] {
        &self.adjacency[i]
    }

    pub fn is_neighbor(&self, i: usize, j: usize) -> bool {
        self.adjacency[i].iter().any(|&(n, _)| n == j)
    }

    pub fn meta(&self) -> &[NodeMeta] {
        &self.meta
    }

    pub fn attach_meta(&mut self, meta: Vec<NodeMeta>) -> Result<()> {
        if meta.len() != self.len() {
            return Err(Error::Config(format!(
                "graph has {} nodes but {} node records were supplied",
                self.len(),
                meta.len()
            )));
        }
        self.meta = meta;
        Ok(())
    }

    pub fn mean_neighbor_distance(&self) -> f64 {
        let (sum, count) = self
            .adjacency
            .iter()
            .flatten()
            .fold((0.0, 0usize), |(s, c), &(_, d)| (s + d, c + 1));
        if count == 0 {
            0.0
        } else {
            sum / count as f64
        }
    }

    fn body(&self) -> String {
        let mut s = String::new();
        for (i, nbrs) in self.adjacency.iter().enumerate() {
            write!(s, "{i}:").unwrap();
            for (j, (n, d)) in nbrs.iter().enumerate() {
                let sep = if j == 0 { " " } else { "," };
                write!(s, "{sep}{n}:{d}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    /// SHA-256 of the adjacency lines.
    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(self.body().as_bytes()))
    }

    pub fn to_text(&self) -> String {
        let body = self.body();
        let checksum = hex::encode(Sha256::digest(body.as_bytes()));
        format!(
            "# n={} k={} d={} checksum={checksum}\n{body}",
            self.len(),
            self.k,
            self.dim
        )
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Parses a graph file and verifies its checksum. Node records are left
    /// unknown; see [`SimilarityGraph::attach_meta`].
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let (header, body) = text
            .split_once('\n')
            .ok_or_else(|| Error::format(path, 1, "missing graph header"))?;
        let mut n = None;
        let mut k = None;
        let mut d = None;
        let mut checksum = None;
        for field in header.trim_start_matches('#').split_whitespace() {
            match field.split_once('=') {
                Some(("n", v)) => n = v.parse::<usize>().ok(),
                Some(("k", v)) => k = v.parse::<usize>().ok(),
                Some(("d", v)) => d = v.parse::<usize>().ok(),
                Some(("checksum", v)) => checksum = Some(v.to_owned()),
                _ => return Err(Error::format(path, 1, format!("unexpected header field `{field}`"))),
            }
        }
        let (n, k, dim, checksum) = match (n, k, d, checksum) {
            (Some(n), Some(k), Some(d), Some(c)) => (n, k, d, c),
            _ => return Err(Error::format(path, 1, "header needs n, k, d and checksum")),
        };
        let actual = hex::encode(Sha256::digest(body.as_bytes()));
        if actual != checksum {
            return Err(Error::Integrity(format!("{}: graph checksum mismatch", path.display())));
        }
        let mut adjacency = Vec::with_capacity(n);
        for (i, line) in body.lines().enumerate() {
            let lineno = i + 2;
            let (id, rest) = line
                .split_once(':')
                .ok_or_else(|| Error::format(path, lineno, "expected `node: n1:d1,…`"))?;
            if id.trim().parse::<usize>().ok() != Some(i) {
                return Err(Error::format(path, lineno, format!("expected node id {i}")));
            }
            let mut nbrs = Vec::new();
            for item in rest.trim().split(',').filter(|s| !s.is_empty()) {
                let parsed = item
                    .split_once(':')
                    .and_then(|(a, b)| Some((a.parse::<usize>().ok()?, b.parse::<f64>().ok()?)));
                match parsed {
                    Some((j, dist)) if j < n => nbrs.push((j, dist)),
                    _ => return Err(Error::format(path, lineno, format!("bad neighbour `{item}`"))),
                }
            }
            adjacency.push(nbrs);
        }
        if adjacency.len() != n {
            return Err(Error::format(path, 1, format!("header says {n} nodes, found {}", adjacency.len())));
        }
        Ok(Self {
            k,
            dim,
            adjacency,
            meta: vec![NodeMeta::default(); n],
        })
    }
}

/// Graph node list: source labeled first, then a seeded subsample of source
/// unlabeled (at most `unlabeled_cap`), then optionally target unlabeled
/// (same cap).
#[derive(Debug, Clone)]
pub struct GraphNodes {
    pub tweets: Vec<Tweet>,
    pub meta: Vec<NodeMeta>,
}

impl GraphNodes {
    pub fn assemble<R: Rng + ?Sized>(
        labeled: &[Tweet],
        source_unlabeled: &[Tweet],
        target_unlabeled: Option<&[Tweet]>,
        unlabeled_cap: usize,
        rng: &mut R,
    ) -> Self {
        let mut tweets = Vec::new();
        let mut meta = Vec::new();
        for t in labeled {
            tweets.push(t.clone());
            meta.push(NodeMeta {
                origin: Origin::SourceLabeled,
                label: t.label,
            });
        }
        let mut add_pool = |pool: &[Tweet], origin: Origin, rng: &mut R| {
            for t in subsample(pool, unlabeled_cap, rng) {
                tweets.push(t.clone().unlabeled());
                meta.push(NodeMeta { origin, label: None });
            }
        };
        add_pool(source_unlabeled, Origin::SourceUnlabeled, rng);
        if let Some(target) = target_unlabeled {
            add_pool(target, Origin::TargetUnlabeled, rng);
        }
        Self { tweets, meta }
    }
}

/// At most `cap` items, drawn without replacement and kept in original order.
pub fn subsample<'a, T, R: Rng + ?Sized>(pool: &'a [T], cap: usize, rng: &mut R) -> Vec<&'a T> {
    if pool.len() <= cap {
        return pool.iter().collect();
    }
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    idx.shuffle(rng);
    idx.truncate(cap);
    idx.sort_unstable();
    idx.into_iter().map(|i| &pool[i]).collect()
}

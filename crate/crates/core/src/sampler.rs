//! Positive/negative context sampling over graph neighbourhoods and labels.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::SimilarityGraph;

/// Above this many nodes negative graph samples are drawn by rejection
/// instead of enumerating the non-neighbour pool.
const ENUMERATION_LIMIT: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextKind {
    Graph,
    Label,
}

impl ContextKind {
    fn other(self) -> Self {
        match self {
            Self::Graph => Self::Label,
            Self::Label => Self::Graph,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextSample {
    pub input: usize,
    pub context: usize,
    /// `+1` or `-1`.
    pub gamma: i8,
    pub kind: ContextKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    /// Probability of drawing a positive sample.
    pub rho1: f64,
    /// Probability of drawing label context for a labeled node.
    pub rho2: f64,
    pub samples_per_node: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            rho1: 5.0 / 6.0,
            rho2: 0.3,
            samples_per_node: 2,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("rho1", self.rho1), ("rho2", self.rho2)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} must lie strictly inside (0, 1), got {v}")));
            }
        }
        if self.samples_per_node == 0 {
            return Err(Error::Config("samples_per_node must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ContextSampler<'g> {
    graph: &'g SimilarityGraph,
    labels: Vec<Option<usize>>,
    by_class: Vec<Vec<usize>>,
    labeled_count: usize,
    cfg: SamplerConfig,
}

impl<'g> ContextSampler<'g> {
    /// Node labels are taken from the graph's node records.
    pub fn new(graph: &'g SimilarityGraph, cfg: SamplerConfig) -> Result<Self> {
        cfg.validate()?;
        let labels: Vec<Option<usize>> = graph.meta().iter().map(|m| m.label).collect();
        let classes = labels.iter().flatten().max().map_or(0, |&m| m + 1);
        let mut by_class = vec![Vec::new(); classes];
        for (i, l) in labels.iter().enumerate() {
            if let Some(c) = l {
                by_class[*c].push(i);
            }
        }
        let labeled_count = by_class.iter().map(Vec::len).sum();
        Ok(Self {
            graph,
            labels,
            by_class,
            labeled_count,
            cfg,
        })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.cfg
    }

    /// One `(j, γ)` draw for node `i`. When the requested pool is empty the
    /// other kind is tried first, then the opposite polarity.
    pub fn sample<R: Rng + ?Sized>(&self, i: usize, rng: &mut R) -> Result<ContextSample> {
        let n = self.graph.len();
        if i >= n {
            return Err(Error::Index {
                index: i,
                len: n,
                context: "context sampler node",
            });
        }
        let kind = if self.labels[i].is_some() && rng.gen::<f64>() < self.cfg.rho2 {
            ContextKind::Label
        } else {
            ContextKind::Graph
        };
        let gamma: i8 = if rng.gen::<f64>() < self.cfg.rho1 { 1 } else { -1 };
        for (k, g) in [(kind, gamma), (kind.other(), gamma), (kind, -gamma), (kind.other(), -gamma)] {
            if let Some(j) = self.draw(i, k, g, rng) {
                return Ok(ContextSample {
                    input: i,
                    context: j,
                    gamma: g,
                    kind: k,
                });
            }
        }
        Err(Error::Sampler(format!("no context pool available for node {i}")))
    }

    fn draw<R: Rng + ?Sized>(&self, i: usize, kind: ContextKind, gamma: i8, rng: &mut R) -> Option<usize> {
        match kind {
            ContextKind::Graph => {
                let nbrs = self.graph.neighbors(i);
                if gamma > 0 {
                    return nbrs.choose(rng).map(|&(j, _)| j);
                }
                let n = self.graph.len();
                if nbrs.len() + 1 >= n {
                    return None;
                }
                if n >= ENUMERATION_LIMIT {
                    loop {
                        let j = rng.gen_range(0..n);
                        if j != i && !self.graph.is_neighbor(i, j) {
                            return Some(j);
                        }
                    }
                }
                let pool: Vec<usize> = (0..n).filter(|&j| j != i && !self.graph.is_neighbor(i, j)).collect();
                pool.choose(rng).copied()
            }
            ContextKind::Label => {
                let y = self.labels[i]?;
                let same = &self.by_class[y];
                if gamma > 0 {
                    let count = same.len() - 1;
                    if count == 0 {
                        return None;
                    }
                    let pos = same.binary_search(&i).expect("labeled node is in its class list");
                    let r = rng.gen_range(0..count);
                    return Some(same[if r >= pos { r + 1 } else { r }]);
                }
                let count = self.labeled_count - same.len();
                if count == 0 {
                    return None;
                }
                let mut r = rng.gen_range(0..count);
                for (c, members) in self.by_class.iter().enumerate() {
                    if c == y {
                        continue;
                    }
                    if r < members.len() {
                        return Some(members[r]);
                    }
                    r -= members.len();
                }
                unreachable!("index within the different-label pool")
            }
        }
    }

    /// Every node visited `samples_per_node` times in shuffled order, split
    /// into batches of `batch_size` (the last may be shorter).
    pub fn epoch_batches<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Result<Vec<Vec<ContextSample>>> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        let n = self.graph.len();
        let mut order: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat(i).take(self.cfg.samples_per_node)).collect();
        order.shuffle(rng);
        order
            .chunks(batch_size)
            .map(|chunk| chunk.iter().map(|&i| self.sample(i, rng)).collect())
            .collect()
    }
}

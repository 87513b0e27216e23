//! Grid runner: modes × labeled caps × seeds over one source/target corpus
//! set, with a metric row and a loss-curve file per cell.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::graph::{subsample, GraphNodes, SimilarityGraph};
use crate::metrics::{fmt4, fmt_auc, EvalResult};
use crate::model::{Model, ModelConfig};
use crate::rng::SeedStreams;
use crate::text::{read_corpus, Domain, EmbeddingTable, LabelSet, Preprocessor, Tweet, Vocab};
use crate::trainer::{evaluate_tweets, train, GraphInput, Mode, TrainConfig, TrainData, TrainReport};

/// Environment variable holding the number of parallel grid workers.
pub const WORKERS_ENV: &str = "TWEETSHIFT_WORKERS";

/// Labeled-set budget for one grid column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Cap {
    Count(usize),
    All,
}

impl Cap {
    pub fn limit(self, n: usize) -> usize {
        match self {
            Cap::Count(c) => c.min(n),
            Cap::All => n,
        }
    }
}

impl fmt::Display for Cap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cap::Count(c) => write!(f, "{c}"),
            Cap::All => f.write_str("all"),
        }
    }
}

impl FromStr for Cap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            return Ok(Cap::All);
        }
        match s.parse::<usize>() {
            Ok(0) | Err(_) => Err(Error::Config(format!("cap must be a positive integer or `all`, got `{s}`"))),
            Ok(c) => Ok(Cap::Count(c)),
        }
    }
}

impl Serialize for Cap {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Cap::Count(c) => s.serialize_u64(*c as u64),
            Cap::All => s.serialize_str("all"),
        }
    }
}

impl<'de> Deserialize<'de> for Cap {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(i64),
            S(String),
        }
        let s = match Raw::deserialize(d)? {
            Raw::N(n) => n.to_string(),
            Raw::S(s) => s,
        };
        s.parse().map_err(serde::de::Error::custom)
    }
}

fn default_domain_source() -> Domain {
    Domain::Source
}

fn default_domain_target() -> Domain {
    Domain::Target
}

fn default_unlabeled_cap() -> usize {
    50_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub labeled: PathBuf,
    pub source_unlabeled: Option<PathBuf>,
    pub target_unlabeled: Option<PathBuf>,
    pub dev: PathBuf,
    pub test: PathBuf,
    /// word2vec text file; rows for words it lacks are drawn at random.
    pub embeddings: Option<PathBuf>,
    /// Dimension of a fully random table when no embedding file is given.
    #[serde(default)]
    pub embedding_dim: Option<usize>,
    #[serde(default)]
    pub labels: Option<Vec<String>>,
    #[serde(default = "default_domain_source")]
    pub dev_domain: Domain,
    #[serde(default = "default_domain_target")]
    pub test_domain: Domain,
    /// Upper bound on each unlabeled pool, for the graph and the adversary.
    #[serde(default = "default_unlabeled_cap")]
    pub unlabeled_cap: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphSpec {
    pub k: usize,
    /// Also place target unlabeled tweets in the graph.
    pub include_target: bool,
}

impl Default for GraphSpec {
    fn default() -> Self {
        Self { k: 10, include_target: false }
    }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub modes: Vec<Mode>,
    pub caps: Vec<Cap>,
    pub seeds: Vec<u64>,
    pub data: DataSpec,
    #[serde(default)]
    pub graph: GraphSpec,
    #[serde(default)]
    pub model: ModelConfig,
    /// `mode` and `seed` are overwritten per cell.
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_true")]
    pub save_checkpoints: bool,
}

impl ExperimentSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Config(format!("experiment spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    /// Reads a spec file; relative data paths are resolved against its
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut spec = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let d = &mut spec.data;
        fix(&mut d.labeled);
        fix(&mut d.dev);
        fix(&mut d.test);
        for p in [&mut d.source_unlabeled, &mut d.target_unlabeled, &mut d.embeddings].into_iter().flatten() {
            fix(p);
        }
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.modes.is_empty() {
            return Err(Error::Config("experiment lists no modes".into()));
        }
        if self.caps.is_empty() {
            return Err(Error::Config("experiment lists no caps".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("experiment lists no seeds".into()));
        }
        let needs_source = self.modes.iter().any(|m| m.uses_graph() || *m == Mode::SelfTraining);
        if needs_source && self.data.source_unlabeled.is_none() {
            return Err(Error::Config("graph and self-training modes need data.source_unlabeled".into()));
        }
        let needs_target =
            self.modes.iter().any(|m| m.uses_adversary()) || (self.graph.include_target && self.modes.iter().any(|m| m.uses_graph()));
        if needs_target && self.data.target_unlabeled.is_none() {
            return Err(Error::Config("adversarial modes need data.target_unlabeled".into()));
        }
        if self.data.embeddings.is_none() && self.data.embedding_dim.is_none() {
            return Err(Error::Config("set data.embeddings or data.embedding_dim".into()));
        }
        if self.graph.k == 0 {
            return Err(Error::Config("graph.k must be at least 1".into()));
        }
        if self.data.unlabeled_cap == 0 {
            return Err(Error::Config("data.unlabeled_cap must be at least 1".into()));
        }
        self.model.validate()?;
        self.train.validate()
    }

    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &mode in &self.modes {
            for &cap in &self.caps {
                for &seed in &self.seeds {
                    out.push(Cell { mode, cap, seed });
                }
            }
        }
        out
    }

    fn label_set(&self) -> Result<LabelSet> {
        match &self.data.labels {
            Some(names) => LabelSet::new(names.clone()),
            None => Ok(LabelSet::default()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Cell {
    pub mode: Mode,
    pub cap: Cap,
    pub seed: u64,
}

impl Cell {
    pub fn key(&self) -> String {
        format!("{}/cap={}/seed={}", self.mode, self.cap, self.seed)
    }

    /// Key usable as a file stem.
    pub fn file_stem(&self) -> String {
        format!("{}_cap-{}_seed-{}", self.mode.as_str().replace('+', "-"), self.cap, self.seed)
    }
}

/// Every tweet set an experiment reads.
#[derive(Debug, Clone)]
pub struct Corpora {
    pub labels: LabelSet,
    pub labeled: Vec<Tweet>,
    pub source_unlabeled: Vec<Tweet>,
    pub target_unlabeled: Vec<Tweet>,
    pub dev: Vec<Tweet>,
    pub test: Vec<Tweet>,
}

impl Corpora {
    pub fn load(data: &DataSpec, labels: LabelSet) -> Result<Self> {
        let pre = Preprocessor::default();
        let read = |p: &Path, d: Domain, keep_empty: bool| read_corpus(p, d, &labels, &pre, keep_empty).map(|c| c.tweets);
        let labeled = read(&data.labeled, Domain::Source, false)?;
        if let Some(t) = labeled.iter().find(|t| t.label.is_none()) {
            return Err(Error::Config(format!("{}: `{}` has no label", data.labeled.display(), t.id)));
        }
        let source_unlabeled = match &data.source_unlabeled {
            Some(p) => strip(read(p, Domain::Source, false)?),
            None => Vec::new(),
        };
        let target_unlabeled = match &data.target_unlabeled {
            Some(p) => strip(read(p, Domain::Target, false)?),
            None => Vec::new(),
        };
        let dev = read(&data.dev, data.dev_domain, true)?;
        let test = read(&data.test, data.test_domain, true)?;
        for (set, path) in [(&dev, &data.dev), (&test, &data.test)] {
            if let Some(t) = set.iter().find(|t| t.label.is_none()) {
                return Err(Error::Config(format!("{}: evaluation tweet `{}` has no label", path.display(), t.id)));
            }
        }
        Ok(Self {
            labels,
            labeled,
            source_unlabeled,
            target_unlabeled,
            dev,
            test,
        })
    }

    fn all(&self) -> impl Iterator<Item = &Tweet> {
        self.labeled
            .iter()
            .chain(&self.source_unlabeled)
            .chain(&self.target_unlabeled)
            .chain(&self.dev)
            .chain(&self.test)
    }
}

fn strip(tweets: Vec<Tweet>) -> Vec<Tweet> {
    tweets.into_iter().map(Tweet::unlabeled).collect()
}

/// Indices of the labeled instances kept under `cap`. A single seeded
/// permutation is truncated, so smaller caps are subsets of larger ones.
/// The result is in corpus order.
pub fn labeled_subset(n: usize, cap: Cap, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut SeedStreams::new(seed).stream("subsample/labeled"));
    idx.truncate(cap.limit(n));
    idx.sort_unstable();
    idx
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub cell: Cell,
    pub test: EvalResult,
    pub report: TrainReport,
    pub labeled_ids: Vec<String>,
    pub graph_checksum: Option<String>,
}

impl CellResult {
    pub fn row(&self) -> String {
        let r = &self.test;
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{:.1}",
            self.cell.key(),
            self.cell.mode,
            self.cell.cap,
            self.cell.seed,
            fmt_auc(r.auc),
            fmt4(r.precision),
            fmt4(r.recall),
            fmt4(r.f1),
            self.report.best_epoch,
            self.report.wall_clock_secs
        )
    }
}

pub const METRICS_HEADER: &str = "cell\tmode\tcap\tseed\tauc\tprecision\trecall\tf1\tbest_epoch\twall_clock_s";

pub fn metrics_tsv(results: &[CellResult]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in results {
        s.push_str(&r.row());
        s.push('\n');
    }
    s
}

/// Prepared inputs shared by all cells.
pub struct Experiment {
    pub spec: ExperimentSpec,
    pub corpora: Corpora,
    vocab: Vocab,
}

impl Experiment {
    pub fn new(spec: ExperimentSpec) -> Result<Self> {
        spec.validate()?;
        let corpora = Corpora::load(&spec.data, spec.label_set()?)?;
        if corpora.labeled.is_empty() {
            return Err(Error::Config("no labeled training instances".into()));
        }
        if spec.model.num_classes != corpora.labels.len() {
            return Err(Error::Config(format!(
                "model.num_classes is {} but {} labels are defined",
                spec.model.num_classes,
                corpora.labels.len()
            )));
        }
        let vocab = Vocab::build(corpora.all())?;
        Ok(Self { spec, corpora, vocab })
    }

    /// Embedding table for a seed; out-of-vocabulary rows come from the
    /// seed's `embeddings` stream.
    pub fn table(&self, seed: u64) -> Result<EmbeddingTable> {
        let mut rng = SeedStreams::new(seed).stream("embeddings");
        match (&self.spec.data.embeddings, self.spec.data.embedding_dim) {
            (Some(p), _) => EmbeddingTable::load_word2vec(p, self.vocab.clone(), &mut rng),
            (None, Some(d)) => EmbeddingTable::random(self.vocab.clone(), d, &mut rng),
            (None, None) => Err(Error::Config("set data.embeddings or data.embedding_dim".into())),
        }
    }

    fn labeled_for(&self, cap: Cap, seed: u64) -> Vec<Tweet> {
        labeled_subset(self.corpora.labeled.len(), cap, seed)
            .into_iter()
            .map(|i| self.corpora.labeled[i].clone())
            .collect()
    }

    fn unlabeled_pools(&self, seed: u64) -> (Vec<Tweet>, Vec<Tweet>) {
        let streams = SeedStreams::new(seed);
        let cap = self.spec.data.unlabeled_cap;
        let s = subsample(&self.corpora.source_unlabeled, cap, &mut streams.stream("subsample/source-unlabeled"));
        let t = subsample(&self.corpora.target_unlabeled, cap, &mut streams.stream("subsample/target-unlabeled"));
        (s.into_iter().cloned().collect(), t.into_iter().cloned().collect())
    }

    /// Node list and graph for one (cap, seed) pair.
    pub fn build_graph(&self, cap: Cap, seed: u64, table: &EmbeddingTable) -> Result<(GraphNodes, SimilarityGraph)> {
        let labeled = self.labeled_for(cap, seed);
        let (source, target) = self.unlabeled_pools(seed);
        let target = self.spec.graph.include_target.then_some(target.as_slice());
        // Pools are already capped; the generous cap keeps them whole.
        let nodes = GraphNodes::assemble(&labeled, &source, target, usize::MAX, &mut SeedStreams::new(seed).stream("subsample/graph"));
        let graph = SimilarityGraph::build(&nodes.tweets, nodes.meta.clone(), table, self.spec.graph.k)?;
        Ok((nodes, graph))
    }

    pub fn run_cell(&self, cell: Cell, table: &EmbeddingTable, graph: Option<&(GraphNodes, SimilarityGraph)>) -> Result<(CellResult, Model)> {
        let labeled = self.labeled_for(cell.cap, cell.seed);
        let (source, target) = self.unlabeled_pools(cell.seed);
        let cfg = TrainConfig {
            mode: cell.mode,
            seed: cell.seed,
            ..self.spec.train.clone()
        };
        let data = TrainData {
            labeled: &labeled,
            source_unlabeled: &source,
            target_unlabeled: &target,
            dev: &self.corpora.dev,
        };
        let graph = graph.filter(|_| cell.mode.uses_graph());
        let graph_input = graph.map(|(n, g)| GraphInput { graph: g, nodes: &n.tweets });
        log::info!("cell {}: {} labeled", cell.key(), labeled.len());
        let outcome = train(self.spec.model.clone(), table.clone(), &cfg, data, graph_input)?;
        let test = evaluate_tweets(&outcome.model, &self.corpora.test)?;
        log::info!("cell {}: test F1 {}", cell.key(), fmt4(test.f1));
        let result = CellResult {
            cell,
            test,
            report: outcome.report,
            labeled_ids: labeled.iter().map(|t| t.id.clone()).collect(),
            graph_checksum: graph.map(|(_, g)| g.checksum()),
        };
        Ok((result, outcome.model))
    }

    /// Runs every cell on `workers` threads and writes `metrics.tsv`,
    /// `curves/<cell>.tsv` and (optionally) `checkpoints/<cell>.json` under
    /// `out`. Rows follow grid order regardless of scheduling.
    pub fn run(&self, out: &Path, workers: usize) -> Result<Vec<CellResult>> {
        let cells = self.spec.cells();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
        fs::create_dir_all(out.join("curves")).map_err(|e| Error::io(out, e))?;
        if self.spec.save_checkpoints {
            fs::create_dir_all(out.join("checkpoints")).map_err(|e| Error::io(out, e))?;
        }
        let seeds: Vec<u64> = {
            let mut s = self.spec.seeds.clone();
            s.sort_unstable();
            s.dedup();
            s
        };
        let results = pool.install(|| -> Result<Vec<CellResult>> {
            let tables: BTreeMap<u64, EmbeddingTable> =
                seeds.par_iter().map(|&s| self.table(s).map(|t| (s, t))).collect::<Result<_>>()?;
            let mut wanted: Vec<(Cap, u64)> = cells.iter().filter(|c| c.mode.uses_graph()).map(|c| (c.cap, c.seed)).collect();
            wanted.sort_unstable();
            wanted.dedup();
            let graphs: BTreeMap<(Cap, u64), (GraphNodes, SimilarityGraph)> = wanted
                .par_iter()
                .map(|&(cap, seed)| self.build_graph(cap, seed, &tables[&seed]).map(|g| ((cap, seed), g)))
                .collect::<Result<_>>()?;
            cells
                .par_iter()
                .map(|cell| {
                    let (result, model) = self.run_cell(*cell, &tables[&cell.seed], graphs.get(&(cell.cap, cell.seed)))?;
                    let stem = cell.file_stem();
                    let curves = out.join("curves").join(format!("{stem}.tsv"));
                    fs::write(&curves, result.report.curves_tsv()).map_err(|e| Error::io(&curves, e))?;
                    if self.spec.save_checkpoints {
                        model
                            .to_checkpoint(result.graph_checksum.clone(), cell.seed)
                            .write(&out.join("checkpoints").join(format!("{stem}.json")))?;
                    }
                    Ok(result)
                })
                .collect()
        })?;
        let path = out.join("metrics.tsv");
        fs::write(&path, metrics_tsv(&results)).map_err(|e| Error::io(&path, e))?;
        Ok(results)
    }
}

/// Worker count from the environment, defaulting to one.
pub fn workers_from_env() -> usize {
    std::env::var(WORKERS_ENV).ok().and_then(|v| v.parse().ok()).filter(|&n| n > 0).unwrap_or(1)
}

/// Loads `spec_path` and runs the grid into `out`.
pub fn run_experiment(spec_path: &Path, out: &Path, workers: usize) -> Result<Vec<CellResult>> {
    let spec = ExperimentSpec::load(spec_path)?;
    Experiment::new(spec)?.run(out, workers)
}

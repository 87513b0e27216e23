//! The interleaved three-loop training schedule, early stopping and the
//! self-training baseline.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdaDelta, AdaDeltaConfig, Group, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::graph::SimilarityGraph;
use crate::metrics::{evaluate, EvalResult};
use crate::model::{argmax, Example, LossWeights, Model, ModelConfig};
use crate::rng::{Rng, SeedStreams};
use crate::sampler::{ContextSampler, SamplerConfig};
use crate::text::{EmbeddingTable, Tweet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "supervised")]
    Supervised,
    #[serde(rename = "self-training")]
    SelfTraining,
    #[serde(rename = "semisup")]
    Semisup,
    #[serde(rename = "adversarial")]
    Adversarial,
    #[serde(rename = "semisup+adversarial")]
    SemisupAdversarial,
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::Supervised,
        Mode::SelfTraining,
        Mode::Semisup,
        Mode::Adversarial,
        Mode::SemisupAdversarial,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Supervised => "supervised",
            Mode::SelfTraining => "self-training",
            Mode::Semisup => "semisup",
            Mode::Adversarial => "adversarial",
            Mode::SemisupAdversarial => "semisup+adversarial",
        }
    }

    pub fn uses_graph(self) -> bool {
        matches!(self, Mode::Semisup | Mode::SemisupAdversarial)
    }

    pub fn uses_adversary(self) -> bool {
        matches!(self, Mode::Adversarial | Mode::SemisupAdversarial)
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub lr_classification: f64,
    pub lr_semisup: f64,
    pub lr_adversarial: f64,
    pub weights: LossWeights,
    pub seed: u64,
    pub self_train_threshold: f64,
    pub sampler: SamplerConfig,
    pub adadelta: AdaDeltaConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Supervised,
            max_epochs: 200,
            patience: 25,
            batch_size: 32,
            lr_classification: 0.1,
            lr_semisup: 0.001,
            lr_adversarial: 1.0,
            weights: LossWeights::default(),
            seed: 0,
            self_train_threshold: 0.75,
            sampler: SamplerConfig::default(),
            adadelta: AdaDeltaConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be at least 1".into()));
        }
        if self.patience >= self.max_epochs {
            return Err(Error::Config(format!(
                "patience ({}) must be smaller than max_epochs ({})",
                self.patience, self.max_epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        for (name, lr) in [
            ("lr_classification", self.lr_classification),
            ("lr_semisup", self.lr_semisup),
            ("lr_adversarial", self.lr_adversarial),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        self.weights.validate()?;
        self.sampler.validate()
    }
}

/// Training inputs. `dev` must be labeled.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub labeled: &'a [Tweet],
    pub source_unlabeled: &'a [Tweet],
    pub target_unlabeled: &'a [Tweet],
    pub dev: &'a [Tweet],
}

/// The similarity graph with its node tweets in graph order.
#[derive(Debug, Clone, Copy)]
pub struct GraphInput<'a> {
    pub graph: &'a SimilarityGraph,
    pub nodes: &'a [Tweet],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_c: f64,
    pub loss_g: Option<f64>,
    pub loss_d: Option<f64>,
    pub dev_f1: f64,
    /// Optimizer steps taken in this epoch, across all loops.
    pub steps: usize,
    pub best: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub mode: Mode,
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_dev_f1: f64,
    pub labeled_used: usize,
    pub pseudo_labeled: Option<usize>,
    /// Not part of any reproducibility comparison.
    pub wall_clock_secs: f64,
}

impl TrainReport {
    pub fn curves_tsv(&self) -> String {
        use crate::metrics::fmt4;
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_owned(), fmt4);
        let mut s = String::from("epoch\tloss_c\tloss_g\tloss_d\tdev_f1\tsteps\tbest\n");
        for r in &self.epochs {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                r.epoch,
                fmt4(r.loss_c),
                opt(r.loss_g),
                opt(r.loss_d),
                fmt4(r.dev_f1),
                r.steps,
                if r.best { "*" } else { "" }
            ));
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LoopStats {
    pub mean_loss: f64,
    pub steps: usize,
}

pub struct TrainOutcome {
    pub model: Model,
    pub report: TrainReport,
}

/// One training run with its optimizer state and random streams. Each loop
/// of the schedule is exposed so it can be driven and inspected alone.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    model: Model,
    opt: AdaDelta,
    labeled: Vec<Example>,
    adversary_pool: Vec<Example>,
    dev: Vec<Example>,
    nodes: Vec<Example>,
    sampler: Option<ContextSampler<'a>>,
    rng_sampler: Rng,
    rng_dropout: Rng,
    rng_shuffle: Rng,
}

impl<'a> Trainer<'a> {
    pub fn new(
        model_cfg: ModelConfig,
        table: EmbeddingTable,
        cfg: &TrainConfig,
        data: TrainData<'_>,
        graph: Option<GraphInput<'a>>,
    ) -> Result<Self> {
        cfg.validate()?;
        let mode = cfg.mode;
        if data.labeled.is_empty() {
            return Err(Error::Config("no labeled training instances".into()));
        }
        if data.dev.is_empty() {
            return Err(Error::Config("an early-stopping dev set is required".into()));
        }
        if data.dev.iter().any(|t| t.label.is_none()) {
            return Err(Error::Config("dev set contains unlabeled instances".into()));
        }
        if let Some(t) = data.labeled.iter().find(|t| t.label.is_none()) {
            return Err(Error::Config(format!("labeled training instance `{}` has no label", t.id)));
        }
        if mode.uses_graph() && graph.is_none() {
            return Err(Error::Config(format!("mode {mode} needs a similarity graph")));
        }
        if mode.uses_adversary() && data.target_unlabeled.is_empty() {
            return Err(Error::Config(format!("mode {mode} needs target-domain unlabeled data")));
        }
        let graph = if mode.uses_graph() { graph } else { None };
        if let Some(g) = &graph {
            if g.graph.len() != g.nodes.len() {
                return Err(Error::Config(format!(
                    "graph has {} nodes but {} node tweets were given",
                    g.graph.len(),
                    g.nodes.len()
                )));
            }
        }
        let streams = SeedStreams::new(cfg.seed);
        let model_cfg = ModelConfig {
            use_semi_branch: mode.uses_graph(),
            ..model_cfg
        };
        let model = Model::new(model_cfg, table, graph.map_or(0, |g| g.graph.len()), &mut streams.stream("init"))?;
        let opt = AdaDelta::new(cfg.adadelta, model.params());
        let to_examples = |tweets: &[Tweet]| -> Vec<Example> { tweets.iter().map(|t| model.example(t)).collect() };
        let labeled = to_examples(data.labeled);
        let dev = to_examples(data.dev);
        let adversary_pool = if mode.uses_adversary() {
            let mut pool = to_examples(data.source_unlabeled);
            pool.extend(to_examples(data.target_unlabeled));
            pool
        } else {
            Vec::new()
        };
        let (nodes, sampler) = match graph {
            Some(g) => (to_examples(g.nodes), Some(ContextSampler::new(g.graph, cfg.sampler)?)),
            None => (Vec::new(), None),
        };
        Ok(Self {
            cfg: cfg.clone(),
            model,
            opt,
            labeled,
            adversary_pool,
            dev,
            nodes,
            sampler,
            rng_sampler: streams.stream("sampler"),
            rng_dropout: streams.stream("dropout"),
            rng_shuffle: streams.stream("shuffle"),
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    fn batches(&mut self, n: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.rng_shuffle);
        order.chunks(self.cfg.batch_size).map(<[usize]>::to_vec).collect()
    }

    fn apply(&mut self, tape: &mut Tape, loss: crate::autodiff::Var, groups: &[Group], lr: f64) -> Result<()> {
        tape.backward(loss)?;
        let store = self.model.params_mut();
        store.zero_grads();
        tape.accumulate_param_grads(store);
        self.opt.step(store, groups, lr)
    }

    /// Loop 1: context prediction over sampled `(i, j, γ)` batches; steps
    /// `λ_g L_G` on the shared and context parameters.
    pub fn semisup_epoch(&mut self) -> Result<LoopStats> {
        let Some(sampler) = &self.sampler else {
            return Ok(LoopStats::default());
        };
        let batches = sampler.epoch_batches(self.cfg.batch_size, &mut self.rng_sampler)?;
        let mut total = 0.0;
        for batch in &batches {
            let mut tape = Tape::new();
            let lg = self.model.context_loss(&mut tape, &self.nodes, batch, true, &mut self.rng_dropout)?;
            total += tape.scalar(lg);
            let scaled = tape.scale(lg, self.cfg.weights.lambda_g);
            self.apply(&mut tape, scaled, &[Group::Shared, Group::Semisup], self.cfg.lr_semisup)?;
        }
        Ok(LoopStats {
            mean_loss: total / batches.len().max(1) as f64,
            steps: batches.len(),
        })
    }

    /// Loop 2: classification on labeled batches, plus the weighted
    /// adversary loss on the same batch in adversarial modes, as one step.
    /// Returns the classification and (if enabled) domain loss means.
    pub fn supervised_epoch(&mut self) -> Result<(LoopStats, Option<f64>)> {
        let adversarial = self.cfg.mode.uses_adversary();
        let mut groups = vec![Group::Shared, Group::Supervised];
        if self.model.config().use_semi_branch {
            groups.push(Group::Semisup);
        }
        if adversarial {
            groups.push(Group::Domain);
        }
        let batches = self.batches(self.labeled.len());
        let (mut lc_sum, mut ld_sum) = (0.0, 0.0);
        for idx in &batches {
            let batch: Vec<&Example> = idx.iter().map(|&i| &self.labeled[i]).collect();
            let mut tape = Tape::new();
            let lc = self.model.supervised_loss(&mut tape, &batch, true, &mut self.rng_dropout)?;
            lc_sum += tape.scalar(lc);
            let ld = if adversarial {
                let ld = self.model.domain_loss(&mut tape, &batch, true, &mut self.rng_dropout)?;
                ld_sum += tape.scalar(ld);
                Some(ld)
            } else {
                None
            };
            let total = self.model.total_loss(&mut tape, lc, None, ld, self.cfg.weights)?;
            self.apply(&mut tape, total, &groups, self.cfg.lr_classification)?;
        }
        let n = batches.len().max(1) as f64;
        Ok((
            LoopStats {
                mean_loss: lc_sum / n,
                steps: batches.len(),
            },
            adversarial.then_some(ld_sum / n),
        ))
    }

    /// Loop 3: domain discrimination over source and target unlabeled
    /// instances shuffled together; steps `λ_d L_D` on the shared and
    /// discriminator parameters.
    pub fn adversarial_epoch(&mut self) -> Result<LoopStats> {
        if self.adversary_pool.is_empty() {
            return Ok(LoopStats::default());
        }
        let batches = self.batches(self.adversary_pool.len());
        let mut total = 0.0;
        for idx in &batches {
            let batch: Vec<&Example> = idx.iter().map(|&i| &self.adversary_pool[i]).collect();
            let mut tape = Tape::new();
            let ld = self.model.domain_loss(&mut tape, &batch, true, &mut self.rng_dropout)?;
            total += tape.scalar(ld);
            let scaled = tape.scale(ld, self.cfg.weights.lambda_d);
            self.apply(&mut tape, scaled, &[Group::Shared, Group::Domain], self.cfg.lr_adversarial)?;
        }
        Ok(LoopStats {
            mean_loss: total / batches.len().max(1) as f64,
            steps: batches.len(),
        })
    }

    /// One full iteration of the schedule followed by dev evaluation.
    pub fn run_epoch(&mut self, epoch: usize) -> Result<EpochRecord> {
        let semi = self.cfg.mode.uses_graph().then(|| self.semisup_epoch()).transpose()?;
        let (sup, ld_labeled) = self.supervised_epoch()?;
        let adv = self.cfg.mode.uses_adversary().then(|| self.adversarial_epoch()).transpose()?;
        let loss_d = match (ld_labeled, adv) {
            (Some(a), Some(b)) if b.steps > 0 => Some((a * sup.steps as f64 + b.mean_loss * b.steps as f64) / (sup.steps + b.steps) as f64),
            (a, _) => a,
        };
        let dev_f1 = self.evaluate_dev()?.f1;
        Ok(EpochRecord {
            epoch,
            loss_c: sup.mean_loss,
            loss_g: semi.map(|s| s.mean_loss),
            loss_d,
            dev_f1,
            steps: sup.steps + semi.map_or(0, |s| s.steps) + adv.map_or(0, |s| s.steps),
            best: false,
        })
    }

    pub fn evaluate_dev(&self) -> Result<EvalResult> {
        evaluate_examples(&self.model, &self.dev)
    }

    /// Runs epochs until the dev F1 has not strictly improved for
    /// `patience` epochs or `max_epochs` is reached, then restores the best
    /// epoch's parameters.
    pub fn fit(mut self) -> Result<TrainOutcome> {
        let start = Instant::now();
        let mut epochs: Vec<EpochRecord> = Vec::new();
        let mut best: Option<(usize, f64, ParamStore)> = None;
        let mut since_best = 0;
        for epoch in 1..=self.cfg.max_epochs {
            let mut rec = self.run_epoch(epoch)?;
            let improved = best.as_ref().map_or(true, |b| rec.dev_f1 > b.1);
            if improved {
                rec.best = true;
                best = Some((epoch, rec.dev_f1, self.model.params().clone()));
                since_best = 0;
            } else {
                since_best += 1;
            }
            log::debug!(
                "{} epoch {epoch}: loss_c={:.4} loss_g={:?} loss_d={:?} dev_f1={:.4}",
                self.cfg.mode,
                rec.loss_c,
                rec.loss_g,
                rec.loss_d,
                rec.dev_f1
            );
            epochs.push(rec);
            if since_best >= self.cfg.patience {
                break;
            }
        }
        let (best_epoch, best_dev_f1, params) = best.expect("at least one epoch ran");
        self.model.params_mut().copy_values_from(&params);
        let labeled_used = self.labeled.len();
        Ok(TrainOutcome {
            report: TrainReport {
                mode: self.cfg.mode,
                epochs,
                best_epoch,
                best_dev_f1,
                labeled_used,
                pseudo_labeled: None,
                wall_clock_secs: start.elapsed().as_secs_f64(),
            },
            model: self.model,
        })
    }
}

pub fn evaluate_examples(model: &Model, examples: &[Example]) -> Result<EvalResult> {
    let mut gold = Vec::with_capacity(examples.len());
    let mut probs = Vec::with_capacity(examples.len());
    for ex in examples {
        gold.push(
            ex.label
                .ok_or_else(|| Error::Protocol("cannot evaluate on an unlabeled instance".into()))?,
        );
        probs.push(model.predict(ex)?.probs);
    }
    evaluate(&gold, &probs, model.config().num_classes)
}

pub fn evaluate_tweets(model: &Model, tweets: &[Tweet]) -> Result<EvalResult> {
    let examples: Vec<Example> = tweets.iter().map(|t| model.example(t)).collect();
    evaluate_examples(model, &examples)
}

/// Trains in the configured mode. Self-training is delegated to
/// [`self_train`].
pub fn train(
    model_cfg: ModelConfig,
    table: EmbeddingTable,
    cfg: &TrainConfig,
    data: TrainData<'_>,
    graph: Option<GraphInput<'_>>,
) -> Result<TrainOutcome> {
    if cfg.mode == Mode::SelfTraining {
        return self_train(model_cfg, table, cfg, data);
    }
    Trainer::new(model_cfg, table, cfg, data, graph)?.fit()
}

/// Source unlabeled tweets whose top class probability is at least
/// `threshold`, labeled with that class.
pub fn pseudo_label(model: &Model, pool: &[Tweet], threshold: f64) -> Result<Vec<Tweet>> {
    let mut out = Vec::new();
    for t in pool {
        let p = model.predict_tweet(t)?;
        let top = p.probs[argmax(&p.probs)];
        if top >= threshold {
            let mut t = t.clone();
            t.label = Some(p.class);
            out.push(t);
        }
    }
    Ok(out)
}

/// Supervised model, pseudo-labels on the source unlabeled pool, then a
/// second supervised model trained from a fresh initialization on the union.
pub fn self_train(model_cfg: ModelConfig, table: EmbeddingTable, cfg: &TrainConfig, data: TrainData<'_>) -> Result<TrainOutcome> {
    let start = Instant::now();
    let sup_cfg = TrainConfig {
        mode: Mode::Supervised,
        ..cfg.clone()
    };
    let first = Trainer::new(model_cfg.clone(), table.clone(), &sup_cfg, data, None)?.fit()?;
    let pseudo = pseudo_label(&first.model, data.source_unlabeled, cfg.self_train_threshold)?;
    let count = pseudo.len();
    let mut outcome = if pseudo.is_empty() {
        log::warn!("no unlabeled instance reached confidence {}; keeping the first model", cfg.self_train_threshold);
        first
    } else {
        let mut union = data.labeled.to_vec();
        union.extend(pseudo);
        let data2 = TrainData {
            labeled: &union,
            ..data
        };
        Trainer::new(model_cfg, table, &sup_cfg, data2, None)?.fit()?
    };
    outcome.report.mode = Mode::SelfTraining;
    outcome.report.pseudo_labeled = Some(count);
    outcome.report.labeled_used = data.labeled.len();
    outcome.report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{GraphNodes, SimilarityGraph};
    use crate::model::{Activation, FilterBank};
    use crate::text::{Domain, Vocab};
    use rand::Rng as _;

    /// Two classes marked by disjoint word sets, plus shared filler words.
    fn corpus(n: usize, domain: Domain, labeled: bool, seed: u64) -> Vec<Tweet> {
        let mut rng = SeedStreams::new(seed).stream("toy");
        (0..n)
            .map(|i| {
                let y = rng.gen_range(0..2usize);
                let mut toks = vec![format!("c{y}w{}", rng.gen_range(0..4))];
                for _ in 0..rng.gen_range(1..4) {
                    let w = if rng.gen_bool(0.6) {
                        format!("c{y}w{}", rng.gen_range(0..4))
                    } else {
                        format!("fill{}", rng.gen_range(0..6))
                    };
                    toks.push(w);
                }
                let prefix = if domain == Domain::Source { "s" } else { "t" };
                Tweet::new(format!("{prefix}{i}"), toks, labeled.then_some(y), domain)
            })
            .collect()
    }

    fn small_model_cfg() -> ModelConfig {
        ModelConfig {
            filters: vec![FilterBank { window: 2, count: 4, pool: 2 }, FilterBank { window: 3, count: 4, pool: 3 }],
            z_dim: 8,
            zc_dim: 6,
            zg_dim: 4,
            zd_dim: 4,
            dropout: 0.0,
            activation: Activation::Relu,
            num_classes: 2,
            max_len: 5,
            conv_pad: None,
            use_semi_branch: false,
        }
    }

    struct Fixture {
        labeled: Vec<Tweet>,
        su: Vec<Tweet>,
        tu: Vec<Tweet>,
        dev: Vec<Tweet>,
        table: EmbeddingTable,
        graph: SimilarityGraph,
        nodes: Vec<Tweet>,
    }

    fn fixture() -> Fixture {
        let labeled = corpus(40, Domain::Source, true, 1);
        let su = corpus(30, Domain::Source, false, 2);
        let tu = corpus(30, Domain::Target, false, 3);
        let dev = corpus(30, Domain::Source, true, 4);
        let vocab = Vocab::build(labeled.iter().chain(&su).chain(&tu).chain(&dev)).unwrap();
        let table = EmbeddingTable::random(vocab, 6, &mut SeedStreams::new(5).stream("emb")).unwrap();
        let gn = GraphNodes::assemble(&labeled, &su, None, 1000, &mut SeedStreams::new(5).stream("subsample"));
        let graph = SimilarityGraph::build(&gn.tweets, gn.meta, &table, 4).unwrap();
        Fixture {
            labeled,
            su,
            tu,
            dev,
            table,
            graph,
            nodes: gn.tweets,
        }
    }

    impl Fixture {
        fn data(&self) -> TrainData<'_> {
            TrainData {
                labeled: &self.labeled,
                source_unlabeled: &self.su,
                target_unlabeled: &self.tu,
                dev: &self.dev,
            }
        }

        fn graph(&self) -> GraphInput<'_> {
            GraphInput {
                graph: &self.graph,
                nodes: &self.nodes,
            }
        }
    }

    fn cfg(mode: Mode) -> TrainConfig {
        TrainConfig {
            mode,
            max_epochs: 6,
            patience: 3,
            batch_size: 8,
            weights: LossWeights { lambda_g: 0.1, lambda_d: 0.1 },
            ..Default::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { patience: 200, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { lr_semisup: 0.0, ..Default::default() }.validate().is_err());
        assert_eq!("semisup+adversarial".parse::<Mode>().unwrap(), Mode::SemisupAdversarial);
        assert!("bogus".parse::<Mode>().is_err());
    }

    #[test]
    fn missing_inputs_are_config_errors() {
        let f = fixture();
        let r = Trainer::new(small_model_cfg(), f.table.clone(), &cfg(Mode::Semisup), f.data(), None);
        assert!(matches!(r, Err(Error::Config(_))));
        let data = TrainData { target_unlabeled: &[], ..f.data() };
        let r = Trainer::new(small_model_cfg(), f.table.clone(), &cfg(Mode::Adversarial), data, None);
        assert!(matches!(r, Err(Error::Config(_))));
        let data = TrainData { dev: &f.su, ..f.data() };
        let r = Trainer::new(small_model_cfg(), f.table.clone(), &cfg(Mode::Supervised), data, None);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn supervised_mode_skips_other_loops() {
        let f = fixture();
        let c = TrainConfig {
            weights: LossWeights { lambda_g: 0.0, lambda_d: 0.0 },
            ..cfg(Mode::Supervised)
        };
        let mut t = Trainer::new(small_model_cfg(), f.table.clone(), &c, f.data(), Some(f.graph())).unwrap();
        let rec = t.run_epoch(1).unwrap();
        assert_eq!(rec.steps, 40usize.div_ceil(8));
        assert!(rec.loss_g.is_none() && rec.loss_d.is_none());
        assert_eq!(t.model().context_nodes(), 0);
    }

    #[test]
    fn loops_touch_only_their_groups() {
        let f = fixture();
        let mut t = Trainer::new(small_model_cfg(), f.table.clone(), &cfg(Mode::SemisupAdversarial), f.data(), Some(f.graph())).unwrap();
        let sums = |t: &Trainer| Group::ALL.map(|g| t.model().params().group_checksum(g));
        let changed = |a: [u64; 4], b: [u64; 4]| -> Vec<Group> { Group::ALL.into_iter().zip(a.iter().zip(&b)).filter(|(_, (x, y))| x != y).map(|(g, _)| g).collect() };

        let before = sums(&t);
        let s1 = t.semisup_epoch().unwrap();
        let after = sums(&t);
        assert_eq!(changed(before, after), vec![Group::Shared, Group::Semisup]);

        let (s2, ld) = t.supervised_epoch().unwrap();
        let after2 = sums(&t);
        assert_eq!(changed(after, after2), Group::ALL.to_vec());
        assert!(ld.is_some());

        let s3 = t.adversarial_epoch().unwrap();
        let after3 = sums(&t);
        assert_eq!(changed(after2, after3), vec![Group::Shared, Group::Domain]);

        assert_eq!(s1.steps, (2 * f.graph.len()).div_ceil(8));
        assert_eq!(s2.steps, 5);
        assert_eq!(s3.steps, 60usize.div_ceil(8));
        let rec = t.run_epoch(2).unwrap();
        assert_eq!(rec.steps, s1.steps + s2.steps + s3.steps);

        // Without the semi branch in the classifier, loop 2 leaves the
        // context parameters alone.
        let mut t = Trainer::new(small_model_cfg(), f.table.clone(), &cfg(Mode::Adversarial), f.data(), None).unwrap();
        let before = sums(&t);
        t.supervised_epoch().unwrap();
        assert_eq!(changed(before, sums(&t)), vec![Group::Shared, Group::Supervised, Group::Domain]);
    }

    #[test]
    fn fit_is_deterministic_and_keeps_best_epoch() {
        let f = fixture();
        let run = || train(small_model_cfg(), f.table.clone(), &cfg(Mode::SemisupAdversarial), f.data(), Some(f.graph())).unwrap();
        let a = run();
        let b = run();
        let strip = |r: &TrainReport| TrainReport { wall_clock_secs: 0.0, ..r.clone() };
        assert_eq!(strip(&a.report), strip(&b.report));
        assert_eq!(a.model.params_hash(), b.model.params_hash());

        let max = a.report.epochs.iter().map(|e| e.dev_f1).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(a.report.best_dev_f1, max);
        let first_max = a.report.epochs.iter().find(|e| e.dev_f1 == max).unwrap().epoch;
        assert_eq!(a.report.best_epoch, first_max);
        let restored = evaluate_tweets(&a.model, &f.dev).unwrap().f1;
        assert_eq!(restored, max);
    }

    #[test]
    fn early_stopping_respects_patience() {
        let f = fixture();
        let c = TrainConfig {
            max_epochs: 40,
            patience: 2,
            ..cfg(Mode::Supervised)
        };
        let out = train(small_model_cfg(), f.table.clone(), &c, f.data(), None).unwrap();
        let n = out.report.epochs.len();
        assert!(n < 40 || out.report.best_epoch + 2 >= 40);
        if n < 40 {
            assert_eq!(n, out.report.best_epoch + 2);
        }
    }

    #[test]
    fn separable_corpus_is_learned() {
        let f = fixture();
        let labeled = corpus(200, Domain::Source, true, 11);
        let c = TrainConfig {
            max_epochs: 50,
            patience: 10,
            lr_classification: 1.0,
            ..cfg(Mode::Supervised)
        };
        let data = TrainData { labeled: &labeled, ..f.data() };
        let out = train(small_model_cfg(), f.table.clone(), &c, data, None).unwrap();
        assert!(out.report.best_dev_f1 >= 0.95, "dev f1 {}", out.report.best_dev_f1);
    }

    #[test]
    fn self_training_pseudo_labels() {
        let f = fixture();
        let c = cfg(Mode::SelfTraining);
        let out = train(small_model_cfg(), f.table.clone(), &c, f.data(), None).unwrap();
        // Independent recomputation: retrain the first-stage model and filter.
        let sup = train(small_model_cfg(), f.table.clone(), &TrainConfig { mode: Mode::Supervised, ..c.clone() }, f.data(), None).unwrap();
        let mut expected = 0;
        for t in &f.su {
            let p = sup.model.predict_tweet(t).unwrap();
            if p.probs.iter().cloned().fold(0.0, f64::max) >= 0.75 {
                expected += 1;
            }
        }
        assert_eq!(out.report.pseudo_labeled, Some(expected));
        for t in pseudo_label(&sup.model, &f.su, 0.75).unwrap() {
            let p = sup.model.predict_tweet(&t).unwrap();
            assert!(p.probs[t.label.unwrap()] >= 0.75);
        }

        let never = TrainConfig { self_train_threshold: 1.0 + 1e-9, ..c };
        let out = train(small_model_cfg(), f.table.clone(), &never, f.data(), None).unwrap();
        assert_eq!(out.report.pseudo_labeled, Some(0));
        assert_eq!(out.model.params_hash(), sup.model.params_hash());
    }
}

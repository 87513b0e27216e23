//! Convolutional encoder with classification, context-prediction and
//! domain-discrimination heads.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{softmax, xavier_uniform_init, Group, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::sampler::ContextSample;
use crate::text::{Domain, EmbeddingTable, Tweet, DEFAULT_MAX_LEN};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterBank {
    /// Filter width in tokens.
    pub window: usize,
    pub count: usize,
    /// Max-pooling length (stride 1).
    pub pool: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub filters: Vec<FilterBank>,
    pub z_dim: usize,
    pub zc_dim: usize,
    pub zg_dim: usize,
    pub zd_dim: usize,
    pub dropout: f64,
    pub activation: Activation,
    pub num_classes: usize,
    /// Every input is treated as this many rows (shorter inputs are
    /// zero-padded, longer ones truncated) so the first dense layer has a
    /// fixed width.
    pub max_len: usize,
    /// Zero rows added on each side by the convolution; `None` means
    /// `window - 1`.
    pub conv_pad: Option<usize>,
    /// Feed the context hidden layer into the classifier.
    pub use_semi_branch: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            filters: vec![
                FilterBank { window: 2, count: 100, pool: 2 },
                FilterBank { window: 3, count: 150, pool: 3 },
                FilterBank { window: 4, count: 200, pool: 4 },
            ],
            z_dim: 100,
            zc_dim: 100,
            zg_dim: 50,
            zd_dim: 50,
            dropout: 0.02,
            activation: Activation::Relu,
            num_classes: 2,
            max_len: DEFAULT_MAX_LEN,
            conv_pad: None,
            use_semi_branch: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.filters.is_empty() {
            return Err(Error::Config("at least one filter bank is required".into()));
        }
        for f in &self.filters {
            if f.window == 0 || f.count == 0 || f.pool == 0 {
                return Err(Error::Config(format!("filter bank {f:?} has a zero field")));
            }
            let conv = self.conv_len(f);
            if conv < f.pool {
                return Err(Error::Config(format!(
                    "pooling length {} exceeds the {conv} convolution outputs of window {}",
                    f.pool, f.window
                )));
            }
        }
        for (name, v) in [
            ("z_dim", self.z_dim),
            ("zc_dim", self.zc_dim),
            ("zg_dim", self.zg_dim),
            ("zd_dim", self.zd_dim),
            ("max_len", self.max_len),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }

    pub fn pad_for(&self, f: &FilterBank) -> usize {
        self.conv_pad.unwrap_or(f.window - 1)
    }

    fn conv_len(&self, f: &FilterBank) -> usize {
        (self.max_len + 2 * self.pad_for(f) + 1).saturating_sub(f.window)
    }

    /// Width of the concatenated pooled features.
    pub fn pooled_dim(&self) -> usize {
        self.filters
            .iter()
            .map(|f| f.count * (self.conv_len(f) + 1 - f.pool))
            .sum()
    }

    pub fn classifier_width(&self) -> usize {
        if self.use_semi_branch {
            self.zc_dim + self.zg_dim
        } else {
            self.zc_dim
        }
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_g: f64,
    pub lambda_d: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_g: 1e-2,
            lambda_d: 1e-8,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_g >= 0.0 && self.lambda_d >= 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be non-negative, got lambda_g={} lambda_d={}",
                self.lambda_g, self.lambda_d
            )));
        }
        Ok(())
    }
}

/// A tweet reduced to embedding row ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub ids: Vec<usize>,
    pub label: Option<usize>,
    pub domain: Option<Domain>,
    /// The tweet had no tokens and is represented by a lone UNK.
    pub empty: bool,
}

impl Example {
    pub fn from_tweet(table: &EmbeddingTable, tweet: &Tweet, max_len: usize) -> Self {
        Self {
            ids: table.token_ids(&tweet.tokens, max_len),
            label: tweet.label,
            domain: Some(tweet.domain),
            empty: tweet.tokens.is_empty(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ParamIds {
    filters_start: usize,
    v: ParamId,
    vc: ParamId,
    w: ParamId,
    vg: ParamId,
    c: Option<ParamId>,
    vd: ParamId,
    wd: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub class: usize,
    pub probs: Vec<f64>,
    pub empty: bool,
}

#[derive(Debug, Clone)]
pub struct Model {
    cfg: ModelConfig,
    table: EmbeddingTable,
    store: ParamStore,
    ids: ParamIds,
}

impl Model {
    /// Xavier-uniform initialization of every weight. `context_nodes` is the
    /// number of graph nodes (rows of the context matrix); zero disables it.
    pub fn new<R: Rng + ?Sized>(cfg: ModelConfig, table: EmbeddingTable, context_nodes: usize, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = table.dim();
        let mut store = ParamStore::new();
        let filters_start = store.len();
        for f in &cfg.filters {
            store.add(
                format!("U.k{}", f.window),
                Group::Shared,
                xavier_uniform_init(&[f.count, f.window * d], rng)?,
            );
        }
        let v = store.add("V", Group::Shared, xavier_uniform_init(&[cfg.z_dim, cfg.pooled_dim()], rng)?);
        let vc = store.add("Vc", Group::Supervised, xavier_uniform_init(&[cfg.zc_dim, cfg.z_dim], rng)?);
        let w = store.add(
            "W",
            Group::Supervised,
            xavier_uniform_init(&[cfg.num_classes, cfg.classifier_width()], rng)?,
        );
        let vg = store.add("Vg", Group::Semisup, xavier_uniform_init(&[cfg.zg_dim, cfg.z_dim], rng)?);
        let c = if context_nodes > 0 {
            Some(store.add_row_sparse("C", Group::Semisup, xavier_uniform_init(&[context_nodes, cfg.zg_dim], rng)?))
        } else {
            None
        };
        let vd = store.add("Vd", Group::Domain, xavier_uniform_init(&[cfg.zd_dim, cfg.z_dim], rng)?);
        let wd = store.add("wd", Group::Domain, xavier_uniform_init(&[cfg.zd_dim], rng)?);
        Ok(Self {
            cfg,
            table,
            store,
            ids: ParamIds {
                filters_start,
                v,
                vc,
                w,
                vg,
                c,
                vd,
                wd,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn table(&self) -> &EmbeddingTable {
        &self.table
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn context_nodes(&self) -> usize {
        self.ids.c.map_or(0, |c| self.store.get(c).value.rows_cols().0)
    }

    pub fn example(&self, tweet: &Tweet) -> Example {
        Example::from_tweet(&self.table, tweet, self.cfg.max_len)
    }

    fn act(&self, tape: &mut Tape, x: Var) -> Var {
        match self.cfg.activation {
            Activation::Relu => tape.relu(x),
            Activation::Identity => x,
        }
    }

    /// Shared representation `z` of one example.
    pub fn encode<R: Rng + ?Sized>(&self, tape: &mut Tape, ex: &Example, train: bool, rng: &mut R) -> Result<Var> {
        if ex.ids.is_empty() {
            return Err(Error::Shape("cannot encode an example with no rows".into()));
        }
        let ids = &ex.ids[..ex.ids.len().min(self.cfg.max_len)];
        let x = tape.constant(self.table.lookup_ids(ids));
        let mut pooled = Vec::with_capacity(self.cfg.filters.len());
        for (b, f) in self.cfg.filters.iter().enumerate() {
            let u = tape.param(&self.store, ParamId(self.ids.filters_start + b));
            let pad = self.cfg.pad_for(f);
            let h = tape.wide_conv1d_padded(x, u, pad, self.cfg.max_len)?;
            let h = self.act(tape, h);
            let valid = (ids.len() + 2 * pad + 1).saturating_sub(f.window);
            pooled.push(tape.masked_max_pool1d(h, f.pool, valid)?);
        }
        let m = tape.concat_all(&pooled);
        let v = tape.param(&self.store, self.ids.v);
        let z = tape.affine(m, v)?;
        let z = self.act(tape, z);
        tape.dropout(z, self.cfg.dropout, rng, train)
    }

    /// Context hidden layer `z_g = f(V_g z)`.
    pub fn context_hidden(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let vg = tape.param(&self.store, self.ids.vg);
        let h = tape.affine(z, vg)?;
        Ok(self.act(tape, h))
    }

    /// Class logits `W [z_c; z_g]`, or `W z_c` without the semi branch.
    pub fn class_logits(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let vc = tape.param(&self.store, self.ids.vc);
        let zc = tape.affine(z, vc)?;
        let zc = self.act(tape, zc);
        let features = if self.cfg.use_semi_branch {
            let zg = self.context_hidden(tape, z)?;
            tape.concat(zc, zg)
        } else {
            zc
        };
        let w = tape.param(&self.store, self.ids.w);
        tape.affine(features, w)
    }

    /// Discriminator logit `w_d · f(V_d · reverse(z))`; `σ` of it is the
    /// probability that the input came from the target domain.
    pub fn domain_logit(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        self.domain_logit_with(tape, z, true)
    }

    fn domain_logit_with(&self, tape: &mut Tape, z: Var, reverse: bool) -> Result<Var> {
        let z = if reverse { tape.grad_reverse(z) } else { z };
        let vd = tape.param(&self.store, self.ids.vd);
        let h = tape.affine(z, vd)?;
        let h = self.act(tape, h);
        let wd = tape.param(&self.store, self.ids.wd);
        tape.dot(h, wd)
    }

    /// Mean negative log-likelihood of the gold labels.
    pub fn supervised_loss<R: Rng + ?Sized>(&self, tape: &mut Tape, batch: &[&Example], train: bool, rng: &mut R) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::Protocol("supervised loss over an empty batch".into()));
        }
        let mut terms = Vec::with_capacity(batch.len());
        for ex in batch {
            let y = ex
                .label
                .ok_or_else(|| Error::Protocol("supervised loss given an unlabeled example".into()))?;
            let z = self.encode(tape, ex, train, rng)?;
            let logits = self.class_logits(tape, z)?;
            terms.push(tape.softmax_xent(logits, y)?);
        }
        tape.mean(&terms)
    }

    /// Mean of `-log σ(γ C_j · z_g(i))` over the samples; `nodes` holds the
    /// graph nodes in graph order.
    pub fn context_loss<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        nodes: &[Example],
        samples: &[ContextSample],
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let c = self
            .ids
            .c
            .ok_or_else(|| Error::Protocol("context loss requires a model built with graph nodes".into()))?;
        if samples.is_empty() {
            return Err(Error::Protocol("context loss over an empty batch".into()));
        }
        let mut terms = Vec::with_capacity(samples.len());
        for s in samples {
            let ex = nodes.get(s.input).ok_or(Error::Index {
                index: s.input,
                len: nodes.len(),
                context: "context input node",
            })?;
            let z = self.encode(tape, ex, train, rng)?;
            let zg = self.context_hidden(tape, z)?;
            let cj = tape.param_row(&self.store, c, s.context)?;
            let score = tape.dot(cj, zg)?;
            terms.push(tape.bce_with_logits(score, if s.gamma > 0 { 1.0 } else { 0.0 })?);
        }
        tape.mean(&terms)
    }

    /// Discrimination cross-entropy, averaged separately within the source
    /// and target items of the batch and summed. The gradient reaching the
    /// encoder is reversed.
    pub fn domain_loss<R: Rng + ?Sized>(&self, tape: &mut Tape, batch: &[&Example], train: bool, rng: &mut R) -> Result<Var> {
        self.domain_loss_with(tape, batch, train, rng, true)
    }

    /// [`Model::domain_loss`] with the reversal switched on or off.
    pub fn domain_loss_with<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        batch: &[&Example],
        train: bool,
        rng: &mut R,
        reverse: bool,
    ) -> Result<Var> {
        let mut source = Vec::new();
        let mut target = Vec::new();
        for ex in batch {
            let domain = ex
                .domain
                .ok_or_else(|| Error::Protocol("domain loss given an example without a domain".into()))?;
            let z = self.encode(tape, ex, train, rng)?;
            let logit = self.domain_logit_with(tape, z, reverse)?;
            let j = tape.bce_with_logits(logit, domain.indicator())?;
            match domain {
                Domain::Source => source.push(j),
                Domain::Target => target.push(j),
            }
        }
        let mut parts = Vec::with_capacity(2);
        for terms in [source, target] {
            if !terms.is_empty() {
                parts.push(tape.mean(&terms)?);
            }
        }
        if parts.is_empty() {
            return Err(Error::Protocol("domain loss over an empty batch".into()));
        }
        tape.sum(&parts)
    }

    /// `L_C + λ_g L_G + λ_d L_D`, skipping absent components.
    pub fn total_loss(&self, tape: &mut Tape, sup: Var, semi: Option<Var>, dom: Option<Var>, weights: LossWeights) -> Result<Var> {
        let mut parts = vec![sup];
        if let Some(g) = semi {
            parts.push(tape.scale(g, weights.lambda_g));
        }
        if let Some(d) = dom {
            parts.push(tape.scale(d, weights.lambda_d));
        }
        tape.sum(&parts)
    }

    pub fn predict(&self, ex: &Example) -> Result<Prediction> {
        let mut tape = Tape::new();
        let mut no_rng = rand::rngs::mock::StepRng::new(0, 0);
        let z = self.encode(&mut tape, ex, false, &mut no_rng)?;
        let logits = self.class_logits(&mut tape, z)?;
        let probs = softmax(tape.value(logits).data());
        let class = argmax(&probs);
        Ok(Prediction {
            class,
            probs,
            empty: ex.empty,
        })
    }

    pub fn predict_tweet(&self, tweet: &Tweet) -> Result<Prediction> {
        self.predict(&self.example(tweet))
    }

    /// Probability of the target domain for one example.
    pub fn domain_probability(&self, ex: &Example) -> Result<f64> {
        let mut tape = Tape::new();
        let mut no_rng = rand::rngs::mock::StepRng::new(0, 0);
        let z = self.encode(&mut tape, ex, false, &mut no_rng)?;
        let logit = self.domain_logit(&mut tape, z)?;
        Ok(crate::autodiff::stable_sigmoid(tape.scalar(logit)))
    }

    /// Digest of all parameter names, shapes and values.
    pub fn params_hash(&self) -> String {
        let mut h = Sha256::new();
        for (_, p) in self.store.iter() {
            h.update(p.name.as_bytes());
            for s in p.shape() {
                h.update((*s as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn to_checkpoint(&self, graph_checksum: Option<String>, seed: u64) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_owned(),
            config: self.cfg.clone(),
            config_hash: self.cfg.hash(),
            vocab_hash: self.table.vocab().hash(),
            table_hash: self.table.hash(),
            params_hash: self.params_hash(),
            graph_checksum,
            seed,
            params: self
                .store
                .iter()
                .map(|(_, p)| StoredParam {
                    name: p.name.clone(),
                    group: p.group,
                    shape: p.shape().to_vec(),
                    row_sparse: p.sparse_rows,
                    values: p.value.data().to_vec(),
                })
                .collect(),
            table: self.table.clone(),
        }
    }

    /// Rebuilds a model from a checkpoint after verifying every digest.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Integrity(format!("unknown checkpoint format `{}`", ck.format)));
        }
        if ck.config.hash() != ck.config_hash {
            return Err(Error::Integrity("checkpoint config hash mismatch".into()));
        }
        if ck.table.vocab().hash() != ck.vocab_hash {
            return Err(Error::Integrity("checkpoint vocabulary hash mismatch".into()));
        }
        if ck.table.hash() != ck.table_hash {
            return Err(Error::Integrity("checkpoint embedding table hash mismatch".into()));
        }
        let context_nodes = ck
            .params
            .iter()
            .find(|p| p.name == "C")
            .map_or(0, |p| p.shape.first().copied().unwrap_or(0));
        let mut rng = rand::rngs::mock::StepRng::new(0, 1);
        let mut model = Self::new(ck.config.clone(), ck.table.clone(), context_nodes, &mut rng)?;
        if model.store.len() != ck.params.len() {
            return Err(Error::Integrity(format!(
                "checkpoint lists {} parameters, model expects {}",
                ck.params.len(),
                model.store.len()
            )));
        }
        let ids: Vec<ParamId> = model.store.ids().collect();
        for (id, stored) in ids.into_iter().zip(&ck.params) {
            let p = model.store.get_mut(id);
            if p.name != stored.name || p.group != stored.group || p.shape() != stored.shape.as_slice() {
                return Err(Error::Integrity(format!(
                    "checkpoint parameter `{}` {:?} does not match expected `{}` {:?}",
                    stored.name,
                    stored.shape,
                    p.name,
                    p.shape()
                )));
            }
            if stored.values.len() != p.value.len() {
                return Err(Error::Integrity(format!("parameter `{}` has the wrong number of values", stored.name)));
            }
            p.value.data_mut().copy_from_slice(&stored.values);
        }
        if model.params_hash() != ck.params_hash {
            return Err(Error::Integrity("checkpoint parameter hash mismatch".into()));
        }
        Ok(model)
    }
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

const CHECKPOINT_FORMAT: &str = "tweetshift-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredParam {
    pub name: String,
    pub group: Group,
    pub shape: Vec<usize>,
    pub row_sparse: bool,
    pub values: Vec<f64>,
}

/// Self-describing model file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub config: ModelConfig,
    pub config_hash: String,
    pub vocab_hash: String,
    pub table_hash: String,
    pub params_hash: String,
    pub graph_checksum: Option<String>,
    pub seed: u64,
    pub params: Vec<StoredParam>,
    pub table: EmbeddingTable,
}

impl Checkpoint {
    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec(self).map_err(|e| Error::Data(format!("serializing checkpoint: {e}")))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.line(), e.to_string()))
    }

    /// Fails unless the checkpoint was trained on the graph with `checksum`.
    pub fn expect_graph(&self, checksum: &str) -> Result<()> {
        match &self.graph_checksum {
            Some(c) if c == checksum => Ok(()),
            Some(c) => Err(Error::Integrity(format!("checkpoint built on graph {c}, got {checksum}"))),
            None => Err(Error::Integrity("checkpoint was trained without a graph".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::rng::SeedStreams;
    use crate::sampler::ContextKind;
    use crate::text::Vocab;

    fn toy_table(d: usize, words: usize, seed: u64) -> EmbeddingTable {
        let vocab = Vocab::from_words((0..words).map(|i| format!("w{i:02}")).collect());
        EmbeddingTable::random(vocab, d, &mut SeedStreams::new(seed).stream("emb")).unwrap()
    }

    fn toy_config() -> ModelConfig {
        ModelConfig {
            filters: vec![
                FilterBank { window: 2, count: 2, pool: 2 },
                FilterBank { window: 3, count: 2, pool: 3 },
                FilterBank { window: 4, count: 2, pool: 4 },
            ],
            z_dim: 8,
            zc_dim: 6,
            zg_dim: 5,
            zd_dim: 4,
            dropout: 0.0,
            activation: Activation::Relu,
            num_classes: 2,
            max_len: 6,
            conv_pad: None,
            use_semi_branch: true,
        }
    }

    fn toy_model(seed: u64, nodes: usize) -> Model {
        Model::new(toy_config(), toy_table(8, 12, seed), nodes, &mut SeedStreams::new(seed).stream("init")).unwrap()
    }

    fn ex(ids: &[usize], label: Option<usize>, domain: Domain) -> Example {
        Example {
            ids: ids.to_vec(),
            label,
            domain: Some(domain),
            empty: false,
        }
    }

    fn toy_nodes() -> Vec<Example> {
        vec![
            ex(&[0, 1, 2], Some(0), Domain::Source),
            ex(&[3, 4], Some(1), Domain::Source),
            ex(&[5, 6, 7, 8], None, Domain::Source),
            ex(&[9], None, Domain::Source),
            ex(&[10, 11, 1], None, Domain::Target),
            ex(&[2, 2, 4, 6, 8], None, Domain::Target),
        ]
    }

    fn no_rng() -> rand::rngs::mock::StepRng {
        rand::rngs::mock::StepRng::new(0, 0)
    }

    /// Evaluates `build` with fresh grads and returns (loss, grads per param).
    fn loss_and_grads(model: &mut Model, build: &dyn Fn(&Model, &mut Tape) -> Var) -> (f64, Vec<Vec<f64>>) {
        model.store.zero_grads();
        let mut tape = Tape::new();
        let loss = build(model, &mut tape);
        tape.backward(loss).unwrap();
        tape.accumulate_param_grads(&mut model.store);
        let grads = model.store.iter().map(|(_, p)| p.grad.clone()).collect();
        (tape.scalar(loss), grads)
    }

    fn loss_only(model: &Model, build: &dyn Fn(&Model, &mut Tape) -> Var) -> f64 {
        let mut tape = Tape::new();
        let l = build(model, &mut tape);
        tape.scalar(l)
    }

    fn check_all_params_fd(model: &mut Model, build: &dyn Fn(&Model, &mut Tape) -> Var) {
        let (_, grads) = loss_and_grads(model, build);
        let h = 1e-5;
        let ids: Vec<ParamId> = model.store.ids().collect();
        let mut checked = 0;
        for (pi, id) in ids.into_iter().enumerate() {
            let n = model.store.get(id).value.len();
            // Probe a spread of coordinates of every parameter.
            let step = (n / 25).max(1);
            for k in (0..n).step_by(step) {
                let orig = model.store.get(id).value.data()[k];
                model.store.get_mut(id).value.data_mut()[k] = orig + h;
                let lp = loss_only(model, build);
                model.store.get_mut(id).value.data_mut()[k] = orig - h;
                let lm = loss_only(model, build);
                model.store.get_mut(id).value.data_mut()[k] = orig;
                let num = (lp - lm) / (2.0 * h);
                let ana = grads[pi][k];
                let scale = num.abs().max(ana.abs());
                if scale < 1e-7 {
                    assert!((num - ana).abs() < 1e-8, "{} [{k}]: {num} vs {ana}", model.store.get(id).name);
                } else {
                    assert!(
                        (num - ana).abs() / scale < 1e-4,
                        "{} [{k}]: numeric {num} analytic {ana}",
                        model.store.get(id).name
                    );
                }
                checked += 1;
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn shapes_and_zero_encoder() {
        let mut m = toy_model(1, 6);
        let cfg = m.config().clone();
        let expect_pooled: usize = cfg
            .filters
            .iter()
            .map(|f| f.count * ((cfg.max_len + f.window - 1) - f.pool + 1))
            .sum();
        assert_eq!(cfg.pooled_dim(), expect_pooled);
        for len in [1, 3, 6, 9] {
            let e = ex(&(0..len).map(|i| i % 12).collect::<Vec<_>>(), None, Domain::Source);
            let mut tape = Tape::new();
            let z = m.encode(&mut tape, &e, false, &mut no_rng()).unwrap();
            assert_eq!(tape.value(z).len(), cfg.z_dim);
        }
        for id in m.store.group_ids(Group::Shared) {
            m.store.get_mut(id).value.data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let z = m.encode(&mut tape, &toy_nodes()[0], false, &mut no_rng()).unwrap();
        assert!(tape.value(z).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn classifier_width_follows_semi_flag() {
        let mut cfg = toy_config();
        assert_eq!(cfg.classifier_width(), 11);
        cfg.use_semi_branch = false;
        assert_eq!(cfg.classifier_width(), 6);
        let m = Model::new(cfg, toy_table(8, 12, 2), 0, &mut SeedStreams::new(2).stream("init")).unwrap();
        let w = m.store.find("W").unwrap();
        assert_eq!(m.store.get(w).shape(), &[2, 6]);

        // Without the semi branch, classification never touches Vg or C.
        let mut m = m;
        let vg = m.store.find("Vg").unwrap();
        m.store.get_mut(vg).value.data_mut().fill(f64::NAN);
        let p = m.predict(&toy_nodes()[0]).unwrap();
        assert!(p.probs.iter().all(|v| v.is_finite()));
        assert!((p.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn zero_class_weights_give_uniform() {
        let mut m = toy_model(3, 6);
        let w = m.store.find("W").unwrap();
        m.store.get_mut(w).value.data_mut().fill(0.0);
        let p = m.predict(&toy_nodes()[1]).unwrap();
        assert_eq!(p.probs, vec![0.5, 0.5]);
        let nodes = toy_nodes();
        let batch: Vec<&Example> = nodes[..2].iter().collect();
        let mut tape = Tape::new();
        let l = m.supervised_loss(&mut tape, &batch, false, &mut no_rng()).unwrap();
        assert!((tape.scalar(l) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn batch_loss_is_mean_of_item_losses() {
        let m = toy_model(4, 6);
        let nodes = toy_nodes();
        let labeled: Vec<Example> = nodes
            .iter()
            .enumerate()
            .map(|(i, e)| Example { label: Some(i % 2), ..e.clone() })
            .collect();
        let refs: Vec<&Example> = labeled.iter().collect();
        let mut tape = Tape::new();
        let l = m.supervised_loss(&mut tape, &refs, false, &mut no_rng()).unwrap();
        let mut sum = 0.0;
        for e in &labeled {
            let p = m.predict(e).unwrap();
            sum += -p.probs[e.label.unwrap()].ln();
        }
        assert!((tape.scalar(l) - sum / labeled.len() as f64).abs() < 1e-12);

        let unl = [&nodes[2]];
        assert!(matches!(
            m.supervised_loss(&mut Tape::new(), &unl, false, &mut no_rng()),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn context_loss_values_and_errors() {
        let mut m = toy_model(5, 6);
        let nodes = toy_nodes();
        let c = m.store.find("C").unwrap();
        m.store.get_mut(c).value.data_mut().fill(0.0);
        for gamma in [1, -1] {
            let s = [ContextSample { input: 0, context: 3, gamma, kind: ContextKind::Graph }];
            let mut tape = Tape::new();
            let l = m.context_loss(&mut tape, &nodes, &s, false, &mut no_rng()).unwrap();
            assert!((tape.scalar(l) - std::f64::consts::LN_2).abs() < 1e-12);
        }
        let bad = [ContextSample { input: 0, context: 6, gamma: 1, kind: ContextKind::Graph }];
        assert!(matches!(
            m.context_loss(&mut Tape::new(), &nodes, &bad, false, &mut no_rng()),
            Err(Error::Index { .. })
        ));
    }

    #[test]
    fn domain_loss_uniform_and_missing_tag() {
        let mut m = toy_model(6, 6);
        let wd = m.store.find("wd").unwrap();
        m.store.get_mut(wd).value.data_mut().fill(0.0);
        let nodes = toy_nodes();
        let refs: Vec<&Example> = nodes.iter().collect();
        let mut tape = Tape::new();
        let l = m.domain_loss(&mut tape, &refs, false, &mut no_rng()).unwrap();
        // Each domain contributes a mean of ln 2.
        assert!((tape.scalar(l) - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        let untagged = Example { domain: None, ..nodes[0].clone() };
        assert!(matches!(
            m.domain_loss(&mut Tape::new(), &[&untagged], false, &mut no_rng()),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn group_separation() {
        let mut m = toy_model(7, 6);
        let nodes = toy_nodes();
        let lab: Vec<&Example> = nodes[..2].iter().collect();
        let all: Vec<&Example> = nodes.iter().collect();
        let samples = [
            ContextSample { input: 2, context: 4, gamma: 1, kind: ContextKind::Graph },
            ContextSample { input: 0, context: 1, gamma: -1, kind: ContextKind::Label },
        ];
        let sup = |m: &Model, t: &mut Tape| m.supervised_loss(t, &lab, false, &mut no_rng()).unwrap();
        let ctx = |m: &Model, t: &mut Tape| m.context_loss(t, &nodes, &samples, false, &mut no_rng()).unwrap();
        let dom = |m: &Model, t: &mut Tape| m.domain_loss(t, &all, false, &mut no_rng()).unwrap();

        let norm = |m: &Model, g: Group| m.store.grad_norm_sq(g);
        loss_and_grads(&mut m, &sup);
        assert_eq!(norm(&m, Group::Domain), 0.0);
        assert!(norm(&m, Group::Shared) > 0.0 && norm(&m, Group::Supervised) > 0.0);
        loss_and_grads(&mut m, &ctx);
        assert_eq!(norm(&m, Group::Domain), 0.0);
        assert_eq!(norm(&m, Group::Supervised), 0.0);
        assert!(norm(&m, Group::Semisup) > 0.0);
        loss_and_grads(&mut m, &dom);
        assert_eq!(norm(&m, Group::Supervised), 0.0);
        assert_eq!(norm(&m, Group::Semisup), 0.0);
        assert!(norm(&m, Group::Domain) > 0.0 && norm(&m, Group::Shared) > 0.0);
    }

    #[test]
    fn reversal_negates_encoder_gradient_only() {
        let mut m = toy_model(8, 6);
        let nodes = toy_nodes();
        let all: Vec<&Example> = nodes.iter().collect();
        let rev = |m: &Model, t: &mut Tape| m.domain_loss_with(t, &all, false, &mut no_rng(), true).unwrap();
        let plain = |m: &Model, t: &mut Tape| m.domain_loss_with(t, &all, false, &mut no_rng(), false).unwrap();
        let (la, ga) = loss_and_grads(&mut m, &rev);
        let (lb, gb) = loss_and_grads(&mut m, &plain);
        assert_eq!(la, lb);
        for ((_, p), (a, b)) in m.store.iter().zip(ga.iter().zip(&gb)) {
            for (x, y) in a.iter().zip(b) {
                if p.group == Group::Shared {
                    assert!((x + y).abs() <= 1e-12 * y.abs().max(1.0), "{}", p.name);
                } else {
                    assert_eq!(x, y, "{}", p.name);
                }
            }
        }
    }

    #[test]
    fn saddle_point_direction() {
        let mut m = toy_model(9, 6);
        let nodes = toy_nodes();
        let all: Vec<&Example> = nodes.iter().collect();
        let dom = |m: &Model, t: &mut Tape| m.domain_loss(t, &all, false, &mut no_rng()).unwrap();
        let (l0, grads) = loss_and_grads(&mut m, &dom);
        let eta = 1e-3;
        let step = |m: &mut Model, group: Group| {
            for (i, id) in m.store.ids().collect::<Vec<_>>().into_iter().enumerate() {
                if m.store.get(id).group == group {
                    for (v, g) in m.store.get_mut(id).value.data_mut().iter_mut().zip(&grads[i]) {
                        *v -= eta * g;
                    }
                }
            }
        };
        let mut a = m.clone();
        step(&mut a, Group::Domain);
        assert!(loss_only(&a, &dom) < l0);
        let mut b = m.clone();
        step(&mut b, Group::Shared);
        assert!(loss_only(&b, &dom) > l0);
    }

    #[test]
    fn total_loss_weights() {
        let m = toy_model(10, 6);
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::scalar(0.7));
        let g = tape.constant(Tensor::scalar(3.0));
        let d = tape.constant(Tensor::scalar(5.0));
        let zero = LossWeights { lambda_g: 0.0, lambda_d: 0.0 };
        let t0 = m.total_loss(&mut tape, a, Some(g), Some(d), zero).unwrap();
        assert_eq!(tape.scalar(t0), 0.7);
        let t1 = m.total_loss(&mut tape, a, Some(g), Some(d), LossWeights::default()).unwrap();
        assert!((tape.scalar(t1) - (0.7 + 0.01 * 3.0 + 1e-8 * 5.0)).abs() < 1e-15);
        let t2 = m
            .total_loss(&mut tape, a, Some(g), None, LossWeights { lambda_g: 0.02, lambda_d: 0.0 })
            .unwrap();
        assert!(((tape.scalar(t2) - 0.7) - 2.0 * 0.03).abs() < 1e-12);
        assert!(LossWeights { lambda_g: -1.0, lambda_d: 0.0 }.validate().is_err());
    }

    #[test]
    fn end_to_end_gradient_matches_finite_differences() {
        let mut m = toy_model(11, 6);
        let nodes = toy_nodes();
        let lab: Vec<&Example> = nodes[..2].iter().collect();
        let all: Vec<&Example> = nodes.iter().collect();
        let samples = [
            ContextSample { input: 0, context: 1, gamma: 1, kind: ContextKind::Label },
            ContextSample { input: 3, context: 5, gamma: -1, kind: ContextKind::Graph },
            ContextSample { input: 4, context: 2, gamma: 1, kind: ContextKind::Graph },
        ];
        let weights = LossWeights { lambda_g: 0.5, lambda_d: 0.3 };
        let total = |m: &Model, t: &mut Tape| {
            let s = m.supervised_loss(t, &lab, false, &mut no_rng()).unwrap();
            let g = m.context_loss(t, &nodes, &samples, false, &mut no_rng()).unwrap();
            let d = m.domain_loss_with(t, &all, false, &mut no_rng(), false).unwrap();
            m.total_loss(t, s, Some(g), Some(d), weights).unwrap()
        };
        check_all_params_fd(&mut m, &total);
    }

    #[test]
    fn encoder_gradient_of_squared_norm() {
        let cfg = ModelConfig {
            filters: vec![FilterBank { window: 2, count: 2, pool: 2 }, FilterBank { window: 3, count: 2, pool: 2 }],
            ..toy_config()
        };
        let mut m = Model::new(cfg, toy_table(8, 12, 12), 0, &mut SeedStreams::new(12).stream("init")).unwrap();
        let e = ex(&[1, 5, 7, 2], None, Domain::Source);
        let f = |m: &Model, t: &mut Tape| {
            let z = m.encode(t, &e, false, &mut no_rng()).unwrap();
            t.dot(z, z).unwrap()
        };
        check_all_params_fd(&mut m, &f);
    }

    /// Straight-line forward pass over plain arrays.
    fn manual_forward(m: &Model, ids: &[usize]) -> Vec<f64> {
        let cfg = m.config();
        let d = m.table().dim();
        let relu = |v: f64| v.max(0.0);
        let param = |name: &str| m.store.get(m.store.find(name).unwrap()).value.clone();
        let mut pooled = Vec::new();
        for f in &cfg.filters {
            let u = param(&format!("U.k{}", f.window));
            let pad = f.window - 1;
            let conv_len = cfg.max_len + 2 * pad - f.window + 1;
            for r in 0..f.count {
                let mut h = vec![0.0; conv_len];
                for (t, ht) in h.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for j in 0..f.window {
                        let pos = t as isize + j as isize - pad as isize;
                        if pos >= 0 && (pos as usize) < ids.len() {
                            let row = m.table().row(ids[pos as usize]);
                            for c in 0..d {
                                s += u.data()[r * f.window * d + j * d + c] * row[c];
                            }
                        }
                    }
                    *ht = relu(s);
                }
                for t in 0..conv_len - f.pool + 1 {
                    pooled.push(h[t..t + f.pool].iter().cloned().fold(f64::NEG_INFINITY, f64::max));
                }
            }
        }
        let matvec = |w: &Tensor, x: &[f64]| -> Vec<f64> {
            let (rows, cols) = w.rows_cols();
            (0..rows).map(|r| (0..cols).map(|c| w.data()[r * cols + c] * x[c]).sum()).collect()
        };
        let z: Vec<f64> = matvec(&param("V"), &pooled).into_iter().map(relu).collect();
        let zc: Vec<f64> = matvec(&param("Vc"), &z).into_iter().map(relu).collect();
        let zg: Vec<f64> = matvec(&param("Vg"), &z).into_iter().map(relu).collect();
        let feat: Vec<f64> = zc.into_iter().chain(zg).collect();
        let logits = matvec(&param("W"), &feat);
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }

    #[test]
    fn predictions_match_manual_forward_pass() {
        let m = toy_model(13, 0);
        let mut rng = SeedStreams::new(13).stream("examples");
        for _ in 0..20 {
            let len = rng.gen_range(1..=6);
            let ids: Vec<usize> = (0..len).map(|_| rng.gen_range(0..14)).collect();
            let p = m.predict(&ex(&ids, None, Domain::Target)).unwrap();
            let want = manual_forward(&m, &ids);
            for (a, b) in p.probs.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
            assert_eq!(p.class, argmax(&want));
            assert_eq!(m.predict(&ex(&ids, None, Domain::Target)).unwrap(), p);
        }
    }

    #[test]
    fn checkpoint_round_trip_and_tampering() {
        let m = toy_model(14, 6);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        m.to_checkpoint(Some("abc".into()), 14).write(&path).unwrap();
        let ck = Checkpoint::read(&path).unwrap();
        let back = Model::from_checkpoint(&ck).unwrap();
        assert_eq!(back.params_hash(), m.params_hash());
        assert!(ck.expect_graph("abc").is_ok());
        assert!(matches!(ck.expect_graph("abd"), Err(Error::Integrity(_))));
        let e = &toy_nodes()[4];
        assert_eq!(back.predict(e).unwrap(), m.predict(e).unwrap());

        let mut bad = ck.clone();
        bad.params[1].values[0] += 1e-9;
        assert!(matches!(Model::from_checkpoint(&bad), Err(Error::Integrity(_))));
        let mut bad = ck.clone();
        bad.config.z_dim += 1;
        assert!(matches!(Model::from_checkpoint(&bad), Err(Error::Integrity(_))));
        let mut bad = ck;
        bad.vocab_hash = "0".repeat(64);
        assert!(matches!(Model::from_checkpoint(&bad), Err(Error::Integrity(_))));
    }

    #[test]
    fn dropout_only_in_training() {
        let cfg = ModelConfig { dropout: 0.5, ..toy_config() };
        let m = Model::new(cfg, toy_table(8, 12, 15), 0, &mut SeedStreams::new(15).stream("init")).unwrap();
        let e = toy_nodes()[0].clone();
        let mut rng = SeedStreams::new(15).stream("dropout");
        let mut t1 = Tape::new();
        let a = m.encode(&mut t1, &e, false, &mut rng).unwrap();
        let mut t2 = Tape::new();
        let b = m.encode(&mut t2, &e, false, &mut rng).unwrap();
        assert_eq!(t1.value(a), t2.value(b));
        let mut dropped = 0;
        for _ in 0..20 {
            let mut t3 = Tape::new();
            let c = m.encode(&mut t3, &e, true, &mut rng).unwrap();
            dropped += t3.value(c).data().iter().zip(t1.value(a).data()).filter(|(x, y)| **x == 0.0 && **y != 0.0).count();
        }
        assert!(dropped > 0);
    }
}

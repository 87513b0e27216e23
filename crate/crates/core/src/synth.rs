//! Synthetic two-domain corpus with a matching pretrained-style embedding
//! file.
//!
//! Word vectors are built from a few fixed directions plus isotropic noise:
//! a class direction `u`, a second class direction `u'` used only by
//! target-only class words, and a domain direction `s` carried by every
//! target-only word. Tweets mix class words of their label with filler
//! words; target tweets draw part of their class words from a vocabulary the
//! source never uses.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeedStreams;
use crate::text::write_word2vec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub dim: usize,
    pub labeled: usize,
    pub source_unlabeled: usize,
    pub target_unlabeled: usize,
    pub dev: usize,
    pub test: usize,
    /// Class words per class in each pool.
    pub shared_class_words: usize,
    pub source_class_words: usize,
    pub target_class_words: usize,
    pub filler_words: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability that a token is a class word rather than filler.
    pub class_token_rate: f64,
    /// Probability that a class token comes from the shared pool.
    pub source_shared_rate: f64,
    pub target_shared_rate: f64,
    /// Each target tweet draws its shared rate uniformly from
    /// `target_shared_rate ± target_shared_spread` (clamped to [0, 1]).
    pub target_shared_spread: f64,
    /// Length of the class component of a class word vector.
    pub class_signal: f64,
    /// Angle (radians) between `u` and the class direction of target-only
    /// class words.
    pub target_rotation: f64,
    /// Length of the domain component of target-only words.
    pub domain_offset: f64,
    /// Domain-axis component of source-only class words, signed by class.
    /// Makes the domain axis predictive of the label within the source.
    pub source_spurious: f64,
    /// Amount subtracted from the class component of every target-only
    /// word, which pulls target tweets towards the negative class.
    pub target_class_bias: f64,
    /// Per-coordinate standard deviation of the noise.
    pub noise: f64,
    /// Probability of the positive class.
    pub positive_rate: f64,
    /// Positive rate of target tweets; `None` keeps `positive_rate`.
    pub target_positive_rate: Option<f64>,
    pub label_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dim: 16,
            labeled: 2000,
            source_unlabeled: 10_000,
            target_unlabeled: 10_000,
            dev: 500,
            test: 1000,
            shared_class_words: 40,
            source_class_words: 80,
            target_class_words: 80,
            filler_words: 150,
            min_len: 5,
            max_len: 12,
            class_token_rate: 0.35,
            source_shared_rate: 0.5,
            target_shared_rate: 0.3,
            target_shared_spread: 0.0,
            class_signal: 1.0,
            target_rotation: std::f64::consts::FRAC_PI_2,
            domain_offset: 1.5,
            target_class_bias: 0.0,
            source_spurious: 0.0,
            noise: 0.3,
            positive_rate: 0.5,
            target_positive_rate: None,
            label_noise: 0.02,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 4 {
            return Err(Error::Config("synthetic embeddings need at least 4 dimensions".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config("need 1 <= min_len <= max_len".into()));
        }
        if self.shared_class_words == 0 || self.source_class_words == 0 || self.target_class_words == 0 || self.filler_words == 0 {
            return Err(Error::Config("every word pool needs at least one word".into()));
        }
        for (name, p) in [
            ("class_token_rate", self.class_token_rate),
            ("source_shared_rate", self.source_shared_rate),
            ("target_shared_rate", self.target_shared_rate),
            ("target_shared_spread", self.target_shared_spread),
            ("positive_rate", self.positive_rate),
            ("target_positive_rate", self.target_positive_rate.unwrap_or(self.positive_rate)),
            ("label_noise", self.label_noise),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be a probability, got {p}")));
            }
        }
        Ok(())
    }
}

/// One corpus line: id, label name (or `UNK`), text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthLine {
    pub id: String,
    pub label: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub labeled: Vec<SynthLine>,
    pub source_unlabeled: Vec<SynthLine>,
    pub target_unlabeled: Vec<SynthLine>,
    pub source_dev: Vec<SynthLine>,
    pub source_test: Vec<SynthLine>,
    pub target_dev: Vec<SynthLine>,
    pub target_test: Vec<SynthLine>,
    pub embeddings: Vec<(String, Vec<f64>)>,
}

/// File names written by [`SynthCorpus::write`].
pub const FILES: [&str; 8] = [
    "labeled.tsv",
    "source_unlabeled.tsv",
    "target_unlabeled.tsv",
    "source_dev.tsv",
    "source_test.tsv",
    "target_dev.tsv",
    "target_test.tsv",
    "embeddings.txt",
];

const LABEL_NAMES: [&str; 2] = ["non-relevant", "relevant"];

/// Lowercase-letter word: `prefix` followed by `i` in base 26.
fn word(prefix: &str, mut i: usize) -> String {
    let mut s = String::from(prefix);
    let mut tail = Vec::new();
    loop {
        tail.push((b'a' + (i % 26) as u8) as char);
        i /= 26;
        if i == 0 {
            break;
        }
    }
    s.extend(tail.into_iter().rev());
    s
}

struct Pools {
    shared: [Vec<String>; 2],
    source: [Vec<String>; 2],
    target: [Vec<String>; 2],
    fill_shared: Vec<String>,
    fill_source: Vec<String>,
    fill_target: Vec<String>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Side {
    Source,
    Target,
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let streams = SeedStreams::new(cfg.seed);
    let mut erng = streams.stream("synth/embeddings");
    let d = cfg.dim;
    // Axes 0, 1, 2 are u, u' and s.
    let vec_for = |class_dir: Option<[f64; 3]>, target: bool, rng: &mut crate::rng::Rng| -> Vec<f64> {
        let mut v: Vec<f64> = (0..d).map(|_| cfg.noise * rng.sample::<f64, _>(StandardNormal)).collect();
        for (x, c) in v.iter_mut().zip(class_dir.unwrap_or_default()) {
            *x += c;
        }
        if target {
            v[0] -= cfg.target_class_bias;
            v[2] += cfg.domain_offset;
        }
        v
    };
    let mut embeddings = Vec::new();
    let mut mk_pool = |prefix: &str, n: usize, class_dir: Option<[f64; 3]>, target: bool, rng: &mut crate::rng::Rng| {
        let words: Vec<String> = (0..n).map(|i| word(prefix, i)).collect();
        for w in &words {
            embeddings.push((w.clone(), vec_for(class_dir, target, rng)));
        }
        words
    };
    let sig = cfg.class_signal;
    let (rc, rs) = (cfg.target_rotation.cos(), cfg.target_rotation.sin());
    let sign = |y: usize| if y == 1 { 1.0 } else { -1.0 };
    let pools = Pools {
        shared: [0, 1].map(|y| mk_pool(&format!("sh{}", ["n", "p"][y]), cfg.shared_class_words, Some([sign(y) * sig, 0.0, 0.0]), false, &mut erng)),
        source: [0, 1].map(|y| {
            let dir = [sign(y) * sig, 0.0, sign(y) * cfg.source_spurious];
            mk_pool(&format!("sr{}", ["n", "p"][y]), cfg.source_class_words, Some(dir), false, &mut erng)
        }),
        target: [0, 1].map(|y| {
            mk_pool(
                &format!("tg{}", ["n", "p"][y]),
                cfg.target_class_words,
                Some([sign(y) * sig * rc, sign(y) * sig * rs, 0.0]),
                true,
                &mut erng,
            )
        }),
        fill_shared: mk_pool("fsh", cfg.filler_words, None, false, &mut erng),
        fill_source: mk_pool("fsr", cfg.filler_words, None, false, &mut erng),
        fill_target: mk_pool("ftg", cfg.filler_words, None, true, &mut erng),
    };

    let gen_split = |name: &str, n: usize, side: Side, labeled: bool| -> Vec<SynthLine> {
        let mut rng = streams.stream(&format!("synth/{name}"));
        (0..n)
            .map(|i| {
                let positive_rate = match side {
                    Side::Source => cfg.positive_rate,
                    Side::Target => cfg.target_positive_rate.unwrap_or(cfg.positive_rate),
                };
                let y = usize::from(rng.gen_bool(positive_rate));
                let len = rng.gen_range(cfg.min_len..=cfg.max_len);
                let shared_rate = match side {
                    Side::Source => cfg.source_shared_rate,
                    Side::Target if cfg.target_shared_spread > 0.0 => {
                        let lo = (cfg.target_shared_rate - cfg.target_shared_spread).max(0.0);
                        let hi = (cfg.target_shared_rate + cfg.target_shared_spread).min(1.0);
                        rng.gen_range(lo..=hi)
                    }
                    Side::Target => cfg.target_shared_rate,
                };
                let toks: Vec<&str> = (0..len)
                    .map(|_| {
                        if rng.gen_bool(cfg.class_token_rate) {
                            let pool = if rng.gen_bool(shared_rate) {
                                &pools.shared[y]
                            } else if side == Side::Source {
                                &pools.source[y]
                            } else {
                                &pools.target[y]
                            };
                            pool[rng.gen_range(0..pool.len())].as_str()
                        } else {
                            let pool = if rng.gen_bool(0.5) {
                                &pools.fill_shared
                            } else if side == Side::Source {
                                &pools.fill_source
                            } else {
                                &pools.fill_target
                            };
                            pool[rng.gen_range(0..pool.len())].as_str()
                        }
                    })
                    .collect();
                let shown = if rng.gen_bool(cfg.label_noise) { 1 - y } else { y };
                SynthLine {
                    id: format!("{name}-{i}"),
                    label: if labeled { LABEL_NAMES[shown].to_owned() } else { "UNK".to_owned() },
                    text: toks.join(" "),
                }
            })
            .collect()
    };

    Ok(SynthCorpus {
        labeled: gen_split("labeled", cfg.labeled, Side::Source, true),
        source_unlabeled: gen_split("source_unlabeled", cfg.source_unlabeled, Side::Source, false),
        target_unlabeled: gen_split("target_unlabeled", cfg.target_unlabeled, Side::Target, false),
        source_dev: gen_split("source_dev", cfg.dev, Side::Source, true),
        source_test: gen_split("source_test", cfg.test, Side::Source, true),
        target_dev: gen_split("target_dev", cfg.dev, Side::Target, true),
        target_test: gen_split("target_test", cfg.test, Side::Target, true),
        embeddings,
    })
}

impl SynthCorpus {
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let splits = [
            &self.labeled,
            &self.source_unlabeled,
            &self.target_unlabeled,
            &self.source_dev,
            &self.source_test,
            &self.target_dev,
            &self.target_test,
        ];
        for (name, lines) in FILES.iter().zip(splits) {
            crate::text::write_corpus(
                &dir.join(name),
                lines.iter().map(|l| (l.id.as_str(), l.label.as_str(), l.text.as_str())),
            )?;
        }
        let dim = self.embeddings.first().map_or(0, |e| e.1.len());
        write_word2vec(
            &dir.join(FILES[7]),
            dim,
            self.embeddings.iter().map(|(w, v)| (w.as_str(), v.as_slice())),
        )
    }
}

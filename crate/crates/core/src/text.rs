//! Tweet normalization, corpus files, vocabulary and the frozen embedding
//! table.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::OnceLock;

use rand::Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Bound of the uniform initialization used for words missing from the
/// pretrained file and for the UNK row.
pub const OOV_INIT_BOUND: f64 = 0.25;

pub const DEFAULT_MAX_LEN: usize = 100;

/// Characters removed from inside tokens: anything that is not a letter.
pub const DEFAULT_STRIP_PATTERN: &str = r"[^\p{L}]";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    /// Discriminator target: 0 for source, 1 for target.
    pub fn indicator(self) -> f64 {
        match self {
            Domain::Source => 0.0,
            Domain::Target => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tweet {
    pub id: String,
    pub tokens: Vec<String>,
    pub label: Option<usize>,
    pub domain: Domain,
}

impl Tweet {
    pub fn new(id: impl Into<String>, tokens: Vec<String>, label: Option<usize>, domain: Domain) -> Self {
        Self {
            id: id.into(),
            tokens,
            label,
            domain,
        }
    }

    pub fn unlabeled(mut self) -> Self {
        self.label = None;
        self
    }
}

/// Rule-based tweet normalizer.
///
/// Rules, in order: lowercase and split on whitespace; drop URL tokens
/// (`http…`/`www…`), `@user` mentions, time patterns and any token that
/// contains a digit; strip special characters; drop anything shorter than
/// two characters (or that has turned into a URL prefix).
#[derive(Debug, Clone)]
pub struct Preprocessor {
    time: Regex,
    digit: Regex,
    strip: Regex,
}

impl Default for Preprocessor {
    fn default() -> Self {
        Self::with_strip_pattern(DEFAULT_STRIP_PATTERN).expect("default pattern compiles")
    }
}

impl Preprocessor {
    pub fn with_strip_pattern(pattern: &str) -> Result<Self> {
        let strip = Regex::new(pattern)
            .map_err(|e| Error::Config(format!("bad special-character pattern `{pattern}`: {e}")))?;
        Ok(Self {
            time: Regex::new(r"\d{1,2}:\d{2}").unwrap(),
            digit: Regex::new(r"\d").unwrap(),
            strip,
        })
    }

    pub fn tokens(&self, raw: &str) -> Vec<String> {
        raw.to_lowercase()
            .split_whitespace()
            .filter(|t| !is_url(t) && !t.starts_with('@'))
            .filter(|t| !self.time.is_match(t) && !self.digit.is_match(t))
            .map(|t| self.strip.replace_all(t, "").into_owned())
            .filter(|t| t.chars().count() >= 2 && !is_url(t))
            .collect()
    }
}

fn is_url(token: &str) -> bool {
    token.starts_with("http") || token.starts_with("www")
}

/// Normalizes a raw tweet with the default rules.
pub fn preprocess(raw: &str) -> Vec<String> {
    static DEFAULT: OnceLock<Preprocessor> = OnceLock::new();
    DEFAULT.get_or_init(Preprocessor::default).tokens(raw)
}

/// Class names in index order. The literal `UNK` marks an unlabeled line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    names: Vec<String>,
}

pub const UNLABELED: &str = "UNK";

impl Default for LabelSet {
    fn default() -> Self {
        Self {
            names: vec!["non-relevant".into(), "relevant".into()],
        }
    }
}

impl LabelSet {
    pub fn new(names: Vec<String>) -> Result<Self> {
        let distinct: BTreeSet<_> = names.iter().collect();
        if names.len() < 2 || distinct.len() != names.len() || names.iter().any(|n| n == UNLABELED) {
            return Err(Error::Config(format!("need at least two distinct class names, got {names:?}")));
        }
        Ok(Self { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, class: usize) -> &str {
        &self.names[class]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// `Some(None)` for `UNK`, `Some(Some(k))` for a known class.
    pub fn parse(&self, s: &str) -> Option<Option<usize>> {
        if s == UNLABELED {
            return Some(None);
        }
        self.names.iter().position(|n| n == s).map(Some)
    }

    /// Index reported as `p(relevant)` by prediction output.
    pub fn positive_class(&self) -> usize {
        self.names.iter().position(|n| n == "relevant").unwrap_or(1)
    }
}

#[derive(Debug, Clone)]
pub struct CorpusFile {
    pub tweets: Vec<Tweet>,
    /// Lines whose text normalized to nothing.
    pub dropped_empty: usize,
}

/// Reads an `id<TAB>label<TAB>text` file. Tweets that normalize to nothing
/// are dropped (and counted) unless `keep_empty` is set.
pub fn read_corpus(
    path: &Path,
    domain: Domain,
    labels: &LabelSet,
    pre: &Preprocessor,
    keep_empty: bool,
) -> Result<CorpusFile> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut tweets = Vec::new();
    let mut dropped_empty = 0;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut cols = line.splitn(3, '\t');
        let (id, label, text) = match (cols.next(), cols.next(), cols.next()) {
            (Some(id), Some(label), Some(text)) => (id, label, text),
            (Some(id), Some(text), None) => (id, UNLABELED, text),
            _ => return Err(Error::format(path, lineno, "expected id<TAB>label<TAB>text")),
        };
        let label = labels
            .parse(label.trim())
            .ok_or_else(|| Error::format(path, lineno, format!("unknown label `{label}`")))?;
        let tokens = pre.tokens(text);
        if tokens.is_empty() && !keep_empty {
            dropped_empty += 1;
            continue;
        }
        tweets.push(Tweet::new(id.trim(), tokens, label, domain));
    }
    if dropped_empty > 0 {
        log::warn!("{}: dropped {dropped_empty} empty tweets", path.display());
    }
    Ok(CorpusFile { tweets, dropped_empty })
}

/// Writes `id<TAB>label<TAB>text` lines.
pub fn write_corpus<'a>(
    path: &Path,
    rows: impl IntoIterator<Item = (&'a str, &'a str, &'a str)>,
) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for (id, label, text) in rows {
        writeln!(w, "{id}\t{label}\t{text}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Word list with two reserved rows after the words: UNK then PAD.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(words: Vec<String>) -> Self {
        Self::from_words(words)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.words
    }
}

impl Vocab {
    /// Every distinct token becomes an entry (no frequency cutoff); entries
    /// are sorted so the result does not depend on corpus order.
    pub fn build<'a>(tweets: impl IntoIterator<Item = &'a Tweet>) -> Result<Self> {
        let set: BTreeSet<&str> = tweets
            .into_iter()
            .flat_map(|t| t.tokens.iter().map(String::as_str))
            .collect();
        if set.is_empty() {
            return Err(Error::Config("cannot build a vocabulary from an empty corpus".into()));
        }
        Ok(Self::from_words(set.into_iter().map(str::to_owned).collect()))
    }

    pub fn from_words(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, index }
    }

    /// Number of real words (excluding UNK and PAD).
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.words.len() + 2
    }

    pub fn unk(&self) -> usize {
        self.words.len()
    }

    pub fn pad(&self) -> usize {
        self.words.len() + 1
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn get(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn index_or_unk(&self, word: &str) -> usize {
        self.get(word).unwrap_or_else(|| self.unk())
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for w in &self.words {
            h.update(w.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }
}

/// Frozen lookup matrix with one row per vocabulary word plus UNK and PAD.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    vocab: Vocab,
    dim: usize,
    matrix: Vec<f64>,
    /// Fraction of vocabulary words found in the pretrained file.
    pub coverage: f64,
    pub frozen: bool,
}

impl EmbeddingTable {
    /// Every word row and UNK drawn from `uniform(-0.25, 0.25)`; PAD is zero.
    pub fn random<R: Rng + ?Sized>(vocab: Vocab, dim: usize, rng: &mut R) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        let rows = vocab.rows();
        let mut matrix = vec![0.0; rows * dim];
        for v in &mut matrix[..(rows - 1) * dim] {
            *v = rng.gen_range(-OOV_INIT_BOUND..OOV_INIT_BOUND);
        }
        Ok(Self {
            vocab,
            dim,
            matrix,
            coverage: 0.0,
            frozen: true,
        })
    }

    /// Loads word2vec text vectors (`count dim` header, then `word v1 … vd`).
    /// Vocabulary words present in the file get their file vector; the rest
    /// are initialized as in [`EmbeddingTable::random`].
    pub fn load_word2vec<R: Rng + ?Sized>(path: &Path, vocab: Vocab, rng: &mut R) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::format(path, 1, "missing `count dim` header"))?
            .map_err(|e| Error::io(path, e))?;
        let mut parts = header.split_whitespace();
        let (count, dim) = match (parts.next(), parts.next(), parts.next()) {
            (Some(c), Some(d), None) => match (c.parse::<usize>(), d.parse::<usize>()) {
                (Ok(c), Ok(d)) if d > 0 => (c, d),
                _ => return Err(Error::format(path, 1, format!("bad header `{header}`"))),
            },
            _ => return Err(Error::format(path, 1, format!("bad header `{header}`"))),
        };
        let mut table = Self::random(vocab, dim, rng)?;
        let mut seen = vec![false; table.vocab.len()];
        let mut found = 0usize;
        let mut n_lines = 0usize;
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            n_lines += 1;
            let mut fields = line.split(' ').filter(|s| !s.is_empty());
            let word = fields.next().unwrap_or_default();
            let values: Vec<&str> = fields.collect();
            if values.len() != dim {
                return Err(Error::format(
                    path,
                    lineno,
                    format!("expected {dim} values for `{word}`, found {}", values.len()),
                ));
            }
            let mut parsed = Vec::with_capacity(dim);
            for v in values {
                parsed.push(
                    v.parse::<f64>()
                        .map_err(|_| Error::format(path, lineno, format!("cannot parse `{v}` as a number")))?,
                );
            }
            if let Some(idx) = table.vocab.get(word) {
                if !seen[idx] {
                    seen[idx] = true;
                    found += 1;
                    table.matrix[idx * dim..(idx + 1) * dim].copy_from_slice(&parsed);
                }
            }
        }
        if n_lines != count {
            log::warn!("{}: header announces {count} vectors, file has {n_lines}", path.display());
        }
        table.coverage = found as f64 / table.vocab.len().max(1) as f64;
        log::info!(
            "{}: {found} of {} vocabulary words covered ({:.1}%)",
            path.display(),
            table.vocab.len(),
            100.0 * table.coverage
        );
        Ok(table)
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, index: usize) -> &[f64] {
        &self.matrix[index * self.dim..(index + 1) * self.dim]
    }

    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }

    pub fn from_parts(vocab: Vocab, dim: usize, matrix: Vec<f64>) -> Result<Self> {
        if matrix.len() != vocab.rows() * dim {
            return Err(Error::Integrity(format!(
                "embedding matrix has {} values, expected {}",
                matrix.len(),
                vocab.rows() * dim
            )));
        }
        Ok(Self {
            vocab,
            dim,
            matrix,
            coverage: 0.0,
            frozen: true,
        })
    }

    /// Row indices for a token list, truncated to `max_len`. An empty list
    /// maps to a single UNK.
    pub fn token_ids(&self, tokens: &[String], max_len: usize) -> Vec<usize> {
        if tokens.is_empty() {
            return vec![self.vocab.unk()];
        }
        tokens
            .iter()
            .take(max_len)
            .map(|t| self.vocab.index_or_unk(t))
            .collect()
    }

    /// `[n, d]` matrix of embedding rows (UNK for out-of-vocabulary tokens),
    /// truncated to `max_len` rows.
    pub fn lookup(&self, tweet: &Tweet, max_len: usize) -> Tensor {
        self.lookup_ids(&self.token_ids(&tweet.tokens, max_len))
    }

    pub fn lookup_ids(&self, ids: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(ids.len() * self.dim);
        for &i in ids {
            data.extend_from_slice(self.row(i));
        }
        Tensor::matrix(ids.len(), self.dim, data).expect("consistent shape")
    }

    /// Average of the embedding rows of all tokens of a tweet.
    pub fn mean_vector(&self, tweet: &Tweet) -> Result<Vec<f64>> {
        if tweet.tokens.is_empty() {
            return Err(Error::Data(format!("tweet `{}` has no tokens", tweet.id)));
        }
        let mut mean = vec![0.0; self.dim];
        for t in &tweet.tokens {
            for (m, v) in mean.iter_mut().zip(self.row(self.vocab.index_or_unk(t))) {
                *m += v;
            }
        }
        let n = tweet.tokens.len() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        Ok(mean)
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.vocab.hash().as_bytes());
        h.update((self.dim as u64).to_le_bytes());
        for v in &self.matrix {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Writes vectors in word2vec text format.
pub fn write_word2vec<'a>(path: &Path, dim: usize, rows: impl ExactSizeIterator<Item = (&'a str, &'a [f64])>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{} {dim}", rows.len()).map_err(|e| Error::io(path, e))?;
    let mut line = String::new();
    for (word, v) in rows {
        line.clear();
        line.push_str(word);
        for x in v {
            write!(line, " {x}").unwrap();
        }
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

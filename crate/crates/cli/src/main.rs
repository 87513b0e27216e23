mod manifest;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tweetshift::experiment::{workers_from_env, Experiment, ExperimentSpec, WORKERS_ENV};
use tweetshift::graph::{GraphNodes, SimilarityGraph};
use tweetshift::model::{Checkpoint, Model};
use tweetshift::rng::SeedStreams;
use tweetshift::synth::{generate, SynthConfig};
use tweetshift::text::{read_corpus, Domain, EmbeddingTable, LabelSet, Preprocessor, Tweet, Vocab};
use tweetshift::trainer::evaluate_tweets;
use tweetshift::{Error, Result};

use manifest::RunManifest;

#[derive(Debug, Parser)]
#[command(name = "tweetshift", version, about = "Cross-domain tweet classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a kNN similarity graph over mean word vectors.
    BuildGraph {
        /// Source-domain corpus (labeled lines first, `UNK` lines are unlabeled).
        #[arg(long = "corpus", required = true)]
        corpora: Vec<PathBuf>,
        /// Target-domain unlabeled corpus.
        #[arg(long = "target-corpus")]
        target_corpora: Vec<PathBuf>,
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// Dimension of random vectors when no embedding file is given.
        #[arg(long, default_value_t = 300)]
        dim: usize,
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// Maximum number of unlabeled tweets taken from each domain.
        #[arg(long, default_value_t = 50_000)]
        cap: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Comma-separated class names in index order.
        #[arg(long, value_delimiter = ',')]
        labels: Option<Vec<String>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an experiment grid described by a TOML file.
    Train {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a labeled corpus.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Graph the checkpoint must have been trained with.
        #[arg(long)]
        graph: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        labels: Option<Vec<String>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write `id<TAB>class<TAB>p(relevant)` for every input line.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        graph: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        labels: Option<Vec<String>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic two-domain corpus and matching embeddings.
    Synth {
        /// TOML file with generator settings; defaults are used otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 4 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::BuildGraph {
            corpora,
            target_corpora,
            embeddings,
            dim,
            k,
            cap,
            seed,
            labels,
            out,
        } => build_graph(&corpora, &target_corpora, embeddings.as_deref(), dim, k, cap, seed, labels, &out),
        Command::Train { spec, out } => train(&spec, &out),
        Command::Evaluate {
            checkpoint,
            corpus,
            graph,
            labels,
            out,
        } => evaluate(&checkpoint, &corpus, graph.as_deref(), labels, &out),
        Command::Predict {
            checkpoint,
            input,
            graph,
            labels,
            out,
        } => predict(&checkpoint, &input, graph.as_deref(), labels, &out),
        Command::Synth { config, seed, out } => synth(config.as_deref(), seed, &out),
    }
}

fn label_set(labels: Option<Vec<String>>) -> Result<LabelSet> {
    labels.map_or_else(|| Ok(LabelSet::default()), LabelSet::new)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn to_json<T: serde::Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).unwrap_or(serde_json::Value::Null)
}

#[allow(clippy::too_many_arguments)]
fn build_graph(
    corpora: &[PathBuf],
    target_corpora: &[PathBuf],
    embeddings: Option<&Path>,
    dim: usize,
    k: usize,
    cap: usize,
    seed: u64,
    labels: Option<Vec<String>>,
    out: &Path,
) -> Result<()> {
    let labels = label_set(labels)?;
    let pre = Preprocessor::default();
    let mut labeled = Vec::new();
    let mut source_unl = Vec::new();
    let mut target_unl = Vec::new();
    for p in corpora {
        for t in read_corpus(p, Domain::Source, &labels, &pre, false)?.tweets {
            if t.label.is_some() {
                labeled.push(t);
            } else {
                source_unl.push(t);
            }
        }
    }
    for p in target_corpora {
        target_unl.extend(read_corpus(p, Domain::Target, &labels, &pre, false)?.tweets);
    }
    let streams = SeedStreams::new(seed);
    let target = (!target_corpora.is_empty()).then_some(target_unl.as_slice());
    let nodes = GraphNodes::assemble(&labeled, &source_unl, target, cap, &mut streams.stream("subsample/graph"));
    let vocab = Vocab::build(nodes.tweets.iter())?;
    let table = load_table(embeddings, vocab, dim, seed)?;
    let graph = SimilarityGraph::build(&nodes.tweets, nodes.meta.clone(), &table, k)?;

    create_dir(out)?;
    graph.write(&out.join("graph.txt"))?;
    let mut listing = String::from("node\tid\torigin\tlabel\n");
    for (i, (t, m)) in nodes.tweets.iter().zip(&nodes.meta).enumerate() {
        let label = m.label.map_or("UNK", |c| labels.name(c));
        listing.push_str(&format!("{i}\t{}\t{:?}\t{label}\n", t.id, m.origin));
    }
    write_file(&out.join("nodes.tsv"), &listing)?;

    let config = serde_json::json!({ "k": k, "cap": cap, "dim": table.dim(), "labels": labels.names() });
    let mut m = RunManifest::new("build-graph", None, config, Some(seed));
    for p in corpora.iter().chain(target_corpora).map(PathBuf::as_path).chain(embeddings) {
        m.input(p)?;
    }
    m.artifact("graph.txt");
    m.artifact("nodes.tsv");
    m.write(out)?;
    println!("n={} k={} mean_neighbor_distance={:.6}", graph.len(), graph.k(), graph.mean_neighbor_distance());
    Ok(())
}

fn load_table(embeddings: Option<&Path>, vocab: Vocab, dim: usize, seed: u64) -> Result<EmbeddingTable> {
    let mut rng = SeedStreams::new(seed).stream("embeddings");
    match embeddings {
        Some(p) => EmbeddingTable::load_word2vec(p, vocab, &mut rng),
        None => EmbeddingTable::random(vocab, dim, &mut rng),
    }
}

fn train(spec_path: &Path, out: &Path) -> Result<()> {
    // Everything is validated before the output directory is touched.
    let spec = ExperimentSpec::load(spec_path)?;
    let exp = Experiment::new(spec.clone())?;
    let workers = workers_from_env();
    log::info!("{} cells on {workers} worker(s) (set {WORKERS_ENV} to change)", spec.cells().len());
    create_dir(out)?;
    let results = exp.run(out, workers)?;

    let mut m = RunManifest::new("train", Some(spec_path), to_json(&spec), (spec.seeds.len() == 1).then(|| spec.seeds[0]));
    m.input(spec_path)?;
    let d = &spec.data;
    for p in [Some(&d.labeled), d.source_unlabeled.as_ref(), d.target_unlabeled.as_ref(), Some(&d.dev), Some(&d.test), d.embeddings.as_ref()]
        .into_iter()
        .flatten()
    {
        m.input(p)?;
    }
    m.artifact("metrics.tsv");
    for r in &results {
        let stem = r.cell.file_stem();
        m.artifact(format!("curves/{stem}.tsv"));
        if spec.save_checkpoints {
            m.artifact(format!("checkpoints/{stem}.json"));
        }
    }
    m.write(out)?;
    for r in &results {
        println!("{}\tf1={:.4}", r.cell.key(), r.test.f1);
    }
    Ok(())
}

fn load_checkpoint(path: &Path, graph: Option<&Path>) -> Result<Model> {
    let ck = Checkpoint::read(path)?;
    if let Some(g) = graph {
        ck.expect_graph(&SimilarityGraph::read(g)?.checksum())?;
    }
    Model::from_checkpoint(&ck)
}

fn read_input(path: &Path, labels: &LabelSet) -> Result<Vec<Tweet>> {
    let tweets = read_corpus(path, Domain::Target, labels, &Preprocessor::default(), true)?.tweets;
    if tweets.is_empty() {
        log::warn!("{}: no input lines", path.display());
    }
    Ok(tweets)
}

fn evaluate(checkpoint: &Path, corpus: &Path, graph: Option<&Path>, labels: Option<Vec<String>>, out: &Path) -> Result<()> {
    let labels = label_set(labels)?;
    let model = load_checkpoint(checkpoint, graph)?;
    check_classes(&model, &labels)?;
    let tweets = read_input(corpus, &labels)?;
    if let Some(t) = tweets.iter().find(|t| t.label.is_none()) {
        return Err(Error::Config(format!("{}: `{}` has no gold label", corpus.display(), t.id)));
    }
    let text = if tweets.is_empty() {
        String::new()
    } else {
        let r = evaluate_tweets(&model, &tweets)?;
        println!("n={} auc={} precision={:.4} recall={:.4} f1={:.4}", tweets.len(), tweetshift::metrics::fmt_auc(r.auc), r.precision, r.recall, r.f1);
        r.to_tsv(labels.names())
    };
    create_dir(out)?;
    write_file(&out.join("eval.tsv"), &text)?;
    let mut m = RunManifest::new("evaluate", None, serde_json::json!({ "labels": labels.names() }), None);
    m.input(checkpoint)?;
    m.input(corpus)?;
    if let Some(g) = graph {
        m.input(g)?;
    }
    m.artifact("eval.tsv");
    m.write(out)?;
    Ok(())
}

fn check_classes(model: &Model, labels: &LabelSet) -> Result<()> {
    if model.config().num_classes != labels.len() {
        return Err(Error::Config(format!(
            "checkpoint has {} classes but {} labels were given",
            model.config().num_classes,
            labels.len()
        )));
    }
    Ok(())
}

fn predict(checkpoint: &Path, input: &Path, graph: Option<&Path>, labels: Option<Vec<String>>, out: &Path) -> Result<()> {
    let labels = label_set(labels)?;
    let model = load_checkpoint(checkpoint, graph)?;
    check_classes(&model, &labels)?;
    let tweets = read_input(input, &labels)?;
    let positive = labels.positive_class();
    let mut text = Vec::new();
    for t in &tweets {
        let p = model.predict_tweet(t)?;
        writeln!(text, "{}\t{}\t{:.6}", t.id, labels.name(p.class), p.probs[positive]).expect("write to memory");
    }
    create_dir(out)?;
    fs::write(out.join("predictions.tsv"), &text).map_err(|e| Error::io(out.join("predictions.tsv"), e))?;
    let mut m = RunManifest::new("predict", None, serde_json::json!({ "labels": labels.names() }), None);
    m.input(checkpoint)?;
    m.input(input)?;
    if let Some(g) = graph {
        m.input(g)?;
    }
    m.artifact("predictions.tsv");
    m.write(out)?;
    Ok(())
}

fn synth(config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut cfg = match config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str::<SynthConfig>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => SynthConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let corpus = generate(&cfg)?;
    corpus.write(out)?;
    let mut m = RunManifest::new("synth", config, to_json(&cfg), Some(cfg.seed));
    if let Some(p) = config {
        m.input(p)?;
    }
    for f in tweetshift::synth::FILES {
        m.artifact(f);
    }
    m.write(out)?;
    println!("wrote {} files to {}", tweetshift::synth::FILES.len(), out.display());
    Ok(())
}

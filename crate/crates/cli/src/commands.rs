use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use contrastive_embed::ablation::{ablation_table, batch_size_ablation};
use contrastive_embed::config::RunConfig;
use contrastive_embed::container::write_atomic;
use contrastive_embed::data::{
    read_jsonl, read_pairs, read_qrels, write_jsonl, LabelDescription, LabeledText, SimilarityPair, TextRecord,
};
use contrastive_embed::encoder::Encoder;
use contrastive_embed::eval::{
    embed_labeled, evaluate_retrieval, knn_accuracy, linear_probe_with, sentence_similarity_eval, track_checkpoints,
    tracking_csv, zero_shot_classify_many, EmptyQrels, PromptTemplate, Suite,
};
use contrastive_embed::index::{IndexMode, VectorIndex};
use contrastive_embed::miner::mine_code_pairs;
use contrastive_embed::tokenizer::Side;
use contrastive_embed::trainer::{load_checkpoint, metrics_csv, save_checkpoint, Checkpoint, Trainer};
use serde::Serialize;

use crate::Command;

const CHUNK: usize = 64;

/// A command-line mistake that clap cannot catch (exit code 1).
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training pairs (JSONL); defaults to `data.train` from the config.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Metrics CSV path; defaults to `<out>.metrics.csv`.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Continue from this checkpoint instead of a fresh initialisation.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// JSONL records with `id` and `text`.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value = "x")]
    side: Side,
    /// Raw little-endian float32 output; the manifest goes to `<out>.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct IndexArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Corpus JSONL with `id` and `text`.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// `flat` or `graph`; defaults to `eval.index_mode`.
    #[arg(long)]
    mode: Option<IndexMode>,
    /// Seed for graph construction.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[arg(long)]
    index: PathBuf,
    /// Checkpoint used to embed the query; must match the index.
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    query: String,
    #[arg(long, default_value_t = 10)]
    k: usize,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Labeled JSONL (`text`, `label`).
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    test: PathBuf,
}

#[derive(Debug, Args)]
pub struct KnnArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// Neighbours to vote; defaults to `eval.knn_k`.
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ZeroShotArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// JSONL with `label` and `description`.
    #[arg(long)]
    labels: PathBuf,
    /// Labeled JSONL (`text`, `label`).
    #[arg(long)]
    test: PathBuf,
    /// Prompt with one `{label}` slot; defaults to `eval.template`.
    #[arg(long)]
    template: Option<String>,
}

#[derive(Debug, Args)]
pub struct RetrievalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    /// TSV: query_id, doc_id, relevance.
    #[arg(long)]
    qrels: PathBuf,
    #[arg(long)]
    mode: Option<IndexMode>,
    /// Score queries with no relevant documents as zero instead of skipping them.
    #[arg(long)]
    count_empty_as_zero: bool,
}

#[derive(Debug, Args)]
pub struct StsArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// JSONL with `a`, `b`, `score`.
    #[arg(long)]
    pairs: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Training pairs; defaults to `data.train`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Held-out pairs for retrieval scoring; defaults to `data.heldout`.
    #[arg(long)]
    heldout: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', required = true)]
    batch_sizes: Vec<usize>,
    /// Total training pairs per run; steps are `pairs_seen / M`.
    #[arg(long)]
    pairs_seen: u64,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    /// TSV results table; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MineArgs {
    /// Source files or directories.
    #[arg(long = "input", required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Report paths relative to this directory.
    #[arg(long)]
    root: Option<PathBuf>,
    /// Write `{"x": docstring, "y": code, "id": ...}` training records instead.
    #[arg(long)]
    as_training_pairs: bool,
}

#[derive(Debug, Args)]
pub struct TrackArgs {
    /// Checkpoints in evaluation order. Repeatable.
    #[arg(long = "ckpt", required = true)]
    ckpts: Vec<PathBuf>,
    /// Retrieval suite directory holding corpus.jsonl, queries.jsonl, qrels.tsv.
    #[arg(long)]
    retrieval: Option<PathBuf>,
    /// Sentence-similarity pairs JSONL.
    #[arg(long)]
    sts: Option<PathBuf>,
    /// Linear-probe train and test JSONL, comma separated.
    #[arg(long, value_delimiter = ',', num_args = 2)]
    probe: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

/// Copies flag values that shadow config keys into `config` so that
/// `--print-config` reflects them.
pub fn apply_flag_overrides(command: &Command, config: &mut RunConfig) -> Result<()> {
    match command {
        Command::Train(a) => {
            let t = &mut config.train;
            t.seed = a.seed.unwrap_or(t.seed);
            t.total_steps = a.steps.unwrap_or(t.total_steps);
            t.batch_size = a.batch_size.unwrap_or(t.batch_size);
            t.learning_rate = a.lr.unwrap_or(t.learning_rate);
            if let Some(d) = &a.data {
                config.data.train = Some(d.clone());
            }
        }
        Command::AblateBatch(a) => {
            config.train.seed = a.seed.unwrap_or(config.train.seed);
            config.train.learning_rate = a.lr.unwrap_or(config.train.learning_rate);
            if let Some(d) = &a.data {
                config.data.train = Some(d.clone());
            }
            if let Some(d) = &a.heldout {
                config.data.heldout = Some(d.clone());
            }
        }
        Command::Index(a) => {
            config.eval.graph.seed = a.seed.unwrap_or(config.eval.graph.seed);
            config.eval.index_mode = a.mode.unwrap_or(config.eval.index_mode);
        }
        Command::EvalRetrieval(a) => {
            config.eval.index_mode = a.mode.unwrap_or(config.eval.index_mode);
            if a.count_empty_as_zero {
                config.eval.empty_qrels = EmptyQrels::CountZero;
            }
        }
        Command::EvalKnn(a) => config.eval.knn_k = a.k.unwrap_or(config.eval.knn_k),
        Command::EvalZeroshot(a) => {
            if let Some(t) = &a.template {
                config.eval.template = t.clone();
            }
        }
        _ => {}
    }
    config.train.validate()?;
    Ok(())
}

fn encoder_from(path: &Path) -> Result<Encoder> {
    Ok(load_checkpoint(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))?
        .encoder)
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn train(a: &TrainArgs, config: &RunConfig) -> Result<()> {
    let data_path = config
        .data
        .train
        .as_ref()
        .ok_or_else(|| usage("no training data: pass --data or set data.train"))?;
    let data = read_pairs(data_path)?;
    let state = match &a.resume {
        Some(p) => {
            let mut c = load_checkpoint(p)?;
            if c.config.encoder != config.train.encoder || c.config.batch_size != config.train.batch_size {
                return Err(usage("resume checkpoint was trained with a different encoder or batch size"));
            }
            c.config.total_steps = config.train.total_steps;
            c
        }
        None => Checkpoint::initial(&config.train)?,
    };
    let every = config.train.eval_every;
    let mut trainer = Trainer::resume(state, &data)?;
    log::info!(
        "training on {} pairs, batch {}, {} steps",
        data.len(),
        config.train.batch_size,
        config.train.total_steps
    );
    let out = &a.out;
    let metrics = trainer.run_until(config.train.total_steps, |state, m| {
        if m.step % 50 == 0 {
            log::info!("step {} loss {:.5} exp_tau {:.3}", m.step, m.loss, m.exp_tau);
        }
        if every > 0 && m.step % every == 0 && m.step < state.config.total_steps {
            save_checkpoint(state, &sibling(out, &format!(".step{}", m.step)))?;
        }
        Ok(())
    })?;
    save_checkpoint(trainer.state(), out)?;
    let metrics_path = a.metrics.clone().unwrap_or_else(|| sibling(out, ".metrics.csv"));
    write_atomic(&metrics_path, metrics_csv(&metrics).as_bytes())?;
    log::info!("wrote {} and {}", out.display(), metrics_path.display());
    Ok(())
}

#[derive(Serialize)]
struct EmbeddingManifest<'a> {
    count: usize,
    dim: usize,
    dtype: &'static str,
    byte_order: &'static str,
    side: Side,
    data_file: String,
    ids: Vec<&'a str>,
}

pub fn embed(a: &EmbedArgs) -> Result<()> {
    let encoder = encoder_from(&a.ckpt)?;
    let records: Vec<TextRecord> = read_jsonl(&a.input)?;
    let texts: Vec<&str> = records.iter().map(|r| r.text.as_str()).collect();
    let embs = encoder.embed_texts(&texts, a.side, CHUNK)?;
    let mut bytes = Vec::with_capacity(embs.len() * encoder.dim() * 4);
    for e in &embs {
        for v in e.as_slice() {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    write_atomic(&a.out, &bytes)?;
    let manifest = EmbeddingManifest {
        count: embs.len(),
        dim: encoder.dim(),
        dtype: "float32",
        byte_order: "little",
        side: a.side,
        data_file: a
            .out
            .file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_default(),
        ids: records.iter().map(|r| r.id.as_str()).collect(),
    };
    let json = serde_json::to_string_pretty(&manifest)? + "\n";
    write_atomic(&sibling(&a.out, ".json"), json.as_bytes())?;
    log::info!("embedded {} texts", embs.len());
    Ok(())
}

pub fn index(a: &IndexArgs, config: &RunConfig) -> Result<()> {
    let encoder = encoder_from(&a.ckpt)?;
    let corpus: Vec<TextRecord> = read_jsonl(&a.corpus)?;
    let texts: Vec<&str> = corpus.iter().map(|r| r.text.as_str()).collect();
    let embs = encoder.embed_texts(&texts, Side::Y, CHUNK)?;
    let entries = corpus.iter().map(|r| r.id.clone()).zip(embs.into_iter().map(|e| e.into_vec())).collect();
    let idx = VectorIndex::build_with(entries, config.eval.index_mode, config.eval.graph)?;
    idx.save(&a.out)?;
    log::info!("indexed {} documents ({:?})", idx.len(), idx.mode());
    Ok(())
}

pub fn search(a: &SearchArgs) -> Result<()> {
    if a.k == 0 {
        return Err(usage("--k must be at least 1"));
    }
    let encoder = encoder_from(&a.ckpt)?;
    let idx = VectorIndex::load(&a.index)?;
    if idx.dim() != encoder.dim() {
        return Err(usage(format!(
            "index dimension {} does not match checkpoint dimension {}",
            idx.dim(),
            encoder.dim()
        )));
    }
    let q = encoder.embed_texts(&[a.query.as_str()], Side::X, 1)?;
    for hit in idx.search(q[0].as_slice(), a.k)? {
        println!("{}\t{:.6}", hit.id, hit.score);
    }
    Ok(())
}

#[derive(Serialize)]
struct Accuracy {
    accuracy: f64,
    n_test: usize,
}

pub fn eval_probe(a: &ProbeArgs, config: &RunConfig) -> Result<()> {
    let encoder = encoder_from(&a.ckpt)?;
    let train: Vec<LabeledText> = read_jsonl(&a.train)?;
    let test: Vec<LabeledText> = read_jsonl(&a.test)?;
    let accuracy = linear_probe_with(
        &embed_labeled(&encoder, &train)?,
        &embed_labeled(&encoder, &test)?,
        &config.eval.probe,
    )?;
    print_json(&Accuracy {
        accuracy,
        n_test: test.len(),
    })
}

pub fn eval_knn(a: &KnnArgs, config: &RunConfig) -> Result<()> {
    let encoder = encoder_from(&a.ckpt)?;
    let train = embed_labeled(&encoder, &read_jsonl::<LabeledText>(&a.train)?)?;
    let test = embed_labeled(&encoder, &read_jsonl::<LabeledText>(&a.test)?)?;
    let accuracy = knn_accuracy(&train, &test, config.eval.knn_k)?;
    print_json(&Accuracy {
        accuracy,
        n_test: test.len(),
    })
}

pub fn eval_zeroshot(a: &ZeroShotArgs, config: &RunConfig) -> Result<()> {
    let encoder = encoder_from(&a.ckpt)?;
    let labels: Vec<LabelDescription> = read_jsonl(&a.labels)?;
    let test: Vec<LabeledText> = read_jsonl(&a.test)?;
    if test.is_empty() {
        return Err(contrastive_embed::Error::Data("empty test set".into()).into());
    }
    let template = match config.eval.template.as_str() {
        "" => None,
        t => Some(PromptTemplate::new(t)?),
    };
    let texts: Vec<&str> = test.iter().map(|t| t.text.as_str()).collect();
    let pred = zero_shot_classify_many(&encoder, &labels, &texts, template.as_ref())?;
    let correct = pred.iter().zip(&test).filter(|(p, t)| **p == t.label).count();
    print_json(&Accuracy {
        accuracy: correct as f64 / test.len() as f64,
        n_test: test.len(),
    })
}

pub fn eval_retrieval(a: &RetrievalArgs, config: &RunConfig) -> Result<()> {
    let encoder = encoder_from(&a.ckpt)?;
    let corpus: Vec<TextRecord> = read_jsonl(&a.corpus)?;
    let queries: Vec<TextRecord> = read_jsonl(&a.queries)?;
    let qrels = read_qrels(&a.qrels)?;
    let report = evaluate_retrieval(
        &encoder,
        &queries,
        &corpus,
        &qrels,
        config.eval.index_mode,
        config.eval.empty_qrels,
    )?;
    print_json(&report)
}

#[derive(Serialize)]
struct Spearman {
    spearman: f64,
    n_pairs: usize,
}

pub fn eval_sts(a: &StsArgs) -> Result<()> {
    let encoder = encoder_from(&a.ckpt)?;
    let pairs: Vec<SimilarityPair> = read_jsonl(&a.pairs)?;
    print_json(&Spearman {
        spearman: sentence_similarity_eval(&encoder, &pairs)?,
        n_pairs: pairs.len(),
    })
}

pub fn ablate(a: &AblateArgs, config: &RunConfig) -> Result<()> {
    let train_path = config
        .data
        .train
        .as_ref()
        .ok_or_else(|| usage("no training data: pass --data or set data.train"))?;
    let heldout_path = config
        .data
        .heldout
        .as_ref()
        .ok_or_else(|| usage("no held-out data: pass --heldout or set data.heldout"))?;
    let rows = batch_size_ablation(
        &config.train,
        &read_pairs(train_path)?,
        &read_pairs(heldout_path)?,
        &a.batch_sizes,
        a.pairs_seen,
    )?;
    let table = ablation_table(&rows);
    match &a.out {
        Some(p) => write_atomic(p, table.as_bytes())?,
        None => print!("{table}"),
    }
    Ok(())
}

#[derive(Serialize)]
struct TrainingRecord<'a> {
    x: &'a str,
    y: &'a str,
    id: String,
}

pub fn mine(a: &MineArgs) -> Result<()> {
    let report = mine_code_pairs(&a.inputs, a.root.as_deref())?;
    if a.as_training_pairs {
        let records: Vec<TrainingRecord> = report
            .pairs
            .iter()
            .enumerate()
            .map(|(i, p)| TrainingRecord {
                x: &p.docstring,
                y: &p.code,
                id: format!("{}#{i}", p.source_path),
            })
            .collect();
        write_jsonl(&a.out, &records)?;
    } else {
        write_jsonl(&a.out, &report.pairs)?;
    }
    log::info!("mined {} pairs; skipped {} files", report.pairs.len(), report.skipped.len());
    Ok(())
}

pub fn track(a: &TrackArgs, _config: &RunConfig) -> Result<()> {
    let mut suites = Vec::new();
    if let Some(dir) = &a.retrieval {
        suites.push(Suite::Retrieval {
            corpus: read_jsonl(&dir.join("corpus.jsonl"))?,
            queries: read_jsonl(&dir.join("queries.jsonl"))?,
            qrels: read_qrels(&dir.join("qrels.tsv"))?,
        });
    }
    if let Some(p) = &a.sts {
        suites.push(Suite::Similarity { pairs: read_jsonl(p)? });
    }
    if let [train, test] = a.probe.as_slice() {
        suites.push(Suite::Probe {
            train: read_jsonl(train)?,
            test: read_jsonl(test)?,
        });
    }
    if suites.is_empty() {
        return Err(usage("choose at least one suite: --retrieval, --sts or --probe"));
    }
    let ckpts = a.ckpts.iter().map(|p| load_checkpoint(p)).collect::<Result<Vec<_>, _>>()?;
    let rows = track_checkpoints(&ckpts, &suites)?;
    write_atomic(&a.out, tracking_csv(&rows).as_bytes())?;
    Ok(())
}

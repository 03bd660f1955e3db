//! The `skd` command line: corpus generation, teacher training,
//! distillation, decoding, evaluation and perturbation preview.
//!
//! Every flag takes a value and is named after the config field it sets, so
//! a `key=value` config file (or the `args` object of a run manifest) maps
//! onto flags one to one. Flags on the command line override the file.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::data::{
    detokenize, load_corpus, read_records, string_field, tokenize, truncate,
    write_synthetic_corpus, Example, SyntheticSpec, Vocabulary,
};
use crate::decode::{beam_search, DecodeConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate_system, perplexity};
use crate::model::ModelConfig;
use crate::noise::{build_replacement_table, perturb_pipeline, NoiseConfig};
use crate::par;
use crate::seeding::{derive_rng, Purpose};
use crate::trainer::{
    train_student, train_teacher, DistillConfig, Optimizer, TrainConfig, TrainOutcome,
};

#[derive(Parser, Debug)]
#[command(
    name = "skd",
    version,
    about = "Noisy self-knowledge distillation for summarization"
)]
#[command(args_override_self = true)]
pub struct Cli {
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// key=value file (or a run manifest) supplying default flag values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic train/dev/test corpus and its vocabulary.
    GenCorpus(GenCorpusArgs),
    /// Train a model from scratch on label-smoothed NLL.
    TrainTeacher(TrainTeacherArgs),
    /// Train a student from a frozen teacher with input noise.
    Distill(DistillArgs),
    /// Summarize documents with beam search.
    Decode(DecodeArgs),
    /// Report ROUGE F1 and perplexity on a test split.
    Evaluate(EvaluateArgs),
    /// Write perturbed copies of documents.
    PerturbPreview(PerturbPreviewArgs),
}

#[derive(Args, Debug, Serialize)]
struct GenCorpusArgs {
    /// Output directory.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    n_train: usize,
    #[arg(long, default_value_t = 100)]
    n_dev: usize,
    #[arg(long, default_value_t = 100)]
    n_test: usize,
    /// Vocabulary size including the four reserved tokens.
    #[arg(long, default_value_t = 200)]
    vocab_size: usize,
    #[arg(long, default_value_t = 60)]
    max_doc_tokens: usize,
    /// Place the key sentence first; otherwise at a random position.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    key_sentence_first: bool,
}

#[derive(Args, Debug, Serialize)]
struct CorpusArgs {
    /// Training split (JSON Lines with `src` and `tgt`).
    #[arg(long)]
    train: PathBuf,
    /// Dev split used for model selection.
    #[arg(long)]
    dev: PathBuf,
    /// Vocabulary file, one token per line.
    #[arg(long)]
    vocab: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct ModelArgs {
    #[arg(long, default_value_t = 2)]
    num_layers: usize,
    #[arg(long, default_value_t = 64)]
    hidden_size: usize,
    #[arg(long, default_value_t = 128)]
    ff_size: usize,
    #[arg(long, default_value_t = 4)]
    num_heads: usize,
    #[arg(long, default_value_t = 0.1)]
    dropout_rate: f64,
    /// Sources are truncated to this many tokens.
    #[arg(long, default_value_t = 64)]
    max_src_len: usize,
    /// Longest target prefix, BOS included.
    #[arg(long, default_value_t = 16)]
    max_tgt_len: usize,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    /// sgd or adam.
    #[arg(long, default_value = "adam")]
    optimizer: Optimizer,
    #[arg(long, default_value_t = TrainConfig::default().learning_rate)]
    learning_rate: f64,
    /// SGD momentum, or Adam's first-moment decay.
    #[arg(long, default_value_t = TrainConfig::default().momentum)]
    momentum: f64,
    #[arg(long, default_value_t = TrainConfig::default().beta2)]
    beta2: f64,
    #[arg(long, default_value_t = TrainConfig::default().warmup_steps)]
    warmup_steps: u64,
    /// Decay the learning rate linearly to zero after warmup.
    #[arg(long, default_value_t = TrainConfig::default().linear_decay, action = clap::ArgAction::Set)]
    linear_decay: bool,
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    batch_size: usize,
    #[arg(long, default_value_t = TrainConfig::default().max_epochs)]
    max_epochs: usize,
    /// Evaluate every N updates; 0 evaluates once per epoch.
    #[arg(long, default_value_t = TrainConfig::default().eval_every)]
    eval_every: u64,
    #[arg(long, default_value_t = TrainConfig::default().patience)]
    patience: usize,
    #[arg(long, default_value_t = TrainConfig::default().label_smoothing)]
    label_smoothing: f64,
    /// Gradient norm limit; 0 disables clipping.
    #[arg(long, default_value_t = TrainConfig::default().clip_norm.unwrap_or(0.0))]
    clip_norm: f64,
    /// Seeds initialization, shuffling and dropout.
    #[arg(long, default_value_t = TrainConfig::default().seed)]
    seed: u64,
}

impl TrainArgs {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            optimizer: self.optimizer,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            beta2: self.beta2,
            warmup_steps: self.warmup_steps,
            linear_decay: self.linear_decay,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            eval_every: self.eval_every,
            patience: self.patience,
            label_smoothing: self.label_smoothing,
            clip_norm: (self.clip_norm != 0.0).then_some(self.clip_norm),
            seed: self.seed,
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct NoiseArgs {
    /// Word-drop probability.
    #[arg(long, default_value_t = 0.1)]
    word_drop: f64,
    /// Word-replacement probability.
    #[arg(long, default_value_t = 0.1)]
    word_replace: f64,
    /// Replacement candidates per word.
    #[arg(long, default_value_t = 10)]
    candidates: usize,
    /// Sentence-drop probability.
    #[arg(long, default_value_t = 0.05)]
    sentence_drop: f64,
    /// Standard deviation of the multiplicative embedding noise.
    #[arg(long, default_value_t = 0.1)]
    gaussian_sigma: f64,
    #[arg(long, default_value_t = false, action = clap::ArgAction::Set)]
    gaussian_enabled: bool,
    /// Seeds the perturbation streams.
    #[arg(long, default_value_t = 0)]
    noise_seed: u64,
}

impl NoiseArgs {
    fn config(&self) -> NoiseConfig {
        NoiseConfig {
            word_drop: self.word_drop,
            word_replace: self.word_replace,
            candidates: self.candidates,
            sentence_drop: self.sentence_drop,
            gaussian_sigma: self.gaussian_sigma,
            gaussian_enabled: self.gaussian_enabled,
            seed: self.noise_seed,
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct DecodeFlags {
    #[arg(long, default_value_t = 5)]
    beam_size: usize,
    /// Length-penalty exponent.
    #[arg(long, default_value_t = 0.8)]
    length_penalty: f64,
    /// Most generated tokens, EOS included.
    #[arg(long, default_value_t = 32)]
    max_len: usize,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    block_trigrams: bool,
}

impl DecodeFlags {
    fn config(&self) -> DecodeConfig {
        DecodeConfig {
            beam_size: self.beam_size,
            length_penalty: self.length_penalty,
            max_len: self.max_len,
            block_trigrams: self.block_trigrams,
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct TrainTeacherArgs {
    #[command(flatten)]
    #[serde(flatten)]
    corpus: CorpusArgs,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Training log (JSON Lines); defaults to `<out>.log.jsonl`.
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    #[serde(flatten)]
    train: TrainArgs,
}

#[derive(Args, Debug, Serialize)]
struct DistillArgs {
    /// Trained teacher checkpoint.
    #[arg(long)]
    teacher: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    corpus: CorpusArgs,
    /// Student checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Training log (JSON Lines); defaults to `<out>.log.jsonl`.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Weight of the distillation term.
    #[arg(long, default_value_t = 0.5)]
    lambda: f64,
    /// Teacher dropout while producing soft targets.
    #[arg(long, default_value_t = 0.1)]
    teacher_dropout: f64,
    #[command(flatten)]
    #[serde(flatten)]
    noise: NoiseArgs,
    #[command(flatten)]
    #[serde(flatten)]
    train: TrainArgs,
}

#[derive(Args, Debug, Serialize)]
struct DecodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Documents to summarize (JSON Lines with `src`).
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Summaries, one JSON object per line.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    decode: DecodeFlags,
}

#[derive(Args, Debug, Serialize)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Test split (JSON Lines with `src` and `tgt`).
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// JSON report to write.
    #[arg(long)]
    out: PathBuf,
    /// Optional per-example CSV.
    #[arg(long)]
    per_example: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    decode: DecodeFlags,
}

#[derive(Args, Debug, Serialize)]
struct PerturbPreviewArgs {
    /// Documents to perturb (JSON Lines with `src`).
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint whose embeddings define replacement candidates; required
    /// when --word-replace is positive.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Seeds the perturbations.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.1)]
    word_drop: f64,
    #[arg(long, default_value_t = 0.1)]
    word_replace: f64,
    #[arg(long, default_value_t = 10)]
    candidates: usize,
    #[arg(long, default_value_t = 0.05)]
    sentence_drop: f64,
}

/// Parses `argv`, runs the subcommand and reports failures on stderr.
pub fn run<I, T>(argv: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let argv = match with_config_file(argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .try_init();
    if cli.threads > 0 {
        if let Err(e) = par::set_threads(cli.threads) {
            log::warn!("could not set the thread count: {e}");
        }
    }
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::FAILURE
        }
    }
}

/// Error text for users; config errors name the flag that sets the field.
fn describe(e: &Error) -> String {
    match e {
        Error::InvalidConfig { field, reason } => {
            format!(
                "invalid value for `--{}`: {reason}",
                field.replace('_', "-")
            )
        }
        other => other.to_string(),
    }
}

fn flag_args(pairs: impl IntoIterator<Item = (String, String)>) -> Vec<OsString> {
    pairs
        .into_iter()
        .flat_map(|(k, v)| {
            [
                OsString::from(format!("--{}", k.trim().replace('_', "-"))),
                OsString::from(v),
            ]
        })
        .collect()
}

fn config_pairs(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    if let Ok(Value::Object(manifest)) = serde_json::from_str::<Value>(&text) {
        let Some(Value::Object(args)) = manifest.get("args") else {
            return Err(Error::InvalidInput(format!(
                "{}: manifest has no `args` object",
                path.display()
            )));
        };
        return Ok(args
            .iter()
            .filter_map(|(k, v)| match v {
                Value::Null => None,
                Value::String(s) => Some((k.clone(), s.clone())),
                other => Some((k.clone(), other.to_string())),
            })
            .collect());
    }
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::InvalidInput(format!(
                "{}:{}: expected key=value",
                path.display(),
                i + 1
            )));
        };
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

const SUBCOMMANDS: [&str; 6] = [
    "gen-corpus",
    "train-teacher",
    "distill",
    "decode",
    "evaluate",
    "perturb-preview",
];

/// Splices flags from a `--config` file in right after the subcommand name,
/// so explicit flags, which come later, take precedence.
fn with_config_file(argv: Vec<OsString>) -> Result<Vec<OsString>> {
    let mut config = None;
    for (i, a) in argv.iter().enumerate() {
        let s = a.to_string_lossy();
        if s == "--config" {
            config = argv.get(i + 1).map(PathBuf::from);
        } else if let Some(p) = s.strip_prefix("--config=") {
            config = Some(PathBuf::from(p));
        }
    }
    let Some(path) = config else { return Ok(argv) };
    let Some(pos) = argv
        .iter()
        .position(|a| SUBCOMMANDS.contains(&a.to_string_lossy().as_ref()))
    else {
        return Ok(argv);
    };
    let extra = flag_args(config_pairs(&path)?);
    let mut out = argv[..=pos].to_vec();
    out.extend(extra);
    out.extend_from_slice(&argv[pos + 1..]);
    Ok(out)
}

#[derive(Serialize)]
struct Artifact {
    path: PathBuf,
    sha256: String,
}

fn artifact(path: &Path) -> Result<Artifact> {
    let bytes =
        std::fs::read(path).map_err(|e| Error::io(format!("hashing {}", path.display()), e))?;
    Ok(Artifact {
        path: path.to_path_buf(),
        sha256: hex::encode(Sha256::digest(&bytes)),
    })
}

/// Record of one invocation: every resolved flag, the structured configs,
/// and hashes of what was read and written.
#[derive(Serialize)]
pub struct RunManifest {
    subcommand: &'static str,
    args: Value,
    config: Value,
    seed: u64,
    inputs: Vec<Artifact>,
    outputs: Vec<Artifact>,
    version: &'static str,
}

fn write_manifest(
    path: &Path,
    subcommand: &'static str,
    args: &impl Serialize,
    config: Value,
    seed: u64,
    inputs: &[&Path],
    outputs: &[&Path],
) -> Result<()> {
    let mut args = serde_json::to_value(args)?;
    if let Value::Object(map) = &mut args {
        let flat: Map<String, Value> = std::mem::take(map)
            .into_iter()
            .map(|(k, v)| (k.replace('_', "-"), v))
            .collect();
        *map = flat;
    }
    let manifest = RunManifest {
        subcommand,
        args,
        config,
        seed,
        inputs: inputs.iter().map(|p| artifact(p)).collect::<Result<_>>()?,
        outputs: outputs.iter().map(|p| artifact(p)).collect::<Result<_>>()?,
        version: env!("CARGO_PKG_VERSION"),
    };
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(path, text + "\n")
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    log::info!("wrote manifest {}", path.display());
    Ok(())
}

fn manifest_path(output: &Path) -> PathBuf {
    let mut s = output.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn log_path(out: &Path, explicit: &Option<PathBuf>) -> PathBuf {
    explicit.clone().unwrap_or_else(|| {
        let mut s = out.as_os_str().to_owned();
        s.push(".log.jsonl");
        PathBuf::from(s)
    })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(format!("creating {}", path.display()), e))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = create(path)?;
    for r in rows {
        serde_json::to_writer(&mut w, &r)?;
        w.write_all(b"\n")
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    }
    w.flush()
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn check_vocab(ckpt: &Checkpoint, vocab: &Vocabulary) -> Result<()> {
    if ckpt.config().vocab_size != vocab.len() {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint has a vocabulary of {}, the vocabulary file has {}",
            ckpt.config().vocab_size,
            vocab.len()
        )));
    }
    Ok(())
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenCorpus(a) => gen_corpus(&a),
        Command::TrainTeacher(a) => run_train_teacher(&a),
        Command::Distill(a) => run_distill(&a),
        Command::Decode(a) => run_decode(&a),
        Command::Evaluate(a) => run_evaluate(&a),
        Command::PerturbPreview(a) => run_perturb_preview(&a),
    }
}

fn gen_corpus(a: &GenCorpusArgs) -> Result<()> {
    let spec = SyntheticSpec {
        n_train: a.n_train,
        n_dev: a.n_dev,
        n_test: a.n_test,
        vocab_size: a.vocab_size,
        max_doc_tokens: a.max_doc_tokens,
        key_sentence_first: a.key_sentence_first,
        ..SyntheticSpec::default()
    };
    let paths = write_synthetic_corpus(&a.out_dir, &spec, a.seed)?;
    log::info!("wrote corpus to {}", a.out_dir.display());
    write_manifest(
        &a.out_dir.join("manifest.json"),
        "gen-corpus",
        a,
        serde_json::to_value(&spec)?,
        a.seed,
        &[],
        &paths.all(),
    )
}

fn load_splits(
    c: &CorpusArgs,
    max_src_len: usize,
) -> Result<(Vocabulary, Vec<Example>, Vec<Example>)> {
    let vocab = Vocabulary::load(&c.vocab)?;
    let train = load_corpus(&c.train, &vocab, max_src_len)?;
    let dev = load_corpus(&c.dev, &vocab, max_src_len)?;
    Ok((vocab, train, dev))
}

fn finish_training(outcome: &TrainOutcome, out: &Path, log: &Path) -> Result<()> {
    save_checkpoint(&outcome.best, out)?;
    write_jsonl(log, outcome.log.iter())?;
    log::info!(
        "best dev perplexity {:.4} at epoch {} (step {}); wrote {}",
        outcome.best.dev_perplexity,
        outcome.best.epoch,
        outcome.best.step,
        out.display()
    );
    Ok(())
}

fn run_train_teacher(a: &TrainTeacherArgs) -> Result<()> {
    let (vocab, train, dev) = load_splits(&a.corpus, a.model.max_src_len)?;
    let train_cfg = a.train.config();
    let model_cfg = ModelConfig {
        num_layers: a.model.num_layers,
        hidden_size: a.model.hidden_size,
        ff_size: a.model.ff_size,
        num_heads: a.model.num_heads,
        dropout_rate: a.model.dropout_rate,
        vocab_size: vocab.len(),
        max_src_len: a.model.max_src_len,
        max_tgt_len: a.model.max_tgt_len,
        seed: train_cfg.seed,
    };
    model_cfg.validate()?;
    let outcome = train_teacher(&model_cfg, &train, &dev, &train_cfg)?;
    let log = log_path(&a.out, &a.log);
    finish_training(&outcome, &a.out, &log)?;
    write_manifest(
        &manifest_path(&a.out),
        "train-teacher",
        a,
        json!({ "model": model_cfg, "train": train_cfg }),
        train_cfg.seed,
        &[&a.corpus.train, &a.corpus.dev, &a.corpus.vocab],
        &[&a.out, &log],
    )
}

fn run_distill(a: &DistillArgs) -> Result<()> {
    let cfg = DistillConfig {
        lambda: a.lambda,
        teacher_dropout: a.teacher_dropout,
        noise: a.noise.config(),
        train: a.train.config(),
    };
    cfg.validate()?;
    let teacher = load_checkpoint(&a.teacher)?;
    let (vocab, train, dev) = load_splits(&a.corpus, teacher.config().max_src_len)?;
    check_vocab(&teacher, &vocab)?;
    let student_cfg = teacher.config().clone();
    let outcome = train_student(&teacher, &student_cfg, &train, &dev, &cfg)?;
    let log = log_path(&a.out, &a.log);
    finish_training(&outcome, &a.out, &log)?;
    write_manifest(
        &manifest_path(&a.out),
        "distill",
        a,
        json!({ "model": outcome.best.config(), "distill": cfg }),
        cfg.train.seed,
        &[&a.teacher, &a.corpus.train, &a.corpus.dev, &a.corpus.vocab],
        &[&a.out, &log],
    )
}

#[derive(Serialize)]
struct SummaryLine {
    src_id: usize,
    summary_tokens: Vec<String>,
    summary_text: String,
    score: f64,
    finished: bool,
}

fn run_decode(a: &DecodeArgs) -> Result<()> {
    let dcfg = a.decode.config();
    dcfg.validate()?;
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let vocab = Vocabulary::load(&a.vocab)?;
    check_vocab(&ckpt, &vocab)?;
    let max_src = ckpt.config().max_src_len;
    let sources = read_records(&a.input)?
        .into_iter()
        .map(|(line, map)| {
            let src = string_field(&a.input, line, &map, "src")?;
            let doc = tokenize(src, &vocab).map_err(|e| Error::Corpus {
                path: a.input.clone(),
                line,
                reason: e.to_string(),
            })?;
            Ok(truncate(&doc, max_src))
        })
        .collect::<Result<Vec<_>>>()?;
    let outputs = par::map(&sources, |doc| {
        beam_search(&ckpt.params, doc.tokens(), &dcfg)
    });
    let mut lines = Vec::with_capacity(outputs.len());
    for (i, out) in outputs.into_iter().enumerate() {
        let out = out?;
        lines.push(SummaryLine {
            src_id: i,
            summary_tokens: out
                .tokens
                .iter()
                .map(|&t| vocab.token(t).unwrap_or("<unk>").to_string())
                .collect(),
            summary_text: detokenize(&out.tokens, &vocab),
            score: out.score,
            finished: out.finished,
        });
    }
    write_jsonl(&a.out, &lines)?;
    log::info!("decoded {} documents into {}", lines.len(), a.out.display());
    write_manifest(
        &manifest_path(&a.out),
        "decode",
        a,
        json!({ "decode": dcfg }),
        0,
        &[&a.checkpoint, &a.input, &a.vocab],
        &[&a.out],
    )
}

#[derive(Serialize)]
struct EvalReport {
    r1: f64,
    r2: f64,
    rl: f64,
    ppl: f64,
    n_examples: usize,
    n_failed: usize,
}

#[derive(Serialize)]
struct CsvRow<'a> {
    index: usize,
    r1: f64,
    r2: f64,
    rl: f64,
    finished: bool,
    summary: &'a str,
    reference: &'a str,
}

fn run_evaluate(a: &EvaluateArgs) -> Result<()> {
    let dcfg = a.decode.config();
    dcfg.validate()?;
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let vocab = Vocabulary::load(&a.vocab)?;
    check_vocab(&ckpt, &vocab)?;
    let test = load_corpus(&a.test, &vocab, ckpt.config().max_src_len)?;
    let ppl = perplexity(&ckpt.params, &test)?;
    let scores = evaluate_system(&ckpt.params, &test, &dcfg)?;
    for (i, msg) in &scores.failures {
        log::warn!("example {i} failed to decode: {msg}");
    }
    let report = EvalReport {
        r1: scores.r1,
        r2: scores.r2,
        rl: scores.rl,
        ppl,
        n_examples: scores.n_scored,
        n_failed: scores.n_failed,
    };
    let text = serde_json::to_string_pretty(&report)?;
    std::fs::write(&a.out, text + "\n")
        .map_err(|e| Error::io(format!("writing {}", a.out.display()), e))?;
    log::info!(
        "ROUGE-1 {:.4} ROUGE-2 {:.4} ROUGE-L {:.4} perplexity {:.4}",
        report.r1,
        report.r2,
        report.rl,
        report.ppl
    );
    let mut outputs: Vec<&Path> = vec![&a.out];
    if let Some(csv_path) = &a.per_example {
        let mut w =
            csv::Writer::from_path(csv_path).map_err(|e| Error::InvalidInput(e.to_string()))?;
        for s in &scores.per_example {
            let summary = detokenize(&s.output.tokens, &vocab);
            let reference = detokenize(test[s.index].summary(), &vocab);
            w.serialize(CsvRow {
                index: s.index,
                r1: s.scores.rouge1.f1,
                r2: s.scores.rouge2.f1,
                rl: s.scores.rouge_l.f1,
                finished: s.output.finished,
                summary: &summary,
                reference: &reference,
            })
            .map_err(|e| Error::InvalidInput(e.to_string()))?;
        }
        w.flush()
            .map_err(|e| Error::io(format!("writing {}", csv_path.display()), e))?;
        outputs.push(csv_path);
    }
    write_manifest(
        &manifest_path(&a.out),
        "evaluate",
        a,
        json!({ "decode": dcfg }),
        0,
        &[&a.checkpoint, &a.test, &a.vocab],
        &outputs,
    )
}

fn run_perturb_preview(a: &PerturbPreviewArgs) -> Result<()> {
    let cfg = NoiseConfig {
        word_drop: a.word_drop,
        word_replace: a.word_replace,
        candidates: a.candidates,
        sentence_drop: a.sentence_drop,
        gaussian_enabled: false,
        seed: a.seed,
        ..NoiseConfig::default()
    };
    cfg.validate()?;
    let vocab = Vocabulary::load(&a.vocab)?;
    let table = match (&a.checkpoint, cfg.word_replace > 0.0) {
        (Some(path), true) => {
            let ckpt = load_checkpoint(path)?;
            check_vocab(&ckpt, &vocab)?;
            Some(build_replacement_table(
                ckpt.params.token_embeddings(),
                cfg.candidates,
            )?)
        }
        (None, true) => return Err(Error::config(
            "checkpoint",
            "word replacement needs a checkpoint for its embedding table (or set --word-replace 0)",
        )),
        (_, false) => None,
    };
    let mut rows = Vec::new();
    for (i, (line, map)) in read_records(&a.input)?.into_iter().enumerate() {
        let src = string_field(&a.input, line, &map, "src")?;
        let doc = tokenize(src, &vocab).map_err(|e| Error::Corpus {
            path: a.input.clone(),
            line,
            reason: e.to_string(),
        })?;
        let mut rng = derive_rng(cfg.seed, Purpose::Perturb, &[0, i as u64]);
        let noisy = perturb_pipeline(&doc, &cfg, table.as_ref(), &mut rng)?;
        let mut row = Map::new();
        row.insert(
            "src".into(),
            Value::String(detokenize(noisy.tokens(), &vocab)),
        );
        if let Some(tgt) = map.get("tgt") {
            row.insert("tgt".into(), tgt.clone());
        }
        rows.push(Value::Object(row));
    }
    write_jsonl(&a.out, &rows)?;
    let mut inputs: Vec<&Path> = vec![&a.input, &a.vocab];
    if let Some(c) = &a.checkpoint {
        inputs.push(c);
    }
    write_manifest(
        &manifest_path(&a.out),
        "perturb-preview",
        a,
        serde_json::to_value(&cfg)?,
        a.seed,
        &inputs,
        &[&a.out],
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn config_errors_name_the_flag() {
        let e = Error::config("teacher_dropout", "must be in [0, 1)");
        assert!(describe(&e).contains("`--teacher-dropout`"));
    }

    #[test]
    fn config_file_flags_precede_explicit_ones() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, "# defaults\nlambda = 0.3\nbeam_size=2\n").unwrap();
        let argv: Vec<OsString> = [
            "skd",
            "--config",
            path.to_str().unwrap(),
            "distill",
            "--lambda",
            "0.7",
        ]
        .iter()
        .map(OsString::from)
        .collect();
        let out: Vec<String> = with_config_file(argv)
            .unwrap()
            .iter()
            .map(|s| s.to_string_lossy().into_owned())
            .collect();
        assert_eq!(
            out[3..],
            [
                "distill",
                "--lambda",
                "0.3",
                "--beam-size",
                "2",
                "--lambda",
                "0.7"
            ]
        );
    }
}

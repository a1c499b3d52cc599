//! Command-line driver: corpus generation, training, evaluation and reports.
//!
//! Every training command resolves its configuration (file, then flags) and
//! archives the result as `run.toml` next to the checkpoint, so a run
//! directory is enough to reproduce itself. Exit codes: 0 success, 2 usage or
//! configuration errors, 3 numeric failure.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::metrics::{MetricEntry, MetricsError, MetricsReport};
use crate::model::{BaselineHeads, Checkpoint, Model, ModelConfig, ModelError};
use crate::synthgen::{generate_corpus, Corpus, GenConfig, SynthError, MC_CHOICES, VOCAB_FILE};
use crate::tasks::{write_predictions, DecorationVariant, PredictionRecord, TaskError, TaskTag};
use crate::text::{TextError, Vocabulary};
use crate::trainer::{
    evaluate, evaluate_zero_shot, finetune, multitask, pretrain, train_baseline, write_history, ClipStore, HistoryRecord,
    Route, TaskDataset, TrainConfig, TrainError,
};

pub const RUN_FILE: &str = "run.toml";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const METRICS_FILE: &str = "metrics.json";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
const ROUTE_NOTE: &str = "route";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("config: {0}")]
    TomlWrite(#[from] toml::ser::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Train(TrainError::Divergence { .. }) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Everything a training run depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Corpus directory written by `gen`.
    pub corpus: PathBuf,
    /// Run directory for checkpoint, history and reports.
    pub out: PathBuf,
    /// Checkpoint to start from.
    pub init: Option<PathBuf>,
    /// Finetuning uses the first task, multitask training all of them.
    pub tasks: Vec<TaskTag>,
    /// Train task-specific heads instead of the shared head.
    pub baseline: bool,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            corpus: PathBuf::from("corpus"),
            out: PathBuf::from("run"),
            init: None,
            tasks: Vec::new(),
            baseline: false,
            model: ModelConfig::default(),
            train: TrainConfig {
                lr: 1e-3,
                ..TrainConfig::default()
            },
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}

#[derive(Parser, Debug)]
#[command(name = "lavender", version, about = "Unified video-language model on a synthetic corpus")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic corpus.
    Gen(GenArgs),
    /// Pretrain with masked language modeling and video-text matching.
    Pretrain(RunArgs),
    /// Finetune on one task.
    Finetune(FinetuneArgs),
    /// Train one model on several tasks at once.
    Multitask(MultitaskArgs),
    /// Evaluate a checkpoint on one task.
    Eval(EvalArgs),
    /// Evaluate a checkpoint on a task it was never trained on.
    Zeroshot(EvalArgs),
    /// Combine metric files into one table.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long, default_value_t = 500)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "corpus")]
    pub out: PathBuf,
    /// Train, validation and test fractions.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    pub splits: Option<Vec<f64>>,
}

/// Flags shared by the training commands; each overrides the config file.
#[derive(Args, Debug, Default)]
pub struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub baseline: bool,
    /// Task decoration: none, prompt or token.
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub few_shot: Option<f64>,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub task: Option<String>,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Args, Debug)]
pub struct MultitaskArgs {
    #[arg(long, value_delimiter = ',')]
    pub tasks: Vec<String>,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "corpus")]
    pub corpus: PathBuf,
    #[arg(long)]
    pub task: String,
    /// `val` or `test`.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Directory for predictions and metrics.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub variant: Option<String>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Run directories or metric files.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_task(name: &str) -> Result<TaskTag> {
    TaskTag::parse(name).ok_or_else(|| CliError::Usage(format!("unknown task {name:?}")))
}

fn parse_variant(name: &str) -> Result<DecorationVariant> {
    serde_json::from_value(serde_json::Value::String(name.to_string()))
        .map_err(|_| CliError::Usage(format!("unknown variant {name:?} (none, prompt or token)")))
}

/// File values overridden by flags.
pub fn resolve(args: &RunArgs, tasks: Vec<TaskTag>) -> Result<RunConfig> {
    let mut c = match &args.config {
        Some(p) => RunConfig::from_toml(&io(p, fs::read_to_string(p))?)?,
        None => RunConfig::default(),
    };
    if let Some(v) = &args.corpus {
        c.corpus = v.clone();
    }
    if let Some(v) = &args.out {
        c.out = v.clone();
    }
    if let Some(v) = args.seed {
        c.seed = v;
    }
    if let Some(v) = &args.init {
        c.init = Some(v.clone());
    }
    if let Some(v) = args.epochs {
        c.train.epochs = v;
    }
    if let Some(v) = args.lr {
        c.train.lr = v;
    }
    if let Some(v) = args.batch_size {
        c.train.batch_size = v;
    }
    if args.baseline {
        c.baseline = true;
    }
    if let Some(v) = &args.variant {
        c.train.decoration = parse_variant(v)?;
    }
    if let Some(v) = args.few_shot {
        c.train.few_shot = Some(v);
    }
    if !tasks.is_empty() {
        c.tasks = tasks;
    }
    c.train.seed = c.seed;
    c.train.validate()?;
    Ok(c)
}

struct Data {
    corpus: Corpus,
    vocab: Vocabulary,
    clips: ClipStore,
}

fn load_corpus(dir: &Path) -> Result<Data> {
    if !dir.join(VOCAB_FILE).is_file() {
        return Err(CliError::Usage(format!("{} is not a corpus directory", dir.display())));
    }
    let corpus = Corpus::load(dir)?;
    let vocab = Vocabulary::load(&dir.join(VOCAB_FILE))?;
    let clips = ClipStore::load(dir, &corpus)?;
    Ok(Data { corpus, vocab, clips })
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.is_file() {
        return Err(CliError::Usage(format!("checkpoint {} does not exist", path.display())));
    }
    Ok(Checkpoint::load(path)?)
}

fn checkpoint_route(ck: &Checkpoint) -> Result<Route> {
    match ck.notes.get(ROUTE_NOTE) {
        Some(r) => Ok(serde_json::from_str(r)?),
        None => Ok(Route::Unified),
    }
}

/// The starting model: the `init` checkpoint or a fresh one sized to the
/// corpus vocabulary. Records the effective model config in `cfg`.
fn start_model(cfg: &mut RunConfig, vocab: &Vocabulary) -> Result<Model> {
    let mut model = match &cfg.init {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            if ck.model.config().vocab_size != vocab.len() {
                return Err(CliError::Usage(format!(
                    "checkpoint vocabulary has {} tokens, corpus has {}",
                    ck.model.config().vocab_size,
                    vocab.len()
                )));
            }
            ck.model
        }
        None => {
            cfg.model.vocab_size = vocab.len();
            Model::new(cfg.model.clone(), cfg.seed)?
        }
    };
    if cfg.baseline && !model.has_baseline_heads() {
        let heads = BaselineHeads {
            mc_choices: MC_CHOICES,
            oe_answers: 1,
        };
        model = model.with_baseline_heads(heads, cfg.seed)?;
    }
    cfg.model = model.config().clone();
    Ok(model)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    io(path, fs::write(path, bytes))
}

/// Writes `run.toml`, led by comments naming the command and code version.
fn archive_config(cfg: &RunConfig, command: &str) -> Result<()> {
    io(&cfg.out, fs::create_dir_all(&cfg.out))?;
    let text = format!(
        "# lavender {} {command}\n# seed {}\n{}",
        env!("CARGO_PKG_VERSION"),
        cfg.seed,
        cfg.to_toml()?
    );
    write_file(&cfg.out.join(RUN_FILE), text.as_bytes())
}

fn save_model(cfg: &RunConfig, model: &Model, vocab: &Vocabulary, route: &Route, steps: usize) -> Result<()> {
    let mut ck = Checkpoint::new(model.clone(), steps as u64).with_vocab(vocab.clone());
    ck.notes.insert(ROUTE_NOTE.into(), serde_json::to_string(route)?);
    let path = cfg.out.join(CHECKPOINT_FILE);
    ck.save(&path)?;
    Ok(())
}

fn save_history(cfg: &RunConfig, history: &[HistoryRecord]) -> Result<()> {
    let path = cfg.out.join(HISTORY_FILE);
    let f = io(&path, fs::File::create(&path))?;
    let mut w = BufWriter::new(f);
    write_history(history, &mut w)?;
    io(&path, w.flush())
}

fn save_predictions(dir: &Path, records: &[PredictionRecord]) -> Result<()> {
    let path = dir.join(PREDICTIONS_FILE);
    let mut w = BufWriter::new(io(&path, fs::File::create(&path))?);
    write_predictions(records, &mut w)?;
    io(&path, w.flush())
}

fn save_report(dir: &Path, entries: Vec<MetricEntry>) -> Result<MetricsReport> {
    let report = MetricsReport::new(entries)?;
    write_file(&dir.join(METRICS_FILE), report.to_json().as_bytes())?;
    Ok(report)
}

fn last_step(history: &[HistoryRecord]) -> usize {
    history.last().map_or(0, |r| r.step)
}

pub fn cmd_gen(args: &GenArgs) -> Result<()> {
    let mut cfg = GenConfig {
        n_clips: args.n,
        seed: args.seed,
        ..GenConfig::default()
    };
    if let Some(s) = &args.splits {
        cfg.splits = [s[0], s[1], s[2]];
    }
    let corpus = generate_corpus(&cfg)?;
    corpus.save(&args.out)?;
    println!("wrote {} clips to {}", corpus.entries.len(), args.out.display());
    Ok(())
}

pub fn cmd_pretrain(args: &RunArgs) -> Result<()> {
    let mut cfg = resolve(args, Vec::new())?;
    let data = load_corpus(&cfg.corpus)?;
    let model = start_model(&mut cfg, &data.vocab)?;
    archive_config(&cfg, "pretrain")?;
    let route = if cfg.baseline {
        Route::Baseline { answers: Vec::new() }
    } else {
        Route::Unified
    };
    let pairs = TaskDataset::from_corpus(&data.corpus, &data.vocab, TaskTag::Mlm);
    let out = pretrain(model, &pairs.train, &data.clips, &data.vocab, &cfg.train, &route)?;
    save_model(&cfg, &out.model, &data.vocab, &route, last_step(&out.history))?;
    save_history(&cfg, &out.history)?;
    println!("pretrained on {} pairs; checkpoint in {}", pairs.train.len(), cfg.out.display());
    Ok(())
}

pub fn cmd_finetune(args: &FinetuneArgs) -> Result<()> {
    let tasks = match &args.task {
        Some(t) => vec![parse_task(t)?],
        None => Vec::new(),
    };
    let mut cfg = resolve(&args.run, tasks)?;
    let task = *cfg
        .tasks
        .first()
        .ok_or_else(|| CliError::Usage("finetune needs --task".into()))?;
    let data = load_corpus(&cfg.corpus)?;
    let model = start_model(&mut cfg, &data.vocab)?;
    archive_config(&cfg, "finetune")?;
    let ds = TaskDataset::from_corpus(&data.corpus, &data.vocab, task);
    let (out, route) = if cfg.baseline {
        let out = train_baseline(model, &ds, &data.clips, &data.vocab, &cfg.train)?;
        let answers = match task {
            TaskTag::OeQa | TaskTag::Fib => ds.answer_vocab(),
            _ => Vec::new(),
        };
        (out, Route::Baseline { answers })
    } else {
        (finetune(model, &ds, &data.clips, &data.vocab, &cfg.train, &Route::Unified)?, Route::Unified)
    };
    log::info!("training samples: {}", out.train_size);
    println!("training samples: {}", out.train_size);
    save_model(&cfg, &out.best, &data.vocab, &route, last_step(&out.history))?;
    save_history(&cfg, &out.history)?;
    let (records, entry) = evaluate(&out.best, &route, &ds.name, task, &ds.test, &data.clips, &data.vocab, cfg.train.decoration, &cfg.train.eval)?;
    save_predictions(&cfg.out, &records)?;
    let report = save_report(&cfg.out, vec![entry])?;
    print!("{}", report.to_json());
    Ok(())
}

pub fn cmd_multitask(args: &MultitaskArgs) -> Result<()> {
    let tasks = args.tasks.iter().map(|t| parse_task(t)).collect::<Result<Vec<_>>>()?;
    let mut cfg = resolve(&args.run, tasks)?;
    if cfg.tasks.is_empty() {
        return Err(CliError::Usage("multitask needs --tasks".into()));
    }
    let data = load_corpus(&cfg.corpus)?;
    let datasets: Vec<TaskDataset> = cfg
        .tasks
        .iter()
        .map(|&t| TaskDataset::from_corpus(&data.corpus, &data.vocab, t))
        .collect();
    let route = if cfg.baseline {
        let answers: BTreeSet<String> = datasets
            .iter()
            .filter(|d| matches!(d.task, TaskTag::OeQa | TaskTag::Fib))
            .flat_map(|d| d.answer_vocab())
            .collect();
        let answers: Vec<String> = answers.into_iter().collect();
        cfg.model.baseline_heads = Some(BaselineHeads {
            mc_choices: MC_CHOICES,
            oe_answers: answers.len().max(1),
        });
        Route::Baseline { answers }
    } else {
        Route::Unified
    };
    let mut model = start_model(&mut cfg, &data.vocab)?;
    if let (Route::Baseline { answers }, Some(h)) = (&route, model.config().baseline_heads.clone()) {
        if h.oe_answers != answers.len().max(1) {
            let heads = BaselineHeads {
                oe_answers: answers.len().max(1),
                ..h
            };
            model = model.with_baseline_heads(heads, cfg.seed)?;
            cfg.model = model.config().clone();
        }
    }
    archive_config(&cfg, "multitask")?;
    let out = multitask(model, &datasets, &data.clips, &data.vocab, &cfg.train, &route)?;
    save_model(&cfg, &out.model, &data.vocab, &route, last_step(&out.history))?;
    save_history(&cfg, &out.history)?;
    write_file(
        &cfg.out.join("contamination.json"),
        (serde_json::to_string_pretty(&out.contamination.removed)? + "\n").as_bytes(),
    )?;
    let mut records = Vec::new();
    let mut entries = Vec::new();
    for ds in &datasets {
        let (r, e) = evaluate(&out.model, &route, &ds.name, ds.task, &ds.test, &data.clips, &data.vocab, cfg.train.decoration, &cfg.train.eval)?;
        records.extend(r);
        entries.push(e);
    }
    save_predictions(&cfg.out, &records)?;
    let report = save_report(&cfg.out, entries)?;
    print!("{}", report.to_json());
    Ok(())
}

fn split_of<'d>(ds: &'d TaskDataset, split: &str) -> Result<&'d [crate::trainer::Sample]> {
    match split {
        "val" => Ok(&ds.val),
        "test" => Ok(&ds.test),
        other => Err(CliError::Usage(format!("split must be val or test, not {other:?}"))),
    }
}

pub fn cmd_eval(args: &EvalArgs, zero_shot: bool) -> Result<()> {
    let task = parse_task(&args.task)?;
    if zero_shot && !matches!(task, TaskTag::McQa | TaskTag::OeQa | TaskTag::Fib) {
        return Err(CliError::Usage(format!(
            "zero-shot evaluation covers mc_qa, oe_qa and fib; {task} needs finetuning"
        )));
    }
    if matches!(task, TaskTag::Mlm | TaskTag::Vtm) {
        return Err(CliError::Usage(format!("{task} is a pretraining objective, not an evaluation task")));
    }
    let ck = load_checkpoint(&args.checkpoint)?;
    let route = checkpoint_route(&ck)?;
    let data = load_corpus(&args.corpus)?;
    if ck.model.config().vocab_size != data.vocab.len() {
        return Err(CliError::Usage("checkpoint and corpus vocabularies differ".into()));
    }
    if let Route::Baseline { answers } = &route {
        if !zero_shot && matches!(task, TaskTag::OeQa | TaskTag::Fib) && answers.is_empty() {
            return Err(CliError::Usage(format!("checkpoint has no trained answer head for {task}")));
        }
    }
    let decoration = match &args.variant {
        Some(v) => parse_variant(v)?,
        None => DecorationVariant::None,
    };
    let ds = TaskDataset::from_corpus(&data.corpus, &data.vocab, task);
    let samples = split_of(&ds, &args.split)?;
    let ecfg = Default::default();
    let (records, entry) = if zero_shot {
        let route = match route {
            Route::Baseline { answers } if answers.is_empty() => Route::Baseline {
                answers: ds.answer_vocab(),
            },
            r => r,
        };
        evaluate_zero_shot(&ck.model, &route, &ds.name, task, samples, &data.clips, &data.vocab, &ecfg)?
    } else {
        evaluate(&ck.model, &route, &ds.name, task, samples, &data.clips, &data.vocab, decoration, &ecfg)?
    };
    let report = MetricsReport::new(vec![entry])?;
    if let Some(dir) = &args.out {
        io(dir, fs::create_dir_all(dir))?;
        save_predictions(dir, &records)?;
        write_file(&dir.join(METRICS_FILE), report.to_json().as_bytes())?;
    }
    print!("{}", report.to_json());
    Ok(())
}

pub fn cmd_report(args: &ReportArgs) -> Result<()> {
    let mut entries = Vec::new();
    for p in &args.runs {
        let path = if p.is_dir() { p.join(METRICS_FILE) } else { p.clone() };
        let r: MetricsReport = serde_json::from_str(&io(&path, fs::read_to_string(&path))?)?;
        entries.extend(r.entries);
    }
    let report = MetricsReport::new(entries)?;
    for e in &report.entries {
        println!("{:<24} {:<10} {:>8.2}", e.dataset, e.task.name(), e.value);
    }
    println!("{:<24} {:<10} {:>8.2}", "meta-average", "", report.meta_average);
    if let Some(out) = &args.out {
        write_file(out, report.to_json().as_bytes())?;
    }
    Ok(())
}

/// Caps the worker pool at `LAVENDER_THREADS` when set.
pub fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("LAVENDER_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Usage(format!("LAVENDER_THREADS={v:?} is not a positive integer")))?;
        // a second initialisation in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Finetune(a) => cmd_finetune(a),
        Command::Multitask(a) => cmd_multitask(a),
        Command::Eval(a) => cmd_eval(a, false),
        Command::Zeroshot(a) => cmd_eval(a, true),
        Command::Report(a) => cmd_report(a),
    }
}

//! Command line: `search`, `train`, `evaluate`, `generate`, `enumerate` and
//! `inspect`.
//!
//! Exit codes: 0 on success, 1 when a stage or input fails, 2 on a usage
//! error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use super::io::{self, Checkpoint};
use super::synthetic::{generate, SyntheticDataset, SyntheticTaskSpec, VqaRule};
use super::{exhaustive_oracle, RunConfig, SearchOutcome};
use crate::attention::OperationKind;
use crate::backbone::Architecture;
use crate::error::{ensure, Error, Result};
use crate::model::Task;
use crate::search::{train_fixed, ArchitectureWeights, EpochRecord, Estimator, MiningSettings, SearchConfig, Stage};

pub const ARCHITECTURE_FILE: &str = "architecture.json";
pub const SUPERNET_FILE: &str = "supernet.ckpt";
pub const MODEL_FILE: &str = "model.ckpt";
pub const REPORT_FILE: &str = "report.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SEARCH_LOG_FILE: &str = "search_log.csv";
pub const EVAL_FILE: &str = "eval.csv";
pub const ORACLE_FILE: &str = "oracle.csv";

#[derive(Parser, Debug)]
#[command(name = "mmnas", version, about = "Multimodal one-shot architecture search on synthetic tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Search an architecture, retrain it and write every artifact.
    Search(Options),
    /// Train the architecture in --arch-file from scratch.
    Train(Options),
    /// Evaluate a trained model checkpoint on the validation split.
    Evaluate(Options),
    /// Write a synthetic dataset as JSON lines.
    Generate(Options),
    /// Train and rank every architecture of a small search space.
    Enumerate(Options),
    /// Print architecture weights or an architecture.
    Inspect(Options),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum RuleArg {
    Mixed,
    Cross,
    Anchor,
    Attribute,
}

impl From<RuleArg> for VqaRule {
    fn from(r: RuleArg) -> Self {
        match r {
            RuleArg::Mixed => VqaRule::Mixed,
            RuleArg::Cross => VqaRule::CrossModalCount,
            RuleArg::Anchor => VqaRule::AnchorCount,
            RuleArg::Attribute => VqaRule::Attribute,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum EstimatorArg {
    Ste,
    Reinforce,
}

#[derive(Args, Debug, Clone)]
struct Options {
    /// vqa, itm or vg.
    #[arg(long, default_value = "vqa")]
    task: Task,
    /// Question family of the synthetic answering task.
    #[arg(long, value_enum, default_value = "mixed")]
    rule: RuleArg,
    /// Encoder blocks.
    #[arg(long = "M", default_value_t = 2)]
    m: usize,
    /// Decoder blocks.
    #[arg(long = "N", default_value_t = 2)]
    n: usize,
    /// Model width.
    #[arg(long, default_value_t = 16)]
    d: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = SearchConfig::desk().warmup_epochs)]
    warmup_epochs: usize,
    #[arg(long, default_value_t = SearchConfig::desk().search_epochs)]
    search_epochs: usize,
    /// Weight steps per architecture step.
    #[arg(long, default_value_t = SearchConfig::desk().u)]
    u: usize,
    /// Ratio |D_m| / |D_a| of the train split.
    #[arg(long, default_value_t = SearchConfig::desk().split_ratio)]
    split_ratio: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fixed architecture (JSON) for train, evaluate and inspect.
    #[arg(long)]
    arch_file: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Checkpoint to resume a search from, or to evaluate or inspect;
    /// evaluate defaults to the model file in --out-dir.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Retraining epochs.
    #[arg(long, default_value_t = SearchConfig::desk().retrain_epochs)]
    epochs: usize,
    #[arg(long, default_value_t = SearchConfig::desk().lr_w)]
    lr: f64,
    #[arg(long, default_value_t = SearchConfig::desk().lr_theta)]
    lr_theta: f64,
    #[arg(long, default_value_t = SearchConfig::desk().batch_size)]
    batch_size: usize,
    #[arg(long, value_enum, default_value = "ste")]
    estimator: EstimatorArg,
    /// Early-stopping patience of the iterative stage (0 disables).
    #[arg(long, default_value_t = 0)]
    patience: usize,
    /// Candidates scored per hard-negative draw; enables mining for itm.
    #[arg(long)]
    mining_sample: Option<usize>,
    #[arg(long, default_value_t = 1600)]
    train_size: usize,
    #[arg(long, default_value_t = 400)]
    val_size: usize,
}

impl Options {
    fn spec(&self) -> SyntheticTaskSpec {
        let mut spec = SyntheticTaskSpec::new(self.task, self.seed);
        spec.rule = self.rule.into();
        spec.train = self.train_size;
        spec.val = self.val_size;
        spec
    }

    fn run_config(&self) -> RunConfig {
        let search = SearchConfig {
            encoder_blocks: self.m,
            decoder_blocks: self.n,
            warmup_epochs: self.warmup_epochs,
            search_epochs: self.search_epochs,
            u: self.u,
            split_ratio: self.split_ratio,
            lr_w: self.lr,
            lr_theta: self.lr_theta,
            batch_size: self.batch_size,
            seed: self.seed,
            estimator: match self.estimator {
                EstimatorArg::Ste => Estimator::StraightThrough,
                EstimatorArg::Reinforce => Estimator::Reinforce,
            },
            patience: (self.patience > 0).then_some(self.patience),
            mining: self.mining_sample.map(|n_sample| MiningSettings { n_sample, top_k: SearchConfig::desk_mining().top_k }),
            retrain_epochs: self.epochs,
        };
        RunConfig { model: self.spec().model_config(self.d, self.heads), search }
    }

    fn checkpoint_path(&self, default: &str) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out_dir.join(default))
    }

    fn architecture(&self) -> Result<Architecture> {
        let path = self.arch_file.as_ref().ok_or_else(|| Error::Invalid("--arch-file is required".into()))?;
        io::read_architecture(path).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))
    }
}

/// Parses `argv` (program name first) and runs the command; returns the exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    run_with(argv, &mut std::io::stdout(), &mut std::io::stderr())
}

/// [`run`] with explicit output streams.
pub fn run_with<I, S>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { out.write_all(text.as_bytes()) } else { err.write_all(text.as_bytes()) };
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}

fn execute(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::Search(o) => search(&o, out),
        Command::Train(o) => train(&o, out),
        Command::Evaluate(o) => evaluate(&o, out),
        Command::Generate(o) => generate_data(&o, out),
        Command::Enumerate(o) => enumerate(&o, out),
        Command::Inspect(o) => inspect(&o, out),
    }
}

fn dataset(o: &Options) -> Result<SyntheticDataset> {
    generate(&o.spec())
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<()> {
    fs::write(dir.join(name), contents)?;
    Ok(())
}

fn eval_rows(task: Task, loss: f64, metric: f64) -> String {
    io::eval_table(&[(task.name().into(), "loss".into(), loss), (task.name().into(), task.metric().into(), metric)])
}

fn search(o: &Options, out: &mut dyn Write) -> Result<()> {
    let run = o.run_config();
    let (data, train, val) = dataset(o)?.prepared()?;
    let outcome = match &o.checkpoint {
        Some(path) => super::resume_search_to(&run, path, &data, &train, &val, &o.out_dir)?,
        None => super::run_search_to(&run, &data, &train, &val, &o.out_dir)?,
    };
    writeln!(out, "architecture {}", outcome.report.architecture)?;
    write!(out, "{}", fs::read_to_string(o.out_dir.join(EVAL_FILE))?)?;
    Ok(())
}

/// Architecture file, supernet and model checkpoints, report, logs and
/// evaluation table of a search run.
pub fn write_run_artifacts(dir: &Path, run: &RunConfig, outcome: &SearchOutcome) -> Result<()> {
    let report = &outcome.report;
    io::write_architecture(&dir.join(ARCHITECTURE_FILE), &report.architecture)?;
    Checkpoint::from_supernet(run, &outcome.supernet).write(&dir.join(SUPERNET_FILE))?;
    let last = report.search_log.last().map_or(0, |r| r.epoch as u64);
    Checkpoint::from_network(run, &outcome.model, last)?.write(&dir.join(MODEL_FILE))?;
    write_file(dir, REPORT_FILE, &io::report_json(report))?;
    write_file(dir, METRICS_FILE, &io::metrics_csv(&report.search_log))?;
    write_file(dir, SEARCH_LOG_FILE, &io::search_log_csv(&report.search_log, report.theta.blocks()))?;
    let v = &report.validation;
    write_file(dir, EVAL_FILE, &eval_rows(run.model.task, v.loss, v.metric))?;
    Ok(())
}

fn train(o: &Options, out: &mut dyn Write) -> Result<()> {
    let arch = o.architecture()?;
    let mut run = o.run_config();
    run.search.encoder_blocks = arch.encoder.len();
    run.search.decoder_blocks = arch.decoder.len();
    let (data, train_idx, val) = dataset(o)?.prepared()?;
    let (model, losses) = train_fixed(&run.model, &arch, &data, &train_idx, &run.search, o.seed)
        .map_err(|e| Error::Stage { stage: Stage::Retrain.name().into(), reason: e.to_string() })?;
    let val_samples: Vec<_> = val.iter().map(|&i| data.samples[i].clone()).collect();
    let e = model.evaluate(&val_samples, &model.default_selection())?;
    fs::create_dir_all(&o.out_dir)?;
    let mut log: Vec<EpochRecord> = losses
        .iter()
        .enumerate()
        .map(|(i, &l)| EpochRecord { epoch: i + 1, stage: Stage::Retrain, split: "train".into(), loss: l, metric: None, entropy: Vec::new() })
        .collect();
    log.push(EpochRecord { epoch: losses.len(), stage: Stage::Retrain, split: "val".into(), loss: e.loss, metric: Some(e.metric), entropy: Vec::new() });
    write_file(&o.out_dir, METRICS_FILE, &io::metrics_csv(&log))?;
    Checkpoint::from_network(&run, &model, losses.len() as u64)?.write(&o.out_dir.join(MODEL_FILE))?;
    let eval = eval_rows(run.model.task, e.loss, e.metric);
    write_file(&o.out_dir, EVAL_FILE, &eval)?;
    writeln!(out, "architecture {arch}")?;
    write!(out, "{eval}")?;
    Ok(())
}

fn evaluate(o: &Options, out: &mut dyn Write) -> Result<()> {
    let ckpt = Checkpoint::read(&o.checkpoint_path(MODEL_FILE), None)?;
    let net = ckpt.to_network()?;
    ensure!(net.config.task == o.task, Invalid, "checkpoint was trained for {}, not {}", net.config.task, o.task);
    let (data, _, val) = dataset(o)?.prepared()?;
    let val_samples: Vec<_> = val.iter().map(|&i| data.samples[i].clone()).collect();
    let e = net.evaluate(&val_samples, &net.default_selection())?;
    write!(out, "{}", eval_rows(o.task, e.loss, e.metric))?;
    Ok(())
}

fn generate_data(o: &Options, out: &mut dyn Write) -> Result<()> {
    let ds = dataset(o)?;
    fs::create_dir_all(&o.out_dir)?;
    io::write_samples(&o.out_dir.join("train.jsonl"), &ds.train)?;
    io::write_samples(&o.out_dir.join("val.jsonl"), &ds.val)?;
    write_file(&o.out_dir, "spec.json", &(serde_json::to_string_pretty(&ds.spec)? + "\n"))?;
    writeln!(out, "wrote {} train and {} validation {} samples to {}", ds.train.len(), ds.val.len(), o.task, o.out_dir.display())?;
    Ok(())
}

fn enumerate(o: &Options, out: &mut dyn Write) -> Result<()> {
    let run = o.run_config();
    let (data, train, val) = dataset(o)?.prepared()?;
    let entries = exhaustive_oracle(&run, &data, &train, &val, o.seed)?;
    let table = io::oracle_csv(&entries);
    fs::create_dir_all(&o.out_dir)?;
    write_file(&o.out_dir, ORACLE_FILE, &table)?;
    write!(out, "{table}")?;
    Ok(())
}

fn write_theta(out: &mut dyn Write, theta: &ArchitectureWeights) -> Result<()> {
    let probs = theta.probabilities();
    let m = theta.encoder.len();
    for (b, row) in probs.iter().enumerate() {
        let (side, index, pool) =
            if b < m { ("encoder", b, &OperationKind::ENCODER_POOL[..]) } else { ("decoder", b - m, &OperationKind::DECODER_POOL[..]) };
        let cells: Vec<String> = pool.iter().zip(row).map(|(op, p)| format!("{}={p:.4}", op.name())).collect();
        writeln!(out, "{side} {index}: {}", cells.join(" "))?;
    }
    writeln!(out, "derived {}", theta.derive())?;
    Ok(())
}

fn inspect(o: &Options, out: &mut dyn Write) -> Result<()> {
    if o.arch_file.is_some() {
        let arch = o.architecture()?;
        writeln!(out, "{arch}")?;
        return Ok(());
    }
    let theta = match &o.checkpoint {
        Some(path) => Checkpoint::read(path, None)?.theta.ok_or_else(|| Error::Invalid(format!("{} holds no architecture weights", path.display())))?,
        None => ArchitectureWeights::zeros(o.m, o.n),
    };
    write_theta(out, &theta)
}

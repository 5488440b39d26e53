//! End-to-end driver: synthetic data, search, retraining, evaluation, the
//! exhaustive oracle, file formats and the command line.

pub mod cli;
pub mod io;
pub mod synthetic;

use std::fs;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::Architecture;
use crate::error::{ensure, Error, Result};
use crate::model::{Dataset, Evaluation, ModelConfig, Network};
use crate::numerics::derive_seed;
use crate::search::{count_search_space, enumerate_architectures, train_fixed, EpochRecord, SearchConfig, Stage, Supernet};

/// Largest search space the oracle will enumerate.
pub const ORACLE_LIMIT: u64 = 256;

/// The configuration echoed into a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub search: SearchConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub loss: f64,
    pub metric: f64,
}

impl From<Evaluation> for Metrics {
    fn from(e: Evaluation) -> Self {
        Metrics { loss: e.loss, metric: e.metric }
    }
}

/// Everything a search run produced, apart from weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub seed: u64,
    pub architecture: Architecture,
    pub theta: crate::search::ArchitectureWeights,
    pub search_log: Vec<EpochRecord>,
    pub retrain_losses: Vec<f64>,
    /// The derived path evaluated inside the supernet before retraining.
    pub supernet_path: Metrics,
    pub validation: Metrics,
    pub wall_clock_secs: f64,
}

/// Output of [`run_search`].
#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub report: RunReport,
    pub supernet: Supernet,
    pub model: Network,
}

fn stage<T>(name: Stage, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Stage { .. } => e,
        other => Error::Stage { stage: name.name().into(), reason: other.to_string() },
    })
}

/// Split, warm-up, iterative search, derivation, retraining from scratch on
/// the whole train split, and validation.
pub fn run_search(run: &RunConfig, data: &Dataset, train: &[usize], val: &[usize]) -> Result<SearchOutcome> {
    let supernet = Supernet::new(&run.model, &run.search)?;
    drive(run, supernet, data, train, val, &mut |_| Ok(()))
}

/// File written after the warm-up stage; [`resume_search`] continues from it.
pub const WARMUP_CHECKPOINT: &str = "warmup.ckpt";

/// [`run_search`] that also writes its artifacts to `dir`: a checkpoint after
/// warm-up, then the architecture file, final supernet checkpoint, retrained
/// model, report, metric logs and evaluation table.
pub fn run_search_to(run: &RunConfig, data: &Dataset, train: &[usize], val: &[usize], dir: &Path) -> Result<SearchOutcome> {
    search_to(run, Supernet::new(&run.model, &run.search)?, data, train, val, dir)
}

/// [`run_search_to`] continuing from a checkpoint, which must have been
/// written under `run`.
pub fn resume_search_to(run: &RunConfig, checkpoint: &Path, data: &Dataset, train: &[usize], val: &[usize], dir: &Path) -> Result<SearchOutcome> {
    let supernet = io::Checkpoint::read(checkpoint, Some(run))?.to_supernet()?;
    search_to(run, supernet, data, train, val, dir)
}

fn search_to(run: &RunConfig, supernet: Supernet, data: &Dataset, train: &[usize], val: &[usize], dir: &Path) -> Result<SearchOutcome> {
    fs::create_dir_all(dir)?;
    let outcome = drive(run, supernet, data, train, val, &mut |s| io::Checkpoint::from_supernet(run, s).write(&dir.join(WARMUP_CHECKPOINT)))?;
    cli::write_run_artifacts(dir, run, &outcome)?;
    Ok(outcome)
}

/// Continues a run from a supernet checkpoint taken at a stage boundary.
/// With the same data the outcome equals the uninterrupted run's.
pub fn resume_search(checkpoint: &Path, data: &Dataset, train: &[usize], val: &[usize]) -> Result<SearchOutcome> {
    let ckpt = io::Checkpoint::read(checkpoint, None)?;
    let supernet = ckpt.to_supernet()?;
    drive(&ckpt.config, supernet, data, train, val, &mut |_| Ok(()))
}

fn drive(
    run: &RunConfig,
    mut supernet: Supernet,
    data: &Dataset,
    train: &[usize],
    val: &[usize],
    after_warmup: &mut dyn FnMut(&Supernet) -> Result<()>,
) -> Result<SearchOutcome> {
    ensure!(!val.is_empty(), Invalid, "empty validation split");
    let start = Instant::now();
    let (d_m, d_a) = supernet.split(train)?;
    supernet.warmup_stage(data, &d_m)?;
    if !supernet.searched() {
        after_warmup(&supernet)?;
        supernet.iterative_stage(data, &d_m, &d_a)?;
    }
    let arch = supernet.theta.derive();
    let val_samples: Vec<_> = val.iter().map(|&i| data.samples[i].clone()).collect();
    let sel = arch.selection();
    let supernet_path = stage(Stage::Search, supernet.net.evaluate(&val_samples, &sel))?;
    let (model, retrain_losses) = train_fixed(&run.model, &arch, data, train, &run.search, derive_seed(run.search.seed, 6))?;
    let validation = stage(Stage::Retrain, model.evaluate(&val_samples, &model.default_selection()))?;
    let mut search_log = supernet.log.clone();
    let last = search_log.last().map_or(0, |r| r.epoch);
    for (i, &l) in retrain_losses.iter().enumerate() {
        search_log.push(EpochRecord { epoch: last + i + 1, stage: Stage::Retrain, split: "train".into(), loss: l, metric: None, entropy: Vec::new() });
    }
    search_log.push(EpochRecord {
        epoch: last + retrain_losses.len(),
        stage: Stage::Retrain,
        split: "val".into(),
        loss: validation.loss,
        metric: Some(validation.metric),
        entropy: Vec::new(),
    });
    let report = RunReport {
        config: run.clone(),
        seed: run.search.seed,
        architecture: arch,
        theta: supernet.theta.clone(),
        search_log,
        retrain_losses,
        supernet_path: supernet_path.into(),
        validation: validation.into(),
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    Ok(SearchOutcome { report, supernet, model })
}

/// One architecture's result in the exhaustive enumeration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleEntry {
    pub architecture: Architecture,
    pub val_loss: f64,
    pub val_metric: f64,
}

/// Trains every architecture from scratch under one budget and ranks them by
/// validation loss (best first). Training seeds are shared so only the
/// architecture differs between entries.
pub fn exhaustive_oracle(run: &RunConfig, data: &Dataset, train: &[usize], val: &[usize], seed: u64) -> Result<Vec<OracleEntry>> {
    let (m, n) = (run.search.encoder_blocks, run.search.decoder_blocks);
    let size = count_search_space(m, n);
    ensure!(size <= ORACLE_LIMIT.into(), Invalid, "search space of {size} architectures exceeds the oracle limit of {ORACLE_LIMIT}");
    let val_samples: Vec<_> = val.iter().map(|&i| data.samples[i].clone()).collect();
    let archs = enumerate_architectures(m, n);
    let mut entries = archs
        .par_iter()
        .map(|arch| {
            let (net, _) = train_fixed(&run.model, arch, data, train, &run.search, seed)?;
            let e = net.evaluate(&val_samples, &net.default_selection())?;
            Ok(OracleEntry { architecture: arch.clone(), val_loss: e.loss, val_metric: e.metric })
        })
        .collect::<Result<Vec<_>>>()?;
    entries.sort_by(|a, b| a.val_loss.total_cmp(&b.val_loss).then_with(|| a.architecture.cmp(&b.architecture)));
    Ok(entries)
}

/// 1-based rank of `arch` in an oracle ranking.
pub fn oracle_rank(entries: &[OracleEntry], arch: &Architecture) -> Option<usize> {
    entries.iter().position(|e| &e.architecture == arch).map(|p| p + 1)
}

//! One-shot architecture search over a weight-sharing supernet.
//!
//! The supernet holds an independent parameter record for every candidate
//! operation of every block. Training alternates between updating the
//! weights `W` of a sampled single path and updating the per-block
//! architecture logits `θ` with `W` frozen.

use num_bigint::BigUint;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::attention::OperationKind;
use crate::backbone::{Architecture, Layout, Selection};
use crate::error::{ensure, Error, Result};
use crate::heads::MiningConfig;
use crate::model::{Dataset, ModelConfig, Network};
use crate::numerics::{derive_seed, seeded, Adam, AdamConfig, Graph, ParamGrads, ParamStore, Rng, StepOutcome, Tensor};

/// `2^M · 4^N`.
pub fn count_search_space(m: usize, n: usize) -> BigUint {
    let enc = BigUint::from(OperationKind::ENCODER_POOL.len()).pow(m as u32);
    let dec = BigUint::from(OperationKind::DECODER_POOL.len()).pow(n as u32);
    enc * dec
}

/// Every architecture with `m` encoder and `n` decoder blocks, in
/// lexicographic order of candidate indices (encoder first).
pub fn enumerate_architectures(m: usize, n: usize) -> Vec<Architecture> {
    let mut out = Vec::new();
    let total = m + n;
    let radix: Vec<usize> = (0..total).map(|i| if i < m { 2 } else { 4 }).collect();
    let mut digits = vec![0usize; total];
    loop {
        let sel = Selection { encoder: digits[..m].to_vec(), decoder: digits[m..].to_vec() };
        out.push(Architecture::from_selection(&sel));
        let mut i = total;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            digits[i] += 1;
            if digits[i] < radix[i] {
                break;
            }
            digits[i] = 0;
        }
    }
}

/// Splits `0..n` into `(D_m, D_a)` with `|D_a| = round(n / (ratio + 1))`.
pub fn split_train_set(n: usize, ratio: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    ensure!(n >= 2, Invalid, "cannot split {n} samples");
    ensure!(ratio > 0.0 && ratio.is_finite(), Invalid, "split ratio must be positive, got {ratio}");
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seeded(seed));
    let n_a = ((n as f64 / (ratio + 1.0)).round() as usize).clamp(1, n - 1);
    let mut d_a = idx.split_off(n - n_a);
    let mut d_m = idx;
    d_m.sort_unstable();
    d_a.sort_unstable();
    Ok((d_m, d_a))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    Uniform,
    Softmax,
}

/// Per-block logits over the candidate operations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureWeights {
    pub encoder: Vec<Vec<f64>>,
    pub decoder: Vec<Vec<f64>>,
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    crate::numerics::softmax(&Tensor::row(row), 1).expect("non-empty row").into_data()
}

impl ArchitectureWeights {
    pub fn zeros(m: usize, n: usize) -> Self {
        ArchitectureWeights {
            encoder: vec![vec![0.0; OperationKind::ENCODER_POOL.len()]; m],
            decoder: vec![vec![0.0; OperationKind::DECODER_POOL.len()]; n],
        }
    }

    /// All rows, encoder blocks first.
    pub fn rows(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.encoder.iter().chain(&self.decoder)
    }

    pub fn rows_mut(&mut self) -> impl Iterator<Item = &mut Vec<f64>> {
        self.encoder.iter_mut().chain(self.decoder.iter_mut())
    }

    pub fn blocks(&self) -> usize {
        self.encoder.len() + self.decoder.len()
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.encoder.iter().all(|r| r.len() == 2), Shape, "encoder rows must hold 2 logits");
        ensure!(self.decoder.iter().all(|r| r.len() == 4), Shape, "decoder rows must hold 4 logits");
        ensure!(self.rows().flatten().all(|v| v.is_finite()), NonFinite, "architecture weights are not finite");
        Ok(())
    }

    pub fn probabilities(&self) -> Vec<Vec<f64>> {
        self.rows().map(|r| softmax_row(r)).collect()
    }

    /// Entropy (nats) of each block's operation distribution.
    pub fn entropies(&self) -> Vec<f64> {
        self.probabilities()
            .iter()
            .map(|p| -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>())
            .collect()
    }

    /// Per-block argmax, lowest index on ties.
    pub fn derive(&self) -> Architecture {
        let pick = |r: &Vec<f64>| crate::heads::argmax(r).expect("non-empty row");
        Architecture::from_selection(&Selection {
            encoder: self.encoder.iter().map(pick).collect(),
            decoder: self.decoder.iter().map(pick).collect(),
        })
    }

    pub fn sample(&self, mode: SamplingMode, rng: &mut Rng) -> Selection {
        let mut draw = |row: &Vec<f64>| match mode {
            SamplingMode::Uniform => rng.random_range(0..row.len()),
            SamplingMode::Softmax => {
                let p = softmax_row(row);
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (i, pi) in p.iter().enumerate() {
                    acc += pi;
                    if u < acc {
                        return i;
                    }
                }
                p.len() - 1
            }
        };
        Selection { encoder: self.encoder.iter().map(&mut draw).collect(), decoder: self.decoder.iter().map(&mut draw).collect() }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.rows().flatten().copied().collect()
    }

    pub fn bitwise_eq(&self, other: &ArchitectureWeights) -> bool {
        let (a, b) = (self.flatten(), other.flatten());
        self.encoder.len() == other.encoder.len()
            && a.len() == b.len()
            && a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits())
    }
}

/// How the architecture-weight gradient is estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// One-hot sampled gate forward, softmax Jacobian backward.
    StraightThrough,
    /// Score-function estimate with a moving-average baseline.
    Reinforce,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub warmup_epochs: usize,
    pub search_epochs: usize,
    /// Weight steps per architecture step.
    pub u: usize,
    /// `|D_m| / |D_a|`.
    pub split_ratio: f64,
    pub lr_w: f64,
    pub lr_theta: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub estimator: Estimator,
    /// Epochs without improvement of the derived architecture's `D_a` loss
    /// before the iterative stage stops; `None` disables early stopping.
    pub patience: Option<usize>,
    /// Hard-negative mining for matching; `None` trains on flagged pairs.
    pub mining: Option<MiningSettings>,
    pub retrain_epochs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiningSettings {
    pub n_sample: usize,
    pub top_k: usize,
}

impl From<MiningSettings> for MiningConfig {
    fn from(m: MiningSettings) -> Self {
        MiningConfig { n_sample: m.n_sample, top_k: m.top_k }
    }
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            encoder_blocks: 2,
            decoder_blocks: 2,
            warmup_epochs: 50,
            search_epochs: 20,
            u: 5,
            split_ratio: 4.0,
            lr_w: 1e-4,
            lr_theta: 3e-3,
            batch_size: 64,
            seed: 0,
            estimator: Estimator::StraightThrough,
            patience: Some(3),
            mining: None,
            retrain_epochs: 20,
        }
    }
}

impl SearchConfig {
    /// Budget for the synthetic tasks at d = 16: larger steps than the
    /// defaults, no early stopping.
    pub fn desk() -> Self {
        SearchConfig {
            warmup_epochs: 30,
            search_epochs: 60,
            lr_w: 3e-3,
            lr_theta: 0.05,
            batch_size: 32,
            patience: None,
            retrain_epochs: 30,
            ..SearchConfig::default()
        }
    }

    /// Mining settings used with [`SearchConfig::desk`] on matching tasks.
    pub fn desk_mining() -> MiningSettings {
        MiningSettings { n_sample: 16, top_k: 5 }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.warmup_epochs >= 1, Invalid, "warm-up epochs must be at least 1");
        ensure!(self.search_epochs >= 1, Invalid, "search epochs must be at least 1");
        ensure!(self.u >= 1, Invalid, "u must be at least 1");
        ensure!(self.split_ratio > 0.0 && self.split_ratio.is_finite(), Invalid, "split ratio must be positive");
        ensure!(self.lr_w > 0.0 && self.lr_theta > 0.0, Invalid, "learning rates must be positive");
        ensure!(self.batch_size >= 1, Invalid, "batch size must be at least 1");
        Ok(())
    }

    pub fn mining_config(&self) -> Option<MiningConfig> {
        self.mining.map(Into::into)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Warmup,
    Search,
    Retrain,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Warmup => "warmup",
            Stage::Search => "search",
            Stage::Retrain => "retrain",
        }
    }
}

/// One row of the search log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: Stage,
    pub split: String,
    pub loss: f64,
    pub metric: Option<f64>,
    pub entropy: Vec<f64>,
}

/// Update counts used to check the alternation schedule.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SearchCounters {
    pub w_steps: u64,
    pub theta_steps: u64,
    /// Weight updates received by each (block, candidate) pair, encoder blocks first.
    pub op_updates: Vec<Vec<u64>>,
}

/// The supernet with its architecture weights and optimizer state.
#[derive(Debug, Clone)]
pub struct Supernet {
    pub net: Network,
    pub theta: ArchitectureWeights,
    pub config: SearchConfig,
    pub w_opt: Adam,
    pub theta_opt: Adam,
    theta_store: ParamStore,
    pub rng: Rng,
    pub epoch: usize,
    pub counters: SearchCounters,
    pub log: Vec<EpochRecord>,
    /// Moving-average loss baseline of the score-function estimator.
    pub baseline: Option<f64>,
}

impl Supernet {
    pub fn new(model: &ModelConfig, config: &SearchConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::Supernet { encoder_blocks: config.encoder_blocks, decoder_blocks: config.decoder_blocks };
        let net = Network::new(model, &layout, derive_seed(config.seed, 1))?;
        let theta = ArchitectureWeights::zeros(config.encoder_blocks, config.decoder_blocks);
        let mut theta_store = ParamStore::new();
        for (i, row) in theta.rows().enumerate() {
            theta_store.add(format!("theta.{i}"), Tensor::row(row));
        }
        let counters = SearchCounters {
            op_updates: theta.rows().map(|r| vec![0; r.len()]).collect(),
            ..SearchCounters::default()
        };
        Ok(Supernet {
            net,
            theta,
            config: config.clone(),
            w_opt: Adam::new(AdamConfig::with_lr(config.lr_w)),
            theta_opt: Adam::new(AdamConfig::with_lr(config.lr_theta)),
            theta_store,
            rng: seeded(derive_seed(config.seed, 2)),
            epoch: 0,
            counters,
            log: Vec::new(),
            baseline: None,
        })
    }

    /// Replaces the architecture weights, e.g. when resuming.
    pub fn set_theta(&mut self, theta: ArchitectureWeights) -> Result<()> {
        theta.validate()?;
        ensure!(
            theta.encoder.len() == self.theta.encoder.len() && theta.decoder.len() == self.theta.decoder.len(),
            Shape,
            "architecture weights for a different block count"
        );
        for (i, row) in theta.rows().enumerate() {
            self.theta_store.set(crate::numerics::ParamId(i), Tensor::row(row))?;
        }
        self.theta = theta;
        Ok(())
    }

    fn sync_theta_from_store(&mut self) {
        let rows: Vec<Vec<f64>> = (0..self.theta.blocks()).map(|i| self.theta_store.get(crate::numerics::ParamId(i)).data().to_vec()).collect();
        let m = self.theta.encoder.len();
        self.theta.encoder = rows[..m].to_vec();
        self.theta.decoder = rows[m..].to_vec();
    }

    fn record_updates(&mut self, sel: &Selection) {
        for (i, &c) in sel.encoder.iter().chain(&sel.decoder).enumerate() {
            self.counters.op_updates[i][c] += 1;
        }
    }

    fn stage_error(stage: Stage, e: Error) -> Error {
        match e {
            Error::Stage { .. } => e,
            other => Error::Stage { stage: stage.name().into(), reason: other.to_string() },
        }
    }

    /// One weight step on `batch` (indices into `data`) through `sel`.
    pub fn w_step(&mut self, data: &Dataset, batch: &[usize], sel: &Selection) -> Result<f64> {
        let mining = self.config.mining_config();
        let (loss, _) = self.net.train_step(&mut self.w_opt, data, batch, sel, mining, &mut self.rng)?;
        self.counters.w_steps += 1;
        self.record_updates(sel);
        Ok(loss)
    }

    /// One architecture-weight step on `batch` with every `W` frozen.
    pub fn theta_step(&mut self, data: &Dataset, batch: &[usize]) -> Result<f64> {
        ensure!(!batch.is_empty(), Invalid, "empty architecture batch");
        let mining = self.config.mining_config();
        let blocks = self.theta.blocks();
        let mut grads = ParamGrads::new(blocks);
        let mut total = 0.0;
        match self.config.estimator {
            Estimator::StraightThrough => {
                let sel = self.theta.sample(SamplingMode::Softmax, &mut self.rng);
                let examples = self.net.make_examples(data, batch, &sel, mining, &mut self.rng)?;
                let choices: Vec<usize> = sel.encoder.iter().chain(&sel.decoder).copied().collect();
                for ex in examples {
                    let mut g = Graph::new(&self.net.store);
                    g.set_train(false).set_param_grads(false);
                    let mut leaves = Vec::with_capacity(blocks);
                    let mut gates = Vec::with_capacity(blocks);
                    for (row, &c) in self.theta.rows().zip(&choices) {
                        let leaf = g.leaf(Tensor::row(row), true);
                        gates.push(g.softmax_gates(leaf, c)?);
                        leaves.push(leaf);
                    }
                    let loss = self.net.example_loss(&mut g, data, ex, &sel, Some(&gates), &mut self.rng)?;
                    total += g.scalar(loss);
                    let back = g.backward(loss)?;
                    ensure!(back.params().touched().next().is_none(), Invalid, "weights received gradient in an architecture step");
                    for (i, leaf) in leaves.iter().enumerate() {
                        if let Some(gr) = back.wrt(*leaf) {
                            grads.accumulate(crate::numerics::ParamId(i), gr);
                        }
                    }
                }
            }
            Estimator::Reinforce => {
                let probs = self.theta.probabilities();
                for &i in batch {
                    let sel = self.theta.sample(SamplingMode::Softmax, &mut self.rng);
                    let ex = self.net.make_examples(data, &[i], &sel, mining, &mut self.rng)?[0];
                    let mut g = Graph::inference(&self.net.store);
                    let loss_var = self.net.example_loss(&mut g, data, ex, &sel, None, &mut self.rng)?;
                    let loss = g.scalar(loss_var);
                    total += loss;
                    let advantage = loss - self.baseline.unwrap_or(loss);
                    let choices = sel.encoder.iter().chain(&sel.decoder);
                    for (b, (&c, p)) in choices.zip(&probs).enumerate() {
                        let gr: Vec<f64> = p.iter().enumerate().map(|(j, pj)| advantage * (f64::from(j == c) - pj)).collect();
                        grads.accumulate(crate::numerics::ParamId(b), &gr);
                    }
                }
                let mean = total / batch.len() as f64;
                self.baseline = Some(match self.baseline {
                    Some(b) => 0.9 * b + 0.1 * mean,
                    None => mean,
                });
            }
        }
        grads.scale(1.0 / batch.len() as f64);
        if !grads.is_finite() {
            return Err(Error::NonFinite("architecture-weight gradient is not finite".into()));
        }
        if let StepOutcome::Skipped { param } = self.theta_opt.step(&mut self.theta_store, &grads) {
            return Err(Error::NonFinite(format!("gradient of {param} is not finite")));
        }
        self.sync_theta_from_store();
        self.theta.validate()?;
        self.counters.theta_steps += 1;
        Ok(total / batch.len() as f64)
    }

    fn batches(&mut self, indices: &[usize]) -> Vec<Vec<usize>> {
        let mut order = indices.to_vec();
        order.shuffle(&mut self.rng);
        order.chunks(self.config.batch_size).map(<[usize]>::to_vec).collect()
    }

    fn positives(data: &Dataset, indices: &[usize]) -> Vec<usize> {
        let pos = data.positives();
        indices.iter().copied().filter(|i| pos.binary_search(i).is_ok()).collect()
    }

    /// Training indices for weight steps: matched pairs only when mining.
    fn train_indices(&self, data: &Dataset, indices: &[usize]) -> Vec<usize> {
        if self.config.mining.is_some() {
            Self::positives(data, indices)
        } else {
            indices.to_vec()
        }
    }

    /// Uniformly sampled single paths train `W`; `θ` is not touched. Runs
    /// the warm-up epochs that remain after `self.epoch`.
    pub fn warmup_stage(&mut self, data: &Dataset, d_m: &[usize]) -> Result<()> {
        let train = self.train_indices(data, d_m);
        ensure!(!train.is_empty(), Invalid, "no training samples for warm-up");
        while self.epoch < self.config.warmup_epochs {
            let mut total = 0.0;
            let batches = self.batches(&train);
            for batch in &batches {
                let sel = self.theta.sample(SamplingMode::Uniform, &mut self.rng);
                total += self.w_step(data, batch, &sel).map_err(|e| Self::stage_error(Stage::Warmup, e))?;
            }
            self.epoch += 1;
            let loss = total / batches.len() as f64;
            log::info!("warm-up epoch {}: loss {loss:.4}", self.epoch);
            self.log.push(EpochRecord {
                epoch: self.epoch,
                stage: Stage::Warmup,
                split: "train".into(),
                loss,
                metric: None,
                entropy: self.theta.entropies(),
            });
        }
        Ok(())
    }

    /// Mean `D_a` loss of the architecture currently derived from `θ`.
    pub fn derived_loss(&self, data: &Dataset, d_a: &[usize]) -> Result<f64> {
        let sel = self.theta.derive().selection();
        let samples: Vec<_> = d_a.iter().map(|&i| data.samples[i].clone()).collect();
        self.net.mean_loss(&samples, &sel)
    }

    /// Alternates `u` weight steps on `D_m` with one `θ` step on `D_a`.
    pub fn iterative_stage(&mut self, data: &Dataset, d_m: &[usize], d_a: &[usize]) -> Result<()> {
        let train = self.train_indices(data, d_m);
        let arch_set = self.train_indices(data, d_a);
        ensure!(!train.is_empty() && !arch_set.is_empty(), Invalid, "empty search split");
        let rounds = (train.len().div_ceil(self.config.batch_size) / self.config.u).max(1);
        let mut w_queue: Vec<Vec<usize>> = Vec::new();
        let mut a_queue: Vec<Vec<usize>> = Vec::new();
        let mut best: Option<(f64, ArchitectureWeights)> = None;
        let mut stale = 0;
        let run = |this: &mut Self, w_queue: &mut Vec<Vec<usize>>, a_queue: &mut Vec<Vec<usize>>| -> Result<(f64, f64)> {
            let (mut w_total, mut a_total) = (0.0, 0.0);
            for _ in 0..rounds {
                for _ in 0..this.config.u {
                    if w_queue.is_empty() {
                        *w_queue = this.batches(&train);
                        w_queue.reverse();
                    }
                    let batch = w_queue.pop().expect("refilled");
                    let sel = this.theta.sample(SamplingMode::Softmax, &mut this.rng);
                    w_total += this.w_step(data, &batch, &sel)?;
                }
                if a_queue.is_empty() {
                    *a_queue = this.batches(&arch_set);
                    a_queue.reverse();
                }
                let batch = a_queue.pop().expect("refilled");
                a_total += this.theta_step(data, &batch)?;
            }
            Ok((w_total / (rounds * this.config.u) as f64, a_total / rounds as f64))
        };
        for _ in 0..self.config.search_epochs {
            let (w_loss, a_loss) =
                run(self, &mut w_queue, &mut a_queue).map_err(|e| Self::stage_error(Stage::Search, e))?;
            self.epoch += 1;
            let derived = self.derived_loss(data, d_a).map_err(|e| Self::stage_error(Stage::Search, e))?;
            log::info!("search epoch {}: train {w_loss:.4}, arch {a_loss:.4}, derived {derived:.4} ({})", self.epoch, self.theta.derive());
            let entropy = self.theta.entropies();
            self.log.push(EpochRecord { epoch: self.epoch, stage: Stage::Search, split: "train".into(), loss: w_loss, metric: None, entropy: entropy.clone() });
            self.log.push(EpochRecord { epoch: self.epoch, stage: Stage::Search, split: "arch".into(), loss: derived, metric: None, entropy });
            let improved = best.as_ref().is_none_or(|(b, _)| derived < *b);
            if improved {
                best = Some((derived, self.theta.clone()));
                stale = 0;
            } else {
                stale += 1;
                if self.config.patience.is_some_and(|p| stale >= p) {
                    log::info!("early stop after epoch {}", self.epoch);
                    break;
                }
            }
        }
        if let (Some(_), Some((_, theta))) = (self.config.patience, best) {
            self.set_theta(theta)?;
        }
        Ok(())
    }

    /// `D_m` and `D_a` as indices into the dataset, given the train indices.
    pub fn split(&self, train: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
        let (m, a) = split_train_set(train.len(), self.config.split_ratio, derive_seed(self.config.seed, 3))?;
        Ok((m.iter().map(|&i| train[i]).collect(), a.iter().map(|&i| train[i]).collect()))
    }

    /// True once the iterative stage has run.
    pub fn searched(&self) -> bool {
        self.epoch > self.config.warmup_epochs || self.counters.theta_steps > 0
    }

    /// Runs the remaining stages on a train split and returns the derived
    /// architecture. A supernet restored from a checkpoint continues where
    /// it stopped, provided it stopped at a stage boundary.
    pub fn search(&mut self, data: &Dataset, train: &[usize]) -> Result<Architecture> {
        let (d_m, d_a) = self.split(train)?;
        self.warmup_stage(data, &d_m)?;
        if !self.searched() {
            self.iterative_stage(data, &d_m, &d_a)?;
        }
        Ok(self.theta.derive())
    }

    pub fn standalone(&self, sel: &Selection) -> Result<Network> {
        let mut net = self.net.clone();
        for (blocks, choice) in [(&mut net.backbone.encoder, &sel.encoder), (&mut net.backbone.decoder, &sel.decoder)] {
            ensure!(blocks.len() == choice.len(), Invalid, "selection has the wrong block count");
            for (b, &c) in blocks.iter_mut().zip(choice) {
                ensure!(c < b.candidates.len(), Invalid, "candidate {c} out of range");
                b.candidates = vec![b.candidates[c].clone()];
            }
        }
        Ok(net)
    }
}

/// Trains a fixed architecture from scratch; returns the network and
/// per-epoch training losses.
pub fn train_fixed(
    model: &ModelConfig,
    arch: &Architecture,
    data: &Dataset,
    train: &[usize],
    config: &SearchConfig,
    seed: u64,
) -> Result<(Network, Vec<f64>)> {
    let mut net = Network::fixed(model, arch, derive_seed(seed, 4))?;
    let mut opt = Adam::new(AdamConfig::with_lr(config.lr_w));
    let mut rng = seeded(derive_seed(seed, 5));
    let sel = net.default_selection();
    let mining = config.mining_config();
    let indices: Vec<usize> = if mining.is_some() {
        let pos = data.positives();
        train.iter().copied().filter(|i| pos.binary_search(i).is_ok()).collect()
    } else {
        train.to_vec()
    };
    ensure!(!indices.is_empty(), Invalid, "no training samples");
    let mut losses = Vec::with_capacity(config.retrain_epochs);
    for _ in 0..config.retrain_epochs {
        let mut order = indices.clone();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let chunks: Vec<&[usize]> = order.chunks(config.batch_size).collect();
        for batch in &chunks {
            total += net
                .train_step(&mut opt, data, batch, &sel, mining, &mut rng)
                .map_err(|e| Error::Stage { stage: Stage::Retrain.name().into(), reason: e.to_string() })?
                .0;
        }
        losses.push(total / chunks.len() as f64);
    }
    Ok((net, losses))
}

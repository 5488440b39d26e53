//! File formats: architecture JSON, sample JSONL, binary checkpoints,
//! CSV logs and the JSON run report.
//!
//! Checkpoint layout (little endian):
//!
//! ```text
//! magic   b"MMNASCKP"
//! version u32
//! hash    [u8; 32]   SHA-256 of the embedded config JSON
//! header  u64 length + JSON {config, architecture, epoch, rng, counters, log, baseline}
//! params  u64 count, then per tensor: u64 length + f64 values
//! theta   u64 rows, then per row: u64 length + f64 values
//! optim   u64 count, then per optimizer: u64 step, u64 slots, and per
//!         slot a u8 tag (0 empty, 1 present) + u64 updates + first and
//!         second moments as length-prefixed f64 values
//! ```

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::synthetic::{Latent, SyntheticSample};
use super::{OracleEntry, RunConfig, RunReport};
use crate::backbone::{Architecture, BoxXywh, Label, MultimodalSample};
use crate::error::{ensure, Error, Result};
use crate::model::Network;
use crate::numerics::{Adam, AdamState, Moments, ParamStore, RngState, Tensor};
use crate::search::{ArchitectureWeights, EpochRecord, SearchCounters, Supernet};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MMNASCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn read_architecture(path: &Path) -> Result<Architecture> {
    Architecture::from_json(&fs::read_to_string(path)?)
}

pub fn write_architecture(path: &Path, arch: &Architecture) -> Result<()> {
    fs::write(path, arch.to_json() + "\n")?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct SampleLine {
    tokens: Vec<usize>,
    objects: Vec<Vec<f64>>,
    boxes: Vec<BoxXywh>,
    label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    latent: Option<Latent>,
}

/// One JSON object per line; latents are included when present.
pub fn write_samples(path: &Path, samples: &[SyntheticSample]) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for s in samples {
        let m = &s.sample;
        let line = SampleLine {
            tokens: m.tokens.clone(),
            objects: (0..m.objects.rows()).map(|r| m.objects.row_slice(r).to_vec()).collect(),
            boxes: m.boxes.clone(),
            label: m.label.clone(),
            latent: Some(s.latent.clone()),
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_samples(path: &Path) -> Result<Vec<(MultimodalSample, Option<Latent>)>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: SampleLine = serde_json::from_str(&line).map_err(|e| Error::Invalid(format!("{}:{}: {e}", path.display(), n + 1)))?;
        let objects = Tensor::from_rows(&s.objects)?;
        out.push((MultimodalSample { tokens: s.tokens, objects, boxes: s.boxes, label: s.label }, s.latent));
    }
    Ok(out)
}

/// SHA-256 of the canonical JSON form of a run configuration.
pub fn config_hash(config: &RunConfig) -> [u8; 32] {
    let json = serde_json::to_vec(config).expect("config serializes");
    Sha256::digest(&json).into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    architecture: Option<Architecture>,
    epoch: u64,
    rng: Option<RngState>,
    counters: Option<SearchCounters>,
    log: Vec<EpochRecord>,
    baseline: Option<f64>,
}

/// Weights, architecture logits, optimizer moments and progress of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// Set for fixed networks, absent for supernets.
    pub architecture: Option<Architecture>,
    pub epoch: u64,
    pub rng: Option<RngState>,
    pub counters: Option<SearchCounters>,
    pub log: Vec<EpochRecord>,
    pub baseline: Option<f64>,
    pub params: Vec<Vec<f64>>,
    pub theta: Option<ArchitectureWeights>,
    /// Weight optimizer first, then the architecture-weight optimizer.
    pub optimizers: Vec<AdamState>,
}

fn store_values(store: &ParamStore) -> Vec<Vec<f64>> {
    store.ids().map(|id| store.get(id).data().to_vec()).collect()
}

fn load_values(store: &mut ParamStore, values: &[Vec<f64>]) -> Result<()> {
    ensure!(values.len() == store.len(), Invalid, "checkpoint holds {} tensors, network has {}", values.len(), store.len());
    let ids: Vec<_> = store.ids().collect();
    for (id, v) in ids.into_iter().zip(values) {
        let shape = store.get(id).shape().to_vec();
        ensure!(v.len() == store.get(id).numel(), Shape, "tensor {} expects {} values, checkpoint has {}", store.name(id), store.get(id).numel(), v.len());
        store.set(id, Tensor::new(shape, v.clone())?)?;
    }
    Ok(())
}

#[derive(Default)]
struct ByteWriter(Vec<u8>);

impl ByteWriter {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn len(&mut self, n: usize) {
        self.u64(n as u64);
    }

    fn values(&mut self, v: &[f64]) {
        self.len(v.len());
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }

    fn rows(&mut self, rows: &[Vec<f64>]) {
        self.len(rows.len());
        for r in rows {
            self.values(r);
        }
    }

    fn adam(&mut self, state: &AdamState) {
        self.u64(state.step);
        self.len(state.moments.len());
        for m in &state.moments {
            match m {
                None => self.u8(0),
                Some(m) => {
                    self.u8(1);
                    self.u64(m.updates);
                    self.values(&m.first);
                    self.values(&m.second);
                }
            }
        }
    }
}

struct ByteReader<'a>(&'a [u8]);

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        ensure!(self.0.len() >= n, Invalid, "checkpoint is truncated");
        let (a, b) = self.0.split_at(n);
        self.0 = b;
        Ok(a)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        // every counted item occupies at least one byte
        ensure!(n <= self.0.len() as u64, Invalid, "checkpoint length field {n} exceeds the remaining data");
        Ok(n as usize)
    }

    fn values(&mut self) -> Result<Vec<f64>> {
        let n = self.len()?;
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Invalid("checkpoint length overflow".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    fn rows(&mut self) -> Result<Vec<Vec<f64>>> {
        let n = self.len()?;
        (0..n).map(|_| self.values()).collect()
    }

    fn adam(&mut self) -> Result<AdamState> {
        let step = self.u64()?;
        let n = self.len()?;
        let mut moments = Vec::with_capacity(n);
        for _ in 0..n {
            moments.push(match self.u8()? {
                0 => None,
                1 => {
                    let updates = self.u64()?;
                    let first = self.values()?;
                    let second = self.values()?;
                    ensure!(first.len() == second.len(), Invalid, "optimizer moments disagree in length");
                    Some(Moments { first, second, updates })
                }
                t => return Err(Error::Invalid(format!("bad optimizer moment tag {t}"))),
            });
        }
        Ok(AdamState { step, moments })
    }
}

impl Checkpoint {
    pub fn from_supernet(config: &RunConfig, s: &Supernet) -> Self {
        Checkpoint {
            config: config.clone(),
            architecture: None,
            epoch: s.epoch as u64,
            rng: Some(RngState::capture(&s.rng)),
            counters: Some(s.counters.clone()),
            log: s.log.clone(),
            baseline: s.baseline,
            params: store_values(&s.net.store),
            theta: Some(s.theta.clone()),
            optimizers: vec![s.w_opt.state(), s.theta_opt.state()],
        }
    }

    pub fn from_network(config: &RunConfig, net: &Network, epoch: u64) -> Result<Self> {
        let arch = net.backbone.architecture().ok_or_else(|| Error::Invalid("network is not a fixed architecture".into()))?;
        Ok(Checkpoint {
            config: config.clone(),
            architecture: Some(arch),
            epoch,
            rng: None,
            counters: None,
            log: Vec::new(),
            baseline: None,
            params: store_values(&net.store),
            theta: None,
            optimizers: Vec::new(),
        })
    }

    /// Rebuilds the supernet with the stored weights, logits, optimizer
    /// moments, counters, epoch and generator.
    pub fn to_supernet(&self) -> Result<Supernet> {
        let theta = self.theta.clone().ok_or_else(|| Error::Invalid("checkpoint holds a fixed network, not a supernet".into()))?;
        let mut s = Supernet::new(&self.config.model, &self.config.search)?;
        load_values(&mut s.net.store, &self.params)?;
        s.set_theta(theta)?;
        s.epoch = self.epoch as usize;
        if let Some(r) = &self.rng {
            s.rng = r.restore();
        }
        if let Some(c) = &self.counters {
            s.counters = c.clone();
        }
        s.log = self.log.clone();
        s.baseline = self.baseline;
        if let [w, t] = self.optimizers.as_slice() {
            s.w_opt = Adam::from_state(*s.w_opt.config(), w.clone());
            s.theta_opt = Adam::from_state(*s.theta_opt.config(), t.clone());
        }
        Ok(s)
    }

    pub fn to_network(&self) -> Result<Network> {
        let arch = self.architecture.as_ref().ok_or_else(|| Error::Invalid("checkpoint holds a supernet, not a fixed network".into()))?;
        let mut net = Network::fixed(&self.config.model, arch, 0)?;
        load_values(&mut net.store, &self.params)?;
        Ok(net)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            config: self.config.clone(),
            architecture: self.architecture.clone(),
            epoch: self.epoch,
            rng: self.rng,
            counters: self.counters.clone(),
            log: self.log.clone(),
            baseline: self.baseline,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut w = ByteWriter::default();
        w.0.extend_from_slice(CHECKPOINT_MAGIC);
        w.0.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        w.0.extend_from_slice(&config_hash(&self.config));
        w.len(json.len());
        w.0.extend_from_slice(&json);
        w.rows(&self.params);
        let theta: Vec<Vec<f64>> = self.theta.as_ref().map(|t| t.rows().cloned().collect()).unwrap_or_default();
        w.rows(&theta);
        w.len(self.optimizers.len());
        for o in &self.optimizers {
            w.adam(o);
        }
        w.0
    }

    /// Parses a checkpoint; with `expected`, rejects one written under a
    /// different configuration.
    pub fn from_bytes(bytes: &[u8], expected: Option<&RunConfig>) -> Result<Self> {
        let mut r = ByteReader(bytes);
        ensure!(r.take(8)? == CHECKPOINT_MAGIC, Invalid, "not a checkpoint file (bad magic)");
        let version = r.u32()?;
        ensure!(version == CHECKPOINT_VERSION, Invalid, "unsupported checkpoint version {version}");
        let hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let len = r.len()?;
        let header: Header = serde_json::from_slice(r.take(len)?)?;
        ensure!(config_hash(&header.config) == hash, Invalid, "checkpoint header does not match its config hash");
        if let Some(exp) = expected {
            ensure!(config_hash(exp) == hash, Invalid, "checkpoint was written under a different configuration (config hash mismatch)");
        }
        let params = r.rows()?;
        let theta_rows = r.rows()?;
        let n_opt = r.len()?;
        let optimizers = (0..n_opt).map(|_| r.adam()).collect::<Result<Vec<_>>>()?;
        ensure!(r.0.is_empty(), Invalid, "trailing bytes after checkpoint");
        let theta = if header.architecture.is_some() {
            ensure!(theta_rows.is_empty(), Invalid, "fixed-network checkpoint carries architecture weights");
            None
        } else {
            let m = header.config.search.encoder_blocks;
            ensure!(theta_rows.len() >= m, Invalid, "checkpoint holds too few architecture rows");
            let t = ArchitectureWeights { encoder: theta_rows[..m].to_vec(), decoder: theta_rows[m..].to_vec() };
            t.validate()?;
            Some(t)
        };
        Ok(Checkpoint {
            config: header.config,
            architecture: header.architecture,
            epoch: header.epoch,
            rng: header.rng,
            counters: header.counters,
            log: header.log,
            baseline: header.baseline,
            params,
            theta,
            optimizers,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path, expected: Option<&RunConfig>) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes, expected)
    }
}

fn fmt_f(v: f64) -> String {
    format!("{v:.6}")
}

/// `epoch,stage,split,loss,metric`.
pub fn metrics_csv(log: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,stage,split,loss,metric\n");
    for r in log {
        let metric = r.metric.map(fmt_f).unwrap_or_default();
        s.push_str(&format!("{},{},{},{},{}\n", r.epoch, r.stage.name(), r.split, fmt_f(r.loss), metric));
    }
    s
}

/// `epoch,stage,split,loss,entropy_0,…` with one entropy column per block.
pub fn search_log_csv(log: &[EpochRecord], blocks: usize) -> String {
    let mut s = String::from("epoch,stage,split,loss");
    for b in 0..blocks {
        s.push_str(&format!(",entropy_{b}"));
    }
    s.push('\n');
    for r in log.iter().filter(|r| r.entropy.len() == blocks) {
        s.push_str(&format!("{},{},{},{}", r.epoch, r.stage.name(), r.split, fmt_f(r.loss)));
        for e in &r.entropy {
            s.push(',');
            s.push_str(&fmt_f(*e));
        }
        s.push('\n');
    }
    s
}

/// `task,metric,value` rows.
pub fn eval_table(rows: &[(String, String, f64)]) -> String {
    let mut s = String::from("task,metric,value\n");
    for (t, m, v) in rows {
        s.push_str(&format!("{t},{m},{}\n", fmt_f(*v)));
    }
    s
}

/// `rank,architecture,val_loss,val_metric`.
pub fn oracle_csv(entries: &[OracleEntry]) -> String {
    let mut s = String::from("rank,architecture,val_loss,val_metric\n");
    for (i, e) in entries.iter().enumerate() {
        s.push_str(&format!("{},{},{},{}\n", i + 1, e.architecture.label(), fmt_f(e.val_loss), fmt_f(e.val_metric)));
    }
    s
}

/// Pretty JSON with fields in declaration order.
pub fn report_json(report: &RunReport) -> String {
    serde_json::to_string_pretty(report).expect("report serializes")
}

pub fn read_report(path: &Path) -> Result<RunReport> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

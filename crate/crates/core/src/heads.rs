//! Task heads over the backbone outputs: question answering, image-text
//! matching and visual grounding, plus box geometry and hard-negative mining.

use rand::seq::index::sample;
use rand::Rng as _;

use crate::backbone::BoxXywh;
use crate::error::{ensure, Error, Result};
use crate::numerics::{kernels, Graph, ParamId, ParamStore, Rng, Tensor, Var};

/// Default IoU above which an object's offsets are regressed.
pub const IOU_THRESHOLD: f64 = 0.5;
pub const HARD_NEGATIVE_SAMPLES: usize = 64;
pub const HARD_NEGATIVE_TOP_K: usize = 5;

/// Two-layer MLP `FC_d → ReLU → FC_1` producing one logit per row.
#[derive(Debug, Clone, PartialEq)]
pub struct ReductionParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl ReductionParams {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut Rng) -> Self {
        ReductionParams {
            w1: store.linear(format!("{prefix}.w1"), d, d, rng),
            b1: store.zeros(format!("{prefix}.b1"), &[1, d]),
            w2: store.linear(format!("{prefix}.w2"), d, 1, rng),
            b2: store.zeros(format!("{prefix}.b2"), &[1, 1]),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.w1, self.b1, self.w2, self.b2]
    }
}

/// Softmax-weighted sum of the rows of `f` (`[k × d]`). `mask`, if given, is an
/// additive `[k × 1]` column. Returns `(weights [1 × k], reduced [1 × d])`.
pub fn attentional_reduce(g: &mut Graph, p: &ReductionParams, f: Var, mask: Option<Var>) -> Result<(Var, Var)> {
    let k = g.shape(f)[0];
    ensure!(k >= 1, Invalid, "reduction over zero rows");
    let w1 = g.param(p.w1);
    let b1 = g.param(p.b1);
    let w2 = g.param(p.w2);
    let b2 = g.param(p.b2);
    let h = g.matmul(f, w1)?;
    let h = g.add_row(h, b1)?;
    let h = g.relu(h);
    let logits = g.matmul(h, w2)?;
    let mut logits = g.add_row(logits, b2)?;
    if let Some(m) = mask {
        logits = g.add(logits, m)?;
    }
    let logits = g.reshape(logits, &[1, k])?;
    let weights = g.softmax_rows(logits)?;
    let reduced = g.matmul(weights, f)?;
    Ok((weights, reduced))
}

/// `LayerNorm(W_xᵀ x̃ + W_yᵀ ỹ)` with `d_z` output width.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub wx: ParamId,
    pub wy: ParamId,
    pub gain: ParamId,
    pub bias: ParamId,
}

impl FusionParams {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize, d_z: usize, rng: &mut Rng) -> Self {
        FusionParams {
            wx: store.linear(format!("{prefix}.wx"), d, d_z, rng),
            wy: store.linear(format!("{prefix}.wy"), d, d_z, rng),
            gain: store.ones(format!("{prefix}.ln.gain"), &[1, d_z]),
            bias: store.zeros(format!("{prefix}.ln.bias"), &[1, d_z]),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.wx, self.wy, self.gain, self.bias]
    }
}

/// Fuses `x̃` (`[1 × d]`) with `y` (`[1 × d]`, or `[n × d]` for row-wise fusion
/// where `x̃` is broadcast).
pub fn fuse(g: &mut Graph, p: &FusionParams, x: Var, y: Var) -> Result<Var> {
    ensure!(g.shape(x)[0] == 1, Shape, "fused sentence feature must be a single row");
    let wx = g.param(p.wx);
    let wy = g.param(p.wy);
    let gain = g.param(p.gain);
    let bias = g.param(p.bias);
    let px = g.matmul(x, wx)?;
    let py = g.matmul(y, wy)?;
    let sum = g.add_row(py, px)?;
    g.layer_norm(sum, gain, bias)
}

fn text_mask(g: &mut Graph, valid: &[bool]) -> Option<Var> {
    valid.iter().any(|v| !v).then(|| {
        let data = valid.iter().map(|&ok| if ok { 0.0 } else { crate::attention::MASK_LOGIT }).collect();
        g.constant(Tensor::new(vec![valid.len(), 1], data).expect("non-empty"))
    })
}

/// Reduces both modalities and fuses them into `z` (`[1 × d_z]`).
#[derive(Debug, Clone, PartialEq)]
pub struct PooledFusion {
    pub reduce_x: ReductionParams,
    pub reduce_y: ReductionParams,
    pub fusion: FusionParams,
}

impl PooledFusion {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize, d_z: usize, rng: &mut Rng) -> Self {
        PooledFusion {
            reduce_x: ReductionParams::new(store, &format!("{prefix}.reduce_x"), d, rng),
            reduce_y: ReductionParams::new(store, &format!("{prefix}.reduce_y"), d, rng),
            fusion: FusionParams::new(store, &format!("{prefix}.fuse"), d, d_z, rng),
        }
    }

    pub fn apply(&self, g: &mut Graph, x: Var, y: Var, text_valid: &[bool]) -> Result<Var> {
        let mask = text_mask(g, text_valid);
        let (_, xr) = attentional_reduce(g, &self.reduce_x, x, mask)?;
        let (_, yr) = attentional_reduce(g, &self.reduce_y, y, None)?;
        fuse(g, &self.fusion, xr, yr)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        [self.reduce_x.param_ids(), self.reduce_y.param_ids(), self.fusion.param_ids()].concat()
    }
}

/// Answer classifier over `k` candidate answers.
#[derive(Debug, Clone, PartialEq)]
pub struct VqaHead {
    pub pool: PooledFusion,
    pub w: ParamId,
    pub b: ParamId,
    pub answers: usize,
    pub multi_label: bool,
}

impl VqaHead {
    pub fn new(store: &mut ParamStore, d: usize, d_z: usize, answers: usize, multi_label: bool, rng: &mut Rng) -> Result<Self> {
        ensure!(answers >= 2, Invalid, "need at least two answers, got {answers}");
        Ok(VqaHead {
            pool: PooledFusion::new(store, "vqa", d, d_z, rng),
            w: store.linear("vqa.out.w", d_z, answers, rng),
            b: store.zeros("vqa.out.b", &[1, answers]),
            answers,
            multi_label,
        })
    }

    /// Logits `[1 × k]`.
    pub fn forward(&self, g: &mut Graph, x: Var, y: Var, text_valid: &[bool]) -> Result<Var> {
        let z = self.pool.apply(g, x, y, text_valid)?;
        let w = g.param(self.w);
        let b = g.param(self.b);
        let p = g.matmul(z, w)?;
        g.add_row(p, b)
    }

    /// Softmax cross-entropy for a single label, per-class BCE for soft multi-label targets.
    pub fn loss(&self, g: &mut Graph, logits: Var, target: &VqaTarget) -> Result<Var> {
        match target {
            VqaTarget::Single(label) => {
                ensure!(!self.multi_label, Invalid, "multi-label head given a single label");
                ensure!(*label < self.answers, Invalid, "answer {label} outside {} classes", self.answers);
                g.softmax_cross_entropy(logits, *label)
            }
            VqaTarget::Multi(scores) => {
                ensure!(self.multi_label, Invalid, "single-label head given soft targets");
                ensure!(scores.len() == self.answers, Invalid, "{} targets for {} classes", scores.len(), self.answers);
                let s = g.sigmoid(logits);
                g.binary_cross_entropy(s, scores)
            }
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        [self.pool.param_ids(), vec![self.w, self.b]].concat()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum VqaTarget {
    Single(usize),
    Multi(Vec<f64>),
}

/// Image-text correspondence score `σ(W_zᵀ z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ItmHead {
    pub pool: PooledFusion,
    pub wz: ParamId,
}

impl ItmHead {
    pub fn new(store: &mut ParamStore, d: usize, d_z: usize, rng: &mut Rng) -> Self {
        ItmHead { pool: PooledFusion::new(store, "itm", d, d_z, rng), wz: store.linear("itm.wz", d_z, 1, rng) }
    }

    /// Score `[1 × 1]` in `(0, 1)`.
    pub fn score(&self, g: &mut Graph, x: Var, y: Var, text_valid: &[bool]) -> Result<Var> {
        let z = self.pool.apply(g, x, y, text_valid)?;
        let wz = g.param(self.wz);
        let logit = g.matmul(z, wz)?;
        Ok(g.sigmoid(logit))
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        [self.pool.param_ids(), vec![self.wz]].concat()
    }
}

/// `−[2·log s(I,T) + log(1 − s(I,T')) + log(1 − s(I',T))]`, with the positive
/// term counted twice.
pub fn itm_loss(g: &mut Graph, pos: Var, neg_text: Var, neg_image: Var) -> Result<Var> {
    let lp = g.binary_cross_entropy(pos, &[1.0])?;
    let lt = g.binary_cross_entropy(neg_text, &[0.0])?;
    let li = g.binary_cross_entropy(neg_image, &[0.0])?;
    let lp2 = g.scale(lp, 2.0);
    let s = g.add(lp2, lt)?;
    g.add(s, li)
}

/// Scalar form of [`itm_loss`].
pub fn itm_loss_value(pos: f64, neg_text: f64, neg_image: f64) -> f64 {
    -(2.0 * pos.ln() + (1.0 - neg_text).ln() + (1.0 - neg_image).ln())
}

/// Settings for hard-negative mining.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MiningConfig {
    pub n_sample: usize,
    pub top_k: usize,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig { n_sample: HARD_NEGATIVE_SAMPLES, top_k: HARD_NEGATIVE_TOP_K }
    }
}

/// Samples up to `n_sample` admissible candidates from `0..pool_len`, scores
/// them and returns the `top_k` best, highest first. The whole admissible pool
/// is used when it is smaller than `n_sample`.
pub fn hard_negative_candidates<A, S>(
    pool_len: usize,
    admissible: A,
    mut score: S,
    cfg: MiningConfig,
    rng: &mut Rng,
) -> Result<Vec<(usize, f64)>>
where
    A: Fn(usize) -> bool,
    S: FnMut(usize) -> Result<f64>,
{
    ensure!(cfg.n_sample > 0 && cfg.top_k > 0, Invalid, "mining sizes must be positive");
    let allowed: Vec<usize> = (0..pool_len).filter(|&i| admissible(i)).collect();
    ensure!(!allowed.is_empty(), Invalid, "no admissible negatives in a pool of {pool_len}");
    let chosen: Vec<usize> = if allowed.len() <= cfg.n_sample {
        allowed
    } else {
        sample(rng, allowed.len(), cfg.n_sample).into_iter().map(|i| allowed[i]).collect()
    };
    let mut scored = chosen.into_iter().map(|i| Ok((i, score(i)?))).collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(cfg.top_k);
    Ok(scored)
}

/// One hard negative drawn uniformly from the top-scoring candidates.
pub fn mine_hard_negative<A, S>(pool_len: usize, admissible: A, score: S, cfg: MiningConfig, rng: &mut Rng) -> Result<usize>
where
    A: Fn(usize) -> bool,
    S: FnMut(usize) -> Result<f64>,
{
    let top = hard_negative_candidates(pool_len, admissible, score, cfg, rng)?;
    Ok(top[rng.random_range(0..top.len())].0)
}

/// Intersection over union of two `(xc, yc, w, h)` boxes.
pub fn compute_iou(a: &BoxXywh, b: &BoxXywh) -> f64 {
    let overlap = |ca: f64, wa: f64, cb: f64, wb: f64| {
        let lo = (ca - wa / 2.0).max(cb - wb / 2.0);
        let hi = (ca + wa / 2.0).min(cb + wb / 2.0);
        (hi - lo).max(0.0)
    };
    let inter = overlap(a[0], a[2], b[0], b[2]) * overlap(a[1], a[3], b[1], b[3]);
    let union = a[2] * a[3] + b[2] * b[3] - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// `((x*−x)/w, (y*−y)/h, log(w*/w), log(h*/h))`.
pub fn encode_box_offsets(proposal: &BoxXywh, truth: &BoxXywh) -> Result<[f64; 4]> {
    ensure!(proposal[2] > 0.0 && proposal[3] > 0.0, Invalid, "proposal {proposal:?} has non-positive extent");
    ensure!(truth[2] > 0.0 && truth[3] > 0.0, Invalid, "box {truth:?} has non-positive extent");
    Ok([
        (truth[0] - proposal[0]) / proposal[2],
        (truth[1] - proposal[1]) / proposal[3],
        (truth[2] / proposal[2]).ln(),
        (truth[3] / proposal[3]).ln(),
    ])
}

/// Inverse of [`encode_box_offsets`].
pub fn decode_box_offsets(proposal: &BoxXywh, offsets: &[f64; 4]) -> BoxXywh {
    [
        proposal[0] + offsets[0] * proposal[2],
        proposal[1] + offsets[1] * proposal[3],
        proposal[2] * offsets[2].exp(),
        proposal[3] * offsets[3].exp(),
    ]
}

/// Ranking and regression targets for one grounding sample.
#[derive(Debug, Clone, PartialEq)]
pub struct VgTargets {
    /// IoU of every object with the ground-truth box.
    pub scores: Vec<f64>,
    /// Objects whose IoU exceeds the threshold.
    pub qualifying: Vec<usize>,
    /// Offsets of each qualifying object, flattened `[q × 4]`.
    pub offsets: Vec<f64>,
}

impl VgTargets {
    pub fn new(boxes: &[BoxXywh], truth: &BoxXywh, threshold: f64) -> Result<Self> {
        ensure!(!boxes.is_empty(), Invalid, "grounding needs at least one object");
        let scores: Vec<f64> = boxes.iter().map(|b| compute_iou(b, truth)).collect();
        let qualifying: Vec<usize> = (0..boxes.len()).filter(|&i| scores[i] > threshold).collect();
        let mut offsets = Vec::with_capacity(qualifying.len() * 4);
        for &i in &qualifying {
            offsets.extend(encode_box_offsets(&boxes[i], truth)?);
        }
        Ok(VgTargets { scores, qualifying, offsets })
    }

    /// `softmax(S*)`.
    pub fn distribution(&self) -> Vec<f64> {
        let mut p = self.scores.clone();
        kernels::softmax_in_place(&mut p);
        p
    }
}

/// Per-object score and box offsets from the broadcast fusion of the query.
#[derive(Debug, Clone, PartialEq)]
pub struct VgHead {
    pub reduce_x: ReductionParams,
    pub fusion: FusionParams,
    pub score_w: ParamId,
    pub score_b: ParamId,
    pub box_w: ParamId,
    pub box_b: ParamId,
    pub lambda: f64,
    pub threshold: f64,
}

impl VgHead {
    pub fn new(store: &mut ParamStore, d: usize, d_z: usize, rng: &mut Rng) -> Self {
        VgHead {
            reduce_x: ReductionParams::new(store, "vg.reduce_x", d, rng),
            fusion: FusionParams::new(store, "vg.fuse", d, d_z, rng),
            score_w: store.linear("vg.score.w", d_z, 1, rng),
            score_b: store.zeros("vg.score.b", &[1, 1]),
            box_w: store.linear("vg.box.w", d_z, 4, rng),
            box_b: store.zeros("vg.box.b", &[1, 4]),
            lambda: 1.0,
            threshold: IOU_THRESHOLD,
        }
    }

    /// Scores `[n × 1]` and offsets `[n × 4]`.
    pub fn forward(&self, g: &mut Graph, x: Var, y: Var, text_valid: &[bool]) -> Result<(Var, Var)> {
        let mask = text_mask(g, text_valid);
        let (_, xr) = attentional_reduce(g, &self.reduce_x, x, mask)?;
        let z = fuse(g, &self.fusion, xr, y)?;
        let sw = g.param(self.score_w);
        let sb = g.param(self.score_b);
        let bw = g.param(self.box_w);
        let bb = g.param(self.box_b);
        let s = g.matmul(z, sw)?;
        let s = g.add_row(s, sb)?;
        let b = g.matmul(z, bw)?;
        let b = g.add_row(b, bb)?;
        Ok((s, b))
    }

    pub fn loss(&self, g: &mut Graph, scores: Var, offsets: Var, targets: &VgTargets) -> Result<Var> {
        vg_loss(g, scores, offsets, targets, self.lambda)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = [self.reduce_x.param_ids(), self.fusion.param_ids()].concat();
        ids.extend([self.score_w, self.score_b, self.box_w, self.box_b]);
        ids
    }
}

/// `KL(softmax(S*) ‖ softmax(S)) + λ · mean smooth-L1` over qualifying objects.
pub fn vg_loss(g: &mut Graph, scores: Var, offsets: Var, targets: &VgTargets, lambda: f64) -> Result<Var> {
    let n = targets.scores.len();
    ensure!(g.value(scores).len() == n, Shape, "{} scores for {n} objects", g.value(scores).len());
    ensure!(g.shape(offsets) == [n, 4], Shape, "offsets shape {:?} for {n} objects", g.shape(offsets));
    let row = g.reshape(scores, &[1, n])?;
    let q = g.softmax_rows(row)?;
    let rank = g.kl_divergence(&targets.distribution(), q)?;
    if targets.qualifying.is_empty() || lambda == 0.0 {
        return Ok(rank);
    }
    let picked = g.select_rows(offsets, &targets.qualifying)?;
    // mean over objects of the per-object sum over the four components
    let reg = g.smooth_l1(picked, &targets.offsets)?;
    let reg = g.scale(reg, 4.0 * lambda);
    g.add(rank, reg)
}

/// Index of the highest-scoring object (lowest index on ties).
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in values.iter().enumerate() {
        if best.is_none_or(|b| *v > values[b]) {
            best = Some(i);
        }
    }
    best
}

/// Checks that every listed index differs from the positive one.
pub fn ensure_distinct(positive: usize, negatives: &[usize]) -> Result<()> {
    if let Some(n) = negatives.iter().find(|&&n| n == positive) {
        return Err(Error::Invalid(format!("negative {n} is the positive sample")));
    }
    Ok(())
}

//! Primitive operations of the backbone: self-attention (SA), guided
//! attention (GA), the position-wise feed-forward network (FFN) and
//! relation-biased self-attention (RSA).
//!
//! All four share one scaled dot-product attention with an additive bias,
//! `softmax(QKᵀ/√d + B)·V`, lifted to `h` heads. Each operation is wrapped in
//! a residual connection followed by layer normalization.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Rng, Tensor, Var};

/// Added inside the relation log so that zero MLP outputs stay finite.
pub const RELATION_EPS: f64 = 1e-6;
/// Additive logit for masked (padded) keys.
pub const MASK_LOGIT: f64 = -1e9;
pub const FFN_DROPOUT: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OperationKind {
    #[serde(rename = "SA")]
    Sa,
    #[serde(rename = "GA")]
    Ga,
    #[serde(rename = "FFN")]
    Ffn,
    #[serde(rename = "RSA")]
    Rsa,
}

impl OperationKind {
    pub const ENCODER_POOL: [OperationKind; 2] = [OperationKind::Sa, OperationKind::Ffn];
    pub const DECODER_POOL: [OperationKind; 4] =
        [OperationKind::Sa, OperationKind::Rsa, OperationKind::Ga, OperationKind::Ffn];

    pub fn name(self) -> &'static str {
        match self {
            OperationKind::Sa => "SA",
            OperationKind::Ga => "GA",
            OperationKind::Ffn => "FFN",
            OperationKind::Rsa => "RSA",
        }
    }
}

impl fmt::Display for OperationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OperationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "SA" => Ok(OperationKind::Sa),
            "GA" => Ok(OperationKind::Ga),
            "FFN" => Ok(OperationKind::Ffn),
            "RSA" => Ok(OperationKind::Rsa),
            other => Err(Error::UnknownOperation(other.to_string())),
        }
    }
}

/// Per-head projections stored side by side: head `j` owns columns
/// `j·d_h .. (j+1)·d_h` of `wq`, `wk`, `wv` and rows of `wo`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
    pub d_head: usize,
}

impl AttentionParams {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        ensure!(heads > 0 && d.is_multiple_of(heads), Invalid, "width {d} is not divisible by {heads} heads");
        let d_head = d / heads;
        Ok(AttentionParams {
            wq: store.linear(format!("{prefix}.wq"), d, d, rng),
            wk: store.linear(format!("{prefix}.wk"), d, d, rng),
            wv: store.linear(format!("{prefix}.wv"), d, d, rng),
            wo: store.linear(format!("{prefix}.wo"), d, d, rng),
            heads,
            d_head,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.wq, self.wk, self.wv, self.wo]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl NormParams {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize) -> Self {
        NormParams { gain: store.ones(format!("{prefix}.ln.gain"), &[1, d]), bias: store.zeros(format!("{prefix}.ln.bias"), &[1, d]) }
    }

    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.gain, self.bias]
    }
}

/// `FC_d ∘ Drop ∘ ReLU ∘ FC_4d`.
#[derive(Debug, Clone, PartialEq)]
pub struct FfnParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub dropout: f64,
}

impl FfnParams {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize, dropout: f64, rng: &mut Rng) -> Self {
        FfnParams {
            w1: store.linear(format!("{prefix}.w1"), d, 4 * d, rng),
            b1: store.zeros(format!("{prefix}.b1"), &[1, 4 * d]),
            w2: store.linear(format!("{prefix}.w2"), 4 * d, d, rng),
            b2: store.zeros(format!("{prefix}.b2"), &[1, d]),
            dropout,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.w1, self.b1, self.w2, self.b2]
    }
}

/// `ReLU ∘ FC_1 ∘ ReLU ∘ FC_{d_h}` applied to the last axis of the relation tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationMlpParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl RelationMlpParams {
    pub fn new(store: &mut ParamStore, prefix: &str, d_rel: usize, hidden: usize, rng: &mut Rng) -> Self {
        RelationMlpParams {
            w1: store.linear(format!("{prefix}.rel.w1"), d_rel, hidden, rng),
            b1: store.zeros(format!("{prefix}.rel.b1"), &[1, hidden]),
            w2: store.linear(format!("{prefix}.rel.w2"), hidden, 1, rng),
            // start with positive outputs so the bias is finite and the MLP is live
            b2: store.ones(format!("{prefix}.rel.b2"), &[1, 1]),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.w1, self.b1, self.w2, self.b2]
    }
}

/// Output of an attention-based operation along with each head's weights.
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub out: Var,
    /// One `[m × n]` row-stochastic matrix per head.
    pub weights: Vec<Var>,
}

/// `softmax(QKᵀ/√d + bias)·V`. Returns `(F, weights)`.
pub fn generalized_attention(g: &mut Graph, q: Var, k: Var, v: Var, bias: Option<Var>) -> Result<(Var, Var)> {
    let n = g.shape(k)[0];
    ensure!(n > 0, Invalid, "attention over zero keys");
    ensure!(g.shape(v)[0] == n, Shape, "{n} keys but {} values", g.shape(v)[0]);
    let d = *g.shape(q).last().expect("matrix");
    let scores = g.matmul_nt(q, k)?;
    let mut logits = g.scale(scores, 1.0 / (d as f64).sqrt());
    if let Some(b) = bias {
        logits = g.add(logits, b)?;
    }
    let weights = g.softmax_rows(logits)?;
    let out = g.matmul(weights, v)?;
    Ok((out, weights))
}

/// `[head_1, …, head_h]·W^o` where every head attends with the shared bias.
pub fn multi_head_attention(
    g: &mut Graph,
    params: &AttentionParams,
    q: Var,
    k: Var,
    v: Var,
    bias: Option<Var>,
) -> Result<AttentionOutput> {
    let wq = g.param(params.wq);
    let wk = g.param(params.wk);
    let wv = g.param(params.wv);
    let wo = g.param(params.wo);
    let qp = g.matmul(q, wq)?;
    let kp = g.matmul(k, wk)?;
    let vp = g.matmul(v, wv)?;
    let mut heads = Vec::with_capacity(params.heads);
    let mut weights = Vec::with_capacity(params.heads);
    for j in 0..params.heads {
        let (start, w) = (j * params.d_head, params.d_head);
        let (qj, kj, vj) = if params.heads == 1 {
            (qp, kp, vp)
        } else {
            (g.slice_cols(qp, start, w)?, g.slice_cols(kp, start, w)?, g.slice_cols(vp, start, w)?)
        };
        let (hj, aj) = generalized_attention(g, qj, kj, vj, bias)?;
        heads.push(hj);
        weights.push(aj);
    }
    let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
    let out = g.matmul(cat, wo)?;
    Ok(AttentionOutput { out, weights })
}

fn residual_norm(g: &mut Graph, x: Var, sub: Var, norm: &NormParams) -> Result<Var> {
    let sum = g.add(x, sub)?;
    norm.apply(g, sum)
}

/// `LayerNorm(X + MHA(X, X, X, mask))`.
pub fn sa_op(
    g: &mut Graph,
    attn: &AttentionParams,
    norm: &NormParams,
    x: Var,
    mask: Option<Var>,
) -> Result<AttentionOutput> {
    ensure!(g.shape(x)[0] > 0, Invalid, "SA on an empty sequence");
    let mha = multi_head_attention(g, attn, x, x, x, mask)?;
    let out = residual_norm(g, x, mha.out, norm)?;
    Ok(AttentionOutput { out, weights: mha.weights })
}

/// `LayerNorm(X + MHA(X, Y, Y, mask))`; `mask` is `[m × n]` over the keys of `Y`.
pub fn ga_op(
    g: &mut Graph,
    attn: &AttentionParams,
    norm: &NormParams,
    x: Var,
    y: Var,
    mask: Option<Var>,
) -> Result<AttentionOutput> {
    ensure!(g.shape(y)[0] > 0, Invalid, "GA with an empty guide");
    ensure!(g.shape(x)[1] == g.shape(y)[1], Shape, "GA widths {:?} vs {:?}", g.shape(x), g.shape(y));
    let mha = multi_head_attention(g, attn, x, y, y, mask)?;
    let out = residual_norm(g, x, mha.out, norm)?;
    Ok(AttentionOutput { out, weights: mha.weights })
}

/// `LayerNorm(X + FFN(X))`, rows processed independently.
pub fn ffn_op(g: &mut Graph, ffn: &FfnParams, norm: &NormParams, x: Var, rng: &mut Rng) -> Result<Var> {
    let w1 = g.param(ffn.w1);
    let b1 = g.param(ffn.b1);
    let w2 = g.param(ffn.w2);
    let b2 = g.param(ffn.b2);
    let h = g.matmul(x, w1)?;
    let h = g.add_row(h, b1)?;
    let h = g.relu(h);
    let h = g.dropout(h, ffn.dropout, rng)?;
    let o = g.matmul(h, w2)?;
    let o = g.add_row(o, b2)?;
    residual_norm(g, x, o, norm)
}

/// `log(MLP(R) + ε)` as an `[m × m]` bias. `relations` is the `[m·m × d_r]`
/// flattening of the `[m × m × d_r]` relation tensor.
pub fn relation_bias(g: &mut Graph, mlp: &RelationMlpParams, relations: Var, m: usize) -> Result<Var> {
    ensure!(g.shape(relations)[0] == m * m, Shape, "relation rows {} != {m}²", g.shape(relations)[0]);
    let w1 = g.param(mlp.w1);
    let b1 = g.param(mlp.b1);
    let w2 = g.param(mlp.w2);
    let b2 = g.param(mlp.b2);
    let h = g.matmul(relations, w1)?;
    let h = g.add_row(h, b1)?;
    let h = g.relu(h);
    let s = g.matmul(h, w2)?;
    let s = g.add_row(s, b2)?;
    let s = g.relu(s);
    let s = g.add_scalar(s, RELATION_EPS);
    let s = g.log(s)?;
    g.reshape(s, &[m, m])
}

/// `LayerNorm(X + MHA(X, X, X, log(MLP(R) + ε)))`.
pub fn rsa_op(
    g: &mut Graph,
    attn: &AttentionParams,
    mlp: &RelationMlpParams,
    norm: &NormParams,
    x: Var,
    relations: Var,
) -> Result<AttentionOutput> {
    let m = g.shape(x)[0];
    ensure!(m > 0, Invalid, "RSA on an empty set");
    ensure!(
        g.shape(relations)[0] == m * m,
        Shape,
        "RSA: {m} rows but relation tensor has {} pairs",
        g.shape(relations)[0]
    );
    let bias = relation_bias(g, mlp, relations, m)?;
    let mha = multi_head_attention(g, attn, x, x, x, Some(bias))?;
    let out = residual_norm(g, x, mha.out, norm)?;
    Ok(AttentionOutput { out, weights: mha.weights })
}

/// Parameters of one candidate operation inside a block.
#[derive(Debug, Clone, PartialEq)]
pub enum OpParams {
    Sa { attn: AttentionParams, norm: NormParams },
    Ga { attn: AttentionParams, norm: NormParams },
    Ffn { ffn: FfnParams, norm: NormParams },
    Rsa { attn: AttentionParams, mlp: RelationMlpParams, norm: NormParams },
}

/// Auxiliary inputs an operation may read besides its main input.
#[derive(Debug, Clone, Copy, Default)]
pub struct OpContext {
    /// Additive `[m × m]` mask for self-attention over the main input.
    pub self_mask: Option<Var>,
    /// Features attended by GA.
    pub guide: Option<Var>,
    /// Additive `[m × n]` mask over the guide's rows.
    pub guide_mask: Option<Var>,
    /// Flattened `[m·m × d_r]` relation features for RSA.
    pub relations: Option<Var>,
}

/// Width settings shared by every operation of a network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OpDims {
    pub d: usize,
    pub heads: usize,
    pub d_rel: usize,
    pub dropout: f64,
}

impl OpParams {
    pub fn new(kind: OperationKind, store: &mut ParamStore, prefix: &str, dims: OpDims, rng: &mut Rng) -> Result<Self> {
        let prefix = format!("{prefix}.{kind}");
        let OpDims { d, heads, d_rel, dropout } = dims;
        Ok(match kind {
            OperationKind::Sa => {
                OpParams::Sa { attn: AttentionParams::new(store, &prefix, d, heads, rng)?, norm: NormParams::new(store, &prefix, d) }
            }
            OperationKind::Ga => {
                OpParams::Ga { attn: AttentionParams::new(store, &prefix, d, heads, rng)?, norm: NormParams::new(store, &prefix, d) }
            }
            OperationKind::Ffn => OpParams::Ffn {
                ffn: FfnParams::new(store, &prefix, d, dropout, rng),
                norm: NormParams::new(store, &prefix, d),
            },
            OperationKind::Rsa => {
                let attn = AttentionParams::new(store, &prefix, d, heads, rng)?;
                let mlp = RelationMlpParams::new(store, &prefix, d_rel, attn.d_head, rng);
                OpParams::Rsa { attn, mlp, norm: NormParams::new(store, &prefix, d) }
            }
        })
    }

    pub fn kind(&self) -> OperationKind {
        match self {
            OpParams::Sa { .. } => OperationKind::Sa,
            OpParams::Ga { .. } => OperationKind::Ga,
            OpParams::Ffn { .. } => OperationKind::Ffn,
            OpParams::Rsa { .. } => OperationKind::Rsa,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match self {
            OpParams::Sa { attn, norm } | OpParams::Ga { attn, norm } => [attn.param_ids(), norm.param_ids()].concat(),
            OpParams::Ffn { ffn, norm } => [ffn.param_ids(), norm.param_ids()].concat(),
            OpParams::Rsa { attn, mlp, norm } => [attn.param_ids(), mlp.param_ids(), norm.param_ids()].concat(),
        }
    }

    pub fn apply(&self, g: &mut Graph, x: Var, ctx: &OpContext, rng: &mut Rng) -> Result<Var> {
        match self {
            OpParams::Sa { attn, norm } => Ok(sa_op(g, attn, norm, x, ctx.self_mask)?.out),
            OpParams::Ga { attn, norm } => {
                let guide = ctx.guide.ok_or_else(|| Error::Invalid("GA needs guide features".into()))?;
                Ok(ga_op(g, attn, norm, x, guide, ctx.guide_mask)?.out)
            }
            OpParams::Ffn { ffn, norm } => ffn_op(g, ffn, norm, x, rng),
            OpParams::Rsa { attn, mlp, norm } => {
                let rel = ctx.relations.ok_or_else(|| Error::Invalid("RSA needs relation features".into()))?;
                Ok(rsa_op(g, attn, mlp, norm, x, rel)?.out)
            }
        }
    }

    /// Copies this operation's tensors into `dst`, returning the re-keyed parameters.
    pub fn transplant(&self, src: &ParamStore, dst: &mut ParamStore) -> OpParams {
        let mut copy = |id: ParamId| dst.add(src.name(id).to_string(), src.get(id).clone());
        let attn_copy = |a: &AttentionParams, copy: &mut dyn FnMut(ParamId) -> ParamId| AttentionParams {
            wq: copy(a.wq),
            wk: copy(a.wk),
            wv: copy(a.wv),
            wo: copy(a.wo),
            heads: a.heads,
            d_head: a.d_head,
        };
        match self {
            OpParams::Sa { attn, norm } => {
                let attn = attn_copy(attn, &mut copy);
                OpParams::Sa { attn, norm: NormParams { gain: copy(norm.gain), bias: copy(norm.bias) } }
            }
            OpParams::Ga { attn, norm } => {
                let attn = attn_copy(attn, &mut copy);
                OpParams::Ga { attn, norm: NormParams { gain: copy(norm.gain), bias: copy(norm.bias) } }
            }
            OpParams::Ffn { ffn, norm } => OpParams::Ffn {
                ffn: FfnParams { w1: copy(ffn.w1), b1: copy(ffn.b1), w2: copy(ffn.w2), b2: copy(ffn.b2), dropout: ffn.dropout },
                norm: NormParams { gain: copy(norm.gain), bias: copy(norm.bias) },
            },
            OpParams::Rsa { attn, mlp, norm } => {
                let attn = attn_copy(attn, &mut copy);
                OpParams::Rsa {
                    attn,
                    mlp: RelationMlpParams { w1: copy(mlp.w1), b1: copy(mlp.b1), w2: copy(mlp.w2), b2: copy(mlp.b2) },
                    norm: NormParams { gain: copy(norm.gain), bias: copy(norm.bias) },
                }
            }
        }
    }
}

/// Builds an additive key mask: `rows × keys` with [`MASK_LOGIT`] where `valid[j]` is false.
pub fn key_mask(rows: usize, valid: &[bool]) -> Tensor {
    let keys = valid.len();
    let mut t = Tensor::zeros(&[rows, keys]);
    for r in 0..rows {
        for (j, &ok) in valid.iter().enumerate() {
            if !ok {
                t.data_mut()[r * keys + j] = MASK_LOGIT;
            }
        }
    }
    t
}

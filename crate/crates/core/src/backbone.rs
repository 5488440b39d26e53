//! The unified encoder-decoder: sentence featurization, object and relation
//! featurization, and the stacked encoder and decoder blocks.

use serde::{Deserialize, Serialize};

use crate::attention::{key_mask, OpContext, OpDims, OpParams, OperationKind};
use crate::error::{ensure, Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Rng, Tensor, Var};

/// Clamp for coincident box centres in the log-offset relation features.
pub const GEOM_EPS: f64 = 1e-3;
/// Token id used for padding.
pub const PAD: usize = 0;

/// A box as `(x_center, y_center, width, height)`.
pub type BoxXywh = [f64; 4];

/// One operation per block: `M` encoder names and `N` decoder names.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Architecture {
    pub encoder: Vec<OperationKind>,
    pub decoder: Vec<OperationKind>,
}

#[derive(Serialize, Deserialize)]
struct ArchitectureFile {
    encoder: Vec<String>,
    decoder: Vec<String>,
}

impl Architecture {
    pub fn new(encoder: Vec<OperationKind>, decoder: Vec<OperationKind>) -> Result<Self> {
        for op in &encoder {
            ensure!(OperationKind::ENCODER_POOL.contains(op), Invalid, "{op} is not an encoder operation");
        }
        Ok(Architecture { encoder, decoder })
    }

    /// The layout of an `L`-layer MCAN: `(SA, FFN)^L` then `(SA, GA, FFN)^L`.
    pub fn mcan(layers: usize) -> Self {
        use OperationKind::*;
        Architecture { encoder: [Sa, Ffn].repeat(layers), decoder: [Sa, Ga, Ffn].repeat(layers) }
    }

    pub fn parse_names(encoder: &[&str], decoder: &[&str]) -> Result<Self> {
        let enc = encoder.iter().map(|s| s.parse()).collect::<Result<Vec<_>>>()?;
        let dec = decoder.iter().map(|s| s.parse()).collect::<Result<Vec<_>>>()?;
        Self::new(enc, dec)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ArchitectureFile = serde_json::from_str(text)?;
        let enc: Vec<&str> = file.encoder.iter().map(String::as_str).collect();
        let dec: Vec<&str> = file.decoder.iter().map(String::as_str).collect();
        Self::parse_names(&enc, &dec)
    }

    pub fn to_json(&self) -> String {
        let file = ArchitectureFile {
            encoder: self.encoder.iter().map(|o| o.name().to_string()).collect(),
            decoder: self.decoder.iter().map(|o| o.name().to_string()).collect(),
        };
        serde_json::to_string_pretty(&file).expect("plain strings serialize")
    }

    pub fn contains_decoder(&self, kind: OperationKind) -> bool {
        self.decoder.contains(&kind)
    }

    /// Candidate indices into the encoder and decoder pools.
    pub fn selection(&self) -> Selection {
        let idx = |pool: &[OperationKind], op: &OperationKind| pool.iter().position(|p| p == op).expect("validated");
        Selection {
            encoder: self.encoder.iter().map(|o| idx(&OperationKind::ENCODER_POOL, o)).collect(),
            decoder: self.decoder.iter().map(|o| idx(&OperationKind::DECODER_POOL, o)).collect(),
        }
    }

    pub fn from_selection(sel: &Selection) -> Self {
        Architecture {
            encoder: sel.encoder.iter().map(|&i| OperationKind::ENCODER_POOL[i]).collect(),
            decoder: sel.decoder.iter().map(|&i| OperationKind::DECODER_POOL[i]).collect(),
        }
    }

    /// Compact form such as `SA-FFN|GA-SA`.
    pub fn label(&self) -> String {
        let join = |ops: &[OperationKind]| ops.iter().map(|o| o.name()).collect::<Vec<_>>().join("-");
        format!("{}|{}", join(&self.encoder), join(&self.decoder))
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.label())
    }
}

impl Serialize for Architecture {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut st = s.serialize_struct("Architecture", 2)?;
        st.serialize_field("encoder", &self.encoder)?;
        st.serialize_field("decoder", &self.decoder)?;
        st.end()
    }
}

impl<'de> Deserialize<'de> for Architecture {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            encoder: Vec<String>,
            decoder: Vec<String>,
        }
        let raw = Raw::deserialize(d)?;
        let enc: Vec<&str> = raw.encoder.iter().map(String::as_str).collect();
        let dec: Vec<&str> = raw.decoder.iter().map(String::as_str).collect();
        Architecture::parse_names(&enc, &dec).map_err(serde::de::Error::custom)
    }
}

/// Which candidate runs in every block, as indices into the blocks' candidate lists.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Selection {
    pub encoder: Vec<usize>,
    pub decoder: Vec<usize>,
}

impl Selection {
    /// First candidate everywhere; the only valid selection for a fixed network.
    pub fn first(m: usize, n: usize) -> Self {
        Selection { encoder: vec![0; m], decoder: vec![0; n] }
    }
}

/// Supervision attached to a sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    /// Single-label answer index.
    Answer(usize),
    /// Multi-label soft answer scores in `[0, 1]`.
    Answers(Vec<f64>),
    /// Image-text correspondence flag.
    Match(bool),
    /// Ground-truth box.
    Box(BoxXywh),
}

/// Token sequence, object set with boxes, and a label.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalSample {
    pub tokens: Vec<usize>,
    /// `[n × d_y]` object features.
    pub objects: Tensor,
    pub boxes: Vec<BoxXywh>,
    pub label: Label,
}

impl MultimodalSample {
    pub fn validate(&self, vocab: usize) -> Result<()> {
        ensure!(!self.tokens.is_empty(), Invalid, "empty token sequence");
        ensure!(self.tokens.iter().all(|&t| t < vocab), Invalid, "token id outside vocabulary of {vocab}");
        ensure!(self.objects.shape().len() == 2, Shape, "objects must be a matrix");
        ensure!(self.objects.rows() == self.boxes.len(), Shape, "{} objects but {} boxes", self.objects.rows(), self.boxes.len());
        for b in &self.boxes {
            ensure!(b[2] > 0.0 && b[3] > 0.0, Invalid, "box {b:?} has non-positive extent");
        }
        Ok(())
    }
}

/// Pairwise geometry `[n × n × 4]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationFeatures {
    pub r: Tensor,
}

impl RelationFeatures {
    pub fn objects(&self) -> usize {
        self.r.shape()[0]
    }

    /// The `[n·n × 4]` matrix form consumed by the relation MLP.
    pub fn flattened(&self) -> Tensor {
        let n = self.objects();
        self.r.clone().reshape(vec![n * n, 4]).expect("same size")
    }

    pub fn pair(&self, i: usize, j: usize) -> &[f64] {
        let n = self.objects();
        &self.r.data()[(i * n + j) * 4..(i * n + j + 1) * 4]
    }
}

/// `R[i][j] = [log(max(|x_i−x_j|, ε)/w_i), log(max(|y_i−y_j|, ε)/h_i), log(w_j/w_i), log(h_j/h_i)]`.
pub fn compute_relation_features(boxes: &[BoxXywh]) -> Result<RelationFeatures> {
    let n = boxes.len();
    ensure!(n > 0, Invalid, "no boxes");
    for b in boxes {
        ensure!(b[2] > 0.0 && b[3] > 0.0, Invalid, "box {b:?} has non-positive extent");
    }
    let mut data = Vec::with_capacity(n * n * 4);
    for bi in boxes {
        for bj in boxes {
            data.push(((bi[0] - bj[0]).abs().max(GEOM_EPS) / bi[2]).ln());
            data.push(((bi[1] - bj[1]).abs().max(GEOM_EPS) / bi[3]).ln());
            data.push((bj[2] / bi[2]).ln());
            data.push((bj[3] / bi[3]).ln());
        }
    }
    Ok(RelationFeatures { r: Tensor::new(vec![n, n, 4], data)? })
}

/// Tokens trimmed or zero-padded to a fixed length.
#[derive(Debug, Clone, PartialEq)]
pub struct TextInput {
    pub tokens: Vec<usize>,
    pub valid: Vec<bool>,
}

impl TextInput {
    pub fn new(tokens: &[usize], max_len: usize) -> Result<Self> {
        ensure!(!tokens.is_empty(), Invalid, "empty token sequence");
        ensure!(max_len > 0, Invalid, "zero maximum length");
        let mut t: Vec<usize> = tokens.iter().copied().take(max_len).collect();
        t.resize(max_len, PAD);
        let mut valid: Vec<bool> = t.iter().map(|&x| x != PAD).collect();
        if !valid.iter().any(|&v| v) {
            // an all-padding sentence still needs one key to attend to
            valid[0] = true;
        }
        Ok(TextInput { tokens: t, valid })
    }
}

/// Object features with their precomputed relation tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageInput {
    pub objects: Tensor,
    pub relations: RelationFeatures,
    pub boxes: Vec<BoxXywh>,
}

impl ImageInput {
    pub fn new(objects: Tensor, boxes: Vec<BoxXywh>) -> Result<Self> {
        ensure!(objects.rows() == boxes.len(), Shape, "{} objects but {} boxes", objects.rows(), boxes.len());
        let relations = compute_relation_features(&boxes)?;
        Ok(ImageInput { objects, relations, boxes })
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// A sample with its network-ready inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub text: TextInput,
    pub image: ImageInput,
    pub label: Label,
}

impl PreparedSample {
    pub fn new(sample: &MultimodalSample, max_len: usize) -> Result<Self> {
        Ok(PreparedSample {
            text: TextInput::new(&sample.tokens, max_len)?,
            image: ImageInput::new(sample.objects.clone(), sample.boxes.clone())?,
            label: sample.label.clone(),
        })
    }
}

/// Learned embedding followed by a single-layer gated recurrent unit.
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceEncoderParams {
    pub embedding: ParamId,
    pub w_in: ParamId,
    pub b_in: ParamId,
    pub w_hidden: ParamId,
    pub b_hidden: ParamId,
    pub hidden: usize,
}

impl SentenceEncoderParams {
    pub fn new(store: &mut ParamStore, vocab: usize, d_word: usize, hidden: usize, rng: &mut Rng) -> Self {
        SentenceEncoderParams {
            embedding: store.normal("sentence.embedding", &[vocab, d_word], 1.0, rng),
            w_in: store.linear("sentence.gru.w_in", d_word, 3 * hidden, rng),
            b_in: store.zeros("sentence.gru.b_in", &[1, 3 * hidden]),
            w_hidden: store.linear("sentence.gru.w_hidden", hidden, 3 * hidden, rng),
            b_hidden: store.zeros("sentence.gru.b_hidden", &[1, 3 * hidden]),
            hidden,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.embedding, self.w_in, self.b_in, self.w_hidden, self.b_hidden]
    }
}

/// Embeds tokens and runs the recurrent encoder; returns `[m × hidden]`.
pub fn embed_sentence(g: &mut Graph, p: &SentenceEncoderParams, text: &TextInput) -> Result<Var> {
    let m = text.tokens.len();
    ensure!(m > 0, Invalid, "empty token sequence");
    let h = p.hidden;
    let table = g.param(p.embedding);
    let emb = g.select_rows(table, &text.tokens)?;
    let w_in = g.param(p.w_in);
    let b_in = g.param(p.b_in);
    let w_h = g.param(p.w_hidden);
    let b_h = g.param(p.b_hidden);
    let xw = g.matmul(emb, w_in)?;
    let xw = g.add_row(xw, b_in)?;
    let mut state = g.constant(Tensor::zeros(&[1, h]));
    let mut outputs = Vec::with_capacity(m);
    for t in 0..m {
        let x_t = g.select_rows(xw, &[t])?;
        let hu = g.matmul(state, w_h)?;
        let hu = g.add_row(hu, b_h)?;
        let (xr, xz, xn) = (g.slice_cols(x_t, 0, h)?, g.slice_cols(x_t, h, h)?, g.slice_cols(x_t, 2 * h, h)?);
        let (hr, hz, hn) = (g.slice_cols(hu, 0, h)?, g.slice_cols(hu, h, h)?, g.slice_cols(hu, 2 * h, h)?);
        let r = g.add(xr, hr)?;
        let r = g.sigmoid(r);
        let z = g.add(xz, hz)?;
        let z = g.sigmoid(z);
        let rn = g.mul(r, hn)?;
        let n = g.add(xn, rn)?;
        let n = g.tanh(n);
        // h' = (1 − z)·n + z·h = n + z·(h − n)
        let diff = g.sub(state, n)?;
        let zd = g.mul(z, diff)?;
        state = g.add(n, zd)?;
        outputs.push(state);
    }
    g.stack_rows(&outputs)
}

/// Linear width adapter applied once before the first block.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    pub w: ParamId,
    pub b: ParamId,
}

impl Adapter {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut Rng) -> Self {
        Adapter { w: store.linear(format!("{name}.w"), d_in, d_out, rng), b: store.zeros(format!("{name}.b"), &[1, d_out]) }
    }

    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

/// One encoder or decoder position with its candidate operations.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub candidates: Vec<OpParams>,
}

impl Block {
    pub fn kinds(&self) -> Vec<OperationKind> {
        self.candidates.iter().map(OpParams::kind).collect()
    }
}

/// Widths of the backbone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackboneDims {
    pub vocab: usize,
    pub max_len: usize,
    pub d_word: usize,
    pub d_x: usize,
    pub d_y: usize,
    pub d: usize,
    pub heads: usize,
    pub dropout: f64,
}

impl BackboneDims {
    pub fn op_dims(&self) -> OpDims {
        OpDims { d: self.d, heads: self.heads, d_rel: 4, dropout: self.dropout }
    }
}

/// How blocks are populated.
#[derive(Debug, Clone, PartialEq)]
pub enum Layout {
    /// Every candidate of the operation pools at every position.
    Supernet { encoder_blocks: usize, decoder_blocks: usize },
    /// Exactly the operations of one architecture.
    Fixed(Architecture),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub dims: BackboneDims,
    pub sentence: SentenceEncoderParams,
    pub x_adapter: Option<Adapter>,
    pub y_adapter: Option<Adapter>,
    pub encoder: Vec<Block>,
    pub decoder: Vec<Block>,
}

/// Backbone outputs consumed by the heads.
#[derive(Debug, Clone)]
pub struct BackboneOutput {
    /// `X^(M)`, `[m × d]`.
    pub x: Var,
    /// `Y^(N)`, `[n × d]`.
    pub y: Var,
    pub text_valid: Vec<bool>,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, dims: BackboneDims, layout: &Layout, rng: &mut Rng) -> Result<Self> {
        ensure!(dims.d.is_multiple_of(dims.heads), Invalid, "width {} is not divisible by {} heads", dims.d, dims.heads);
        let sentence = SentenceEncoderParams::new(store, dims.vocab, dims.d_word, dims.d_x, rng);
        let x_adapter = (dims.d_x != dims.d).then(|| Adapter::new(store, "adapt.x", dims.d_x, dims.d, rng));
        let y_adapter = (dims.d_y != dims.d).then(|| Adapter::new(store, "adapt.y", dims.d_y, dims.d, rng));
        let (enc_kinds, dec_kinds): (Vec<Vec<OperationKind>>, Vec<Vec<OperationKind>>) = match layout {
            Layout::Supernet { encoder_blocks, decoder_blocks } => (
                vec![OperationKind::ENCODER_POOL.to_vec(); *encoder_blocks],
                vec![OperationKind::DECODER_POOL.to_vec(); *decoder_blocks],
            ),
            Layout::Fixed(arch) => {
                (arch.encoder.iter().map(|&o| vec![o]).collect(), arch.decoder.iter().map(|&o| vec![o]).collect())
            }
        };
        let op_dims = dims.op_dims();
        let mut build = |side: &str, kinds: Vec<Vec<OperationKind>>, rng: &mut Rng| -> Result<Vec<Block>> {
            kinds
                .into_iter()
                .enumerate()
                .map(|(i, ks)| {
                    let candidates = ks
                        .into_iter()
                        .map(|k| OpParams::new(k, store, &format!("{side}.{i}"), op_dims, rng))
                        .collect::<Result<Vec<_>>>()?;
                    Ok(Block { candidates })
                })
                .collect()
        };
        let encoder = build("enc", enc_kinds, rng)?;
        let decoder = build("dec", dec_kinds, rng)?;
        Ok(Backbone { dims, sentence, x_adapter, y_adapter, encoder, decoder })
    }

    /// Sentence features `X` before the encoder blocks, width-adapted to `d`.
    pub fn sentence_features(&self, g: &mut Graph, text: &TextInput) -> Result<Var> {
        let x = embed_sentence(g, &self.sentence, text)?;
        match &self.x_adapter {
            Some(a) => a.apply(g, x),
            None => Ok(x),
        }
    }

    /// The chosen candidate's output, or with gates `Σ_j g_j · o_j` over
    /// every candidate of the block.
    fn apply_block(g: &mut Graph, block: &Block, choice: usize, cur: Var, ctx: &OpContext, gates: Option<&[Var]>, rng: &mut Rng) -> Result<Var> {
        let Some(gs) = gates else {
            return block.candidates[choice].apply(g, cur, ctx, rng);
        };
        ensure!(gs.len() == block.candidates.len(), Invalid, "{} gates for {} candidates", gs.len(), block.candidates.len());
        let mut acc: Option<Var> = None;
        for (op, &gate) in block.candidates.iter().zip(gs) {
            let out = op.apply(g, cur, ctx, rng)?;
            let out = g.scale_by(out, gate)?;
            acc = Some(match acc {
                Some(a) => g.add(a, out)?,
                None => out,
            });
        }
        acc.ok_or_else(|| Error::Invalid("block has no candidates".into()))
    }

    /// `X^(i) = b_enc^(i)(X^(i−1))` for the selected candidates.
    pub fn encode_sentence(
        &self,
        g: &mut Graph,
        x: Var,
        text_valid: &[bool],
        choice: &[usize],
        gates: Option<&[Vec<Var>]>,
        rng: &mut Rng,
    ) -> Result<Var> {
        ensure!(choice.len() == self.encoder.len(), Invalid, "{} encoder choices for {} blocks", choice.len(), self.encoder.len());
        let m = text_valid.len();
        let mask = text_valid.iter().any(|v| !v).then(|| g.constant(key_mask(m, text_valid)));
        let ctx = OpContext { self_mask: mask, ..OpContext::default() };
        let mut cur = x;
        for (i, (block, &c)) in self.encoder.iter().zip(choice).enumerate() {
            ensure!(c < block.candidates.len(), Invalid, "encoder block {i} has no candidate {c}");
            cur = Self::apply_block(g, block, c, cur, &ctx, gates.map(|gs| gs[i].as_slice()), rng)?;
        }
        Ok(cur)
    }

    /// `Y^(i) = b_dec^(i)(Y^(i−1), R, X^(M))` for the selected candidates.
    #[allow(clippy::too_many_arguments)]
    pub fn decode_image(
        &self,
        g: &mut Graph,
        y: Var,
        relations: &RelationFeatures,
        x_final: Var,
        text_valid: &[bool],
        choice: &[usize],
        gates: Option<&[Vec<Var>]>,
        rng: &mut Rng,
    ) -> Result<Var> {
        ensure!(choice.len() == self.decoder.len(), Invalid, "{} decoder choices for {} blocks", choice.len(), self.decoder.len());
        let n = relations.objects();
        ensure!(g.shape(y)[0] == n, Shape, "{} objects but relations for {n}", g.shape(y)[0]);
        let mut used: Vec<OperationKind> = Vec::new();
        for (i, (b, &c)) in self.decoder.iter().zip(choice).enumerate() {
            let op = b.candidates.get(c).ok_or_else(|| Error::Invalid(format!("decoder block {i} has no candidate {c}")))?;
            match gates {
                Some(_) => used.extend(b.candidates.iter().map(OpParams::kind)),
                None => used.push(op.kind()),
            }
        }
        let needs_rel = used.contains(&OperationKind::Rsa);
        let needs_guide = used.contains(&OperationKind::Ga);
        let relations = needs_rel.then(|| g.constant(relations.flattened()));
        let guide_mask = (needs_guide && text_valid.iter().any(|v| !v)).then(|| g.constant(key_mask(n, text_valid)));
        let ctx = OpContext { self_mask: None, guide: needs_guide.then_some(x_final), guide_mask, relations };
        let offset = self.encoder.len();
        let mut cur = y;
        for (i, (block, &c)) in self.decoder.iter().zip(choice).enumerate() {
            cur = Self::apply_block(g, block, c, cur, &ctx, gates.map(|gs| gs[offset + i].as_slice()), rng)?;
        }
        Ok(cur)
    }

    /// Full backbone pass. `gates`, when given, holds one gate per candidate
    /// for every block (encoder blocks first); each block then outputs the
    /// gate-weighted sum of all its candidates.
    pub fn forward(
        &self,
        g: &mut Graph,
        text: &TextInput,
        image: &ImageInput,
        sel: &Selection,
        gates: Option<&[Vec<Var>]>,
        rng: &mut Rng,
    ) -> Result<BackboneOutput> {
        if let Some(gs) = gates {
            ensure!(gs.len() == self.encoder.len() + self.decoder.len(), Invalid, "one gate per block expected");
        }
        let x0 = self.sentence_features(g, text)?;
        let x = self.encode_sentence(g, x0, &text.valid, &sel.encoder, gates, rng)?;
        let y0 = g.constant(image.objects.clone());
        let y0 = match &self.y_adapter {
            Some(a) => a.apply(g, y0)?,
            None => y0,
        };
        let y = self.decode_image(g, y0, &image.relations, x, &text.valid, &sel.decoder, gates, rng)?;
        Ok(BackboneOutput { x, y, text_valid: text.valid.clone() })
    }

    /// Parameters shared by every path (embedding, recurrent encoder, adapters).
    pub fn shared_param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.sentence.param_ids();
        for a in self.x_adapter.iter().chain(&self.y_adapter) {
            ids.extend([a.w, a.b]);
        }
        ids
    }

    /// The block-type sequence of a fixed backbone.
    pub fn architecture(&self) -> Option<Architecture> {
        let single = |blocks: &[Block]| -> Option<Vec<OperationKind>> {
            blocks.iter().map(|b| (b.candidates.len() == 1).then(|| b.candidates[0].kind())).collect()
        };
        Some(Architecture { encoder: single(&self.encoder)?, decoder: single(&self.decoder)? })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-4
    }

    #[test]
    fn relation_feature_hand_case() {
        let r = compute_relation_features(&[[2.0, 2.0, 2.0, 2.0], [4.0, 3.0, 1.0, 4.0]]).unwrap();
        let p = r.pair(0, 1);
        let ln2 = std::f64::consts::LN_2;
        let expect = [0.0, -ln2, -ln2, ln2];
        assert!(p.iter().zip(expect).all(|(a, b)| close(*a, b)), "{p:?}");
    }

    #[test]
    fn relation_self_pair_hits_clamp() {
        let r = compute_relation_features(&[[0.5, 0.5, 0.2, 0.4]]).unwrap();
        let p = r.pair(0, 0);
        assert_eq!(p[2], 0.0);
        assert_eq!(p[3], 0.0);
        assert!(close(p[0], (GEOM_EPS / 0.2).ln()));
        assert!(close(p[1], (GEOM_EPS / 0.4).ln()));
    }

    #[test]
    fn relation_rejects_degenerate_boxes() {
        assert!(compute_relation_features(&[[0.0, 0.0, 0.0, 1.0]]).is_err());
        assert!(compute_relation_features(&[[0.0, 0.0, 1.0, -1.0]]).is_err());
    }

    #[test]
    fn relation_ratio_components_scale_invariant() {
        let boxes = [[0.2, 0.3, 0.1, 0.4], [0.7, 0.1, 0.3, 0.2], [0.5, 0.5, 0.25, 0.25]];
        let scaled: Vec<BoxXywh> = boxes.iter().map(|b| b.map(|v| v * 3.7)).collect();
        let a = compute_relation_features(&boxes).unwrap();
        let b = compute_relation_features(&scaled).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!(close(a.pair(i, j)[2], b.pair(i, j)[2]));
                assert!(close(a.pair(i, j)[3], b.pair(i, j)[3]));
            }
        }
    }

    #[test]
    fn architecture_json_round_trip_and_validation() {
        let arch = Architecture::mcan(2);
        assert_eq!(Architecture::from_json(&arch.to_json()).unwrap(), arch);
        let bad = r#"{"encoder": ["SA"], "decoder": ["GAA"]}"#;
        match Architecture::from_json(bad) {
            Err(Error::UnknownOperation(name)) => assert_eq!(name, "GAA"),
            other => panic!("{other:?}"),
        }
        let wrong_pool = r#"{"encoder": ["GA"], "decoder": []}"#;
        assert!(Architecture::from_json(wrong_pool).is_err());
    }

    #[test]
    fn text_input_pads_and_trims() {
        let t = TextInput::new(&[3, 4], 4).unwrap();
        assert_eq!(t.tokens, vec![3, 4, 0, 0]);
        assert_eq!(t.valid, vec![true, true, false, false]);
        let t = TextInput::new(&[1, 2, 3, 4, 5], 3).unwrap();
        assert_eq!(t.tokens, vec![1, 2, 3]);
        assert!(TextInput::new(&[], 3).is_err());
    }
}

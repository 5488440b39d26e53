//! A backbone with one task head, its losses, metrics and a minibatch trainer.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::FFN_DROPOUT;
use crate::backbone::{
    Architecture, Backbone, BackboneDims, BoxXywh, ImageInput, Label, Layout, PreparedSample, Selection, TextInput,
};
use crate::error::{ensure, Error, Result};
use crate::heads::{
    compute_iou, decode_box_offsets, ensure_distinct, itm_loss, mine_hard_negative, ItmHead, MiningConfig, VgHead,
    VgTargets, VqaHead, VqaTarget,
};
use crate::numerics::{seeded, Adam, Graph, ParamGrads, ParamId, ParamStore, Rng, StepOutcome, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Vqa,
    Itm,
    Vg,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Vqa, Task::Itm, Task::Vg];

    pub fn name(self) -> &'static str {
        match self {
            Task::Vqa => "vqa",
            Task::Itm => "itm",
            Task::Vg => "vg",
        }
    }

    /// Name of the evaluation metric.
    pub fn metric(self) -> &'static str {
        match self {
            Task::Vqa => "accuracy",
            Task::Itm => "match_accuracy",
            Task::Vg => "iou_accuracy",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vqa" => Ok(Task::Vqa),
            "itm" => Ok(Task::Itm),
            "vg" => Ok(Task::Vg),
            other => Err(Error::Invalid(format!("unknown task {other:?} (expected vqa, itm or vg)"))),
        }
    }
}

/// Everything needed to build a network, apart from its block layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub task: Task,
    pub dims: BackboneDims,
    pub d_z: usize,
    /// Answer classes (question answering only).
    pub answers: usize,
    pub multi_label: bool,
    pub vg_lambda: f64,
    pub iou_threshold: f64,
}

impl ModelConfig {
    /// Widths `d` and `h` with `d_z = 2d`, word and sentence widths equal to `d`.
    pub fn new(task: Task, vocab: usize, max_len: usize, d_y: usize, d: usize, heads: usize, answers: usize) -> Self {
        ModelConfig {
            task,
            dims: BackboneDims { vocab, max_len, d_word: d, d_x: d, d_y, d, heads, dropout: FFN_DROPOUT },
            d_z: 2 * d,
            answers,
            multi_label: false,
            vg_lambda: 1.0,
            iou_threshold: crate::heads::IOU_THRESHOLD,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dims;
        ensure!(d.vocab >= 2 && d.max_len >= 1, Invalid, "vocabulary and sentence length must be positive");
        ensure!(d.d >= 1 && d.heads >= 1 && d.d.is_multiple_of(d.heads), Invalid, "width {} is not divisible by {} heads", d.d, d.heads);
        ensure!(d.d_word >= 1 && d.d_x >= 1 && d.d_y >= 1 && self.d_z >= 1, Invalid, "widths must be positive");
        ensure!((0.0..1.0).contains(&d.dropout), Invalid, "dropout {} outside [0, 1)", d.dropout);
        if self.task == Task::Vqa {
            ensure!(self.answers >= 2, Invalid, "need at least two answers");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TaskHead {
    Vqa(VqaHead),
    Itm(ItmHead),
    Vg(VgHead),
}

impl TaskHead {
    pub fn param_ids(&self) -> Vec<ParamId> {
        match self {
            TaskHead::Vqa(h) => h.param_ids(),
            TaskHead::Itm(h) => h.param_ids(),
            TaskHead::Vg(h) => h.param_ids(),
        }
    }
}

/// Output of a forward pass in evaluation mode.
#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    Answer(usize),
    Match(f64),
    Box { object: usize, bbox: BoxXywh },
}

/// Mean loss and task metric over a set of samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub metric: f64,
}

/// Prepared samples plus a grouping key used to keep mined negatives apart
/// from their positives.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub task: Task,
    pub samples: Vec<PreparedSample>,
    pub groups: Vec<usize>,
}

impl Dataset {
    pub fn new(task: Task, samples: Vec<PreparedSample>, groups: Vec<usize>) -> Result<Self> {
        ensure!(samples.len() == groups.len(), Invalid, "{} samples but {} group keys", samples.len(), groups.len());
        Ok(Dataset { task, samples, groups })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            task: self.task,
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            groups: indices.iter().map(|&i| self.groups[i]).collect(),
        }
    }

    /// Indices usable as training positives: matched pairs for ITM, everything otherwise.
    pub fn positives(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.task != Task::Itm || self.samples[i].label == Label::Match(true))
            .collect()
    }
}

/// Extra inputs that enter only the architecture-weight step: one scalar
/// gate per block, encoder blocks first.
pub type Gates<'a> = Option<&'a [Vec<Var>]>;

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub head: TaskHead,
}

impl Network {
    pub fn new(config: &ModelConfig, layout: &Layout, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, config.dims, layout, &mut rng)?;
        let (d, d_z) = (config.dims.d, config.d_z);
        let head = match config.task {
            Task::Vqa => TaskHead::Vqa(VqaHead::new(&mut store, d, d_z, config.answers, config.multi_label, &mut rng)?),
            Task::Itm => TaskHead::Itm(ItmHead::new(&mut store, d, d_z, &mut rng)),
            Task::Vg => {
                let mut h = VgHead::new(&mut store, d, d_z, &mut rng);
                h.lambda = config.vg_lambda;
                h.threshold = config.iou_threshold;
                TaskHead::Vg(h)
            }
        };
        Ok(Network { config: config.clone(), store, backbone, head })
    }

    /// A standalone network running exactly `arch`.
    pub fn fixed(config: &ModelConfig, arch: &Architecture, seed: u64) -> Result<Self> {
        Self::new(config, &Layout::Fixed(arch.clone()), seed)
    }

    pub fn encoder_blocks(&self) -> usize {
        self.backbone.encoder.len()
    }

    pub fn decoder_blocks(&self) -> usize {
        self.backbone.decoder.len()
    }

    /// The selection that runs a fixed network.
    pub fn default_selection(&self) -> Selection {
        Selection::first(self.encoder_blocks(), self.decoder_blocks())
    }

    /// Parameters touched by a forward pass through `sel`.
    pub fn active_param_ids(&self, sel: &Selection) -> Vec<ParamId> {
        let mut ids = self.backbone.shared_param_ids();
        for (b, &c) in self.backbone.encoder.iter().zip(&sel.encoder) {
            ids.extend(b.candidates[c].param_ids());
        }
        for (b, &c) in self.backbone.decoder.iter().zip(&sel.decoder) {
            ids.extend(b.candidates[c].param_ids());
        }
        ids.extend(self.head.param_ids());
        ids
    }

    fn check_label(&self, label: &Label) -> Result<()> {
        let ok = matches!(
            (self.config.task, label),
            (Task::Vqa, Label::Answer(_)) | (Task::Vqa, Label::Answers(_)) | (Task::Itm, Label::Match(_)) | (Task::Vg, Label::Box(_))
        );
        ensure!(ok, Invalid, "label {label:?} does not fit task {}", self.config.task);
        Ok(())
    }

    /// Task loss of one sample. For matching this is the plain BCE of the
    /// score against the sample's flag.
    pub fn sample_loss(
        &self,
        g: &mut Graph,
        sample: &PreparedSample,
        sel: &Selection,
        gates: Gates,
        rng: &mut Rng,
    ) -> Result<Var> {
        self.check_label(&sample.label)?;
        let out = self.backbone.forward(g, &sample.text, &sample.image, sel, gates, rng)?;
        match (&self.head, &sample.label) {
            (TaskHead::Vqa(h), label) => {
                let logits = h.forward(g, out.x, out.y, &out.text_valid)?;
                let target = match label {
                    Label::Answer(a) => VqaTarget::Single(*a),
                    Label::Answers(v) => VqaTarget::Multi(v.clone()),
                    _ => unreachable!("checked"),
                };
                h.loss(g, logits, &target)
            }
            (TaskHead::Itm(h), Label::Match(flag)) => {
                let s = h.score(g, out.x, out.y, &out.text_valid)?;
                g.binary_cross_entropy(s, &[if *flag { 1.0 } else { 0.0 }])
            }
            (TaskHead::Vg(h), Label::Box(truth)) => {
                let (s, b) = h.forward(g, out.x, out.y, &out.text_valid)?;
                let targets = VgTargets::new(&sample.image.boxes, truth, h.threshold)?;
                h.loss(g, s, b, &targets)
            }
            _ => unreachable!("checked"),
        }
    }

    /// Matching score `s(I, T)` recorded on `g`.
    pub fn itm_score(
        &self,
        g: &mut Graph,
        text: &TextInput,
        image: &ImageInput,
        sel: &Selection,
        gates: Gates,
        rng: &mut Rng,
    ) -> Result<Var> {
        let TaskHead::Itm(h) = &self.head else {
            return Err(Error::Invalid("matching score needs a matching head".into()));
        };
        let out = self.backbone.forward(g, text, image, sel, gates, rng)?;
        h.score(g, out.x, out.y, &out.text_valid)
    }

    /// Matching loss for a positive pair with one negative text and one negative image.
    #[allow(clippy::too_many_arguments)]
    pub fn triplet_loss(
        &self,
        g: &mut Graph,
        pos: &PreparedSample,
        neg_text: &TextInput,
        neg_image: &ImageInput,
        sel: &Selection,
        gates: Gates,
        rng: &mut Rng,
    ) -> Result<Var> {
        let s_pos = self.itm_score(g, &pos.text, &pos.image, sel, gates, rng)?;
        let s_t = self.itm_score(g, neg_text, &pos.image, sel, gates, rng)?;
        let s_i = self.itm_score(g, &pos.text, neg_image, sel, gates, rng)?;
        itm_loss(g, s_pos, s_t, s_i)
    }

    /// Evaluation-mode score of a text-image pair.
    pub fn score_pair(&self, text: &TextInput, image: &ImageInput, sel: &Selection) -> Result<f64> {
        let mut g = Graph::inference(&self.store);
        let s = self.itm_score(&mut g, text, image, sel, None, &mut seeded(0))?;
        Ok(g.scalar(s))
    }

    /// Evaluation-mode prediction for one sample.
    pub fn predict(&self, sample: &PreparedSample, sel: &Selection) -> Result<Prediction> {
        let mut g = Graph::inference(&self.store);
        let mut rng = seeded(0);
        let out = self.backbone.forward(&mut g, &sample.text, &sample.image, sel, None, &mut rng)?;
        Ok(match &self.head {
            TaskHead::Vqa(h) => {
                let logits = h.forward(&mut g, out.x, out.y, &out.text_valid)?;
                Prediction::Answer(crate::heads::argmax(g.value(logits)).expect("k ≥ 2"))
            }
            TaskHead::Itm(h) => {
                let s = h.score(&mut g, out.x, out.y, &out.text_valid)?;
                Prediction::Match(g.scalar(s))
            }
            TaskHead::Vg(h) => {
                let (s, b) = h.forward(&mut g, out.x, out.y, &out.text_valid)?;
                let object = crate::heads::argmax(g.value(s)).expect("non-empty");
                let o = &g.value(b)[object * 4..object * 4 + 4];
                let bbox = decode_box_offsets(&sample.image.boxes[object], &[o[0], o[1], o[2], o[3]]);
                Prediction::Box { object, bbox }
            }
        })
    }

    fn correct(&self, sample: &PreparedSample, pred: &Prediction) -> bool {
        match (pred, &sample.label) {
            (Prediction::Answer(a), Label::Answer(t)) => a == t,
            (Prediction::Answer(a), Label::Answers(v)) => {
                let best = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                v[*a] == best && best > 0.0
            }
            (Prediction::Match(s), Label::Match(flag)) => (*s > 0.5) == *flag,
            (Prediction::Box { bbox, .. }, Label::Box(truth)) => compute_iou(bbox, truth) > self.config.iou_threshold,
            _ => false,
        }
    }

    /// Mean per-sample loss and metric, evaluation mode.
    pub fn evaluate(&self, samples: &[PreparedSample], sel: &Selection) -> Result<Evaluation> {
        ensure!(!samples.is_empty(), Invalid, "evaluation over no samples");
        let mut rng = seeded(0);
        let (mut loss, mut hits) = (0.0, 0usize);
        for s in samples {
            let mut g = Graph::inference(&self.store);
            let l = self.sample_loss(&mut g, s, sel, None, &mut rng)?;
            loss += g.scalar(l);
            if self.correct(s, &self.predict(s, sel)?) {
                hits += 1;
            }
        }
        let n = samples.len() as f64;
        Ok(Evaluation { loss: loss / n, metric: hits as f64 / n })
    }

    /// Mean per-sample loss only, evaluation mode.
    pub fn mean_loss(&self, samples: &[PreparedSample], sel: &Selection) -> Result<f64> {
        ensure!(!samples.is_empty(), Invalid, "evaluation over no samples");
        let mut rng = seeded(0);
        let mut loss = 0.0;
        for s in samples {
            let mut g = Graph::inference(&self.store);
            let l = self.sample_loss(&mut g, s, sel, None, &mut rng)?;
            loss += g.scalar(l);
        }
        Ok(loss / samples.len() as f64)
    }

    /// Picks a negative text and a negative image for positive `i` by scoring
    /// matched pairs from other groups with the current weights.
    pub fn mine_negatives(
        &self,
        data: &Dataset,
        i: usize,
        sel: &Selection,
        mining: MiningConfig,
        rng: &mut Rng,
    ) -> Result<(usize, usize)> {
        let pos = &data.samples[i];
        let group = data.groups[i];
        let admissible = |j: usize| j != i && data.groups[j] != group && data.samples[j].label == Label::Match(true);
        let t = mine_hard_negative(data.len(), admissible, |j| self.score_pair(&data.samples[j].text, &pos.image, sel), mining, rng)?;
        let v = mine_hard_negative(data.len(), admissible, |j| self.score_pair(&pos.text, &data.samples[j].image, sel), mining, rng)?;
        ensure_distinct(i, &[t, v])?;
        Ok((t, v))
    }
}

/// One training example: a sample, or a matching triplet of dataset indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Example {
    Single(usize),
    Triplet { pos: usize, neg_text: usize, neg_image: usize },
}

impl Network {
    pub fn example_loss(
        &self,
        g: &mut Graph,
        data: &Dataset,
        ex: Example,
        sel: &Selection,
        gates: Gates,
        rng: &mut Rng,
    ) -> Result<Var> {
        match ex {
            Example::Single(i) => self.sample_loss(g, &data.samples[i], sel, gates, rng),
            Example::Triplet { pos, neg_text, neg_image } => {
                ensure_distinct(pos, &[neg_text, neg_image])?;
                let p = &data.samples[pos];
                self.triplet_loss(g, p, &data.samples[neg_text].text, &data.samples[neg_image].image, sel, gates, rng)
            }
        }
    }

    /// Turns dataset indices into training examples, mining negatives for matching.
    pub fn make_examples(
        &self,
        data: &Dataset,
        batch: &[usize],
        sel: &Selection,
        mining: Option<MiningConfig>,
        rng: &mut Rng,
    ) -> Result<Vec<Example>> {
        match (self.config.task, mining) {
            (Task::Itm, Some(cfg)) => batch
                .iter()
                .map(|&i| {
                    let (neg_text, neg_image) = self.mine_negatives(data, i, sel, cfg, rng)?;
                    Ok(Example::Triplet { pos: i, neg_text, neg_image })
                })
                .collect(),
            _ => Ok(batch.iter().map(|&i| Example::Single(i)).collect()),
        }
    }

    /// Mean loss and summed-then-averaged parameter gradients over a minibatch.
    pub fn batch_gradients(
        &self,
        data: &Dataset,
        examples: &[Example],
        sel: &Selection,
        rng: &mut Rng,
    ) -> Result<(f64, ParamGrads)> {
        ensure!(!examples.is_empty(), Invalid, "empty minibatch");
        let mut grads = ParamGrads::new(self.store.len());
        let mut total = 0.0;
        for &ex in examples {
            let mut g = Graph::new(&self.store);
            let loss = self.example_loss(&mut g, data, ex, sel, None, rng)?;
            total += g.scalar(loss);
            grads.merge(g.backward(loss)?.params());
        }
        let n = examples.len() as f64;
        grads.scale(1.0 / n);
        Ok((total / n, grads))
    }

    /// One optimizer step on a minibatch through `sel`; returns the mean loss.
    pub fn train_step(
        &mut self,
        opt: &mut Adam,
        data: &Dataset,
        batch: &[usize],
        sel: &Selection,
        mining: Option<MiningConfig>,
        rng: &mut Rng,
    ) -> Result<(f64, ParamGrads)> {
        let examples = self.make_examples(data, batch, sel, mining, rng)?;
        let (loss, grads) = self.batch_gradients(data, &examples, sel, rng)?;
        ensure!(loss.is_finite(), NonFinite, "training loss is {loss}");
        if let StepOutcome::Skipped { param } = opt.step(&mut self.store, &grads) {
            return Err(Error::NonFinite(format!("gradient of {param} is not finite")));
        }
        Ok((loss, grads))
    }
}

//! Synthetic multimodal tasks whose labels are exact functions of sampled
//! latents.
//!
//! Objects carry a categorical code, a colour and a flag bit in their
//! features; sentences are short token programs naming a code. Each task
//! keeps its latents so an independent evaluator can recompute every label.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::backbone::{BoxXywh, Label, MultimodalSample, PreparedSample};
use crate::error::{ensure, Result};
use crate::heads::compute_iou;
use crate::model::{Dataset, ModelConfig, Task};
use crate::numerics::{seeded, Rng, Tensor};

/// Token ids of the synthetic vocabulary; codes and fillers follow.
pub const TOKEN_COUNT: usize = 1;
pub const TOKEN_ANCHOR: usize = 2;
pub const TOKEN_COLOUR: usize = 3;
pub const TOKEN_MATCH: usize = 4;
pub const TOKEN_FIND: usize = 5;
pub const TOKEN_NEAR: usize = 6;
const FIRST_CODE: usize = 7;

/// Question family for the answering task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VqaRule {
    /// "how many objects carry code c": the answer depends on both modalities.
    CrossModalCount,
    /// "how many other objects share the flagged object's code": the sentence
    /// carries no information, objects must compare with each other.
    AnchorCount,
    /// "what colour is the object with code c".
    Attribute,
    /// Cross-modal and anchor counting questions in equal proportion.
    Mixed,
}

/// Referring-expression family for the grounding task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VgRule {
    /// "find the object with code c".
    Direct,
    /// "find the object nearest the flagged object": only box geometry
    /// separates the candidates.
    Near,
    /// Both families in equal proportion.
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub task: Task,
    pub rule: VqaRule,
    pub vg_rule: VgRule,
    pub codes: usize,
    pub colours: usize,
    pub objects: usize,
    pub noise_dims: usize,
    pub fillers: usize,
    pub max_len: usize,
    /// Largest count asked for by counting questions.
    pub max_count: usize,
    /// Relative size jitter of the grounding target box.
    pub jitter: f64,
    pub train: usize,
    pub val: usize,
    pub seed: u64,
}

impl SyntheticTaskSpec {
    pub fn new(task: Task, seed: u64) -> Self {
        SyntheticTaskSpec {
            task,
            rule: VqaRule::Mixed,
            vg_rule: VgRule::Mixed,
            codes: 4,
            colours: 3,
            objects: 6,
            noise_dims: 1,
            fillers: 2,
            max_len: 4,
            max_count: 3,
            jitter: 0.05,
            train: 1600,
            val: 400,
            seed,
        }
    }

    pub fn vocab(&self) -> usize {
        FIRST_CODE + self.codes + self.fillers
    }

    pub fn feature_width(&self) -> usize {
        self.codes + self.colours + 1 + self.noise_dims
    }

    /// Answer classes: counts `0..=objects`, then colours.
    pub fn answers(&self) -> usize {
        self.objects + 1 + self.colours
    }

    pub fn code_token(&self, c: usize) -> usize {
        FIRST_CODE + c
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.codes >= 2, Invalid, "need at least two codes");
        ensure!(self.colours >= 1, Invalid, "need at least one colour");
        ensure!(self.objects >= 2, Invalid, "need at least two objects");
        ensure!(self.max_count < self.objects, Invalid, "max count {} needs more than {} objects", self.max_count, self.objects);
        ensure!(self.max_len >= 2, Invalid, "sentences need at least two tokens");
        ensure!(self.jitter >= 0.0 && self.jitter < 0.2, Invalid, "jitter {} outside [0, 0.2)", self.jitter);
        ensure!(self.train >= 2 && self.val >= 1, Invalid, "too few samples");
        Ok(())
    }

    /// A model configuration matching this task's vocabulary and feature widths.
    pub fn model_config(&self, d: usize, heads: usize) -> ModelConfig {
        ModelConfig::new(self.task, self.vocab(), self.max_len, self.feature_width(), d, heads, self.answers())
    }
}

/// The generator's hidden state for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Latent {
    pub codes: Vec<usize>,
    pub colours: Vec<usize>,
    /// Object with the flag bit set (anchor or salient object), if any.
    pub flagged: Option<usize>,
    pub question: Option<VqaRule>,
    /// Code named by the sentence.
    pub query_code: Option<usize>,
    /// Grounding target box.
    pub target_box: Option<BoxXywh>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub sample: MultimodalSample,
    pub latent: Latent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub spec: SyntheticTaskSpec,
    pub train: Vec<SyntheticSample>,
    pub val: Vec<SyntheticSample>,
}

impl SyntheticDataset {
    /// Train and validation samples as one prepared dataset, train first,
    /// plus the two index ranges.
    pub fn prepared(&self) -> Result<(Dataset, Vec<usize>, Vec<usize>)> {
        let all: Vec<&SyntheticSample> = self.train.iter().chain(&self.val).collect();
        let samples = all.iter().map(|s| PreparedSample::new(&s.sample, self.spec.max_len)).collect::<Result<Vec<_>>>()?;
        let groups = all.iter().map(|s| group_key(&self.spec, &s.latent)).collect();
        let data = Dataset::new(self.spec.task, samples, groups)?;
        let n = self.train.len();
        Ok((data, (0..n).collect(), (n..n + self.val.len()).collect()))
    }
}

/// Key separating matching pairs by their shared code.
fn group_key(spec: &SyntheticTaskSpec, latent: &Latent) -> usize {
    match spec.task {
        Task::Itm => latent.flagged.map_or(0, |f| latent.codes[f]),
        _ => 0,
    }
}

fn random_box(rng: &mut Rng) -> BoxXywh {
    [rng.random_range(0.15..0.85), rng.random_range(0.15..0.85), rng.random_range(0.12..0.3), rng.random_range(0.12..0.3)]
}

fn other_code(rng: &mut Rng, codes: usize, not: usize) -> usize {
    let c = rng.random_range(0..codes - 1);
    if c >= not {
        c + 1
    } else {
        c
    }
}

fn features(spec: &SyntheticTaskSpec, latent: &Latent, rng: &mut Rng) -> Tensor {
    let w = spec.feature_width();
    let n = latent.codes.len();
    let mut data = vec![0.0; n * w];
    for i in 0..n {
        let row = &mut data[i * w..(i + 1) * w];
        row[latent.codes[i]] = 1.0;
        row[spec.codes + latent.colours[i]] = 1.0;
        if latent.flagged == Some(i) {
            row[spec.codes + spec.colours] = 1.0;
        }
        for v in &mut row[spec.codes + spec.colours + 1..] {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    Tensor::new(vec![n, w], data).expect("positive dims")
}

fn sentence(spec: &SyntheticTaskSpec, head: &[usize], rng: &mut Rng) -> Vec<usize> {
    let mut tokens = head.to_vec();
    let room = spec.max_len - tokens.len();
    let extra = rng.random_range(0..=room.min(spec.fillers.max(1)));
    for _ in 0..extra {
        if spec.fillers > 0 {
            tokens.push(FIRST_CODE + spec.codes + rng.random_range(0..spec.fillers));
        }
    }
    tokens
}

/// Assigns `count` objects (besides `reserved`) to `code` and the rest to other codes.
fn codes_with_count(rng: &mut Rng, spec: &SyntheticTaskSpec, code: usize, count: usize, reserved: Option<usize>) -> Vec<usize> {
    let n = spec.objects;
    let mut slots: Vec<usize> = (0..n).filter(|&i| Some(i) != reserved).collect();
    slots.shuffle(rng);
    let mut codes: Vec<usize> = (0..n).map(|_| other_code(rng, spec.codes, code)).collect();
    for &i in &slots[..count] {
        codes[i] = code;
    }
    if let Some(r) = reserved {
        codes[r] = code;
    }
    codes
}

fn generate_vqa(spec: &SyntheticTaskSpec, rng: &mut Rng) -> SyntheticSample {
    let rule = match spec.rule {
        VqaRule::Mixed => {
            if rng.random_bool(0.5) {
                VqaRule::CrossModalCount
            } else {
                VqaRule::AnchorCount
            }
        }
        r => r,
    };
    let n = spec.objects;
    let colours: Vec<usize> = (0..n).map(|_| rng.random_range(0..spec.colours)).collect();
    let (codes, flagged, query, tokens) = match rule {
        VqaRule::CrossModalCount => {
            let c = rng.random_range(0..spec.codes);
            let k = rng.random_range(0..=spec.max_count);
            // an unrelated flagged object keeps feature statistics identical across rules
            let flagged = Some(rng.random_range(0..n));
            (codes_with_count(rng, spec, c, k, None), flagged, Some(c), sentence(spec, &[TOKEN_COUNT, spec.code_token(c)], rng))
        }
        VqaRule::AnchorCount => {
            let a = rng.random_range(0..spec.codes);
            let k = rng.random_range(0..=spec.max_count);
            let anchor = rng.random_range(0..n);
            (codes_with_count(rng, spec, a, k, Some(anchor)), Some(anchor), None, sentence(spec, &[TOKEN_ANCHOR], rng))
        }
        VqaRule::Attribute => {
            let c = rng.random_range(0..spec.codes);
            let codes = codes_with_count(rng, spec, c, 1, None);
            (codes, None, Some(c), sentence(spec, &[TOKEN_COLOUR, spec.code_token(c)], rng))
        }
        VqaRule::Mixed => unreachable!("resolved above"),
    };
    let latent = Latent { codes, colours, flagged, question: Some(rule), query_code: query, target_box: None };
    let boxes: Vec<BoxXywh> = (0..n).map(|_| random_box(rng)).collect();
    let objects = features(spec, &latent, rng);
    let label = symbolic_label(spec, &latent, &boxes);
    SyntheticSample { sample: MultimodalSample { tokens, objects, boxes, label }, latent }
}

fn generate_itm(spec: &SyntheticTaskSpec, rng: &mut Rng, matched: bool) -> SyntheticSample {
    let n = spec.objects;
    let codes: Vec<usize> = (0..n).map(|_| rng.random_range(0..spec.codes)).collect();
    let colours = (0..n).map(|_| rng.random_range(0..spec.colours)).collect();
    let salient = rng.random_range(0..n);
    let image_code = codes[salient];
    let text_code = if matched { image_code } else { other_code(rng, spec.codes, image_code) };
    let tokens = sentence(spec, &[TOKEN_MATCH, spec.code_token(text_code)], rng);
    let latent = Latent { codes, colours, flagged: Some(salient), question: None, query_code: Some(text_code), target_box: None };
    let boxes: Vec<BoxXywh> = (0..n).map(|_| random_box(rng)).collect();
    let objects = features(spec, &latent, rng);
    let label = symbolic_label(spec, &latent, &boxes);
    SyntheticSample { sample: MultimodalSample { tokens, objects, boxes, label }, latent }
}

/// Systematic horizontal and vertical shift of the grounding box, keyed by colour.
pub fn colour_shift(spec: &SyntheticTaskSpec, colour: usize) -> [f64; 2] {
    let centre = (spec.colours as f64 - 1.0) / 2.0;
    let t = if spec.colours > 1 { (colour as f64 - centre) / centre.max(1.0) } else { 0.0 };
    [0.15 * t, -0.1 * t]
}

fn centre_distance(a: &BoxXywh, b: &BoxXywh) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Object closest to `landmark` by centre distance, provided it is closer
/// than `margin` times the runner-up.
fn nearest_object(boxes: &[BoxXywh], landmark: usize, margin: f64) -> Option<usize> {
    let mut d: Vec<(f64, usize)> =
        boxes.iter().enumerate().filter(|(i, _)| *i != landmark).map(|(i, b)| (centre_distance(b, &boxes[landmark]), i)).collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0));
    match d.as_slice() {
        [first] => Some(first.1),
        [first, second, ..] if first.0 < margin * second.0 => Some(first.1),
        _ => None,
    }
}

/// Ratio by which the nearest object must beat the runner-up.
const NEAR_MARGIN: f64 = 0.75;

/// Index of the object a grounding latent refers to.
pub fn grounding_target(latent: &Latent, boxes: &[BoxXywh]) -> Option<usize> {
    match (latent.query_code, latent.flagged) {
        (Some(c), _) => latent.codes.iter().position(|&x| x == c),
        (None, Some(landmark)) => nearest_object(boxes, landmark, NEAR_MARGIN),
        (None, None) => None,
    }
}

fn generate_vg(spec: &SyntheticTaskSpec, rng: &mut Rng) -> SyntheticSample {
    let n = spec.objects;
    let near = match spec.vg_rule {
        VgRule::Direct => false,
        VgRule::Near => true,
        VgRule::Mixed => rng.random_bool(0.5),
    };
    loop {
        let colours: Vec<usize> = (0..n).map(|_| rng.random_range(0..spec.colours)).collect();
        let boxes: Vec<BoxXywh> = (0..n).map(|_| random_box(rng)).collect();
        let (codes, flagged, query, tokens) = if near {
            let codes: Vec<usize> = (0..n).map(|_| rng.random_range(0..spec.codes)).collect();
            let landmark = rng.random_range(0..n);
            (codes, Some(landmark), None, sentence(spec, &[TOKEN_FIND, TOKEN_NEAR], rng))
        } else {
            let c = rng.random_range(0..spec.codes);
            (codes_with_count(rng, spec, c, 1, None), None, Some(c), sentence(spec, &[TOKEN_FIND, spec.code_token(c)], rng))
        };
        let mut latent = Latent { codes, colours, flagged, question: None, query_code: query, target_box: None };
        let Some(target) = grounding_target(&latent, &boxes) else { continue };
        let b = boxes[target];
        let [sx, sy] = colour_shift(spec, latent.colours[target]);
        let j = spec.jitter;
        let truth = [
            b[0] + (sx + rng.random_range(-j..=j)) * b[2],
            b[1] + (sy + rng.random_range(-j..=j)) * b[3],
            b[2] * (1.0 + rng.random_range(-j..=j)),
            b[3] * (1.0 + rng.random_range(-j..=j)),
        ];
        let ious: Vec<f64> = boxes.iter().map(|x| compute_iou(x, &truth)).collect();
        let best_other = ious.iter().enumerate().filter(|(i, _)| *i != target).map(|(_, v)| *v).fold(0.0, f64::max);
        if ious[target] <= best_other {
            continue;
        }
        latent.target_box = Some(truth);
        let objects = features(spec, &latent, rng);
        let label = symbolic_label(spec, &latent, &boxes);
        return SyntheticSample { sample: MultimodalSample { tokens, objects, boxes, label }, latent };
    }
}

/// The label implied by a latent state.
pub fn symbolic_label(spec: &SyntheticTaskSpec, latent: &Latent, _boxes: &[BoxXywh]) -> Label {
    match spec.task {
        Task::Vqa => {
            let count_of = |c: usize| latent.codes.iter().filter(|&&x| x == c).count();
            let answer = match latent.question.expect("answering latents carry a question") {
                VqaRule::CrossModalCount => count_of(latent.query_code.expect("query")),
                VqaRule::AnchorCount => {
                    let a = latent.flagged.expect("anchor");
                    count_of(latent.codes[a]) - 1
                }
                VqaRule::Attribute => {
                    let c = latent.query_code.expect("query");
                    let i = latent.codes.iter().position(|&x| x == c).expect("one object has the code");
                    spec.objects + 1 + latent.colours[i]
                }
                VqaRule::Mixed => unreachable!("resolved at generation"),
            };
            Label::Answer(answer)
        }
        Task::Itm => {
            let salient = latent.flagged.expect("salient object");
            Label::Match(latent.query_code == Some(latent.codes[salient]))
        }
        Task::Vg => Label::Box(latent.target_box.expect("target box")),
    }
}

/// Generates train and validation splits; identical for identical specs.
pub fn generate(spec: &SyntheticTaskSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = seeded(spec.seed);
    let make = |count: usize, rng: &mut Rng| -> Vec<SyntheticSample> {
        match spec.task {
            Task::Vqa => (0..count).map(|_| generate_vqa(spec, rng)).collect(),
            Task::Vg => (0..count).map(|_| generate_vg(spec, rng)).collect(),
            Task::Itm => {
                let mut flags: Vec<bool> = (0..count).map(|i| i < count / 2).collect();
                flags.shuffle(rng);
                flags.into_iter().map(|m| generate_itm(spec, rng, m)).collect()
            }
        }
    };
    let train = make(spec.train, &mut rng);
    let val = make(spec.val, &mut rng);
    Ok(SyntheticDataset { spec: spec.clone(), train, val })
}

pub fn generate_synthetic_vqa(spec: &SyntheticTaskSpec) -> Result<SyntheticDataset> {
    ensure!(spec.task == Task::Vqa, Invalid, "spec is for {}", spec.task);
    generate(spec)
}

pub fn generate_synthetic_itm(spec: &SyntheticTaskSpec) -> Result<SyntheticDataset> {
    ensure!(spec.task == Task::Itm, Invalid, "spec is for {}", spec.task);
    generate(spec)
}

pub fn generate_synthetic_vg(spec: &SyntheticTaskSpec) -> Result<SyntheticDataset> {
    ensure!(spec.task == Task::Vg, Invalid, "spec is for {}", spec.task);
    generate(spec)
}

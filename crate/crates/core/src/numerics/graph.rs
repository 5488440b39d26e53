//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] records every operation applied during a forward pass. Values
//! are kept on the tape, and [`Graph::backward`] replays the record in reverse
//! to produce gradients for leaves and parameters. Everything is treated as a
//! row-major matrix: vectors are `[1 × n]`, scalars `[1 × 1]`.

use rand::Rng as _;

use super::kernels;
use super::{ParamGrads, ParamId, ParamStore, Rng, Tensor};
use crate::error::{ensure, Error, Result};

/// Layer-norm stabilizer.
pub const LN_EPS: f64 = 1e-5;
/// Probability clamp used by the log-likelihood losses.
pub const PROB_EPS: f64 = 1e-12;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddConst(Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Log(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Dropout(Var, Vec<f64>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SelectRows(Var, Vec<usize>),
    StackRows(Vec<Var>),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    SoftmaxXent { logits: Var, probs: Vec<f64>, label: usize },
    Bce { s: Var, labels: Vec<f64> },
    KlDiv { q: Var, target: Vec<f64> },
    SmoothL1 { pred: Var, target: Vec<f64> },
    SoftmaxGate { logits: Var, slot: usize, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// The computation record of one forward pass.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
    param_grads: bool,
    train: bool,
}

/// Result of a backward replay.
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    params: ParamGrads,
    steps: usize,
}

impl Gradients {
    /// Gradient of the loss with respect to a recorded value.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].as_deref()
    }

    pub fn params(&self) -> &ParamGrads {
        &self.params
    }

    pub fn into_params(self) -> ParamGrads {
        self.params
    }

    /// Number of recorded operations whose backward rule ran.
    pub fn steps(&self) -> usize {
        self.steps
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap_or(&1);
    let rows = if shape.len() <= 1 { 1 } else { shape[..shape.len() - 1].iter().product() };
    (rows, cols)
}

impl<'p> Graph<'p> {
    /// A training-mode graph that differentiates parameters.
    pub fn new(params: &'p ParamStore) -> Self {
        Graph { params, nodes: Vec::with_capacity(256), param_nodes: vec![None; params.len()], param_grads: true, train: true }
    }

    /// An evaluation-mode graph: dropout disabled, parameters treated as constants.
    pub fn inference(params: &'p ParamStore) -> Self {
        let mut g = Self::new(params);
        g.train = false;
        g.param_grads = false;
        g
    }

    pub fn set_train(&mut self, train: bool) -> &mut Self {
        self.train = train;
        self
    }

    /// Whether parameter leaves take part in differentiation.
    pub fn set_param_grads(&mut self, enabled: bool) -> &mut Self {
        self.param_grads = enabled;
        self
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of recorded operations that take part in differentiation.
    pub fn differentiable_steps(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| n.requires_grad && !matches!(n.op, Op::Leaf | Op::Param(_)))
            .count()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        match self.nodes[v.0].op {
            Op::Param(id) => self.params.get(id).data(),
            _ => &self.nodes[v.0].data,
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    fn rc(&self, v: Var) -> (usize, usize) {
        rows_cols(&self.nodes[v.0].shape)
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("recorded shapes are consistent")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node { shape, data, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant or differentiable input.
    pub fn leaf(&mut self, tensor: Tensor, requires_grad: bool) -> Var {
        let shape = tensor.shape().to_vec();
        self.nodes.push(Node { shape, data: tensor.into_data(), op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor, false)
    }

    /// Binds a stored parameter; repeated binds return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        let shape = self.params.get(id).shape().to_vec();
        let requires_grad = self.param_grads;
        self.nodes.push(Node { shape, data: Vec::new(), op: Op::Param(id), requires_grad });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rc(a);
        let (k2, n) = self.rc(b);
        ensure!(k == k2, Shape, "matmul [{m}×{k}]·[{k2}×{n}]");
        let mut out = vec![0.0; m * n];
        kernels::matmul(self.value(a), self.value(b), m, k, n, &mut out);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rc(a);
        let (n, k2) = self.rc(b);
        ensure!(k == k2, Shape, "matmul_nt [{m}×{k}]·[{n}×{k2}]ᵀ");
        let mut out = vec![0.0; m * n];
        kernels::matmul_nt(self.value(a), self.value(b), m, k, n, &mut out);
        Ok(self.push(vec![m, n], out, Op::MatMulNt(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = self.rc(a);
        let out = kernels::transpose(self.value(a), m, n);
        self.push(vec![n, m], out, Op::Transpose(a), &[a])
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        ensure!(
            self.value(a).len() == self.value(b).len() && self.rc(a) == self.rc(b),
            Shape,
            "{what}: {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a `[1 × c]` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.rc(a);
        ensure!(self.value(row).len() == c, Shape, "add_row: width {c} vs row {:?}", self.shape(row));
        let rv = self.value(row);
        let mut out = self.value(a).to_vec();
        for i in 0..r {
            out[i * c..(i + 1) * c].iter_mut().zip(rv).for_each(|(o, b)| *o += b);
        }
        Ok(self.push(self.shape(a).to_vec(), out, Op::AddRow(a, row), &[a, row]))
    }

    /// Adds a non-differentiable tensor of the same shape.
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        ensure!(c.numel() == self.value(a).len(), Shape, "add_const: {:?} vs {:?}", self.shape(a), c.shape());
        let out = self.value(a).iter().zip(c.data()).map(|(x, y)| x + y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::AddConst(a), &[a]))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).iter().map(|x| x + c).collect();
        self.push(self.shape(a).to_vec(), out, Op::AddConst(a), &[a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * c).collect();
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, c), &[a])
    }

    /// Multiplies every element of `a` by the scalar value `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        ensure!(self.value(s).len() == 1, Shape, "scale_by expects a scalar, got {:?}", self.shape(s));
        let sv = self.value(s)[0];
        let out = self.value(a).iter().map(|x| x * sv).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::ScaleBy(a, s), &[a, s]))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        self.push(self.shape(a).to_vec(), out, op, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, kernels::sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    /// Natural log; the input must be positive.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        ensure!(self.value(a).iter().all(|&x| x > 0.0), Invalid, "log of a non-positive value");
        Ok(self.unary(a, f64::ln, Op::Log(a)))
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.rc(a);
        ensure!(c >= 1, Invalid, "softmax over an empty axis");
        let mut out = self.value(a).to_vec();
        for i in 0..r {
            kernels::softmax_in_place(&mut out[i * c..(i + 1) * c]);
        }
        Ok(self.push(self.shape(a).to_vec(), out, Op::SoftmaxRows(a), &[a]))
    }

    /// Row-wise standardization followed by the affine `gain`, `bias` (both `[1 × c]`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.rc(x);
        ensure!(
            self.value(gain).len() == c && self.value(bias).len() == c,
            Shape,
            "layer_norm width {c} vs gain {:?} bias {:?}",
            self.shape(gain),
            self.shape(bias)
        );
        let xv = self.value(x);
        let (gv, bv) = (self.value(gain), self.value(bias));
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * gv[j] + bv[j];
            }
        }
        Ok(self.push(self.shape(x).to_vec(), out, Op::LayerNorm { x, gain, bias, xhat, inv_std }, &[x, gain, bias]))
    }

    /// Inverted dropout; identity outside training mode.
    pub fn dropout(&mut self, a: Var, rate: f64, rng: &mut Rng) -> Result<Var> {
        ensure!((0.0..1.0).contains(&rate), Invalid, "dropout rate {rate} outside [0, 1)");
        if !self.train || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - rate;
        let mask: Vec<f64> =
            (0..self.value(a).len()).map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
        let out = self.value(a).iter().zip(&mask).map(|(x, m)| x * m).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Dropout(a, mask), &[a]))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let (r, c) = self.rc(a);
        ensure!(width > 0 && start + width <= c, Shape, "slice_cols {start}+{width} of width {c}");
        let av = self.value(a);
        let mut out = Vec::with_capacity(r * width);
        for i in 0..r {
            out.extend_from_slice(&av[i * c + start..i * c + start + width]);
        }
        Ok(self.push(vec![r, width], out, Op::SliceCols(a, start), &[a]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        ensure!(!parts.is_empty(), Shape, "concat of nothing");
        let r = self.rc(parts[0]).0;
        ensure!(parts.iter().all(|&p| self.rc(p).0 == r), Shape, "concat_cols row mismatch");
        let total: usize = parts.iter().map(|&p| self.rc(p).1).sum();
        let mut out = vec![0.0; r * total];
        let mut offset = 0;
        for &p in parts {
            let c = self.rc(p).1;
            let pv = self.value(p);
            for i in 0..r {
                out[i * total + offset..i * total + offset + c].copy_from_slice(&pv[i * c..(i + 1) * c]);
            }
            offset += c;
        }
        Ok(self.push(vec![r, total], out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Gathers rows by index (repeats allowed), e.g. an embedding lookup.
    pub fn select_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let (r, c) = self.rc(a);
        ensure!(!indices.is_empty(), Shape, "select_rows with no indices");
        ensure!(indices.iter().all(|&i| i < r), Invalid, "row index out of range (rows = {r})");
        let av = self.value(a);
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            out.extend_from_slice(&av[i * c..(i + 1) * c]);
        }
        Ok(self.push(vec![indices.len(), c], out, Op::SelectRows(a, indices.to_vec()), &[a]))
    }

    /// Stacks matrices of equal width on top of each other.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        ensure!(!parts.is_empty(), Shape, "stack of nothing");
        let c = self.rc(parts[0]).1;
        ensure!(parts.iter().all(|&p| self.rc(p).1 == c), Shape, "stack_rows width mismatch");
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let r = out.len() / c;
        Ok(self.push(vec![r, c], out, Op::StackRows(parts.to_vec()), parts))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        ensure!(
            shape.iter().product::<usize>() == self.value(a).len(),
            Shape,
            "reshape {:?} into {shape:?}",
            self.shape(a)
        );
        let out = self.value(a).to_vec();
        Ok(self.push(shape.to_vec(), out, Op::Reshape(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push(vec![1, 1], vec![s], Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.value(a).iter().sum::<f64>() / n;
        self.push(vec![1, 1], vec![s], Op::Mean(a), &[a])
    }

    /// `−log softmax(logits)[label]` for a single row of logits.
    pub fn softmax_cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let k = self.value(logits).len();
        ensure!(label < k, Invalid, "label {label} out of range for {k} classes");
        let mut probs = self.value(logits).to_vec();
        let lse = kernels::log_sum_exp(&probs);
        let loss = lse - probs[label];
        probs.iter_mut().for_each(|p| *p = (*p - lse).exp());
        Ok(self.push(vec![1, 1], vec![loss], Op::SoftmaxXent { logits, probs, label }, &[logits]))
    }

    /// Mean binary cross-entropy of probabilities `s` against targets in `[0, 1]`.
    pub fn binary_cross_entropy(&mut self, s: Var, labels: &[f64]) -> Result<Var> {
        let sv = self.value(s);
        ensure!(sv.len() == labels.len(), Shape, "bce: {} scores vs {} labels", sv.len(), labels.len());
        ensure!(labels.iter().all(|l| (0.0..=1.0).contains(l)), Invalid, "bce labels must lie in [0, 1]");
        let loss = sv.iter().zip(labels).map(|(&p, &y)| kernels::bce(p, y)).sum::<f64>() / labels.len() as f64;
        Ok(self.push(vec![1, 1], vec![loss], Op::Bce { s, labels: labels.to_vec() }, &[s]))
    }

    /// `KL(target ‖ q)` where `q` is a recorded distribution and `target` a constant one.
    pub fn kl_divergence(&mut self, target: &[f64], q: Var) -> Result<Var> {
        let qv = self.value(q);
        ensure!(qv.len() == target.len(), Shape, "kl: {} vs {}", target.len(), qv.len());
        let loss = kernels::kl(target, qv);
        Ok(self.push(vec![1, 1], vec![loss], Op::KlDiv { q, target: target.to_vec() }, &[q]))
    }

    /// Mean smooth-L1 distance to a constant target.
    pub fn smooth_l1(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let pv = self.value(pred);
        ensure!(pv.len() == target.len(), Shape, "smooth_l1: {} vs {}", pv.len(), target.len());
        let loss = pv.iter().zip(target).map(|(p, t)| kernels::smooth_l1(p - t)).sum::<f64>() / target.len() as f64;
        Ok(self.push(vec![1, 1], vec![loss], Op::SmoothL1 { pred, target: target.to_vec() }, &[pred]))
    }

    /// One gate per logit: gate `j` has forward value exactly `1.0` if
    /// `j == index` and `0.0` otherwise, while its gradient with respect to
    /// `logits` is that of `softmax(logits)_j`, i.e. `p_j · (e_j − p)`.
    pub fn softmax_gates(&mut self, logits: Var, index: usize) -> Result<Vec<Var>> {
        let mut probs = self.value(logits).to_vec();
        ensure!(index < probs.len(), Invalid, "gate index {index} out of range for {} logits", probs.len());
        kernels::softmax_in_place(&mut probs);
        Ok((0..probs.len())
            .map(|slot| {
                let v = if slot == index { 1.0 } else { 0.0 };
                self.push(vec![1, 1], vec![v], Op::SoftmaxGate { logits, slot, probs: probs.clone() }, &[logits])
            })
            .collect())
    }

    /// Replays the record in reverse from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        ensure!(self.value(loss).len() == 1, Shape, "backward from non-scalar {:?}", self.shape(loss));
        ensure!(self.value(loss)[0].is_finite(), NonFinite, "loss is {}", self.value(loss)[0]);
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        let mut steps = 0;
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf | Op::Param(_)) {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            steps += 1;
            self.backward_node(node, &node.data, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        let mut params = ParamGrads::new(self.params.len());
        for (pid, v) in self.param_nodes.iter().enumerate() {
            if let Some(v) = v {
                if let Some(g) = &grads[v.0] {
                    params.accumulate(ParamId(pid), g);
                }
            }
        }
        if !params.is_finite() {
            return Err(Error::NonFinite("parameter gradient".into()));
        }
        Ok(Gradients { nodes: grads, params, steps })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut [f64] {
        let len = self.value(v).len();
        grads[v.0].get_or_insert_with(|| vec![0.0; len])
    }

    fn backward_node(&self, node: &Node, out: &[f64], gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            &Op::MatMul(a, b) => {
                let (m, k) = self.rc(a);
                let n = self.rc(b).1;
                if self.wants(a) {
                    let bv = self.value(b);
                    kernels::matmul_nt_acc(gout, bv, m, n, k, self.acc(grads, a));
                }
                if self.wants(b) {
                    let av = self.value(a);
                    kernels::matmul_tn_acc(av, gout, m, k, n, self.acc(grads, b));
                }
            }
            &Op::MatMulNt(a, b) => {
                let (m, k) = self.rc(a);
                let n = self.rc(b).0;
                if self.wants(a) {
                    let bv = self.value(b);
                    kernels::matmul_acc(gout, bv, m, n, k, self.acc(grads, a));
                }
                if self.wants(b) {
                    let av = self.value(a);
                    kernels::matmul_tn_acc(gout, av, m, n, k, self.acc(grads, b));
                }
            }
            &Op::Transpose(a) => {
                if self.wants(a) {
                    let (m, n) = self.rc(a);
                    let t = kernels::transpose(gout, n, m);
                    add_into(self.acc(grads, a), &t);
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if self.wants(v) {
                        add_into(self.acc(grads, v), gout);
                    }
                }
            }
            &Op::Sub(a, b) => {
                if self.wants(a) {
                    add_into(self.acc(grads, a), gout);
                }
                if self.wants(b) {
                    self.acc(grads, b).iter_mut().zip(gout).for_each(|(g, d)| *g -= d);
                }
            }
            &Op::Mul(a, b) => {
                if self.wants(a) {
                    let bv = self.value(b);
                    let ga = self.acc(grads, a);
                    for ((g, d), y) in ga.iter_mut().zip(gout).zip(bv) {
                        *g += d * y;
                    }
                }
                if self.wants(b) {
                    let av = self.value(a);
                    let gb = self.acc(grads, b);
                    for ((g, d), x) in gb.iter_mut().zip(gout).zip(av) {
                        *g += d * x;
                    }
                }
            }
            &Op::AddRow(a, row) => {
                if self.wants(a) {
                    add_into(self.acc(grads, a), gout);
                }
                if self.wants(row) {
                    let c = self.value(row).len();
                    let gr = self.acc(grads, row);
                    for chunk in gout.chunks(c) {
                        add_into(gr, chunk);
                    }
                }
            }
            &Op::AddConst(a) => {
                if self.wants(a) {
                    add_into(self.acc(grads, a), gout);
                }
            }
            &Op::Scale(a, c) => {
                if self.wants(a) {
                    self.acc(grads, a).iter_mut().zip(gout).for_each(|(g, d)| *g += c * d);
                }
            }
            &Op::ScaleBy(a, s) => {
                let sv = self.value(s)[0];
                if self.wants(a) {
                    self.acc(grads, a).iter_mut().zip(gout).for_each(|(g, d)| *g += sv * d);
                }
                if self.wants(s) {
                    let dot: f64 = self.value(a).iter().zip(gout).map(|(x, d)| x * d).sum();
                    self.acc(grads, s)[0] += dot;
                }
            }
            &Op::Relu(a) => {
                if self.wants(a) {
                    let ga = self.acc(grads, a);
                    for ((g, d), y) in ga.iter_mut().zip(gout).zip(out) {
                        if *y > 0.0 {
                            *g += d;
                        }
                    }
                }
            }
            &Op::Sigmoid(a) => {
                if self.wants(a) {
                    let ga = self.acc(grads, a);
                    for ((g, d), y) in ga.iter_mut().zip(gout).zip(out) {
                        *g += d * y * (1.0 - y);
                    }
                }
            }
            &Op::Tanh(a) => {
                if self.wants(a) {
                    let ga = self.acc(grads, a);
                    for ((g, d), y) in ga.iter_mut().zip(gout).zip(out) {
                        *g += d * (1.0 - y * y);
                    }
                }
            }
            &Op::Log(a) => {
                if self.wants(a) {
                    let av = self.value(a);
                    let ga = self.acc(grads, a);
                    for ((g, d), x) in ga.iter_mut().zip(gout).zip(av) {
                        *g += d / x;
                    }
                }
            }
            &Op::SoftmaxRows(a) => {
                if self.wants(a) {
                    let c = self.rc(a).1;
                    let ga = self.acc(grads, a);
                    for ((gr, dr), yr) in ga.chunks_mut(c).zip(gout.chunks(c)).zip(out.chunks(c)) {
                        let dot: f64 = dr.iter().zip(yr).map(|(d, y)| d * y).sum();
                        for j in 0..c {
                            gr[j] += yr[j] * (dr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let c = self.rc(*x).1;
                if self.wants(*gain) {
                    let gg = self.acc(grads, *gain);
                    for (dr, hr) in gout.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg[j] += dr[j] * hr[j];
                        }
                    }
                }
                if self.wants(*bias) {
                    let gb = self.acc(grads, *bias);
                    for dr in gout.chunks(c) {
                        add_into(gb, dr);
                    }
                }
                if self.wants(*x) {
                    let gv = self.value(*gain).to_vec();
                    let gx = self.acc(grads, *x);
                    let cf = c as f64;
                    for (i, ((gxr, dr), hr)) in gx.chunks_mut(c).zip(gout.chunks(c)).zip(xhat.chunks(c)).enumerate() {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..c {
                            let dh = dr[j] * gv[j];
                            sum_dh += dh;
                            sum_dh_h += dh * hr[j];
                        }
                        let is = inv_std[i];
                        for j in 0..c {
                            let dh = dr[j] * gv[j];
                            gxr[j] += is / cf * (cf * dh - sum_dh - hr[j] * sum_dh_h);
                        }
                    }
                }
            }
            Op::Dropout(a, mask) => {
                if self.wants(*a) {
                    let ga = self.acc(grads, *a);
                    for ((g, d), m) in ga.iter_mut().zip(gout).zip(mask) {
                        *g += d * m;
                    }
                }
            }
            &Op::SliceCols(a, start) => {
                if self.wants(a) {
                    let c = self.rc(a).1;
                    let w = rows_cols(&node.shape).1;
                    let ga = self.acc(grads, a);
                    for (i, dr) in gout.chunks(w).enumerate() {
                        add_into(&mut ga[i * c + start..i * c + start + w], dr);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = rows_cols(&node.shape).1;
                let mut offset = 0;
                for &p in parts {
                    let c = self.rc(p).1;
                    if self.wants(p) {
                        let gp = self.acc(grads, p);
                        for (i, gr) in gp.chunks_mut(c).enumerate() {
                            add_into(gr, &gout[i * total + offset..i * total + offset + c]);
                        }
                    }
                    offset += c;
                }
            }
            Op::SelectRows(a, indices) => {
                if self.wants(*a) {
                    let c = self.rc(*a).1;
                    let ga = self.acc(grads, *a);
                    for (k, &i) in indices.iter().enumerate() {
                        add_into(&mut ga[i * c..(i + 1) * c], &gout[k * c..(k + 1) * c]);
                    }
                }
            }
            Op::StackRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.wants(p) {
                        add_into(self.acc(grads, p), &gout[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            &Op::Reshape(a) => {
                if self.wants(a) {
                    add_into(self.acc(grads, a), gout);
                }
            }
            &Op::Sum(a) => {
                if self.wants(a) {
                    self.acc(grads, a).iter_mut().for_each(|g| *g += gout[0]);
                }
            }
            &Op::Mean(a) => {
                if self.wants(a) {
                    let ga = self.acc(grads, a);
                    let n = ga.len() as f64;
                    ga.iter_mut().for_each(|g| *g += gout[0] / n);
                }
            }
            Op::SoftmaxXent { logits, probs, label } => {
                if self.wants(*logits) {
                    let gl = self.acc(grads, *logits);
                    for (j, (g, p)) in gl.iter_mut().zip(probs).enumerate() {
                        let y = if j == *label { 1.0 } else { 0.0 };
                        *g += gout[0] * (p - y);
                    }
                }
            }
            Op::Bce { s, labels } => {
                if self.wants(*s) {
                    let sv = self.value(*s);
                    let k = labels.len() as f64;
                    let gs = self.acc(grads, *s);
                    for ((g, &p), &y) in gs.iter_mut().zip(sv).zip(labels) {
                        *g += gout[0] * kernels::bce_grad(p, y) / k;
                    }
                }
            }
            Op::KlDiv { q, target } => {
                if self.wants(*q) {
                    let qv = self.value(*q);
                    let gq = self.acc(grads, *q);
                    for ((g, &qi), &pi) in gq.iter_mut().zip(qv).zip(target) {
                        if pi > 0.0 && qi >= PROB_EPS {
                            *g -= gout[0] * pi / qi;
                        }
                    }
                }
            }
            Op::SmoothL1 { pred, target } => {
                if self.wants(*pred) {
                    let pv = self.value(*pred);
                    let k = target.len() as f64;
                    let gp = self.acc(grads, *pred);
                    for ((g, p), t) in gp.iter_mut().zip(pv).zip(target) {
                        let e = p - t;
                        let d = if e.abs() < 1.0 { e } else { e.signum() };
                        *g += gout[0] * d / k;
                    }
                }
            }
            Op::SoftmaxGate { logits, slot, probs } => {
                if self.wants(*logits) {
                    let gl = self.acc(grads, *logits);
                    let ps = probs[*slot];
                    for (i, (g, p)) in gl.iter_mut().zip(probs).enumerate() {
                        let e = if i == *slot { 1.0 } else { 0.0 };
                        *g += gout[0] * ps * (e - p);
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        ParamStore::new()
    }

    #[test]
    fn matmul_values_and_shapes() {
        let s = store();
        let mut g = Graph::new(&s);
        let a = g.constant(Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let b = g.constant(Tensor::matrix(3, 1, vec![1., 0., -1.]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 1]);
        assert_eq!(g.value(c), &[-2.0, -2.0]);
        assert!(g.matmul(a, a).is_err());
    }

    #[test]
    fn backward_visits_each_step_once() {
        let s = store();
        let mut g = Graph::new(&s);
        let x = g.leaf(Tensor::row(&[1.0, -2.0, 3.0]), true);
        let y = g.relu(x);
        let z = g.mul(y, y).unwrap();
        let w = g.add(z, x).unwrap();
        let l = g.sum(w);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.steps(), g.differentiable_steps());
        assert_eq!(grads.steps(), 4);
        // d/dx (relu(x)^2 + x) = 2 relu(x) [x > 0] + 1
        assert_eq!(grads.wrt(x).unwrap(), &[3.0, 1.0, 7.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let s = store();
        let mut g = Graph::new(&s);
        let x = g.leaf(Tensor::row(&[1.0, 2.0]), true);
        let c = g.constant(Tensor::row(&[3.0, 4.0]));
        let y = g.mul(x, c).unwrap();
        let l = g.sum(y);
        let grads = g.backward(l).unwrap();
        assert!(grads.wrt(c).is_none());
        assert_eq!(grads.wrt(x).unwrap(), &[3.0, 4.0]);
    }

    #[test]
    fn param_gradients_collected_and_frozen_in_inference() {
        let mut s = store();
        let w = s.add("w", Tensor::row(&[2.0, -1.0]));
        {
            let mut g = Graph::new(&s);
            let wv = g.param(w);
            let again = g.param(w);
            assert_eq!(wv, again);
            let sq = g.mul(wv, wv).unwrap();
            let l = g.sum(sq);
            let grads = g.backward(l).unwrap();
            assert_eq!(grads.params().get(w).unwrap(), &[4.0, -2.0]);
        }
        let mut g = Graph::inference(&s);
        let wv = g.param(w);
        let l = g.sum(wv);
        let grads = g.backward(l).unwrap();
        assert!(grads.params().get(w).is_none());
        assert_eq!(grads.steps(), 0);
    }

    #[test]
    fn softmax_gates_are_exactly_one_hot() {
        let s = store();
        let mut g = Graph::new(&s);
        let theta = g.leaf(Tensor::row(&[0.3, -1.2, 2.0, 0.0]), true);
        let gates = g.softmax_gates(theta, 2).unwrap();
        let bits: Vec<u64> = gates.iter().map(|&v| g.scalar(v).to_bits()).collect();
        assert_eq!(bits, [0.0f64, 0.0, 1.0, 0.0].map(f64::to_bits));
        let x = g.constant(Tensor::row(&[0.1234567, 9.87]));
        let y = g.scale_by(x, gates[2]).unwrap();
        assert_eq!(g.value(y), g.value(x));
        let l = g.sum(y);
        let grads = g.backward(l).unwrap();
        let gt = grads.wrt(theta).unwrap();
        // softmax Jacobian row: components sum to zero
        assert!(gt.iter().sum::<f64>().abs() < 1e-12);
        assert!(gt[2] > 0.0 && gt[0] < 0.0);
    }

    #[test]
    fn dropout_is_identity_in_eval_and_scaled_in_train() {
        let s = store();
        let mut rng = crate::numerics::seeded(1);
        let mut g = Graph::inference(&s);
        let x = g.constant(Tensor::full(&[4, 8], 1.0));
        assert_eq!(g.dropout(x, 0.1, &mut rng).unwrap(), x);
        let mut g = Graph::new(&s);
        let x = g.constant(Tensor::full(&[40, 50], 1.0));
        let y = g.dropout(x, 0.1, &mut rng).unwrap();
        let v = g.value(y);
        assert!(v.iter().all(|&e| e == 0.0 || (e - 1.0 / 0.9).abs() < 1e-12));
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        assert!((mean - 1.0).abs() < 0.05);
    }

    #[test]
    fn backward_rejects_non_scalar_and_non_finite() {
        let s = store();
        let mut g = Graph::new(&s);
        let x = g.leaf(Tensor::row(&[1.0, 2.0]), true);
        assert!(g.backward(x).is_err());
        let y = g.scale(x, f64::INFINITY);
        let l = g.sum(y);
        assert!(matches!(g.backward(l), Err(Error::NonFinite(_))));
    }
}

//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a tape: every method appends one primitive whose inputs are
//! already on the tape, so node order is a topological order and the backward
//! sweep is a single reverse pass. Graphs are rebuilt for every forward pass.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;

use crate::error::{ensure, Error, Result};
use crate::kernels::{broadcast_offsets, for_each_permuted, gemm, ConvGeometry, MatRef};
use crate::norm::{RowNormalizer, Softmax, Sparsemax};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

enum Op {
    Leaf,
    Constant,
    MatMul { a: Var, b: Var },
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    AddBroadcast { x: Var, y: Var, axes: Vec<usize> },
    Relu { x: Var },
    Gelu { x: Var, tanh: Vec<f64> },
    Sigmoid { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Conv2d { x: Var, kernel: Var, bias: Var },
    MeanAxis { x: Var, axis: usize },
    Normalize { x: Var, norm: Arc<dyn RowNormalizer> },
    Concat { inputs: Vec<Var>, axis: usize },
    Reshape { x: Var },
    Permute { x: Var, perm: Vec<usize> },
    Sum { x: Var },
    Mean { x: Var },
    BceWithLogits { x: Var, targets: Vec<f64>, pos_weight: f64 },
    CrossEntropy { x: Var, targets: Vec<usize>, probs: Vec<f64> },
}

impl Op {
    fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::MatMul { .. } => "matmul",
            Op::BatchMatMul { .. } => "batch_matmul",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::AddBroadcast { .. } => "add_broadcast",
            Op::Relu { .. } => "relu",
            Op::Gelu { .. } => "gelu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Conv2d { .. } => "conv2d",
            Op::MeanAxis { .. } => "mean_axis",
            Op::Normalize { .. } => "normalize",
            Op::Concat { .. } => "concat",
            Op::Reshape { .. } => "reshape",
            Op::Permute { .. } => "permute",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::BceWithLogits { .. } => "bce_with_logits",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// `tanh` of the inner polynomial, via `exp` which is much cheaper here.
fn gelu_tanh(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

fn gelu_grad(x: f64, t: f64) -> f64 {
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Operation tag of every record, in tape order.
    pub fn op_tags(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.tag()).collect()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A differentiable leaf (learnable parameter or input under study).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    /// `a[.., k] x b[k, n] -> [.., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        ensure!(sb.len() == 2, "matmul weight must be 2-D, got {:?}", sb);
        let k = *sa.last().unwrap();
        ensure!(k == sb[0], "matmul extents disagree: {:?} x {:?}", sa, sb);
        let n = sb[1];
        let m = self.value(a).len() / k;
        let mut out = vec![0.0; m * n];
        gemm(1.0, MatRef::new(self.value(a).data(), m, k), MatRef::new(self.value(b).data(), k, n), 0.0, &mut out);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MatMul { a, b }, needs))
    }

    /// Batched product of `[B, m, k]` with `[B, k, n]`, or with `[B, n, k]`
    /// transposed when `trans_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        ensure!(sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0], "batch_matmul needs [B,m,k] and [B,.,.], got {:?} {:?}", sa, sb);
        let (bt, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        ensure!(k == kb, "batch_matmul inner extents disagree: {:?} {:?}", sa, sb);
        let mut out = vec![0.0; bt * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..bt {
            let am = MatRef::new(&da[i * m * k..(i + 1) * m * k], m, k);
            let bs = &db[i * k * n..(i + 1) * k * n];
            let bm = if trans_b { MatRef::new(bs, n, k).t() } else { MatRef::new(bs, k, n) };
            gemm(1.0, am, bm, 0.0, &mut out[i * m * n..(i + 1) * m * n]);
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_parts(vec![bt, m, n], out), Op::BatchMatMul { a, b, trans_b }, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        ensure!(self.shape(a) == self.shape(b), "add shape mismatch {:?} vs {:?}", self.shape(a), self.shape(b));
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Add { a, b }, needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        ensure!(self.shape(a) == self.shape(b), "mul shape mismatch {:?} vs {:?}", self.shape(a), self.shape(b));
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Mul { a, b }, needs))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|v| v * c).collect());
        let needs = self.needs(x);
        self.push(out, Op::Scale { x, c }, needs)
    }

    /// Adds `y` to `x`, where `y`'s extents equal `x`'s extents on `axes`
    /// (ascending) and `y` is repeated along every other axis.
    pub fn add_broadcast(&mut self, x: Var, y: Var, axes: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sy = self.shape(y);
        ensure!(axes.windows(2).all(|w| w[0] < w[1]) && axes.iter().all(|&a| a < sx.len()), "bad broadcast axes {:?} for {:?}", axes, sx);
        let want: Vec<usize> = axes.iter().map(|&a| sx[a]).collect();
        ensure!(sy == want.as_slice(), "broadcast operand {:?} does not match {:?} on axes {:?}", sy, sx, axes);
        let (dx, dy) = (self.value(x).data(), self.value(y).data());
        let mut data = dx.to_vec();
        for_each_broadcast_run(&sx, axes, |xo, yo, len| {
            data[xo..xo + len].iter_mut().zip(&dy[yo..yo + len]).for_each(|(a, b)| *a += b);
        });
        let needs = self.needs(x) || self.needs(y);
        Ok(self.push(Tensor::from_parts(sx, data), Op::AddBroadcast { x, y, axes: axes.to_vec() }, needs))
    }

    /// Adds a bias over the last axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let last = self.shape(x).len() - 1;
        self.add_broadcast(x, bias, &[last])
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect());
        let needs = self.needs(x);
        self.push(out, op, needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu { x })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let tanh: Vec<f64> = t.data().iter().map(|&v| gelu_tanh(v)).collect();
        let data = t.data().iter().zip(&tanh).map(|(&v, &th)| 0.5 * v * (1.0 + th)).collect();
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        let needs = self.needs(x);
        self.push(out, Op::Gelu { x, tanh }, needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid { x })
    }

    /// Layer normalization over the last axis with learned scale and offset.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().unwrap();
        ensure!(self.shape(gamma) == [d] && self.shape(beta) == [d], "layer_norm parameters must have extent [{}]", d);
        let (xd, gd, bd) = (self.value(x).data(), self.value(gamma).data(), self.value(beta).data());
        let rows = xd.len() / d;
        let mut xhat = vec![0.0; xd.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gd[j] + bd[j];
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(Tensor::from_parts(sx, out), Op::LayerNorm { x, gamma, beta, xhat, rstd }, needs))
    }

    /// Channels-last 2-D convolution with zero "same" padding: `x` is
    /// `[B, H, W, Cin]`, `kernel` is `[KH, KW, Cin, Cout]`, output `[B, H, W, Cout]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        ensure!(sx.len() == 4 && sk.len() == 4, "conv2d needs 4-D input and kernel, got {:?} {:?}", sx, sk);
        let (b, h, w, cin) = (sx[0], sx[1], sx[2], sx[3]);
        let (kh, kw, cout) = (sk[0], sk[1], sk[3]);
        ensure!(sk[2] == cin, "conv2d channel mismatch: input {} vs kernel {}", cin, sk[2]);
        ensure!(kh % 2 == 1 && kw % 2 == 1, "same padding needs odd kernel extents, got {}x{}", kh, kw);
        ensure!(self.shape(bias) == [cout], "conv2d bias must have extent [{}]", cout);
        let geo = ConvGeometry { h, w, cin, kh, kw, cout };
        let (xd, kd, bd) = (self.value(x).data(), self.value(kernel).data(), self.value(bias).data());
        let mut out = Vec::with_capacity(b * h * w * cout);
        for _ in 0..b * h * w {
            out.extend_from_slice(bd);
        }
        for (img, o) in xd.chunks(geo.image_in()).zip(out.chunks_mut(geo.image_out())) {
            geo.forward(img, kd, o);
        }
        let needs = self.needs(x) || self.needs(kernel) || self.needs(bias);
        Ok(self.push(Tensor::from_parts(vec![b, h, w, cout], out), Op::Conv2d { x, kernel, bias }, needs))
    }

    /// Mean over one axis, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        ensure!(axis < sx.len() && sx.len() >= 2, "mean_axis {} out of range for {:?}", axis, sx);
        let outer: usize = sx[..axis].iter().product();
        let n = sx[axis];
        let inner: usize = sx[axis + 1..].iter().product();
        let xd = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let src = &xd[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        let inv = 1.0 / n as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let mut shape = sx;
        shape.remove(axis);
        let needs = self.needs(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MeanAxis { x, axis }, needs))
    }

    /// Applies a row normalizer along the last axis.
    pub fn normalize(&mut self, x: Var, norm: Arc<dyn RowNormalizer>) -> Var {
        let t = self.value(x);
        let d = *t.shape().last().unwrap();
        let mut out = vec![0.0; t.len()];
        for (src, dst) in t.data().chunks(d).zip(out.chunks_mut(d)) {
            norm.forward(src, dst);
        }
        let shape = t.shape().to_vec();
        let needs = self.needs(x);
        self.push(Tensor::from_parts(shape, out), Op::Normalize { x, norm }, needs)
    }

    pub fn sparsemax(&mut self, x: Var) -> Var {
        self.normalize(x, Arc::new(Sparsemax))
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        self.normalize(x, Arc::new(Softmax))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        ensure!(!inputs.is_empty(), "concat of nothing");
        let first = self.shape(inputs[0]).to_vec();
        ensure!(axis < first.len(), "concat axis {} out of range for {:?}", axis, first);
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            ensure!(
                s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b),
                "concat extents disagree: {:?} vs {:?}",
                s,
                first
            );
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let n = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * n..(o + 1) * n]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let needs = inputs.iter().any(|&v| self.needs(v));
        Ok(self.push(Tensor::from_parts(shape, out), Op::Concat { inputs: inputs.to_vec(), axis }, needs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::Reshape { x }, needs))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let mut seen = vec![false; sx.len()];
        ensure!(perm.len() == sx.len(), "permutation {:?} has wrong rank for {:?}", perm, sx);
        for &p in perm {
            ensure!(p < sx.len() && !seen[p], "invalid permutation {:?}", perm);
            seen[p] = true;
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for_each_permuted(&sx, perm, |o, s| out[o] = src[s]);
        let shape = perm.iter().map(|&p| sx[p]).collect();
        let needs = self.needs(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Permute { x, perm: perm.to_vec() }, needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Mean { x }, needs)
    }

    /// Mean binary cross-entropy over a batch of logits (`[B]` or `[B, 1]`),
    /// with positives weighted by `pos_weight`.
    pub fn bce_with_logits(&mut self, x: Var, targets: &[f64], pos_weight: f64) -> Result<Var> {
        let t = self.value(x);
        ensure!(t.len() == targets.len(), "bce: {} logits for {} targets", t.len(), targets.len());
        ensure!(targets.iter().all(|&y| y == 0.0 || y == 1.0), "bce targets must be 0 or 1");
        ensure!(pos_weight > 0.0 && pos_weight.is_finite(), "bce positive weight must be positive");
        let loss = t
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &y)| pos_weight * y * softplus(-z) + (1.0 - y) * softplus(z))
            .sum::<f64>()
            / targets.len() as f64;
        let needs = self.needs(x);
        Ok(self.push(Tensor::scalar(loss), Op::BceWithLogits { x, targets: targets.to_vec(), pos_weight }, needs))
    }

    /// Mean softmax cross-entropy over `[B, C]` logits.
    pub fn cross_entropy(&mut self, x: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        ensure!(s.len() == 2 && s[0] == targets.len(), "cross_entropy needs [B, C] logits for B targets, got {:?}", s);
        let c = s[1];
        ensure!(targets.iter().all(|&y| y < c), "cross_entropy target out of range for {} classes", c);
        let mut probs = vec![0.0; s[0] * c];
        let mut loss = 0.0;
        for (i, (row, p)) in self.value(x).data().chunks(c).zip(probs.chunks_mut(c)).enumerate() {
            Softmax.forward(row, p);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[targets[i]];
        }
        loss /= targets.len() as f64;
        let needs = self.needs(x);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { x, targets: targets.to_vec(), probs }, needs))
    }

    /// Inverted dropout via a constant mask; identity when `rate` is 0.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut impl Rng) -> Result<Var> {
        ensure!((0.0..1.0).contains(&rate), "dropout rate {} outside [0, 1)", rate);
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let shape = self.shape(x).to_vec();
        let mask = Tensor::from_fn(&shape, |_| if rng.random::<f64>() < rate { 0.0 } else { keep });
        let m = self.constant(mask);
        self.mul(x, m)
    }

    /// Reverse sweep from a scalar node. Gradients are kept for every node that
    /// depends on a leaf, so intermediate activations can be inspected too.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        ensure!(self.value(output).is_scalar(), "backward needs a scalar output, got {:?}", self.shape(output));
        let mut grads: Vec<Option<Vec<f64>>> = (0..=output.0).map(|_| None).collect();
        grads[output.0] = Some(vec![1.0]);
        for i in (0..=output.0).rev() {
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_ref() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backward_node(node, g, lower);
        }
        let shapes = self.nodes[..=output.0].iter().map(|n| n.value.shape().to_vec()).collect();
        let leaves = self.nodes[..=output.0]
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Leaf))
            .map(|(i, _)| Var(i))
            .collect();
        Ok(Gradients { grads, shapes, leaves })
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul { a, b } => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (k, n) = (vb.shape()[0], vb.shape()[1]);
                let m = va.len() / k;
                if let Some(ga) = slot(nodes, grads, *a) {
                    gemm(1.0, MatRef::new(g, m, n), MatRef::new(vb.data(), k, n).t(), 1.0, ga);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    gemm(1.0, MatRef::new(va.data(), m, k).t(), MatRef::new(g, m, n), 1.0, gb);
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (bt, m, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
                let n = node.value.shape()[2];
                if let Some(ga) = slot(nodes, grads, *a) {
                    for i in 0..bt {
                        let bs = &vb.data()[i * k * n..(i + 1) * k * n];
                        // dA = dC * B'^T, with B' = B or B^T
                        let bt_view = if *trans_b { MatRef::new(bs, n, k) } else { MatRef::new(bs, k, n).t() };
                        gemm(1.0, MatRef::new(&g[i * m * n..(i + 1) * m * n], m, n), bt_view, 1.0, &mut ga[i * m * k..(i + 1) * m * k]);
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for i in 0..bt {
                        let am = MatRef::new(&va.data()[i * m * k..(i + 1) * m * k], m, k);
                        let gm = MatRef::new(&g[i * m * n..(i + 1) * m * n], m, n);
                        let dst = &mut gb[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            gemm(1.0, gm.t(), am, 1.0, dst);
                        } else {
                            gemm(1.0, am.t(), gm, 1.0, dst);
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if let Some(gv) = slot(nodes, grads, v) {
                        gv.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::Mul { a, b } => {
                let (da, db) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((d, s), o) in ga.iter_mut().zip(g).zip(db) {
                        *d += s * o;
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for ((d, s), o) in gb.iter_mut().zip(g).zip(da) {
                        *d += s * o;
                    }
                }
            }
            Op::Scale { x, c } => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(d, s)| *d += c * s);
                }
            }
            Op::AddBroadcast { x, y, axes } => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
                if let Some(gy) = slot(nodes, grads, *y) {
                    for_each_broadcast_run(node.value.shape(), axes, |xo, yo, len| {
                        gy[yo..yo + len].iter_mut().zip(&g[xo..xo + len]).for_each(|(a, b)| *a += b);
                    });
                }
            }
            Op::Relu { x } => {
                let xd = nodes[x.0].value.data();
                if let Some(gx) = slot(nodes, grads, *x) {
                    for ((d, s), &v) in gx.iter_mut().zip(g).zip(xd) {
                        if v > 0.0 {
                            *d += s;
                        }
                    }
                }
            }
            Op::Gelu { x, tanh } => {
                let xd = nodes[x.0].value.data();
                if let Some(gx) = slot(nodes, grads, *x) {
                    for (((d, s), &v), &t) in gx.iter_mut().zip(g).zip(xd).zip(tanh) {
                        *d += s * gelu_grad(v, t);
                    }
                }
            }
            Op::Sigmoid { x } => {
                let od = node.value.data();
                if let Some(gx) = slot(nodes, grads, *x) {
                    for ((d, s), &p) in gx.iter_mut().zip(g).zip(od) {
                        *d += s * p * (1.0 - p);
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = nodes[gamma.0].value.len();
                let gd = nodes[gamma.0].value.data();
                if let Some(gg) = slot(nodes, grads, *gamma) {
                    for (row_g, row_h) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += row_g[j] * row_h[j];
                        }
                    }
                }
                if let Some(gb) = slot(nodes, grads, *beta) {
                    for row_g in g.chunks(d) {
                        for j in 0..d {
                            gb[j] += row_g[j];
                        }
                    }
                }
                if let Some(gx) = slot(nodes, grads, *x) {
                    let mut dh = vec![0.0; d];
                    for (r, (row_g, row_h)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let mut sum = 0.0;
                        let mut dot = 0.0;
                        for j in 0..d {
                            dh[j] = row_g[j] * gd[j];
                            sum += dh[j];
                            dot += dh[j] * row_h[j];
                        }
                        let scale = rstd[r] / d as f64;
                        for j in 0..d {
                            gx[r * d + j] += scale * (d as f64 * dh[j] - sum - row_h[j] * dot);
                        }
                    }
                }
            }
            Op::Conv2d { x, kernel, bias } => {
                let (vx, vk) = (&nodes[x.0].value, &nodes[kernel.0].value);
                let (sx, sk) = (vx.shape(), vk.shape());
                let geo = ConvGeometry { h: sx[1], w: sx[2], cin: sx[3], kh: sk[0], kw: sk[1], cout: sk[3] };
                if let Some(gb) = slot(nodes, grads, *bias) {
                    for row in g.chunks(geo.cout) {
                        gb.iter_mut().zip(row).for_each(|(d, s)| *d += s);
                    }
                }
                if let Some(gk) = slot(nodes, grads, *kernel) {
                    for (img, gi) in vx.data().chunks(geo.image_in()).zip(g.chunks(geo.image_out())) {
                        geo.kernel_grad(img, gi, gk);
                    }
                }
                if let Some(gx) = slot(nodes, grads, *x) {
                    for (dx, gi) in gx.chunks_mut(geo.image_in()).zip(g.chunks(geo.image_out())) {
                        geo.input_grad(vk.data(), gi, dx);
                    }
                }
            }
            Op::MeanAxis { x, axis } => {
                let sx = nodes[x.0].value.shape();
                let outer: usize = sx[..*axis].iter().product();
                let n = sx[*axis];
                let inner: usize = sx[axis + 1..].iter().product();
                let inv = 1.0 / n as f64;
                if let Some(gx) = slot(nodes, grads, *x) {
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for j in 0..n {
                            let dst = &mut gx[(o * n + j) * inner..(o * n + j + 1) * inner];
                            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s * inv);
                        }
                    }
                }
            }
            Op::Normalize { x, norm } => {
                let d = *node.value.shape().last().unwrap();
                if let Some(gx) = slot(nodes, grads, *x) {
                    for ((p, gr), gi) in node.value.data().chunks(d).zip(g.chunks(d)).zip(gx.chunks_mut(d)) {
                        norm.backward(p, gr, gi);
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let row = shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let n = nodes[v.0].value.shape()[*axis] * inner;
                    if let Some(gv) = slot(nodes, grads, v) {
                        for o in 0..outer {
                            let src = &g[o * row + offset..o * row + offset + n];
                            gv[o * n..(o + 1) * n].iter_mut().zip(src).for_each(|(d, s)| *d += s);
                        }
                    }
                    offset += n;
                }
            }
            Op::Reshape { x } => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
            }
            Op::Permute { x, perm } => {
                let sx = nodes[x.0].value.shape().to_vec();
                if let Some(gx) = slot(nodes, grads, *x) {
                    for_each_permuted(&sx, perm, |o, s| gx[s] += g[o]);
                }
            }
            Op::Sum { x } => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean { x } => {
                let n = nodes[x.0].value.len() as f64;
                if let Some(gx) = slot(nodes, grads, *x) {
                    gx.iter_mut().for_each(|d| *d += g[0] / n);
                }
            }
            Op::BceWithLogits { x, targets, pos_weight } => {
                let zd = nodes[x.0].value.data();
                let scale = g[0] / targets.len() as f64;
                if let Some(gx) = slot(nodes, grads, *x) {
                    for ((d, &z), &y) in gx.iter_mut().zip(zd).zip(targets) {
                        let s = sigmoid(z);
                        *d += scale * (pos_weight * y * (s - 1.0) + (1.0 - y) * s);
                    }
                }
            }
            Op::CrossEntropy { x, targets, probs } => {
                let c = nodes[x.0].value.shape()[1];
                let scale = g[0] / targets.len() as f64;
                if let Some(gx) = slot(nodes, grads, *x) {
                    for (i, &y) in targets.iter().enumerate() {
                        for j in 0..c {
                            let ind = if j == y { 1.0 } else { 0.0 };
                            gx[i * c + j] += scale * (probs[i * c + j] - ind);
                        }
                    }
                }
            }
        }
    }
}

/// Visits contiguous runs shared by a tensor of `shape` and a broadcast
/// operand on `axes`: `f(x_offset, y_offset, len)`.
fn for_each_broadcast_run(shape: &[usize], axes: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let last = shape.len() - 1;
    if axes.last() == Some(&last) {
        let len = shape[last];
        let lead = &shape[..last];
        if lead.is_empty() {
            f(0, 0, len);
            return;
        }
        let lead_axes: Vec<usize> = axes[..axes.len() - 1].to_vec();
        for (row, yrow) in broadcast_offsets(lead, &lead_axes).into_iter().enumerate() {
            f(row * len, yrow * len, len);
        }
    } else {
        for (xo, yo) in broadcast_offsets(shape, axes).into_iter().enumerate() {
            f(xo, yo, 1);
        }
    }
}

fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let n = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

/// Result of a reverse sweep.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    leaves: Vec<Var>,
}

impl Gradients {
    /// Gradient of the swept output with respect to `v`; zeros when `v` does
    /// not influence the output.
    pub fn get(&self, v: Var) -> Tensor {
        match self.grads.get(v.0) {
            Some(Some(g)) => Tensor::from_parts(self.shapes[v.0].clone(), g.clone()),
            Some(None) => Tensor::zeros(&self.shapes[v.0]),
            None => panic!("node {:?} was created after the swept output", v),
        }
    }

    pub fn leaves(&self) -> BTreeMap<Var, Tensor> {
        self.leaves.iter().map(|&v| (v, self.get(v))).collect()
    }
}

/// d(output)/d(leaf) for every leaf recorded before `output`.
pub fn reverse_grad(graph: &Graph, output: Var) -> Result<BTreeMap<Var, Tensor>> {
    if !graph.value(output).is_scalar() {
        return Err(Error::contract(format!("reverse_grad needs a scalar output, got {:?}", graph.shape(output))));
    }
    Ok(graph.backward(output)?.leaves())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_and_product_derivatives() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = reverse_grad(&g, y).unwrap();
        assert_eq!(grads[&x].item(), 6.0);

        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(2.0));
        let y = g.leaf(Tensor::scalar(5.0));
        let z = g.mul(x, y).unwrap();
        let grads = reverse_grad(&g, z).unwrap();
        assert_eq!((grads[&x].item(), grads[&y].item()), (5.0, 2.0));
    }

    #[test]
    fn unused_leaves_get_zero_gradients() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let unused = g.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let s = g.sum(x);
        let grads = reverse_grad(&g, s).unwrap();
        assert_eq!(grads[&unused].data(), &[0.0, 0.0, 0.0]);
        assert_eq!(grads[&x].data(), &[1.0, 1.0]);
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let y = g.relu(x);
        assert!(matches!(reverse_grad(&g, y), Err(Error::Contract(_))));
    }

    #[test]
    fn tape_is_topologically_ordered() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(1.0));
        let y = g.sigmoid(x);
        let z = g.add(x, y).unwrap();
        assert!(x < y && y < z);
        assert_eq!(g.op_tags(), vec!["leaf", "sigmoid", "add"]);
    }

    #[test]
    fn bce_matches_closed_forms() {
        let mut g = Graph::new();
        let z = g.leaf(Tensor::scalar(0.0));
        let l = g.bce_with_logits(z, &[1.0], 1.0).unwrap();
        assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);
        let grads = reverse_grad(&g, l).unwrap();
        assert!((grads[&z].item() + 0.5).abs() < 1e-15);

        let mut g = Graph::new();
        let z = g.leaf(Tensor::scalar(50.0));
        let l = g.bce_with_logits(z, &[1.0], 1.0).unwrap();
        assert!(g.value(l).item() < 1e-20);

        let mut g = Graph::new();
        let z = g.leaf(Tensor::scalar(0.3));
        assert!(matches!(g.bce_with_logits(z, &[2.0], 1.0), Err(Error::Contract(_))));
    }

    #[test]
    fn identical_graphs_are_bit_identical() {
        let run = || {
            let mut g = Graph::new();
            let x = g.leaf(Tensor::from_fn(&[3, 4], |i| (i as f64 * 0.37).sin()));
            let w = g.leaf(Tensor::from_fn(&[4, 2], |i| (i as f64 * 0.11).cos()));
            let y = g.matmul(x, w).unwrap();
            let y = g.gelu(y);
            let y = g.sparsemax(y);
            let s = g.sum(y);
            let s2 = g.mul(s, s).unwrap();
            let grads = reverse_grad(&g, s2).unwrap();
            (g.value(y).clone(), grads)
        };
        let (a, ga) = run();
        let (b, gb) = run();
        assert_eq!(a, b);
        assert_eq!(ga, gb);
    }
}

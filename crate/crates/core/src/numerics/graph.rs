//! Tape of dense fp64 operations with reverse-mode gradients.
//!
//! Every operation appends a node holding its forward value; [`Graph::backward`]
//! walks the tape from the root towards the leaves and returns the gradient of
//! the root with respect to every node that requires one. All reductions sum
//! in a fixed order so identical inputs give bit-identical gradients.

use super::sum::exact_sum;
use super::tensor::Tensor;
use crate::error::{bail, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRowBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    Relu(Var),
    Reglu(Var),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ChannelAffine {
        x: Var,
        gamma: Var,
        beta: Var,
        centre: Vec<f64>,
        scale: Vec<f64>,
    },
    GroupMean(Var, usize),
    Reshape(Var),
    ScaledGather {
        table: Var,
        index: Vec<usize>,
        scale: Vec<f64>,
    },
    ConcatRows(Var, Var),
    PairwiseSqDist(Var, Var),
    WeightedSum(Var, Vec<f64>),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Mse {
        pred: Var,
        targets: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        tokens: usize,
        heads: usize,
        probs: Vec<f64>,
        mask: Option<Vec<f64>>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` (if any) into `tensor`'s gradient buffer.
    pub fn accumulate_into(&self, v: Var, tensor: &mut Tensor) -> Result<()> {
        match self.get(v) {
            Some(g) => tensor.accumulate_grad(g),
            None if tensor.is_trainable() => tensor.accumulate_grad(&vec![0.0; tensor.numel()]),
            None => Ok(()),
        }
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Splits a shape into (rows, trailing width).
fn as_matrix(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (1, *n),
        [first, rest @ ..] => (*first, rest.iter().product()),
    }
}

pub(crate) fn mm(a: &[f64], b: &[f64], m: usize, n: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        let row = &mut out[i * p..(i + 1) * p];
        for r in 0..n {
            let av = a[i * n + r];
            let brow = &b[r * p..(r + 1) * p];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// aᵀ·g for a: [m, n], g: [m, p] → [n, p]
fn mm_at_b(a: &[f64], g: &[f64], m: usize, n: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * p];
    for i in 0..m {
        let grow = &g[i * p..(i + 1) * p];
        for r in 0..n {
            let av = a[i * n + r];
            let orow = &mut out[r * p..(r + 1) * p];
            for (o, gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    out
}

/// g·bᵀ for g: [m, p], b: [n, p] → [m, n]
fn mm_a_bt(g: &[f64], b: &[f64], m: usize, n: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let grow = &g[i * p..(i + 1) * p];
        for r in 0..n {
            let brow = &b[r * p..(r + 1) * p];
            let mut acc = 0.0;
            for (x, y) in grow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + r] = acc;
        }
    }
    out
}

fn add_into(slot: &mut Option<Vec<f64>>, contrib: Vec<f64>) {
    match slot {
        Some(buf) => buf.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
        None => *slot = Some(contrib),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies a tensor onto the tape; gradients flow to it when it is trainable.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.is_trainable())
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Var {
        assert_eq!(numel(&shape), data.len(), "constant shape/data mismatch");
        self.push(shape, data, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let node = &self.nodes[v.0];
        assert_eq!(node.value.len(), 1, "scalar() on non-scalar node");
        node.value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// `a: [m, n]` times `b: [n, p]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "matmul shapes {sa:?} x {sb:?}"
        );
        let (m, n, p) = (sa[0], sa[1], sb[1]);
        let value = mm(self.value(a), self.value(b), m, n, p);
        let rg = self.rg(a) || self.rg(b);
        self.push(vec![m, p], value, Op::MatMul(a, b), rg)
    }

    /// Adds a length-`n` bias to every row of `x: [m, n]`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Var {
        let (m, n) = as_matrix(self.shape(x));
        assert_eq!(self.value(bias).len(), n, "bias length");
        let b = self.value(bias);
        let mut value = self.value(x).to_vec();
        for row in value.chunks_mut(n) {
            row.iter_mut().zip(b).for_each(|(v, bv)| *v += bv);
        }
        let _ = m;
        let rg = self.rg(x) || self.rg(bias);
        let shape = self.shape(x).to_vec();
        self.push(shape, value, Op::AddRowBias(x, bias), rg)
    }

    /// `x·w + b` with `w: [in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row_bias(y, b)
    }

    fn zip_op(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "elementwise shapes");
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        self.push(shape, value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_op(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_op(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_op(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(shape, value, Op::Scale(x, c), rg)
    }

    /// Elementwise product with a constant buffer (dropout masks).
    pub fn mul_const(&mut self, x: Var, mask: Vec<f64>) -> Var {
        assert_eq!(mask.len(), self.value(x).len(), "mask length");
        let value = self.value(x).iter().zip(&mask).map(|(a, b)| a * b).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(shape, value, Op::MulConst(x, mask), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(shape, value, Op::Relu(x), rg)
    }

    /// Splits the last dimension into halves `(a, b)` and returns `a ⊙ relu(b)`.
    pub fn reglu(&mut self, x: Var) -> Var {
        let (m, w) = as_matrix(self.shape(x));
        assert!(w % 2 == 0, "reglu needs an even last dimension, got {w}");
        let h = w / 2;
        let xv = self.value(x);
        let mut value = Vec::with_capacity(m * h);
        for row in xv.chunks(w) {
            let (a, b) = row.split_at(h);
            value.extend(a.iter().zip(b).map(|(a, b)| a * b.max(0.0)));
        }
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().unwrap() = h;
        if shape.len() == 1 {
            shape = vec![h];
        }
        let rg = self.rg(x);
        self.push(shape, value, Op::Reglu(x), rg)
    }

    /// Softmax over the last dimension with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let (_, w) = as_matrix(self.shape(x));
        let mut value = self.value(x).to_vec();
        for row in value.chunks_mut(w) {
            softmax_in_place(row);
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(shape, value, Op::Softmax(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(vec![1], vec![s], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(x);
        self.push(vec![1], vec![s], Op::Mean(x), rg)
    }

    /// Normalizes each row of `x: [m, n]` then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (m, n) = as_matrix(self.shape(x));
        assert_eq!(self.value(gamma).len(), n);
        assert_eq!(self.value(beta).len(), n);
        let xv = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut value = vec![0.0; m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let h = (row[j] - mu) * is;
                xhat[i * n + j] = h;
                value[i * n + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let shape = self.shape(x).to_vec();
        self.push(
            shape,
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Batch normalization over the rows of `x: [m, n]` using the batch's own
    /// statistics. Returns the output plus the batch mean and population variance.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> (Var, Vec<f64>, Vec<f64>) {
        let (m, n) = as_matrix(self.shape(x));
        let xv = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut mean = vec![0.0; n];
        for row in xv.chunks(n) {
            mean.iter_mut().zip(row).for_each(|(a, v)| *a += v);
        }
        mean.iter_mut().for_each(|a| *a /= m as f64);
        let mut var = vec![0.0; n];
        for row in xv.chunks(n) {
            for j in 0..n {
                let d = row[j] - mean[j];
                var[j] += d * d;
            }
        }
        var.iter_mut().for_each(|a| *a /= m as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; m * n];
        let mut value = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let h = (xv[i * n + j] - mean[j]) * inv_std[j];
                xhat[i * n + j] = h;
                value[i * n + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let shape = self.shape(x).to_vec();
        let out = self.push(
            shape,
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        );
        (out, mean, var)
    }

    /// `gamma ⊙ (x − centre) ⊙ scale + beta` per column with constant
    /// `centre`/`scale` (batch norm with running statistics).
    pub fn channel_affine(&mut self, x: Var, gamma: Var, beta: Var, centre: Vec<f64>, scale: Vec<f64>) -> Var {
        let (_, n) = as_matrix(self.shape(x));
        assert_eq!(centre.len(), n);
        assert_eq!(scale.len(), n);
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut value = self.value(x).to_vec();
        for row in value.chunks_mut(n) {
            for j in 0..n {
                row[j] = g[j] * (row[j] - centre[j]) * scale[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let shape = self.shape(x).to_vec();
        self.push(
            shape,
            value,
            Op::ChannelAffine {
                x,
                gamma,
                beta,
                centre,
                scale,
            },
            rg,
        )
    }

    /// Averages consecutive groups of `group` rows: `[b·group, k] → [b, k]`.
    /// Each column mean is the correctly rounded sum divided by `group`, so
    /// the result does not depend on the order of rows inside a group.
    pub fn group_mean(&mut self, x: Var, group: usize) -> Var {
        let (m, k) = as_matrix(self.shape(x));
        assert!(
            group > 0 && m % group == 0,
            "group_mean: {m} rows not divisible by {group}"
        );
        let b = m / group;
        let xv = self.value(x);
        let mut value = vec![0.0; b * k];
        for bi in 0..b {
            for c in 0..k {
                let s = exact_sum((0..group).map(|j| xv[(bi * group + j) * k + c]));
                value[bi * k + c] = s / group as f64;
            }
        }
        let rg = self.rg(x);
        self.push(vec![b, k], value, Op::GroupMean(x, group), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        assert_eq!(numel(&shape), self.value(x).len(), "reshape size");
        let value = self.value(x).to_vec();
        let rg = self.rg(x);
        self.push(shape, value, Op::Reshape(x), rg)
    }

    /// Row `r` of the output is `scale[r] · table[index[r]]`.
    pub fn scaled_gather(&mut self, table: Var, index: Vec<usize>, scale: Vec<f64>) -> Var {
        assert_eq!(index.len(), scale.len());
        let (rows, k) = as_matrix(self.shape(table));
        let tv = self.value(table);
        let mut value = Vec::with_capacity(index.len() * k);
        for (&i, &s) in index.iter().zip(&scale) {
            assert!(i < rows, "gather index {i} out of {rows} rows");
            value.extend(tv[i * k..(i + 1) * k].iter().map(|v| v * s));
        }
        let rg = self.rg(table);
        let n = index.len();
        self.push(vec![n, k], value, Op::ScaledGather { table, index, scale }, rg)
    }

    /// Stacks `a: [m, k]` on top of `b: [n, k]`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let (ma, ka) = as_matrix(self.shape(a));
        let (mb, kb) = as_matrix(self.shape(b));
        assert_eq!(ka, kb, "concat_rows widths");
        let mut value = self.value(a).to_vec();
        value.extend_from_slice(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(vec![ma + mb, ka], value, Op::ConcatRows(a, b), rg)
    }

    /// `D[i, c] = ‖x_i − y_c‖²` for `x: [n, k]`, `y: [c, k]`.
    pub fn pairwise_sq_dist(&mut self, x: Var, y: Var) -> Var {
        let (n, k) = as_matrix(self.shape(x));
        let (c, ky) = as_matrix(self.shape(y));
        assert_eq!(k, ky, "pairwise_sq_dist widths");
        let (xv, yv) = (self.value(x), self.value(y));
        let mut value = vec![0.0; n * c];
        for i in 0..n {
            for j in 0..c {
                let mut acc = 0.0;
                for t in 0..k {
                    let d = xv[i * k + t] - yv[j * k + t];
                    acc += d * d;
                }
                value[i * c + j] = acc;
            }
        }
        let rg = self.rg(x) || self.rg(y);
        self.push(vec![n, c], value, Op::PairwiseSqDist(x, y), rg)
    }

    /// Scalar `Σ w ⊙ x` with constant weights.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<f64>) -> Var {
        assert_eq!(weights.len(), self.value(x).len(), "weighted_sum length");
        let s = self.value(x).iter().zip(&weights).map(|(a, b)| a * b).sum();
        let rg = self.rg(x);
        self.push(vec![1], vec![s], Op::WeightedSum(x, weights), rg)
    }

    /// Mean softmax cross-entropy of `logits: [n, c]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let (n, c) = as_matrix(self.shape(logits));
        assert_eq!(labels.len(), n, "cross_entropy label count");
        let lv = self.value(logits);
        let mut probs = lv.to_vec();
        let mut total = 0.0;
        for (i, row) in probs.chunks_mut(c).enumerate() {
            let y = labels[i];
            assert!(y < c, "label {y} out of {c} classes");
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - lv[i * c + y];
            softmax_in_place(row);
        }
        let rg = self.rg(logits);
        self.push(
            vec![1],
            vec![total / n as f64],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Mean squared error between every element of `pred` and `targets`.
    pub fn mse(&mut self, pred: Var, targets: &[f64]) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.len(), targets.len(), "mse length");
        let s = pv.iter().zip(targets).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pv.len() as f64;
        let rg = self.rg(pred);
        self.push(
            vec![1],
            vec![s],
            Op::Mse {
                pred,
                targets: targets.to_vec(),
            },
            rg,
        )
    }

    /// Multi-head scaled dot-product attention over `batch` sets of `tokens`
    /// rows. `q`, `k`, `v` are `[batch·tokens, width]`; head `h` uses columns
    /// `h·width/heads ..`. `mask` (shape `[batch, heads, tokens, tokens]`)
    /// multiplies the attention weights after the softmax.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        tokens: usize,
        heads: usize,
        mask: Option<Vec<f64>>,
    ) -> Var {
        let (m, width) = as_matrix(self.shape(q));
        assert_eq!(m, batch * tokens, "attention rows");
        assert_eq!(self.shape(k), self.shape(q));
        assert_eq!(self.shape(v), self.shape(q));
        assert!(
            heads > 0 && width % heads == 0,
            "width {width} not divisible by {heads} heads"
        );
        if let Some(mask) = &mask {
            assert_eq!(mask.len(), batch * heads * tokens * tokens, "attention mask size");
        }
        let dh = width / heads;
        let inv = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![0.0; batch * heads * tokens * tokens];
        let mut out = vec![0.0; m * width];
        for b in 0..batch {
            for h in 0..heads {
                let base = (b * heads + h) * tokens * tokens;
                for i in 0..tokens {
                    let qi = &qv[(b * tokens + i) * width + h * dh..][..dh];
                    let row = &mut probs[base + i * tokens..base + (i + 1) * tokens];
                    for j in 0..tokens {
                        let kj = &kv[(b * tokens + j) * width + h * dh..][..dh];
                        row[j] = qi.iter().zip(kj).map(|(a, c)| a * c).sum::<f64>() * inv;
                    }
                    softmax_in_place(row);
                    let orow = &mut out[(b * tokens + i) * width + h * dh..][..dh];
                    for j in 0..tokens {
                        let w = match &mask {
                            Some(mk) => row[j] * mk[base + i * tokens + j],
                            None => row[j],
                        };
                        let vj = &vv[(b * tokens + j) * width + h * dh..][..dh];
                        orow.iter_mut().zip(vj).for_each(|(o, x)| *o += w * x);
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(
            vec![m, width],
            out,
            Op::Attention {
                q,
                k,
                v,
                batch,
                tokens,
                heads,
                probs,
                mask,
            },
            rg,
        )
    }

    /// Post-softmax attention weights recorded by an [`Graph::attention`] node,
    /// laid out `[batch, heads, tokens, tokens]`.
    pub fn attention_weights(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let node = &self.nodes[root.0];
        if node.value.len() != 1 {
            bail!(Contract, "backward root must be a scalar, got shape {:?}", node.shape);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if !n.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let mut send = |v: Var, contrib: Vec<f64>| {
            if self.nodes[v.0].requires_grad {
                add_into(&mut grads[v.0], contrib);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, n, p) = (sa[0], sa[1], sb[1]);
                if self.rg(*a) {
                    send(*a, mm_a_bt(g, self.value(*b), m, n, p));
                }
                if self.rg(*b) {
                    send(*b, mm_at_b(self.value(*a), g, m, n, p));
                }
            }
            Op::AddRowBias(x, bias) => {
                let n = self.value(*bias).len();
                if self.rg(*bias) {
                    let mut gb = vec![0.0; n];
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    send(*bias, gb);
                }
                send(*x, g.to_vec());
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    send(*a, g.iter().zip(bv).map(|(x, y)| x * y).collect());
                }
                if self.rg(*b) {
                    send(*b, g.iter().zip(av).map(|(x, y)| x * y).collect());
                }
            }
            Op::Scale(x, c) => send(*x, g.iter().map(|v| v * c).collect()),
            Op::MulConst(x, mask) => send(*x, g.iter().zip(mask).map(|(a, b)| a * b).collect()),
            Op::Relu(x) => {
                let xv = self.value(*x);
                send(
                    *x,
                    g.iter()
                        .zip(xv)
                        .map(|(gv, v)| if *v > 0.0 { *gv } else { 0.0 })
                        .collect(),
                );
            }
            Op::Reglu(x) => {
                let xv = self.value(*x);
                let (_, w) = as_matrix(self.shape(*x));
                let h = w / 2;
                let mut gx = vec![0.0; xv.len()];
                for (r, (xrow, grow)) in xv.chunks(w).zip(g.chunks(h)).enumerate() {
                    let out = &mut gx[r * w..(r + 1) * w];
                    for j in 0..h {
                        let (a, b) = (xrow[j], xrow[h + j]);
                        out[j] = grow[j] * b.max(0.0);
                        out[h + j] = if b > 0.0 { grow[j] * a } else { 0.0 };
                    }
                }
                send(*x, gx);
            }
            Op::Softmax(x) => {
                let (_, w) = as_matrix(&node.shape);
                let mut gx = vec![0.0; g.len()];
                for ((prow, grow), out) in node.value.chunks(w).zip(g.chunks(w)).zip(gx.chunks_mut(w)) {
                    let dot: f64 = prow.iter().zip(grow).map(|(p, q)| p * q).sum();
                    for j in 0..w {
                        out[j] = prow[j] * (grow[j] - dot);
                    }
                }
                send(*x, gx);
            }
            Op::Sum(x) => send(*x, vec![g[0]; self.value(*x).len()]),
            Op::Mean(x) => {
                let n = self.value(*x).len();
                send(*x, vec![g[0] / n as f64; n]);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = self.value(*gamma).len();
                let gv = self.value(*gamma);
                let m = xhat.len() / n;
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    let hrow = &xhat[i * n..(i + 1) * n];
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for j in 0..n {
                        dgamma[j] += grow[j] * hrow[j];
                        dbeta[j] += grow[j];
                        let dh = grow[j] * gv[j];
                        s1 += dh;
                        s2 += dh * hrow[j];
                    }
                    let scale = inv_std[i] / n as f64;
                    for j in 0..n {
                        let dh = grow[j] * gv[j];
                        dx[i * n + j] = scale * (n as f64 * dh - s1 - hrow[j] * s2);
                    }
                }
                send(*x, dx);
                send(*gamma, dgamma);
                send(*beta, dbeta);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = inv_std.len();
                let m = xhat.len() / n;
                let gv = self.value(*gamma);
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                let mut s1 = vec![0.0; n];
                let mut s2 = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        let gij = g[i * n + j];
                        let h = xhat[i * n + j];
                        dgamma[j] += gij * h;
                        dbeta[j] += gij;
                        let dh = gij * gv[j];
                        s1[j] += dh;
                        s2[j] += dh * h;
                    }
                }
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        let dh = g[i * n + j] * gv[j];
                        dx[i * n + j] = inv_std[j] / m as f64 * (m as f64 * dh - s1[j] - xhat[i * n + j] * s2[j]);
                    }
                }
                send(*x, dx);
                send(*gamma, dgamma);
                send(*beta, dbeta);
            }
            Op::ChannelAffine {
                x,
                gamma,
                beta,
                centre,
                scale,
            } => {
                let n = centre.len();
                let xv = self.value(*x);
                let gv = self.value(*gamma);
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                let mut dx = vec![0.0; xv.len()];
                for (r, grow) in g.chunks(n).enumerate() {
                    for j in 0..n {
                        let idx = r * n + j;
                        dgamma[j] += grow[j] * (xv[idx] - centre[j]) * scale[j];
                        dbeta[j] += grow[j];
                        dx[idx] = grow[j] * gv[j] * scale[j];
                    }
                }
                send(*x, dx);
                send(*gamma, dgamma);
                send(*beta, dbeta);
            }
            Op::GroupMean(x, group) => {
                let (m, k) = as_matrix(self.shape(*x));
                let mut dx = vec![0.0; m * k];
                for r in 0..m {
                    let b = r / group;
                    for c in 0..k {
                        dx[r * k + c] = g[b * k + c] / *group as f64;
                    }
                }
                send(*x, dx);
            }
            Op::Reshape(x) => send(*x, g.to_vec()),
            Op::ScaledGather { table, index, scale } => {
                let (rows, k) = as_matrix(self.shape(*table));
                let mut dt = vec![0.0; rows * k];
                for (r, (&i, &s)) in index.iter().zip(scale).enumerate() {
                    let src = &g[r * k..(r + 1) * k];
                    dt[i * k..(i + 1) * k]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(a, b)| *a += s * b);
                }
                send(*table, dt);
            }
            Op::ConcatRows(a, b) => {
                let na = self.value(*a).len();
                send(*a, g[..na].to_vec());
                send(*b, g[na..].to_vec());
            }
            Op::PairwiseSqDist(x, y) => {
                let (n, k) = as_matrix(self.shape(*x));
                let (c, _) = as_matrix(self.shape(*y));
                let (xv, yv) = (self.value(*x), self.value(*y));
                let mut dx = vec![0.0; n * k];
                let mut dy = vec![0.0; c * k];
                for i in 0..n {
                    for j in 0..c {
                        let gij = 2.0 * g[i * c + j];
                        if gij == 0.0 {
                            continue;
                        }
                        for t in 0..k {
                            let d = gij * (xv[i * k + t] - yv[j * k + t]);
                            dx[i * k + t] += d;
                            dy[j * k + t] -= d;
                        }
                    }
                }
                send(*x, dx);
                send(*y, dy);
            }
            Op::WeightedSum(x, w) => send(*x, w.iter().map(|v| v * g[0]).collect()),
            Op::CrossEntropy { logits, labels, probs } => {
                let n = labels.len();
                let c = probs.len() / n;
                let mut d = probs.clone();
                for (i, &y) in labels.iter().enumerate() {
                    d[i * c + y] -= 1.0;
                }
                let s = g[0] / n as f64;
                d.iter_mut().for_each(|v| *v *= s);
                send(*logits, d);
            }
            Op::Mse { pred, targets } => {
                let pv = self.value(*pred);
                let s = 2.0 * g[0] / pv.len() as f64;
                send(*pred, pv.iter().zip(targets).map(|(p, t)| s * (p - t)).collect());
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                tokens,
                heads,
                probs,
                mask,
            } => {
                let (batch, tokens, heads) = (*batch, *tokens, *heads);
                let (m, width) = as_matrix(self.shape(*q));
                let dh = width / heads;
                let inv = 1.0 / (dh as f64).sqrt();
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let mut dq = vec![0.0; m * width];
                let mut dk = vec![0.0; m * width];
                let mut dv = vec![0.0; m * width];
                let mut dp = vec![0.0; tokens];
                for b in 0..batch {
                    for h in 0..heads {
                        let base = (b * heads + h) * tokens * tokens;
                        for i in 0..tokens {
                            let gi = &g[(b * tokens + i) * width + h * dh..][..dh];
                            let prow = &probs[base + i * tokens..base + (i + 1) * tokens];
                            // d(weights) and dV
                            for j in 0..tokens {
                                let vj = &vv[(b * tokens + j) * width + h * dh..][..dh];
                                let mk = mask.as_ref().map_or(1.0, |mk| mk[base + i * tokens + j]);
                                dp[j] = gi.iter().zip(vj).map(|(a, c)| a * c).sum::<f64>() * mk;
                                let w = prow[j] * mk;
                                let dvj = &mut dv[(b * tokens + j) * width + h * dh..][..dh];
                                dvj.iter_mut().zip(gi).for_each(|(o, x)| *o += w * x);
                            }
                            let dot: f64 = prow.iter().zip(&dp).map(|(p, d)| p * d).sum();
                            let qi = &qv[(b * tokens + i) * width + h * dh..][..dh];
                            for j in 0..tokens {
                                let ds = prow[j] * (dp[j] - dot) * inv;
                                if ds == 0.0 {
                                    continue;
                                }
                                let kj = &kv[(b * tokens + j) * width + h * dh..][..dh];
                                let dqi = &mut dq[(b * tokens + i) * width + h * dh..][..dh];
                                dqi.iter_mut().zip(kj).for_each(|(o, x)| *o += ds * x);
                                let dkj = &mut dk[(b * tokens + j) * width + h * dh..][..dh];
                                dkj.iter_mut().zip(qi).for_each(|(o, x)| *o += ds * x);
                            }
                        }
                    }
                }
                send(*q, dq);
                send(*k, dk);
                send(*v, dv);
            }
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

/// Runs a backward pass from `root` and adds the resulting gradients into the
/// tensors bound to each leaf. Calling it twice without clearing gradients
/// doubles them.
pub fn forward_backward(graph: &Graph, root: Var, bindings: &mut [(Var, &mut Tensor)]) -> Result<f64> {
    let grads = graph.backward(root)?;
    for (var, tensor) in bindings.iter_mut() {
        grads.accumulate_into(*var, tensor)?;
    }
    Ok(graph.scalar(root))
}

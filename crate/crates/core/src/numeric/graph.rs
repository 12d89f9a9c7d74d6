//! Eager computation graph with reverse-mode differentiation.
//!
//! Every operation evaluates immediately and appends a node to the tape. The
//! tape is rebuilt for each forward pass, so control flow (such as adaptive
//! halting) may depend on intermediate values.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::{gemm, split_axis};
use super::{NumericError, ParamId, ParamStore, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul {
        x: Var,
        w: Var,
    },
    BatchMatMul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    AddScalar {
        x: Var,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Transpose {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Relu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        axis: usize,
        inv_std: Vec<f64>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    SumAxis {
        x: Var,
        axis: usize,
    },
    MaxAxis {
        x: Var,
        axis: usize,
        argmax: Vec<usize>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    PositionalEmbed {
        values: Var,
        table: Var,
    },
    Mse {
        pred: Var,
        target: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        weights: Vec<f64>,
        probs: Vec<f64>,
        norm: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of evaluated operations.
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    training: bool,
    rng: ChaCha8Rng,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient with respect to `var`; zeros are reported as `None`.
    pub fn wrt(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Adds parameter gradients into the store's gradient buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(id, var) in &self.params {
            if let Some(g) = self.wrt(var) {
                let buf = store.get_mut(id).grad.data_mut();
                for (b, v) in buf.iter_mut().zip(g) {
                    *b += v;
                }
            }
        }
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> NumericError {
    NumericError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn is_suffix(full: &[usize], suffix: &[usize]) -> bool {
    suffix.len() <= full.len() && full[full.len() - suffix.len()..] == *suffix
}

impl Graph {
    /// A graph in evaluation mode: dropout is the identity.
    pub fn eval() -> Self {
        Self::new(false, 0)
    }

    pub fn new(training: bool, seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            training,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A value that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that tracks gradients (used for inputs under test).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Brings a stored parameter onto the tape; repeated calls reuse one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).value.clone(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    /// `x[..., k] @ w[k, n] -> [..., n]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var, NumericError> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.last() != Some(&ws[0]) {
            return Err(mismatch("matmul", &xs, &ws));
        }
        let (k, n) = (ws[0], ws[1]);
        let m = self.value(x).len() / k;
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(x).data(),
            (k as isize, 1),
            self.value(w).data(),
            (n as isize, 1),
            &mut out,
            false,
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul { x, w }, rg))
    }

    /// Batched product `a[B, m, k] @ b[B, k, n] -> [B, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(mismatch("bmm", &sa, &sb));
        }
        let (bsz, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bsz * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..bsz {
            gemm(
                m,
                k,
                n,
                &ad[i * m * k..],
                (k as isize, 1),
                &bd[i * k * n..],
                (n as isize, 1),
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![bsz, m, n], out)?, Op::BatchMatMul { a, b }, rg))
    }

    fn broadcast_binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, NumericError> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if !is_suffix(sa, sb) {
            return Err(mismatch(name, sa, sb));
        }
        let bd = self.value(b).data();
        let blen = bd.len();
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % blen]))
            .collect();
        Tensor::new(sa.to_vec(), out)
    }

    /// Elementwise sum; `b` may broadcast over leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let t = self.broadcast_binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add { a, b }, rg))
    }

    /// Elementwise difference; `b` may broadcast over leading axes of `a`.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let t = self.broadcast_binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub { a, b }, rg))
    }

    /// Elementwise product; `b` may broadcast over leading axes of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let t = self.broadcast_binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let t = self.value(x).map(|v| v * factor);
        let rg = self.rg(x);
        self.push(t, Op::Scale { x, factor }, rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x).map(|v| v + c);
        let rg = self.rg(x);
        self.push(t, Op::AddScalar { x }, rg)
    }

    /// Joins tensors that agree on every axis except `axis`.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, NumericError> {
        let first = inputs.first().ok_or(NumericError::EmptyInput("concat"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(NumericError::InvalidAxis {
                op: "concat",
                axis,
                rank: base.len(),
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(mismatch("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Stacks equal-shaped tensors along a new axis at position `axis`.
    pub fn stack(&mut self, inputs: &[Var], axis: usize) -> Result<Var, NumericError> {
        let first = inputs.first().ok_or(NumericError::EmptyInput("stack"))?;
        let base = self.shape(*first).to_vec();
        if axis > base.len() {
            return Err(NumericError::InvalidAxis {
                op: "stack",
                axis,
                rank: base.len(),
            });
        }
        let mut expanded = base.clone();
        expanded.insert(axis, 1);
        let reshaped = inputs
            .iter()
            .map(|&v| self.reshape(v, expanded.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        self.concat(&reshaped, axis)
    }

    /// Contiguous range `[start, start + len)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var, NumericError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(NumericError::InvalidAxis {
                op: "slice",
                axis,
                rank: shape.len(),
            });
        }
        if len == 0 || start + len > shape[axis] {
            return Err(NumericError::IndexOutOfRange {
                op: "slice",
                index: start + len,
                bound: shape[axis],
            });
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            out.extend_from_slice(&data[base..base + len * inner]);
        }
        let mut s = shape;
        s[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(s, out)?, Op::Slice { x, axis, start }, rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var, NumericError> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(NumericError::InvalidAxis {
                op: "transpose",
                axis: 1,
                rank: shape.len(),
            });
        }
        let r = shape.len();
        let (m, n) = (shape[r - 2], shape[r - 1]);
        let out = transpose_last(self.value(x).data(), m, n);
        let mut s = shape;
        s.swap(r - 2, r - 1);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(s, out)?, Op::Transpose { x }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, NumericError> {
        let t = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape { x }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(t, Op::Relu { x }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(t, Op::Sigmoid { x }, rg)
    }

    /// Numerically stable softmax along `axis`. Entries of `-inf` receive zero mass
    /// as long as each slice holds at least one finite entry.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, NumericError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(NumericError::InvalidAxis {
                op: "softmax",
                axis,
                rank: shape.len(),
            });
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let data = self.value(x).data();
        let mut out = vec![0.0; data.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| o * n * inner + j * inner + i;
                let mx = (0..n).map(|j| data[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..n {
                    let e = (data[idx(j)] - mx).exp();
                    out[idx(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    out[idx(j)] /= total;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x, axis }, rg))
    }

    /// Normalizes each slice along `axis` to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var, axis: usize, eps: f64) -> Result<Var, NumericError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(NumericError::InvalidAxis {
                op: "layer_norm",
                axis,
                rank: shape.len(),
            });
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let data = self.value(x).data();
        let mut out = vec![0.0; data.len()];
        let mut inv_std = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| o * n * inner + j * inner + i;
                let mean = (0..n).map(|j| data[idx(j)]).sum::<f64>() / n as f64;
                let var = (0..n).map(|j| (data[idx(j)] - mean).powi(2)).sum::<f64>() / n as f64;
                let s = 1.0 / (var + eps).sqrt();
                for j in 0..n {
                    out[idx(j)] = (data[idx(j)] - mean) * s;
                }
                inv_std.push(s);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::LayerNorm { x, axis, inv_std }, rg))
    }

    /// Inverted dropout. The identity outside training mode or when `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Var {
        if !self.training || rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if self.rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let data: Vec<f64> = self.value(x).data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::Dropout { x, mask }, rg)
    }

    /// Sum of every element, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean { x }, rg)
    }

    /// Sum along `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var, NumericError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape.len() < 2 {
            return Err(NumericError::InvalidAxis {
                op: "sum_axis",
                axis,
                rank: shape.len(),
            });
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let data = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                for i in 0..inner {
                    out[o * inner + i] += data[o * n * inner + j * inner + i];
                }
            }
        }
        let mut s = shape;
        s.remove(axis);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(s, out)?, Op::SumAxis { x, axis }, rg))
    }

    /// Mean along `axis`, removing it.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var, NumericError> {
        let n = *self.shape(x).get(axis).ok_or(NumericError::InvalidAxis {
            op: "mean_axis",
            axis,
            rank: self.shape(x).len(),
        })?;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    /// Maximum along `axis`, removing it. Ties resolve to the lowest index, which
    /// is also where the gradient is routed.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var, NumericError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape.len() < 2 {
            return Err(NumericError::InvalidAxis {
                op: "max_axis",
                axis,
                rank: shape.len(),
            });
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let data = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                let mut best_v = data[o * n * inner + i];
                for j in 1..n {
                    let v = data[o * n * inner + j * inner + i];
                    if v > best_v {
                        best_v = v;
                        best = j;
                    }
                }
                out[o * inner + i] = best_v;
                argmax[o * inner + i] = best;
            }
        }
        let mut s = shape;
        s.remove(axis);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(s, out)?, Op::MaxAxis { x, axis, argmax }, rg))
    }

    /// Row lookup `table[ids[i], :]` into an `[ids.len(), d]` matrix.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumericError> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(mismatch("gather", &shape, &[ids.len()]));
        }
        if ids.is_empty() {
            return Err(NumericError::EmptyInput("gather"));
        }
        let (rows, d) = (shape[0], shape[1]);
        let data = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(NumericError::IndexOutOfRange {
                    op: "gather",
                    index: id,
                    bound: rows,
                });
            }
            out.extend_from_slice(&data[id * d..(id + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// `values[B, J]` scaling per-position rows `table[J, d]` into `[B, J, d]`.
    pub fn positional_embed(&mut self, values: Var, table: Var) -> Result<Var, NumericError> {
        let sv = self.shape(values).to_vec();
        let st = self.shape(table).to_vec();
        if sv.len() != 2 || st.len() != 2 || sv[1] != st[0] {
            return Err(mismatch("positional_embed", &sv, &st));
        }
        let (b, j, d) = (sv[0], sv[1], st[1]);
        let v = self.value(values).data();
        let m = self.value(table).data();
        let mut out = vec![0.0; b * j * d];
        for bi in 0..b {
            for ji in 0..j {
                let s = v[bi * j + ji];
                let row = &m[ji * d..(ji + 1) * d];
                let dst = &mut out[(bi * j + ji) * d..(bi * j + ji + 1) * d];
                for (o, r) in dst.iter_mut().zip(row) {
                    *o = s * r;
                }
            }
        }
        let rg = self.rg(values) || self.rg(table);
        Ok(self.push(
            Tensor::new(vec![b, j, d], out)?,
            Op::PositionalEmbed { values, table },
            rg,
        ))
    }

    /// Mean squared error against a constant target of identical shape.
    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Result<Var, NumericError> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(mismatch("mse", p.shape(), target.shape()));
        }
        let n = p.len() as f64;
        let loss = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / n;
        let rg = self.rg(pred);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Mse {
                pred,
                target: target.data().to_vec(),
            },
            rg,
        ))
    }

    /// Weighted softmax cross-entropy over `logits[B, C]`.
    ///
    /// Rows whose target is `None` are skipped. The result is
    /// `sum_b w_b * -ln p_b[y_b] / sum_b w_b`, or zero when no row carries weight.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[Option<usize>],
        weights: &[f64],
    ) -> Result<Var, NumericError> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() || targets.len() != weights.len() {
            return Err(mismatch("cross_entropy", &shape, &[targets.len(), weights.len()]));
        }
        let (b, c) = (shape[0], shape[1]);
        let data = self.value(logits).data();
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        let mut norm = 0.0;
        for i in 0..b {
            let row = &data[i * c..(i + 1) * c];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
            if let Some(y) = targets[i] {
                if y >= c {
                    return Err(NumericError::IndexOutOfRange {
                        op: "cross_entropy",
                        index: y,
                        bound: c,
                    });
                }
                loss += weights[i] * (lse - row[y]);
                norm += weights[i];
            }
        }
        let value = if norm > 0.0 { loss / norm } else { 0.0 };
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(value),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
                norm,
            },
            rg,
        ))
    }

    /// Reverse-mode sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericError> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(NumericError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let params = self.params.iter().map(|(&id, &v)| (id, v)).collect();
        Ok(Gradients { grads, params })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul { x, w } => {
                let ws = val(*w).shape();
                let (k, n) = (ws[0], ws[1]);
                let m = val(*x).len() / k;
                if rg(*x) {
                    let buf = slot(grads, *x, m * k);
                    // dx = g @ w^T
                    gemm(m, n, k, g, (n as isize, 1), val(*w).data(), (1, n as isize), buf, true);
                }
                if rg(*w) {
                    let buf = slot(grads, *w, k * n);
                    // dw = x^T @ g
                    gemm(k, m, n, val(*x).data(), (1, k as isize), g, (n as isize, 1), buf, true);
                }
            }
            Op::BatchMatMul { a, b } => {
                let sa = val(*a).shape();
                let sb = val(*b).shape();
                let (bsz, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                if rg(*a) {
                    let bd = val(*b).data();
                    let buf = slot(grads, *a, bsz * m * k);
                    for i in 0..bsz {
                        gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..],
                            (n as isize, 1),
                            &bd[i * k * n..],
                            (1, n as isize),
                            &mut buf[i * m * k..(i + 1) * m * k],
                            true,
                        );
                    }
                }
                if rg(*b) {
                    let ad = val(*a).data();
                    let buf = slot(grads, *b, bsz * k * n);
                    for i in 0..bsz {
                        gemm(
                            k,
                            m,
                            n,
                            &ad[i * m * k..],
                            (1, k as isize),
                            &g[i * m * n..],
                            (n as isize, 1),
                            &mut buf[i * k * n..(i + 1) * k * n],
                            true,
                        );
                    }
                }
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let sign = if matches!(node.op, Op::Sub { .. }) { -1.0 } else { 1.0 };
                if rg(*a) {
                    let buf = slot(grads, *a, g.len());
                    buf.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
                if rg(*b) {
                    let blen = val(*b).len();
                    let buf = slot(grads, *b, blen);
                    for (i, s) in g.iter().enumerate() {
                        buf[i % blen] += sign * s;
                    }
                }
            }
            Op::Mul { a, b } => {
                let ad = val(*a).data();
                let bd = val(*b).data();
                let blen = bd.len();
                if rg(*a) {
                    let buf = slot(grads, *a, g.len());
                    for (i, s) in g.iter().enumerate() {
                        buf[i] += s * bd[i % blen];
                    }
                }
                if rg(*b) {
                    let buf = slot(grads, *b, blen);
                    for (i, s) in g.iter().enumerate() {
                        buf[i % blen] += s * ad[i];
                    }
                }
            }
            Op::Scale { x, factor } => {
                let buf = slot(grads, *x, g.len());
                buf.iter_mut().zip(g).for_each(|(d, s)| *d += factor * s);
            }
            Op::AddScalar { x } | Op::Reshape { x } => {
                let buf = slot(grads, *x, g.len());
                buf.iter_mut().zip(g).for_each(|(d, s)| *d += s);
            }
            Op::Concat { inputs, axis } => {
                let out_shape = node.value.shape();
                let (outer, total, inner) = split_axis(out_shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let n = val(v).shape()[*axis];
                    if rg(v) {
                        let buf = slot(grads, v, outer * n * inner);
                        for o in 0..outer {
                            let src = &g[o * total * inner + offset * inner..][..n * inner];
                            let dst = &mut buf[o * n * inner..(o + 1) * n * inner];
                            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                        }
                    }
                    offset += n;
                }
            }
            Op::Slice { x, axis, start } => {
                let in_shape = val(*x).shape();
                let (outer, n, inner) = split_axis(in_shape, *axis);
                let len = node.value.shape()[*axis];
                let buf = slot(grads, *x, outer * n * inner);
                for o in 0..outer {
                    let dst = &mut buf[o * n * inner + start * inner..][..len * inner];
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                }
            }
            Op::Transpose { x } => {
                let s = node.value.shape();
                let r = s.len();
                let back = transpose_last(g, s[r - 2], s[r - 1]);
                let buf = slot(grads, *x, g.len());
                buf.iter_mut().zip(&back).for_each(|(d, s)| *d += s);
            }
            Op::Relu { x } => {
                let xd = val(*x).data();
                let buf = slot(grads, *x, g.len());
                for i in 0..g.len() {
                    if xd[i] > 0.0 {
                        buf[i] += g[i];
                    }
                }
            }
            Op::Sigmoid { x } => {
                let y = node.value.data();
                let buf = slot(grads, *x, g.len());
                for i in 0..g.len() {
                    buf[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, n, inner) = split_axis(node.value.shape(), *axis);
                let buf = slot(grads, *x, g.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| o * n * inner + j * inner + i;
                        let dot: f64 = (0..n).map(|j| g[idx(j)] * y[idx(j)]).sum();
                        for j in 0..n {
                            buf[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, axis, inv_std } => {
                let y = node.value.data();
                let (outer, n, inner) = split_axis(node.value.shape(), *axis);
                let buf = slot(grads, *x, g.len());
                let nf = n as f64;
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| o * n * inner + j * inner + i;
                        let s = inv_std[o * inner + i];
                        let mean_g: f64 = (0..n).map(|j| g[idx(j)]).sum::<f64>() / nf;
                        let mean_gy: f64 = (0..n).map(|j| g[idx(j)] * y[idx(j)]).sum::<f64>() / nf;
                        for j in 0..n {
                            buf[idx(j)] += s * (g[idx(j)] - mean_g - y[idx(j)] * mean_gy);
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                let buf = slot(grads, *x, g.len());
                for i in 0..g.len() {
                    buf[i] += g[i] * mask[i];
                }
            }
            Op::Sum { x } => {
                let n = val(*x).len();
                let buf = slot(grads, *x, n);
                buf.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Mean { x } => {
                let n = val(*x).len();
                let buf = slot(grads, *x, n);
                let s = g[0] / n as f64;
                buf.iter_mut().for_each(|d| *d += s);
            }
            Op::SumAxis { x, axis } => {
                let (outer, n, inner) = split_axis(val(*x).shape(), *axis);
                let buf = slot(grads, *x, outer * n * inner);
                for o in 0..outer {
                    for j in 0..n {
                        for i in 0..inner {
                            buf[o * n * inner + j * inner + i] += g[o * inner + i];
                        }
                    }
                }
            }
            Op::MaxAxis { x, axis, argmax } => {
                let (outer, n, inner) = split_axis(val(*x).shape(), *axis);
                let buf = slot(grads, *x, outer * n * inner);
                for o in 0..outer {
                    for i in 0..inner {
                        let j = argmax[o * inner + i];
                        buf[o * n * inner + j * inner + i] += g[o * inner + i];
                    }
                }
            }
            Op::Gather { table, ids } => {
                let d = val(*table).shape()[1];
                let buf = slot(grads, *table, val(*table).len());
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut buf[id * d..(id + 1) * d];
                    dst.iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(a, s)| *a += s);
                }
            }
            Op::PositionalEmbed { values, table } => {
                let sv = val(*values).shape();
                let (b, j) = (sv[0], sv[1]);
                let d = val(*table).shape()[1];
                let vd = val(*values).data();
                let md = val(*table).data();
                if rg(*values) {
                    let buf = slot(grads, *values, b * j);
                    for bi in 0..b {
                        for ji in 0..j {
                            let gr = &g[(bi * j + ji) * d..(bi * j + ji + 1) * d];
                            let row = &md[ji * d..(ji + 1) * d];
                            buf[bi * j + ji] += gr.iter().zip(row).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
                if rg(*table) {
                    let buf = slot(grads, *table, j * d);
                    for bi in 0..b {
                        for ji in 0..j {
                            let s = vd[bi * j + ji];
                            let gr = &g[(bi * j + ji) * d..(bi * j + ji + 1) * d];
                            let dst = &mut buf[ji * d..(ji + 1) * d];
                            dst.iter_mut().zip(gr).for_each(|(a, v)| *a += s * v);
                        }
                    }
                }
            }
            Op::Mse { pred, target } => {
                let p = val(*pred).data();
                let n = p.len() as f64;
                let buf = slot(grads, *pred, p.len());
                for i in 0..p.len() {
                    buf[i] += g[0] * 2.0 * (p[i] - target[i]) / n;
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
                norm,
            } => {
                if *norm <= 0.0 {
                    return;
                }
                let c = val(*logits).shape()[1];
                let buf = slot(grads, *logits, probs.len());
                for (i, t) in targets.iter().enumerate() {
                    let Some(y) = *t else { continue };
                    let w = g[0] * weights[i] / norm;
                    for j in 0..c {
                        let onehot = if j == y { 1.0 } else { 0.0 };
                        buf[i * c + j] += w * (probs[i * c + j] - onehot);
                    }
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn transpose_last(data: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    let block = m * n;
    for (b, chunk) in data.chunks(block).enumerate() {
        let dst = &mut out[b * block..(b + 1) * block];
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = chunk[i * n + j];
            }
        }
    }
    out
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

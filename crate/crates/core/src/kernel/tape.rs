//! Dynamic reverse-mode tape.
//!
//! Nodes are appended in execution order, so the node index is already a
//! topological order and `backward` walks it in reverse exactly once.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Variance floor used by layer normalisation.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Linear(Var, Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Log(Var),
    Relu(Var),
    Mean(Var),
    SumRows(Var),
    Softmax { x: Var, temperature: f64 },
    L2Normalize { x: Var, norms: Vec<f64> },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather { table: Var, ids: Vec<usize> },
    Concat(Vec<Var>),
    LeaveOneOutMean(Var),
    Pick { x: Var, cols: Vec<usize> },
    Dropout { x: Var, mask: Vec<f64> },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        key_mask: Vec<bool>,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Record of executed operations for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by leaf variable.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of a leaf; `None` when the leaf was unreachable from the loss.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Writes the gradient of `var` into `tensor`, zero-filled when unreachable.
    pub fn write_into(&self, var: Var, tensor: &mut Tensor) -> Result<()> {
        let grad = match self.get(var) {
            Some(g) => g.to_vec(),
            None => vec![0.0; tensor.len()],
        };
        tensor.set_grad(grad)
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = shape.last().copied().unwrap_or(1);
    let numel: usize = shape.iter().product();
    let rows = if cols == 0 { 0 } else { numel / cols };
    (rows, cols)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    // log σ(x) = -softplus(-x)
    if x >= 0.0 {
        -libm::log1p(libm::exp(-x))
    } else {
        x - libm::log1p(libm::exp(x))
    }
}

/// In-place softmax of one slice at the given temperature.
pub fn softmax_in_place(row: &mut [f64], temperature: f64) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = libm::exp((*v - max) / temperature);
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Releases every recorded node.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a tensor as a leaf; its `requires_grad` flag is honoured.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    /// Records a constant (never receives a gradient).
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    /// Records a trainable leaf regardless of the tensor's flag.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::Shape {
                op,
                left: s.to_vec(),
                right: vec![2],
            });
        }
        Ok((s[0], s[1]))
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                add_scaled(orow, &bv[p * n..(p + 1) * n], x);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    /// Affine map `x[m×k] · w[k×n] + b[n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(x, "linear")?;
        let (k2, n) = self.matrix_dims(w, "linear")?;
        if k != k2 || self.shape(b) != [n] {
            return Err(Error::Shape {
                op: "linear",
                left: self.shape(x).to_vec(),
                right: self.shape(w).to_vec(),
            });
        }
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = xv[i * k + p];
                if a != 0.0 {
                    add_scaled(orow, &wv[p * n..(p + 1) * n], a);
                }
            }
            add_into(orow, bv);
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::Linear(x, w, b), rg))
    }

    /// `a[m×k] · b[n×k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul_nt")?;
        let (n, k2) = self.matrix_dims(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul_nt",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &av[i * k..(i + 1) * k];
            for j in 0..n {
                out[i * n + j] = dot(arow, &bv[j * k..(j + 1) * k]);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMulNt(a, b), rg))
    }

    fn broadcast_check(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb {
            Ok(())
        } else {
            Err(Error::Shape {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            })
        }
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.broadcast_check(a, b, name)?;
        let (av, bv) = (self.value(a), self.value(b));
        let nb = bv.len();
        let out = av
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv[i % nb]))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, op, rg))
    }

    /// Elementwise `a + b`; `b` may broadcast over the leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        let rg = self.rg(x);
        let shape = self.shape(x).to_vec();
        self.push(shape, out, op, rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    /// Numerically stable `log(sigmoid(x))`.
    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, log_sigmoid, Op::LogSigmoid(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).iter().find(|&&v| !(v > 0.0)) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive argument {bad}"),
            });
        }
        Ok(self.unary(x, libm::log, Op::Log(x)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(x))
    }

    /// Mean over all elements, producing a scalar.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let vals = self.value(x);
        if vals.is_empty() {
            return Err(Error::Empty("mean of an empty tensor"));
        }
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let rg = self.rg(x);
        Ok(self.push(Vec::new(), vec![m], Op::Mean(x), rg))
    }

    /// Sum over the last axis.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let (rows, cols) = rows_cols(&shape);
        let vals = self.value(x);
        let out = (0..rows)
            .map(|r| vals[r * cols..(r + 1) * cols].iter().sum())
            .collect();
        let rg = self.rg(x);
        self.push(shape[..shape.len().saturating_sub(1)].to_vec(), out, Op::SumRows(x), rg)
    }

    /// Softmax over the last axis of `x / temperature`.
    pub fn softmax(&mut self, x: Var, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0) {
            return Err(Error::Config(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        let shape = self.shape(x).to_vec();
        let (_, cols) = rows_cols(&shape);
        let mut out = self.value(x).to_vec();
        if cols > 0 {
            for row in out.chunks_mut(cols) {
                softmax_in_place(row, temperature);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::Softmax { x, temperature }, rg))
    }

    /// Unit-normalises each last-axis slice. Zero slices stay zero.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let (_, cols) = rows_cols(&shape);
        let mut out = self.value(x).to_vec();
        let mut norms = Vec::new();
        if cols > 0 {
            for row in out.chunks_mut(cols) {
                let norm = libm::sqrt(row.iter().map(|v| v * v).sum());
                if norm > 0.0 {
                    row.iter_mut().for_each(|v| *v /= norm);
                }
                norms.push(norm);
            }
        }
        let rg = self.rg(x);
        self.push(shape, out, Op::L2Normalize { x, norms }, rg)
    }

    /// Layer normalisation over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (rows, cols) = rows_cols(&shape);
        for p in [gain, bias] {
            if self.shape(p) != [cols] {
                return Err(Error::Shape {
                    op: "layer_norm",
                    left: shape,
                    right: self.shape(p).to_vec(),
                });
            }
        }
        let (xv, g, b) = (self.value(x), self.value(gain), self.value(bias));
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mu = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / cols as f64;
            let istd = 1.0 / libm::sqrt(var + LAYER_NORM_EPS);
            inv_std.push(istd);
            for c in 0..cols {
                let h = (row[c] - mu) * istd;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Copies rows `ids` of a `[V×h]` table. Backward scatter-adds.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, h) = self.matrix_dims(table, "gather")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Index {
                what: "gather row",
                index: bad,
                bound: v,
            });
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * h);
        for &i in ids {
            out.extend_from_slice(&tv[i * h..(i + 1) * h]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            vec![ids.len(), h],
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Stacks matrices with equal column counts along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("concat of no tensors"))?;
        let (_, cols) = self.matrix_dims(first, "concat_rows")?;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.matrix_dims(p, "concat_rows")?;
            if c != cols {
                return Err(Error::Shape {
                    op: "concat_rows",
                    left: self.shape(first).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * cols);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![rows, cols], out, Op::Concat(parts.to_vec()), rg))
    }

    /// Row `i` of the output is the mean of every input row except row `i`,
    /// accumulated in ascending row order.
    pub fn leave_one_out_mean(&mut self, x: Var) -> Result<Var> {
        let (n, h) = self.matrix_dims(x, "leave_one_out_mean")?;
        if n < 2 {
            return Err(Error::Contract(format!(
                "leave-one-out mean needs at least 2 rows, got {n}"
            )));
        }
        let xv = self.value(x);
        let denom = (n - 1) as f64;
        let mut out = vec![0.0; n * h];
        for i in 0..n {
            let orow = &mut out[i * h..(i + 1) * h];
            for j in (0..n).filter(|&j| j != i) {
                add_into(orow, &xv[j * h..(j + 1) * h]);
            }
            orow.iter_mut().for_each(|v| *v /= denom);
        }
        let rg = self.rg(x);
        Ok(self.push(vec![n, h], out, Op::LeaveOneOutMean(x), rg))
    }

    /// Selects `x[i, cols[i]]` for every row.
    pub fn pick(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let (n, c) = self.matrix_dims(x, "pick")?;
        if cols.len() != n {
            return Err(Error::Shape {
                op: "pick",
                left: vec![n, c],
                right: vec![cols.len()],
            });
        }
        if let Some(&bad) = cols.iter().find(|&&j| j >= c) {
            return Err(Error::Index {
                what: "pick column",
                index: bad,
                bound: c,
            });
        }
        let xv = self.value(x);
        let out = cols.iter().enumerate().map(|(i, &j)| xv[i * c + j]).collect();
        let rg = self.rg(x);
        Ok(self.push(
            vec![n],
            out,
            Op::Pick {
                x,
                cols: cols.to_vec(),
            },
            rg,
        ))
    }

    /// Inverted dropout with drop probability `p`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout rate {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let out = self
            .value(x)
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        let rg = self.rg(x);
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::Dropout { x, mask }, rg))
    }

    /// Bidirectional multi-head scaled dot-product attention.
    ///
    /// `q`, `k`, `v` are `[batch·seq, h]` with heads laid out as contiguous
    /// column blocks. Keys whose `key_mask` entry is false get zero weight.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        key_mask: &[bool],
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<Var> {
        let (rows, h) = self.matrix_dims(q, "attention")?;
        for other in [k, v] {
            if self.shape(other) != self.shape(q) {
                return Err(Error::Shape {
                    op: "attention",
                    left: self.shape(q).to_vec(),
                    right: self.shape(other).to_vec(),
                });
            }
        }
        if rows != batch * seq || key_mask.len() != rows {
            return Err(Error::Shape {
                op: "attention",
                left: vec![rows, h],
                right: vec![batch, seq, key_mask.len()],
            });
        }
        if heads == 0 || h % heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {h} not divisible by {heads} heads"
            )));
        }
        let d = h / heads;
        let inv_sqrt = 1.0 / libm::sqrt(d as f64);
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; rows * h];
        let mut scores = vec![0.0; seq];
        for b in 0..batch {
            let mask = &key_mask[b * seq..(b + 1) * seq];
            for hd in 0..heads {
                let col = hd * d;
                for i in 0..seq {
                    let qi = &qv[(b * seq + i) * h + col..(b * seq + i) * h + col + d];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..seq {
                        if mask[j] {
                            let kj = &kv[(b * seq + j) * h + col..(b * seq + j) * h + col + d];
                            scores[j] = dot(qi, kj) * inv_sqrt;
                            max = max.max(scores[j]);
                        }
                    }
                    let prow = &mut probs[((b * heads + hd) * seq + i) * seq..][..seq];
                    let mut sum = 0.0;
                    for j in 0..seq {
                        if mask[j] {
                            prow[j] = libm::exp(scores[j] - max);
                            sum += prow[j];
                        }
                    }
                    if sum == 0.0 {
                        continue;
                    }
                    let orow = &mut out[(b * seq + i) * h + col..(b * seq + i) * h + col + d];
                    for j in 0..seq {
                        if mask[j] {
                            prow[j] /= sum;
                            let vj = &vv[(b * seq + j) * h + col..(b * seq + j) * h + col + d];
                            add_scaled(orow, vj, prow[j]);
                        }
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            vec![rows, h],
            out,
            Op::Attention {
                q,
                k,
                v,
                key_mask: key_mask.to_vec(),
                batch,
                seq,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Runs the chain rule from a scalar `loss` back to every leaf and
    /// consumes the tape.
    pub fn backward(mut self, loss: Var) -> Result<Gradients> {
        if self.node(loss).value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.node(loss).shape
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }
        self.clear();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => add_into(existing, &contrib),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn accumulate_with(
        &self,
        grads: &mut [Option<Vec<f64>>],
        v: Var,
        f: impl FnOnce(&mut [f64]),
    ) {
        if !self.rg(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.value(v).len()]);
        f(slot);
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) | Op::Linear(a, b, _) => {
                if let Op::Linear(_, _, bias) = &node.op {
                    let n = node.shape[1];
                    self.accumulate_with(grads, *bias, |gb| {
                        for row in g.chunks(n) {
                            add_into(gb, row);
                        }
                    });
                }
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (av, bv) = (self.value(*a), self.value(*b));
                self.accumulate_with(grads, *a, |ga| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            ga[i * k + p] += dot(grow, &bv[p * n..(p + 1) * n]);
                        }
                    }
                });
                self.accumulate_with(grads, *b, |gb| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let x = av[i * k + p];
                            if x != 0.0 {
                                add_scaled(&mut gb[p * n..(p + 1) * n], grow, x);
                            }
                        }
                    }
                });
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                let (av, bv) = (self.value(*a), self.value(*b));
                self.accumulate_with(grads, *a, |ga| {
                    for i in 0..m {
                        let garow = &mut ga[i * k..(i + 1) * k];
                        for j in 0..n {
                            let x = g[i * n + j];
                            if x != 0.0 {
                                add_scaled(garow, &bv[j * k..(j + 1) * k], x);
                            }
                        }
                    }
                });
                self.accumulate_with(grads, *b, |gb| {
                    for i in 0..m {
                        let arow = &av[i * k..(i + 1) * k];
                        for j in 0..n {
                            let x = g[i * n + j];
                            if x != 0.0 {
                                add_scaled(&mut gb[j * k..(j + 1) * k], arow, x);
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate_with(grads, *b, |gb| {
                    let nb = gb.len();
                    for (i, &x) in g.iter().enumerate() {
                        gb[i % nb] += sign * x;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let nb = bv.len();
                self.accumulate(
                    grads,
                    *a,
                    g.iter().enumerate().map(|(i, x)| x * bv[i % nb]).collect(),
                );
                self.accumulate_with(grads, *b, |gb| {
                    for (i, &x) in g.iter().enumerate() {
                        gb[i % nb] += x * av[i];
                    }
                });
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, g.iter().map(|v| v * c).collect()),
            Op::AddScalar(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::Sigmoid(x) => {
                let y = &node.value;
                self.accumulate(
                    grads,
                    *x,
                    g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect(),
                );
            }
            Op::LogSigmoid(x) => {
                let xv = self.value(*x);
                self.accumulate(
                    grads,
                    *x,
                    g.iter().zip(xv).map(|(g, &x)| g * sigmoid(-x)).collect(),
                );
            }
            Op::Log(x) => {
                let xv = self.value(*x);
                self.accumulate(grads, *x, g.iter().zip(xv).map(|(g, x)| g / x).collect());
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                self.accumulate(
                    grads,
                    *x,
                    g.iter()
                        .zip(xv)
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect(),
                );
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, vec![g[0] / n as f64; n]);
            }
            Op::SumRows(x) => {
                let (rows, cols) = rows_cols(self.shape(*x));
                let mut out = vec![0.0; rows * cols];
                for r in 0..rows {
                    out[r * cols..(r + 1) * cols].iter_mut().for_each(|v| *v = g[r]);
                }
                self.accumulate(grads, *x, out);
            }
            Op::Softmax { x, temperature } => {
                let (_, cols) = rows_cols(&node.shape);
                let y = &node.value;
                let mut out = vec![0.0; y.len()];
                if cols > 0 {
                    for ((orow, yrow), grow) in out
                        .chunks_mut(cols)
                        .zip(y.chunks(cols))
                        .zip(g.chunks(cols))
                    {
                        let s = dot(yrow, grow);
                        for c in 0..cols {
                            orow[c] = yrow[c] * (grow[c] - s) / temperature;
                        }
                    }
                }
                self.accumulate(grads, *x, out);
            }
            Op::L2Normalize { x, norms } => {
                let (_, cols) = rows_cols(&node.shape);
                let y = &node.value;
                let mut out = vec![0.0; y.len()];
                for (r, &norm) in norms.iter().enumerate() {
                    if norm == 0.0 {
                        continue;
                    }
                    let yrow = &y[r * cols..(r + 1) * cols];
                    let grow = &g[r * cols..(r + 1) * cols];
                    let s = dot(yrow, grow);
                    for c in 0..cols {
                        out[r * cols + c] = (grow[c] - yrow[c] * s) / norm;
                    }
                }
                self.accumulate(grads, *x, out);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (rows, cols) = rows_cols(&node.shape);
                let gv = self.value(*gain);
                self.accumulate_with(grads, *gain, |gg| {
                    for r in 0..rows {
                        for c in 0..cols {
                            gg[c] += g[r * cols + c] * xhat[r * cols + c];
                        }
                    }
                });
                self.accumulate_with(grads, *bias, |gb| {
                    for r in 0..rows {
                        add_into(gb, &g[r * cols..(r + 1) * cols]);
                    }
                });
                if self.rg(*x) {
                    let mut out = vec![0.0; rows * cols];
                    let mut dxhat = vec![0.0; cols];
                    for r in 0..rows {
                        let hrow = &xhat[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            dxhat[c] = g[r * cols + c] * gv[c];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / cols as f64;
                        let mean_dh = dot(&dxhat, hrow) / cols as f64;
                        for c in 0..cols {
                            out[r * cols + c] =
                                inv_std[r] * (dxhat[c] - mean_d - hrow[c] * mean_dh);
                        }
                    }
                    self.accumulate(grads, *x, out);
                }
            }
            Op::Gather { table, ids } => {
                let h = self.shape(*table)[1];
                self.accumulate_with(grads, *table, |gt| {
                    for (row, &i) in ids.iter().enumerate() {
                        add_into(&mut gt[i * h..(i + 1) * h], &g[row * h..(row + 1) * h]);
                    }
                });
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.accumulate(grads, p, g[offset..offset + len].to_vec());
                    offset += len;
                }
            }
            Op::LeaveOneOutMean(x) => {
                let (n, h) = (node.shape[0], node.shape[1]);
                let denom = (n - 1) as f64;
                let mut total = vec![0.0; h];
                for i in 0..n {
                    add_into(&mut total, &g[i * h..(i + 1) * h]);
                }
                let mut out = vec![0.0; n * h];
                for j in 0..n {
                    for c in 0..h {
                        out[j * h + c] = (total[c] - g[j * h + c]) / denom;
                    }
                }
                self.accumulate(grads, *x, out);
            }
            Op::Pick { x, cols } => {
                let c = self.shape(*x)[1];
                self.accumulate_with(grads, *x, |gx| {
                    for (i, &j) in cols.iter().enumerate() {
                        gx[i * c + j] += g[i];
                    }
                });
            }
            Op::Dropout { x, mask } => {
                self.accumulate(grads, *x, g.iter().zip(mask).map(|(g, m)| g * m).collect());
            }
            Op::Attention {
                q,
                k,
                v,
                key_mask,
                batch,
                seq,
                heads,
                probs,
            } => {
                let (batch, seq, heads) = (*batch, *seq, *heads);
                let h = node.shape[1];
                let d = h / heads;
                let inv_sqrt = 1.0 / libm::sqrt(d as f64);
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let mut gq = vec![0.0; qv.len()];
                let mut gk = vec![0.0; kv.len()];
                let mut gv = vec![0.0; vv.len()];
                let mut dp = vec![0.0; seq];
                for b in 0..batch {
                    let mask = &key_mask[b * seq..(b + 1) * seq];
                    for hd in 0..heads {
                        let col = hd * d;
                        let at = |row: usize| -> (usize, usize) {
                            let start = (b * seq + row) * h + col;
                            (start, start + d)
                        };
                        for i in 0..seq {
                            let prow = &probs[((b * heads + hd) * seq + i) * seq..][..seq];
                            let (gs, ge) = at(i);
                            let grow = &g[gs..ge];
                            let mut s = 0.0;
                            for j in 0..seq {
                                if !mask[j] || prow[j] == 0.0 {
                                    dp[j] = 0.0;
                                    continue;
                                }
                                let (vs, ve) = at(j);
                                dp[j] = dot(grow, &vv[vs..ve]);
                                s += dp[j] * prow[j];
                                add_scaled(&mut gv[vs..ve], grow, prow[j]);
                            }
                            let (qs, qe) = at(i);
                            for j in 0..seq {
                                if !mask[j] || prow[j] == 0.0 {
                                    continue;
                                }
                                let ds = prow[j] * (dp[j] - s) * inv_sqrt;
                                let (ks, ke) = at(j);
                                add_scaled(&mut gq[qs..qe], &kv[ks..ke], ds);
                                add_scaled(&mut gk[ks..ke], &qv[qs..qe], ds);
                            }
                        }
                    }
                }
                self.accumulate(grads, *q, gq);
                self.accumulate(grads, *k, gk);
                self.accumulate(grads, *v, gv);
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn add_scaled(dst: &mut [f64], src: &[f64], c: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}

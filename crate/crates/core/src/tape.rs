//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every forward op appends a node holding its output value and the rule
//! needed to push gradients back to its inputs. [`Tape::backward`] replays
//! the nodes in reverse recorded order.

use crate::error::{Error, Result};
use crate::tensor::{gelu, gelu_grad, sigmoid, softmax_rows, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Deliberate corruption of a backward rule, used as a negative control for
/// gradient checking.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackwardFault {
    /// Scales the sigmoid derivative by 1.1.
    SigmoidScale,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Sigmoid(Var),
    Gelu(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    MaxSim {
        q: Var,
        d: Var,
        argmax: Vec<usize>,
    },
    Stack(Vec<Var>),
    InfoNce {
        s: Var,
        tau: f64,
        p_row: Vec<f64>,
        p_col: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Single-owner computation record. Not meant to be shared across threads;
/// build one tape per forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    fault: Option<BackwardFault>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    #[doc(hidden)]
    pub fn with_fault(fault: BackwardFault) -> Self {
        Self {
            fault: Some(fault),
            ..Self::default()
        }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last [`backward`](Self::backward) target with respect
    /// to `v`. `None` if `v` does not require grad or was unreachable.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            left: self.value(a).shape().to_vec(),
            right: self.value(b).shape().to_vec(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.shape_err("add", a, b));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, c) = self.value(x).dims2("add_bias")?;
        if self.value(bias).len() != c {
            return Err(self.shape_err("add_bias", x, bias));
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, bv) in row.iter_mut().zip(&b) {
                *o += bv;
            }
        }
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(out, Op::AddBias(x, bias), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.shape_err("mul", a, b));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v * c);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let out = softmax_rows(self.value(x))?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    /// Per-row normalization followed by an elementwise affine transform.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2("layer_norm")?;
        if c < 2 {
            return Err(Error::Config(format!("layer_norm needs width >= 2, got {c}")));
        }
        if self.value(gain).len() != c {
            return Err(self.shape_err("layer_norm", x, gain));
        }
        if self.value(bias).len() != c {
            return Err(self.shape_err("layer_norm", x, bias));
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::new(vec![r, c], out)?;
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2("slice_cols")?;
        if len == 0 || start + len > c {
            return Err(Error::Shape {
                op: "slice_cols",
                left: vec![r, c],
                right: vec![start, len],
            });
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let out = Tensor::new(vec![r, len], data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("concat_cols"))?;
        let (r, _) = self.value(first).dims2("concat_cols")?;
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.value(p).dims2("concat_cols")?;
            if pr != r {
                return Err(self.shape_err("concat_cols", first, p));
            }
            total += pc;
        }
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new(vec![r, total], data)?;
        let rg = self.any_grad(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Scales every row to unit Euclidean norm. Zero rows stay zero.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2("normalize_rows")?;
        let mut out = self.value(x).clone();
        let mut norms = Vec::with_capacity(r);
        for row in out.data_mut().chunks_mut(c) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v /= n);
            }
            norms.push(n);
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::NormalizeRows { x, norms }, rg))
    }

    /// Late-interaction score `sum_i max_j q_i . d_j`. Ties resolve to the
    /// lowest `j`; only the winning document row receives gradient.
    pub fn maxsim(&mut self, q: Var, d: Var) -> Result<Var> {
        let (kq, w) = self.value(q).dims2("maxsim")?;
        let (kd, w2) = self.value(d).dims2("maxsim")?;
        if w != w2 {
            return Err(self.shape_err("maxsim", q, d));
        }
        let qv = self.value(q);
        let dv = self.value(d);
        let mut argmax = Vec::with_capacity(kq);
        let mut total = 0.0;
        for i in 0..kq {
            let (j, best) = best_match(qv.row(i), dv, kd);
            argmax.push(j);
            total += best;
        }
        let rg = self.any_grad(&[q, d]);
        Ok(self.push(Tensor::scalar(total), Op::MaxSim { q, d, argmax }, rg))
    }

    /// Packs `rows*cols` scalar vars into a matrix, row-major.
    pub fn stack(&mut self, scalars: &[Var], rows: usize, cols: usize) -> Result<Var> {
        if scalars.len() != rows * cols || scalars.is_empty() {
            return Err(Error::Shape {
                op: "stack",
                left: vec![rows, cols],
                right: vec![scalars.len()],
            });
        }
        let mut data = Vec::with_capacity(scalars.len());
        for &s in scalars {
            if self.value(s).len() != 1 {
                return Err(Error::Shape {
                    op: "stack",
                    left: vec![1],
                    right: self.value(s).shape().to_vec(),
                });
            }
            data.push(self.value(s).data()[0]);
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        let rg = self.any_grad(scalars);
        Ok(self.push(out, Op::Stack(scalars.to_vec()), rg))
    }

    /// Symmetric in-batch contrastive loss over a square score matrix whose
    /// diagonal holds the positives.
    pub fn symmetric_infonce(&mut self, s: Var, tau: f64) -> Result<Var> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {tau}")));
        }
        let sv = self.value(s);
        let (b, b2) = sv.dims2("symmetric_infonce")?;
        if b != b2 {
            return Err(self.shape_err("symmetric_infonce", s, s));
        }
        if !sv.is_finite() {
            return Err(Error::NonFinite("score matrix".into()));
        }
        let (loss, p_row, p_col) = infonce_forward(sv.data(), b, tau);
        let rg = self.any_grad(&[s]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::InfoNce {
                s,
                tau,
                p_row,
                p_col,
            },
            rg,
        ))
    }

    /// Back-propagates from a scalar `loss`. Gradients from an earlier call
    /// are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape {
                op: "backward",
                left: self.value(loss).shape().to_vec(),
                right: vec![1],
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backward_node(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backward_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                if self.requires_grad(*a) {
                    let ga = g.matmul(&bv.transpose()?)?;
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let gb = av.transpose()?.matmul(g)?;
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()?),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddBias(x, bias) => {
                self.accumulate(grads, *x, g.clone());
                let c = g.cols();
                let mut gb = vec![0.0; c];
                for row in g.data().chunks(c) {
                    for (acc, v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                let shape = self.value(*bias).shape().to_vec();
                self.accumulate(grads, *bias, Tensor::new(shape, gb)?);
            }
            Op::Mul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                if self.requires_grad(*a) {
                    let d = g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d)?);
                }
                if self.requires_grad(*b) {
                    let d = g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor::new(g.shape().to_vec(), d)?);
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|v| v * c)),
            Op::Sum(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::full(&shape, g.data()[0]));
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let c = y.cols();
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y
                    .data()
                    .chunks(c)
                    .zip(g.data().chunks(c))
                    .zip(dx.chunks_mut(c))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), dx)?);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let c = g.cols();
                let r = g.rows();
                let gv = self.value(*gain).data();
                let mut dgain = vec![0.0; c];
                let mut dbias = vec![0.0; c];
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let gr = &g.data()[i * c..(i + 1) * c];
                    let hr = &xhat[i * c..(i + 1) * c];
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..c {
                        dgain[j] += gr[j] * hr[j];
                        dbias[j] += gr[j];
                        let dh = gr[j] * gv[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[j];
                    }
                    mean_dh /= c as f64;
                    mean_dh_h /= c as f64;
                    for j in 0..c {
                        let dh = gr[j] * gv[j];
                        dx[i * c + j] = rstd[i] * (dh - mean_dh - hr[j] * mean_dh_h);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(vec![r, c], dx)?);
                let gshape = self.value(*gain).shape().to_vec();
                self.accumulate(grads, *gain, Tensor::new(gshape, dgain)?);
                let bshape = self.value(*bias).shape().to_vec();
                self.accumulate(grads, *bias, Tensor::new(bshape, dbias)?);
            }
            Op::Sigmoid(x) => {
                let scale = match self.fault {
                    Some(BackwardFault::SigmoidScale) => 1.1,
                    None => 1.0,
                };
                let y = &node.value;
                let d = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(gv, yv)| scale * gv * yv * (1.0 - yv))
                    .collect();
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), d)?);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let d = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(gv, v)| gv * gelu_grad(*v))
                    .collect();
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), d)?);
            }
            Op::SliceCols { x, start } => {
                let (r, c) = self.value(*x).dims2("slice_cols")?;
                let len = g.cols();
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    d[i * c + start..i * c + start + len].copy_from_slice(g.row(i));
                }
                self.accumulate(grads, *x, Tensor::new(vec![r, c], d)?);
            }
            Op::ConcatCols(parts) => {
                let r = g.rows();
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    let mut d = Vec::with_capacity(r * pc);
                    for i in 0..r {
                        d.extend_from_slice(&g.row(i)[offset..offset + pc]);
                    }
                    self.accumulate(grads, p, Tensor::new(vec![r, pc], d)?);
                    offset += pc;
                }
            }
            Op::NormalizeRows { x, norms } => {
                let y = &node.value;
                let c = y.cols();
                let mut d = vec![0.0; y.len()];
                for (i, n) in norms.iter().enumerate() {
                    if *n == 0.0 {
                        continue;
                    }
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        d[i * c + j] = (gr[j] - yr[j] * dot) / n;
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), d)?);
            }
            Op::MaxSim { q, d, argmax } => {
                let gs = g.data()[0];
                let qv = self.value(*q);
                let dv = self.value(*d);
                let w = qv.cols();
                let mut gq = vec![0.0; qv.len()];
                let mut gd = vec![0.0; dv.len()];
                for (i, &j) in argmax.iter().enumerate() {
                    for c in 0..w {
                        gq[i * w + c] += gs * dv.get(j, c);
                        gd[j * w + c] += gs * qv.get(i, c);
                    }
                }
                self.accumulate(grads, *q, Tensor::new(qv.shape().to_vec(), gq)?);
                self.accumulate(grads, *d, Tensor::new(dv.shape().to_vec(), gd)?);
            }
            Op::Stack(scalars) => {
                for (&s, &gv) in scalars.iter().zip(g.data()) {
                    self.accumulate(grads, s, Tensor::scalar(gv));
                }
            }
            Op::InfoNce {
                s,
                tau,
                p_row,
                p_col,
            } => {
                let b = self.value(*s).cols();
                let coef = g.data()[0] / (2.0 * b as f64 * tau);
                let mut d = vec![0.0; b * b];
                for a in 0..b {
                    for c in 0..b {
                        let delta = if a == c { 2.0 } else { 0.0 };
                        d[a * b + c] = coef * (p_row[a * b + c] + p_col[a * b + c] - delta);
                    }
                }
                self.accumulate(grads, *s, Tensor::new(vec![b, b], d)?);
            }
        }
        Ok(())
    }
}

/// Best-scoring document row for one query row; lowest index wins ties.
pub(crate) fn best_match(q_row: &[f64], d: &Tensor, kd: usize) -> (usize, f64) {
    let mut best_j = 0;
    let mut best = f64::NEG_INFINITY;
    for j in 0..kd {
        let dot: f64 = q_row.iter().zip(d.row(j)).map(|(a, b)| a * b).sum();
        if dot > best {
            best = dot;
            best_j = j;
        }
    }
    (best_j, best)
}

/// Returns `(loss, row softmax, column softmax)` of `scores / tau`, both
/// softmaxes stored row-major in the score layout.
/// `(max, ln Σ exp(x − max))`. The first maximal term contributes exactly 1,
/// so the remainder goes through `ln_1p`.
fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    let mut seen_max = false;
    let mut rest = 0.0;
    for x in xs {
        if x == max && !seen_max {
            seen_max = true;
        } else {
            rest += (x - max).exp();
        }
    }
    (max, rest.ln_1p())
}

pub(crate) fn infonce_forward(s: &[f64], b: usize, tau: f64) -> (f64, Vec<f64>, Vec<f64>) {
    let logits: Vec<f64> = s.iter().map(|v| v / tau).collect();
    let mut p_row = vec![0.0; b * b];
    let mut p_col = vec![0.0; b * b];
    let mut row_loss = 0.0;
    let mut col_loss = 0.0;
    for a in 0..b {
        let (max, log_z) = log_sum_exp((0..b).map(|c| logits[a * b + c]));
        for c in 0..b {
            p_row[a * b + c] = (logits[a * b + c] - max - log_z).exp();
        }
        row_loss += (max - logits[a * b + a]) + log_z;
    }
    for c in 0..b {
        let (max, log_z) = log_sum_exp((0..b).map(|a| logits[a * b + c]));
        for a in 0..b {
            p_col[a * b + c] = (logits[a * b + c] - max - log_z).exp();
        }
        col_loss += (max - logits[c * b + c]) + log_z;
    }
    let loss = 0.5 * (row_loss / b as f64 + col_loss / b as f64);
    (loss, p_row, p_col)
}

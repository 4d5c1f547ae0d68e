//! Multi-head scaled dot-product attention with learned projections.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::{truncated_normal, INIT_STD};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Query/key/value/output projections, each `d×d` with a bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams<T = Tensor> {
    pub wq: T,
    pub bq: T,
    pub wk: T,
    pub bk: T,
    pub wv: T,
    pub bv: T,
    pub wo: T,
    pub bo: T,
}

impl AttentionParams<Tensor> {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, width: usize) -> Self {
        let w = |rng: &mut R| truncated_normal(rng, &[width, width], INIT_STD);
        Self {
            wq: w(rng),
            bq: Tensor::zeros(&[width]),
            wk: w(rng),
            bk: Tensor::zeros(&[width]),
            wv: w(rng),
            bv: Tensor::zeros(&[width]),
            wo: w(rng),
            bo: Tensor::zeros(&[width]),
        }
    }

    /// All four projections set to the identity with zero biases.
    pub fn identity(width: usize) -> Self {
        Self {
            wq: Tensor::identity(width),
            bq: Tensor::zeros(&[width]),
            wk: Tensor::identity(width),
            bk: Tensor::zeros(&[width]),
            wv: Tensor::identity(width),
            bv: Tensor::zeros(&[width]),
            wo: Tensor::identity(width),
            bo: Tensor::zeros(&[width]),
        }
    }
}

impl<T> AttentionParams<T> {
    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> AttentionParams<U> {
        AttentionParams {
            wq: f(&self.wq),
            bq: f(&self.bq),
            wk: f(&self.wk),
            bk: f(&self.bk),
            wv: f(&self.wv),
            bv: f(&self.bv),
            wo: f(&self.wo),
            bo: f(&self.bo),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        for (name, t) in [
            ("wq", &self.wq),
            ("bq", &self.bq),
            ("wk", &self.wk),
            ("bk", &self.bk),
            ("wv", &self.wv),
            ("bv", &self.bv),
            ("wo", &self.wo),
            ("bo", &self.bo),
        ] {
            f(format!("{prefix}.{name}"), t);
        }
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut T)) {
        for (name, t) in [
            ("wq", &mut self.wq),
            ("bq", &mut self.bq),
            ("wk", &mut self.wk),
            ("bk", &mut self.bk),
            ("wv", &mut self.wv),
            ("bv", &mut self.bv),
            ("wo", &mut self.wo),
            ("bo", &mut self.bo),
        ] {
            f(format!("{prefix}.{name}"), t);
        }
    }
}

/// `x·W + b` on the tape.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, b)
}

/// Attention of `q_in` (k×d) over `kv_in` (n×d). Self-attention is the call
/// with `kv_in == q_in`.
pub fn attention(
    tape: &mut Tape,
    q_in: Var,
    kv_in: Var,
    params: &AttentionParams<Var>,
    heads: usize,
) -> Result<Var> {
    let (_, d) = tape.value(q_in).dims2("attention")?;
    let (_, dkv) = tape.value(kv_in).dims2("attention")?;
    if d != dkv {
        return Err(Error::Shape {
            op: "attention",
            left: tape.value(q_in).shape().to_vec(),
            right: tape.value(kv_in).shape().to_vec(),
        });
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "head count {heads} does not divide model width {d}"
        )));
    }
    let head_dim = d / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();

    let q = linear(tape, q_in, params.wq, params.bq)?;
    let k = linear(tape, kv_in, params.wk, params.bk)?;
    let v = linear(tape, kv_in, params.wv, params.bv)?;

    let mut outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let start = h * head_dim;
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, start, head_dim)?,
                tape.slice_cols(k, start, head_dim)?,
                tape.slice_cols(v, start, head_dim)?,
            )
        };
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let weights = tape.softmax_rows(scores)?;
        outputs.push(tape.matmul(weights, vh)?);
    }
    let merged = if heads == 1 {
        outputs[0]
    } else {
        tape.concat_cols(&outputs)?
    };
    linear(tape, merged, params.wo, params.bo)
}

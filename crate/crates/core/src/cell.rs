//! One step of the gated recurrent Transformer cell.
//!
//! The hidden state `h` (k×d) is layer-normalized once (after adding a fixed
//! positional table) and fed to three branches: self-attention with a
//! residual producing the candidate state, and one cross-attention per
//! modality over that layer's backbone features. Sigmoid gates mix the three
//! branches into the next state, which then passes through a residual MLP.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attention, linear, AttentionParams};
use crate::error::{Error, Modality, Result};
use crate::init::{sinusoidal_table, truncated_normal, INIT_STD};
use crate::tape::{Tape, Var};
use crate::tensor::{sigmoid, Tensor};

/// Shape and fixed hyperparameters of a cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellConfig {
    pub tokens: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub gate_bias_forget: f64,
    pub gate_bias_input: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellParams<T = Tensor> {
    pub self_attn: AttentionParams<T>,
    pub cross_text: AttentionParams<T>,
    pub cross_vis: AttentionParams<T>,
    pub ln_input_gain: T,
    pub ln_input_bias: T,
    pub ln_mlp_gain: T,
    pub ln_mlp_bias: T,
    pub w_f_text: T,
    pub w_f_vis: T,
    pub w_i_text: T,
    pub w_i_vis: T,
    pub mlp_w1: T,
    pub mlp_b1: T,
    pub mlp_w2: T,
    pub mlp_b2: T,
    /// Fixed, not trained.
    pub gate_bias_forget: f64,
    /// Fixed, not trained.
    pub gate_bias_input: f64,
    /// Fixed sinusoidal table, `tokens × width`.
    pub pos_enc: Tensor,
    pub heads: usize,
}

/// Mean gate activations of one step, averaged over tokens and channels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateActivations {
    pub forget: f64,
    pub input_text: f64,
    pub input_vis: f64,
}

/// Gate tensors of one step. `input_vis` is absent on the masked path.
#[derive(Debug, Clone, Copy)]
pub struct Gates {
    pub forget: Var,
    pub input_text: Var,
    pub input_vis: Option<Var>,
}

#[derive(Debug, Clone, Copy)]
pub struct CellStepOutput {
    pub h_next: Var,
    pub c_next: Var,
    pub gate_trace: GateActivations,
}

fn xavier<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    truncated_normal(rng, &[rows, cols], 1.0 / (rows as f64).sqrt())
}

fn xavier_attention<R: Rng + ?Sized>(rng: &mut R, width: usize) -> AttentionParams {
    AttentionParams {
        wq: xavier(rng, width, width),
        bq: Tensor::zeros(&[width]),
        wk: xavier(rng, width, width),
        bk: Tensor::zeros(&[width]),
        wv: xavier(rng, width, width),
        bv: Tensor::zeros(&[width]),
        wo: xavier(rng, width, width),
        bo: Tensor::zeros(&[width]),
    }
}

impl CellParams<Tensor> {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, cfg: &CellConfig) -> Result<Self> {
        let d = cfg.width;
        if cfg.heads == 0 || !d.is_multiple_of(cfg.heads) {
            return Err(Error::Config(format!(
                "head count {} does not divide width {d}",
                cfg.heads
            )));
        }
        let hidden = cfg.mlp_ratio * d;
        Ok(Self {
            self_attn: xavier_attention(rng, d),
            cross_text: xavier_attention(rng, d),
            cross_vis: xavier_attention(rng, d),
            ln_input_gain: Tensor::full(&[d], 1.0),
            ln_input_bias: Tensor::zeros(&[d]),
            ln_mlp_gain: Tensor::full(&[d], 1.0),
            ln_mlp_bias: Tensor::zeros(&[d]),
            w_f_text: truncated_normal(rng, &[d, d], INIT_STD),
            w_f_vis: truncated_normal(rng, &[d, d], INIT_STD),
            w_i_text: truncated_normal(rng, &[d, d], INIT_STD),
            w_i_vis: truncated_normal(rng, &[d, d], INIT_STD),
            mlp_w1: xavier(rng, d, hidden),
            mlp_b1: Tensor::zeros(&[hidden]),
            mlp_w2: xavier(rng, hidden, d),
            mlp_b2: Tensor::zeros(&[d]),
            gate_bias_forget: cfg.gate_bias_forget,
            gate_bias_input: cfg.gate_bias_input,
            pos_enc: sinusoidal_table(cfg.tokens, d),
            heads: cfg.heads,
        })
    }
}

impl<T> CellParams<T> {
    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> CellParams<U> {
        CellParams {
            self_attn: self.self_attn.map(f),
            cross_text: self.cross_text.map(f),
            cross_vis: self.cross_vis.map(f),
            ln_input_gain: f(&self.ln_input_gain),
            ln_input_bias: f(&self.ln_input_bias),
            ln_mlp_gain: f(&self.ln_mlp_gain),
            ln_mlp_bias: f(&self.ln_mlp_bias),
            w_f_text: f(&self.w_f_text),
            w_f_vis: f(&self.w_f_vis),
            w_i_text: f(&self.w_i_text),
            w_i_vis: f(&self.w_i_vis),
            mlp_w1: f(&self.mlp_w1),
            mlp_b1: f(&self.mlp_b1),
            mlp_w2: f(&self.mlp_w2),
            mlp_b2: f(&self.mlp_b2),
            gate_bias_forget: self.gate_bias_forget,
            gate_bias_input: self.gate_bias_input,
            pos_enc: self.pos_enc.clone(),
            heads: self.heads,
        }
    }

    /// Visits trainable tensors as `prefix.<group>.<name>`.
    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        self.self_attn.visit(&format!("{prefix}.self_attn"), f);
        self.cross_text.visit(&format!("{prefix}.cross_text"), f);
        self.cross_vis.visit(&format!("{prefix}.cross_vis"), f);
        f(format!("{prefix}.ln_input.gain"), &self.ln_input_gain);
        f(format!("{prefix}.ln_input.bias"), &self.ln_input_bias);
        f(format!("{prefix}.ln_mlp.gain"), &self.ln_mlp_gain);
        f(format!("{prefix}.ln_mlp.bias"), &self.ln_mlp_bias);
        f(format!("{prefix}.gates.w_f_text"), &self.w_f_text);
        f(format!("{prefix}.gates.w_f_vis"), &self.w_f_vis);
        f(format!("{prefix}.gates.w_i_text"), &self.w_i_text);
        f(format!("{prefix}.gates.w_i_vis"), &self.w_i_vis);
        f(format!("{prefix}.mlp.w1"), &self.mlp_w1);
        f(format!("{prefix}.mlp.b1"), &self.mlp_b1);
        f(format!("{prefix}.mlp.w2"), &self.mlp_w2);
        f(format!("{prefix}.mlp.b2"), &self.mlp_b2);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut T)) {
        self.self_attn.visit_mut(&format!("{prefix}.self_attn"), f);
        self.cross_text.visit_mut(&format!("{prefix}.cross_text"), f);
        self.cross_vis.visit_mut(&format!("{prefix}.cross_vis"), f);
        f(format!("{prefix}.ln_input.gain"), &mut self.ln_input_gain);
        f(format!("{prefix}.ln_input.bias"), &mut self.ln_input_bias);
        f(format!("{prefix}.ln_mlp.gain"), &mut self.ln_mlp_gain);
        f(format!("{prefix}.ln_mlp.bias"), &mut self.ln_mlp_bias);
        f(format!("{prefix}.gates.w_f_text"), &mut self.w_f_text);
        f(format!("{prefix}.gates.w_f_vis"), &mut self.w_f_vis);
        f(format!("{prefix}.gates.w_i_text"), &mut self.w_i_text);
        f(format!("{prefix}.gates.w_i_vis"), &mut self.w_i_vis);
        f(format!("{prefix}.mlp.w1"), &mut self.mlp_w1);
        f(format!("{prefix}.mlp.b1"), &mut self.mlp_b1);
        f(format!("{prefix}.mlp.w2"), &mut self.mlp_w2);
        f(format!("{prefix}.mlp.b2"), &mut self.mlp_b2);
    }
}

impl CellParams<Var> {
    fn check_state(&self, tape: &Tape, h: Var) -> Result<()> {
        let shape = tape.value(h).shape();
        if shape != self.pos_enc.shape() {
            return Err(Error::Shape {
                op: "cell state",
                left: shape.to_vec(),
                right: self.pos_enc.shape().to_vec(),
            });
        }
        Ok(())
    }
}

/// `LayerNorm(h + pos_enc)`, shared by all three branches.
pub fn normalized_input(tape: &mut Tape, h: Var, params: &CellParams<Var>) -> Result<Var> {
    params.check_state(tape, h)?;
    let pe = tape.constant(params.pos_enc.clone());
    let encoded = tape.add(h, pe)?;
    tape.layer_norm(encoded, params.ln_input_gain, params.ln_input_bias)
}

/// Candidate state `Attention(ĥ) + h`.
pub fn candidate_state(tape: &mut Tape, h: Var, params: &CellParams<Var>) -> Result<Var> {
    let h_hat = normalized_input(tape, h, params)?;
    candidate_from_normalized(tape, h, h_hat, params)
}

fn candidate_from_normalized(
    tape: &mut Tape,
    h: Var,
    h_hat: Var,
    params: &CellParams<Var>,
) -> Result<Var> {
    let attn = attention(tape, h_hat, h_hat, &params.self_attn, params.heads)?;
    tape.add(attn, h)
}

/// Cross-attention of `ĥ` over one modality's layer features. No residual.
pub fn fuse_modality(
    tape: &mut Tape,
    h: Var,
    features: Var,
    which: Modality,
    params: &CellParams<Var>,
) -> Result<Var> {
    let h_hat = normalized_input(tape, h, params)?;
    fuse_from_normalized(tape, h_hat, features, which, params)
}

fn fuse_from_normalized(
    tape: &mut Tape,
    h_hat: Var,
    features: Var,
    which: Modality,
    params: &CellParams<Var>,
) -> Result<Var> {
    if tape.value(features).rows() == 0 {
        return Err(Error::EmptyModality(which));
    }
    let attn = match which {
        Modality::Text => &params.cross_text,
        Modality::Vision => &params.cross_vis,
    };
    attention(tape, h_hat, features, attn, params.heads)
}

fn gate(tape: &mut Tape, pre: Var, bias: f64) -> Result<Var> {
    let shifted = if bias != 0.0 {
        let b = tape.constant(Tensor::full(tape.value(pre).shape(), bias));
        tape.add(pre, b)?
    } else {
        pre
    };
    Ok(tape.sigmoid(shifted))
}

/// Gated mix of candidate state and fused features.
///
/// When `vis_masked` is set, `z_vis` is treated as zero everywhere: it drops
/// out of the forget-gate pre-activation and the visual input term.
pub fn gated_update(
    tape: &mut Tape,
    c: Var,
    z_text: Var,
    z_vis: Var,
    vis_masked: bool,
    params: &CellParams<Var>,
) -> Result<(Var, Gates)> {
    let z_vis = if vis_masked { None } else { Some(z_vis) };
    combine(tape, c, z_text, z_vis, params)
}

fn combine(
    tape: &mut Tape,
    c: Var,
    z_text: Var,
    z_vis: Option<Var>,
    params: &CellParams<Var>,
) -> Result<(Var, Gates)> {
    let mut f_pre = tape.matmul(z_text, params.w_f_text)?;
    if let Some(zv) = z_vis {
        let fv = tape.matmul(zv, params.w_f_vis)?;
        f_pre = tape.add(f_pre, fv)?;
    }
    let forget = gate(tape, f_pre, params.gate_bias_forget)?;
    let it_pre = tape.matmul(z_text, params.w_i_text)?;
    let input_text = gate(tape, it_pre, params.gate_bias_input)?;

    let kept = tape.mul(c, forget)?;
    let text_in = tape.mul(z_text, input_text)?;
    let mut c_next = tape.add(kept, text_in)?;

    let input_vis = match z_vis {
        Some(zv) => {
            let iv_pre = tape.matmul(zv, params.w_i_vis)?;
            let iv = gate(tape, iv_pre, params.gate_bias_input)?;
            let vis_in = tape.mul(zv, iv)?;
            c_next = tape.add(c_next, vis_in)?;
            Some(iv)
        }
        None => None,
    };
    Ok((
        c_next,
        Gates {
            forget,
            input_text,
            input_vis,
        },
    ))
}

fn mean(t: &Tensor) -> f64 {
    t.data().iter().sum::<f64>() / t.len() as f64
}

/// Full recurrent step. `e_vis = None` takes the masked-visual path.
pub fn cell_step(
    tape: &mut Tape,
    h: Var,
    e_text: Var,
    e_vis: Option<Var>,
    params: &CellParams<Var>,
) -> Result<CellStepOutput> {
    let h_hat = normalized_input(tape, h, params)?;
    let c = candidate_from_normalized(tape, h, h_hat, params)?;
    let z_text = fuse_from_normalized(tape, h_hat, e_text, Modality::Text, params)?;
    let z_vis = match e_vis {
        Some(e) => Some(fuse_from_normalized(tape, h_hat, e, Modality::Vision, params)?),
        None => None,
    };
    let (c_next, gates) = combine(tape, c, z_text, z_vis, params)?;

    let normed = tape.layer_norm(c_next, params.ln_mlp_gain, params.ln_mlp_bias)?;
    let hidden = linear(tape, normed, params.mlp_w1, params.mlp_b1)?;
    let hidden = tape.gelu(hidden);
    let mlp_out = linear(tape, hidden, params.mlp_w2, params.mlp_b2)?;
    let h_next = tape.add(c_next, mlp_out)?;

    let gate_trace = GateActivations {
        forget: mean(tape.value(gates.forget)),
        input_text: mean(tape.value(gates.input_text)),
        input_vis: match gates.input_vis {
            Some(v) => mean(tape.value(v)),
            None => sigmoid(params.gate_bias_input),
        },
    };
    Ok(CellStepOutput {
        h_next,
        c_next,
        gate_trace,
    })
}

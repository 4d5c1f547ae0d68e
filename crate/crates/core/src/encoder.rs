//! The full recurrent encoder: per-layer input projections, `L` cell steps
//! over selected backbone layers, and the late-interaction projection.

use rand::SeedableRng;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::linear;
use crate::cell::{cell_step, CellConfig, CellParams, GateActivations};
use crate::error::{Error, Modality, Result};
use crate::init::{truncated_normal, INIT_STD};
use crate::scoring::{Side, TokenMatrix};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Number of recurrent steps.
    pub layers: usize,
    /// Learnable input tokens `k`.
    pub tokens: usize,
    /// Model width `d`.
    pub width: usize,
    /// Late-interaction width.
    pub late_width: usize,
    pub heads: usize,
    pub text_layers: Vec<usize>,
    pub vis_layers: Vec<usize>,
    pub text_dim: usize,
    pub vis_dim: usize,
    pub mlp_ratio: usize,
    pub gate_bias_forget: f64,
    pub gate_bias_input: f64,
    /// Scale output rows to unit norm before scoring. Off by default.
    pub normalize_rows: bool,
}

impl EncoderConfig {
    /// Small configuration used by tests and the CLI defaults: `L=3, k=4,
    /// d=32, late width 16, 2 heads`, with layer indices sampled from the
    /// given backbone depths.
    pub fn desk_scale(
        text_depth: usize,
        vis_depth: usize,
        text_dim: usize,
        vis_dim: usize,
    ) -> Result<Self> {
        let layers = 3;
        Ok(Self {
            layers,
            tokens: 4,
            width: 32,
            late_width: 16,
            heads: 2,
            text_layers: select_layer_indices(text_depth, layers)?,
            vis_layers: select_layer_indices(vis_depth, layers)?,
            text_dim,
            vis_dim,
            mlp_ratio: 4,
            gate_bias_forget: 0.0,
            gate_bias_input: 0.0,
            normalize_rows: false,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.layers == 0 {
            return bad("layers must be >= 1".into());
        }
        if self.tokens == 0 || self.late_width == 0 || self.text_dim == 0 || self.vis_dim == 0 {
            return bad("tokens, late_width and source dims must be >= 1".into());
        }
        if self.width < 2 {
            return bad(format!("width must be >= 2, got {}", self.width));
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return bad(format!(
                "heads ({}) must divide width ({})",
                self.heads, self.width
            ));
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be >= 1".into());
        }
        for (name, list) in [("text_layers", &self.text_layers), ("vis_layers", &self.vis_layers)] {
            if list.len() != self.layers {
                return bad(format!(
                    "{name} has {} entries, expected {}",
                    list.len(),
                    self.layers
                ));
            }
            if list.windows(2).any(|w| w[0] >= w[1]) {
                return bad(format!("{name} must be strictly increasing: {list:?}"));
            }
        }
        Ok(())
    }

    pub fn cell_config(&self) -> CellConfig {
        CellConfig {
            tokens: self.tokens,
            width: self.width,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            gate_bias_forget: self.gate_bias_forget,
            gate_bias_input: self.gate_bias_input,
        }
    }
}

/// Picks `target` layer indices out of a backbone of depth `available`.
///
/// Exact multiples use a uniform stride from 0. Otherwise indices are
/// `round(j·(available−1)/(target−1))`, bumped forward if rounding ever
/// collides.
pub fn select_layer_indices(available: usize, target: usize) -> Result<Vec<usize>> {
    if target == 0 {
        return Err(Error::Config("at least one layer must be selected".into()));
    }
    if target > available {
        return Err(Error::Config(format!(
            "cannot select {target} layers from a backbone of depth {available}"
        )));
    }
    if available.is_multiple_of(target) {
        let stride = available / target;
        return Ok((0..target).map(|j| j * stride).collect());
    }
    let span = (available - 1) as f64 / (target - 1) as f64;
    let mut out: Vec<usize> = Vec::with_capacity(target);
    for j in 0..target {
        let mut idx = (j as f64 * span).round() as usize;
        if let Some(&prev) = out.last() {
            if idx <= prev {
                idx = prev + 1;
            }
        }
        out.push(idx.min(available - 1));
    }
    Ok(out)
}

/// Per-layer activations of one backbone for one item.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStack {
    modality: Modality,
    layers: Vec<Tensor>,
}

impl LayerStack {
    pub fn new(modality: Modality, layers: Vec<Tensor>) -> Result<Self> {
        let first = layers.first().ok_or(Error::Empty("layer stack"))?;
        let (_, dim) = first.dims2("layer stack")?;
        for l in &layers {
            let (_, c) = l.dims2("layer stack")?;
            if c != dim {
                return Err(Error::Shape {
                    op: "layer stack",
                    left: first.shape().to_vec(),
                    right: l.shape().to_vec(),
                });
            }
        }
        Ok(Self { modality, layers })
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn layers(&self) -> &[Tensor] {
        &self.layers
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn source_dim(&self) -> usize {
        self.layers[0].cols()
    }

    fn layer(&self, index: usize) -> Result<&Tensor> {
        self.layers.get(index).ok_or(Error::LayerIndex {
            modality: self.modality,
            index,
            depth: self.layers.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear<T = Tensor> {
    pub weight: T,
    pub bias: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams<T = Tensor> {
    pub h0: T,
    pub text_proj: Vec<Linear<T>>,
    pub vis_proj: Vec<Linear<T>>,
    pub cell: CellParams<T>,
    pub w_final: T,
}

impl EncoderParams<Tensor> {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.width;
        let h0 = truncated_normal(rng, &[cfg.tokens, d], INIT_STD);
        let proj = |rng: &mut R, src: usize| -> Vec<Linear> {
            (0..cfg.layers)
                .map(|_| Linear {
                    weight: truncated_normal(rng, &[src, d], INIT_STD),
                    bias: Tensor::zeros(&[d]),
                })
                .collect()
        };
        let text_proj = proj(rng, cfg.text_dim);
        let vis_proj = proj(rng, cfg.vis_dim);
        let cell = CellParams::init(rng, &cfg.cell_config())?;
        let w_final = truncated_normal(rng, &[d, cfg.late_width], INIT_STD);
        Ok(Self {
            h0,
            text_proj,
            vis_proj,
            cell,
            w_final,
        })
    }

    /// Puts every trainable tensor on `tape` and returns the bound handles.
    pub fn bind(&self, tape: &mut Tape) -> EncoderParams<Var> {
        self.map(&mut |t| tape.param(t.clone()))
    }

    pub fn zeros_like(&self) -> Self {
        self.map(&mut |t| Tensor::zeros(t.shape()))
    }

    pub fn num_scalars(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }
}

impl<T> EncoderParams<T> {
    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> EncoderParams<U> {
        let h0 = f(&self.h0);
        let text_proj = self
            .text_proj
            .iter()
            .map(|l| Linear {
                weight: f(&l.weight),
                bias: f(&l.bias),
            })
            .collect();
        let vis_proj = self
            .vis_proj
            .iter()
            .map(|l| Linear {
                weight: f(&l.weight),
                bias: f(&l.bias),
            })
            .collect();
        let cell = self.cell.map(f);
        let w_final = f(&self.w_final);
        EncoderParams {
            h0,
            text_proj,
            vis_proj,
            cell,
            w_final,
        }
    }

    /// Visits every trainable tensor with a dotted name such as
    /// `text_proj.0.weight` or `cell.gates.w_f_text`.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a T)) {
        f("h0".into(), &self.h0);
        for (i, l) in self.text_proj.iter().enumerate() {
            f(format!("text_proj.{i}.weight"), &l.weight);
            f(format!("text_proj.{i}.bias"), &l.bias);
        }
        for (i, l) in self.vis_proj.iter().enumerate() {
            f(format!("vis_proj.{i}.weight"), &l.weight);
            f(format!("vis_proj.{i}.bias"), &l.bias);
        }
        self.cell.visit("cell", f);
        f("w_final".into(), &self.w_final);
    }

    pub fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(String, &'a mut T)) {
        f("h0".into(), &mut self.h0);
        for (i, l) in self.text_proj.iter_mut().enumerate() {
            f(format!("text_proj.{i}.weight"), &mut l.weight);
            f(format!("text_proj.{i}.bias"), &mut l.bias);
        }
        for (i, l) in self.vis_proj.iter_mut().enumerate() {
            f(format!("vis_proj.{i}.weight"), &mut l.weight);
            f(format!("vis_proj.{i}.bias"), &mut l.bias);
        }
        self.cell.visit_mut("cell", f);
        f("w_final".into(), &mut self.w_final);
    }

    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.visit(&mut |n, t| out.push((n, t)));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut T)> {
        let mut out = Vec::new();
        self.visit_mut(&mut |n, t| out.push((n, t)));
        out
    }
}

/// Parameter group of a dotted tensor name: the first segment, or the first
/// two for cell tensors (`cell.self_attn`, `cell.gates`, ...).
pub fn param_group(name: &str) -> String {
    let mut parts = name.split('.');
    let first = parts.next().unwrap_or_default();
    if first == "cell" {
        if let Some(second) = parts.next() {
            return format!("cell.{second}");
        }
    }
    first.to_string()
}

/// Mean gate activations per recurrent step for one encoded item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateTrace {
    pub layers: Vec<GateActivations>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EncodeOptions {
    /// Exclude visual features even when a visual stack is supplied.
    pub mask_visual: bool,
    pub trace: bool,
}

/// Runs the encoder on `tape`; returns the `k×late_width` output and the
/// per-step gate means.
pub fn encode_on_tape(
    tape: &mut Tape,
    text: &LayerStack,
    vis: Option<&LayerStack>,
    cfg: &EncoderConfig,
    params: &EncoderParams<Var>,
    mask_visual: bool,
) -> Result<(Var, GateTrace)> {
    check_stack(text, Modality::Text, cfg.text_dim)?;
    let vis = if mask_visual { None } else { vis };
    if let Some(v) = vis {
        check_stack(v, Modality::Vision, cfg.vis_dim)?;
    }
    let mut h = params.h0;
    let mut trace = Vec::with_capacity(cfg.layers);
    for step in 0..cfg.layers {
        let e_text = tape.constant(text.layer(cfg.text_layers[step])?.clone());
        let proj = &params.text_proj[step];
        let e_text = linear(tape, e_text, proj.weight, proj.bias)?;
        let e_vis = match vis {
            Some(v) => {
                let e = tape.constant(v.layer(cfg.vis_layers[step])?.clone());
                let proj = &params.vis_proj[step];
                Some(linear(tape, e, proj.weight, proj.bias)?)
            }
            None => None,
        };
        let out = cell_step(tape, h, e_text, e_vis, &params.cell)?;
        h = out.h_next;
        trace.push(out.gate_trace);
    }
    let mut tokens = tape.matmul(h, params.w_final)?;
    if cfg.normalize_rows {
        tokens = tape.normalize_rows(tokens)?;
    }
    Ok((tokens, GateTrace { layers: trace }))
}

fn check_stack(stack: &LayerStack, expected: Modality, dim: usize) -> Result<()> {
    if stack.modality() != expected {
        return Err(Error::Format(format!(
            "expected a {expected} stack, got {}",
            stack.modality()
        )));
    }
    if stack.source_dim() != dim {
        return Err(Error::Format(format!(
            "{expected} features have width {}, encoder expects {dim}",
            stack.source_dim()
        )));
    }
    Ok(())
}

/// One encoder with its own parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub side: Side,
    pub config: EncoderConfig,
    pub params: EncoderParams,
}

impl Encoder {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, side: Side, config: EncoderConfig) -> Result<Self> {
        let params = EncoderParams::init(rng, &config)?;
        Ok(Self {
            side,
            config,
            params,
        })
    }

    pub fn encode(
        &self,
        id: impl Into<String>,
        text: &LayerStack,
        vis: Option<&LayerStack>,
        opts: EncodeOptions,
    ) -> Result<(TokenMatrix, Option<GateTrace>)> {
        let mut tape = Tape::new();
        let bound = self.params.map(&mut |t| tape.constant(t.clone()));
        let (out, trace) =
            encode_on_tape(&mut tape, text, vis, &self.config, &bound, opts.mask_visual)?;
        let tokens = TokenMatrix::new(self.side, id, tape.value(out).clone());
        Ok((tokens, opts.trace.then_some(trace)))
    }
}

/// Query and document encoders sharing an architecture but not weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualEncoder {
    pub config: EncoderConfig,
    pub query: EncoderParams,
    pub doc: EncoderParams,
}

impl DualEncoder {
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let query = EncoderParams::init(&mut rng, &config)?;
        let doc = EncoderParams::init(&mut rng, &config)?;
        Ok(Self { config, query, doc })
    }

    pub fn query_encoder(&self) -> Encoder {
        Encoder {
            side: Side::Query,
            config: self.config.clone(),
            params: self.query.clone(),
        }
    }

    pub fn doc_encoder(&self) -> Encoder {
        Encoder {
            side: Side::Document,
            config: self.config.clone(),
            params: self.doc.clone(),
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(f, self)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let model: Self = serde_json::from_reader(f)?;
        model.config.validate()?;
        Ok(model)
    }
}

/// Per-layer mean of gate activations over many traces.
pub fn gate_trace_summary(traces: &[GateTrace]) -> Result<Vec<GateActivations>> {
    let first = traces.first().ok_or(Error::Empty("gate traces"))?;
    let depth = first.layers.len();
    let mut sums = vec![(0.0, 0.0, 0.0); depth];
    for t in traces {
        if t.layers.len() != depth {
            return Err(Error::Config(format!(
                "gate traces disagree on depth: {} vs {depth}",
                t.layers.len()
            )));
        }
        for (s, g) in sums.iter_mut().zip(&t.layers) {
            s.0 += g.forget;
            s.1 += g.input_text;
            s.2 += g.input_vis;
        }
    }
    let n = traces.len() as f64;
    Ok(sums
        .into_iter()
        .map(|(f, it, iv)| GateActivations {
            forget: f / n,
            input_text: it / n,
            input_vis: iv / n,
        })
        .collect())
}

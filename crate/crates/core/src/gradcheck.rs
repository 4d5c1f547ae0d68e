//! Autodiff vs central finite differences on a tiny random model.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::encoder::{param_group, select_layer_indices, DualEncoder, EncoderConfig, EncoderParams, LayerStack};
use crate::error::{Modality, Result};
use crate::init::normal;
use crate::tape::{BackwardFault, Tape};
use crate::train::{batch_loss, collect_grads, Item, TrainPair};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    pub tokens: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub late_width: usize,
    pub batch: usize,
    pub text_dim: usize,
    pub vis_dim: usize,
    pub text_depth: usize,
    pub vis_depth: usize,
    pub samples_per_group: usize,
    pub step: f64,
    pub tolerance: f64,
    pub tau: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            tokens: 2,
            width: 8,
            layers: 2,
            heads: 2,
            late_width: 4,
            batch: 2,
            text_dim: 5,
            vis_dim: 6,
            text_depth: 2,
            vis_depth: 4,
            samples_per_group: 2,
            step: 1e-5,
            tolerance: 1e-3,
            tau: 0.05,
        }
    }
}

impl GradCheckConfig {
    pub fn encoder_config(&self) -> Result<EncoderConfig> {
        let cfg = EncoderConfig {
            layers: self.layers,
            tokens: self.tokens,
            width: self.width,
            late_width: self.late_width,
            heads: self.heads,
            text_layers: select_layer_indices(self.text_depth, self.layers)?,
            vis_layers: select_layer_indices(self.vis_depth, self.layers)?,
            text_dim: self.text_dim,
            vis_dim: self.vis_dim,
            mlp_ratio: 4,
            gate_bias_forget: 0.0,
            gate_bias_input: 0.0,
            normalize_rows: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupCheck {
    pub group: String,
    pub samples: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub groups: Vec<GroupCheck>,
    pub samples: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// `|a − n| / max(|a|, |n|, 1e-6)`. The floor keeps round-off in the
/// difference quotient from dominating near-zero gradients.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

struct Batch {
    stacks: Vec<[LayerStack; 4]>,
}

impl Batch {
    fn random(rng: &mut ChaCha8Rng, cfg: &GradCheckConfig) -> Result<Self> {
        let stack = |rng: &mut ChaCha8Rng, m: Modality, depth: usize, dim: usize| {
            let layers = (0..depth)
                .map(|_| {
                    let n = rng.random_range(2..=4);
                    normal(rng, &[n, dim], 1.0)
                })
                .collect();
            LayerStack::new(m, layers)
        };
        let mut stacks = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            stacks.push([
                stack(rng, Modality::Text, cfg.text_depth, cfg.text_dim)?,
                stack(rng, Modality::Vision, cfg.vis_depth, cfg.vis_dim)?,
                stack(rng, Modality::Text, cfg.text_depth, cfg.text_dim)?,
                stack(rng, Modality::Vision, cfg.vis_depth, cfg.vis_dim)?,
            ]);
        }
        Ok(Self { stacks })
    }

    fn pairs(&self) -> Vec<TrainPair<'_>> {
        self.stacks
            .iter()
            .map(|[qt, qv, dt, dv]| TrainPair {
                query: Item {
                    text: qt,
                    vis: Some(qv),
                },
                doc: Item {
                    text: dt,
                    vis: Some(dv),
                },
            })
            .collect()
    }
}

fn loss_value(model: &DualEncoder, pairs: &[TrainPair<'_>], tau: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let q = model.query.map(&mut |t| tape.constant(t.clone()));
    let d = model.doc.map(&mut |t| tape.constant(t.clone()));
    let loss = batch_loss(&mut tape, &model.config, &q, &d, pairs, tau)?;
    Ok(tape.value(loss).data()[0])
}

pub fn grad_check(cfg: &GradCheckConfig, seed: u64) -> Result<GradCheckReport> {
    run(cfg, seed, None)
}

#[doc(hidden)]
pub fn grad_check_with_fault(
    cfg: &GradCheckConfig,
    seed: u64,
    fault: BackwardFault,
) -> Result<GradCheckReport> {
    run(cfg, seed, Some(fault))
}

fn run(cfg: &GradCheckConfig, seed: u64, fault: Option<BackwardFault>) -> Result<GradCheckReport> {
    let enc_cfg = cfg.encoder_config()?;
    let model = DualEncoder::init(enc_cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let batch = Batch::random(&mut rng, cfg)?;
    let pairs = batch.pairs();

    let mut tape = match fault {
        Some(f) => Tape::with_fault(f),
        None => Tape::new(),
    };
    let q = model.query.bind(&mut tape);
    let d = model.doc.bind(&mut tape);
    let loss = batch_loss(&mut tape, &model.config, &q, &d, &pairs, cfg.tau)?;
    tape.backward(loss)?;
    let grads = [collect_grads(&tape, &q), collect_grads(&tape, &d)];

    let mut groups = Vec::new();
    for (side_idx, side) in ["query", "doc"].into_iter().enumerate() {
        let params = if side_idx == 0 { &model.query } else { &model.doc };
        for (group, members) in grouped(params) {
            let mut worst = 0.0f64;
            for _ in 0..cfg.samples_per_group {
                let tensor_idx = members[rng.random_range(0..members.len())];
                let len = params.named()[tensor_idx].1.len();
                let elem = rng.random_range(0..len);
                let analytic = grads[side_idx].named()[tensor_idx].1.data()[elem];
                let numeric = central_difference(&model, side_idx, tensor_idx, elem, cfg, &pairs)?;
                worst = worst.max(relative_error(analytic, numeric));
            }
            groups.push(GroupCheck {
                group: format!("{side}.{group}"),
                samples: cfg.samples_per_group,
                max_rel_error: worst,
            });
        }
    }
    let max_rel_error = groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max);
    let samples = groups.iter().map(|g| g.samples).sum();
    Ok(GradCheckReport {
        passed: max_rel_error <= cfg.tolerance,
        groups,
        samples,
        max_rel_error,
        tolerance: cfg.tolerance,
    })
}

/// Group name → indices into `named()` order.
fn grouped(params: &EncoderParams) -> BTreeMap<String, Vec<usize>> {
    let mut out: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, (name, _)) in params.named().into_iter().enumerate() {
        out.entry(param_group(&name)).or_default().push(i);
    }
    out
}

fn central_difference(
    model: &DualEncoder,
    side: usize,
    tensor_idx: usize,
    elem: usize,
    cfg: &GradCheckConfig,
    pairs: &[TrainPair<'_>],
) -> Result<f64> {
    let eval = |delta: f64| -> Result<f64> {
        let mut m = model.clone();
        let params = if side == 0 { &mut m.query } else { &mut m.doc };
        params.named_mut()[tensor_idx].1.data_mut()[elem] += delta;
        loss_value(&m, pairs, cfg.tau)
    };
    Ok((eval(cfg.step)? - eval(-cfg.step)?) / (2.0 * cfg.step))
}

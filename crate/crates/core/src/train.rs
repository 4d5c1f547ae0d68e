//! Contrastive training of the query/document encoder pair with Adam and a
//! cosine learning-rate schedule.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{encode_on_tape, DualEncoder, EncoderConfig, EncoderParams, LayerStack};
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_LEARNING_RATE: f64 = 5e-5;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Borrowed inputs of one query or document. `vis = None` means no image.
#[derive(Debug, Clone, Copy)]
pub struct Item<'a> {
    pub text: &'a LayerStack,
    pub vis: Option<&'a LayerStack>,
}

#[derive(Debug, Clone, Copy)]
pub struct TrainPair<'a> {
    pub query: Item<'a>,
    pub doc: Item<'a>,
}

/// Records encode → score matrix → symmetric InfoNCE for a batch and returns
/// the scalar loss.
pub fn batch_loss(
    tape: &mut Tape,
    cfg: &EncoderConfig,
    query: &EncoderParams<Var>,
    doc: &EncoderParams<Var>,
    batch: &[TrainPair<'_>],
    tau: f64,
) -> Result<Var> {
    let mut q_out = Vec::with_capacity(batch.len());
    let mut d_out = Vec::with_capacity(batch.len());
    for pair in batch {
        q_out.push(encode_on_tape(tape, pair.query.text, pair.query.vis, cfg, query, false)?.0);
        d_out.push(encode_on_tape(tape, pair.doc.text, pair.doc.vis, cfg, doc, false)?.0);
    }
    let mut scores = Vec::with_capacity(batch.len() * batch.len());
    for &q in &q_out {
        for &d in &d_out {
            scores.push(tape.maxsim(q, d)?);
        }
    }
    let s = tape.stack(&scores, batch.len(), batch.len())?;
    tape.symmetric_infonce(s, tau)
}

/// Pulls gradients for every bound parameter; unreachable ones become zero.
pub fn collect_grads(tape: &Tape, bound: &EncoderParams<Var>) -> EncoderParams<Tensor> {
    bound.map(&mut |v| {
        tape.grad(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(*v).shape()))
    })
}

/// Cosine decay from `base` at step 0 to exactly 0 at step `total - 1`.
pub fn cosine_lr(base: f64, step: u64, total: u64) -> f64 {
    if total <= 1 {
        return base;
    }
    let t = step.min(total - 1) as f64 / (total - 1) as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Debug, Clone)]
struct Moments {
    first: EncoderParams,
    second: EncoderParams,
}

impl Moments {
    fn zeros_like(p: &EncoderParams) -> Self {
        Self {
            first: p.zeros_like(),
            second: p.zeros_like(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: DualEncoder,
    query_moments: Moments,
    doc_moments: Moments,
    step: u64,
    pub base_lr: f64,
    pub total_steps: u64,
    pub tau: f64,
}

impl TrainState {
    pub fn new(model: DualEncoder, base_lr: f64, total_steps: u64, tau: f64) -> Result<Self> {
        if !(base_lr >= 0.0 && base_lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be >= 0, got {base_lr}")));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {tau}")));
        }
        if total_steps == 0 {
            return Err(Error::Config("total steps must be >= 1".into()));
        }
        Ok(Self {
            query_moments: Moments::zeros_like(&model.query),
            doc_moments: Moments::zeros_like(&model.doc),
            model,
            step: 0,
            base_lr,
            total_steps,
            tau,
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        cosine_lr(self.base_lr, self.step, self.total_steps)
    }

    /// One forward/backward pass over `batch` followed by an Adam update.
    /// The returned loss is the pre-update loss. A non-finite loss aborts the
    /// step without touching the parameters.
    pub fn train_step(&mut self, batch: &[TrainPair<'_>]) -> Result<StepReport> {
        if batch.len() < 2 {
            return Err(Error::Config(format!(
                "in-batch negatives need a batch of at least 2, got {}",
                batch.len()
            )));
        }
        let mut tape = Tape::new();
        let q = self.model.query.bind(&mut tape);
        let d = self.model.doc.bind(&mut tape);
        let loss = batch_loss(&mut tape, &self.model.config, &q, &d, batch, self.tau)?;
        let loss_value = tape.value(loss).data()[0];
        if !loss_value.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {}", self.step)));
        }
        tape.backward(loss)?;
        let gq = collect_grads(&tape, &q);
        let gd = collect_grads(&tape, &d);

        let lr = self.current_lr();
        let t = (self.step + 1) as i32;
        adam_update(&mut self.model.query, &gq, &mut self.query_moments, lr, t);
        adam_update(&mut self.model.doc, &gd, &mut self.doc_moments, lr, t);
        let report = StepReport {
            step: self.step,
            loss: loss_value,
            lr,
        };
        self.step += 1;
        Ok(report)
    }
}

/// Runs [`TrainState::train_step`] until `total_steps` is reached, drawing
/// batches from seeded per-epoch shuffles of `pairs`. Incomplete trailing
/// batches are dropped.
pub fn fit(
    state: &mut TrainState,
    pairs: &[TrainPair<'_>],
    batch_size: usize,
    seed: u64,
    mut on_step: impl FnMut(&StepReport),
) -> Result<Vec<StepReport>> {
    if batch_size < 2 || batch_size > pairs.len() {
        return Err(Error::Config(format!(
            "batch size {batch_size} must be in 2..={}",
            pairs.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut reports = Vec::new();
    'outer: loop {
        order.shuffle(&mut rng);
        for chunk in order.chunks_exact(batch_size) {
            if state.step >= state.total_steps {
                break 'outer;
            }
            let batch: Vec<TrainPair<'_>> = chunk.iter().map(|&i| pairs[i]).collect();
            let report = state.train_step(&batch)?;
            on_step(&report);
            reports.push(report);
        }
    }
    Ok(reports)
}

fn adam_update(params: &mut EncoderParams, grads: &EncoderParams, m: &mut Moments, lr: f64, t: i32) {
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    let p = params.named_mut();
    let g = grads.named();
    let m1 = m.first.named_mut();
    let m2 = m.second.named_mut();
    for (((( _, p), (_, g)), (_, m1)), (_, m2)) in p.into_iter().zip(g).zip(m1).zip(m2) {
        let p = p.data_mut();
        let m1 = m1.data_mut();
        let m2 = m2.data_mut();
        for (i, &gi) in g.data().iter().enumerate() {
            m1[i] = ADAM_BETA1 * m1[i] + (1.0 - ADAM_BETA1) * gi;
            m2[i] = ADAM_BETA2 * m2[i] + (1.0 - ADAM_BETA2) * gi * gi;
            let mhat = m1[i] / bc1;
            let vhat = m2[i] / bc2;
            p[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(1e-3, 0, 500), 1e-3);
        assert!(cosine_lr(1e-3, 499, 500) <= 1e-6);
        assert!(cosine_lr(1e-3, 19, 20).abs() < 1e-18);
        let mid = cosine_lr(2.0, 50, 101);
        assert!((mid - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        let cfg = EncoderConfig::desk_scale(3, 3, 4, 4).unwrap();
        let model = DualEncoder::init(cfg, 0).unwrap();
        assert!(TrainState::new(model.clone(), -1.0, 10, 0.05).is_err());
        assert!(TrainState::new(model.clone(), 1e-3, 0, 0.05).is_err());
        assert!(TrainState::new(model, 1e-3, 10, 0.0).is_err());
    }
}

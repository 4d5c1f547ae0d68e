//! Reference implementations written with plain loops over nested vectors,
//! independent of the tape, plus random-input helpers shared by the
//! integration tests.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ret_core::encoder::{EncoderConfig, LayerStack};
use ret_core::{AttentionParams, CellParams, EncoderParams, Modality, Tensor};

pub type Mat = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_mat(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.random_range(-scale..scale)).collect())
        .collect()
}

pub fn tensor(m: &Mat) -> Tensor {
    Tensor::from_rows(m).unwrap()
}

pub fn mat(t: &Tensor) -> Mat {
    if t.shape().len() == 1 {
        return vec![t.data().to_vec()];
    }
    t.to_rows()
}

pub fn vector(t: &Tensor) -> Vec<f64> {
    t.data().to_vec()
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len());
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

/// Random stack whose layers each have between 1 and `max_rows` rows.
pub fn random_stack(
    rng: &mut impl Rng,
    modality: Modality,
    depth: usize,
    dim: usize,
    max_rows: usize,
) -> LayerStack {
    let layers = (0..depth)
        .map(|_| {
            let n = rng.random_range(1..=max_rows);
            tensor(&rand_mat(rng, n, dim, 1.0))
        })
        .collect();
    LayerStack::new(modality, layers).unwrap()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let n = b.len();
    let p = b[0].len();
    a.iter()
        .map(|row| {
            assert_eq!(row.len(), n);
            (0..p)
                .map(|j| (0..n).map(|t| row[t] * b[t][j]).sum())
                .collect()
        })
        .collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

pub fn hadamard(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).collect())
        .collect()
}

pub fn add_row(a: &Mat, bias: &[f64]) -> Mat {
    a.iter()
        .map(|x| x.iter().zip(bias).map(|(p, q)| p + q).collect())
        .collect()
}

pub fn map(a: &Mat, f: impl Fn(f64) -> f64) -> Mat {
    a.iter().map(|x| x.iter().map(|&v| f(v)).collect()).collect()
}

pub fn transpose(a: &Mat) -> Mat {
    (0..a[0].len())
        .map(|j| a.iter().map(|row| row[j]).collect())
        .collect()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

pub fn layer_norm(x: &Mat, gain: &[f64], bias: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mu = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            let sd = (var + 1e-5).sqrt();
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mu) / sd * gain[j] + bias[j])
                .collect()
        })
        .collect()
}

pub fn linear(x: &Mat, w: &Tensor, b: &Tensor) -> Mat {
    add_row(&matmul(x, &mat(w)), &vector(b))
}

/// Multi-head scaled dot-product attention, one head at a time.
pub fn attention(q_in: &Mat, kv_in: &Mat, p: &AttentionParams, heads: usize) -> Mat {
    let q = linear(q_in, &p.wq, &p.bq);
    let k = linear(kv_in, &p.wk, &p.bk);
    let v = linear(kv_in, &p.wv, &p.bv);
    let d = q[0].len();
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut concat = vec![vec![0.0; d]; q.len()];
    for h in 0..heads {
        let cols = h * hd..(h + 1) * hd;
        for (i, qi) in q.iter().enumerate() {
            let scores: Vec<f64> = k
                .iter()
                .map(|kj| cols.clone().map(|c| qi[c] * kj[c]).sum::<f64>() * scale)
                .collect();
            let w = softmax(&scores);
            for c in cols.clone() {
                concat[i][c] = w.iter().zip(&v).map(|(a, vj)| a * vj[c]).sum();
            }
        }
    }
    linear(&concat, &p.wo, &p.bo)
}

fn mean(m: &Mat) -> f64 {
    let n: usize = m.iter().map(Vec::len).sum();
    m.iter().flatten().sum::<f64>() / n as f64
}

pub struct StepRef {
    pub h_next: Mat,
    pub c_next: Mat,
    pub gates: [f64; 3],
}

/// One cell step. `e_vis = None` drops the visual branch.
pub fn cell_step(h: &Mat, e_text: &Mat, e_vis: Option<&Mat>, p: &CellParams) -> StepRef {
    let h_hat = layer_norm(
        &add(h, &mat(&p.pos_enc)),
        &vector(&p.ln_input_gain),
        &vector(&p.ln_input_bias),
    );
    let c = add(&attention(&h_hat, &h_hat, &p.self_attn, p.heads), h);
    let zt = attention(&h_hat, e_text, &p.cross_text, p.heads);
    let zv = e_vis.map(|e| attention(&h_hat, e, &p.cross_vis, p.heads));

    let d = h[0].len();
    let mut f_pre = matmul(&zt, &mat(&p.w_f_text));
    if let Some(zv) = &zv {
        f_pre = add(&f_pre, &matmul(zv, &mat(&p.w_f_vis)));
    }
    let f = map(&f_pre, |x| sigmoid(x + p.gate_bias_forget));
    let it = map(&matmul(&zt, &mat(&p.w_i_text)), |x| sigmoid(x + p.gate_bias_input));
    let mut c_next = add(&hadamard(&c, &f), &hadamard(&zt, &it));
    let iv_mean = match &zv {
        Some(zv) => {
            let iv = map(&matmul(zv, &mat(&p.w_i_vis)), |x| sigmoid(x + p.gate_bias_input));
            c_next = add(&c_next, &hadamard(zv, &iv));
            mean(&iv)
        }
        None => sigmoid(p.gate_bias_input),
    };
    let normed = layer_norm(&c_next, &vector(&p.ln_mlp_gain), &vector(&p.ln_mlp_bias));
    let hidden = map(&linear(&normed, &p.mlp_w1, &p.mlp_b1), gelu);
    let mlp = linear(&hidden, &p.mlp_w2, &p.mlp_b2);
    assert_eq!(mlp[0].len(), d);
    StepRef {
        h_next: add(&c_next, &mlp),
        c_next,
        gates: [mean(&f), mean(&it), iv_mean],
    }
}

/// Full encoder forward pass.
pub fn encode(
    text: &LayerStack,
    vis: Option<&LayerStack>,
    cfg: &EncoderConfig,
    p: &EncoderParams,
) -> (Mat, Vec<[f64; 3]>) {
    let mut h = mat(&p.h0);
    let mut gates = Vec::new();
    for l in 0..cfg.layers {
        let pt = &p.text_proj[l];
        let et = linear(&mat(&text.layers()[cfg.text_layers[l]]), &pt.weight, &pt.bias);
        let ev = vis.map(|v| {
            let pv = &p.vis_proj[l];
            linear(&mat(&v.layers()[cfg.vis_layers[l]]), &pv.weight, &pv.bias)
        });
        let out = cell_step(&h, &et, ev.as_ref(), &p.cell);
        h = out.h_next;
        gates.push(out.gates);
    }
    let mut out = matmul(&h, &mat(&p.w_final));
    if cfg.normalize_rows {
        for row in &mut out {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
    }
    (out, gates)
}

/// MaxSim by double loop.
pub fn maxsim(q: &Mat, d: &Mat) -> f64 {
    q.iter()
        .map(|qi| {
            d.iter()
                .map(|dj| qi.iter().zip(dj).map(|(a, b)| a * b).sum::<f64>())
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum()
}

/// Symmetric InfoNCE by direct evaluation of both cross-entropies.
pub fn infonce(s: &Mat, tau: f64) -> f64 {
    let b = s.len();
    let mut total = 0.0;
    for i in 0..b {
        let row: f64 = (0..b).map(|j| (s[i][j] / tau).exp()).sum();
        let col: f64 = (0..b).map(|j| (s[j][i] / tau).exp()).sum();
        total += -(s[i][i] / tau) + row.ln();
        total += -(s[i][i] / tau) + col.ln();
    }
    total / (2.0 * b as f64)
}

/// Worst relative error between backward and central differences (step
/// 1e-5) for each input, checking up to `per_input` sampled entries of each.
pub fn fd_errors(
    inputs: &[Tensor],
    per_input: usize,
    seed: u64,
    build: &dyn Fn(&mut ret_core::Tape, &[ret_core::Var]) -> ret_core::Var,
) -> Vec<f64> {
    use ret_core::Tape;
    let mut tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars);
    tape.backward(loss).unwrap();
    let eval = |xs: &[Tensor]| {
        let mut t = Tape::new();
        let vs: Vec<_> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let l = build(&mut t, &vs);
        t.value(l).data()[0]
    };
    let mut r = rng(seed);
    let h = 1e-5;
    inputs
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let analytic = tape.grad(vars[i]).expect("input reachable from loss").clone();
            let picks: Vec<usize> = if x.len() <= per_input {
                (0..x.len()).collect()
            } else {
                (0..per_input).map(|_| r.random_range(0..x.len())).collect()
            };
            picks
                .into_iter()
                .map(|e| {
                    let mut plus = inputs.to_vec();
                    plus[i].data_mut()[e] += h;
                    let mut minus = inputs.to_vec();
                    minus[i].data_mut()[e] -= h;
                    let n = (eval(&plus) - eval(&minus)) / (2.0 * h);
                    let a = analytic.data()[e];
                    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
                })
                .fold(0.0, f64::max)
        })
        .collect()
}

/// Replaces every trainable tensor of `p` with uniform noise in
/// `[-scale, scale]`, keeping layer-norm gains near one.
pub fn randomize_cell(p: &mut CellParams, rng: &mut impl Rng, scale: f64) {
    p.visit_mut("cell", &mut |name, t| {
        let base = if name.ends_with(".gain") { 1.0 } else { 0.0 };
        for v in t.data_mut() {
            *v = base + rng.random_range(-scale..scale);
        }
    });
}

pub fn cell_tensors(p: &CellParams) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    p.visit("cell", &mut |n, t| out.push((n, t.clone())));
    out
}

/// Rebuilds cell parameters from bound handles listed in visit order.
pub fn bind_cell<T: Clone>(p: &CellParams, handles: &[T]) -> CellParams<T> {
    let mut it = handles.iter().cloned();
    p.map(&mut |_| it.next().expect("handle per tensor"))
}

fn mean_row(stack: &LayerStack) -> Vec<f64> {
    let dim = stack.source_dim();
    let mut acc = vec![0.0; dim];
    let mut n = 0.0;
    for layer in stack.layers() {
        for row in layer.data().chunks(dim) {
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v;
            }
            n += 1.0;
        }
    }
    acc.iter().map(|a| a / n).collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Held-out R@1 of a linear readout of the planted latents: mean-pooled
/// rows per modality, ranked by summed cosine over the shared modalities.
pub fn linear_probe_r1(set: &ret_core::fixtures::FixtureSet) -> f64 {
    use ret_core::fixtures::Split;
    let docs: Vec<(Vec<f64>, Option<Vec<f64>>)> = set
        .docs
        .iter()
        .map(|d| (mean_row(&d.text), d.vis.as_ref().map(mean_row)))
        .collect();
    let test: Vec<_> = set.queries.iter().filter(|q| q.split == Split::Test).collect();
    let mut hits = 0;
    for q in &test {
        let (qt, qv) = (mean_row(&q.text), mean_row(&q.vis));
        let mut best = (f64::NEG_INFINITY, 0);
        for (j, (dt, dv)) in docs.iter().enumerate() {
            let s = cosine(&qt, dt) + dv.as_ref().map_or(0.0, |v| cosine(&qv, v));
            let s = s / if dv.is_some() { 2.0 } else { 1.0 };
            if s > best.0 {
                best = (s, j);
            }
        }
        if set.docs[best.1].id == q.gold {
            hits += 1;
        }
    }
    hits as f64 / test.len() as f64
}

/// Held-out R@1 of randomly initialized, untrained encoders, one per seed.
pub fn untrained_r1(corpus: &ret_core::pipeline::Corpus, seeds: std::ops::Range<u64>) -> Vec<f64> {
    use ret_core::fixtures::Split;
    use ret_core::pipeline::{build_index, LoadedItem};
    use ret_core::{DualEncoder, EvalRecord};
    let (td, vd, tdim, vdim) = corpus.shape().unwrap();
    let cfg = ret_core::RunConfig::default().encoder_config(td, vd, tdim, vdim).unwrap();
    let test: Vec<_> = corpus.queries.iter().filter(|q| q.split == Split::Test).collect();
    let items: Vec<LoadedItem> = test.iter().map(|q| q.item.clone()).collect();
    let records: Vec<EvalRecord> = test
        .iter()
        .map(|q| EvalRecord {
            query_id: q.item.id.clone(),
            gold_doc_ids: [q.gold.clone()].into_iter().collect(),
            answer: None,
        })
        .collect();
    seeds
        .map(|seed| {
            let model = DualEncoder::init(cfg.clone(), seed).unwrap();
            let index = build_index(&model, &corpus.docs).unwrap();
            let results = ret_core::pipeline::search_all(&model, &index, &items, 1).unwrap();
            ret_core::recall_at_k(&results, &records, 1).unwrap()
        })
        .collect()
}

/// Mean of per-seed R@1 and the pooled binomial sigma around chance `p`.
pub fn pooled_mean_sigma(r1: &[f64], queries: usize, p: f64) -> (f64, f64) {
    let mean = r1.iter().sum::<f64>() / r1.len() as f64;
    let sigma = (p * (1.0 - p) / (queries * r1.len()) as f64).sqrt();
    (mean, sigma)
}

//! Finite-difference helpers for unit tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Reduces `out` to a scalar with fixed random weights so that every output
/// element contributes a distinct coefficient.
pub fn weighted_sum(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&mut rng, tape.value(out).shape());
    let w = tape.constant(w);
    let p = tape.mul(out, w).unwrap();
    tape.sum(p)
}

/// Largest relative error between backward and central differences over
/// every input element.
pub fn fd_error(inputs: &[Tensor], build: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars);
    tape.backward(loss).unwrap();
    let analytic: Vec<Tensor> = vars.iter().map(|&v| tape.grad(v).unwrap().clone()).collect();
    let eval = |xs: &[Tensor]| {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let l = build(&mut t, &vs);
        t.value(l).data()[0]
    };
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        for e in 0..x.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[e] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[e] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic[i].data()[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    worst
}

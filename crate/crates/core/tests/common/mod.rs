#![allow(dead_code)]

use camoforge::diffmath::{Tape, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Largest relative error between the tape gradient and a central finite
/// difference of `f`, over `probes` randomly chosen coordinates of `x`.
///
/// Relative error is `|a - n| / max(|a|, |n|, floor)` so coordinates with a
/// vanishing gradient are compared on an absolute scale.
pub fn gradcheck<F>(x: &Tensor, probes: usize, step: f64, floor: f64, seed: u64, f: F) -> f64
where
    F: Fn(&mut Tape, Var) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let leaf = tape.param(x.clone()).unwrap();
    let out = f(&mut tape, leaf).unwrap();
    let grads = tape.backward(out).unwrap().wrt(leaf);

    let eval = |t: &Tensor| {
        let mut tape = Tape::new();
        let leaf = tape.leaf(t.clone()).unwrap();
        let out = f(&mut tape, leaf).unwrap();
        tape.data(out)[0]
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let i = rng.gen_range(0..x.len());
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * step);
        let analytic = grads[i];
        let denom = analytic.abs().max(numeric.abs()).max(floor);
        worst = worst.max((analytic - numeric).abs() / denom);
    }
    worst
}

pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Fixed pseudo-random weights so scalar outputs mix every element.
pub fn weighted_sum(tape: &mut Tape, x: Var, seed: u64) -> Result<Var, TensorError> {
    let shape = tape.shape(x).to_vec();
    let w = random_tensor(&shape, -1.0, 1.0, seed);
    let wv = tape.constant(w)?;
    let m = tape.mul(x, wv)?;
    tape.sum(m)
}

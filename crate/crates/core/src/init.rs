//! Weight initialization schemes.
//!
//! All draws come from caller-supplied RNGs so that parameter values depend
//! only on the seed and the parameter's registration name, never on
//! iteration order elsewhere in the program.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Uniform draw over [-bound, bound).
pub fn uniform(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

/// Bound for fan-based uniform initialization: sqrt(6 / (fan_in + fan_out)).
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Fan-based uniform initialization for a fan_in x fan_out weight matrix.
pub fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Vec<f64> {
    uniform(rng, fan_in * fan_out, glorot_bound(fan_in, fan_out))
}

pub fn zeros(n: usize) -> Vec<f64> {
    vec![0.0; n]
}

pub fn constant(n: usize, v: f64) -> Vec<f64> {
    vec![v; n]
}

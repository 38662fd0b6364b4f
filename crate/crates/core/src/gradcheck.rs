//! Finite-difference checking of graph gradients.

use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Outcome of a [`check`] run.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// Largest `|fd - ad| / max(|fd|, |ad|, floor)` over the sampled points.
    pub max_rel_error: f64,
    /// Flat indices that were compared.
    pub points: Vec<usize>,
    /// Candidate indices dropped as too close to a kink: one-sided slopes disagree, or the
    /// central difference moves when the step is halved.
    pub skipped: usize,
}

/// Denominator floor of the relative error, so exact zeros compare absolutely.
pub const REL_FLOOR: f64 = 1e-6;

/// Largest relative change of the central difference when the step is halved before the
/// point counts as straddling a kink. Smooth points sit many orders of magnitude below.
pub const HALVING_TOL: f64 = 1e-4;

/// Compares the reverse-mode gradient of the scalar `f(x)` with central differences of
/// step `step` at `points` random coordinates of `x0`.
pub fn check(
    shape: &[usize],
    x0: &[f64],
    points: usize,
    step: f64,
    seed: u64,
    f: impl Fn(&mut Graph<f64>, Var) -> Var,
) -> GradCheck {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::from_f64(shape, x0), true);
    let l = f(&mut g, x);
    let f0 = g.value(l).item();
    let grads = g.backward(l);
    let ad = grads
        .get(x)
        .map(|t| t.data().to_vec())
        .unwrap_or_else(|| alloc::vec![0.0; x0.len()]);

    let eval = |i: usize, d: f64| {
        let mut v = x0.to_vec();
        v[i] += d;
        let mut g = Graph::<f64>::inference();
        let x = g.constant(Tensor::from_f64(shape, &v));
        let l = f(&mut g, x);
        g.value(l).item()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = GradCheck {
        max_rel_error: 0.0,
        points: Vec::with_capacity(points),
        skipped: 0,
    };
    let budget = points * 10;
    let mut tries = 0;
    while out.points.len() < points.min(x0.len()) && tries < budget {
        tries += 1;
        let i = rng.random_range(0..x0.len());
        if out.points.contains(&i) {
            continue;
        }
        let (up, down) = (eval(i, step), eval(i, -step));
        let (right, left) = ((up - f0) / step, (f0 - down) / step);
        if (right - left).abs() > 0.1 * right.abs().max(left.abs()) + 1e-4 {
            out.skipped += 1;
            continue;
        }
        let fd = (up - down) / (2.0 * step);
        let half = (eval(i, step / 2.0) - eval(i, -step / 2.0)) / step;
        if (fd - half).abs() > HALVING_TOL * fd.abs().max(half.abs()).max(REL_FLOOR) {
            out.skipped += 1;
            continue;
        }
        let rel = (fd - ad[i]).abs() / fd.abs().max(ad[i].abs()).max(REL_FLOOR);
        out.max_rel_error = out.max_rel_error.max(rel);
        out.points.push(i);
    }
    out
}

/// Deterministic pseudo-random values in `[lo, hi)`.
pub fn random_input(len: usize, lo: f64, hi: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(lo..hi)).collect()
}

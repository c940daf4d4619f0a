//! Central-difference verification of reverse-mode gradients.

use super::{DiffTensor, Tape};
use crate::error::{Error, Result};
use rand::Rng;

/// Compares the tape gradient of `f` at `x` against central differences on
/// `n_samples` seeded coordinate choices. Returns the maximum relative
/// deviation, where rel = |analytic - numeric| / max(|analytic|, |numeric|,
/// 1e-8). Errors if any evaluation is non-finite.
pub fn finite_diff_check<F>(f: F, x: &DiffTensor, n_samples: usize, h: f64, seed: u64) -> Result<f64>
where
    F: Fn(&Tape, &DiffTensor) -> Result<DiffTensor>,
{
    if h <= 0.0 {
        return Err(Error::domain(format!("step size must be positive, got {h}")));
    }
    let tape = Tape::new();
    let xt = tape.leaf(x);
    let loss = f(&tape, &xt)?;
    let l0 = loss.item()?;
    if !l0.is_finite() {
        return Err(Error::numeric("loss is not finite at the base point"));
    }
    let grads = tape.backward(&loss)?;
    let analytic = grads.get(&xt)?.map(|g| g.to_vec());

    let n = x.shape().numel();
    let mut coords: Vec<usize> = (0..n).collect();
    if n_samples < n {
        let mut rng = crate::rng::stream(seed, "finite-diff");
        // Partial Fisher-Yates: the first n_samples entries become the sample.
        for i in 0..n_samples {
            let j = i + rng.gen_range(0..n - i);
            coords.swap(i, j);
        }
        coords.truncate(n_samples);
    }

    let eval = |vals: Vec<f64>| -> Result<f64> {
        let t = Tape::new();
        let xp = t.leaf(&DiffTensor::from_vec(vals, x.shape().dims())?);
        let l = f(&t, &xp)?.item()?;
        if !l.is_finite() {
            return Err(Error::numeric("loss is not finite at a perturbed point"));
        }
        Ok(l)
    };

    let mut max_rel: f64 = 0.0;
    for &i in &coords {
        let mut vp = x.values().to_vec();
        vp[i] += h;
        let lp = eval(vp)?;
        let mut vm = x.values().to_vec();
        vm[i] -= h;
        let lm = eval(vm)?;
        let numeric = (lp - lm) / (2.0 * h);
        let a = analytic.as_ref().map(|g| g[i]).unwrap_or(0.0);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

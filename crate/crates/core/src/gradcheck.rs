//! Central finite-difference gradient probes.
//!
//! Every backward rule in this crate is validated against these. The probe
//! perturbs one stored value at a time and rebuilds the forward pass on an
//! eval tape, so it works unchanged for raw kernels and for whole models.

use crate::numerics::Tensor;
use crate::Result;

/// d(loss)/d(input[i]) for every i, by central differences. `loss_fn` must
/// recompute the loss from the tensor's *current* stored values (typically
/// a closure that reruns the forward pass on a fresh eval tape).
pub fn fd_gradient(
    input: &Tensor,
    step: f64,
    loss_fn: &mut dyn FnMut() -> Result<f64>,
) -> Result<Vec<f64>> {
    let base = input.to_vec();
    let mut grad = vec![0.0; base.len()];
    for i in 0..base.len() {
        input.set_at(i, base[i] + step);
        let up = loss_fn()?;
        input.set_at(i, base[i] - step);
        let down = loss_fn()?;
        input.set_at(i, base[i]);
        grad[i] = (up - down) / (2.0 * step);
    }
    Ok(grad)
}

/// d(loss)/d(input[idx]) only — used when probing single sampled entries of
/// large parameter tensors.
pub fn fd_gradient_at(
    input: &Tensor,
    idx: usize,
    step: f64,
    loss_fn: &mut dyn FnMut() -> Result<f64>,
) -> Result<f64> {
    let base = input.at(idx);
    input.set_at(idx, base + step);
    let up = loss_fn()?;
    input.set_at(idx, base - step);
    let down = loss_fn()?;
    input.set_at(idx, base);
    Ok((up - down) / (2.0 * step))
}

/// Relative error with a floor, so near-zero gradient pairs compare sanely:
/// |a - b| / max(|a|, |b|, floor).
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

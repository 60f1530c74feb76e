//! Central finite-difference gradient checking.
//!
//! Used by the test suites to validate every analytic gradient against an
//! independent numerical estimate. The check only re-evaluates the forward
//! closure, so it shares no code with the reverse sweep it verifies.

use crate::tensor::{Result, Tensor};

/// Central finite-difference gradients of a scalar function of several
/// tensors, perturbing one element at a time.
pub fn finite_difference_grads(
    f: &mut dyn FnMut(&[Tensor]) -> Result<f64>,
    params: &[Tensor],
    step: f64,
) -> Result<Vec<Tensor>> {
    let mut grads = Vec::with_capacity(params.len());
    for (pi, p) in params.iter().enumerate() {
        let mut g = vec![0.0; p.len()];
        for (ei, gslot) in g.iter_mut().enumerate() {
            let mut plus = params.to_vec();
            let mut minus = params.to_vec();
            plus[pi] = perturb(p, ei, step)?;
            minus[pi] = perturb(p, ei, -step)?;
            *gslot = (f(&plus)? - f(&minus)?) / (2.0 * step);
        }
        grads.push(Tensor::from_vec(p.shape(), g)?);
    }
    Ok(grads)
}

fn perturb(t: &Tensor, index: usize, delta: f64) -> Result<Tensor> {
    let mut data = t.data().to_vec();
    data[index] += delta;
    Tensor::from_vec(t.shape(), data)
}

/// Worst relative error between analytic and numeric gradients, using
/// |a - n| / max(|a|, |n|, floor).
pub fn max_rel_error(analytic: &[Tensor], numeric: &[Tensor], floor: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for (a, n) in analytic.iter().zip(numeric) {
        for (&av, &nv) in a.data().iter().zip(n.data()) {
            let denom = av.abs().max(nv.abs()).max(floor);
            worst = worst.max((av - nv).abs() / denom);
        }
    }
    worst
}

//! Central finite-difference gradient checking in 64-bit.
//!
//! The numeric side only evaluates the loss; it never reads gradients from
//! the tape, so it stays independent of the backward rules it checks.

use rand::seq::index::sample;
use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::nn::{Graph, ParamStore};
use crate::tensor::Tensor;

pub const FD_EPS: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub coords_checked: usize,
    /// `‖analytic − numeric‖ / (‖analytic‖ + ‖numeric‖)` over every checked
    /// coordinate.
    pub rel_error: f64,
    pub max_abs_error: f64,
    /// Smallest ReLU input at the checked point; see [`Tape::kink_margin`].
    pub kink_margin: f64,
}

fn report(analytic: &[f64], numeric: &[f64], kink_margin: f64) -> GradCheckReport {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let denom = na + nn;
    GradCheckReport {
        coords_checked: analytic.len(),
        rel_error: if denom == 0.0 { 0.0 } else { diff / denom },
        max_abs_error: analytic
            .iter()
            .zip(numeric)
            .map(|(a, n)| (a - n).abs())
            .fold(0.0, f64::max),
        kink_margin,
    }
}

/// Checks the gradient of `loss` with respect to every parameter tensor of
/// `store`, sampling at most `per_tensor` coordinates from each.
pub fn check_params<R, F>(
    store: &mut ParamStore<f64>,
    loss: F,
    per_tensor: usize,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    R: Rng,
    F: for<'t> Fn(&Graph<'t, f64>) -> Result<Var<'t, f64>>,
{
    let (grads, kink_margin) = {
        let tape = Tape::new();
        let g = Graph::new(&tape, store);
        let l = loss(&g)?;
        (g.backward(l)?, tape.kink_margin())
    };
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let tape = Tape::new();
        let g = Graph::new(&tape, store);
        Ok(loss(&g)?.item())
    };
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for ti in 0..store.len() {
        let numel = store.tensors()[ti].numel();
        let picks = sample(rng, numel, per_tensor.min(numel)).into_vec();
        for k in picks {
            let orig = store.tensors()[ti].data()[k];
            store.tensors_mut()[ti].data_mut()[k] = orig + FD_EPS;
            let plus = eval(store)?;
            store.tensors_mut()[ti].data_mut()[k] = orig - FD_EPS;
            let minus = eval(store)?;
            store.tensors_mut()[ti].data_mut()[k] = orig;
            numeric.push((plus - minus) / (2.0 * FD_EPS));
            analytic.push(grads[ti].as_ref().map_or(0.0, |g| g.data()[k]));
        }
    }
    Ok(report(&analytic, &numeric, kink_margin))
}

/// Checks the gradient with respect to explicit input tensors.
pub fn check_inputs<F>(inputs: &mut [Tensor<f64>], loss: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let l = loss(&tape, &vars)?;
    let g = tape.backward(l)?;
    let mut analytic = Vec::new();
    for v in &vars {
        analytic.extend_from_slice(g.get(*v).expect("leaf gradient").data());
    }
    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        Ok(loss(&tape, &vars)?.item())
    };
    let mut numeric = Vec::new();
    for ti in 0..inputs.len() {
        for k in 0..inputs[ti].numel() {
            let orig = inputs[ti].data()[k];
            inputs[ti].data_mut()[k] = orig + FD_EPS;
            let plus = eval(inputs)?;
            inputs[ti].data_mut()[k] = orig - FD_EPS;
            let minus = eval(inputs)?;
            inputs[ti].data_mut()[k] = orig;
            numeric.push((plus - minus) / (2.0 * FD_EPS));
        }
    }
    Ok(report(&analytic, &numeric, tape.kink_margin()))
}

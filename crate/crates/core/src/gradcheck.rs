//! Finite-difference oracles for verifying reverse-mode gradients.
//!
//! Central differences evaluate the loss function itself; nothing here
//! touches the backward rules under test. Kept in f64: the truncation error
//! of the central difference is O(h^2) and cancellation costs about
//! `eps * |f| / h`, so `h = 1e-5` balances both for unit-scale losses.

use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Central-difference gradient of `loss` with respect to every entry of
/// every parameter, in parameter-set order.
pub fn finite_diff_grad<F>(params: &ParamSet<f64>, h: f64, loss: F) -> Vec<Tensor<f64>>
where
    F: Fn(&ParamSet<f64>) -> f64,
{
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut out = Vec::with_capacity(names.len());
    for name in &names {
        let base = params.get(name).unwrap().value().clone();
        let mut grad = vec![0.0f64; base.len()];
        for (i, slot) in grad.iter_mut().enumerate() {
            let plus = perturbed(params, name, i, h);
            let minus = perturbed(params, name, i, -h);
            *slot = (loss(&plus) - loss(&minus)) / (2.0 * h);
        }
        out.push(Tensor::from_vec(base.shape().to_vec(), grad).unwrap());
    }
    out
}

fn perturbed(params: &ParamSet<f64>, name: &str, index: usize, delta: f64) -> ParamSet<f64> {
    let mut out = ParamSet::new();
    for (n, var) in params.iter() {
        if n == name {
            let mut t = var.value().clone();
            t.data_mut()[index] += delta;
            out.insert(n, crate::autodiff::Var::param(t));
        } else {
            out.insert(n, var.clone());
        }
    }
    out
}

/// `|a - b|_inf / max(|b|_inf, floor)`: error relative to the gradient's
/// own scale, so coordinates that are legitimately tiny do not dominate.
pub fn rel_error_inf(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let diff = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0f64, f64::max);
    let scale = b.data().iter().map(|v| v.abs()).fold(0.0f64, f64::max);
    diff / scale.max(1e-12)
}

/// Worst relative error across a list of (checked, reference) tensor pairs.
pub fn max_rel_error(checked: &[Tensor<f64>], reference: &[Tensor<f64>]) -> f64 {
    checked
        .iter()
        .zip(reference)
        .map(|(a, b)| rel_error_inf(a, b))
        .fold(0.0f64, f64::max)
}

//! Lyapunov diagnostics of the example-stability mechanism.
//!
//! The attack process is read as a dynamical system `xdot = alpha * grad J`.
//! With the quadratic candidate `V(x) = ||x - x0||^2` and the control term
//! `u = -alpha * grad J(x, y_p)`, a normal example has `xdot = 0` and so
//! `Vdot = 0`; an adversarial example, whose control term sees the true label
//! while the perturbation follows the predicted one, keeps a non-zero
//! residual.

use alloc::format;

use crate::error::{Error, Result};
use crate::model::Classifier;
use crate::tensor::{ensure_shape, Tensor};

/// Perturbation step `alpha` and iteration interval `delta_t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DynamicsConfig {
    pub alpha: f64,
    pub delta_t: f64,
}

impl DynamicsConfig {
    pub fn new(alpha: f64, delta_t: f64) -> Result<Self> {
        if !(alpha > 0.0) || !(delta_t > 0.0) {
            return Err(Error::invalid(format!(
                "alpha and delta_t must be positive, got {alpha} and {delta_t}"
            )));
        }
        Ok(DynamicsConfig { alpha, delta_t })
    }
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        DynamicsConfig { alpha: 0.075, delta_t: 1.0 }
    }
}

/// `V(x) = ||x - x0||_2^2`.
pub fn lyapunov_v(x: &Tensor, x0: &Tensor) -> Result<f64> {
    ensure_shape(x0.shape(), x.shape())?;
    Ok(x.data().iter().zip(x0.data()).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// `u = -alpha * grad_x J(x, predicted_label)`.
pub fn control_term<C: Classifier + ?Sized>(model: &C, x: &Tensor, predicted_label: usize, alpha: f64) -> Result<Tensor> {
    Ok(perturbation_term(model, x, predicted_label, alpha)?.map(|v| -v))
}

/// The open-loop drift `alpha * grad_x J(x, label)`.
pub fn perturbation_term<C: Classifier + ?Sized>(model: &C, x: &Tensor, label: usize, alpha: f64) -> Result<Tensor> {
    Ok(model.input_gradient(x, label)?.scale(alpha))
}

/// Closed-loop velocity `alpha * (grad J(x, perturb_label) - grad J(x, control_label))`.
/// Zero exactly when both labels agree.
pub fn stability_residual<C: Classifier + ?Sized>(
    model: &C,
    x: &Tensor,
    perturb_label: usize,
    control_label: usize,
    alpha: f64,
) -> Result<Tensor> {
    let drift = perturbation_term(model, x, perturb_label, alpha)?;
    let control = control_term(model, x, control_label, alpha)?;
    drift.add(&control)
}

/// `Vdot = 2 <x - x0, xdot>`.
pub fn vdot(x: &Tensor, x0: &Tensor, xdot: &Tensor) -> Result<f64> {
    ensure_shape(x0.shape(), x.shape())?;
    ensure_shape(x.shape(), xdot.shape())?;
    let inner: f64 = x
        .data()
        .iter()
        .zip(x0.data())
        .zip(xdot.data())
        .map(|((a, b), d)| (a - b) * d)
        .sum();
    Ok(2.0 * inner)
}

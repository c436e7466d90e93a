//! Per-model adaptive miscoverage via scale-free online gradient descent.

use serde::{Deserialize, Serialize};

/// Pinball loss `α(ᾱ − α_t) − min{0, ᾱ − α_t}` at target level `α`.
pub fn pinball_loss(alpha_bar: f64, alpha: f64, target_alpha: f64) -> f64 {
    let r = alpha_bar - alpha;
    target_alpha * r - r.min(0.0)
}

/// `𝕀[ᾱ < α_t] − α`; the boundary `ᾱ = α_t` counts as covered.
pub fn pinball_gradient(alpha_bar: f64, alpha: f64, target_alpha: f64) -> f64 {
    miss_indicator(alpha_bar, alpha) - target_alpha
}

/// `err_t` as implied by the optimal level: 1 when `ᾱ < α_t`.
pub fn miss_indicator(alpha_bar: f64, alpha: f64) -> f64 {
    if alpha_bar < alpha {
        1.0
    } else {
        0.0
    }
}

/// Adaptive miscoverage level of one model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaState {
    pub alpha: f64,
    /// Running `Σ ‖∇L‖²`.
    pub grad_sq_sum: f64,
    pub eta: f64,
}

impl AlphaState {
    pub fn new(alpha: f64, eta: f64) -> Self {
        Self {
            alpha,
            grad_sq_sum: 0.0,
            eta,
        }
    }

    /// One SF-OGD step from an observed optimal level `alpha_bar`.
    pub fn update(&mut self, alpha_bar: f64, target_alpha: f64) {
        self.apply_gradient(pinball_gradient(alpha_bar, self.alpha, target_alpha));
    }

    /// One SF-OGD step from a precomputed gradient.
    pub fn apply_gradient(&mut self, g: f64) {
        self.grad_sq_sum += g * g;
        if self.grad_sq_sum > 0.0 {
            self.alpha -= self.eta * g / self.grad_sq_sum.sqrt();
        }
    }
}

/// Value form of [`AlphaState::update`].
pub fn sfogd_update(mut state: AlphaState, alpha_bar: f64, target_alpha: f64) -> AlphaState {
    state.update(alpha_bar, target_alpha);
    state
}

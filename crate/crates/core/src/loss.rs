//! Per-sample DPO losses, the robust (worst-case) loss and its gradient, and
//! the rDPO / DrDPO baselines.
//!
//! With margin `Δ` and temperature `β`, the per-sample loss for label
//! `c ∈ {+1, −1}` is `ℓ_c = −log σ(c·β·Δ) = softplus(−c·β·Δ)`. A soft score
//! `q` turns it into `q·ℓ₁ + (1−q)·ℓ₋₁`; the robust loss replaces `q` by the
//! adversarial `p̂` from [`crate::dro`].

use serde::{Deserialize, Serialize};

use crate::dro::{check_probability, regularizer_coefficient, AmbiguitySet, Divergence, Label};
use crate::error::{Error, Result};
use crate::policy::{MarginRecord, PreferencePolicy};

pub const DEFAULT_BETA: f64 = 0.25;
/// Tolerance on the agreement between the direct and regularized paths.
pub const PATH_AGREEMENT_TOL: f64 = 1e-12;

/// `log(1 + e^x)` without overflow or cancellation.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn per_sample_loss(delta: f64, beta: f64, c: Label) -> f64 {
    softplus(-c.sign() * beta * delta)
}

/// `(ℓ₁, ℓ₋₁)` for a margin.
pub fn label_losses(delta: f64, beta: f64) -> (f64, f64) {
    (per_sample_loss(delta, beta, Label::Pos), per_sample_loss(delta, beta, Label::Neg))
}

pub fn dpo_soft_loss(l1: f64, lm1: f64, q: f64) -> Result<f64> {
    check_probability("q", q)?;
    Ok(q * l1 + (1.0 - q) * lm1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l1: f64,
    pub lm1: f64,
    pub dpo: f64,
    pub dro: f64,
    pub reg_term: f64,
    pub p_hat: f64,
}

/// Worst-case loss over the ambiguity set, computed two ways.
///
/// The direct path evaluates `p̂·ℓ₁ + (1−p̂)·ℓ₋₁`. The second path adds the
/// uncertainty-weighted penalty `coef(q, ρ)·|ℓ₁ − ℓ₋₁|` to the soft DPO loss
/// (for KL balls, where no closed-form coefficient exists, the penalty is
/// `(p̂ − q)(ℓ₁ − ℓ₋₁)`). Disagreement beyond [`PATH_AGREEMENT_TOL`] is an
/// invariant breach.
pub fn dro_loss(l1: f64, lm1: f64, q: f64, ambiguity: &AmbiguitySet) -> Result<LossBreakdown> {
    let worst = ambiguity.worst_case(q, l1, lm1)?;
    let p_hat = worst.p_hat;
    let dro = p_hat * l1 + (1.0 - p_hat) * lm1;
    let dpo = dpo_soft_loss(l1, lm1, q)?;
    let reg_term = match ambiguity.divergence {
        Divergence::ChiSquared => regularizer_coefficient(q, ambiguity.rho, worst.direction)? * (l1 - lm1).abs(),
        Divergence::Kl => (p_hat - q) * (l1 - lm1),
    };
    if (dro - (dpo + reg_term)).abs() > PATH_AGREEMENT_TOL {
        return Err(Error::Invariant(format!(
            "robust loss paths disagree: direct {dro}, regularized {} (q={q}, l1={l1}, lm1={lm1})",
            dpo + reg_term
        )));
    }
    Ok(LossBreakdown { l1, lm1, dpo, dro, reg_term, p_hat })
}

/// Gradient of `a·ℓ₁ + (1−a)·ℓ₋₁` in θ for a fixed weight `a`:
/// `β·(σ(βΔ) − a)·∂Δ/∂θ`.
pub fn weighted_label_gradient(margin: &MarginRecord, beta: f64, a: f64) -> Vec<f64> {
    let scale = beta * (sigmoid(beta * margin.delta) - a);
    margin.grad_delta.iter().map(|g| scale * g).collect()
}

/// Gradient of `ℓ_c` in θ: `−σ(−c·β·Δ)·c·β·∂Δ/∂θ`.
pub fn label_gradient(margin: &MarginRecord, beta: f64, c: Label) -> Vec<f64> {
    let s = c.sign();
    let scale = -sigmoid(-s * beta * margin.delta) * s * beta;
    margin.grad_delta.iter().map(|g| scale * g).collect()
}

/// Robust loss and its gradient for one sample. The worst-case `p̂` is held
/// fixed while differentiating (valid because the inner maximizer is unique
/// away from loss ties).
pub fn dro_loss_and_gradient<P: PreferencePolicy + ?Sized>(
    policy: &P,
    prompt: &str,
    y1: &str,
    y2: &str,
    q: f64,
    ambiguity: &AmbiguitySet,
    beta: f64,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let margin = policy.margin(prompt, y1, y2)?;
    let (l1, lm1) = label_losses(margin.delta, beta);
    let breakdown = dro_loss(l1, lm1, q, ambiguity)?;
    let g1 = label_gradient(&margin, beta, Label::Pos);
    let gm1 = label_gradient(&margin, beta, Label::Neg);
    let p = breakdown.p_hat;
    let grad = g1.iter().zip(&gm1).map(|(a, b)| p * a + (1.0 - p) * b).collect();
    Ok((breakdown, grad))
}

pub fn dro_gradient<P: PreferencePolicy + ?Sized>(
    policy: &P,
    prompt: &str,
    y1: &str,
    y2: &str,
    q: f64,
    ambiguity: &AmbiguitySet,
    beta: f64,
) -> Result<Vec<f64>> {
    Ok(dro_loss_and_gradient(policy, prompt, y1, y2, q, ambiguity, beta)?.1)
}

fn check_flip_rate(eps: f64) -> Result<()> {
    if (0.0..0.5).contains(&eps) {
        Ok(())
    } else {
        Err(Error::invalid(format!("flip rate eps must lie in [0, 0.5), got {eps}")))
    }
}

/// Loss reweighting that is unbiased for the clean loss under label flips at
/// rate `eps`; `l_c` is the loss on the observed label.
pub fn rdpo_loss(l_c: f64, l_negc: f64, eps: f64) -> Result<f64> {
    check_flip_rate(eps)?;
    Ok(((1.0 - eps) * l_c - eps * l_negc) / (1.0 - 2.0 * eps))
}

/// Weight on `ℓ₁` when [`rdpo_loss`] is written as `a·ℓ₁ + (1−a)·ℓ₋₁` for
/// the observed label `c`.
pub fn rdpo_label_weight(c: Label, eps: f64) -> Result<f64> {
    check_flip_rate(eps)?;
    let w = match c {
        Label::Pos => 1.0 - eps,
        Label::Neg => -eps,
    };
    Ok(w / (1.0 - 2.0 * eps))
}

/// `β′·log mean exp(ℓᵢ/β′)`, with max-subtraction.
pub fn drdpo_objective(per_sample_losses: &[f64], beta_prime: f64) -> Result<f64> {
    if per_sample_losses.is_empty() {
        return Err(Error::invalid("DrDPO objective needs at least one loss"));
    }
    if !(beta_prime > 0.0) {
        return Err(Error::invalid(format!("beta_prime must be positive, got {beta_prime}")));
    }
    let m = per_sample_losses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let n = per_sample_losses.len() as f64;
    let s = pairwise_sum(&per_sample_losses.iter().map(|l| ((l - m) / beta_prime).exp()).collect::<Vec<_>>());
    Ok(m + beta_prime * (s / n).ln())
}

/// Softmax weights `exp(ℓᵢ/β′) / Σ exp(ℓⱼ/β′)`: the gradient of the DrDPO
/// objective with respect to each per-sample loss.
pub fn drdpo_weights(per_sample_losses: &[f64], beta_prime: f64) -> Vec<f64> {
    let m = per_sample_losses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = per_sample_losses.iter().map(|l| ((l - m) / beta_prime).exp()).collect();
    let z = pairwise_sum(&e);
    e.into_iter().map(|v| v / z).collect()
}

/// Pairwise summation in index order; the result depends only on the input.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        2 => xs[0] + xs[1],
        n => {
            let (a, b) = xs.split_at(n / 2);
            pairwise_sum(a) + pairwise_sum(b)
        }
    }
}

/// Element-wise pairwise summation of equally sized vectors.
pub fn pairwise_sum_vecs(vs: &[Vec<f64>]) -> Vec<f64> {
    match vs.len() {
        0 => Vec::new(),
        1 => vs[0].clone(),
        n => {
            let (a, b) = vs.split_at(n / 2);
            let (mut x, y) = (pairwise_sum_vecs(a), pairwise_sum_vecs(b));
            for (u, v) in x.iter_mut().zip(y) {
                *u += v;
            }
            x
        }
    }
}

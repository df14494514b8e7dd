//! Worst-case preference probabilities over divergence balls around a soft
//! score `q`.
//!
//! The adversary picks `p` in `{p : D(p ‖ q) ≤ ρ}` to maximize the expected
//! per-sample loss `p·ℓ₁ + (1−p)·ℓ₋₁`. The objective is linear in `p`, so the
//! maximizer sits on the boundary of the ball, on the side of the larger loss.
//!
//! The chi-squared ball is used in its relaxed form `(p−q)² ≤ ρ·q(1−q)`, which
//! stays well defined at `q ∈ {0, 1}` (the ball collapses to `{q}`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest distance kept from the open endpoints during KL bisection.
const KL_ENDPOINT_GAP: f64 = 1e-15;
pub const DEFAULT_KL_TOL: f64 = 1e-10;
const KL_MAX_HALVINGS: usize = 400;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Divergence {
    ChiSquared,
    Kl,
}

impl std::str::FromStr for Divergence {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "chi2" | "chi-squared" | "chi_squared" => Ok(Divergence::ChiSquared),
            "kl" => Ok(Divergence::Kl),
            other => Err(Error::invalid(format!("unknown divergence {other:?}"))),
        }
    }
}

impl std::fmt::Display for Divergence {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Divergence::ChiSquared => "chi2",
            Divergence::Kl => "kl",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AmbiguitySet {
    pub divergence: Divergence,
    pub rho: f64,
}

impl AmbiguitySet {
    pub fn new(divergence: Divergence, rho: f64) -> Result<Self> {
        check_rho(rho)?;
        Ok(Self { divergence, rho })
    }

    pub fn chi2(rho: f64) -> Result<Self> {
        Self::new(Divergence::ChiSquared, rho)
    }

    /// Solves the inner maximization for one sample.
    pub fn worst_case(&self, q: f64, l1: f64, lm1: f64) -> Result<WorstCaseResult> {
        match self.divergence {
            Divergence::ChiSquared => worst_case_chi2(q, self.rho, l1, lm1),
            Divergence::Kl => worst_case_kl(q, self.rho, l1, lm1, DEFAULT_KL_TOL),
        }
    }
}

/// Which way the adversary moved the preference probability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    TowardOne,
    TowardZero,
    None,
}

impl Direction {
    fn from_losses(l1: f64, lm1: f64) -> Self {
        if l1 > lm1 {
            Direction::TowardOne
        } else if l1 < lm1 {
            Direction::TowardZero
        } else {
            Direction::None
        }
    }

    pub fn sign(self) -> f64 {
        match self {
            Direction::TowardOne => 1.0,
            Direction::TowardZero => -1.0,
            Direction::None => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorstCaseResult {
    pub p_hat: f64,
    pub clipped: bool,
    pub direction: Direction,
}

impl WorstCaseResult {
    fn unmoved(q: f64) -> Self {
        Self { p_hat: q, clipped: false, direction: Direction::None }
    }
}

/// Observed binary preference label: `Pos` means `y1 ≻ y2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Pos,
    Neg,
}

impl Label {
    pub fn sign(self) -> f64 {
        match self {
            Label::Pos => 1.0,
            Label::Neg => -1.0,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Label::Pos => Label::Neg,
            Label::Neg => Label::Pos,
        }
    }

    pub fn from_sign(c: i32) -> Result<Self> {
        match c {
            1 => Ok(Label::Pos),
            -1 => Ok(Label::Neg),
            other => Err(Error::invalid(format!("label must be 1 or -1, got {other}"))),
        }
    }
}

pub(crate) fn check_probability(name: &str, q: f64) -> Result<()> {
    if (0.0..=1.0).contains(&q) {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} must lie in [0, 1], got {q}")))
    }
}

fn check_rho(rho: f64) -> Result<()> {
    if rho >= 0.0 && rho.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("rho must be a finite nonnegative number, got {rho}")))
    }
}

/// Half-width `√(ρ·q(1−q))` of the relaxed chi-squared ball.
pub fn chi2_radius(q: f64, rho: f64) -> f64 {
    (rho * q * (1.0 - q)).sqrt()
}

/// Closed-form worst case over the relaxed chi-squared ball.
pub fn worst_case_chi2(q: f64, rho: f64, l1: f64, lm1: f64) -> Result<WorstCaseResult> {
    check_probability("q", q)?;
    check_rho(rho)?;
    let direction = Direction::from_losses(l1, lm1);
    if rho == 0.0 || direction == Direction::None {
        return Ok(WorstCaseResult::unmoved(q));
    }
    let radius = chi2_radius(q, rho);
    let (p_hat, clipped) = match direction {
        Direction::TowardOne => {
            let p = q + radius;
            (p.min(1.0), p > 1.0)
        }
        _ => {
            let p = q - radius;
            (p.max(0.0), p < 0.0)
        }
    };
    Ok(WorstCaseResult { p_hat, clipped, direction })
}

/// Bernoulli KL divergence `KL(p ‖ q)` with the `0·log 0 = 0` convention.
pub fn bernoulli_kl(p: f64, q: f64) -> f64 {
    let term = |a: f64, b: f64| if a == 0.0 { 0.0 } else { a * (a / b).ln() };
    term(p, q) + term(1.0 - p, 1.0 - q)
}

/// Worst case over the KL ball, found by bisection on the adversarial side.
pub fn worst_case_kl(q: f64, rho: f64, l1: f64, lm1: f64, tol: f64) -> Result<WorstCaseResult> {
    check_probability("q", q)?;
    check_rho(rho)?;
    if !(tol > 0.0) {
        return Err(Error::invalid(format!("tol must be positive, got {tol}")));
    }
    let direction = Direction::from_losses(l1, lm1);
    if rho == 0.0 || direction == Direction::None || q == 0.0 || q == 1.0 {
        return Ok(WorstCaseResult::unmoved(q));
    }
    let (boundary, far) = match direction {
        Direction::TowardOne => (1.0, 1.0 - KL_ENDPOINT_GAP),
        _ => (0.0, KL_ENDPOINT_GAP),
    };
    if bernoulli_kl(boundary, q) <= rho {
        return Ok(WorstCaseResult { p_hat: boundary, clipped: true, direction });
    }
    // KL(·‖q) increases monotonically moving away from q; `inside` stays feasible.
    let (mut inside, mut outside) = (q, far);
    for _ in 0..KL_MAX_HALVINGS {
        if (outside - inside).abs() <= tol {
            break;
        }
        let mid = 0.5 * (inside + outside);
        if bernoulli_kl(mid, q) <= rho {
            inside = mid;
        } else {
            outside = mid;
        }
    }
    Ok(WorstCaseResult { p_hat: inside, clipped: false, direction })
}

/// Label smoothing for hard binary labels.
pub fn smooth_binary_label(c: Label, eps: f64) -> Result<f64> {
    if !(0.0..0.5).contains(&eps) {
        return Err(Error::invalid(format!("smoothing eps must lie in [0, 0.5), got {eps}")));
    }
    Ok(match c {
        Label::Pos => 1.0 - eps,
        Label::Neg => eps,
    })
}

/// Uncertainty-weighted coefficient multiplying the loss gap `|ℓ₁ − ℓ₋₁|`.
///
/// Equals `|p̂ − q|` for the chi-squared solver: the ball radius, capped by
/// the distance to the probability boundary the adversary is heading for.
pub fn regularizer_coefficient(q: f64, rho: f64, direction: Direction) -> Result<f64> {
    check_probability("q", q)?;
    check_rho(rho)?;
    let radius = chi2_radius(q, rho);
    Ok(match direction {
        Direction::TowardOne => (1.0 - q).min(radius),
        Direction::TowardZero => q.min(radius),
        Direction::None => 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Grid search over feasible p for the linear objective; independent of
    /// the closed form.
    fn grid_argmax_chi2(q: f64, rho: f64, l1: f64, lm1: f64, step: f64) -> f64 {
        let n = (1.0 / step).round() as usize;
        let bound = rho * q * (1.0 - q);
        let mut best = (f64::NEG_INFINITY, q);
        for i in 0..=n {
            let p = i as f64 * step;
            if (p - q) * (p - q) <= bound {
                let obj = p * l1 + (1.0 - p) * lm1;
                if obj > best.0 {
                    best = (obj, p);
                }
            }
        }
        best.1
    }

    #[test]
    fn chi2_zero_radius_returns_q() {
        let r = worst_case_chi2(0.5, 0.0, 2.0, 1.0).unwrap();
        assert_eq!(r.p_hat, 0.5);
        assert_eq!(r.direction, Direction::None);
        assert!(!r.clipped);
    }

    #[test]
    fn chi2_interior_matches_grid_oracle() {
        let r = worst_case_chi2(0.5, 0.1, 2.0, 1.0).unwrap();
        let oracle = grid_argmax_chi2(0.5, 0.1, 2.0, 1.0, 1e-6);
        assert!((oracle - 0.658_113_9).abs() < 1e-6);
        assert!((r.p_hat - oracle).abs() < 2e-6);
        assert!((r.p_hat - (0.5 + 0.025f64.sqrt())).abs() < 1e-15);
        assert_eq!(r.direction, Direction::TowardOne);
        assert!(!r.clipped);
    }

    #[test]
    fn chi2_clips_at_one() {
        let r = worst_case_chi2(0.9, 1.0, 2.0, 1.0).unwrap();
        assert_eq!(r.p_hat, 1.0);
        assert!(r.clipped);
        let r = worst_case_chi2(0.1, 1.0, 1.0, 2.0).unwrap();
        assert_eq!(r.p_hat, 0.0);
        assert!(r.clipped);
    }

    #[test]
    fn chi2_endpoints_are_fixed() {
        for (l1, lm1) in [(2.0, 1.0), (1.0, 2.0), (1.0, 1.0)] {
            assert_eq!(worst_case_chi2(1.0, 0.1, l1, lm1).unwrap().p_hat, 1.0);
            assert_eq!(worst_case_chi2(0.0, 0.1, l1, lm1).unwrap().p_hat, 0.0);
        }
    }

    #[test]
    fn chi2_tie_keeps_q() {
        let r = worst_case_chi2(0.3, 2.0, 0.7, 0.7).unwrap();
        assert_eq!(r.p_hat, 0.3);
        assert_eq!(r.direction, Direction::None);
    }

    #[test]
    fn chi2_rejects_bad_inputs() {
        assert!(worst_case_chi2(1.1, 0.1, 1.0, 0.0).is_err());
        assert!(worst_case_chi2(-0.1, 0.1, 1.0, 0.0).is_err());
        assert!(worst_case_chi2(0.5, -1.0, 1.0, 0.0).is_err());
        assert!(worst_case_chi2(f64::NAN, 0.1, 1.0, 0.0).is_err());
    }

    /// High-precision bisection on the Bernoulli KL written out directly.
    fn kl_oracle_up(q: f64, rho: f64) -> f64 {
        let kl = |p: f64| p * (p / q).ln() + (1.0 - p) * ((1.0 - p) / (1.0 - q)).ln();
        let (mut lo, mut hi) = (q, 1.0 - 1e-15);
        while hi - lo > 1e-13 {
            let mid = 0.5 * (lo + hi);
            if kl(mid) <= rho {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }

    #[test]
    fn kl_matches_bisection_oracle() {
        let r = worst_case_kl(0.5, 0.02, 2.0, 1.0, 1e-10).unwrap();
        let oracle = kl_oracle_up(0.5, 0.02);
        assert!((r.p_hat - oracle).abs() < 1e-9);
        assert!((r.p_hat - 0.5997).abs() < 1e-4);
        assert!((bernoulli_kl(r.p_hat, 0.5) - 0.02).abs() < 1e-8);
    }

    #[test]
    fn kl_zero_radius_and_degenerate_q() {
        assert_eq!(worst_case_kl(0.3, 0.0, 2.0, 1.0, 1e-10).unwrap().p_hat, 0.3);
        assert_eq!(worst_case_kl(0.0, 0.5, 2.0, 1.0, 1e-10).unwrap().p_hat, 0.0);
        assert_eq!(worst_case_kl(1.0, 0.5, 1.0, 2.0, 1e-10).unwrap().p_hat, 1.0);
        assert!(worst_case_kl(0.5, 0.1, 2.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn kl_clips_when_boundary_is_feasible() {
        // KL(1 ‖ 0.9) = ln(1/0.9) ≈ 0.105
        let r = worst_case_kl(0.9, 0.2, 2.0, 1.0, 1e-10).unwrap();
        assert_eq!(r.p_hat, 1.0);
        assert!(r.clipped);
    }

    #[test]
    fn smoothing() {
        assert_eq!(smooth_binary_label(Label::Pos, 0.0).unwrap(), 1.0);
        assert_eq!(smooth_binary_label(Label::Neg, 0.05).unwrap(), 0.05);
        assert_eq!(smooth_binary_label(Label::Pos, 0.05).unwrap(), 0.95);
        assert!(smooth_binary_label(Label::Pos, 0.5).is_err());
        assert!(smooth_binary_label(Label::Pos, -0.1).is_err());
    }

    #[test]
    fn coefficient_examples() {
        let c = regularizer_coefficient(0.5, 0.1, Direction::TowardOne).unwrap();
        assert!((c - 0.158_113_9).abs() < 1e-7);
        let p = worst_case_chi2(0.5, 0.1, 2.0, 1.0).unwrap().p_hat;
        assert!((c - (p - 0.5)).abs() < 1e-15);
        assert_eq!(regularizer_coefficient(1.0, 3.0, Direction::TowardOne).unwrap(), 0.0);
        let c = regularizer_coefficient(0.2, 9.0, Direction::TowardOne).unwrap();
        assert!((c - 0.8).abs() < 1e-15);
    }

    fn argmax_coefficient(rho: f64) -> f64 {
        (0..=1000)
            .map(|i| i as f64 * 1e-3)
            .map(|q| (q, regularizer_coefficient(q, rho, Direction::TowardOne).unwrap()))
            .fold((0.0, f64::NEG_INFINITY), |best, (q, c)| if c > best.1 { (q, c) } else { best })
            .0
    }

    #[test]
    fn coefficient_curve_peak_moves_left_for_large_radius() {
        assert!((argmax_coefficient(0.1) - 0.5).abs() <= 0.01);
        assert!(argmax_coefficient(4.0) < 0.49);
    }

    fn losses() -> impl Strategy<Value = (f64, f64)> {
        (0.0f64..5.0, 0.0f64..5.0)
    }

    proptest! {
        #[test]
        fn chi2_is_a_true_maximizer(q in 0.0f64..=1.0, rho in 0.0f64..4.0, (l1, lm1) in losses()) {
            let r = worst_case_chi2(q, rho, l1, lm1).unwrap();
            let obj = |p: f64| p * l1 + (1.0 - p) * lm1;
            let bound = rho * q * (1.0 - q);
            for i in 0..=2000 {
                let p = i as f64 / 2000.0;
                if (p - q) * (p - q) <= bound {
                    prop_assert!(obj(r.p_hat) >= obj(p) - 1e-12);
                }
            }
            prop_assert!((0.0..=1.0).contains(&r.p_hat));
        }

        #[test]
        fn chi2_equals_q_plus_signed_coefficient(q in 0.0f64..=1.0, rho in 0.0f64..4.0, (l1, lm1) in losses()) {
            let r = worst_case_chi2(q, rho, l1, lm1).unwrap();
            let c = regularizer_coefficient(q, rho, r.direction).unwrap();
            prop_assert!((r.p_hat - (q + r.direction.sign() * c)).abs() <= 1e-15);
        }

        #[test]
        fn chi2_monotone_in_rho(q in 0.0f64..=1.0, rho_a in 0.0f64..4.0, rho_b in 0.0f64..4.0) {
            let (lo, hi) = if rho_a <= rho_b { (rho_a, rho_b) } else { (rho_b, rho_a) };
            let a = worst_case_chi2(q, lo, 2.0, 1.0).unwrap().p_hat;
            let b = worst_case_chi2(q, hi, 2.0, 1.0).unwrap().p_hat;
            prop_assert!(a <= b);
        }

        #[test]
        fn kl_relabeling_symmetry(q in 0.01f64..0.99, rho in 0.0f64..1.0, (l1, lm1) in losses()) {
            let a = worst_case_kl(q, rho, l1, lm1, 1e-12).unwrap().p_hat;
            let b = worst_case_kl(1.0 - q, rho, lm1, l1, 1e-12).unwrap().p_hat;
            prop_assert!((a - (1.0 - b)).abs() < 1e-9);
        }

        #[test]
        fn kl_solution_is_feasible_and_on_boundary(q in 0.05f64..0.95, rho in 0.001f64..0.5) {
            let r = worst_case_kl(q, rho, 2.0, 1.0, 1e-12).unwrap();
            prop_assert!(bernoulli_kl(r.p_hat, q) <= rho + 1e-12);
            if !r.clipped {
                prop_assert!((bernoulli_kl(r.p_hat, q) - rho).abs() < 1e-6);
            }
        }
    }
}

//! Train-time corruption of ground-truth soft scores.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::KvConfig;
use crate::dro::check_probability;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

pub const ALPHA_LOW: f64 = 0.1;
pub const ALPHA_HIGH: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    None,
    Flip,
    Adversarial,
}

impl std::fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NoiseKind::None => "none",
            NoiseKind::Flip => "flip",
            NoiseKind::Adversarial => "adversarial",
        })
    }
}

impl std::str::FromStr for NoiseKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(NoiseKind::None),
            "flip" => Ok(NoiseKind::Flip),
            "adversarial" => Ok(NoiseKind::Adversarial),
            other => Err(Error::invalid(format!("unknown noise kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub alpha: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub const NONE: NoiseSpec = NoiseSpec { kind: NoiseKind::None, alpha: 0.0, seed: 0 };

    pub fn new(kind: NoiseKind, alpha: f64, seed: u64) -> Result<Self> {
        let max = match kind {
            NoiseKind::None => 0.0,
            NoiseKind::Flip => 1.0,
            NoiseKind::Adversarial => 0.5,
        };
        if !(0.0..=max).contains(&alpha) {
            return Err(Error::invalid(format!("alpha for {kind:?} noise must lie in [0, {max}], got {alpha}")));
        }
        Ok(Self { kind, alpha, seed })
    }

    pub fn flip(alpha: f64) -> Result<Self> {
        Self::new(NoiseKind::Flip, alpha, 0)
    }

    /// Reads `noise.kind`, `noise.alpha` and `noise.seed`; absent means no noise.
    pub fn from_config(cfg: &KvConfig) -> Result<Self> {
        let kind: NoiseKind = cfg.get_or("noise.kind", NoiseKind::None)?;
        let alpha = cfg.get_or("noise.alpha", 0.0)?;
        if kind == NoiseKind::None && alpha != 0.0 {
            return Err(Error::Config("noise.alpha given without noise.kind".into()));
        }
        Self::new(kind, alpha, cfg.get_or("noise.seed", 0)?)
    }

    /// Corrupts the `index`-th stored score. The adversarial variant draws
    /// from a per-sample substream so the result does not depend on order.
    pub fn apply(&self, q_star: f64, index: usize) -> Result<f64> {
        match self.kind {
            NoiseKind::None => Ok(q_star),
            NoiseKind::Flip => flip_noise(q_star, self.alpha),
            NoiseKind::Adversarial => {
                let mut r = rng::stream(self.seed, &[rng::TAG_NOISE, index as u64]);
                adversarial_noise(q_star, self.alpha, &mut r)
            }
        }
    }
}

/// Label-flip mixture `q*(1−α) + (1−q*)α`.
pub fn flip_noise(q_star: f64, alpha: f64) -> Result<f64> {
    check_probability("q*", q_star)?;
    check_probability("alpha", alpha)?;
    Ok(q_star * (1.0 - alpha) + (1.0 - q_star) * alpha)
}

/// Shifts `q*` toward (and possibly past) 0.5 by `U ~ Unif(0, α)`.
pub fn adversarial_noise(q_star: f64, alpha: f64, rng: &mut Stream) -> Result<f64> {
    check_probability("q*", q_star)?;
    if !(0.0..=0.5).contains(&alpha) {
        return Err(Error::invalid(format!("adversarial alpha must lie in [0, 0.5], got {alpha}")));
    }
    let u = if alpha > 0.0 { rng.random_range(0.0..alpha) } else { 0.0 };
    let q = if q_star > 0.5 { q_star - u } else { q_star + u };
    Ok(q.clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn flip_examples() {
        assert_eq!(flip_noise(0.37, 0.0).unwrap(), 0.37);
        for q in [0.0, 0.2, 0.5, 0.93, 1.0] {
            assert_eq!(flip_noise(q, 0.5).unwrap(), 0.5);
        }
        assert_eq!(flip_noise(0.9, 0.3).unwrap(), 0.66);
        assert!(flip_noise(1.2, 0.1).is_err());
    }

    #[test]
    fn adversarial_examples() {
        let mut r = rng::stream(1, &[]);
        assert_eq!(adversarial_noise(0.8, 0.0, &mut r).unwrap(), 0.8);
        for _ in 0..1000 {
            let v = adversarial_noise(0.5, 0.2, &mut r).unwrap();
            assert!((0.5..=0.7).contains(&v));
        }
        assert!(adversarial_noise(0.5, 0.6, &mut r).is_err());
    }

    #[test]
    fn adversarial_mean_matches_half_alpha() {
        let mean: f64 = (0..10_000u64)
            .map(|seed| adversarial_noise(0.9, 0.2, &mut rng::stream(seed, &[])).unwrap())
            .sum::<f64>()
            / 10_000.0;
        assert!((mean - 0.8).abs() < 0.005, "{mean}");
    }

    #[test]
    fn spec_validation() {
        assert!(NoiseSpec::new(NoiseKind::Flip, 1.0, 0).is_ok());
        assert!(NoiseSpec::new(NoiseKind::Adversarial, 0.6, 0).is_err());
        assert!(NoiseSpec::new(NoiseKind::None, 0.1, 0).is_err());
        let cfg = KvConfig::parse("noise.kind = flip\nnoise.alpha = 0.3").unwrap();
        assert_eq!(NoiseSpec::from_config(&cfg).unwrap().apply(0.9, 0).unwrap(), 0.66);
        let cfg = KvConfig::parse("noise.alpha = 0.3").unwrap();
        assert!(NoiseSpec::from_config(&cfg).is_err());
    }

    proptest! {
        #[test]
        fn flip_twice_contracts_toward_half(q in 0.0f64..=1.0, alpha in 0.0f64..=1.0) {
            let twice = flip_noise(flip_noise(q, alpha).unwrap(), alpha).unwrap();
            let expected = (1.0 - 2.0 * alpha).powi(2) * (q - 0.5).abs();
            prop_assert!(((twice - 0.5).abs() - expected).abs() < 1e-12);
        }

        #[test]
        fn adversarial_shift_is_bounded(q in 0.5f64..=1.0, alpha in 0.0f64..=0.5, seed in any::<u64>()) {
            let v = adversarial_noise(q, alpha, &mut rng::stream(seed, &[])).unwrap();
            prop_assert!((v - q).abs() <= alpha);
            if q > 0.5 && alpha <= q - 0.5 {
                prop_assert!(v >= 0.5);
            }
        }
    }
}

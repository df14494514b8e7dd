//! Restless multi-armed bandit benchmark.
//!
//! Each arm is a two-state MDP (`0` = disengaged, `1` = engaged) with a
//! passive and an active action. A reward program maps `(state, features)`
//! to a reward; Whittle indices computed per arm drive a budgeted top-K
//! policy.

pub mod dsl;
pub mod features;
pub mod sim;
pub mod whittle;

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::rng;

pub use dsl::{parse_reward, RewardProgram};
pub use sim::{simulate, simulate_rollouts, summarize_by_category, CategorySummary, SimResult, Trajectory};
pub use whittle::{top_k_actions, whittle_index, WhittleParams, WhittleTable};

const ROW_SUM_TOL: f64 = 1e-12;

/// Transition kernel `T[s][a][s']` plus binary features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmModel {
    pub transitions: [[[f64; 2]; 2]; 2],
    pub features: BTreeMap<String, u8>,
}

impl ArmModel {
    pub fn validate(&self) -> Result<()> {
        for (s, row) in self.transitions.iter().enumerate() {
            for (a, dist) in row.iter().enumerate() {
                if dist.iter().any(|p| !(0.0..=1.0).contains(p)) {
                    return Err(Error::invalid(format!("T[{s}][{a}] has an entry outside [0, 1]: {dist:?}")));
                }
                let sum: f64 = dist.iter().sum();
                if (sum - 1.0).abs() > ROW_SUM_TOL {
                    return Err(Error::invalid(format!("T[{s}][{a}] sums to {sum}, expected 1")));
                }
            }
        }
        if let Some((name, v)) = self.features.iter().find(|(_, v)| **v > 1) {
            return Err(Error::invalid(format!("feature {name} must be 0 or 1, got {v}")));
        }
        Ok(())
    }

    /// Probability of moving to the engaged state.
    pub fn p_engage(&self, state: u8, action: u8) -> f64 {
        self.transitions[state as usize][action as usize][1]
    }

    /// Arm whose engagement probabilities are `p[s][a]`.
    pub fn from_engage_probs(p: [[f64; 2]; 2], features: BTreeMap<String, u8>) -> Self {
        let row = |x: f64| [1.0 - x, x];
        Self {
            transitions: [[row(p[0][0]), row(p[0][1])], [row(p[1][0]), row(p[1][1])]],
            features,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmabInstance {
    pub arms: Vec<ArmModel>,
    pub budget: usize,
    pub discount: f64,
    pub horizon: usize,
}

pub const DEFAULT_DISCOUNT: f64 = 0.9;

impl RmabInstance {
    pub fn validate(&self) -> Result<()> {
        if self.budget > self.arms.len() {
            return Err(Error::invalid(format!(
                "budget {} exceeds the number of arms {}",
                self.budget,
                self.arms.len()
            )));
        }
        if !(0.0..1.0).contains(&self.discount) {
            return Err(Error::invalid(format!("discount must lie in [0, 1), got {}", self.discount)));
        }
        for (i, arm) in self.arms.iter().enumerate() {
            arm.validate().map_err(|e| Error::invalid(format!("arm {i}: {e}")))?;
        }
        Ok(())
    }

    /// Union of feature names across arms.
    pub fn known_features(&self) -> BTreeSet<String> {
        self.arms.iter().flat_map(|a| a.features.keys().cloned()).collect()
    }

    /// Desk-scale environment: engagement probabilities drawn from Beta(2, 2)
    /// with the active probability never below the passive one, and one
    /// feature per catalog group.
    pub fn desk(n_arms: usize, budget: usize, horizon: usize, discount: f64, seed: u64) -> Result<Self> {
        let beta = Beta::new(2.0, 2.0).expect("valid beta parameters");
        let arms = (0..n_arms)
            .map(|i| {
                let mut r = rng::stream(seed, &[rng::TAG_ENV, i as u64]);
                let mut p = [[0.0; 2]; 2];
                for row in &mut p {
                    let (x, y): (f64, f64) = (beta.sample(&mut r), beta.sample(&mut r));
                    *row = [x.min(y), x.max(y)];
                }
                let features = features::CATALOG
                    .iter()
                    .flat_map(|group| {
                        let pick = r.random_range(0..group.members.len());
                        group.members.iter().enumerate().map(move |(j, name)| (name.to_string(), (j == pick) as u8))
                    })
                    .collect();
                ArmModel::from_engage_probs(p, features)
            })
            .collect();
        let env = Self { arms, budget, discount, horizon };
        env.validate()?;
        Ok(env)
    }

    /// Loads an environment from either an arm JSONL file (one arm per line,
    /// default budget/discount/horizon) or a `key = value` config with
    /// `env.*` keys.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::invalid(format!("cannot read environment {}: {e}", path.display())))?;
        if text.trim_start().starts_with('{') {
            let arms = read_arms_jsonl(text.as_bytes())?;
            let env = Self {
                budget: DESK_BUDGET.min(arms.len()),
                arms,
                discount: DEFAULT_DISCOUNT,
                horizon: DESK_HORIZON,
            };
            env.validate()?;
            return Ok(env);
        }
        let cfg = KvConfig::parse(&text)?;
        Self::from_config(&cfg, path.parent())
    }

    pub fn from_config(cfg: &KvConfig, base_dir: Option<&Path>) -> Result<Self> {
        let budget = cfg.get_or("env.budget", DESK_BUDGET)?;
        let horizon = cfg.get_or("env.horizon", DESK_HORIZON)?;
        let discount = cfg.get_or("env.discount", DEFAULT_DISCOUNT)?;
        let env = match (cfg.get_str("env.arms"), cfg.get_str("env.preset")) {
            (Some(file), None) => {
                let path = base_dir.map_or_else(|| Path::new(file).to_path_buf(), |d| d.join(file));
                let f = std::fs::File::open(&path)
                    .map_err(|e| Error::invalid(format!("cannot open arms file {}: {e}", path.display())))?;
                let arms = read_arms_jsonl(std::io::BufReader::new(f))?;
                Self { arms, budget, discount, horizon }
            }
            (None, Some("desk")) | (None, None) => {
                let n_arms = cfg.get_or("env.n_arms", DESK_ARMS)?;
                let seed = cfg.get_or("env.seed", DESK_ENV_SEED)?;
                Self::desk(n_arms, budget, horizon, discount, seed)?
            }
            (None, Some(other)) => return Err(Error::Config(format!("unknown env.preset {other:?}"))),
            (Some(_), Some(_)) => return Err(Error::Config("env.arms and env.preset are mutually exclusive".into())),
        };
        env.validate()?;
        Ok(env)
    }
}

pub const DESK_ARMS: usize = 50;
pub const DESK_BUDGET: usize = 5;
pub const DESK_HORIZON: usize = 20;
pub const DESK_ENV_SEED: u64 = 7;

pub fn read_arms_jsonl(reader: impl BufRead) -> Result<Vec<ArmModel>> {
    let mut arms = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let arm: ArmModel = serde_json::from_str(&line)
            .map_err(|e| Error::invalid(format!("arms line {}: {e}", i + 1)))?;
        arm.validate().map_err(|e| Error::invalid(format!("arms line {}: {e}", i + 1)))?;
        arms.push(arm);
    }
    Ok(arms)
}

pub fn write_arms_jsonl(mut w: impl Write, arms: &[ArmModel]) -> Result<()> {
    for arm in arms {
        serde_json::to_writer(&mut w, arm)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

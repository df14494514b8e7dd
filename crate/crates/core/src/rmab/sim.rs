//! Budgeted top-K Whittle simulation and per-category engagement summaries.

use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::whittle::{top_k_of, WhittleParams, WhittleTable};
use super::{ArmModel, RewardProgram, RmabInstance};
use crate::error::{Error, Result};
use crate::rng;

/// One rollout. `states` has `horizon + 1` rows (the initial all-zero row
/// first); `actions` has `horizon` rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<Vec<u8>>,
    pub actions: Vec<Vec<u8>>,
    pub discounted_reward: f64,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.actions.len()
    }

    /// Engaged steps per arm, counted on post-transition states.
    pub fn engagement_per_arm(&self) -> Vec<f64> {
        let n = self.states.first().map_or(0, Vec::len);
        let mut out = vec![0.0; n];
        for row in self.states.iter().skip(1) {
            for (acc, &s) in out.iter_mut().zip(row) {
                *acc += f64::from(s);
            }
        }
        out
    }

    /// Rows `(step, arm, state, action)`.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "step,arm,state,action")?;
        for (t, actions) in self.actions.iter().enumerate() {
            for (i, a) in actions.iter().enumerate() {
                writeln!(w, "{t},{i},{},{a}", self.states[t][i])?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub trajectories: Vec<Trajectory>,
    pub total_discounted_reward: f64,
}

/// A single rollout of the top-K Whittle policy.
pub fn simulate(env: &RmabInstance, program: &RewardProgram, seed: u64) -> Result<SimResult> {
    simulate_rollouts(env, program, seed, 1, &WhittleParams::default())
}

pub fn simulate_rollouts(
    env: &RmabInstance,
    program: &RewardProgram,
    seed: u64,
    rollouts: usize,
    params: &WhittleParams,
) -> Result<SimResult> {
    env.validate()?;
    let table = WhittleTable::compute(env, program, params)?;
    let rewards = env
        .arms
        .iter()
        .map(|a| program.state_rewards(&a.features))
        .collect::<Result<Vec<_>>>()?;
    Ok(simulate_with_table(env, &table, &rewards, seed, rollouts))
}

/// Rolls out with precomputed indices and per-arm state rewards.
///
/// Each arm draws its transitions from its own substream, so the realized
/// uniforms are shared across reward programs for the same seed.
pub fn simulate_with_table(
    env: &RmabInstance,
    table: &WhittleTable,
    rewards: &[[f64; 2]],
    seed: u64,
    rollouts: usize,
) -> SimResult {
    let n = env.arms.len();
    let trajectories: Vec<Trajectory> = (0..rollouts)
        .map(|k| {
            let mut streams: Vec<_> = (0..n)
                .map(|i| rng::stream(seed, &[rng::TAG_SIMULATION, k as u64, i as u64]))
                .collect();
            let mut states = vec![vec![0u8; n]];
            let mut actions = Vec::with_capacity(env.horizon);
            let mut reward = 0.0;
            let mut weight = 1.0;
            for _ in 0..env.horizon {
                let current = states.last().unwrap();
                let act = top_k_of(&table.current(current), env.budget);
                let next: Vec<u8> = (0..n)
                    .map(|i| {
                        let u: f64 = streams[i].random();
                        u8::from(u < env.arms[i].p_engage(current[i], act[i]))
                    })
                    .collect();
                reward += weight * next.iter().zip(rewards).map(|(&s, r)| r[s as usize]).sum::<f64>();
                weight *= env.discount;
                actions.push(act);
                states.push(next);
            }
            Trajectory { states, actions, discounted_reward: reward }
        })
        .collect();
    let total_discounted_reward = trajectories.iter().map(|t| t.discounted_reward).sum();
    SimResult { trajectories, total_discounted_reward }
}

/// Engagement totals per binary feature: the sum, over arms carrying the
/// feature, of their engaged steps across all trajectories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorySummary {
    pub per_feature: BTreeMap<String, f64>,
    pub total: f64,
}

impl CategorySummary {
    /// Engagement share of a category, 0 when nothing engaged.
    pub fn share(&self, feature: &str) -> f64 {
        if self.total > 0.0 {
            self.per_feature.get(feature).copied().unwrap_or(0.0) / self.total
        } else {
            0.0
        }
    }
}

pub fn summarize_by_category(trajectories: &[Trajectory], arms: &[ArmModel]) -> Result<CategorySummary> {
    let mut per_arm = vec![0.0; arms.len()];
    for t in trajectories {
        let e = t.engagement_per_arm();
        if e.len() != arms.len() {
            return Err(Error::invalid(format!("trajectory covers {} arms, expected {}", e.len(), arms.len())));
        }
        for (acc, v) in per_arm.iter_mut().zip(e) {
            *acc += v;
        }
    }
    let mut per_feature: BTreeMap<String, f64> = BTreeMap::new();
    for arm in arms {
        for name in arm.features.keys() {
            per_feature.entry(name.clone()).or_insert(0.0);
        }
    }
    for (arm, e) in arms.iter().zip(&per_arm) {
        for (name, &on) in &arm.features {
            if on == 1 {
                *per_feature.get_mut(name).unwrap() += e;
            }
        }
    }
    Ok(CategorySummary { per_feature, total: per_arm.iter().sum() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rmab::parse_reward;

    fn tiny_env(budget: usize, horizon: usize) -> RmabInstance {
        let feats = |young: u8| BTreeMap::from([("young".to_string(), young), ("old".to_string(), 1 - young)]);
        RmabInstance {
            arms: vec![
                ArmModel::from_engage_probs([[0.2, 0.8], [0.5, 0.9]], feats(1)),
                ArmModel::from_engage_probs([[0.1, 0.6], [0.4, 0.7]], feats(0)),
                ArmModel::from_engage_probs([[0.3, 0.5], [0.6, 0.95]], feats(1)),
            ],
            budget,
            discount: 0.9,
            horizon,
        }
    }

    #[test]
    fn zero_horizon_is_empty() {
        let env = tiny_env(1, 0);
        let p = parse_reward("s", &env.known_features()).unwrap();
        let r = simulate(&env, &p, 3).unwrap();
        assert_eq!(r.trajectories[0].horizon(), 0);
        assert_eq!(r.total_discounted_reward, 0.0);
        let mut buf = Vec::new();
        r.trajectories[0].write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "step,arm,state,action\n");
    }

    #[test]
    fn absorbing_passive_dynamics_with_no_budget_never_engage() {
        let mut env = tiny_env(0, 15);
        for arm in &mut env.arms {
            arm.transitions[0][0] = [1.0, 0.0];
        }
        let p = parse_reward("s", &env.known_features()).unwrap();
        let r = simulate(&env, &p, 3).unwrap();
        let s = summarize_by_category(&r.trajectories, &env.arms).unwrap();
        assert_eq!(s.total, 0.0);
        assert!(s.per_feature.values().all(|&v| v == 0.0));
        assert_eq!(s.share("young"), 0.0);
    }

    #[test]
    fn budget_holds_every_step_and_runs_are_reproducible() {
        let env = tiny_env(2, 30);
        let p = parse_reward("s + 2 * (s and young)", &env.known_features()).unwrap();
        let a = simulate_rollouts(&env, &p, 11, 4, &WhittleParams::default()).unwrap();
        let b = simulate_rollouts(&env, &p, 11, 4, &WhittleParams::default()).unwrap();
        assert_eq!(a, b);
        for t in &a.trajectories {
            for row in &t.actions {
                assert_eq!(row.iter().map(|&x| x as usize).sum::<usize>(), 2);
            }
        }
    }

    #[test]
    fn hand_computed_summary() {
        let env = tiny_env(1, 2);
        let t = Trajectory {
            states: vec![vec![0, 0, 0], vec![1, 0, 1], vec![1, 1, 0]],
            actions: vec![vec![1, 0, 0], vec![0, 1, 0]],
            discounted_reward: 0.0,
        };
        let s = summarize_by_category(std::slice::from_ref(&t), &env.arms).unwrap();
        // arm engagement: arm0 = 2, arm1 = 1, arm2 = 1
        assert_eq!(s.total, 4.0);
        assert_eq!(s.per_feature["young"], 3.0);
        assert_eq!(s.per_feature["old"], 1.0);
        let twice = summarize_by_category(&[t.clone(), t], &env.arms).unwrap();
        assert_eq!(twice.total, 8.0);
    }

    #[test]
    fn shared_feature_total_equals_total_engagement() {
        let mut env = tiny_env(1, 10);
        for arm in &mut env.arms {
            arm.features.insert("everyone".into(), 1);
        }
        let p = parse_reward("s", &env.known_features()).unwrap();
        let r = simulate(&env, &p, 5).unwrap();
        let s = summarize_by_category(&r.trajectories, &env.arms).unwrap();
        assert_eq!(s.per_feature["everyone"], s.total);
    }

    #[test]
    fn mismatched_arms_are_rejected() {
        let env = tiny_env(1, 3);
        let p = parse_reward("s", &env.known_features()).unwrap();
        let r = simulate(&env, &p, 5).unwrap();
        assert!(summarize_by_category(&r.trajectories, &env.arms[..2]).is_err());
    }
}

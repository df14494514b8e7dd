//! Whittle indices by bisection over the passive subsidy.
//!
//! For a subsidy `λ` paid whenever the arm is left passive, the subsidized
//! single-arm MDP is solved by value iteration:
//!
//! ```text
//! Q(s, 0, λ) = r(s) + λ + γ Σ T[s][0][s'] V(s')
//! Q(s, 1, λ) = r(s)     + γ Σ T[s][1][s'] V(s')
//! V(s)       = max_a Q(s, a, λ)
//! ```
//!
//! The index `W(s)` is the smallest `λ` making both actions equally good in
//! `s`. Bisection is valid only when the gap `Q(s,0,λ) − Q(s,1,λ)` is
//! nondecreasing in `λ` (indexability); that property is checked on a grid
//! for every arm rather than assumed.

use rayon::prelude::*;

use super::{ArmModel, RewardProgram, RmabInstance};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WhittleParams {
    pub vi_tol: f64,
    pub bs_tol: f64,
    pub max_vi_iters: usize,
    pub max_halvings: usize,
    /// Grid points per state for the indexability check; 0 disables it.
    pub indexability_grid: usize,
}

impl Default for WhittleParams {
    fn default() -> Self {
        Self { vi_tol: 1e-9, bs_tol: 1e-6, max_vi_iters: 100_000, max_halvings: 200, indexability_grid: 17 }
    }
}

const BRACKET_EXPANSIONS: usize = 16;
const MONOTONE_SLACK: f64 = 1e-7;

/// Subsidized Q-values `[[Q(0,0), Q(0,1)], [Q(1,0), Q(1,1)]]`.
pub fn subsidized_q(
    transitions: &[[[f64; 2]; 2]; 2],
    rewards: [f64; 2],
    discount: f64,
    subsidy: f64,
    params: &WhittleParams,
    warm: &mut [f64; 2],
) -> Result<[[f64; 2]; 2]> {
    let q_of = |v: &[f64; 2]| {
        let mut q = [[0.0; 2]; 2];
        for s in 0..2 {
            for a in 0..2 {
                let t = &transitions[s][a];
                let bonus = if a == 0 { subsidy } else { 0.0 };
                q[s][a] = rewards[s] + bonus + discount * (t[0] * v[0] + t[1] * v[1]);
            }
        }
        q
    };
    for _ in 0..params.max_vi_iters {
        let q = q_of(warm);
        let next = [q[0][0].max(q[0][1]), q[1][0].max(q[1][1])];
        let delta = (next[0] - warm[0]).abs().max((next[1] - warm[1]).abs());
        *warm = next;
        if delta < params.vi_tol {
            return Ok(q_of(warm));
        }
    }
    Err(Error::Numeric(format!(
        "value iteration did not converge in {} sweeps (discount {discount})",
        params.max_vi_iters
    )))
}

/// `Q(s,0,λ) − Q(s,1,λ)` for both states.
pub fn q_gap(
    transitions: &[[[f64; 2]; 2]; 2],
    rewards: [f64; 2],
    discount: f64,
    subsidy: f64,
    params: &WhittleParams,
) -> Result<[f64; 2]> {
    let mut v = [0.0; 2];
    let q = subsidized_q(transitions, rewards, discount, subsidy, params, &mut v)?;
    Ok([q[0][0] - q[0][1], q[1][0] - q[1][1]])
}

/// Bracket half-width `R_max/(1−γ) + R_max`.
pub fn bracket_bound(rewards: [f64; 2], discount: f64) -> f64 {
    let r_max = rewards[0].abs().max(rewards[1].abs());
    r_max / (1.0 - discount) + r_max
}

/// Whittle index of each state from precomputed state rewards.
pub fn whittle_index_for_rewards(
    transitions: &[[[f64; 2]; 2]; 2],
    rewards: [f64; 2],
    discount: f64,
    params: &WhittleParams,
) -> Result<[f64; 2]> {
    if !(0.0..1.0).contains(&discount) {
        return Err(Error::invalid(format!("discount must lie in [0, 1), got {discount}")));
    }
    let bound = bracket_bound(rewards, discount).max(1.0);
    if params.indexability_grid > 1 {
        check_indexability(transitions, rewards, discount, bound, params)?;
    }
    // |dgap/dλ| ≤ 1/(1−γ); this width keeps the gap within bs_tol/2 of zero.
    let width_tol = params.bs_tol * (1.0 - discount);
    let mut out = [0.0; 2];
    for (s, slot) in out.iter_mut().enumerate() {
        let gap = |lambda: f64, warm: &mut [f64; 2]| -> Result<f64> {
            let q = subsidized_q(transitions, rewards, discount, lambda, params, warm)?;
            Ok(q[s][0] - q[s][1])
        };
        let mut warm = [0.0; 2];
        let (mut lo, mut hi) = (-bound, bound);
        let mut expansions = 0;
        loop {
            let (g_lo, g_hi) = (gap(lo, &mut warm)?, gap(hi, &mut warm)?);
            if g_lo < 0.0 && g_hi >= 0.0 {
                break;
            }
            expansions += 1;
            if expansions > BRACKET_EXPANSIONS {
                return Err(Error::ModelAssumption(format!(
                    "no sign change of the Q-gap in state {s}: gap({lo}) = {g_lo}, gap({hi}) = {g_hi}"
                )));
            }
            if g_lo >= 0.0 {
                lo *= 2.0;
            }
            if g_hi < 0.0 {
                hi *= 2.0;
            }
        }
        for _ in 0..params.max_halvings {
            if hi - lo <= width_tol {
                break;
            }
            let mid = 0.5 * (lo + hi);
            if gap(mid, &mut warm)? >= 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        *slot = 0.5 * (lo + hi);
    }
    Ok(out)
}

fn check_indexability(
    transitions: &[[[f64; 2]; 2]; 2],
    rewards: [f64; 2],
    discount: f64,
    bound: f64,
    params: &WhittleParams,
) -> Result<()> {
    let n = params.indexability_grid;
    let mut prev: Option<[f64; 2]> = None;
    for i in 0..n {
        let lambda = -bound + 2.0 * bound * i as f64 / (n - 1) as f64;
        let g = q_gap(transitions, rewards, discount, lambda, params)?;
        if let Some(p) = prev {
            for s in 0..2 {
                if g[s] < p[s] - MONOTONE_SLACK {
                    return Err(Error::ModelAssumption(format!(
                        "not indexable: Q-gap in state {s} decreases from {} to {} near subsidy {lambda}",
                        p[s], g[s]
                    )));
                }
            }
        }
        prev = Some(g);
    }
    Ok(())
}

/// Whittle index of each state of `arm` under `program`.
pub fn whittle_index(arm: &ArmModel, program: &RewardProgram, discount: f64, params: &WhittleParams) -> Result<[f64; 2]> {
    arm.validate()?;
    let rewards = program.state_rewards(&arm.features)?;
    whittle_index_for_rewards(&arm.transitions, rewards, discount, params)
}

/// Per-arm, per-state indices `W_i(s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WhittleTable {
    pub indices: Vec<[f64; 2]>,
}

impl WhittleTable {
    /// Computes every arm's indices; arms are independent and run in parallel.
    pub fn compute(env: &RmabInstance, program: &RewardProgram, params: &WhittleParams) -> Result<Self> {
        let indices = env
            .arms
            .par_iter()
            .enumerate()
            .map(|(i, arm)| {
                whittle_index(arm, program, env.discount, params).map_err(|e| match e {
                    Error::ModelAssumption(m) => Error::ModelAssumption(format!("arm {i}: {m}")),
                    Error::InvalidInput(m) => Error::InvalidInput(format!("arm {i}: {m}")),
                    other => other,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { indices })
    }

    pub fn current(&self, states: &[u8]) -> Vec<f64> {
        self.indices.iter().zip(states).map(|(w, &s)| w[s as usize]).collect()
    }
}

/// Activates the `budget` arms with the largest current index; ties go to
/// the lower arm index.
pub fn top_k_actions(whittle: &WhittleTable, states: &[u8], budget: usize) -> Result<Vec<u8>> {
    if states.len() != whittle.indices.len() {
        return Err(Error::invalid(format!(
            "state vector has {} entries for {} arms",
            states.len(),
            whittle.indices.len()
        )));
    }
    if budget > states.len() {
        return Err(Error::invalid(format!("budget {budget} exceeds {} arms", states.len())));
    }
    Ok(top_k_of(&whittle.current(states), budget))
}

pub(crate) fn top_k_of(current: &[f64], budget: usize) -> Vec<u8> {
    let mut order: Vec<usize> = (0..current.len()).collect();
    order.sort_by(|&a, &b| current[b].total_cmp(&current[a]).then(a.cmp(&b)));
    let mut actions = vec![0u8; current.len()];
    for &i in order.iter().take(budget) {
        actions[i] = 1;
    }
    actions
}

//! Evaluation of trained policies on the bandit tasks.
//!
//! A policy "generates" by picking the best-scoring program from a held-out
//! candidate pool. The generated program and a reference program from the
//! training data are both simulated with the same seed, and the task's judge
//! decides which engagement pattern it prefers. Ties count as losses.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::pairwise_sum;
use crate::policy::PreferencePolicy;
use crate::prefdata::{evaluate_program, oracle_preference, OracleJudge};
use crate::rmab::whittle::WhittleParams;
use crate::rmab::{CategorySummary, RmabInstance};

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
}

/// Index of the candidate with the largest log-ratio; the first one wins
/// ties.
pub fn generate_response<P: PreferencePolicy + ?Sized>(policy: &P, prompt: &str, candidates: &[String]) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::invalid("candidate pool is empty"));
    }
    let mut best = (0, f64::NEG_INFINITY);
    for (i, c) in candidates.iter().enumerate() {
        let s = policy.log_ratio(prompt, c)?;
        if s.is_nan() {
            return Err(Error::Numeric(format!("log-ratio of candidate {i} is NaN")));
        }
        if s > best.1 {
            best = (i, s);
        }
    }
    Ok(best.0)
}

fn proportion(wins: usize, n: usize) -> Estimate {
    let p = wins as f64 / n as f64;
    Estimate { mean: p, se: (p * (1.0 - p) / n as f64).sqrt() }
}

/// Fraction of items where the generated score strictly beats the chosen one.
pub fn win_rate(generated: &[f64], chosen: &[f64]) -> Result<Estimate> {
    if generated.len() != chosen.len() {
        return Err(Error::invalid(format!("{} generated scores vs {} chosen scores", generated.len(), chosen.len())));
    }
    if generated.is_empty() {
        return Err(Error::invalid("no scores to compare"));
    }
    let wins = generated.iter().zip(chosen).filter(|(g, c)| g > c).count();
    Ok(proportion(wins, generated.len()))
}

/// Mean score; the error is the sample standard deviation over `√n`.
pub fn eval_reward(scores: &[f64]) -> Result<Estimate> {
    if scores.is_empty() {
        return Err(Error::invalid("no scores to average"));
    }
    let n = scores.len() as f64;
    let mean = pairwise_sum(scores) / n;
    let se = if scores.len() > 1 {
        let dev: Vec<f64> = scores.iter().map(|s| (s - mean) * (s - mean)).collect();
        (pairwise_sum(&dev) / (n - 1.0)).sqrt() / n.sqrt()
    } else {
        0.0
    };
    Ok(Estimate { mean, se })
}

/// One held-out comparison: a candidate pool to generate from and the
/// reference program to beat.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalItem {
    pub pool: Vec<String>,
    pub reference: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalTask {
    pub task_id: String,
    pub prompt: String,
    pub judge: OracleJudge,
    /// Seed shared by every simulation in this task.
    pub sim_seed: u64,
    pub items: Vec<EvalItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task_id: String,
    pub wins: usize,
    pub n: usize,
    pub win_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub win_rate: Estimate,
    pub eval_reward: Estimate,
    pub per_task: Vec<TaskResult>,
    pub n_eval: usize,
    /// Items lost because the generated program could not be simulated.
    pub failures: usize,
}

impl EvalReport {
    pub fn per_task_map(&self) -> BTreeMap<String, f64> {
        self.per_task.iter().map(|t| (t.task_id.clone(), t.win_rate)).collect()
    }

    pub fn write_json(&self, w: impl Write) -> Result<()> {
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }

    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "task_id,win_rate,n")?;
        for t in &self.per_task {
            writeln!(w, "{},{},{}", t.task_id, t.win_rate, t.n)?;
        }
        Ok(())
    }
}

type Simulated = std::result::Result<CategorySummary, String>;

/// Simulation results for every program an evaluation can touch, computed
/// once so several policies can be judged on identical rollouts.
#[derive(Debug, Clone)]
pub struct Evaluator {
    tasks: Vec<EvalTask>,
    summaries: Vec<HashMap<String, Simulated>>,
}

impl Evaluator {
    pub fn new(env: &RmabInstance, tasks: Vec<EvalTask>, rollouts: usize) -> Result<Self> {
        env.validate()?;
        if tasks.iter().any(|t| t.items.iter().any(|i| i.pool.is_empty())) {
            return Err(Error::invalid("evaluation item with an empty candidate pool"));
        }
        let known = env.known_features();
        let params = WhittleParams::default();
        let summaries = tasks
            .iter()
            .map(|t| {
                let programs: BTreeSet<&String> =
                    t.items.iter().flat_map(|i| i.pool.iter().chain(std::iter::once(&i.reference))).collect();
                programs
                    .into_par_iter()
                    .map(|p| {
                        let s = evaluate_program(env, p, &known, t.sim_seed, rollouts, &params).map_err(|e| e.to_string());
                        (p.clone(), s)
                    })
                    .collect::<Vec<_>>()
                    .into_iter()
                    .collect()
            })
            .collect();
        Ok(Self { tasks, summaries })
    }

    pub fn tasks(&self) -> &[EvalTask] {
        &self.tasks
    }

    /// Pre-simulated summary of `program` in task `task`, if it was part of
    /// that task's evaluation and simulated cleanly.
    pub fn summary(&self, task: usize, program: &str) -> Option<&CategorySummary> {
        self.summaries.get(task)?.get(program)?.as_ref().ok()
    }

    pub fn evaluate<P: PreferencePolicy + ?Sized>(&self, policy: &P) -> Result<EvalReport> {
        let mut per_task = Vec::with_capacity(self.tasks.len());
        let mut scores = Vec::new();
        let mut failures = 0;
        for (task, sums) in self.tasks.iter().zip(&self.summaries) {
            let mut wins = 0;
            for (k, item) in task.items.iter().enumerate() {
                let reference = sums[&item.reference]
                    .as_ref()
                    .map_err(|e| Error::invalid(format!("{} item {k}: reference program failed: {e}", task.task_id)))?;
                let generated = match generate_response(policy, &task.prompt, &item.pool) {
                    Ok(i) => {
                        let pick = &item.pool[i];
                        sums[pick].as_ref().map_err(|e| format!("generated program {pick:?}: {e}"))
                    }
                    Err(e @ (Error::InvalidInput(_) | Error::Parse(_))) => Err(format!("generation failed: {e}")),
                    Err(e) => return Err(e),
                };
                match generated {
                    Ok(gen) => {
                        if oracle_preference(&task.judge, gen, reference)? > 0.5 {
                            wins += 1;
                        }
                        scores.push(task.judge.score(gen)?);
                    }
                    Err(e) => {
                        log::warn!("{} item {k} counted as a loss: {e}", task.task_id);
                        failures += 1;
                    }
                }
            }
            let n = task.items.len();
            per_task.push(TaskResult {
                task_id: task.task_id.clone(),
                wins,
                n,
                win_rate: if n > 0 { wins as f64 / n as f64 } else { 0.0 },
            });
        }
        let n_eval: usize = per_task.iter().map(|t| t.n).sum();
        if n_eval == 0 {
            return Err(Error::invalid("no evaluation items"));
        }
        let wins: usize = per_task.iter().map(|t| t.wins).sum();
        let eval_reward = if scores.is_empty() { Estimate { mean: f64::NAN, se: f64::NAN } } else { eval_reward(&scores)? };
        Ok(EvalReport { win_rate: proportion(wins, n_eval), eval_reward, per_task, n_eval, failures })
    }
}

/// Win rate of `policy`'s picks against each task's reference programs.
pub fn rmab_win_rate<P: PreferencePolicy + ?Sized>(
    policy: &P,
    tasks: Vec<EvalTask>,
    env: &RmabInstance,
    rollouts: usize,
) -> Result<EvalReport> {
    Evaluator::new(env, tasks, rollouts)?.evaluate(policy)
}

//! The desk benchmark: generate a dataset, corrupt its scores, train one
//! method, and judge the trained policy on held-out candidate pools.
//!
//! A [`Prepared`] seed holds everything that is shared by the methods and
//! noise levels of that seed (clean data and pre-simulated evaluation
//! programs), so every cell of a sweep compares policies on identical
//! rollouts.

use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

use crate::config::KvConfig;
use crate::dro::{AmbiguitySet, Divergence};
use crate::error::{Error, Result};
use crate::evalmetrics::{EvalItem, EvalReport, EvalTask, Evaluator};
use crate::noise::NoiseSpec;
use crate::policy::{LogLinearPolicy, RewardFeaturizer};
use crate::prefdata::{generate_dataset, sample_candidates, task_id, task_judges, DatasetManifest, OracleJudge, PreferenceSample};
use crate::rmab::RmabInstance;
use crate::rng;
use crate::trainer::{train, Method, MethodConfig, TrainConfig, DEFAULT_BETA_PRIME, DEFAULT_RDPO_EPS, DEFAULT_RHO};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub manifest: DatasetManifest,
    /// Training hyperparameters shared by all methods (method field ignored).
    pub train: TrainConfig,
    pub ambiguity: AmbiguitySet,
    pub rdpo_eps: f64,
    pub drdpo_beta_prime: f64,
    /// Held-out candidate pools per task.
    pub eval_pools: usize,
    pub pool_size: usize,
    /// Reference programs each pool is compared against.
    pub eval_references: usize,
    pub eval_rollouts: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            manifest: DatasetManifest::default(),
            train: TrainConfig::for_method(Method::Dpo),
            ambiguity: AmbiguitySet { divergence: Divergence::ChiSquared, rho: DEFAULT_RHO },
            rdpo_eps: DEFAULT_RDPO_EPS,
            drdpo_beta_prime: DEFAULT_BETA_PRIME,
            eval_pools: 8,
            pool_size: 20,
            eval_references: 10,
            eval_rollouts: 4,
        }
    }
}

impl BenchConfig {
    /// Reads `manifest.*`, `train.*` (without `train.method`), `dro.*`,
    /// `rdpo.*`, `drdpo.*` and `eval.*`. Every key is optional.
    pub fn from_config(cfg: &KvConfig) -> Result<Self> {
        if cfg.contains("train.method") {
            return Err(Error::Config("train.method is chosen per sweep cell; pass --methods instead".into()));
        }
        let d = Self::default();
        let mut train = d.train;
        train.beta = cfg.get_or("train.beta", train.beta)?;
        train.learning_rate = cfg.get_or("train.learning_rate", train.learning_rate)?;
        train.epochs = cfg.get_or("train.epochs", train.epochs)?;
        train.batch_size = cfg.get_or("train.batch_size", train.batch_size)?;
        let c = Self {
            manifest: DatasetManifest::from_config(cfg)?,
            train,
            ambiguity: AmbiguitySet::new(
                cfg.get_or("dro.divergence", d.ambiguity.divergence)?,
                cfg.get_or("dro.rho", d.ambiguity.rho)?,
            )
            .map_err(|e| Error::Config(e.to_string()))?,
            rdpo_eps: cfg.get_or("rdpo.eps", d.rdpo_eps)?,
            drdpo_beta_prime: cfg.get_or("drdpo.beta_prime", d.drdpo_beta_prime)?,
            eval_pools: cfg.get_or("eval.pools", d.eval_pools)?,
            pool_size: cfg.get_or("eval.pool_size", d.pool_size)?,
            eval_references: cfg.get_or("eval.references", d.eval_references)?,
            eval_rollouts: cfg.get_or("eval.rollouts", d.eval_rollouts)?,
        };
        for m in Method::ALL {
            c.train_config(m, 0).validate()?;
        }
        if c.eval_pools == 0 || c.pool_size == 0 || c.eval_references == 0 || c.eval_rollouts == 0 {
            return Err(Error::Config("eval.pools, eval.pool_size, eval.references and eval.rollouts must be positive".into()));
        }
        Ok(c)
    }

    pub fn train_config(&self, method: Method, seed: u64) -> TrainConfig {
        let mut c = self.train;
        c.seed = rng::derive_seed(seed, &[rng::TAG_SHUFFLE]);
        c.method = match method {
            Method::Dpo => MethodConfig::Dpo,
            Method::DpoPro => MethodConfig::DpoPro { ambiguity: self.ambiguity },
            Method::Rdpo => MethodConfig::Rdpo { eps: self.rdpo_eps },
            Method::Drdpo => MethodConfig::Drdpo { beta_prime: self.drdpo_beta_prime },
        };
        c
    }
}

/// Everything a seed shares across methods and noise levels.
pub struct Prepared {
    pub seed: u64,
    pub judges: Vec<OracleJudge>,
    pub data: Vec<PreferenceSample>,
    pub evaluator: Evaluator,
}

/// Held-out pools for each task plus references drawn from the task's
/// training pairs (the preferred side of each drawn pair).
pub fn eval_tasks(
    config: &BenchConfig,
    env: &RmabInstance,
    judges: &[OracleJudge],
    data: &[PreferenceSample],
    seed: u64,
) -> Result<Vec<EvalTask>> {
    let known = env.known_features();
    judges
        .iter()
        .enumerate()
        .map(|(t, judge)| {
            let id = task_id(t);
            let train_side: Vec<&PreferenceSample> = data.iter().filter(|s| s.task_id == id).collect();
            if train_side.is_empty() {
                return Err(Error::invalid(format!("{id} has no training pairs to draw references from")));
            }
            let mut r = rng::stream(seed, &[rng::TAG_EVAL, t as u64]);
            let mut items = Vec::with_capacity(config.eval_pools * config.eval_references);
            for _ in 0..config.eval_pools {
                let pool = sample_candidates(judge, &known, config.pool_size, &mut r)?;
                for _ in 0..config.eval_references {
                    let s = train_side.choose(&mut r).expect("nonempty");
                    items.push(EvalItem { pool: pool.clone(), reference: s.chosen().to_string() });
                }
            }
            Ok(EvalTask {
                task_id: id,
                prompt: judge.prompt(),
                judge: judge.clone(),
                sim_seed: rng::derive_seed(seed, &[rng::TAG_EVAL, rng::TAG_SIMULATION, t as u64]),
                items,
            })
        })
        .collect()
}

pub fn prepare(config: &BenchConfig, env: &RmabInstance, seed: u64) -> Result<Prepared> {
    let mut manifest = config.manifest.clone();
    manifest.seed = seed;
    let judges = task_judges(manifest.n_tasks, seed);
    let data = generate_dataset(&manifest, env, &judges)?;
    let tasks = eval_tasks(config, env, &judges, &data, seed)?;
    let evaluator = Evaluator::new(env, tasks, config.eval_rollouts)?;
    Ok(Prepared { seed, judges, data, evaluator })
}

/// Applies `noise` to every stored score.
pub fn corrupt(data: &[PreferenceSample], noise: &NoiseSpec) -> Result<Vec<PreferenceSample>> {
    data.iter()
        .enumerate()
        .map(|(i, s)| Ok(PreferenceSample { q: noise.apply(s.q, i)?, ..s.clone() }))
        .collect()
}

pub fn train_policy(
    config: &BenchConfig,
    data: &[PreferenceSample],
    method: Method,
    seed: u64,
) -> Result<LogLinearPolicy<RewardFeaturizer>> {
    let mut policy = LogLinearPolicy::new(RewardFeaturizer::desk());
    train(&config.train_config(method, seed), data, &mut policy)?;
    Ok(policy)
}

/// One sweep cell: corrupt, train, evaluate.
pub fn run_cell(config: &BenchConfig, prepared: &Prepared, method: Method, noise: &NoiseSpec) -> Result<EvalReport> {
    let mut noise = *noise;
    noise.seed = rng::derive_seed(prepared.seed, &[rng::TAG_NOISE]);
    let noisy = corrupt(&prepared.data, &noise)?;
    let policy = train_policy(config, &noisy, method, prepared.seed)?;
    prepared.evaluator.evaluate(&policy)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (BenchConfig, RmabInstance) {
        let mut c = BenchConfig::default();
        c.manifest = DatasetManifest { n_tasks: 2, candidates_per_task: 6, pairs_per_task: 10, repeats: 5, seed: 0, rollouts: 1 };
        c.train.epochs = 3;
        c.eval_pools = 2;
        c.pool_size = 4;
        c.eval_references = 3;
        c.eval_rollouts = 1;
        (c, RmabInstance::desk(12, 2, 8, 0.9, 7).unwrap())
    }

    #[test]
    fn cells_are_deterministic_and_sized() {
        let (c, env) = tiny();
        let p = prepare(&c, &env, 3).unwrap();
        assert_eq!(p.data.len(), 20);
        let a = run_cell(&c, &p, Method::DpoPro, &NoiseSpec::flip(0.3).unwrap()).unwrap();
        let b = run_cell(&c, &p, Method::DpoPro, &NoiseSpec::flip(0.3).unwrap()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.n_eval, 12);
    }

    #[test]
    fn config_rejects_method_and_reads_sections() {
        assert!(BenchConfig::from_config(&KvConfig::parse("train.method = dpo").unwrap()).is_err());
        let c = BenchConfig::from_config(&KvConfig::parse("dro.rho = 0.5\neval.pools = 2\ntrain.epochs = 7").unwrap()).unwrap();
        assert_eq!(c.ambiguity.rho, 0.5);
        assert_eq!(c.eval_pools, 2);
        assert_eq!(c.train_config(Method::DpoPro, 1).epochs, 7);
        assert!(BenchConfig::from_config(&KvConfig::parse("rdpo.eps = 0.5").unwrap()).is_err());
    }

    #[test]
    fn corruption_keeps_everything_but_q() {
        let (c, env) = tiny();
        let p = prepare(&c, &env, 1).unwrap();
        let noisy = corrupt(&p.data, &NoiseSpec::flip(0.5).unwrap()).unwrap();
        assert!(noisy.iter().all(|s| s.q == 0.5));
        assert_eq!(noisy[3].response_a, p.data[3].response_a);
    }
}

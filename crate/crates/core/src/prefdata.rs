//! Preference samples, their JSONL format, and the synthetic-judge dataset
//! generator.
//!
//! Generation per task: draw candidate reward expressions from a template
//! grammar, simulate each one on the bandit environment, score random pairs
//! with the task's latent judge, and estimate the soft score by averaging
//! repeated Bernoulli queries.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::KvConfig;
use crate::dro::check_probability;
use crate::error::{Error, Result};
use crate::loss::sigmoid;
use crate::rmab::features::{self, CATALOG};
use crate::rmab::sim::simulate_with_table;
use crate::rmab::whittle::{WhittleParams, WhittleTable};
use crate::rmab::{parse_reward, summarize_by_category, CategorySummary, RmabInstance};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QSource {
    AveragedQueries,
    DirectScore,
    HardLabelSmoothed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceSample {
    pub task_id: String,
    pub prompt: String,
    pub response_a: String,
    pub response_b: String,
    /// Probability that `response_a` is preferred.
    pub q: f64,
    pub q_source: QSource,
}

impl PreferenceSample {
    pub fn validate(&self) -> Result<()> {
        check_probability("q", self.q)?;
        if self.response_a.trim() == self.response_b.trim() {
            return Err(Error::invalid(format!("task {}: identical responses in a pair", self.task_id)));
        }
        Ok(())
    }

    /// The response the soft score favors (`a` on ties).
    pub fn chosen(&self) -> &str {
        if self.q >= 0.5 {
            &self.response_a
        } else {
            &self.response_b
        }
    }
}

pub fn write_jsonl(mut w: impl Write, samples: &[PreferenceSample]) -> Result<()> {
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl(reader: impl BufRead) -> Result<Vec<PreferenceSample>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: PreferenceSample =
            serde_json::from_str(&line).map_err(|e| Error::invalid(format!("dataset line {}: {e}", i + 1)))?;
        s.validate().map_err(|e| Error::invalid(format!("dataset line {}: {e}", i + 1)))?;
        out.push(s);
    }
    Ok(out)
}

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Vec<PreferenceSample>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path)
        .map_err(|e| Error::invalid(format!("cannot open dataset {}: {e}", path.display())))?;
    read_jsonl(std::io::BufReader::new(f))
}

/// Latent linear judge over engagement shares.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleJudge {
    pub task_weights: BTreeMap<String, f64>,
    pub temperature: f64,
}

pub const DEFAULT_TEMPERATURE: f64 = 1.0;

impl OracleJudge {
    pub fn new(task_weights: BTreeMap<String, f64>, temperature: f64) -> Result<Self> {
        if !task_weights.values().any(|w| *w != 0.0) {
            return Err(Error::invalid("judge needs at least one nonzero weight"));
        }
        if !(temperature > 0.0) {
            return Err(Error::invalid(format!("judge temperature must be positive, got {temperature}")));
        }
        Ok(Self { task_weights, temperature })
    }

    /// `Σ weight · engagement share`.
    pub fn score(&self, summary: &CategorySummary) -> Result<f64> {
        let mut total = 0.0;
        for (name, w) in &self.task_weights {
            if !summary.per_feature.contains_key(name) {
                return Err(Error::invalid(format!("summary has no category {name:?}")));
            }
            total += w * summary.share(name);
        }
        Ok(total)
    }

    /// Features carrying at least three quarters of the largest positive
    /// weight: what the prioritization command names explicitly.
    pub fn headline_features(&self) -> Vec<&str> {
        let top = self.task_weights.values().copied().fold(0.0, f64::max);
        self.task_weights
            .iter()
            .filter(|(_, w)| top > 0.0 && **w >= 0.75 * top)
            .map(|(k, _)| k.as_str())
            .collect()
    }

    pub fn prompt(&self) -> String {
        format!("Prioritize beneficiaries: {}", self.headline_features().join(", "))
    }
}

/// Bradley-Terry probability that summary `a` is preferred over `b`.
pub fn oracle_preference(judge: &OracleJudge, summary_a: &CategorySummary, summary_b: &CategorySummary) -> Result<f64> {
    let ka: BTreeSet<&String> = summary_a.per_feature.keys().collect();
    let kb: BTreeSet<&String> = summary_b.per_feature.keys().collect();
    if ka != kb {
        return Err(Error::invalid("category summaries cover different category sets"));
    }
    let diff = judge.score(summary_a)? - judge.score(summary_b)?;
    Ok(sigmoid(diff / judge.temperature))
}

/// Fraction of `repeats` Bernoulli(`q_true`) successes.
pub fn estimate_q_by_sampling(q_true: f64, repeats: usize, rng: &mut Stream) -> Result<f64> {
    check_probability("q_true", q_true)?;
    if repeats == 0 {
        return Err(Error::invalid("repeats must be at least 1"));
    }
    let hits = (0..repeats).filter(|_| rng.random::<f64>() < q_true).count();
    Ok(hits as f64 / repeats as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub n_tasks: usize,
    pub candidates_per_task: usize,
    pub pairs_per_task: usize,
    pub repeats: usize,
    pub seed: u64,
    /// Simulation rollouts averaged into each candidate's summary.
    pub rollouts: usize,
}

impl Default for DatasetManifest {
    fn default() -> Self {
        Self { n_tasks: 8, candidates_per_task: 20, pairs_per_task: 50, repeats: 10, seed: 0, rollouts: DEFAULT_ROLLOUTS }
    }
}

pub const DEFAULT_ROLLOUTS: usize = 4;

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let c = self.candidates_per_task;
        if self.n_tasks == 0 || c < 2 || self.repeats == 0 || self.rollouts == 0 {
            return Err(Error::invalid(
                "manifest needs n_tasks ≥ 1, candidates_per_task ≥ 2, repeats ≥ 1 and rollouts ≥ 1",
            ));
        }
        if self.pairs_per_task > c * (c - 1) / 2 {
            return Err(Error::invalid(format!(
                "pairs_per_task {} exceeds the {} distinct pairs of {c} candidates",
                self.pairs_per_task,
                c * (c - 1) / 2
            )));
        }
        Ok(())
    }

    /// Reads `manifest.*` keys; missing keys take the defaults.
    pub fn from_config(cfg: &KvConfig) -> Result<Self> {
        let d = Self::default();
        let m = Self {
            n_tasks: cfg.get_or("manifest.n_tasks", d.n_tasks)?,
            candidates_per_task: cfg.get_or("manifest.candidates_per_task", d.candidates_per_task)?,
            pairs_per_task: cfg.get_or("manifest.pairs_per_task", d.pairs_per_task)?,
            repeats: cfg.get_or("manifest.repeats", d.repeats)?,
            seed: cfg.get_or("manifest.seed", d.seed)?,
            rollouts: cfg.get_or("manifest.rollouts", d.rollouts)?,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn to_config(&self) -> KvConfig {
        let mut cfg = KvConfig::default();
        cfg.set("manifest.n_tasks", self.n_tasks);
        cfg.set("manifest.candidates_per_task", self.candidates_per_task);
        cfg.set("manifest.pairs_per_task", self.pairs_per_task);
        cfg.set("manifest.repeats", self.repeats);
        cfg.set("manifest.seed", self.seed);
        cfg.set("manifest.rollouts", self.rollouts);
        cfg
    }
}

fn judge(weights: &[(&str, f64)]) -> OracleJudge {
    let w = weights.iter().map(|(k, v)| (k.to_string(), *v)).collect();
    OracleJudge::new(w, DEFAULT_TEMPERATURE).expect("nonzero weights")
}

/// Weight scale turning engagement-share differences into logits.
pub const JUDGE_WEIGHT_SCALE: f64 = 40.0;

/// The eight hand-written desk tasks. Each judge names one or two features
/// outright and quietly values a related one, so commands admit more than
/// one reading.
pub fn desk_judges() -> Vec<OracleJudge> {
    let s = JUDGE_WEIGHT_SCALE;
    vec![
        judge(&[("youngest_age", s), ("oldest_age", s), ("second_youngest_age", 0.5 * s)]),
        judge(&[("12_30-3pm", s), ("NGO_registered", 0.8 * s), ("10_30-12_30pm", 0.3 * s)]),
        judge(&[("lowest_income", s), ("second_lowest_income", 0.6 * s)]),
        judge(&[("lowest_education", s), ("second_lowest_education", 0.5 * s)]),
        judge(&[("8_30-10_30am", s), ("speaks_marathi", s)]),
        judge(&[("high_education", s), ("5_30-7_30pm", 0.8 * s), ("high_income", 0.4 * s)]),
        judge(&[("PHC_registered", s), ("middle_age", 0.6 * s)]),
        judge(&[("ARMMAN_registered", s), ("speaks_hindi", 0.5 * s), ("third_lowest_income", 0.5 * s)]),
    ]
}

/// Judges for `n` tasks: the desk tasks first, then random ones built from
/// one or two catalog groups.
pub fn task_judges(n: usize, seed: u64) -> Vec<OracleJudge> {
    let mut out: Vec<OracleJudge> = desk_judges().into_iter().take(n).collect();
    for t in out.len()..n {
        let mut r = rng::stream(seed, &[rng::TAG_CANDIDATES, u64::MAX, t as u64]);
        let mut groups: Vec<usize> = (0..CATALOG.len()).collect();
        groups.shuffle(&mut r);
        let n_groups = r.random_range(1..=2);
        let mut weights = BTreeMap::new();
        for &g in groups.iter().take(n_groups) {
            let mut members = CATALOG[g].members.to_vec();
            members.shuffle(&mut r);
            let k = r.random_range(1..=2.min(members.len()));
            for (j, m) in members.iter().take(k).enumerate() {
                let w = if j == 0 { 1.0 } else { r.random_range(0.3..1.0) };
                weights.insert(m.to_string(), w * JUDGE_WEIGHT_SCALE);
            }
        }
        out.push(OracleJudge::new(weights, DEFAULT_TEMPERATURE).expect("nonzero weights"));
    }
    out
}

/// Features a candidate generator would associate with the judge's command:
/// every member of each group that contains a headline feature.
pub fn related_features(judge: &OracleJudge) -> Vec<&'static str> {
    let mut out: Vec<&'static str> = judge
        .headline_features()
        .iter()
        .filter_map(|f| features::group_of(f))
        .flat_map(|g| g.members.iter().copied())
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Draws one template reward expression `s + Σ cᵢ·(s and (clauseᵢ))`.
pub fn sample_candidate(related: &[&str], all: &[&str], rng: &mut Stream) -> String {
    let n_terms = rng.random_range(1..=3);
    let mut text = String::from("s");
    for _ in 0..n_terms {
        let coeff = rng.random_range(1..=3);
        let arity = rng.random_range(1..=3);
        let mut feats: Vec<&str> = Vec::new();
        while feats.len() < arity {
            let pool = if !related.is_empty() && rng.random_bool(0.6) { related } else { all };
            let f = pool[rng.random_range(0..pool.len())];
            if !feats.contains(&f) {
                feats.push(f);
            }
        }
        let joiner = if rng.random_bool(0.75) { " or " } else { " and " };
        let clause = feats.join(joiner);
        let inner = if arity == 1 { format!("s and {clause}") } else { format!("s and ({clause})") };
        if coeff == 1 {
            text.push_str(&format!(" + ({inner})"));
        } else {
            text.push_str(&format!(" + {coeff} * ({inner})"));
        }
    }
    text
}

const MAX_CANDIDATE_DRAWS: usize = 10_000;

/// `n` distinct candidate expressions in normalized form.
pub fn sample_candidates(judge: &OracleJudge, known: &BTreeSet<String>, n: usize, rng: &mut Stream) -> Result<Vec<String>> {
    let related = related_features(judge);
    let all: Vec<&str> = known.iter().map(String::as_str).collect();
    let related: Vec<&str> = related.into_iter().filter(|f| known.contains(*f)).collect();
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    for _ in 0..MAX_CANDIDATE_DRAWS {
        if out.len() == n {
            break;
        }
        let text = sample_candidate(&related, &all, rng);
        let normalized = parse_reward(&text, known)?.normalized();
        if seen.insert(normalized.clone()) {
            out.push(normalized);
        }
    }
    if out.len() < n {
        return Err(Error::invalid(format!("could only draw {} distinct candidates of {n}", out.len())));
    }
    Ok(out)
}

/// Simulates a reward expression and summarizes engagement per category.
pub fn evaluate_program(
    env: &RmabInstance,
    source: &str,
    known: &BTreeSet<String>,
    seed: u64,
    rollouts: usize,
    params: &WhittleParams,
) -> Result<CategorySummary> {
    let program = parse_reward(source, known)?;
    let table = WhittleTable::compute(env, &program, params)?;
    let rewards = env
        .arms
        .iter()
        .map(|a| program.state_rewards(&a.features))
        .collect::<Result<Vec<_>>>()?;
    let sim = simulate_with_table(env, &table, &rewards, seed, rollouts);
    summarize_by_category(&sim.trajectories, &env.arms)
}

pub fn task_id(index: usize) -> String {
    format!("task-{index:03}")
}

/// Simulation seed shared by every candidate of a task.
pub fn task_sim_seed(seed: u64, task: usize) -> u64 {
    rng::derive_seed(seed, &[rng::TAG_SIMULATION, task as u64])
}

/// One task's candidates with their engagement summaries; candidates whose
/// simulation failed are dropped with a logged reason.
pub fn simulate_candidates(
    env: &RmabInstance,
    candidates: Vec<String>,
    known: &BTreeSet<String>,
    sim_seed: u64,
    rollouts: usize,
) -> Vec<(String, CategorySummary)> {
    let params = WhittleParams::default();
    candidates
        .into_iter()
        .filter_map(|c| match evaluate_program(env, &c, known, sim_seed, rollouts, &params) {
            Ok(s) => Some((c, s)),
            Err(e) => {
                log::warn!("skipping candidate {c:?}: {e}");
                None
            }
        })
        .collect()
}

fn generate_task(
    manifest: &DatasetManifest,
    env: &RmabInstance,
    judge: &OracleJudge,
    known: &BTreeSet<String>,
    t: usize,
) -> Result<Vec<PreferenceSample>> {
    let mut cand_rng = rng::stream(manifest.seed, &[rng::TAG_CANDIDATES, t as u64]);
    let candidates = sample_candidates(judge, known, manifest.candidates_per_task, &mut cand_rng)?;
    let scored = simulate_candidates(env, candidates, known, task_sim_seed(manifest.seed, t), manifest.rollouts);

    let mut pairs: Vec<(usize, usize)> =
        (0..scored.len()).flat_map(|i| (i + 1..scored.len()).map(move |j| (i, j))).collect();
    if pairs.len() < manifest.pairs_per_task {
        return Err(Error::invalid(format!(
            "task {t}: only {} valid pairs remain, {} requested",
            pairs.len(),
            manifest.pairs_per_task
        )));
    }
    let mut pair_rng = rng::stream(manifest.seed, &[rng::TAG_PAIRS, t as u64]);
    pairs.shuffle(&mut pair_rng);
    let prompt = judge.prompt();
    pairs
        .into_iter()
        .take(manifest.pairs_per_task)
        .enumerate()
        .map(|(k, (i, j))| {
            let (a, b) = if pair_rng.random_bool(0.5) { (i, j) } else { (j, i) };
            let q_star = oracle_preference(judge, &scored[a].1, &scored[b].1)?;
            let mut query_rng = rng::stream(manifest.seed, &[rng::TAG_QUERIES, t as u64, k as u64]);
            let q = estimate_q_by_sampling(q_star, manifest.repeats, &mut query_rng)?;
            Ok(PreferenceSample {
                task_id: task_id(t),
                prompt: prompt.clone(),
                response_a: scored[a].0.clone(),
                response_b: scored[b].0.clone(),
                q,
                q_source: QSource::AveragedQueries,
            })
        })
        .collect()
}

/// Builds the full dataset. Tasks run in parallel on the current rayon pool
/// and are merged in task order.
pub fn generate_dataset(manifest: &DatasetManifest, env: &RmabInstance, judges: &[OracleJudge]) -> Result<Vec<PreferenceSample>> {
    manifest.validate()?;
    env.validate()?;
    if judges.len() != manifest.n_tasks {
        return Err(Error::invalid(format!("{} judges for {} tasks", judges.len(), manifest.n_tasks)));
    }
    let known = env.known_features();
    let per_task = (0..manifest.n_tasks)
        .into_par_iter()
        .map(|t| generate_task(manifest, env, &judges[t], &known, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(per_task.into_iter().flatten().collect())
}

//! Preference policies exposing the DPO log-ratio margin
//!
//! `Δ(x, y1, y2) = log π_θ(y1|x)/π_ref(y1|x) − log π_θ(y2|x)/π_ref(y2|x)`
//!
//! and its gradient with respect to the trainable parameters. Two classes
//! stand in for a language model: a log-linear scorer over a featurizer and
//! an explicit softmax table over an enumerated candidate set.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rmab::dsl::{BinOp, Expr};
use crate::rmab::{features, parse_reward};

#[derive(Debug, Clone, PartialEq)]
pub struct MarginRecord {
    pub delta: f64,
    pub grad_delta: Vec<f64>,
}

pub trait PreferencePolicy: Send + Sync {
    fn dim(&self) -> usize;
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];
    fn reference_params(&self) -> &[f64];

    /// `log π_θ(y|x) − log π_ref(y|x)` up to a per-prompt constant.
    fn log_ratio(&self, prompt: &str, response: &str) -> Result<f64>;

    fn margin(&self, prompt: &str, y1: &str, y2: &str) -> Result<MarginRecord>;
}

/// Deterministic map `(x, y) → φ(x, y)` of fixed dimension.
pub trait Featurizer: Send + Sync {
    fn id(&self) -> String;
    fn dim(&self) -> usize;
    fn features(&self, prompt: &str, response: &str) -> Result<Vec<f64>>;
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `π_θ(y|x) ∝ exp(θ·φ(x, y))`. The partition function cancels in every
/// log-ratio difference and is never computed.
#[derive(Debug, Clone)]
pub struct LogLinearPolicy<F> {
    pub theta: Vec<f64>,
    pub theta_ref: Vec<f64>,
    pub featurizer: F,
}

impl<F: Featurizer> LogLinearPolicy<F> {
    /// Starts at `θ = θ_ref = 0`.
    pub fn new(featurizer: F) -> Self {
        let d = featurizer.dim();
        Self { theta: vec![0.0; d], theta_ref: vec![0.0; d], featurizer }
    }

    pub fn with_params(featurizer: F, theta: Vec<f64>, theta_ref: Vec<f64>) -> Result<Self> {
        let d = featurizer.dim();
        if theta.len() != d || theta_ref.len() != d {
            return Err(Error::invalid(format!(
                "parameter dimensions ({}, {}) do not match featurizer dimension {d}",
                theta.len(),
                theta_ref.len()
            )));
        }
        Ok(Self { theta, theta_ref, featurizer })
    }

    fn checked_features(&self, prompt: &str, response: &str) -> Result<Vec<f64>> {
        let phi = self.featurizer.features(prompt, response)?;
        if phi.len() != self.theta.len() {
            return Err(Error::invalid(format!(
                "feature dimension {} does not match parameter dimension {}",
                phi.len(),
                self.theta.len()
            )));
        }
        Ok(phi)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            dimension: self.theta.len(),
            theta: self.theta.clone(),
            theta_ref: self.theta_ref.clone(),
            featurizer_id: self.featurizer.id(),
        }
    }

    pub fn from_checkpoint(featurizer: F, ckpt: Checkpoint) -> Result<Self> {
        if ckpt.featurizer_id != featurizer.id() {
            return Err(Error::invalid(format!(
                "checkpoint featurizer {:?} does not match {:?}",
                ckpt.featurizer_id,
                featurizer.id()
            )));
        }
        if ckpt.dimension != ckpt.theta.len() {
            return Err(Error::invalid("checkpoint dimension disagrees with theta length"));
        }
        Self::with_params(featurizer, ckpt.theta, ckpt.theta_ref)
    }
}

impl<F: Featurizer> PreferencePolicy for LogLinearPolicy<F> {
    fn dim(&self) -> usize {
        self.theta.len()
    }

    fn params(&self) -> &[f64] {
        &self.theta
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    fn reference_params(&self) -> &[f64] {
        &self.theta_ref
    }

    fn log_ratio(&self, prompt: &str, response: &str) -> Result<f64> {
        let phi = self.checked_features(prompt, response)?;
        Ok(self.theta.iter().zip(&self.theta_ref).zip(&phi).map(|((t, r), f)| (t - r) * f).sum())
    }

    fn margin(&self, prompt: &str, y1: &str, y2: &str) -> Result<MarginRecord> {
        let phi1 = self.checked_features(prompt, y1)?;
        let phi2 = self.checked_features(prompt, y2)?;
        let grad_delta: Vec<f64> = phi1.iter().zip(&phi2).map(|(a, b)| a - b).collect();
        let delta = self.theta.iter().zip(&self.theta_ref).zip(&grad_delta).map(|((t, r), g)| (t - r) * g).sum();
        Ok(MarginRecord { delta, grad_delta })
    }
}

/// Policy checkpoint on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub dimension: usize,
    pub theta: Vec<f64>,
    pub theta_ref: Vec<f64>,
    pub featurizer_id: String,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Explicit feature table keyed by `(prompt, response)`.
#[derive(Debug, Clone, Default)]
pub struct TableFeaturizer {
    pub dim: usize,
    pub table: HashMap<(String, String), Vec<f64>>,
}

impl TableFeaturizer {
    pub fn new(dim: usize) -> Self {
        Self { dim, table: HashMap::new() }
    }

    pub fn insert(&mut self, prompt: &str, response: &str, phi: Vec<f64>) {
        self.table.insert((prompt.to_string(), response.to_string()), phi);
    }
}

impl Featurizer for TableFeaturizer {
    fn id(&self) -> String {
        format!("table-{}", self.dim)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn features(&self, prompt: &str, response: &str) -> Result<Vec<f64>> {
        self.table
            .get(&(prompt.to_string(), response.to_string()))
            .cloned()
            .ok_or_else(|| Error::invalid(format!("no features for response {response:?} under prompt {prompt:?}")))
    }
}

/// Prompt-conditioned expected-bonus features of a reward expression.
///
/// The response part `ψ(y)` has one entry per known feature `f`: the
/// expected gap `r(s=1) − r(s=0)` over arms carrying `f`, where the other
/// features are drawn as independent one-hot picks within their catalog
/// groups (features outside the catalog count as fair coins). The prompt
/// part `κ(x)` is a constant slot plus one slot per known feature named in
/// the prompt (normalized to sum to one). `φ(x, y) = κ(x) ⊗ ψ(y)`.
#[derive(Debug, Clone)]
pub struct RewardFeaturizer {
    names: Vec<String>,
    index: BTreeMap<String, usize>,
    known: BTreeSet<String>,
}

impl RewardFeaturizer {
    pub fn new(known: &BTreeSet<String>) -> Self {
        let names: Vec<String> = known.iter().cloned().collect();
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Self { names, index, known: known.clone() }
    }

    /// Featurizer over the desk feature catalog.
    pub fn desk() -> Self {
        Self::new(&features::all_features().into_iter().map(str::to_string).collect())
    }

    pub fn response_dim(&self) -> usize {
        self.names.len()
    }

    pub fn prompt_dim(&self) -> usize {
        self.names.len() + 1
    }

    /// Known feature names mentioned as whole tokens in the prompt.
    pub fn prompt_keys(&self, prompt: &str) -> Vec<usize> {
        let mut keys: Vec<usize> = prompt
            .split(|c: char| !(c.is_ascii_alphanumeric() || c == '_' || c == '-'))
            .filter_map(|tok| self.index.get(tok).copied())
            .collect();
        keys.sort_unstable();
        keys.dedup();
        keys
    }

    pub fn response_features(&self, response: &str) -> Result<Vec<f64>> {
        let program = parse_reward(response, &self.known)?;
        Ok(self
            .names
            .iter()
            .map(|f| {
soft_eval(&program.ast, 1.0, f) - soft_eval(&program.ast, 0.0, f)
            })
            .collect())
    }
}

/// Probability that an arm carrying `given` also carries `other`, treating
/// catalog groups as independent one-hot draws.
fn co_occurrence(given: &str, other: &str) -> f64 {
    if given == other {
        return 1.0;
    }
    match (features::group_of(given), features::group_of(other)) {
        (Some(a), Some(b)) if a.name == b.name => 0.0,
        (_, Some(b)) => 1.0 / b.members.len() as f64,
        (_, None) => 0.5,
    }
}

/// Expected value of `e` over arms carrying `given`, with `and`/`or` read
/// as product and noisy-or of independent events.
fn soft_eval(e: &Expr, state: f64, given: &str) -> f64 {
    let go = |x: &Expr| soft_eval(x, state, given);
    match e {
        Expr::Num(v) => *v,
        Expr::State => state,
        Expr::Feature(f) => co_occurrence(given, f),
        Expr::Neg(x) => -go(x),
        Expr::Binary { op, lhs, rhs } => {
            let (a, b) = (go(lhs), go(rhs));
            let unit = (0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b);
            match op {
                BinOp::Add => a + b,
                BinOp::Sub => a - b,
                BinOp::Mul => a * b,
                BinOp::And if unit => a * b,
                BinOp::And => a.min(b),
                BinOp::Or if unit => a + b - a * b,
                BinOp::Or => a.max(b),
            }
        }
    }
}

impl Featurizer for RewardFeaturizer {
    fn id(&self) -> String {
        format!("reward-bonus-v1/{}", self.names.len())
    }

    fn dim(&self) -> usize {
        self.prompt_dim() * self.response_dim()
    }

    fn features(&self, prompt: &str, response: &str) -> Result<Vec<f64>> {
        let psi = self.response_features(response)?;
        let keys = self.prompt_keys(prompt);
        let r = psi.len();
        let mut phi = vec![0.0; self.dim()];
        phi[..r].copy_from_slice(&psi);
        if !keys.is_empty() {
            let w = 1.0 / keys.len() as f64;
            for k in keys {
                let block = &mut phi[(k + 1) * r..(k + 2) * r];
                for (dst, src) in block.iter_mut().zip(&psi) {
                    *dst = w * src;
                }
            }
        }
        Ok(phi)
    }
}

/// Softmax table over an enumerated candidate set per prompt.
#[derive(Debug, Clone)]
pub struct TabularPolicy {
    prompts: BTreeMap<String, PromptTable>,
    pub theta: Vec<f64>,
    pub theta_ref: Vec<f64>,
}

#[derive(Debug, Clone)]
struct PromptTable {
    offset: usize,
    candidates: Vec<String>,
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

impl TabularPolicy {
    /// Builds a table with all logits zero (uniform policies).
    pub fn uniform(candidates: &[(String, Vec<String>)]) -> Result<Self> {
        let mut prompts = BTreeMap::new();
        let mut offset = 0;
        for (prompt, cands) in candidates {
            if cands.is_empty() {
                return Err(Error::invalid(format!("prompt {prompt:?} has no candidates")));
            }
            let unique: BTreeSet<&String> = cands.iter().collect();
            if unique.len() != cands.len() {
                return Err(Error::invalid(format!("prompt {prompt:?} has duplicate candidates")));
            }
            prompts.insert(prompt.clone(), PromptTable { offset, candidates: cands.clone() });
            offset += cands.len();
        }
        Ok(Self { prompts, theta: vec![0.0; offset], theta_ref: vec![0.0; offset] })
    }

    /// Table whose logits are the log-linear scores `θ·φ(x, y)`.
    pub fn induced_by<F: Featurizer>(policy: &LogLinearPolicy<F>, candidates: &[(String, Vec<String>)]) -> Result<Self> {
        let mut table = Self::uniform(candidates)?;
        for (prompt, cands) in candidates {
            let offset = table.prompts[prompt].offset;
            for (j, y) in cands.iter().enumerate() {
                let phi = policy.checked_features(prompt, y)?;
                table.theta[offset + j] = dot(&policy.theta, &phi);
                table.theta_ref[offset + j] = dot(&policy.theta_ref, &phi);
            }
        }
        Ok(table)
    }

    fn locate(&self, prompt: &str, response: &str) -> Result<(&PromptTable, usize)> {
        let t = self
            .prompts
            .get(prompt)
            .ok_or_else(|| Error::invalid(format!("unknown prompt {prompt:?}")))?;
        let j = t
            .candidates
            .iter()
            .position(|c| c == response)
            .ok_or_else(|| Error::invalid(format!("unknown response {response:?}")))?;
        Ok((t, j))
    }

    /// `(log π_θ(·|x), log π_ref(·|x))` over the prompt's candidates.
    pub fn log_probs(&self, prompt: &str) -> Result<(Vec<f64>, Vec<f64>)> {
        let t = self
            .prompts
            .get(prompt)
            .ok_or_else(|| Error::invalid(format!("unknown prompt {prompt:?}")))?;
        let range = t.offset..t.offset + t.candidates.len();
        Ok((log_softmax(&self.theta[range.clone()]), log_softmax(&self.theta_ref[range])))
    }
}

impl PreferencePolicy for TabularPolicy {
    fn dim(&self) -> usize {
        self.theta.len()
    }

    fn params(&self) -> &[f64] {
        &self.theta
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    fn reference_params(&self) -> &[f64] {
        &self.theta_ref
    }

    fn log_ratio(&self, prompt: &str, response: &str) -> Result<f64> {
        let (_, j) = self.locate(prompt, response)?;
        let (lp, lp_ref) = self.log_probs(prompt)?;
        Ok(lp[j] - lp_ref[j])
    }

    fn margin(&self, prompt: &str, y1: &str, y2: &str) -> Result<MarginRecord> {
        let (t, j1) = self.locate(prompt, y1)?;
        let (_, j2) = self.locate(prompt, y2)?;
        let (lp, lp_ref) = self.log_probs(prompt)?;
        let delta = (lp[j1] - lp_ref[j1]) - (lp[j2] - lp_ref[j2]);
        // ∂ log π(y_j)/∂θ_k = 1[k = j] − π(k); the softmax terms cancel between y1 and y2.
        let mut grad_delta = vec![0.0; self.theta.len()];
        for (k, &l) in lp.iter().enumerate() {
            let pk = l.exp();
            let d1 = f64::from(u8::from(k == j1)) - pk;
            let d2 = f64::from(u8::from(k == j2)) - pk;
            grad_delta[t.offset + k] = d1 - d2;
        }
        Ok(MarginRecord { delta, grad_delta })
    }
}

//! Decision points and the reference linear-softmax policy.
//!
//! The policy chooses function tokens at the two branching points of a
//! session. Each decision kind owns a disjoint set of parameter rows, and
//! the distribution is a softmax over the rows of the allowed actions.

use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::env::QuestionKind;
use crate::token::FunctionName;

/// Feature dimensionality.
pub const FEATURE_DIM: usize = 11;
/// One parameter row per action across both decision kinds.
pub const NUM_ACTION_ROWS: usize = 5;

pub const FEATURE_NAMES: [&str; FEATURE_DIM] = [
    "qa_similarity",
    "knowledge_similarity",
    "qa_hit",
    "knowledge_hit",
    "kind_fact",
    "kind_search",
    "kind_reasoning",
    "difficulty",
    "advice_cost",
    "memory_saturation",
    "bias",
];

const PARAMS_HEADER: &str = "agile-params v1";

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("non-finite logits")]
    NonFiniteLogits,
    #[error("{action} is not allowed at {kind:?}")]
    DisallowedAction { action: FunctionName, kind: DecisionKind },
    #[error("invalid decision point: {0}")]
    InvalidPoint(String),
    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DecisionKind {
    /// After memory retrieval: search, predict directly, or seek advice.
    AfterRetrieve,
    /// After advice: reflect first, or write the QA pair directly.
    AfterAdvice,
}

impl DecisionKind {
    pub fn actions(self) -> &'static [FunctionName] {
        match self {
            DecisionKind::AfterRetrieve => &[
                FunctionName::SearchProduct,
                FunctionName::PredictAnswer,
                FunctionName::SeekAdvice,
            ],
            DecisionKind::AfterAdvice => &[FunctionName::Reflection, FunctionName::UpdateMemory],
        }
    }

    /// Parameter row for `action` under this kind.
    pub fn row(self, action: FunctionName) -> Option<usize> {
        let pos = self.actions().iter().position(|&a| a == action)?;
        Some(match self {
            DecisionKind::AfterRetrieve => pos,
            DecisionKind::AfterAdvice => 3 + pos,
        })
    }
}

/// Observable inputs to a decision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub qa_similarity: f64,
    pub knowledge_similarity: f64,
    pub qa_hit: bool,
    pub knowledge_hit: bool,
    pub kind: QuestionKind,
    pub difficulty: f64,
    pub advice_cost: f64,
    /// Earlier similar questions already in memory.
    pub similar_in_memory: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(pub [f64; FEATURE_DIM]);

impl FeatureVector {
    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl From<&Observation> for FeatureVector {
    fn from(o: &Observation) -> Self {
        let mut x = [0.0; FEATURE_DIM];
        x[0] = o.qa_similarity;
        x[1] = o.knowledge_similarity;
        x[2] = f64::from(u8::from(o.qa_hit));
        x[3] = f64::from(u8::from(o.knowledge_hit));
        x[4 + o.kind.index()] = 1.0;
        x[7] = o.difficulty;
        x[8] = o.advice_cost;
        let m = o.similar_in_memory as f64;
        x[9] = m / (m + 1.0);
        x[10] = 1.0;
        FeatureVector(x)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionPoint {
    pub kind: DecisionKind,
    pub allowed: Vec<FunctionName>,
    pub features: FeatureVector,
}

impl DecisionPoint {
    /// All of `kind`'s actions that `enabled` accepts.
    pub fn new(
        kind: DecisionKind,
        features: FeatureVector,
        enabled: impl Fn(FunctionName) -> bool,
    ) -> Result<Self, PolicyError> {
        let allowed: Vec<FunctionName> =
            kind.actions().iter().copied().filter(|&a| enabled(a)).collect();
        let point = Self {
            kind,
            allowed,
            features,
        };
        point.validate()?;
        Ok(point)
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.allowed.is_empty() {
            return Err(PolicyError::InvalidPoint("no allowed actions".into()));
        }
        if let Some(a) = self.allowed.iter().find(|a| self.kind.row(**a).is_none()) {
            return Err(PolicyError::DisallowedAction {
                action: *a,
                kind: self.kind,
            });
        }
        if !self.features.is_finite() {
            return Err(PolicyError::InvalidPoint("non-finite features".into()));
        }
        Ok(())
    }

    pub fn position(&self, action: FunctionName) -> Result<usize, PolicyError> {
        self.allowed
            .iter()
            .position(|&a| a == action)
            .ok_or(PolicyError::DisallowedAction {
                action,
                kind: self.kind,
            })
    }
}

/// θ: one row of `FEATURE_DIM` weights per action row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    theta: Vec<f64>,
}

impl Default for PolicyParams {
    fn default() -> Self {
        Self::zeros()
    }
}

impl PolicyParams {
    pub fn zeros() -> Self {
        Self {
            theta: vec![0.0; NUM_ACTION_ROWS * FEATURE_DIM],
        }
    }

    pub fn from_flat(theta: Vec<f64>) -> Result<Self, PolicyError> {
        if theta.len() != NUM_ACTION_ROWS * FEATURE_DIM {
            return Err(PolicyError::MalformedCheckpoint(format!(
                "expected {} values, got {}",
                NUM_ACTION_ROWS * FEATURE_DIM,
                theta.len()
            )));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(PolicyError::MalformedCheckpoint("non-finite parameter".into()));
        }
        Ok(Self { theta })
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.theta
    }

    pub fn as_flat_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.theta[r * FEATURE_DIM..(r + 1) * FEATURE_DIM]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.theta[r * FEATURE_DIM..(r + 1) * FEATURE_DIM]
    }

    pub fn is_finite(&self) -> bool {
        self.theta.iter().all(|v| v.is_finite())
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &PolicyParams, scale: f64) {
        for (a, b) in self.theta.iter_mut().zip(&other.theta) {
            *a += scale * b;
        }
    }

    pub fn max_abs_diff(&self, other: &PolicyParams) -> f64 {
        self.theta
            .iter()
            .zip(&other.theta)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Content hash used to tag rollouts with the parameters that made them.
    pub fn checkpoint_hash(&self) -> String {
        let mut h = Sha256::new();
        for v in &self.theta {
            h.update(v.to_bits().to_le_bytes());
        }
        h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    fn logits(&self, point: &DecisionPoint) -> Result<Vec<f64>, PolicyError> {
        let x = point.features.as_slice();
        let logits: Vec<f64> = point
            .allowed
            .iter()
            .map(|&a| {
                let r = point.kind.row(a).expect("validated point");
                self.row(r).iter().zip(x).map(|(w, v)| w * v).sum()
            })
            .collect();
        if logits.iter().any(|l: &f64| !l.is_finite()) {
            return Err(PolicyError::NonFiniteLogits);
        }
        Ok(logits)
    }

    /// Softmax over the allowed actions, in `point.allowed` order.
    pub fn action_distribution(&self, point: &DecisionPoint) -> Result<Vec<f64>, PolicyError> {
        let logits = self.logits(point)?;
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        Ok(exps.into_iter().map(|e| e / z).collect())
    }

    pub fn logprob(&self, point: &DecisionPoint, action: FunctionName) -> Result<f64, PolicyError> {
        let i = point.position(action)?;
        let logits = self.logits(point)?;
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        Ok(logits[i] - lse)
    }

    /// ∇θ log π(action | point): `(1[b = a] − p_b) x` on each allowed row b.
    pub fn grad_logprob(
        &self,
        point: &DecisionPoint,
        action: FunctionName,
    ) -> Result<PolicyParams, PolicyError> {
        let mut g = PolicyParams::zeros();
        self.accumulate_grad_logprob(point, action, 1.0, &mut g)?;
        Ok(g)
    }

    /// `grad += scale * ∇θ log π(action | point)`
    pub fn accumulate_grad_logprob(
        &self,
        point: &DecisionPoint,
        action: FunctionName,
        scale: f64,
        grad: &mut PolicyParams,
    ) -> Result<(), PolicyError> {
        let i = point.position(action)?;
        let probs = self.action_distribution(point)?;
        let x = point.features.as_slice();
        for (j, (&b, p)) in point.allowed.iter().zip(&probs).enumerate() {
            let coef = scale * (f64::from(u8::from(i == j)) - p);
            let r = point.kind.row(b).expect("validated point");
            for (g, v) in grad.row_mut(r).iter_mut().zip(x) {
                *g += coef * v;
            }
        }
        Ok(())
    }

    pub fn save<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{PARAMS_HEADER} {NUM_ACTION_ROWS} {FEATURE_DIM}")?;
        for v in &self.theta {
            writeln!(w, "{v:e}")?;
        }
        Ok(())
    }

    pub fn load<R: BufRead>(r: R) -> Result<Self, PolicyError> {
        let bad = |m: String| PolicyError::MalformedCheckpoint(m);
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| bad("empty checkpoint".into()))?
            .map_err(|e| bad(e.to_string()))?;
        let shape = header
            .strip_prefix(PARAMS_HEADER)
            .ok_or_else(|| bad("missing header".into()))?;
        let dims: Vec<usize> = shape
            .split_whitespace()
            .map(|s| s.parse().map_err(|_| bad(format!("bad shape `{shape}`"))))
            .collect::<Result<_, _>>()?;
        if dims != [NUM_ACTION_ROWS, FEATURE_DIM] {
            return Err(bad(format!("unsupported shape {dims:?}")));
        }
        let theta = lines
            .map(|l| {
                let l = l.map_err(|e| bad(e.to_string()))?;
                l.trim().parse::<f64>().map_err(|_| bad(format!("bad value `{l}`")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_flat(theta)
    }
}

/// Contract for anything that can act as the decision-making policy. An
/// adapter around an external language model would implement this too.
pub trait PolicyModel {
    fn action_distribution(&self, point: &DecisionPoint) -> Result<Vec<f64>, PolicyError>;

    fn checkpoint(&self) -> String;
}

impl PolicyModel for PolicyParams {
    fn action_distribution(&self, point: &DecisionPoint) -> Result<Vec<f64>, PolicyError> {
        PolicyParams::action_distribution(self, point)
    }

    fn checkpoint(&self) -> String {
        self.checkpoint_hash()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    /// Sample at temperature 1 (rollouts).
    Sample,
    /// Highest probability, ties to the earliest allowed action (evaluation).
    Greedy,
}

/// Index drawn from `probs` by inverse CDF.
pub fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

pub fn argmax_index(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p > probs[best] {
            best = i;
        }
    }
    best
}

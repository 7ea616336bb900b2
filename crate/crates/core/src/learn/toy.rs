//! Small models with exactly computable objectives, used to check the
//! session decomposition and PPO's economics.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{fit_value_weighted, ppo_update_samples, LearnError, PpoConfig, PpoDecision, PpoSession};
use crate::env::QuestionKind;
use crate::policy::{argmax_index, sample_index, DecisionKind, DecisionPoint, FeatureVector, Observation, PolicyParams};
use crate::token::FunctionName;

/// A question in the toy MDP. Predicting succeeds with `p_known` when its
/// key is in memory and `p_unknown` otherwise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyQuestion {
    pub key: usize,
    pub p_known: f64,
    pub p_unknown: f64,
}

/// Sessions of one or two decisions: predict or seek advice, then reflect
/// (store the key) or write directly. Memory is a bitmask of keys.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyMdp {
    pub questions: Vec<ToyQuestion>,
    pub cost: f64,
}

/// State at the start of session `session` (0-based).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ToyState {
    pub session: usize,
    pub memory: u8,
}

/// One way a session can unfold from a given state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyBranch {
    pub prob: f64,
    pub reward: f64,
    pub next_memory: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyTrajectory {
    pub prob: f64,
    /// Start state and reward of each session.
    pub sessions: Vec<(ToyState, f64)>,
}

impl ToyMdp {
    pub fn n(&self) -> usize {
        self.questions.len()
    }

    pub fn decision_point(&self, state: ToyState, kind: DecisionKind) -> DecisionPoint {
        let q = self.questions[state.session];
        let known = state.memory & (1 << q.key) != 0;
        let obs = Observation {
            qa_similarity: 0.0,
            knowledge_similarity: if known { 1.0 } else { 0.0 },
            qa_hit: false,
            knowledge_hit: known,
            kind: QuestionKind::Reasoning,
            difficulty: 0.5,
            advice_cost: self.cost,
            similar_in_memory: usize::from(known),
        };
        DecisionPoint::new(kind, FeatureVector::from(&obs), |a| a != FunctionName::SearchProduct)
            .expect("toy decision points are valid")
    }

    fn prob_of(params: &PolicyParams, point: &DecisionPoint, action: FunctionName) -> Result<f64, LearnError> {
        let probs = params.action_distribution(point)?;
        Ok(probs[point.position(action)?])
    }

    /// Every outcome of the session starting in `state`.
    pub fn branches(&self, params: &PolicyParams, state: ToyState) -> Result<Vec<ToyBranch>, LearnError> {
        let q = self.questions[state.session];
        let known = state.memory & (1 << q.key) != 0;
        let first = self.decision_point(state, DecisionKind::AfterRetrieve);
        let p_predict = Self::prob_of(params, &first, FunctionName::PredictAnswer)?;
        let p_advice = Self::prob_of(params, &first, FunctionName::SeekAdvice)?;
        let second = self.decision_point(state, DecisionKind::AfterAdvice);
        let p_reflect = Self::prob_of(params, &second, FunctionName::Reflection)?;
        let p_ok = if known { q.p_known } else { q.p_unknown };
        let m = state.memory;
        Ok(vec![
            ToyBranch { prob: p_predict * p_ok, reward: 1.0, next_memory: m },
            ToyBranch { prob: p_predict * (1.0 - p_ok), reward: 0.0, next_memory: m },
            ToyBranch { prob: p_advice * p_reflect, reward: 1.0 - self.cost, next_memory: m | (1 << q.key) },
            ToyBranch { prob: p_advice * (1.0 - p_reflect), reward: 1.0 - self.cost, next_memory: m },
        ])
    }

    /// All complete trajectories with their probabilities.
    pub fn enumerate(&self, params: &PolicyParams) -> Result<Vec<ToyTrajectory>, LearnError> {
        let mut out = Vec::new();
        let mut stack = vec![ToyTrajectory { prob: 1.0, sessions: Vec::new() }];
        let mut memories = vec![0u8];
        while let Some(t) = stack.pop() {
            let memory = memories.pop().expect("paired with stack");
            let i = t.sessions.len();
            if i == self.n() {
                out.push(t);
                continue;
            }
            let state = ToyState { session: i, memory };
            for b in self.branches(params, state)? {
                let mut next = t.clone();
                next.prob *= b.prob;
                next.sessions.push((state, b.reward));
                stack.push(next);
                memories.push(b.next_memory);
            }
        }
        Ok(out)
    }

    /// `R(θ)`: expected total reward by exhaustive enumeration.
    pub fn expected_return(&self, params: &PolicyParams) -> Result<f64, LearnError> {
        Ok(self
            .enumerate(params)?
            .iter()
            .map(|t| t.prob * t.sessions.iter().map(|(_, r)| r).sum::<f64>())
            .sum())
    }

    /// Exact `V_θ(S)` for every reachable session-start state, obtained by
    /// weighted least squares of reward-to-go on one-hot state features.
    pub fn fitted_values(&self, params: &PolicyParams) -> Result<BTreeMap<ToyState, f64>, LearnError> {
        let trajectories = self.enumerate(params)?;
        let mut index: BTreeMap<ToyState, usize> = BTreeMap::new();
        for t in &trajectories {
            for (s, _) in &t.sessions {
                let next = index.len();
                index.entry(*s).or_insert(next);
            }
        }
        let d = index.len();
        let (mut xs, mut ys, mut ws) = (Vec::new(), Vec::new(), Vec::new());
        for t in &trajectories {
            for (i, (s, _)) in t.sessions.iter().enumerate() {
                let mut x = vec![0.0; d];
                x[index[s]] = 1.0;
                xs.push(x);
                ys.push(t.sessions[i..].iter().map(|(_, r)| r).sum());
                ws.push(t.prob);
            }
        }
        let fit = fit_value_weighted(&xs, &ys, &ws)?;
        Ok(index
            .into_iter()
            .map(|(s, j)| (s, fit.estimator.weights[j]))
            .collect())
    }

    /// `R(θ | θ_k)` in its per-session proxy-reward form, plus the constant
    /// term, with `V = V_{θ_k}`. State distributions come from a forward
    /// pass under `θ_k`; sessions are sampled from `θ`.
    pub fn session_objective(
        &self,
        params: &PolicyParams,
        base: &PolicyParams,
        values: &BTreeMap<ToyState, f64>,
    ) -> Result<f64, LearnError> {
        let n = self.n();
        let v = |s: ToyState| -> f64 {
            if s.session >= n { 0.0 } else { values.get(&s).copied().unwrap_or(0.0) }
        };
        // memory -> (P(S_i = s), E[r(τ_{1:i-1}) · 1(S_i = s)])
        let mut dist: BTreeMap<u8, (f64, f64)> = BTreeMap::from([(0u8, (1.0, 0.0))]);
        let mut proxy_term = 0.0;
        let mut constant = 0.0;
        for i in 0..n {
            let mut next: BTreeMap<u8, (f64, f64)> = BTreeMap::new();
            for (&memory, &(p, acc)) in &dist {
                let s = ToyState { session: i, memory };
                for b in self.branches(params, s)? {
                    let s1 = ToyState { session: i + 1, memory: b.next_memory };
                    proxy_term += p * b.prob * (b.reward + v(s1) - v(s));
                }
                constant += acc + p * v(s);
                for b in self.branches(base, s)? {
                    let e = next.entry(b.next_memory).or_insert((0.0, 0.0));
                    e.0 += p * b.prob;
                    e.1 += b.prob * (acc + p * b.reward);
                }
            }
            dist = next;
        }
        Ok((proxy_term + constant) / n as f64)
    }
}

/// Single decision between `[PredictAnswer]` (pays 1 with probability `p`)
/// and `[SeekAdvice]` (pays `1 − c`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoArmedToy {
    pub p: f64,
    pub cost: f64,
}

impl TwoArmedToy {
    pub fn point(&self) -> DecisionPoint {
        let obs = Observation {
            qa_similarity: 0.0,
            knowledge_similarity: 0.0,
            qa_hit: false,
            knowledge_hit: false,
            kind: QuestionKind::Fact,
            difficulty: 0.5,
            advice_cost: self.cost,
            similar_in_memory: 0,
        };
        DecisionPoint::new(DecisionKind::AfterRetrieve, FeatureVector::from(&obs), |a| {
            a != FunctionName::SearchProduct
        })
        .expect("valid point")
    }

    /// Trains from θ = 0 with `iterations` rounds of sampling `batch`
    /// sessions followed by one PPO update.
    pub fn train(
        &self,
        seed: u64,
        iterations: usize,
        batch: usize,
        cfg: &PpoConfig,
    ) -> Result<PolicyParams, LearnError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let point = self.point();
        let mut params = PolicyParams::zeros();
        for k in 0..iterations {
            let probs = params.action_distribution(&point)?;
            let sessions: Vec<PpoSession> = (0..batch)
                .map(|_| {
                    let action = point.allowed[sample_index(&probs, &mut rng)];
                    let r = match action {
                        FunctionName::SeekAdvice => 1.0 - self.cost,
                        _ => f64::from(u8::from(rng.gen_bool(self.p))),
                    };
                    PpoSession {
                        decisions: vec![PpoDecision { point: point.clone(), action, reward_to_go: r }],
                        proxy_reward: r,
                    }
                })
                .collect();
            let step_cfg = PpoConfig { seed: seed ^ (k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15), ..*cfg };
            params = ppo_update_samples(&params, &sessions, &step_cfg)?.0;
        }
        Ok(params)
    }

    pub fn preferred(&self, params: &PolicyParams) -> Result<FunctionName, LearnError> {
        let point = self.point();
        let probs = params.action_distribution(&point)?;
        Ok(point.allowed[argmax_index(&probs)])
    }
}

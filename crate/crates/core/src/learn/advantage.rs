use serde::{Deserialize, Serialize};

use super::LearnError;
use crate::memory::BagOfWords;
use crate::token::Token;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdvantageConfig {
    pub beta: f64,
    /// Two questions are "similar enough" when their similarity reaches this.
    pub similarity_threshold: f64,
}

impl Default for AdvantageConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            similarity_threshold: 0.6,
        }
    }
}

impl AdvantageConfig {
    pub fn validate(&self) -> Result<(), LearnError> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(LearnError::InvalidConfig(format!("beta {} < 0", self.beta)));
        }
        let t = self.similarity_threshold;
        if !(t > 0.0 && t <= 1.0) {
            return Err(LearnError::InvalidConfig(format!("similarity threshold {t} not in (0, 1]")));
        }
        Ok(())
    }
}

fn bags(questions: &[Vec<Token>]) -> Vec<Option<BagOfWords>> {
    questions.iter().map(|q| BagOfWords::new(q).ok()).collect()
}

fn similar(a: &Option<BagOfWords>, b: &Option<BagOfWords>, threshold: f64) -> bool {
    match (a, b) {
        (Some(a), Some(b)) => a.cosine(b) >= threshold,
        _ => false,
    }
}

/// `A_i = β · 1(N > 0) / (M + 1)` for the 1-based session `i`, where N counts
/// later questions similar to `q_i` and M counts earlier similar questions
/// whose session wrote memory.
pub fn state_advantage(
    i: usize,
    questions: &[Vec<Token>],
    memory_events: &[bool],
    cfg: &AdvantageConfig,
) -> Result<f64, LearnError> {
    let n = questions.len();
    if i == 0 || i > n || memory_events.len() != n {
        return Err(LearnError::InvalidIndex { index: i, n });
    }
    let bags = bags(questions);
    let me = &bags[i - 1];
    let later = bags[i..].iter().any(|b| similar(me, b, cfg.similarity_threshold));
    let earlier = bags[..i - 1]
        .iter()
        .zip(memory_events)
        .filter(|(b, &w)| w && similar(me, b, cfg.similarity_threshold))
        .count();
    Ok(if later { cfg.beta / (earlier as f64 + 1.0) } else { 0.0 })
}

/// `state_advantage` for every session at once, sharing one similarity pass.
pub fn state_advantages(
    questions: &[Vec<Token>],
    memory_events: &[bool],
    cfg: &AdvantageConfig,
) -> Result<Vec<f64>, LearnError> {
    let n = questions.len();
    if memory_events.len() != n {
        return Err(LearnError::InvalidConfig(format!(
            "{} memory flags for {n} questions",
            memory_events.len()
        )));
    }
    let bags = bags(questions);
    let mut later = vec![false; n];
    let mut earlier = vec![0usize; n];
    for i in 0..n {
        for j in i + 1..n {
            if similar(&bags[i], &bags[j], cfg.similarity_threshold) {
                later[i] = true;
                if memory_events[i] {
                    earlier[j] += 1;
                }
            }
        }
    }
    Ok((0..n)
        .map(|i| if later[i] { cfg.beta / (earlier[i] as f64 + 1.0) } else { 0.0 })
        .collect())
}

/// `r̃ = r + A`
pub fn proxy_reward(session_reward: f64, advantage: f64) -> f64 {
    session_reward + advantage
}

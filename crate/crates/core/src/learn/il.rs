use serde::{Deserialize, Serialize};

use super::LearnError;
use crate::policy::{DecisionPoint, PolicyParams};
use crate::token::FunctionName;
use crate::trajectory::{SessionTrajectory, TrajectoryError};

/// One supervised target: the expert's action at a decision point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IlExample {
    pub point: DecisionPoint,
    pub action: FunctionName,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IlConfig {
    pub lr: f64,
    pub epochs: usize,
}

impl Default for IlConfig {
    fn default() -> Self {
        Self {
            lr: 2.0,
            epochs: 1000,
        }
    }
}

/// Decision targets from demonstration sessions. Forced steps carry no
/// choice and contribute nothing.
pub fn il_examples(sessions: &[SessionTrajectory]) -> Vec<IlExample> {
    sessions
        .iter()
        .flat_map(|s| &s.decisions)
        .map(|d| IlExample {
            point: d.point.clone(),
            action: d.action,
        })
        .collect()
}

/// Positions of a session's training sequence that receive loss: the
/// action tokens of its decisions.
pub fn loss_positions(session: &SessionTrajectory) -> Result<Vec<usize>, TrajectoryError> {
    let seq = session.training_sequence()?;
    Ok(session
        .decisions
        .iter()
        .map(|d| seq.action_positions[d.step])
        .collect())
}

/// Mean cross-entropy `−log π(a | x)` over decisions.
pub fn il_loss(params: &PolicyParams, examples: &[IlExample]) -> Result<f64, LearnError> {
    if examples.is_empty() {
        return Err(LearnError::EmptyDataset);
    }
    let mut total = 0.0;
    for e in examples {
        total -= params.logprob(&e.point, e.action)?;
    }
    Ok(total / examples.len() as f64)
}

/// Gradient of [`il_loss`].
pub fn il_gradient(params: &PolicyParams, examples: &[IlExample]) -> Result<PolicyParams, LearnError> {
    if examples.is_empty() {
        return Err(LearnError::EmptyDataset);
    }
    let mut g = PolicyParams::zeros();
    let scale = -1.0 / examples.len() as f64;
    for e in examples {
        params.accumulate_grad_logprob(&e.point, e.action, scale, &mut g)?;
    }
    Ok(g)
}

/// One epoch of full-batch gradient descent.
pub fn il_update(
    params: &PolicyParams,
    examples: &[IlExample],
    lr: f64,
) -> Result<PolicyParams, LearnError> {
    let g = il_gradient(params, examples)?;
    let mut next = params.clone();
    next.add_scaled(&g, -lr);
    if !next.is_finite() {
        return Err(LearnError::NonFinite);
    }
    Ok(next)
}

/// Runs `cfg.epochs` updates, returning the parameters and the loss before
/// each epoch plus the final loss.
pub fn train_il(
    params: &PolicyParams,
    examples: &[IlExample],
    cfg: &IlConfig,
) -> Result<(PolicyParams, Vec<f64>), LearnError> {
    if !(cfg.lr >= 0.0 && cfg.lr.is_finite()) {
        return Err(LearnError::InvalidConfig(format!("IL learning rate {}", cfg.lr)));
    }
    let mut p = params.clone();
    let mut losses = Vec::with_capacity(cfg.epochs + 1);
    for _ in 0..cfg.epochs {
        losses.push(il_loss(&p, examples)?);
        p = il_update(&p, examples, cfg.lr)?;
    }
    losses.push(il_loss(&p, examples)?);
    Ok((p, losses))
}

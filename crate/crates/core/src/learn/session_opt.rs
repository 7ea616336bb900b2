use std::collections::BTreeSet;
use std::thread;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    fit_value, ppo_update, proxy_reward, state_advantages, AdvantageConfig, LearnError, PpoConfig,
    ValueFit,
};
use crate::env::{Environment, SyntheticTask};
use crate::executor::{Executor, PolicyDecider};
use crate::policy::{PolicyParams, SelectionMode};
use crate::token::FunctionName;
use crate::trajectory::SessionTrajectory;

/// Where the state-advantage term of the proxy reward comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageSource {
    /// `β · 1(N > 0) / (M + 1)`, credited to sessions that distilled
    /// knowledge into memory.
    #[default]
    Heuristic,
    /// `V(S_{i+1}) − V(S_i)` from a linear value function fitted on the
    /// iteration's rollouts.
    FittedValue,
    /// No inter-session credit.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizeConfig {
    /// Outer iterations K.
    pub outer_iters: usize,
    /// Trajectories sampled per outer iteration.
    pub rollouts_per_iter: usize,
    pub advantage: AdvantageConfig,
    pub advantage_source: AdvantageSource,
    pub ppo: PpoConfig,
    pub seed: u64,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        Self {
            outer_iters: 3,
            rollouts_per_iter: 2,
            advantage: AdvantageConfig::default(),
            advantage_source: AdvantageSource::default(),
            ppo: PpoConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    pub iteration: usize,
    /// Checkpoint the rollouts were sampled from.
    pub checkpoint: String,
    pub sessions: usize,
    pub advice_rate: f64,
    pub accuracy: f64,
    pub total_score: f64,
    pub mean_proxy_reward: f64,
    pub surrogate_start: f64,
    pub surrogate_end: f64,
    pub clip_fraction: f64,
    pub bound_violations: usize,
    pub value_mse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeResult {
    pub params: PolicyParams,
    pub iterations: Vec<IterationStats>,
}

/// Deterministic, well-mixed seed for a (base, a, b) triple.
pub(crate) fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut z = base ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Initial-state features for the value function, one row per session
/// start plus the terminal state: memory size / n, fraction of knowledge
/// keys distilled into memory, session index / n, bias.
pub fn value_features(sessions: &[SessionTrajectory], task: &SyntheticTask) -> Vec<Vec<f64>> {
    let n = sessions.len().max(1) as f64;
    let keys = task.knowledge.len().max(1) as f64;
    let mut covered = BTreeSet::new();
    let mut rows = Vec::with_capacity(sessions.len() + 1);
    let mut memory = sessions.first().map_or(0, |s| s.initial_state.memory_size);
    for (i, s) in sessions.iter().enumerate() {
        memory = s.initial_state.memory_size;
        rows.push(vec![memory as f64 / n, covered.len() as f64 / keys, i as f64 / n, 1.0]);
        if s.reflected() {
            if let Some(k) = s.question.and_then(|q| task.question(q)).and_then(|q| q.knowledge_key) {
                covered.insert(k);
            }
        }
    }
    if let Some(last) = sessions.last() {
        memory += usize::from(last.wrote_memory()) + usize::from(last.reflected());
    }
    rows.push(vec![memory as f64 / n, covered.len() as f64 / keys, 1.0, 1.0]);
    rows
}

/// Proxy rewards `r̃_i = r_i + A_i` for each trajectory's sessions.
pub fn proxy_rewards(
    trajectories: &[(&SyntheticTask, &[SessionTrajectory])],
    source: AdvantageSource,
    cfg: &AdvantageConfig,
) -> Result<(Vec<Vec<f64>>, Option<ValueFit>), LearnError> {
    cfg.validate()?;
    match source {
        AdvantageSource::None => Ok((
            trajectories
                .iter()
                .map(|(_, ss)| ss.iter().map(|s| s.total_reward).collect())
                .collect(),
            None,
        )),
        AdvantageSource::Heuristic => {
            let mut out = Vec::with_capacity(trajectories.len());
            for (_, ss) in trajectories {
                let questions: Vec<_> = ss
                    .iter()
                    .map(|s| s.question_text().map(<[_]>::to_vec).unwrap_or_default())
                    .collect();
                let events: Vec<bool> = ss.iter().map(SessionTrajectory::reflected).collect();
                let adv = state_advantages(&questions, &events, cfg)?;
                out.push(
                    ss.iter()
                        .zip(adv.iter().zip(&events))
                        .map(|(s, (a, &e))| proxy_reward(s.total_reward, if e { *a } else { 0.0 }))
                        .collect(),
                );
            }
            Ok((out, None))
        }
        AdvantageSource::FittedValue => {
            let feats: Vec<Vec<Vec<f64>>> = trajectories
                .iter()
                .map(|(task, ss)| value_features(ss, task))
                .collect();
            let (mut xs, mut ys) = (Vec::new(), Vec::new());
            for ((_, ss), f) in trajectories.iter().zip(&feats) {
                let mut to_go: f64 = ss.iter().map(|s| s.total_reward).sum();
                for (s, x) in ss.iter().zip(f) {
                    xs.push(x.clone());
                    ys.push(to_go);
                    to_go -= s.total_reward;
                }
            }
            let fit = fit_value(&xs, &ys)?;
            let out = trajectories
                .iter()
                .zip(&feats)
                .map(|((_, ss), f)| {
                    ss.iter()
                        .enumerate()
                        .map(|(i, s)| {
                            let next = if i + 1 == ss.len() { 0.0 } else { fit.estimator.predict(&f[i + 1]) };
                            proxy_reward(s.total_reward, next - fit.estimator.predict(&f[i]))
                        })
                        .collect()
                })
                .collect();
            Ok((out, Some(fit)))
        }
    }
}

fn summarize(sessions: &[SessionTrajectory]) -> (f64, f64, f64) {
    let n = sessions.len().max(1) as f64;
    let advice = sessions.iter().filter(|s| s.calls(FunctionName::SeekAdvice)).count() as f64;
    let correct = sessions.iter().filter(|s| s.correct()).count() as f64;
    let total: f64 = sessions.iter().map(|s| s.total_reward).sum();
    (advice / n, correct / n, total / n)
}

/// Runs every environment to exhaustion under `params`, one thread per
/// environment.
pub(crate) fn rollouts(
    params: &PolicyParams,
    executor: &Executor,
    envs: Vec<(Environment, u64)>,
    mode: SelectionMode,
) -> Result<Vec<Vec<SessionTrajectory>>, LearnError> {
    thread::scope(|scope| {
        let handles: Vec<_> = envs
            .into_iter()
            .map(|(mut env, seed)| {
                scope.spawn(move || {
                    let mut state = executor.new_state();
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let mut decider = PolicyDecider::new(params, mode);
                    executor
                        .run_trajectory(&mut decider, &mut env, &mut state, &mut rng, None)
                        .map(|(_, s)| s)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("rollout thread panicked").map_err(LearnError::from))
            .collect()
    })
}

/// Greedy evaluation over one environment, starting from empty memory.
pub fn evaluate(
    params: &PolicyParams,
    executor: &Executor,
    env: Environment,
) -> Result<Vec<SessionTrajectory>, LearnError> {
    Ok(rollouts(params, executor, vec![(env, 0)], SelectionMode::Greedy)?
        .pop()
        .unwrap_or_default())
}

/// Session-level optimization: each outer iteration samples trajectories
/// under θ_k, annotates every session with its proxy reward and runs PPO
/// treating sessions as independent.
///
/// `env_factory(k, r)` supplies the environment for rollout `r` of
/// iteration `k`.
pub fn session_level_optimize(
    params0: &PolicyParams,
    executor: &Executor,
    env_factory: &mut dyn FnMut(usize, usize) -> Result<Environment, LearnError>,
    cfg: &OptimizeConfig,
) -> Result<OptimizeResult, LearnError> {
    cfg.ppo.validate()?;
    cfg.advantage.validate()?;
    let mut params = params0.clone();
    let mut iterations = Vec::with_capacity(cfg.outer_iters);
    for k in 0..cfg.outer_iters {
        let envs = (0..cfg.rollouts_per_iter)
            .map(|r| Ok((env_factory(k, r)?, derive_seed(cfg.seed, k as u64, r as u64))))
            .collect::<Result<Vec<_>, LearnError>>()?;
        let tasks: Vec<_> = envs.iter().map(|(e, _)| e.shared_task()).collect();
        let sampled = rollouts(&params, executor, envs, SelectionMode::Sample)?;

        let views: Vec<(&SyntheticTask, &[SessionTrajectory])> = tasks
            .iter()
            .zip(&sampled)
            .map(|(t, s)| (t.as_ref(), s.as_slice()))
            .collect();
        let (proxies, fit) = proxy_rewards(&views, cfg.advantage_source, &cfg.advantage)?;

        let all: Vec<SessionTrajectory> = sampled.iter().flatten().cloned().collect();
        let (advice_rate, accuracy, total_score) = summarize(&all);
        let batch: Vec<(SessionTrajectory, f64)> =
            all.into_iter().zip(proxies.into_iter().flatten()).collect();
        let mean_proxy = batch.iter().map(|(_, r)| r).sum::<f64>() / batch.len().max(1) as f64;

        let ppo_cfg = PpoConfig {
            seed: derive_seed(cfg.ppo.seed, k as u64, u64::MAX),
            ..cfg.ppo
        };
        let checkpoint = params.checkpoint_hash();
        let (next, report) = ppo_update(&params, &batch, &ppo_cfg)?;
        iterations.push(IterationStats {
            iteration: k,
            checkpoint,
            sessions: batch.len(),
            advice_rate,
            accuracy,
            total_score,
            mean_proxy_reward: mean_proxy,
            surrogate_start: report.surrogate_trace.first().copied().unwrap_or(0.0),
            surrogate_end: report.surrogate_trace.last().copied().unwrap_or(0.0),
            clip_fraction: report.clip_fraction,
            bound_violations: report.bound_violations,
            value_mse: fit.map(|f| f.mse),
        });
        params = next;
    }
    Ok(OptimizeResult { params, iterations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{generate_task, TaskParams};
    use crate::executor::ExecutorConfig;
    use std::sync::Arc;

    fn small_task(seed: u64) -> Arc<SyntheticTask> {
        Arc::new(generate_task(seed, &TaskParams { num_questions: 120, ..TaskParams::default() }).unwrap())
    }

    #[test]
    fn zero_iterations_return_params_unchanged() {
        let task = small_task(1);
        let exec = Executor::new(task.vocabulary(), ExecutorConfig::default());
        let p0 = PolicyParams::from_flat((0..55).map(|i| 0.1 * (i as f64).cos()).collect()).unwrap();
        let cfg = OptimizeConfig { outer_iters: 0, ..OptimizeConfig::default() };
        let mut factory = |_: usize, _: usize| Ok(Environment::new(Arc::clone(&task), 0.3));
        let out = session_level_optimize(&p0, &exec, &mut factory, &cfg).unwrap();
        assert_eq!(out.params, p0);
        assert!(out.iterations.is_empty());
    }

    #[test]
    fn optimization_is_deterministic_and_tracks_lineage() {
        let task = small_task(2);
        let exec = Executor::new(task.vocabulary(), ExecutorConfig::default());
        let cfg = OptimizeConfig { outer_iters: 2, ..OptimizeConfig::default() };
        let run = || {
            let mut factory = |_: usize, _: usize| Ok(Environment::new(Arc::clone(&task), 0.3));
            session_level_optimize(&PolicyParams::zeros(), &exec, &mut factory, &cfg).unwrap()
        };
        let a = run();
        assert_eq!(a, run());
        assert_eq!(a.iterations[0].checkpoint, PolicyParams::zeros().checkpoint_hash());
        assert_ne!(a.iterations[1].checkpoint, a.iterations[0].checkpoint);
        assert_eq!(a.iterations[0].sessions, 240);
    }

    #[test]
    fn heuristic_credit_only_for_reflecting_sessions() {
        let task = small_task(3);
        let exec = Executor::new(task.vocabulary(), ExecutorConfig::default());
        let env = Environment::new(Arc::clone(&task), 0.3);
        let sessions = rollouts(&PolicyParams::zeros(), &exec, vec![(env, 7)], SelectionMode::Sample)
            .unwrap()
            .pop()
            .unwrap();
        let (r, _) = proxy_rewards(&[(task.as_ref(), &sessions)], AdvantageSource::Heuristic, &AdvantageConfig::default()).unwrap();
        for (s, p) in sessions.iter().zip(&r[0]) {
            let bonus = p - s.total_reward;
            assert!((0.0..=0.1 + 1e-12).contains(&bonus));
            if !s.reflected() {
                assert_eq!(bonus, 0.0);
            }
        }
        assert!(sessions.iter().zip(&r[0]).any(|(s, p)| *p > s.total_reward));
    }

    #[test]
    fn fitted_value_proxies_telescope() {
        let task = small_task(4);
        let exec = Executor::new(task.vocabulary(), ExecutorConfig::default());
        let env = Environment::new(Arc::clone(&task), 0.3);
        let sessions = rollouts(&PolicyParams::zeros(), &exec, vec![(env, 3)], SelectionMode::Sample)
            .unwrap()
            .pop()
            .unwrap();
        let (r, fit) = proxy_rewards(&[(task.as_ref(), &sessions)], AdvantageSource::FittedValue, &AdvantageConfig::default()).unwrap();
        let fit = fit.unwrap();
        // Σ r̃ = Σ r − V(S_1)
        let v1 = fit.estimator.predict(&value_features(&sessions, &task)[0]);
        let lhs: f64 = r[0].iter().sum();
        let rhs: f64 = sessions.iter().map(|s| s.total_reward).sum::<f64>() - v1;
        assert!((lhs - rhs).abs() < 1e-9);
    }
}

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::LearnError;
use crate::policy::{DecisionPoint, PolicyParams};
use crate::token::FunctionName;
use crate::trajectory::SessionTrajectory;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub clip_eps: f64,
    pub epochs: usize,
    pub lr: f64,
    /// Sessions per minibatch.
    pub batch_size: usize,
    /// Discount applied to rewards within a session.
    pub discount: f64,
    /// Seeds minibatch shuffling.
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip_eps: 0.2,
            epochs: 4,
            lr: 0.5,
            batch_size: 64,
            discount: 1.0,
            seed: 0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), LearnError> {
        let bad = |m: String| Err(LearnError::InvalidConfig(m));
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad(format!("clip epsilon {} not in (0, 1)", self.clip_eps));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.discount) {
            return bad(format!("discount {} not in [0, 1]", self.discount));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PpoDecision {
    pub point: DecisionPoint,
    pub action: FunctionName,
    /// Proxy return from this decision to the end of the session.
    pub reward_to_go: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PpoSession {
    pub decisions: Vec<PpoDecision>,
    pub proxy_reward: f64,
}

impl PpoSession {
    /// Builds the PPO view of a recorded session whose proxy reward is
    /// `proxy`. The state-advantage part `proxy − r` arrives at the end.
    pub fn from_trajectory(session: &SessionTrajectory, proxy: f64, discount: f64) -> Self {
        let bonus = proxy - session.total_reward;
        let n = session.steps.len();
        let decisions = session
            .decisions
            .iter()
            .map(|d| {
                let mut g = 0.0;
                let mut w = 1.0;
                for s in &session.steps[d.step..] {
                    g += w * s.reward;
                    w *= discount;
                }
                debug_assert_eq!(n - d.step, session.steps[d.step..].len());
                PpoDecision {
                    point: d.point.clone(),
                    action: d.action,
                    reward_to_go: g + w * bonus,
                }
            })
            .collect();
        Self {
            decisions,
            proxy_reward: proxy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PpoReport {
    /// Full-batch surrogate before the first step and after every step.
    pub surrogate_trace: Vec<f64>,
    pub decisions: usize,
    pub steps: usize,
    /// Fraction of decisions whose ratio ends outside `[1 − ε, 1 + ε]`.
    pub clip_fraction: f64,
    /// Decisions whose clipped contribution exceeded `(1 + ε)·|A|` in
    /// magnitude. This only happens for `A < 0` with a ratio above `1 + ε`,
    /// where the pessimistic min keeps the unclipped term.
    pub bound_violations: usize,
    /// Baseline subtracted from every return.
    pub baseline: f64,
}

struct Sample<'a> {
    session: usize,
    point: &'a DecisionPoint,
    action: FunctionName,
    old_logprob: f64,
    advantage: f64,
}

struct Surrogate {
    value: f64,
    clipped: usize,
    violations: usize,
}

/// `(1/D) Σ min(ρ A, clip(ρ, 1 − ε, 1 + ε) A)` over `samples`, optionally
/// accumulating its gradient.
fn evaluate(
    params: &PolicyParams,
    samples: &[&Sample<'_>],
    eps: f64,
    mut grad: Option<&mut PolicyParams>,
) -> Result<Surrogate, LearnError> {
    let mut out = Surrogate {
        value: 0.0,
        clipped: 0,
        violations: 0,
    };
    if samples.is_empty() {
        return Ok(out);
    }
    let inv = 1.0 / samples.len() as f64;
    for s in samples {
        let ratio = (params.logprob(s.point, s.action)? - s.old_logprob).exp();
        let a = s.advantage;
        let unclipped = ratio * a;
        let clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * a;
        let contrib = unclipped.min(clipped);
        debug_assert!(contrib <= (1.0 + eps) * a.abs() + 1e-12);
        if contrib.abs() > (1.0 + eps) * a.abs() + 1e-12 {
            out.violations += 1;
        }
        if !(1.0 - eps..=1.0 + eps).contains(&ratio) {
            out.clipped += 1;
        }
        out.value += inv * contrib;
        // The gradient flows only through the unclipped branch when it is the min.
        if let Some(g) = grad.as_deref_mut() {
            if unclipped <= clipped && a != 0.0 {
                params.accumulate_grad_logprob(s.point, s.action, inv * a * ratio, g)?;
            }
        }
    }
    Ok(out)
}

/// Full-batch clipped surrogate of `params` relative to `params_old`.
pub fn surrogate(
    params: &PolicyParams,
    params_old: &PolicyParams,
    sessions: &[PpoSession],
    eps: f64,
) -> Result<f64, LearnError> {
    let samples = build_samples(params_old, sessions)?.0;
    let refs: Vec<&Sample<'_>> = samples.iter().collect();
    Ok(evaluate(params, &refs, eps, None)?.value)
}

fn build_samples<'a>(
    params_old: &PolicyParams,
    sessions: &'a [PpoSession],
) -> Result<(Vec<Sample<'a>>, f64), LearnError> {
    let baseline = if sessions.is_empty() {
        0.0
    } else {
        sessions.iter().map(|s| s.proxy_reward).sum::<f64>() / sessions.len() as f64
    };
    let mut samples = Vec::new();
    for (i, s) in sessions.iter().enumerate() {
        for d in &s.decisions {
            samples.push(Sample {
                session: i,
                point: &d.point,
                action: d.action,
                old_logprob: params_old.logprob(&d.point, d.action)?,
                advantage: d.reward_to_go - baseline,
            });
        }
    }
    Ok((samples, baseline))
}

/// PPO on pre-built sessions. Sessions are shuffled each epoch and split
/// into minibatches of `cfg.batch_size`; one ascent step per minibatch.
pub fn ppo_update_samples(
    params_old: &PolicyParams,
    sessions: &[PpoSession],
    cfg: &PpoConfig,
) -> Result<(PolicyParams, PpoReport), LearnError> {
    cfg.validate()?;
    if sessions.is_empty() {
        return Err(LearnError::EmptyDataset);
    }
    let (samples, baseline) = build_samples(params_old, sessions)?;
    let mut by_session: Vec<Vec<&Sample<'_>>> = vec![Vec::new(); sessions.len()];
    for s in &samples {
        by_session[s.session].push(s);
    }
    let all: Vec<&Sample<'_>> = samples.iter().collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = params_old.clone();
    let mut report = PpoReport {
        decisions: samples.len(),
        baseline,
        ..PpoReport::default()
    };
    report
        .surrogate_trace
        .push(evaluate(&params, &all, cfg.clip_eps, None)?.value);
    let mut order: Vec<usize> = (0..sessions.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample<'_>> = chunk.iter().flat_map(|&i| by_session[i].iter().copied()).collect();
            let mut grad = PolicyParams::zeros();
            let s = evaluate(&params, &batch, cfg.clip_eps, Some(&mut grad))?;
            report.bound_violations += s.violations;
            params.add_scaled(&grad, cfg.lr);
            if !params.is_finite() {
                return Err(LearnError::NonFinite);
            }
            report.steps += 1;
            report
                .surrogate_trace
                .push(evaluate(&params, &all, cfg.clip_eps, None)?.value);
        }
    }
    let last = evaluate(&params, &all, cfg.clip_eps, None)?;
    report.clip_fraction = last.clipped as f64 / samples.len().max(1) as f64;
    Ok((params, report))
}

/// PPO over recorded sessions paired with their proxy rewards. Every
/// session must carry `params_old`'s checkpoint tag.
pub fn ppo_update(
    params_old: &PolicyParams,
    sessions: &[(SessionTrajectory, f64)],
    cfg: &PpoConfig,
) -> Result<(PolicyParams, PpoReport), LearnError> {
    let expected = params_old.checkpoint_hash();
    if let Some((s, _)) = sessions
        .iter()
        .find(|(s, _)| s.checkpoint.as_deref() != Some(expected.as_str()))
    {
        return Err(LearnError::StaleBatch {
            expected,
            found: s.checkpoint.clone(),
        });
    }
    let ppo: Vec<PpoSession> = sessions
        .iter()
        .map(|(s, r)| PpoSession::from_trajectory(s, *r, cfg.discount))
        .collect();
    ppo_update_samples(params_old, &ppo, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::QuestionKind;
    use crate::policy::{DecisionKind, FeatureVector, Observation};
    use rand::Rng;

    fn point(rng: &mut ChaCha8Rng) -> DecisionPoint {
        let obs = Observation {
            qa_similarity: rng.gen(),
            knowledge_similarity: 0.0,
            qa_hit: rng.gen(),
            knowledge_hit: false,
            kind: QuestionKind::Fact,
            difficulty: rng.gen(),
            advice_cost: 0.3,
            similar_in_memory: 0,
        };
        DecisionPoint::new(DecisionKind::AfterRetrieve, FeatureVector::from(&obs), |a| {
            a != FunctionName::SearchProduct
        })
        .unwrap()
    }

    fn sessions(rng: &mut ChaCha8Rng, n: usize) -> Vec<PpoSession> {
        (0..n)
            .map(|_| {
                let p = point(rng);
                let action = p.allowed[rng.gen_range(0..2)];
                let r = if action == FunctionName::SeekAdvice { 0.7 } else { f64::from(u8::from(rng.gen_bool(0.5))) };
                PpoSession {
                    decisions: vec![PpoDecision { point: p, action, reward_to_go: r }],
                    proxy_reward: r,
                }
            })
            .collect()
    }

    #[test]
    fn zero_advantage_leaves_params_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ss = sessions(&mut rng, 50);
        for s in &mut ss {
            s.proxy_reward = 0.5;
            s.decisions[0].reward_to_go = 0.5;
        }
        let p0 = PolicyParams::from_flat((0..55).map(|i| 0.01 * i as f64).collect()).unwrap();
        let (p1, report) = ppo_update_samples(&p0, &ss, &PpoConfig::default()).unwrap();
        assert_eq!(p1, p0);
        assert!(report.surrogate_trace.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn surrogate_rises_on_a_fixed_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ss = sessions(&mut rng, 200);
        let cfg = PpoConfig { lr: 1e-3, batch_size: 200, epochs: 10, ..PpoConfig::default() };
        let (_, report) = ppo_update_samples(&PolicyParams::zeros(), &ss, &cfg).unwrap();
        assert!(report.surrogate_trace.windows(2).all(|w| w[1] >= w[0]));
        assert!(report.surrogate_trace.last().unwrap() > &report.surrogate_trace[0]);
    }

    #[test]
    fn deterministic_given_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ss = sessions(&mut rng, 150);
        let cfg = PpoConfig { batch_size: 16, ..PpoConfig::default() };
        let a = ppo_update_samples(&PolicyParams::zeros(), &ss, &cfg).unwrap();
        let b = ppo_update_samples(&PolicyParams::zeros(), &ss, &cfg).unwrap();
        assert_eq!(a, b);
        let c = ppo_update_samples(&PolicyParams::zeros(), &ss, &PpoConfig { seed: 9, ..cfg }).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ss = sessions(&mut rng, 40);
        let old = PolicyParams::zeros();
        let (samples, _) = build_samples(&old, &ss).unwrap();
        let refs: Vec<&Sample<'_>> = samples.iter().collect();
        let theta: Vec<f64> = (0..55).map(|_| rng.gen_range(-0.05..0.05)).collect();
        let p = PolicyParams::from_flat(theta.clone()).unwrap();
        let mut g = PolicyParams::zeros();
        evaluate(&p, &refs, 0.2, Some(&mut g)).unwrap();
        let h = 1e-7;
        for k in 0..55 {
            let mut up = theta.clone();
            up[k] += h;
            let mut dn = theta.clone();
            dn[k] -= h;
            let f = |t: Vec<f64>| evaluate(&PolicyParams::from_flat(t).unwrap(), &refs, 0.2, None).unwrap().value;
            let fd = (f(up) - f(dn)) / (2.0 * h);
            assert!((g.as_flat()[k] - fd).abs() < 1e-6, "k={k}");
        }
    }

    #[test]
    fn invalid_config() {
        let ss = sessions(&mut ChaCha8Rng::seed_from_u64(4), 3);
        for cfg in [
            PpoConfig { clip_eps: 0.0, ..PpoConfig::default() },
            PpoConfig { clip_eps: 1.0, ..PpoConfig::default() },
            PpoConfig { lr: 0.0, ..PpoConfig::default() },
            PpoConfig { batch_size: 0, ..PpoConfig::default() },
        ] {
            assert!(matches!(ppo_update_samples(&PolicyParams::zeros(), &ss, &cfg), Err(LearnError::InvalidConfig(_))));
        }
        assert!(matches!(ppo_update_samples(&PolicyParams::zeros(), &[], &PpoConfig::default()), Err(LearnError::EmptyDataset)));
    }

    #[test]
    fn positive_advantage_contributions_stay_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ss = sessions(&mut rng, 300);
        let cfg = PpoConfig { lr: 5.0, batch_size: 32, ..PpoConfig::default() };
        let (p, _) = ppo_update_samples(&PolicyParams::zeros(), &ss, &cfg).unwrap();
        let (samples, _) = build_samples(&PolicyParams::zeros(), &ss).unwrap();
        for s in &samples {
            let ratio = (p.logprob(s.point, s.action).unwrap() - s.old_logprob).exp();
            let c = (ratio * s.advantage).min(ratio.clamp(0.8, 1.2) * s.advantage);
            assert!(c <= 1.2 * s.advantage.abs() + 1e-12);
            if s.advantage > 0.0 {
                assert!(c.abs() <= 1.2 * s.advantage + 1e-12);
            }
        }
    }
}

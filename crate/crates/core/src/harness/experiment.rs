use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{compute_metrics, EvalReport, ExperimentConfig, HarnessError, TrendReport};
use crate::env::{generate_task, Environment, SyntheticTask, TaskParams};
use crate::executor::{Executor, ExpertDemonstrator};
use crate::learn::session_opt::derive_seed;
use crate::learn::{
    evaluate, il_examples, session_level_optimize, train_il, IterationStats, LearnError,
    OptimizeResult,
};
use crate::policy::PolicyParams;
use crate::trajectory::{DecisionRecord, SessionTrajectory, StepRecord};

const DEMO_STREAM: u64 = 1;
const TRAIN_STREAM: u64 = 2;
const EVAL_STREAM: u64 = 3;

pub fn demo_task_seed(seed: u64) -> u64 {
    derive_seed(seed, DEMO_STREAM, 0)
}

pub fn train_task_seed(seed: u64, iteration: usize, rollout: usize) -> u64 {
    derive_seed(seed, TRAIN_STREAM, (iteration as u64) << 32 | rollout as u64)
}

pub fn eval_task_seed(seed: u64) -> u64 {
    derive_seed(seed, EVAL_STREAM, 0)
}

/// Expert demonstrations over a whole environment.
pub fn collect_demonstrations(
    executor: &Executor,
    mut env: Environment,
    seed: u64,
) -> Result<Vec<SessionTrajectory>, HarnessError> {
    let mut state = executor.new_state();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (_, sessions) = executor
        .run_trajectory(&mut ExpertDemonstrator, &mut env, &mut state, &mut rng, None)
        .map_err(LearnError::from)?;
    Ok(sessions)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedPolicy {
    pub il_params: PolicyParams,
    pub params: PolicyParams,
    /// IL cross-entropy before the first and after the last epoch.
    pub il_loss: (f64, f64),
    pub iterations: Vec<IterationStats>,
}

fn executor_for(cfg: &ExperimentConfig, task: &SyntheticTask) -> Executor {
    Executor::new(task.vocabulary(), cfg.executor_config())
}

fn task(seed: u64, params: &TaskParams) -> Result<Arc<SyntheticTask>, HarnessError> {
    Ok(Arc::new(generate_task(seed, params)?))
}

/// IL from θ = 0 on expert demonstrations over the demo task. Returns the
/// parameters and the loss before each epoch plus the final loss.
pub fn imitate(cfg: &ExperimentConfig) -> Result<(PolicyParams, Vec<f64>), HarnessError> {
    cfg.validate()?;
    let demo = task(demo_task_seed(cfg.seed), &cfg.task)?;
    let executor = executor_for(cfg, &demo);
    let demos = collect_demonstrations(
        &executor,
        Environment::new(Arc::clone(&demo), cfg.advice_cost),
        cfg.seed,
    )?;
    Ok(train_il(&PolicyParams::zeros(), &il_examples(&demos), &cfg.il)?)
}

/// `cfg.outer_iters` rounds of session-level PPO from `params0` on fresh
/// training tasks.
pub fn optimize(cfg: &ExperimentConfig, params0: &PolicyParams) -> Result<OptimizeResult, HarnessError> {
    cfg.validate()?;
    // Every generated task shares one vocabulary layout.
    let executor = executor_for(cfg, &*task(demo_task_seed(cfg.seed), &cfg.task)?);
    let task_params = cfg.task.clone();
    let (seed, cost) = (cfg.seed, cfg.advice_cost);
    let mut factory = |k: usize, r: usize| -> Result<Environment, LearnError> {
        let t = generate_task(train_task_seed(seed, k, r), &task_params)
            .map_err(|e| LearnError::InvalidConfig(e.to_string()))?;
        Ok(Environment::new(Arc::new(t), cost))
    };
    Ok(session_level_optimize(params0, &executor, &mut factory, &cfg.optimize_config())?)
}

/// IL followed by session-level PPO.
pub fn train_policy(cfg: &ExperimentConfig) -> Result<TrainedPolicy, HarnessError> {
    let (il_params, losses) = imitate(cfg)?;
    let out = optimize(cfg, &il_params)?;
    Ok(TrainedPolicy {
        il_params,
        params: out.params,
        il_loss: (losses[0], *losses.last().expect("at least one loss")),
        iterations: out.iterations,
    })
}

/// Greedy evaluation on the held-out task for `cfg.seed`.
pub fn evaluate_policy(
    cfg: &ExperimentConfig,
    params: &PolicyParams,
) -> Result<(EvalReport, Vec<SessionTrajectory>), HarnessError> {
    let eval_params = TaskParams {
        num_questions: cfg.eval_sessions,
        ..cfg.task.clone()
    };
    let t = task(eval_task_seed(cfg.seed), &eval_params)?;
    let executor = executor_for(cfg, &t);
    let sessions = evaluate(params, &executor, Environment::new(t, cfg.advice_cost))?;
    let outcomes: Vec<_> = sessions.iter().map(SessionTrajectory::outcome).collect();
    Ok((compute_metrics(&outcomes, cfg.advice_cost)?, sessions))
}

/// Reproducibility record for one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    pub demo_task_seed: u64,
    pub train_task_seeds: Vec<Vec<u64>>,
    pub eval_task_seed: u64,
    /// IL checkpoint followed by one checkpoint per outer iteration.
    pub lineage: Vec<String>,
    pub iterations: Vec<IterationStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub manifest: RunManifest,
    pub trained: TrainedPolicy,
    pub il_report: EvalReport,
    pub report: EvalReport,
    pub sessions: Vec<SessionTrajectory>,
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunResult, HarnessError> {
    let trained = train_policy(cfg)?;
    let (il_report, _) = evaluate_policy(cfg, &trained.il_params)?;
    let (report, sessions) = evaluate_policy(cfg, &trained.params)?;
    let mut lineage: Vec<String> = trained.iterations.iter().map(|s| s.checkpoint.clone()).collect();
    if lineage.is_empty() {
        lineage.push(trained.il_params.checkpoint_hash());
    }
    if cfg.outer_iters > 0 {
        lineage.push(trained.params.checkpoint_hash());
    }
    let manifest = RunManifest {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        demo_task_seed: demo_task_seed(cfg.seed),
        train_task_seeds: (0..cfg.outer_iters)
            .map(|k| (0..cfg.rollouts_per_iter).map(|r| train_task_seed(cfg.seed, k, r)).collect())
            .collect(),
        eval_task_seed: eval_task_seed(cfg.seed),
        lineage,
        iterations: trained.iterations.clone(),
    };
    Ok(RunResult {
        manifest,
        trained,
        il_report,
        report,
        sessions,
    })
}

/// A run with capabilities removed. Task seeds do not depend on the flags,
/// so the run sees the same questions as the full agent.
pub fn run_ablation(cfg: &ExperimentConfig) -> Result<RunResult, HarnessError> {
    run_experiment(cfg)
}

/// Applies `f` to every item on a bounded pool of threads, keeping order.
pub(crate) fn parallel_map<T: Sync, R: Send>(
    items: &[T],
    f: impl Fn(&T) -> Result<R, HarnessError> + Sync,
) -> Result<Vec<R>, HarnessError> {
    let workers = thread::available_parallelism().map_or(4, |n| n.get()).min(items.len().max(1));
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<R, HarnessError>>>> =
        Mutex::new((0..items.len()).map(|_| None).collect());
    thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                results.lock().expect("no poisoned workers")[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("no poisoned workers")
        .into_iter()
        .map(|r| r.expect("every item processed"))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub advice_cost: f64,
    pub seed: u64,
    pub advice_rate: f64,
    pub accuracy: f64,
    pub total_score: f64,
}

/// Trains and evaluates a fresh policy for every (cost, seed) pair. Seeds
/// are shared across costs.
pub fn sweep_cost(
    cfg: &ExperimentConfig,
    costs: &[f64],
    seeds: &[u64],
) -> Result<Vec<SweepRow>, HarnessError> {
    if costs.iter().any(|c| !(*c > 0.0)) || costs.windows(2).any(|w| w[0] > w[1]) {
        return Err(HarnessError::InvalidConfig("costs must be positive and sorted".into()));
    }
    let jobs: Vec<(f64, u64)> = costs.iter().flat_map(|&c| seeds.iter().map(move |&s| (c, s))).collect();
    parallel_map(&jobs, |&(c, seed)| {
        let run = run_experiment(&ExperimentConfig {
            advice_cost: c,
            seed,
            ..cfg.clone()
        })?;
        Ok(SweepRow {
            advice_cost: c,
            seed,
            advice_rate: run.report.advice_rate,
            accuracy: run.report.accuracy,
            total_score: run.report.total_score,
        })
    })
}

/// Runs `configs` on the shared pool.
pub fn run_many(configs: &[ExperimentConfig]) -> Result<Vec<RunResult>, HarnessError> {
    parallel_map(configs, run_experiment)
}

pub fn write_iterations_csv<W: Write>(mut w: W, iterations: &[IterationStats]) -> std::io::Result<()> {
    writeln!(w, "iteration,checkpoint,sessions,advice_rate,accuracy,total_score,surrogate_start,surrogate_end,clip_fraction")?;
    for s in iterations {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            s.iteration, s.checkpoint, s.sessions, s.advice_rate, s.accuracy, s.total_score,
            s.surrogate_start, s.surrogate_end, s.clip_fraction
        )?;
    }
    Ok(())
}

/// One CSV row per labelled report.
pub fn write_metrics_csv<W: Write>(mut w: W, rows: &[(String, EvalReport)]) -> std::io::Result<()> {
    writeln!(w, "label,sessions,advice_cost,advice_rate,accuracy,total_score")?;
    for (label, r) in rows {
        writeln!(
            w,
            "{label},{},{},{},{},{}",
            r.sessions, r.advice_cost, r.advice_rate, r.accuracy, r.total_score
        )?;
    }
    Ok(())
}

pub fn write_sweep_csv<W: Write>(mut w: W, rows: &[SweepRow]) -> std::io::Result<()> {
    writeln!(w, "advice_cost,seed,advice_rate,accuracy,total_score")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{}", r.advice_cost, r.seed, r.advice_rate, r.accuracy, r.total_score)?;
    }
    Ok(())
}

/// Plot-ready windowed series: `window  start  advice_rate`.
pub fn write_series_tsv<W: Write>(mut w: W, trend: &TrendReport) -> std::io::Result<()> {
    writeln!(w, "window\tstart\tadvice_rate")?;
    for (i, a) in trend.advice_rates.iter().enumerate() {
        writeln!(w, "{i}\t{}\t{a}", i * trend.window)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct SessionLine<'a> {
    question: Option<u32>,
    total_reward: f64,
    sought_advice: bool,
    correct: bool,
    stream_offset: usize,
    checkpoint: Option<&'a str>,
    steps: &'a [StepRecord],
    decisions: &'a [DecisionRecord],
}

/// One JSON object per session.
pub fn write_sessions_jsonl<W: Write>(mut w: W, sessions: &[SessionTrajectory]) -> Result<(), HarnessError> {
    for s in sessions {
        let line = SessionLine {
            question: s.question.map(|q| q.0),
            total_reward: s.total_reward,
            sought_advice: s.sought_advice(),
            correct: s.correct(),
            stream_offset: s.stream_offset,
            checkpoint: s.checkpoint.as_deref(),
            steps: &s.steps,
            decisions: &s.decisions,
        };
        serde_json::to_writer(&mut w, &line)?;
        writeln!(w)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::AblationFlags;

    fn small(seed: u64) -> ExperimentConfig {
        ExperimentConfig {
            seed,
            task: TaskParams { num_questions: 150, ..TaskParams::default() },
            eval_sessions: 200,
            outer_iters: 1,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn identical_configs_give_identical_reports() {
        let a = run_experiment(&small(5)).unwrap();
        let b = run_experiment(&small(5)).unwrap();
        assert_eq!(serde_json::to_string(&a.report).unwrap(), serde_json::to_string(&b.report).unwrap());
        assert_eq!(a.manifest, b.manifest);
        assert_eq!(a.manifest.lineage.len(), 2);
    }

    #[test]
    fn ablation_flags_do_not_change_questions() {
        let full = run_experiment(&small(6)).unwrap();
        let cfg = ExperimentConfig { ablation: AblationFlags { no_tool: true, no_memory: true, ..AblationFlags::default() }, ..small(6) };
        let abl = run_ablation(&cfg).unwrap();
        let qa: Vec<_> = full.sessions.iter().map(|s| s.question).collect();
        let qb: Vec<_> = abl.sessions.iter().map(|s| s.question).collect();
        assert_eq!(qa, qb);
    }

    #[test]
    fn no_advice_means_zero_advice_rate() {
        let cfg = ExperimentConfig { ablation: AblationFlags { no_advice: true, ..AblationFlags::default() }, ..small(7) };
        assert_eq!(run_ablation(&cfg).unwrap().report.advice_rate, 0.0);
    }

    #[test]
    fn sweep_rejects_unsorted_costs() {
        assert!(sweep_cost(&small(0), &[0.3, 0.1], &[0]).is_err());
        assert!(sweep_cost(&small(0), &[0.0, 0.1], &[0]).is_err());
    }

    #[test]
    fn artifact_writers() {
        let run = run_experiment(&small(8)).unwrap();
        let mut buf = Vec::new();
        write_sessions_jsonl(&mut buf, &run.sessions[..3]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        for l in text.lines() {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            assert!(v["steps"].as_array().unwrap().len() >= 5);
        }
        let mut csv = Vec::new();
        write_iterations_csv(&mut csv, &run.trained.iterations).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 2);
    }
}

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use agile_core::harness::{
    self, compute_metrics, evaluate_policy, run_experiment, run_many, sweep_cost, trend_report,
    write_iterations_csv, write_metrics_csv, write_series_tsv, write_sessions_jsonl, write_sweep_csv,
    AblationFlags, EvalReport, ExperimentConfig, HarnessError, TREND_WINDOW,
};
use agile_core::memory::MemoryError;
use agile_core::trajectory::write_trajectory;
use agile_core::{Environment, Executor, ExpertDemonstrator, PolicyDecider, PolicyParams, SelectionMode, SyntheticTask};
use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Train and evaluate advice-seeking agents on synthetic product QA.
#[derive(Debug, Parser)]
#[command(name = "agile", version)]
struct Cli {
    /// TOML experiment config; defaults apply to omitted fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a task and write it as JSON.
    GenEnv {
        #[arg(long)]
        out: PathBuf,
        /// Task seed; defaults to the held-out evaluation task of the config seed.
        #[arg(long)]
        task_seed: Option<u64>,
        #[arg(long)]
        questions: Option<usize>,
    },
    /// Run a policy (or the expert) over a task and record the trajectory.
    Rollout {
        #[arg(long)]
        task: PathBuf,
        /// Policy checkpoint; the expert demonstrator is used when omitted.
        #[arg(long)]
        policy: Option<PathBuf>,
        /// Take the most likely action instead of sampling.
        #[arg(long)]
        greedy: bool,
        #[arg(long)]
        sessions: Option<usize>,
        /// Line-delimited trajectory file.
        #[arg(long)]
        out: PathBuf,
        /// Per-session JSON lines.
        #[arg(long)]
        sessions_out: Option<PathBuf>,
    },
    /// Imitation learning on expert demonstrations.
    TrainIl {
        #[arg(long)]
        out: PathBuf,
    },
    /// Session-level PPO starting from a checkpoint.
    TrainPpo {
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        iterations_csv: Option<PathBuf>,
    },
    /// Greedy evaluation on the held-out task.
    Eval {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        metrics_csv: Option<PathBuf>,
        #[arg(long)]
        sessions_out: Option<PathBuf>,
        #[arg(long)]
        series_tsv: Option<PathBuf>,
    },
    /// Train and evaluate a fresh policy per advice cost and seed.
    SweepCost {
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.3,0.4,0.5")]
        costs: Vec<f64>,
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full agent against each single-capability ablation.
    Ablate {
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Windowed advice rate over a long evaluation run.
    Trend {
        /// Evaluate this checkpoint instead of training one.
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::from_file(p).with_context(|| format!("reading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn load_policy(path: &Path) -> Result<PolicyParams> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(PolicyParams::load(BufReader::new(f))?)
}

fn save_policy(path: &Path, params: &PolicyParams) -> Result<()> {
    let mut w = create(path)?;
    params.save(&mut w)?;
    w.flush()?;
    Ok(())
}

fn print_report(label: &str, r: &EvalReport) {
    println!(
        "{label}: sessions {} advice_rate {:.4} accuracy {:.4} total_score {:.4}",
        r.sessions, r.advice_rate, r.accuracy, r.total_score
    );
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::GenEnv { out, task_seed, questions } => {
            let params = agile_core::TaskParams {
                num_questions: questions.unwrap_or(cfg.task.num_questions),
                ..cfg.task.clone()
            };
            let seed = task_seed.unwrap_or_else(|| harness::eval_task_seed(cfg.seed));
            let task = agile_core::env::generate_task(seed, &params)?;
            std::fs::write(&out, task.to_json())?;
            println!("task seed {seed}: {} questions -> {}", task.questions.len(), out.display());
        }
        Command::Rollout { task, policy, greedy, sessions, out, sessions_out } => {
            let text = std::fs::read_to_string(&task).with_context(|| format!("reading {}", task.display()))?;
            let task = SyntheticTask::from_json(&text)?;
            let vocab = task.vocabulary();
            let executor = Executor::new(vocab.clone(), cfg.executor_config());
            let mut env = Environment::new(Arc::new(task), cfg.advice_cost);
            let mut state = executor.new_state();
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let params = policy.as_deref().map(load_policy).transpose()?;
            let mode = if greedy { SelectionMode::Greedy } else { SelectionMode::Sample };
            let (traj, recorded) = match &params {
                Some(p) => executor.run_trajectory(&mut PolicyDecider::new(p, mode), &mut env, &mut state, &mut rng, sessions),
                None => executor.run_trajectory(&mut ExpertDemonstrator, &mut env, &mut state, &mut rng, sessions),
            }?;
            if let Some(s) = recorded.iter().find(|s| !s.reward_in_support(cfg.advice_cost)) {
                return Err(HarnessError::InvariantViolation(format!(
                    "session reward {} outside {{0, 1, 1 - c}}",
                    s.total_reward
                ))
                .into());
            }
            let mut w = create(&out)?;
            write_trajectory(&mut w, &traj, &vocab)?;
            w.flush()?;
            if let Some(p) = sessions_out {
                let mut w = create(&p)?;
                write_sessions_jsonl(&mut w, &recorded)?;
                w.flush()?;
            }
            let outcomes: Vec<_> = recorded.iter().map(|s| s.outcome()).collect();
            print_report("rollout", &compute_metrics(&outcomes, cfg.advice_cost)?);
        }
        Command::TrainIl { out } => {
            let (params, losses) = harness::imitate(&cfg)?;
            save_policy(&out, &params)?;
            println!(
                "il loss {:.4} -> {:.4} over {} epochs; checkpoint {}",
                losses[0],
                losses[losses.len() - 1],
                cfg.il.epochs,
                params.checkpoint_hash()
            );
        }
        Command::TrainPpo { init, out, iterations_csv } => {
            let params0 = load_policy(&init)?;
            let result = harness::optimize(&cfg, &params0)?;
            for it in &result.iterations {
                println!(
                    "iteration {}: advice_rate {:.4} accuracy {:.4} total_score {:.4} surrogate {:.4} -> {:.4}",
                    it.iteration, it.advice_rate, it.accuracy, it.total_score, it.surrogate_start, it.surrogate_end
                );
            }
            save_policy(&out, &result.params)?;
            if let Some(p) = iterations_csv {
                let mut w = create(&p)?;
                write_iterations_csv(&mut w, &result.iterations)?;
                w.flush()?;
            }
        }
        Command::Eval { policy, metrics_csv, sessions_out, series_tsv } => {
            let params = load_policy(&policy)?;
            let (report, sessions) = evaluate_policy(&cfg, &params)?;
            print_report("eval", &report);
            if let Some(p) = metrics_csv {
                let mut w = create(&p)?;
                write_metrics_csv(&mut w, &[(cfg.ablation.label(), report)])?;
                w.flush()?;
            }
            if let Some(p) = sessions_out {
                let mut w = create(&p)?;
                write_sessions_jsonl(&mut w, &sessions)?;
                w.flush()?;
            }
            if let Some(p) = series_tsv {
                let outcomes: Vec<_> = sessions.iter().map(|s| s.outcome()).collect();
                let mut w = create(&p)?;
                write_series_tsv(&mut w, &trend_report(&outcomes, TREND_WINDOW)?)?;
                w.flush()?;
            }
        }
        Command::SweepCost { costs, seeds, out } => {
            let seeds: Vec<u64> = (0..seeds).map(|s| cfg.seed + s).collect();
            let rows = sweep_cost(&cfg, &costs, &seeds)?;
            let mut w = create(&out)?;
            write_sweep_csv(&mut w, &rows)?;
            w.flush()?;
            for c in &costs {
                let at = || rows.iter().filter(|r| r.advice_cost == *c);
                println!(
                    "c {c}: advice_rate {:.4} accuracy {:.4} total_score {:.4}",
                    mean(at().map(|r| r.advice_rate)),
                    mean(at().map(|r| r.accuracy)),
                    mean(at().map(|r| r.total_score))
                );
            }
        }
        Command::Ablate { seeds, out } => {
            let variants = [
                AblationFlags::default(),
                AblationFlags { no_memory: true, ..AblationFlags::default() },
                AblationFlags { no_reflection: true, ..AblationFlags::default() },
                AblationFlags { no_advice: true, ..AblationFlags::default() },
                AblationFlags { no_tool: true, ..AblationFlags::default() },
            ];
            let mut rows = Vec::new();
            for flags in variants {
                let cfgs: Vec<ExperimentConfig> = (0..seeds)
                    .map(|s| ExperimentConfig { ablation: flags, ..cfg.with_seed(cfg.seed + s) })
                    .collect();
                let runs = run_many(&cfgs)?;
                println!(
                    "{}: advice_rate {:.4} accuracy {:.4} total_score {:.4}",
                    flags.label(),
                    mean(runs.iter().map(|r| r.report.advice_rate)),
                    mean(runs.iter().map(|r| r.report.accuracy)),
                    mean(runs.iter().map(|r| r.report.total_score))
                );
                rows.extend(runs.into_iter().map(|r| (format!("{}/{}", flags.label(), r.manifest.seed), r.report)));
            }
            let mut w = create(&out)?;
            write_metrics_csv(&mut w, &rows)?;
            w.flush()?;
        }
        Command::Trend { policy, out } => {
            let sessions = match policy {
                Some(p) => evaluate_policy(&cfg, &load_policy(&p)?)?.1,
                None => run_experiment(&cfg)?.sessions,
            };
            let outcomes: Vec<_> = sessions.iter().map(|s| s.outcome()).collect();
            let trend = trend_report(&outcomes, TREND_WINDOW)?;
            let mut w = create(&out)?;
            write_series_tsv(&mut w, &trend)?;
            w.flush()?;
            println!("windows {} spearman {:.4}", trend.advice_rates.len(), trend.spearman);
        }
    }
    Ok(())
}

fn is_invariant_violation(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        matches!(e.downcast_ref::<HarnessError>(), Some(HarnessError::InvariantViolation(_)))
            || matches!(e.downcast_ref::<MemoryError>(), Some(MemoryError::InvariantViolation(_)))
    })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_invariant_violation(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn invariant_violations_are_detected_through_context() {
        let e = anyhow::Error::from(HarnessError::InvariantViolation("x".into())).context("eval");
        assert!(is_invariant_violation(&e));
        assert!(!is_invariant_violation(&anyhow::anyhow!("other")));
    }

    #[test]
    fn cost_list_rejects_unsorted_input() {
        let cfg = ExperimentConfig::default();
        assert!(sweep_cost(&cfg, &[0.3, 0.1], &[0]).is_err());
    }
}

use std::hint::black_box;
use std::sync::Arc;

use agile_core::env::generate_task;
use agile_core::trajectory::derive_training_sequence;
use agile_core::{
    Environment, Executor, ExecutorConfig, ExpertDemonstrator, PolicyDecider, PolicyParams, SelectionMode,
    SyntheticTask, TaskParams,
};
use criterion::{criterion_group, criterion_main, BatchSize, Criterion, Throughput};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SESSIONS: usize = 200;

fn task() -> Arc<SyntheticTask> {
    Arc::new(generate_task(1, &TaskParams { num_questions: SESSIONS, ..TaskParams::default() }).unwrap())
}

fn rollouts(c: &mut Criterion) {
    let task = task();
    let exec = Executor::new(task.vocabulary(), ExecutorConfig::default());
    let params = PolicyParams::zeros();
    let mut g = c.benchmark_group("rollout");
    g.throughput(Throughput::Elements(SESSIONS as u64));
    g.bench_function("expert", |b| {
        b.iter_batched(
            || (Environment::new(Arc::clone(&task), 0.3), exec.new_state(), ChaCha8Rng::seed_from_u64(0)),
            |(mut env, mut state, mut rng)| {
                exec.run_trajectory(&mut ExpertDemonstrator, &mut env, &mut state, &mut rng, None)
                    .unwrap()
            },
            BatchSize::SmallInput,
        )
    });
    g.bench_function("sampled_policy", |b| {
        b.iter_batched(
            || (Environment::new(Arc::clone(&task), 0.3), exec.new_state(), ChaCha8Rng::seed_from_u64(0)),
            |(mut env, mut state, mut rng)| {
                let mut decider = PolicyDecider::new(&params, SelectionMode::Sample);
                exec.run_trajectory(&mut decider, &mut env, &mut state, &mut rng, None).unwrap()
            },
            BatchSize::SmallInput,
        )
    });
    g.finish();
}

fn sequences_and_memory(c: &mut Criterion) {
    let task = task();
    let exec = Executor::new(task.vocabulary(), ExecutorConfig::default());
    let mut env = Environment::new(Arc::clone(&task), 0.3);
    let mut state = exec.new_state();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (traj, _) = exec
        .run_trajectory(&mut ExpertDemonstrator, &mut env, &mut state, &mut rng, None)
        .unwrap();
    c.bench_function("derive_training_sequence", |b| {
        b.iter(|| derive_training_sequence(black_box(&traj.steps)).unwrap())
    });
    let q = &task.questions[SESSIONS / 2];
    c.bench_function("memory_retrieve", |b| {
        b.iter(|| state.memory.retrieve(black_box(&q.text), q.product_id, 0.1).unwrap().qa.is_some())
    });
}

criterion_group!(benches, rollouts, sequences_and_memory);
criterion_main!(benches);

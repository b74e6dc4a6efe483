//! Rayon fan-out against a single worker on the two hot loops: batched
//! world-model sampling and ground-truth policy evaluation.
//!
//! With the default `parallel` feature each workload runs on rayon's global
//! pool and on a one-thread pool. Built with `--no-default-features` the same
//! workloads run through the sequential fallback, under the id `sequential`.

use criterion::{criterion_group, criterion_main, Criterion};

use loopworld::config::RunConfig;
use loopworld::env::{render, ActionPose, Env, TaskSpec};
use loopworld::pipeline::eval_policy_gt;
use loopworld::policy::{Policy, PolicyConfig};
use loopworld::worldmodel::{initial_history, WorldModel};

const ROWS: usize = 32;
const EPISODES: usize = 16;

fn variants(c: &mut Criterion, group: &str, work: impl Fn() + Sync) {
    let mut g = c.benchmark_group(group);
    g.sample_size(10);
    #[cfg(feature = "parallel")]
    {
        let threads = rayon::current_num_threads();
        g.bench_function(format!("rayon_{threads}_threads"), |b| b.iter(&work));
        let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        g.bench_function("rayon_1_thread", |b| b.iter(|| single.install(&work)));
    }
    #[cfg(not(feature = "parallel"))]
    g.bench_function("sequential", |b| b.iter(&work));
    g.finish();
}

fn sample_chunks(c: &mut Criterion) {
    let mut cfg = RunConfig::default().wm;
    cfg.denoiser_hidden = vec![128, 128];
    let wm = WorldModel::new(cfg.clone(), 1).unwrap();
    let env = Env::new(TaskSpec::reference());
    let histories: Vec<_> = (0..ROWS as u64)
        .map(|i| initial_history(&render(&env.reset(i), env.task.goal_radius), cfg.history_len))
        .collect();
    let actions = vec![vec![ActionPose::new(0.5, 0.5, false); cfg.chunk_len]; ROWS];
    let seeds: Vec<u64> = (0..ROWS as u64).collect();
    variants(c, "sample_chunks_32", || {
        wm.sample_chunks(&histories, &actions, &seeds).unwrap();
    });
}

fn eval_gt(c: &mut Criterion) {
    let policy = Policy::new(PolicyConfig::default(), 2).unwrap();
    let task = TaskSpec::reference();
    variants(c, "eval_policy_gt_16", || {
        eval_policy_gt(&policy, &task, EPISODES, 3).unwrap();
    });
}

criterion_group!(benches, sample_chunks, eval_gt);
criterion_main!(benches);

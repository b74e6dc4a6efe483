//! The closed loop: curate SANS, adapt the world model, optimize the policy
//! inside it, deploy in the ground-truth env and fold the rollouts back in.
//! Also the evaluation suite the loop reports with.

pub mod metrics;
pub mod report;

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::env::{decode_outcome, expert_action, run_episode, ActionPose, Env, Frame, TaskSpec};
use crate::error::{Error, Result};
use crate::exec;
use crate::log::Logger;
use crate::policy::{bc_train, run_chunked_episode, ChunkPolicy, Policy};
use crate::rl::{rl_train, write_curve, CurvePoint};
use crate::sans::{self, augment, generate_sans, split, Outcome, Provenance, SansDataset, TrajectoryRecord};
use crate::seed::{derive_seed, SeedTree};
use crate::worldmodel::{
    classify_success, history_at, initial_history, RolloutResult, StepLoss, WmTrainer, WorldModel,
};

pub use metrics::VideoQuality;
pub use report::{emit_report, IterationManifest, MetricsReport, PhaseDurations, Report};

/// Windows per batched world-model call during evaluation.
const EVAL_BATCH: usize = 64;
const LOG_EVERY: usize = 100;

/// Where each artifact of a run lives under the output directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn pretrained(&self) -> PathBuf {
        self.root.join("pretrain")
    }

    /// Training part of the curated SANS, before any policy rollouts.
    pub fn curated(&self) -> PathBuf {
        self.root.join("curated")
    }

    pub fn heldout(&self) -> PathBuf {
        self.root.join("heldout")
    }

    pub fn sft(&self) -> PathBuf {
        self.root.join("sft")
    }

    pub fn iteration(&self, k: u64) -> PathBuf {
        self.root.join(format!("iter_{k}"))
    }

    /// Training SANS consumed by iteration `k`.
    pub fn sans(&self, k: u64) -> PathBuf {
        self.iteration(k).join("sans")
    }

    pub fn wm(&self, k: u64) -> PathBuf {
        self.iteration(k).join("wm")
    }

    pub fn rl(&self, k: u64) -> PathBuf {
        self.iteration(k).join("rl")
    }

    pub fn curve(&self, k: u64) -> PathBuf {
        self.iteration(k).join("rl_curve.csv")
    }

    /// SANS after iteration `k`'s deployment, the input of iteration `k + 1`.
    pub fn augmented(&self, k: u64) -> PathBuf {
        self.iteration(k).join("sans_augmented")
    }

    pub fn manifest(&self, k: u64) -> PathBuf {
        self.iteration(k).join(report::MANIFEST_FILE)
    }

    pub fn ablation(&self, variant: Ablation) -> PathBuf {
        self.root.join(format!("ablation_{}", variant.name()))
    }

    /// `path` relative to the root, with `/` separators.
    pub fn relative(&self, path: &Path) -> String {
        let rel = path.strip_prefix(&self.root).unwrap_or(path);
        rel.components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect::<Vec<_>>()
            .join("/")
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    NoNearSuccess,
    NoRewardHead,
}

impl Ablation {
    pub fn name(self) -> &'static str {
        match self {
            Ablation::NoNearSuccess => "no_near_success",
            Ablation::NoRewardHead => "no_reward_head",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "no_near_success" => Ok(Ablation::NoNearSuccess),
            "no_reward_head" => Ok(Ablation::NoRewardHead),
            other => Err(Error::contract(format!(
                "unknown ablation `{other}` (expected no_near_success or no_reward_head)"
            ))),
        }
    }
}

// ---------------------------------------------------------------------------
// Data

/// Expert episodes with per-episode Gaussian target noise and random gripper
/// flips. Noise scale and flip rate are drawn per episode from `[0, max)`, so
/// the pool spans clean demonstrations through clumsy failures.
pub fn exploration_records(
    task: &TaskSpec,
    n: usize,
    max_noise: f64,
    max_flip: f64,
    seed: u64,
) -> Result<Vec<TrajectoryRecord>> {
    let env = Env::new(task.clone());
    exec::map_indexed(n, |i| {
        let s = derive_seed(seed, "explore", i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let noise = max_noise * rng.random::<f64>();
        let flip = max_flip * rng.random::<f64>();
        let ep = run_episode(&env, env.reset(s), |st| {
            let a = expert_action(st, task, [0.0, 0.0]);
            let dx: f64 = rng.sample(StandardNormal);
            let dy: f64 = rng.sample(StandardNormal);
            let grip = if rng.random::<f64>() < flip { !a.grip } else { a.grip };
            ActionPose::new(a.x + noise * dx, a.y + noise * dy, grip)
        })?;
        Ok(TrajectoryRecord::from_episode(task, &ep, Provenance::PerturbedExpert, s))
    })
    .into_iter()
    .collect()
}

/// Mixed pool over the shifted task variants used to pretrain the shared
/// world-model initialization.
pub fn pretraining_pool(cfg: &RunConfig) -> Result<SansDataset> {
    let seeds = cfg.seeds();
    let p = &cfg.pretrain;
    let mut records = Vec::new();
    for (i, task) in TaskSpec::pretraining_variants().iter().enumerate() {
        let i = i as u64;
        if p.n_success + p.n_near > 0 {
            records.extend(generate_sans(task, p.n_success, p.n_near, seeds.derive("pretrain/sans", i))?.records);
        }
        records.extend(exploration_records(
            task,
            p.n_explore,
            p.explore_noise,
            p.explore_flip,
            seeds.derive("pretrain/explore", i),
        )?);
    }
    SansDataset::new(records, 0)
}

/// Iteration-0 SANS for the configured task, split into training and
/// held-out parts.
pub fn curate(cfg: &RunConfig) -> Result<(SansDataset, SansDataset)> {
    let seeds = cfg.seeds();
    let ds = generate_sans(&cfg.task, cfg.sans.n_success, cfg.sans.n_near, seeds.derive("sans", 0))?;
    split(&ds, cfg.sans.holdout_fraction, seeds.derive("sans/split", 0))
}

/// Initial observation histories of every record, for RL starts.
pub fn starts_of(ds: &SansDataset, history_len: usize) -> Vec<Vec<Frame>> {
    ds.records.iter().map(|r| initial_history(&r.frames[0], history_len)).collect()
}

/// `n` ground-truth episodes of `policy`, recorded with their true labels.
pub fn deploy(task: &TaskSpec, policy: &dyn ChunkPolicy, n: usize, seed: u64) -> Result<Vec<TrajectoryRecord>> {
    let env = Env::new(task.clone());
    exec::map_indexed(n, |i| {
        let s = derive_seed(seed, "deploy/start", i as u64);
        let ep = run_chunked_episode(&env, env.reset(s), policy, derive_seed(seed, "deploy/policy", i as u64))?;
        Ok(TrajectoryRecord::from_episode(task, &ep, Provenance::PolicyRollout, s))
    })
    .into_iter()
    .collect()
}

// ---------------------------------------------------------------------------
// Training phases

fn log_losses(log: Logger, phase: &'static str) -> impl FnMut(usize, &StepLoss) {
    move |step, loss| {
        if step % LOG_EVERY == 0 {
            log.event(phase, Some(step), "flow_loss", loss.flow);
            log.event(phase, Some(step), "reward_loss", loss.reward);
        }
    }
}

/// Trains the shared initialization from scratch on the pretraining pool.
pub fn pretrain_world_model(cfg: &RunConfig, log: &Logger) -> Result<WorldModel> {
    let seeds = cfg.seeds();
    let pool = pretraining_pool(cfg)?;
    log.metric("pretrain", "pool_records", pool.len() as f64);
    let mut wm = WorldModel::new(cfg.wm.clone(), seeds.derive("pretrain/init", 0))?;
    WmTrainer::new(cfg.wm.lr, seeds.derive("pretrain/train", 0)).fit(
        &mut wm,
        &pool,
        cfg.wm.pretrain_steps,
        log_losses(*log, "pretrain"),
    )?;
    Ok(wm)
}

/// Fine-tunes a copy of `init` on `ds` under `cfg.wm`'s training switches.
pub fn finetune_world_model(
    cfg: &RunConfig,
    init: &WorldModel,
    ds: &SansDataset,
    seed: u64,
    log: &Logger,
) -> Result<(WorldModel, Vec<StepLoss>)> {
    let mut wm = init.clone();
    let (a, b) = (&init.config, &cfg.wm);
    if (a.history_len, a.chunk_len, &a.denoiser_hidden, &a.embedder_hidden, a.action_embed_dim, &a.reward_hidden)
        != (b.history_len, b.chunk_len, &b.denoiser_hidden, &b.embedder_hidden, b.action_embed_dim, &b.reward_hidden)
    {
        return Err(Error::contract(
            "pretrained world model architecture differs from the configured one",
        ));
    }
    wm.config = cfg.wm.clone();
    let losses = WmTrainer::new(cfg.loop_.finetune_lr, seed).fit(&mut wm, ds, cfg.wm.train_steps, log_losses(*log, "train-wm"))?;
    Ok((wm, losses))
}

/// Behavior cloning on the successes of `ds`.
pub fn train_sft(cfg: &RunConfig, ds: &SansDataset) -> Result<Policy> {
    let seeds = cfg.seeds();
    let mut policy = Policy::new(cfg.policy.clone(), seeds.derive("sft/init", 0))?;
    bc_train(
        &mut policy,
        ds,
        cfg.policy.sft_steps,
        cfg.policy.sft_lr,
        seeds.derive("sft/train", 0),
    )?;
    Ok(policy)
}

/// GRPO from `sft` inside `wm`, starting from the first frames of `ds`.
pub fn train_rl(
    cfg: &RunConfig,
    sft: &Policy,
    wm: &WorldModel,
    ds: &SansDataset,
    seed: u64,
    log: &Logger,
) -> Result<(Policy, Vec<CurvePoint>)> {
    let starts = starts_of(ds, wm.config.history_len);
    rl_train(sft, wm, &starts, &cfg.rl, seed, |p| {
        log.event("rl", Some(p.step), "wm_success_rate", p.wm_success_rate);
        log.event("rl", Some(p.step), "loss", p.loss);
    })
}

// ---------------------------------------------------------------------------
// Evaluation

/// Success percentage of `policy` over `n` seeded ground-truth episodes.
pub fn eval_policy_gt(policy: &dyn ChunkPolicy, task: &TaskSpec, n: usize, seed: u64) -> Result<f64> {
    if n == 0 {
        return Err(Error::contract("evaluation needs at least one episode"));
    }
    let env = Env::new(task.clone());
    let wins = exec::map_indexed(n, |i| {
        let start = env.reset(derive_seed(seed, "eval/start", i as u64));
        run_chunked_episode(&env, start, policy, derive_seed(seed, "eval/policy", i as u64)).map(|ep| ep.succeeded())
    })
    .into_iter()
    .collect::<Result<Vec<bool>>>()?;
    Ok(100.0 * wins.iter().filter(|&&w| w).count() as f64 / n as f64)
}

/// Teacher-forced prediction quality on chunk-aligned windows of `heldout`.
/// Returns the metrics and one warning per skipped record.
pub fn eval_video_quality(wm: &WorldModel, heldout: &SansDataset, seed: u64) -> Result<(VideoQuality, Vec<String>)> {
    let (h, t) = (wm.config.history_len, wm.config.chunk_len);
    let mut warnings = Vec::new();
    let mut windows = Vec::new();
    for (ri, r) in heldout.records.iter().enumerate() {
        if r.frames.len() < h + t {
            warnings.push(format!(
                "record {ri} has {} frames, fewer than history + chunk = {}; skipped",
                r.frames.len(),
                h + t
            ));
            continue;
        }
        let mut s = 0;
        while s + t <= r.actions.len() {
            windows.push((ri, s));
            s += t;
        }
    }
    let mut predicted = Vec::with_capacity(windows.len() * t);
    let mut truth = Vec::with_capacity(windows.len() * t);
    for (bi, batch) in windows.chunks(EVAL_BATCH).enumerate() {
        let hist: Vec<Vec<Frame>> = batch.iter().map(|&(ri, s)| history_at(&heldout.records[ri].frames, s, h)).collect();
        let acts: Vec<Vec<ActionPose>> = batch.iter().map(|&(ri, s)| heldout.records[ri].actions[s..s + t].to_vec()).collect();
        let seeds: Vec<u64> = (0..batch.len())
            .map(|j| derive_seed(seed, "eval/video", (bi * EVAL_BATCH + j) as u64))
            .collect();
        for ((frames, _), &(ri, s)) in wm.sample_chunks(&hist, &acts, &seeds)?.into_iter().zip(batch) {
            predicted.extend(frames);
            truth.extend(heldout.records[ri].frames[s + 1..=s + t].iter().cloned());
        }
    }
    Ok((metrics::video_quality(predicted.iter().zip(&truth)), warnings))
}

/// The first `n` held-out records, alternating outcomes while both remain.
pub fn alignment_sample(heldout: &SansDataset, n: usize) -> Vec<&TrajectoryRecord> {
    let mut succ = heldout.records.iter().filter(|r| r.outcome == Outcome::Success);
    let mut fail = heldout.records.iter().filter(|r| r.outcome == Outcome::Failure);
    let mut out = Vec::with_capacity(n);
    let mut turn = true;
    while out.len() < n {
        let next = if turn {
            succ.next().or_else(|| fail.next())
        } else {
            fail.next().or_else(|| succ.next())
        };
        match next {
            Some(r) => out.push(r),
            None => break,
        }
        turn = !turn;
    }
    out
}

/// World-model rollouts from each record's first frame replaying its actions.
pub fn replay_records(wm: &WorldModel, records: &[&TrajectoryRecord], seed: u64) -> Result<Vec<RolloutResult>> {
    let (h, t) = (wm.config.history_len, wm.config.chunk_len);
    let initial: Vec<Vec<Frame>> = records.iter().map(|r| initial_history(&r.frames[0], h)).collect();
    let seeds: Vec<u64> = (0..records.len()).map(|i| derive_seed(seed, "eval/align", i as u64)).collect();
    let max_chunks = records.iter().map(|r| r.actions.len().div_ceil(t)).max().unwrap_or(0);
    let mut cursor = vec![0usize; records.len()];
    wm.rollout_batch(&initial, &seeds, max_chunks, |m, _| {
        let acts = &records[m].actions;
        let start = cursor[m];
        cursor[m] += t;
        // Past the end of a record the last action is held.
        let hold = *acts.last().ok_or_else(|| Error::contract("record without actions"))?;
        Ok((start..start + t).map(|i| acts.get(i).copied().unwrap_or(hold)).collect())
    })
}

/// Share of rollouts whose final generated frame decodes to the record's
/// true outcome. A missing or undecodable frame shows no completed task and
/// is judged a failure.
pub fn visual_alignment(results: &[RolloutResult], records: &[&TrajectoryRecord], task: &TaskSpec) -> f64 {
    let truth: Vec<bool> = records.iter().map(|r| r.outcome == Outcome::Success).collect();
    let judged: Vec<bool> = results
        .iter()
        .map(|res| {
            res.frames
                .last()
                .and_then(|f| decode_outcome(f, task).ok())
                .is_some_and(|(_, success)| success)
        })
        .collect();
    metrics::agreement_pct(&judged, &truth)
}

/// Share of rollouts whose thresholded reward trace matches the true outcome.
pub fn reward_alignment(results: &[RolloutResult], records: &[&TrajectoryRecord], threshold: f64) -> Result<f64> {
    let truth: Vec<bool> = records.iter().map(|r| r.outcome == Outcome::Success).collect();
    let judged = results
        .iter()
        .map(|r| classify_success(&r.reward_trace, threshold))
        .collect::<Result<Vec<bool>>>()?;
    Ok(metrics::agreement_pct(&judged, &truth))
}

fn check_both_outcomes(records: &[&TrajectoryRecord]) -> Result<()> {
    let has = |o: Outcome| records.iter().any(|r| r.outcome == o);
    if !has(Outcome::Success) || !has(Outcome::Failure) {
        return Err(Error::contract("alignment sample must contain both outcomes"));
    }
    Ok(())
}

pub fn eval_visual_alignment(wm: &WorldModel, heldout: &SansDataset, n: usize, task: &TaskSpec, seed: u64) -> Result<f64> {
    let sample = alignment_sample(heldout, n);
    check_both_outcomes(&sample)?;
    Ok(visual_alignment(&replay_records(wm, &sample, seed)?, &sample, task))
}

pub fn eval_reward_alignment(wm: &WorldModel, heldout: &SansDataset, n: usize, seed: u64) -> Result<f64> {
    let sample = alignment_sample(heldout, n);
    check_both_outcomes(&sample)?;
    reward_alignment(&replay_records(wm, &sample, seed)?, &sample, wm.config.reward_threshold)
}

/// Video quality plus both alignments from one shared set of rollouts. The
/// reward alignment is `None` when the model's reward head is disabled.
pub fn eval_world_model(
    wm: &WorldModel,
    heldout: &SansDataset,
    cfg: &RunConfig,
    seed: u64,
) -> Result<(VideoQuality, f64, Option<f64>, Vec<String>)> {
    let (video, warnings) = eval_video_quality(wm, heldout, derive_seed(seed, "video", 0))?;
    let sample = alignment_sample(heldout, cfg.loop_.alignment_samples);
    check_both_outcomes(&sample)?;
    let results = replay_records(wm, &sample, derive_seed(seed, "align", 0))?;
    let visual = visual_alignment(&results, &sample, &cfg.task);
    let reward = if wm.config.enable_reward_head {
        Some(reward_alignment(&results, &sample, wm.config.reward_threshold)?)
    } else {
        None
    };
    Ok((video, visual, reward, warnings))
}

// ---------------------------------------------------------------------------
// Orchestration

/// Loads the artifact at `dir` if present, otherwise builds and saves it.
fn cached<T>(
    dir: &Path,
    load: impl FnOnce(&Path) -> Result<T>,
    build: impl FnOnce() -> Result<T>,
    save: impl FnOnce(&T, &Path) -> Result<()>,
) -> Result<T> {
    if dir.exists() {
        return load(dir);
    }
    let value = build()?;
    save(&value, dir)?;
    Ok(value)
}

pub fn load_or_pretrain(cfg: &RunConfig, layout: &Layout, log: &Logger) -> Result<WorldModel> {
    cached(
        &layout.pretrained(),
        |p| WorldModel::load(p),
        || pretrain_world_model(cfg, log),
        |wm, p| wm.save(p),
    )
}

/// Curated training split and the fixed held-out set.
pub fn load_or_curate(cfg: &RunConfig, layout: &Layout) -> Result<(SansDataset, SansDataset)> {
    let (train_dir, held_dir) = (layout.curated(), layout.heldout());
    if train_dir.exists() && held_dir.exists() {
        return Ok((sans::load(&train_dir)?, sans::load(&held_dir)?));
    }
    let (train, held) = curate(cfg)?;
    sans::save(&train, &train_dir)?;
    sans::save(&held, &held_dir)?;
    Ok((train, held))
}

pub fn load_or_sft(cfg: &RunConfig, layout: &Layout) -> Result<Policy> {
    cached(
        &layout.sft(),
        |p| Policy::load(p),
        || train_sft(cfg, &load_or_curate(cfg, layout)?.0),
        |p, d| p.save(d),
    )
}

/// Seeds of iteration `k`. Evaluation seeds are shared by all iterations so
/// SFT and RL numbers are paired.
fn iteration_seeds(cfg: &RunConfig, k: u64) -> SeedTree {
    cfg.seeds().child("iteration", k)
}

fn gt_eval_seed(cfg: &RunConfig) -> u64 {
    cfg.seeds().derive("eval/gt", 0)
}

fn wm_eval_seed(cfg: &RunConfig) -> u64 {
    cfg.seeds().derive("eval/wm", 0)
}

fn finetune_seed(cfg: &RunConfig, k: u64) -> u64 {
    iteration_seeds(cfg, k).derive("wm/finetune", 0)
}

/// The SANS iteration `k` trains on. Iteration 0 uses the curated split plus
/// the SFT baseline's own deployments, so the first world model has seen the
/// policy it will be asked to judge. Later iterations take the previous
/// iteration's augmented set.
pub fn iteration_sans(cfg: &RunConfig, layout: &Layout, k: u64) -> Result<SansDataset> {
    let dir = layout.sans(k);
    if dir.exists() {
        return sans::load(&dir);
    }
    let ds = if k == 0 {
        let (train0, _) = load_or_curate(cfg, layout)?;
        let sft = load_or_sft(cfg, layout)?;
        let seed = cfg.seeds().derive("deploy/sft", 0);
        let mut records = train0.records;
        records.extend(deploy(&cfg.task, &sft, cfg.loop_.seed_rollouts, seed)?);
        SansDataset::new(records, 0)?
    } else {
        let prev = layout.augmented(k - 1);
        if !prev.exists() {
            return Err(Error::contract(format!(
                "iteration {k} needs the augmented SANS of iteration {}",
                k - 1
            )));
        }
        sans::load(&prev)?
    };
    if ds.iteration_index != k {
        return Err(Error::InvariantViolation(format!(
            "iteration {k} expects SANS with iteration_index {k}, found {}",
            ds.iteration_index
        )));
    }
    sans::save(&ds, &dir)?;
    Ok(ds)
}

/// Fine-tunes the pretrained initialization on iteration `k`'s SANS.
pub fn train_wm_phase(cfg: &RunConfig, layout: &Layout, k: u64, ds: &SansDataset, log: &Logger) -> Result<WorldModel> {
    let pre = load_or_pretrain(cfg, layout, log)?;
    let (wm, _) = finetune_world_model(cfg, &pre, ds, finetune_seed(cfg, k), log)?;
    wm.save(layout.wm(k))?;
    Ok(wm)
}

pub fn rl_phase(
    cfg: &RunConfig,
    layout: &Layout,
    k: u64,
    sft: &Policy,
    wm: &WorldModel,
    ds: &SansDataset,
    log: &Logger,
) -> Result<Policy> {
    let (rl, curve) = train_rl(cfg, sft, wm, ds, iteration_seeds(cfg, k).derive("rl", 0), log)?;
    rl.save(layout.rl(k))?;
    write_curve(layout.curve(k), &curve)?;
    Ok(rl)
}

/// Deploys the RL policy, keeps every rollout and writes the augmented SANS.
pub fn deploy_phase(
    cfg: &RunConfig,
    layout: &Layout,
    k: u64,
    rl: &Policy,
    ds: &SansDataset,
    log: &Logger,
) -> Result<SansDataset> {
    let seed = iteration_seeds(cfg, k).derive("deploy", 0);
    let rollouts = deploy(&cfg.task, rl, cfg.loop_.deploy_episodes, seed)?;
    let wins = rollouts.iter().filter(|r| r.outcome == Outcome::Success).count();
    log.metric("deploy", "successes", wins as f64);
    let next = augment(ds, rollouts)?;
    sans::save(&next, layout.augmented(k))?;
    Ok(next)
}

/// Full metrics for one iteration's world model and policies.
pub fn eval_phase(
    cfg: &RunConfig,
    wm: &WorldModel,
    sft: &Policy,
    rl: &Policy,
    heldout: &SansDataset,
    log: &Logger,
) -> Result<(MetricsReport, Vec<String>)> {
    let (video, visual, reward, warnings) = eval_world_model(wm, heldout, cfg, wm_eval_seed(cfg))?;
    let n = cfg.loop_.eval_episodes;
    let sft_pct = eval_policy_gt(sft, &cfg.task, n, gt_eval_seed(cfg))?;
    let rl_pct = eval_policy_gt(rl, &cfg.task, n, gt_eval_seed(cfg))?;
    for w in &warnings {
        log.warn("eval", w);
    }
    for (metric, v) in [
        ("mse", video.mse),
        ("psnr_db", video.psnr_db),
        ("ssim", video.ssim),
        ("visual_alignment_pct", visual),
        ("gt_success_sft_pct", sft_pct),
        ("gt_success_rl_pct", rl_pct),
    ] {
        log.metric("eval", metric, v);
    }
    if let Some(r) = reward {
        log.metric("eval", "reward_alignment_pct", r);
    }
    let report = MetricsReport {
        video,
        visual_alignment_pct: visual,
        reward_alignment_pct: reward,
        gt_success_sft_pct: Some(sft_pct),
        gt_success_rl_pct: Some(rl_pct),
        delta_pct: Some(rl_pct - sft_pct),
    };
    Ok((report, warnings))
}

/// Runs one full iteration after `prev` (or iteration 0) and writes its
/// manifest. If a phase fails, a manifest holding the results so far and the
/// failing phase is written before the error is returned.
pub fn run_iteration(
    cfg: &RunConfig,
    prev: Option<&IterationManifest>,
    layout: &Layout,
    log: &Logger,
) -> Result<IterationManifest> {
    let k = prev.map_or(0, |m| m.iteration_index + 1);
    if let Some(p) = prev {
        if p.failed_phase.is_some() {
            return Err(Error::contract(format!("iteration {} did not complete", p.iteration_index)));
        }
    }
    let mut manifest = IterationManifest::new(k);
    match iterate_phases(cfg, layout, log, &mut manifest) {
        Ok(()) => {
            manifest.save(&layout.manifest(k))?;
            Ok(manifest)
        }
        Err((phase, e)) => {
            manifest.failed_phase = Some(phase.to_string());
            manifest.error = Some(e.to_string());
            manifest.save(&layout.manifest(k))?;
            Err(e)
        }
    }
}

fn iterate_phases(
    cfg: &RunConfig,
    layout: &Layout,
    log: &Logger,
    m: &mut IterationManifest,
) -> std::result::Result<(), (&'static str, Error)> {
    let k = m.iteration_index;
    let at = |phase: &'static str| move |e: Error| (phase, e);
    log.metric("iterate", "iteration", k as f64);

    let clock = Instant::now();
    let (_, heldout) = load_or_curate(cfg, layout).map_err(at("curate"))?;
    let sft = load_or_sft(cfg, layout).map_err(at("curate"))?;
    let ds = iteration_sans(cfg, layout, k).map_err(at("curate"))?;
    m.heldout_path = layout.relative(&layout.heldout());
    m.sft_path = layout.relative(&layout.sft());
    m.durations.curate_s = clock.elapsed().as_secs_f64();
    log.metric("curate", "records", ds.len() as f64);

    let clock = Instant::now();
    let wm = train_wm_phase(cfg, layout, k, &ds, log).map_err(at("train_wm"))?;
    m.wm_path = layout.relative(&layout.wm(k));
    m.durations.train_wm_s = clock.elapsed().as_secs_f64();

    let clock = Instant::now();
    let rl = rl_phase(cfg, layout, k, &sft, &wm, &ds, log).map_err(at("rl"))?;
    m.rl_path = layout.relative(&layout.rl(k));
    m.rl_curve_path = layout.relative(&layout.curve(k));
    m.durations.rl_s = clock.elapsed().as_secs_f64();

    let clock = Instant::now();
    deploy_phase(cfg, layout, k, &rl, &ds, log).map_err(at("deploy"))?;
    m.sans_path = layout.relative(&layout.augmented(k));
    m.durations.deploy_s = clock.elapsed().as_secs_f64();

    let clock = Instant::now();
    let (metrics, warnings) = eval_phase(cfg, &wm, &sft, &rl, &heldout, log).map_err(at("eval"))?;
    m.metrics = metrics;
    m.warnings = warnings;
    m.durations.eval_s = clock.elapsed().as_secs_f64();
    Ok(())
}

/// Completed manifests `iter_0, iter_1, ...` up to the first missing or
/// failed one.
pub fn completed_manifests(layout: &Layout) -> Result<Vec<IterationManifest>> {
    let mut out = Vec::new();
    for k in 0.. {
        let path = layout.manifest(k);
        if !path.exists() {
            break;
        }
        let m = IterationManifest::load(&path)?;
        if m.failed_phase.is_some() {
            break;
        }
        out.push(m);
    }
    Ok(out)
}

/// Runs iterations until `k` completed manifests exist, resuming after any
/// already on disk.
pub fn run_iterations(cfg: &RunConfig, k: u64, layout: &Layout, log: &Logger) -> Result<Vec<IterationManifest>> {
    let mut done = completed_manifests(layout)?;
    done.truncate(k as usize);
    while (done.len() as u64) < k {
        let m = run_iteration(cfg, done.last(), layout, log)?;
        done.push(m);
    }
    Ok(done)
}

/// Re-trains iteration 0's world model under an ablation with the same seeds
/// and evaluates it on the same held-out records. Without a baseline run the
/// shared artifacts are produced first.
pub fn run_ablation(cfg: &RunConfig, variant: Ablation, layout: &Layout, log: &Logger) -> Result<MetricsReport> {
    let (_, heldout) = load_or_curate(cfg, layout)?;
    let ds = iteration_sans(cfg, layout, 0)?;
    let pre = load_or_pretrain(cfg, layout, log)?;
    let mut acfg = cfg.clone();
    let ds = match variant {
        Ablation::NoNearSuccess => ds.filtered(|r| r.outcome == Outcome::Success),
        Ablation::NoRewardHead => {
            acfg.wm.enable_reward_head = false;
            ds
        }
    };
    let (wm, _) = finetune_world_model(&acfg, &pre, &ds, finetune_seed(cfg, 0), log)?;
    let dir = layout.ablation(variant);
    wm.save(dir.join("wm"))?;
    let (video, visual, reward, _) = eval_world_model(&wm, &heldout, &acfg, wm_eval_seed(cfg))?;
    let report = MetricsReport {
        video,
        visual_alignment_pct: visual,
        reward_alignment_pct: reward,
        gt_success_sft_pct: None,
        gt_success_rl_pct: None,
        delta_pct: None,
    };
    report::write_json(&dir.join("metrics.json"), &report)?;
    log.metric(variant.name(), "visual_alignment_pct", visual);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_paths_use_forward_slashes() {
        let layout = Layout::new("/tmp/run");
        assert_eq!(layout.relative(&layout.augmented(2)), "iter_2/sans_augmented");
        assert_eq!(layout.resolve("iter_2/wm"), layout.wm(2));
    }

    #[test]
    fn ablation_names_roundtrip() {
        for v in [Ablation::NoNearSuccess, Ablation::NoRewardHead] {
            assert_eq!(Ablation::parse(v.name()).unwrap(), v);
        }
        assert!(matches!(Ablation::parse("no_policy"), Err(Error::Contract(_))));
    }

    #[test]
    fn alignment_sample_alternates_outcomes() {
        let ds = generate_sans(&TaskSpec::reference(), 3, 5, 1).unwrap();
        let sample = alignment_sample(&ds, 6);
        let kinds: Vec<Outcome> = sample.iter().map(|r| r.outcome).collect();
        use Outcome::{Failure as F, Success as S};
        assert_eq!(kinds, [S, F, S, F, S, F]);
        assert_eq!(alignment_sample(&ds, 20).len(), 8);
    }

    #[test]
    fn exploration_is_seeded() {
        let task = TaskSpec::reference();
        let a = exploration_records(&task, 3, 0.2, 0.1, 4).unwrap();
        assert_eq!(a, exploration_records(&task, 3, 0.2, 0.1, 4).unwrap());
        assert!(a.iter().all(|r| r.provenance == Provenance::PerturbedExpert));
        // zero noise and no flips reproduce the expert
        let clean = exploration_records(&task, 2, 0.0, 0.0, 4).unwrap();
        assert!(clean.iter().all(|r| r.outcome == Outcome::Success));
    }
}

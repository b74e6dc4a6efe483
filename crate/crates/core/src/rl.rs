//! Group-relative policy optimization inside the learned world model.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::{Frame, FRAME_LEN};
use crate::error::{Error, Result};
use crate::numerics::{adam_update, grad, AdamConfig, AdamState, Tensor};
use crate::policy::{logprob_raw, sample_actions, ChunkBatch, Policy};
use crate::seed::derive_seed;
use crate::worldmodel::{RolloutResult, WorldModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlConfig {
    pub group_size: usize,
    pub groups_per_step: usize,
    pub clip_epsilon: f64,
    pub lr: f64,
    pub total_steps: usize,
    pub std_floor: f64,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            groups_per_step: 4,
            clip_epsilon: 0.2,
            lr: 1e-3,
            total_steps: 50,
            std_floor: 1e-6,
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |k: &str, m: &str| Err(Error::Config(format!("rl.{k} {m}")));
        if self.group_size < 2 {
            return fail("group_size", "must be at least 2");
        }
        if self.groups_per_step == 0 {
            return fail("groups_per_step", "must be at least 1");
        }
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return fail("clip_epsilon", "must lie strictly between 0 and 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail("lr", "must be positive");
        }
        if !(self.std_floor > 0.0 && self.std_floor.is_finite()) {
            return fail("std_floor", "must be positive");
        }
        Ok(())
    }
}

/// One policy decision inside a rollout.
#[derive(Clone, Debug, PartialEq)]
pub struct ChunkRecord {
    pub history: Vec<Frame>,
    pub raw: Vec<[f64; 2]>,
    pub grips: Vec<bool>,
    /// Log-probability under the behavior snapshot.
    pub old_logprob: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupMember {
    pub chunks: Vec<ChunkRecord>,
    pub result: RolloutResult,
    pub ret: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutGroup {
    pub start: Vec<Frame>,
    pub members: Vec<GroupMember>,
    pub advantages: Vec<f64>,
}

impl RolloutGroup {
    pub fn returns(&self) -> Vec<f64> {
        self.members.iter().map(|m| m.ret).collect()
    }
}

/// `(R - mean) / (std_pop + eps)`, or all zeros when every return is equal.
pub fn compute_advantages(returns: &[f64], std_floor: f64) -> Result<Vec<f64>> {
    if returns.len() < 2 {
        return Err(Error::contract("advantages need a group of at least 2"));
    }
    let n = returns.len() as f64;
    if returns.iter().all(|&r| r == returns[0]) {
        return Ok(vec![0.0; returns.len()]);
    }
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let denom = var.sqrt() + std_floor;
    Ok(returns.iter().map(|r| (r - mean) / denom).collect())
}

/// Rolls out `group_size` members from each start in one batched pass.
/// Member `m` of group `g` uses seed `derive_seed(seed, "rl/member", g * G + m)`.
pub fn collect_groups(
    policy: &Policy,
    wm: &WorldModel,
    starts: &[Vec<Frame>],
    group_size: usize,
    std_floor: f64,
    seed: u64,
) -> Result<Vec<RolloutGroup>> {
    if group_size < 2 {
        return Err(Error::contract("group size must be at least 2"));
    }
    if policy.config.chunk_len != wm.config.chunk_len || policy.config.history_len != wm.config.history_len {
        return Err(Error::contract("policy and world model disagree on chunk or history length"));
    }
    let n = starts.len() * group_size;
    let initial: Vec<Vec<Frame>> = (0..n).map(|i| starts[i / group_size].clone()).collect();
    let seeds: Vec<u64> = (0..n).map(|i| derive_seed(seed, "rl/member", i as u64)).collect();
    let mut chunks: Vec<Vec<ChunkRecord>> = vec![Vec::new(); n];
    let results = wm.rollout_batch(&initial, &seeds, wm.config.max_chunks, |m, history| {
        let dist = policy.forward(history)?;
        let c = chunks[m].len() as u64;
        let s = sample_actions(&dist, derive_seed(seeds[m], "policy/chunk", c));
        chunks[m].push(ChunkRecord {
            history: history.to_vec(),
            raw: s.raw,
            grips: s.actions.iter().map(|a| a.grip).collect(),
            old_logprob: s.logprob,
        });
        Ok(s.actions)
    })?;
    let mut members: Vec<GroupMember> = chunks
        .into_iter()
        .zip(results)
        .map(|(chunks, result)| GroupMember {
            ret: if result.success { 1.0 } else { 0.0 },
            chunks,
            result,
        })
        .collect();
    let mut groups = Vec::with_capacity(starts.len());
    for start in starts.iter().rev() {
        let group: Vec<GroupMember> = members.split_off(members.len() - group_size);
        let returns: Vec<f64> = group.iter().map(|m| m.ret).collect();
        groups.push(RolloutGroup {
            start: start.clone(),
            advantages: compute_advantages(&returns, std_floor)?,
            members: group,
        });
    }
    groups.reverse();
    Ok(groups)
}

pub fn collect_group(
    policy: &Policy,
    wm: &WorldModel,
    start: &[Frame],
    group_size: usize,
    std_floor: f64,
    seed: u64,
) -> Result<RolloutGroup> {
    let mut g = collect_groups(policy, wm, &[start.to_vec()], group_size, std_floor, seed)?;
    Ok(g.pop().expect("one group"))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateDiagnostics {
    pub mean_ratio: f64,
    /// Largest `|ratio - 1|` over the batch.
    pub max_ratio_deviation: f64,
    pub clip_fraction: f64,
    pub loss: f64,
    pub skipped_members: usize,
    /// False when no gradient step was taken (all advantages zero or nothing valid).
    pub updated: bool,
}

/// Persistent optimizer for successive GRPO updates.
#[derive(Clone, Debug, Default)]
pub struct GrpoOptimizer {
    pub adam: AdamState,
}

/// Clipped-surrogate step with chunk-level ratios.
pub fn grpo_update(
    policy: &mut Policy,
    opt: &mut GrpoOptimizer,
    groups: &[RolloutGroup],
    clip_epsilon: f64,
    lr: f64,
) -> Result<UpdateDiagnostics> {
    let cfg = policy.config.clone();
    let mut hist = Vec::new();
    let mut raw = Vec::new();
    let mut grips = Vec::new();
    let mut old = Vec::new();
    let mut adv = Vec::new();
    let mut diag = UpdateDiagnostics::default();
    for g in groups {
        if g.advantages.len() != g.members.len() {
            return Err(Error::contract("group advantages do not match its members"));
        }
        for (m, &a) in g.members.iter().zip(&g.advantages) {
            let mut ok = true;
            for c in &m.chunks {
                let row: Vec<f64> = c.history.iter().flat_map(|f| f.data.iter().copied()).collect();
                if row.len() != cfg.history_len * FRAME_LEN {
                    return Err(Error::dim("stored history", cfg.history_len * FRAME_LEN, row.len()));
                }
                let dist = policy.forward_rows(&Tensor::row(row))?.pop().expect("one row");
                let lp = logprob_raw(&dist, &c.raw, &c.grips)?;
                if !(lp - c.old_logprob).exp().is_finite() || !c.old_logprob.is_finite() {
                    ok = false;
                }
            }
            if !ok {
                diag.skipped_members += 1;
                continue;
            }
            for c in &m.chunks {
                for f in &c.history {
                    hist.extend_from_slice(&f.data);
                }
                for r in &c.raw {
                    raw.extend_from_slice(r);
                }
                grips.extend(c.grips.iter().map(|&b| if b { 1.0 } else { 0.0 }));
                old.push(c.old_logprob);
                adv.push(a);
            }
        }
    }
    if old.is_empty() {
        return Ok(diag);
    }
    let n = old.len();
    let batch = ChunkBatch::new(hist, raw, grips, &cfg)?;
    let old_t = Tensor::matrix(n, 1, old)?;
    let adv_t = Tensor::matrix(n, 1, adv.clone())?;
    let mut ratios = Vec::new();
    let (loss, g) = grad(&policy.params, |tape, vars| {
        let h = tape.constant(batch.history.clone());
        let r = tape.constant(batch.raw.clone());
        let gr = tape.constant(batch.grips.clone());
        let lp = policy.logprob_on_tape(tape, vars, h, r, gr)?;
        let old_v = tape.constant(old_t.clone());
        let log_ratio = tape.sub(lp, old_v)?;
        let ratio = tape.exp(log_ratio);
        ratios = tape.value(ratio).data().to_vec();
        let a = tape.constant(adv_t.clone());
        let unclipped = tape.mul(ratio, a)?;
        let clipped = tape.clamp(ratio, 1.0 - clip_epsilon, 1.0 + clip_epsilon);
        let clipped = tape.mul(clipped, a)?;
        let surrogate = tape.min(unclipped, clipped)?;
        let m = tape.mean(surrogate);
        Ok(tape.scale(m, -1.0))
    })?;
    diag.loss = loss;
    diag.mean_ratio = ratios.iter().sum::<f64>() / n as f64;
    diag.max_ratio_deviation = ratios.iter().map(|r| (r - 1.0).abs()).fold(0.0, f64::max);
    diag.clip_fraction = ratios
        .iter()
        .filter(|&&r| r < 1.0 - clip_epsilon || r > 1.0 + clip_epsilon)
        .count() as f64
        / n as f64;
    if adv.iter().all(|&a| a == 0.0) {
        return Ok(diag);
    }
    if !loss.is_finite() {
        return Err(Error::numeric(format!("surrogate loss not finite ({loss})")));
    }
    adam_update(&mut policy.params, &g, &mut opt.adam, &AdamConfig::with_lr(lr))?;
    diag.updated = true;
    Ok(diag)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub wm_success_rate: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub loss: f64,
}

/// Collect, normalize and update for `config.total_steps` steps, drawing
/// starts round-robin from `starts`.
pub fn rl_train(
    policy: &Policy,
    wm: &WorldModel,
    starts: &[Vec<Frame>],
    config: &RlConfig,
    seed: u64,
    mut on_step: impl FnMut(&CurvePoint),
) -> Result<(Policy, Vec<CurvePoint>)> {
    config.validate()?;
    if starts.is_empty() {
        return Err(Error::contract("rl_train needs at least one start"));
    }
    let mut policy = policy.clone();
    let mut opt = GrpoOptimizer::default();
    let mut curve = Vec::with_capacity(config.total_steps);
    let mut next = 0usize;
    for step in 0..config.total_steps {
        let picked: Vec<Vec<Frame>> = (0..config.groups_per_step)
            .map(|_| {
                let s = starts[next % starts.len()].clone();
                next += 1;
                s
            })
            .collect();
        let step_seed = derive_seed(seed, "rl/step", step as u64);
        let groups = collect_groups(&policy, wm, &picked, config.group_size, config.std_floor, step_seed)?;
        let total: usize = groups.iter().map(|g| g.members.len()).sum();
        let wins: f64 = groups.iter().flat_map(|g| g.returns()).sum();
        let diag = grpo_update(&mut policy, &mut opt, &groups, config.clip_epsilon, config.lr)?;
        let point = CurvePoint {
            step,
            wm_success_rate: wins / total as f64,
            mean_ratio: diag.mean_ratio,
            clip_fraction: diag.clip_fraction,
            loss: diag.loss,
        };
        on_step(&point);
        curve.push(point);
    }
    Ok((policy, curve))
}

pub const CURVE_HEADER: &str = "step,wm_success_rate,mean_ratio,clip_fraction,loss";

pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut s = String::from(CURVE_HEADER);
    s.push('\n');
    for p in curve {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            p.step, p.wm_success_rate, p.mean_ratio, p.clip_fraction, p.loss
        );
    }
    s
}

pub fn write_curve(path: impl AsRef<Path>, curve: &[CurvePoint]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, curve_csv(curve)).map_err(|e| Error::io(path, e))
}

pub fn read_curve(path: impl AsRef<Path>) -> Result<Vec<CurvePoint>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(CURVE_HEADER) {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            detail: "missing rl curve header".into(),
        });
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::Truncated {
                path: path.to_path_buf(),
                detail: format!("malformed curve row {l:?}"),
            };
            if f.len() != 5 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            Ok(CurvePoint {
                step: f[0].parse().map_err(|_| bad())?,
                wm_success_rate: num(f[1])?,
                mean_ratio: num(f[2])?,
                clip_fraction: num(f[3])?,
                loss: num(f[4])?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{render, Env, TaskSpec};
    use crate::policy::PolicyConfig;
    use crate::worldmodel::{initial_history, WorldModelConfig};
    use proptest::prelude::*;

    fn setup(reward_bias: f64) -> (Policy, WorldModel, Vec<Frame>) {
        let pcfg = PolicyConfig {
            chunk_len: 2,
            trunk_hidden: vec![8],
            feature_dim: 4,
            ..PolicyConfig::default()
        };
        let wcfg = WorldModelConfig {
            chunk_len: 2,
            denoiser_hidden: vec![8],
            embedder_hidden: vec![4],
            action_embed_dim: 4,
            reward_hidden: vec![4],
            euler_steps: 2,
            max_chunks: 2,
            ..WorldModelConfig::default()
        };
        let mut wm = WorldModel::new(wcfg, 2).unwrap();
        let head = wm.reward_head();
        let last = head.spec.layers() - 1;
        wm.params.get_mut(&head.weight_name(last)).unwrap().data_mut().fill(0.0);
        wm.params.get_mut(&head.bias_name(last)).unwrap().data_mut().fill(reward_bias);
        let env = Env::new(TaskSpec::reference());
        let start = initial_history(&render(&env.reset(4), env.task.goal_radius), 2);
        (Policy::new(pcfg, 1).unwrap(), wm, start)
    }

    proptest! {
        #[test]
        fn advantages_sum_to_zero(returns in prop::collection::vec(prop::bool::ANY, 2..16)) {
            let r: Vec<f64> = returns.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
            let a = compute_advantages(&r, 1e-6).unwrap();
            prop_assert!(a.iter().sum::<f64>().abs() <= 1e-9);
        }

        #[test]
        fn real_valued_advantages_sum_to_zero(r in prop::collection::vec(-5.0f64..5.0, 2..16)) {
            let a = compute_advantages(&r, 1e-6).unwrap();
            prop_assert!(a.iter().sum::<f64>().abs() <= 1e-9);
        }
    }

    #[test]
    fn advantages_hand_values() {
        // returns [1, 0, 0, 0]: mean 0.25, population std sqrt(3)/4
        let a = compute_advantages(&[1.0, 0.0, 0.0, 0.0], 0.0).unwrap();
        let s = 3f64.sqrt() / 4.0;
        assert!((a[0] - 0.75 / s).abs() < 1e-12);
        assert!((a[1] + 0.25 / s).abs() < 1e-12);
        assert_eq!(compute_advantages(&[1.0, 1.0], 1e-6).unwrap(), vec![0.0, 0.0]);
        assert!(compute_advantages(&[1.0], 1e-6).is_err());
    }

    #[test]
    fn constant_rewards_leave_policy_untouched() {
        for bias in [10.0, -10.0] {
            let (policy, wm, start) = setup(bias);
            let g = collect_group(&policy, &wm, &start, 4, 1e-6, 3).unwrap();
            assert!(g.advantages.iter().all(|&a| a == 0.0));
            let mut p = policy.clone();
            let d = grpo_update(&mut p, &mut GrpoOptimizer::default(), &[g], 0.2, 1e-2).unwrap();
            assert!(!d.updated);
            assert_eq!(p, policy);
        }
    }

    #[test]
    fn fresh_policy_ratio_is_one() {
        let (policy, wm, start) = setup(0.0);
        let g = collect_group(&policy, &wm, &start, 4, 1e-6, 3).unwrap();
        let mut p = policy.clone();
        let d = grpo_update(&mut p, &mut GrpoOptimizer::default(), &[g], 0.2, 1e-2).unwrap();
        assert_eq!(d.mean_ratio, 1.0);
        assert_eq!(d.max_ratio_deviation, 0.0);
        assert_eq!(d.clip_fraction, 0.0);
    }

    #[test]
    fn mixed_group_moves_the_policy() {
        let (policy, wm, start) = setup(0.0);
        let mut g = collect_group(&policy, &wm, &start, 4, 1e-6, 3).unwrap();
        g.advantages = compute_advantages(&[1.0, 0.0, 1.0, 0.0], 1e-6).unwrap();
        let mut p = policy.clone();
        let d = grpo_update(&mut p, &mut GrpoOptimizer::default(), &[g], 0.2, 1e-2).unwrap();
        assert!(d.updated);
        assert_ne!(p, policy);
    }

    #[test]
    fn stale_samples_are_clipped() {
        let (policy, wm, start) = setup(0.0);
        let mut g = collect_group(&policy, &wm, &start, 4, 1e-6, 3).unwrap();
        g.advantages = compute_advantages(&[1.0, 0.0, 1.0, 0.0], 1e-6).unwrap();
        let mut p = policy.clone();
        let mut opt = GrpoOptimizer::default();
        let mut d = grpo_update(&mut p, &mut opt, std::slice::from_ref(&g), 0.2, 0.1).unwrap();
        for _ in 0..5 {
            d = grpo_update(&mut p, &mut opt, std::slice::from_ref(&g), 0.2, 0.1).unwrap();
        }
        assert!(d.max_ratio_deviation > 0.2, "{}", d.max_ratio_deviation);
        assert!(d.clip_fraction > 0.0);
    }

    #[test]
    fn curve_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        let curve = vec![CurvePoint {
            step: 0,
            wm_success_rate: 0.375,
            mean_ratio: 1.0,
            clip_fraction: 0.0,
            loss: -0.1234567890123,
        }];
        write_curve(&path, &curve).unwrap();
        assert!(fs::read_to_string(&path).unwrap().starts_with(CURVE_HEADER));
        assert_eq!(read_curve(&path).unwrap(), curve);
    }
}

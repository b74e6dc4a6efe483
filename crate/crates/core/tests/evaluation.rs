use loopworld::env::{expert_action, ActionPose, EnvState, Frame, TaskSpec, HOME};
use loopworld::pipeline::{alignment_sample, eval_policy_gt, replay_records, reward_alignment, visual_alignment};
use loopworld::policy::ChunkPolicy;
use loopworld::sans::{generate_sans, Outcome, SansDataset};
use loopworld::worldmodel::{RolloutResult, WorldModel, WorldModelConfig};
use loopworld::Result;

struct Expert(TaskSpec);

impl ChunkPolicy for Expert {
    fn act(&self, _: &[Frame], state: &EnvState, _: u64) -> Result<Vec<ActionPose>> {
        Ok(vec![expert_action(state, &self.0, [0.0, 0.0])])
    }

    fn history_len(&self) -> usize {
        1
    }
}

struct Home;

impl ChunkPolicy for Home {
    fn act(&self, _: &[Frame], _: &EnvState, _: u64) -> Result<Vec<ActionPose>> {
        Ok(vec![ActionPose::new(HOME[0], HOME[1], false); 4])
    }

    fn history_len(&self) -> usize {
        1
    }
}

fn heldout() -> SansDataset {
    generate_sans(&TaskSpec::reference(), 7, 13, 21).unwrap()
}

fn failure_pct(ds: &SansDataset, n: usize) -> f64 {
    let s = alignment_sample(ds, n);
    100.0 * s.iter().filter(|r| r.outcome == Outcome::Failure).count() as f64 / s.len() as f64
}

fn small_wm() -> WorldModelConfig {
    WorldModelConfig {
        denoiser_hidden: vec![16],
        euler_steps: 2,
        ..WorldModelConfig::default()
    }
}

/// Forces every predicted reward to sigmoid(bias).
fn constant_head(bias: f64) -> WorldModel {
    let mut wm = WorldModel::new(small_wm(), 1).unwrap();
    let head = wm.reward_head();
    let last = head.spec.layers() - 1;
    wm.params.get_mut(&head.weight_name(last)).unwrap().data_mut().fill(0.0);
    wm.params.get_mut(&head.bias_name(last)).unwrap().data_mut().fill(bias);
    wm
}

#[test]
fn expert_policy_always_succeeds() {
    let task = TaskSpec::reference();
    assert_eq!(eval_policy_gt(&Expert(task.clone()), &task, 50, 3).unwrap(), 100.0);
}

#[test]
fn home_pose_policy_never_succeeds() {
    let task = TaskSpec::reference();
    assert_eq!(eval_policy_gt(&Home, &task, 50, 3).unwrap(), 0.0);
    assert!(eval_policy_gt(&Home, &task, 0, 3).is_err());
}

#[test]
fn oracle_frames_align_perfectly() {
    let ds = heldout();
    let sample = alignment_sample(&ds, 20);
    let results: Vec<RolloutResult> = sample
        .iter()
        .map(|r| RolloutResult {
            frames: r.frames[1..].to_vec(),
            reward_trace: r.rewards.iter().map(|&b| f64::from(b)).collect(),
            success: false,
            chunks_executed: 0,
        })
        .collect();
    assert_eq!(visual_alignment(&results, &sample, &TaskSpec::reference()), 100.0);
    assert_eq!(reward_alignment(&results, &sample, 0.9).unwrap(), 100.0);
}

#[test]
fn blank_frames_align_with_the_failure_fraction() {
    // A fresh model's zero output layer generates blank frames.
    let ds = heldout();
    let sample = alignment_sample(&ds, 20);
    let wm = WorldModel::new(small_wm(), 1).unwrap();
    let results = replay_records(&wm, &sample, 5).unwrap();
    assert!(results.iter().all(|r| r.frames.last().unwrap().data.iter().all(|&v| v.abs() < 1e-12)));
    let got = visual_alignment(&results, &sample, &TaskSpec::reference());
    assert_eq!(got, failure_pct(&ds, 20));
}

#[test]
fn constant_reward_heads_align_with_class_fractions() {
    let ds = heldout();
    let sample = alignment_sample(&ds, 20);
    let fail = failure_pct(&ds, 20);
    for (bias, expected) in [(40.0, 100.0 - fail), (-40.0, fail)] {
        let wm = constant_head(bias);
        let results = replay_records(&wm, &sample, 5).unwrap();
        assert_eq!(reward_alignment(&results, &sample, 0.9).unwrap(), expected);
    }
}

#[test]
fn replay_feeds_recorded_actions_in_order() {
    let ds = heldout();
    let sample = alignment_sample(&ds, 2);
    let cfg = WorldModelConfig {
        enable_reward_head: false,
        ..small_wm()
    };
    let wm = WorldModel::new(cfg, 1).unwrap();
    let res = replay_records(&wm, &sample, 0).unwrap();
    let t = wm.config.chunk_len;
    for (r, rec) in res.iter().zip(&sample) {
        // Without a head nothing stops the replay before the record ends.
        assert_eq!(r.chunks_executed, rec.actions.len().div_ceil(t));
        assert_eq!(r.frames.len(), r.chunks_executed * t);
    }
}

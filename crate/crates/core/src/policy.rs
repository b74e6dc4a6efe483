//! Chunked Gaussian/Bernoulli policy over observation histories.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::env::{render, ActionPose, Env, EnvState, Episode, Frame, FRAME_LEN};
use crate::error::{Error, Result};
use crate::numerics::{
    adam_update, grad, load_params, save_params, sigmoid, softplus, Activation, AdamConfig,
    AdamState, Mlp, MlpSpec, ParamSet, ParamVars, Tape, Tensor, Var,
};
use crate::sans::{Outcome, SansDataset};
use crate::seed::derive_seed;
use crate::worldmodel::history_at;

pub const CHECKPOINT_FILE: &str = "policy.ckpt";
pub const SIDECAR_FILE: &str = "policy.json";
const LOGSTD: &str = "logstd";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub history_len: usize,
    pub chunk_len: usize,
    pub trunk_hidden: Vec<usize>,
    pub feature_dim: usize,
    pub logstd_init: f64,
    pub logstd_min: f64,
    pub logstd_max: f64,
    pub sft_steps: usize,
    pub sft_lr: f64,
    pub batch_size: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            history_len: 2,
            chunk_len: 8,
            trunk_hidden: vec![128],
            feature_dim: 64,
            logstd_init: -1.5,
            logstd_min: -5.0,
            logstd_max: 1.0,
            sft_steps: 300,
            sft_lr: 1e-3,
            batch_size: 32,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |k: &str, m: &str| Err(Error::Config(format!("policy.{k} {m}")));
        if self.history_len == 0 {
            return fail("history_len", "must be at least 1");
        }
        if self.chunk_len == 0 {
            return fail("chunk_len", "must be at least 1");
        }
        if self.feature_dim == 0 || self.trunk_hidden.iter().any(|&w| w == 0) {
            return fail("trunk_hidden", "widths must be positive");
        }
        if !(self.logstd_min < self.logstd_max) {
            return fail("logstd_min", "must be below logstd_max");
        }
        if !(self.logstd_min..=self.logstd_max).contains(&self.logstd_init) {
            return fail("logstd_init", "must lie within the logstd clamp");
        }
        if !(self.sft_lr > 0.0 && self.sft_lr.is_finite()) {
            return fail("sft_lr", "must be positive");
        }
        if self.batch_size == 0 {
            return fail("batch_size", "must be at least 1");
        }
        Ok(())
    }

    fn trunk_spec(&self) -> MlpSpec {
        let mut w = vec![self.history_len * FRAME_LEN];
        w.extend(&self.trunk_hidden);
        w.push(self.feature_dim);
        MlpSpec::uniform(w, Activation::Tanh, Activation::Tanh)
    }

    fn mean_spec(&self) -> MlpSpec {
        MlpSpec::uniform(
            vec![self.feature_dim, 2 * self.chunk_len],
            Activation::Identity,
            Activation::Sigmoid,
        )
    }

    fn grip_spec(&self) -> MlpSpec {
        MlpSpec::uniform(
            vec![self.feature_dim, self.chunk_len],
            Activation::Identity,
            Activation::Identity,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActionChunkDistribution {
    pub means: Vec<[f64; 2]>,
    pub stds: Vec<[f64; 2]>,
    /// Clamped log standard deviations behind `stds`.
    pub log_stds: Vec<[f64; 2]>,
    pub grip_probs: Vec<f64>,
    /// Gripper logits behind `grip_probs`, kept for exact log-masses.
    pub grip_logits: Vec<f64>,
}

impl ActionChunkDistribution {
    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }
}

/// A sampled chunk: clamped actions for execution plus the pre-clamp planar
/// draws that the log-probability refers to.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledChunk {
    pub actions: Vec<ActionPose>,
    pub raw: Vec<[f64; 2]>,
    pub logprob: f64,
}

pub fn sample_actions(dist: &ActionChunkDistribution, seed: u64) -> SampledChunk {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut actions = Vec::with_capacity(dist.len());
    let mut raw = Vec::with_capacity(dist.len());
    for t in 0..dist.len() {
        let ex: f64 = rng.sample(StandardNormal);
        let ey: f64 = rng.sample(StandardNormal);
        let x = dist.means[t][0] + dist.stds[t][0] * ex;
        let y = dist.means[t][1] + dist.stds[t][1] * ey;
        let grip = rng.random::<f64>() < dist.grip_probs[t];
        raw.push([x, y]);
        actions.push(ActionPose::new(x, y, grip));
    }
    let grips: Vec<bool> = actions.iter().map(|a| a.grip).collect();
    let logprob = logprob_raw(dist, &raw, &grips).expect("sized by construction");
    SampledChunk { actions, raw, logprob }
}

/// Log-density of pre-clamp planar targets plus gripper log-masses. The
/// arithmetic follows [`Policy::logprob_on_tape`] operation for operation, so
/// a fresh policy reproduces its own behavior log-probabilities bit for bit.
pub fn logprob_raw(dist: &ActionChunkDistribution, raw: &[[f64; 2]], grips: &[bool]) -> Result<f64> {
    let t = dist.len();
    if raw.len() != t || grips.len() != t {
        return Err(Error::contract(format!("expected {t} actions, got {}", raw.len())));
    }
    let mut quad = 0.0;
    for i in 0..t {
        for d in 0..2 {
            let z = (raw[i][d] - dist.means[i][d]) * (-dist.log_stds[i][d]).exp();
            quad += z * z;
        }
    }
    let norm: f64 = dist.log_stds.iter().flatten().sum();
    let norm = (norm + t as f64 * (2.0 * PI).ln()) * -1.0;
    let gauss = quad * -0.5 + norm;
    let gl: f64 = grips
        .iter()
        .zip(&dist.grip_logits)
        .map(|(&g, &l)| if g { l } else { 0.0 * l })
        .sum();
    let sp: f64 = dist.grip_logits.iter().map(|&l| softplus(l)).sum();
    Ok(gauss + (gl - sp))
}

pub fn logprob_of(dist: &ActionChunkDistribution, actions: &[ActionPose]) -> Result<f64> {
    let raw: Vec<[f64; 2]> = actions.iter().map(|a| a.target()).collect();
    let grips: Vec<bool> = actions.iter().map(|a| a.grip).collect();
    logprob_raw(dist, &raw, &grips)
}

/// Anything that can emit the next chunk of actions in the ground-truth env.
/// Learned policies use only `history`; scripted ones may read `state`.
pub trait ChunkPolicy: Sync {
    fn act(&self, history: &[Frame], state: &EnvState, seed: u64) -> Result<Vec<ActionPose>>;

    fn history_len(&self) -> usize;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    pub config: PolicyConfig,
    pub params: ParamSet,
}

impl Policy {
    pub fn new(config: PolicyConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        params.extend(Self::trunk_of(&config).init(&mut rng));
        params.extend(Self::mean_of(&config).init(&mut rng));
        params.extend(Self::grip_of(&config).init(&mut rng));
        params.insert(LOGSTD, Tensor::filled(&[2 * config.chunk_len], config.logstd_init));
        Ok(Self { config, params })
    }

    /// All network weights zero; log standard deviations at their initial value.
    pub fn zeros(config: PolicyConfig) -> Result<Self> {
        config.validate()?;
        let mut params = Self::trunk_of(&config).init_zeros();
        params.extend(Self::mean_of(&config).init_zeros());
        params.extend(Self::grip_of(&config).init_zeros());
        params.insert(LOGSTD, Tensor::filled(&[2 * config.chunk_len], config.logstd_init));
        Ok(Self { config, params })
    }

    fn trunk_of(c: &PolicyConfig) -> Mlp {
        Mlp::new("trunk", c.trunk_spec()).expect("validated widths")
    }

    fn mean_of(c: &PolicyConfig) -> Mlp {
        Mlp::new("mean", c.mean_spec()).expect("validated widths")
    }

    fn grip_of(c: &PolicyConfig) -> Mlp {
        Mlp::new("grip", c.grip_spec()).expect("validated widths")
    }

    pub fn trunk(&self) -> Mlp {
        Self::trunk_of(&self.config)
    }

    pub fn mean_head(&self) -> Mlp {
        Self::mean_of(&self.config)
    }

    pub fn grip_head(&self) -> Mlp {
        Self::grip_of(&self.config)
    }

    pub fn logstd(&self) -> &[f64] {
        self.params.get(LOGSTD).map_or(&[], |t| t.data())
    }

    fn history_row(&self, history: &[Frame]) -> Result<Vec<f64>> {
        if history.len() != self.config.history_len {
            return Err(Error::contract(format!(
                "expected {} history frames, got {}",
                self.config.history_len,
                history.len()
            )));
        }
        let mut row = Vec::with_capacity(history.len() * FRAME_LEN);
        for f in history {
            if f.data.len() != FRAME_LEN {
                return Err(Error::dim("history frame", FRAME_LEN, f.data.len()));
            }
            row.extend_from_slice(&f.data);
        }
        Ok(row)
    }

    pub fn forward(&self, history: &[Frame]) -> Result<ActionChunkDistribution> {
        let row = self.history_row(history)?;
        let mut d = self.forward_rows(&Tensor::row(row))?;
        Ok(d.pop().expect("one row"))
    }

    /// Distributions for each `[h * 768]` row of `hist`.
    pub fn forward_rows(&self, hist: &Tensor) -> Result<Vec<ActionChunkDistribution>> {
        let t = self.config.chunk_len;
        let feat = self.trunk().forward_batch(&self.params, hist)?;
        let means = self.mean_head().forward_batch(&self.params, &feat)?;
        let logits = self.grip_head().forward_batch(&self.params, &feat)?;
        let ls = self.logstd();
        if ls.len() != 2 * t {
            return Err(Error::dim("logstd", 2 * t, ls.len()));
        }
        let clamp = |v: f64| v.clamp(self.config.logstd_min, self.config.logstd_max);
        let log_stds: Vec<[f64; 2]> = ls.chunks(2).map(|p| [clamp(p[0]), clamp(p[1])]).collect();
        let stds: Vec<[f64; 2]> = log_stds.iter().map(|l| [l[0].exp(), l[1].exp()]).collect();
        Ok((0..hist.rows())
            .map(|i| {
                let m = &means.data()[i * 2 * t..(i + 1) * 2 * t];
                let l = &logits.data()[i * t..(i + 1) * t];
                ActionChunkDistribution {
                    means: m.chunks(2).map(|p| [p[0], p[1]]).collect(),
                    stds: stds.clone(),
                    log_stds: log_stds.clone(),
                    grip_probs: l.iter().map(|&v| sigmoid(v)).collect(),
                    grip_logits: l.to_vec(),
                }
            })
            .collect())
    }

    /// Per-row chunk log-probabilities `[B, 1]` recorded on `tape`.
    /// `raw` is `[B, 2T]` planar targets, `grips` is `[B, T]` of 0/1.
    pub fn logprob_on_tape(
        &self,
        tape: &mut Tape<'_>,
        vars: &ParamVars,
        hist: Var,
        raw: Var,
        grips: Var,
    ) -> Result<Var> {
        let t = self.config.chunk_len;
        let feat = self.trunk().forward_tape(tape, vars, hist)?;
        let mu = self.mean_head().forward_tape(tape, vars, feat)?;
        let logit = self.grip_head().forward_tape(tape, vars, feat)?;
        let ls = vars
            .get(LOGSTD)
            .ok_or_else(|| Error::contract("logstd not on tape"))?;
        let ls = tape.clamp(ls, self.config.logstd_min, self.config.logstd_max);
        let neg = tape.scale(ls, -1.0);
        let inv_std = tape.exp(neg);
        let diff = tape.sub(raw, mu)?;
        let z = tape.mul_row(diff, inv_std)?;
        let sq = tape.square(z);
        let quad = tape.row_sum(sq);
        let quad = tape.scale(quad, -0.5);
        let norm = tape.sum(ls);
        let norm = tape.offset(norm, t as f64 * (2.0 * PI).ln());
        let norm = tape.scale(norm, -1.0);
        let gauss = tape.add_row(quad, norm)?;
        let gl = tape.mul(grips, logit)?;
        let gl = tape.row_sum(gl);
        let sp = tape.softplus(logit);
        let sp = tape.row_sum(sp);
        let bern = tape.sub(gl, sp)?;
        tape.add(gauss, bern)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_params(dir.join(CHECKPOINT_FILE), &self.params)?;
        let side = dir.join(SIDECAR_FILE);
        let json = serde_json::to_string_pretty(&self.config).map_err(|e| Error::json(&side, e))?;
        fs::write(&side, json).map_err(|e| Error::io(&side, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let side = dir.join(SIDECAR_FILE);
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let config: PolicyConfig = serde_json::from_str(&text).map_err(|e| Error::json(&side, e))?;
        let expected = Self::zeros(config.clone())?;
        let params = load_params(dir.join(CHECKPOINT_FILE))?;
        for (name, t) in expected.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(Error::dim(format!("checkpoint tensor {name}"), t.len(), p.len()))
                }
                None => return Err(Error::contract(format!("checkpoint lacks tensor {name}"))),
            }
        }
        if params.len() != expected.params.len() {
            return Err(Error::contract("checkpoint carries unexpected tensors"));
        }
        Ok(Self { config, params })
    }
}

impl ChunkPolicy for Policy {
    fn act(&self, history: &[Frame], _state: &EnvState, seed: u64) -> Result<Vec<ActionPose>> {
        Ok(sample_actions(&self.forward(history)?, seed).actions)
    }

    fn history_len(&self) -> usize {
        self.config.history_len
    }
}

/// Tensors for a batch of (history, chunk) pairs.
pub struct ChunkBatch {
    pub history: Tensor,
    pub raw: Tensor,
    pub grips: Tensor,
}

impl ChunkBatch {
    pub fn new(histories: Vec<f64>, raw: Vec<f64>, grips: Vec<f64>, cfg: &PolicyConfig) -> Result<Self> {
        let hd = cfg.history_len * FRAME_LEN;
        let b = histories.len() / hd.max(1);
        Ok(Self {
            history: Tensor::matrix(b, hd, histories)?,
            raw: Tensor::matrix(b, 2 * cfg.chunk_len, raw)?,
            grips: Tensor::matrix(b, cfg.chunk_len, grips)?,
        })
    }

    pub fn len(&self) -> usize {
        self.history.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Mean negative log-likelihood of `batch` and its gradient.
pub fn nll_and_grad(policy: &Policy, batch: &ChunkBatch) -> Result<(f64, ParamSet)> {
    grad(&policy.params, |tape, vars| {
        let h = tape.constant(batch.history.clone());
        let r = tape.constant(batch.raw.clone());
        let g = tape.constant(batch.grips.clone());
        let lp = policy.logprob_on_tape(tape, vars, h, r, g)?;
        let m = tape.mean(lp);
        Ok(tape.scale(m, -1.0))
    })
}

fn bc_windows(ds: &SansDataset, chunk_len: usize) -> Vec<(usize, usize)> {
    ds.records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.outcome == Outcome::Success)
        .flat_map(|(i, r)| (0..(r.len() + 1).saturating_sub(chunk_len)).map(move |s| (i, s)))
        .collect()
}

/// Behavior cloning on the success records of `ds`. Returns the per-step NLL.
pub fn bc_train(policy: &mut Policy, ds: &SansDataset, steps: usize, lr: f64, seed: u64) -> Result<Vec<f64>> {
    let cfg = policy.config.clone();
    let windows = bc_windows(ds, cfg.chunk_len);
    if windows.is_empty() {
        return Err(Error::contract("behavior cloning needs at least one success record"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = AdamState::new();
    let adam_cfg = AdamConfig::with_lr(lr);
    let mut curve = Vec::with_capacity(steps);
    for step in 0..steps {
        let mut hist = Vec::new();
        let mut raw = Vec::new();
        let mut grips = Vec::new();
        for _ in 0..cfg.batch_size {
            let (ri, s) = windows[rng.random_range(0..windows.len())];
            let r = &ds.records[ri];
            for f in history_at(&r.frames, s, cfg.history_len) {
                hist.extend_from_slice(&f.data);
            }
            for a in &r.actions[s..s + cfg.chunk_len] {
                raw.extend_from_slice(&a.target());
                grips.push(if a.grip { 1.0 } else { 0.0 });
            }
        }
        let batch = ChunkBatch::new(hist, raw, grips, &cfg)?;
        let (loss, g) = nll_and_grad(policy, &batch)?;
        if !loss.is_finite() {
            return Err(Error::numeric(format!("behavior-cloning loss not finite at step {step}")));
        }
        adam_update(&mut policy.params, &g, &mut adam, &adam_cfg)?;
        curve.push(loss);
    }
    Ok(curve)
}

/// One ground-truth episode driven chunk by chunk.
pub fn run_chunked_episode(env: &Env, start: EnvState, policy: &dyn ChunkPolicy, seed: u64) -> Result<Episode> {
    let h = policy.history_len();
    let mut states = vec![start];
    let mut frames = vec![render(&start, env.task.goal_radius)];
    let mut actions = Vec::with_capacity(env.task.horizon);
    let mut rewards = Vec::with_capacity(env.task.horizon);
    let mut s = start;
    let mut chunk = 0u64;
    while s.step_index < env.task.horizon {
        let hist = history_at(&frames, frames.len() - 1, h);
        let acts = policy.act(&hist, &s, derive_seed(seed, "policy/chunk", chunk))?;
        if acts.is_empty() {
            return Err(Error::contract("policy returned an empty chunk"));
        }
        chunk += 1;
        for a in acts {
            if s.step_index >= env.task.horizon {
                break;
            }
            let (n, r) = env.step(&s, &a)?;
            actions.push(a);
            rewards.push(r);
            states.push(n);
            frames.push(render(&n, env.task.goal_radius));
            s = n;
        }
    }
    Ok(Episode {
        states,
        actions,
        rewards,
    })
}

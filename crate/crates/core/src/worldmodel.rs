//! Action-conditioned flow-matching frame predictor with a reward head.
//!
//! The denoiser predicts the clean chunk `D` from the interpolant
//! `z = (1 - tau) x0 + tau x1`; the velocity is `v = (D - z) / (1 - tau)`, so
//! the one-step estimate `z + (1 - tau) v` is exactly `D`.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::env::{ActionPose, Frame, FRAME_LEN};
use crate::error::{Error, Result};
use crate::numerics::{
    adam_update, grad_filtered, load_params, save_params, sigmoid, Activation, AdamConfig,
    AdamState, Mlp, MlpSpec, ParamSet, Tape, Tensor, Var,
};
use crate::sans::SansDataset;
use crate::seed::derive_seed;

pub const ACTION_DIM: usize = 3;
pub const CHECKPOINT_FILE: &str = "worldmodel.ckpt";
pub const SIDECAR_FILE: &str = "worldmodel.json";
/// Smallest `1 - tau` used when converting a clean-chunk prediction to a velocity.
const MIN_REMAINING: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldModelConfig {
    pub history_len: usize,
    pub chunk_len: usize,
    pub denoiser_hidden: Vec<usize>,
    pub embedder_hidden: Vec<usize>,
    /// Width of one action's embedding; the conditioning vector is `chunk_len` times this.
    pub action_embed_dim: usize,
    pub reward_hidden: Vec<usize>,
    pub euler_steps: usize,
    pub lambda0: f64,
    pub reward_threshold: f64,
    pub enable_reward_head: bool,
    pub max_chunks: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub train_steps: usize,
    pub pretrain_steps: usize,
}

impl Default for WorldModelConfig {
    fn default() -> Self {
        Self {
            history_len: 2,
            chunk_len: 8,
            denoiser_hidden: vec![512, 512],
            embedder_hidden: vec![32],
            action_embed_dim: 16,
            reward_hidden: vec![64],
            euler_steps: 10,
            lambda0: 0.1,
            reward_threshold: 0.9,
            enable_reward_head: true,
            max_chunks: 5,
            batch_size: 32,
            lr: 1e-3,
            train_steps: 1000,
            pretrain_steps: 4000,
        }
    }
}

impl WorldModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |k: &str, m: &str| Err(Error::Config(format!("wm.{k} {m}")));
        if self.history_len == 0 {
            return fail("history_len", "must be at least 1");
        }
        if self.chunk_len == 0 {
            return fail("chunk_len", "must be at least 1");
        }
        if self.euler_steps == 0 {
            return fail("euler_steps", "must be at least 1");
        }
        if self.action_embed_dim < 2 || self.action_embed_dim % 2 != 0 {
            return fail("action_embed_dim", "must be an even number of at least 2");
        }
        if self.denoiser_hidden.iter().chain(&self.embedder_hidden).chain(&self.reward_hidden).any(|&w| w == 0) {
            return fail("denoiser_hidden", "hidden widths must be positive");
        }
        if !(self.lambda0 >= 0.0 && self.lambda0.is_finite()) {
            return fail("lambda0", "must be a finite non-negative number");
        }
        if !(self.reward_threshold > 0.0 && self.reward_threshold < 1.0) {
            return fail("reward_threshold", "must lie strictly between 0 and 1");
        }
        if self.max_chunks == 0 {
            return fail("max_chunks", "must be at least 1");
        }
        if self.batch_size == 0 {
            return fail("batch_size", "must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail("lr", "must be positive");
        }
        Ok(())
    }

    pub fn chunk_dim(&self) -> usize {
        self.chunk_len * FRAME_LEN
    }

    pub fn history_dim(&self) -> usize {
        self.history_len * FRAME_LEN
    }

    pub fn cond_dim(&self) -> usize {
        self.chunk_len * self.action_embed_dim
    }

    fn denoiser_spec(&self) -> MlpSpec {
        let mut w = vec![self.chunk_dim() + self.cond_dim() + self.history_dim()];
        w.extend(&self.denoiser_hidden);
        w.push(self.chunk_dim());
        MlpSpec::uniform(w, Activation::Relu, Activation::Identity)
    }

    fn embedder_spec(&self) -> MlpSpec {
        let mut w = vec![ACTION_DIM];
        w.extend(&self.embedder_hidden);
        w.push(self.action_embed_dim);
        MlpSpec::uniform(w, Activation::Tanh, Activation::Identity)
    }

    fn reward_spec(&self) -> MlpSpec {
        let mut w = vec![FRAME_LEN];
        w.extend(&self.reward_hidden);
        w.push(1);
        MlpSpec::uniform(w, Activation::Relu, Activation::Identity)
    }
}

/// Reward-loss weight at flow time `tau`: zero at pure noise, `lambda0` at data.
pub fn reward_weight(lambda0: f64, tau: f64) -> f64 {
    lambda0 * tau * tau
}

/// Sinusoidal flow-time features of width `dim` (even).
pub fn time_embedding(tau: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = if half > 1 {
            (1000f64.ln() * i as f64 / (half - 1) as f64).exp()
        } else {
            1.0
        };
        out[2 * i] = (tau * freq).sin();
        out[2 * i + 1] = (tau * freq).cos();
    }
    out
}

/// Generated chunks of an autoregressive rollout.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutResult {
    pub frames: Vec<Frame>,
    pub reward_trace: Vec<f64>,
    pub success: bool,
    pub chunks_executed: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    /// Unweighted `mean_b ||v - u||^2`.
    pub flow: f64,
    /// `mean_b sum_t (r_hat - r)^2`, before the flow-time weighting.
    pub reward: f64,
}

/// One training batch of contiguous `h + T` windows.
#[derive(Clone, Debug)]
pub struct TrainBatch {
    /// `[B, h * 768]`.
    pub history: Tensor,
    /// `B * T` actions, row-major.
    pub actions: Vec<ActionPose>,
    /// `[B, T * 768]`.
    pub target: Tensor,
    /// `[B, T]` reward bits of the target frames.
    pub rewards: Tensor,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.history.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Flow times and source noise for one batch.
#[derive(Clone, Debug)]
pub struct FlowDraw {
    pub tau: Vec<f64>,
    /// `[B, T * 768]`.
    pub noise: Tensor,
}

impl FlowDraw {
    pub fn sample(batch: usize, chunk_dim: usize, rng: &mut impl Rng) -> Self {
        let tau = (0..batch).map(|_| rng.random::<f64>()).collect();
        let noise = (0..batch * chunk_dim).map(|_| rng.sample(StandardNormal)).collect();
        Self {
            tau,
            noise: Tensor::matrix(batch, chunk_dim, noise).expect("sized"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldModel {
    pub config: WorldModelConfig,
    pub params: ParamSet,
}

impl WorldModel {
    /// Random initialization. The denoiser's output layer starts at zero, so
    /// the untrained model samples blank frames.
    pub fn new(config: WorldModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let den = Self::denoiser_of(&config);
        params.extend(den.init(&mut rng));
        let last = den.spec.layers() - 1;
        for name in [den.weight_name(last), den.bias_name(last)] {
            let t = params.get_mut(&name).expect("initialized");
            t.data_mut().fill(0.0);
        }
        params.extend(Self::embedder_of(&config).init(&mut rng));
        params.extend(Self::reward_of(&config).init(&mut rng));
        Ok(Self { config, params })
    }

    /// All parameters zero.
    pub fn zeros(config: WorldModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = Self::denoiser_of(&config).init_zeros();
        params.extend(Self::embedder_of(&config).init_zeros());
        params.extend(Self::reward_of(&config).init_zeros());
        Ok(Self { config, params })
    }

    fn denoiser_of(c: &WorldModelConfig) -> Mlp {
        Mlp::new("denoiser", c.denoiser_spec()).expect("validated widths")
    }

    fn embedder_of(c: &WorldModelConfig) -> Mlp {
        Mlp::new("embedder", c.embedder_spec()).expect("validated widths")
    }

    fn reward_of(c: &WorldModelConfig) -> Mlp {
        Mlp::new("reward", c.reward_spec()).expect("validated widths")
    }

    pub fn denoiser(&self) -> Mlp {
        Self::denoiser_of(&self.config)
    }

    pub fn embedder(&self) -> Mlp {
        Self::embedder_of(&self.config)
    }

    pub fn reward_head(&self) -> Mlp {
        Self::reward_of(&self.config)
    }

    pub fn is_reward_param(name: &str) -> bool {
        name.starts_with("reward.")
    }

    /// Concatenated per-action embeddings, `T * action_embed_dim` long.
    pub fn embed_actions(&self, actions: &[ActionPose]) -> Result<Vec<f64>> {
        self.check_actions(actions.len())?;
        Ok(self.embed_action_rows(actions)?.into_data())
    }

    fn check_actions(&self, n: usize) -> Result<()> {
        if n != self.config.chunk_len {
            return Err(Error::contract(format!(
                "expected {} actions, got {n}",
                self.config.chunk_len
            )));
        }
        Ok(())
    }

    fn action_matrix(actions: &[ActionPose]) -> Tensor {
        let data = actions.iter().flat_map(|a| a.to_array()).collect();
        Tensor::matrix(actions.len(), ACTION_DIM, data).expect("sized")
    }

    /// `[n, e]` embeddings of `n` actions.
    fn embed_action_rows(&self, actions: &[ActionPose]) -> Result<Tensor> {
        self.embedder().forward_batch(&self.params, &Self::action_matrix(actions))
    }

    pub fn predict_reward(&self, frame: &Frame) -> Result<f64> {
        let logit = self.reward_head().forward(&self.params, &frame.data)?;
        Ok(sigmoid(logit[0]))
    }

    fn predict_rewards(&self, frames: &Tensor) -> Result<Vec<f64>> {
        let logits = self.reward_head().forward_batch(&self.params, frames)?;
        Ok(logits.data().iter().map(|&l| sigmoid(l)).collect())
    }

    pub fn classify_success(&self, trace: &[f64]) -> Result<bool> {
        classify_success(trace, self.config.reward_threshold)
    }

    fn check_history(&self, history: &[Frame]) -> Result<()> {
        if history.len() != self.config.history_len {
            return Err(Error::contract(format!(
                "expected {} history frames, got {}",
                self.config.history_len,
                history.len()
            )));
        }
        if let Some(f) = history.iter().find(|f| f.data.len() != FRAME_LEN) {
            return Err(Error::dim("history frame", FRAME_LEN, f.data.len()));
        }
        Ok(())
    }

    /// Clean-chunk prediction for each row: `z [B, TF]`, `cond [B, Te]`
    /// (action part only), `hist [B, hF]`.
    fn denoise(&self, z: &Tensor, tau: &[f64], cond: &Tensor, hist: &Tensor) -> Result<Tensor> {
        let c = &self.config;
        let (b, cd, hd, td) = (z.rows(), c.chunk_dim(), c.history_dim(), c.cond_dim());
        let width = cd + td + hd;
        let mut input = Vec::with_capacity(b * width);
        for i in 0..b {
            input.extend_from_slice(&z.data()[i * cd..(i + 1) * cd]);
            let temb = time_embedding(tau[i], td);
            input.extend(cond.data()[i * td..(i + 1) * td].iter().zip(&temb).map(|(a, t)| a + t));
            input.extend_from_slice(&hist.data()[i * hd..(i + 1) * hd]);
        }
        let input = Tensor::matrix(b, width, input)?;
        self.denoiser().forward_batch(&self.params, &input)
    }

    /// Velocity field `v(z, tau, cond)` for a single chunk.
    pub fn velocity(&self, z: &[f64], tau: f64, history: &[Frame], actions: &[ActionPose]) -> Result<Vec<f64>> {
        self.check_history(history)?;
        self.check_actions(actions.len())?;
        let cd = self.config.chunk_dim();
        if z.len() != cd {
            return Err(Error::dim("noisy chunk", cd, z.len()));
        }
        let cond = self.embed_action_rows(actions)?.reshaped(vec![1, self.config.cond_dim()])?;
        let hist = history_tensor(&[history.to_vec()])?;
        let d = self.denoise(&Tensor::row(z.to_vec()), &[tau], &cond, &hist)?;
        let rem = (1.0 - tau).max(MIN_REMAINING);
        Ok(d.data().iter().zip(z).map(|(d, z)| (d - z) / rem).collect())
    }

    /// Euler-integrates the flow from seeded noise to `tau = 1`.
    pub fn sample_chunk(
        &self,
        history: &[Frame],
        actions: &[ActionPose],
        seed: u64,
    ) -> Result<(Vec<Frame>, Vec<f64>)> {
        let mut out = self.sample_chunks(&[history.to_vec()], &[actions.to_vec()], &[seed])?;
        Ok(out.pop().expect("one chunk"))
    }

    /// Batched [`Self::sample_chunk`]; row `i` depends only on its own inputs.
    pub fn sample_chunks(
        &self,
        histories: &[Vec<Frame>],
        actions: &[Vec<ActionPose>],
        seeds: &[u64],
    ) -> Result<Vec<(Vec<Frame>, Vec<f64>)>> {
        let b = histories.len();
        if actions.len() != b || seeds.len() != b {
            return Err(Error::contract("sample_chunks inputs differ in length"));
        }
        if b == 0 {
            return Ok(Vec::new());
        }
        for (h, a) in histories.iter().zip(actions) {
            self.check_history(h)?;
            self.check_actions(a.len())?;
        }
        let c = &self.config;
        let cd = c.chunk_dim();
        let flat: Vec<ActionPose> = actions.iter().flatten().copied().collect();
        let cond = self.embed_action_rows(&flat)?.reshaped(vec![b, c.cond_dim()])?;
        let hist = history_tensor(histories)?;
        let mut x = Vec::with_capacity(b * cd);
        for &s in seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            x.extend((0..cd).map(|_| rng.sample::<f64, _>(StandardNormal)));
        }
        let k = c.euler_steps;
        let dt = 1.0 / k as f64;
        for step in 0..k {
            let tau = step as f64 * dt;
            let z = Tensor::matrix(b, cd, x)?;
            let d = self.denoise(&z, &vec![tau; b], &cond, &hist)?;
            let rem = (1.0 - tau).max(MIN_REMAINING);
            x = z
                .into_data()
                .into_iter()
                .zip(d.data())
                .map(|(z, d)| z + dt * (d - z) / rem)
                .collect();
        }
        for v in &mut x {
            *v = v.clamp(0.0, 1.0);
        }
        let rewards = self.predict_rewards(&Tensor::matrix(b * c.chunk_len, FRAME_LEN, x.clone())?)?;
        Ok((0..b)
            .map(|i| {
                let frames = x[i * cd..(i + 1) * cd]
                    .chunks(FRAME_LEN)
                    .map(|f| Frame { data: f.to_vec() })
                    .collect();
                (frames, rewards[i * c.chunk_len..(i + 1) * c.chunk_len].to_vec())
            })
            .collect())
    }

    /// Autoregressive rollout fed by `action_source`, stopping early once the
    /// reward trace crosses the threshold at a chunk boundary. With the reward
    /// head disabled it always runs `max_chunks` chunks and reports failure.
    pub fn rollout(
        &self,
        initial: &[Frame],
        mut action_source: impl FnMut(&[Frame]) -> Vec<ActionPose>,
        max_chunks: usize,
        seed: u64,
    ) -> Result<RolloutResult> {
        let mut out = self.rollout_batch(&[initial.to_vec()], &[seed], max_chunks, |_, h| {
            Ok(action_source(h))
        })?;
        Ok(out.pop().expect("one rollout"))
    }

    /// Runs independent rollouts in lockstep so every chunk is one batched
    /// sample. `action_source(member, history)` is called in member order.
    pub fn rollout_batch(
        &self,
        initial: &[Vec<Frame>],
        seeds: &[u64],
        max_chunks: usize,
        mut action_source: impl FnMut(usize, &[Frame]) -> Result<Vec<ActionPose>>,
    ) -> Result<Vec<RolloutResult>> {
        if initial.len() != seeds.len() {
            return Err(Error::contract("rollout_batch: one seed per start"));
        }
        let h = self.config.history_len;
        let mut windows: Vec<Vec<Frame>> = initial.to_vec();
        let mut results: Vec<RolloutResult> = initial
            .iter()
            .map(|_| RolloutResult {
                frames: Vec::new(),
                reward_trace: Vec::new(),
                success: false,
                chunks_executed: 0,
            })
            .collect();
        let mut active: Vec<usize> = (0..initial.len()).collect();
        for chunk in 0..max_chunks {
            if active.is_empty() {
                break;
            }
            let mut acts = Vec::with_capacity(active.len());
            for &m in &active {
                acts.push(action_source(m, &windows[m])?);
            }
            let hists: Vec<Vec<Frame>> = active.iter().map(|&m| windows[m].clone()).collect();
            let chunk_seeds: Vec<u64> = active
                .iter()
                .map(|&m| derive_seed(seeds[m], "wm/chunk", chunk as u64))
                .collect();
            let generated = self.sample_chunks(&hists, &acts, &chunk_seeds)?;
            let mut still = Vec::with_capacity(active.len());
            for (&m, (frames, rewards)) in active.iter().zip(generated) {
                let r = &mut results[m];
                r.frames.extend(frames.iter().cloned());
                r.reward_trace.extend(rewards);
                r.chunks_executed += 1;
                let mut w = std::mem::take(&mut windows[m]);
                w.extend(frames);
                windows[m] = w.split_off(w.len() - h);
                // A disabled head was never trained, so its trace neither
                // judges success nor stops the rollout.
                r.success = self.config.enable_reward_head && self.classify_success(&r.reward_trace)?;
                if !r.success {
                    still.push(m);
                }
            }
            active = still;
        }
        Ok(results)
    }

    /// Records the full objective on `tape`; returns `(objective, flow, reward)`
    /// where `flow`/`reward` are the unweighted report values.
    fn objective(
        &self,
        tape: &mut Tape<'_>,
        vars: &crate::numerics::ParamVars,
        batch: &TrainBatch,
        draw: &FlowDraw,
    ) -> Result<(Var, f64, f64)> {
        let c = &self.config;
        let b = batch.len();
        let (cd, td) = (c.chunk_dim(), c.cond_dim());
        if b == 0 {
            return Err(Error::contract("empty training batch"));
        }
        if batch.actions.len() != b * c.chunk_len
            || batch.target.len() != b * cd
            || batch.history.len() != b * c.history_dim()
            || batch.rewards.len() != b * c.chunk_len
            || draw.tau.len() != b
            || draw.noise.len() != b * cd
        {
            return Err(Error::contract("training batch parts disagree in size"));
        }
        let x1 = batch.target.data();
        let x0 = draw.noise.data();
        let mut z = Vec::with_capacity(b * cd);
        for i in 0..b {
            let t = draw.tau[i];
            let r = i * cd..(i + 1) * cd;
            z.extend(x0[r.clone()].iter().zip(&x1[r]).map(|(a, b)| (1.0 - t) * a + t * b));
        }
        let mut temb = Vec::with_capacity(b * td);
        for &t in &draw.tau {
            temb.extend(time_embedding(t, td));
        }

        let acts = tape.constant(Self::action_matrix(&batch.actions));
        let emb = self.embedder().forward_tape(tape, vars, acts)?;
        let emb = tape.reshape(emb, b, td)?;

        // The first layer is linear in its input, so the constant columns
        // (noisy chunk, time features, history) and the learned action
        // embedding are multiplied separately; only the latter needs an input
        // gradient.
        let hd = c.history_dim();
        let mut fixed = Vec::with_capacity(b * (cd + td + hd));
        for i in 0..b {
            fixed.extend_from_slice(&z[i * cd..(i + 1) * cd]);
            fixed.extend_from_slice(&temb[i * td..(i + 1) * td]);
            fixed.extend_from_slice(&batch.history.data()[i * hd..(i + 1) * hd]);
        }
        let fixed = tape.constant(Tensor::matrix(b, cd + td + hd, fixed)?);
        let den = self.denoiser();
        let w0 = vars
            .get(&den.weight_name(0))
            .ok_or_else(|| Error::contract("denoiser weights not on tape"))?;
        let b0 = vars
            .get(&den.bias_name(0))
            .ok_or_else(|| Error::contract("denoiser bias not on tape"))?;
        let w0_cond = tape.slice_cols(w0, cd, td)?;
        let pre_fixed = tape.matmul_t(fixed, w0)?;
        let pre_cond = tape.matmul_t(emb, w0_cond)?;
        let pre = tape.add(pre_fixed, pre_cond)?;
        let pre = tape.add_row(pre, b0)?;
        let h1 = c.denoiser_spec().activation(0).on_tape(tape, pre);
        let d = den.forward_tape_from(tape, vars, h1, 1)?;

        let target = tape.constant(batch.target.clone());
        let diff = tape.sub(d, target)?;
        let sq = tape.square(diff);
        let per_sample = tape.row_sum(sq);
        let flow_terms: Vec<f64> = tape.value(per_sample).data().to_vec();
        let flow_report = flow_terms
            .iter()
            .zip(&draw.tau)
            .map(|(e, t)| e / (1.0 - t).max(MIN_REMAINING).powi(2))
            .sum::<f64>()
            / b as f64;
        let flow_obj = tape.mean(per_sample);

        let frames = tape.reshape(d, b * c.chunk_len, FRAME_LEN)?;
        let logits = self.reward_head().forward_tape(tape, vars, frames)?;
        let r_hat = tape.sigmoid(logits);
        let r_hat = tape.reshape(r_hat, b, c.chunk_len)?;
        let labels = tape.constant(batch.rewards.clone());
        let rd = tape.sub(r_hat, labels)?;
        let rsq = tape.square(rd);
        let r_per = tape.row_sum(rsq);
        let reward_report = tape.value(r_per).data().iter().sum::<f64>() / b as f64;
        if !c.enable_reward_head || c.lambda0 == 0.0 {
            return Ok((flow_obj, flow_report, reward_report));
        }
        let w: Vec<f64> = draw.tau.iter().map(|&t| reward_weight(c.lambda0, t)).collect();
        let w = tape.constant(Tensor::matrix(b, 1, w)?);
        let weighted = tape.mul_col(r_per, w)?;
        let reward_obj = tape.mean(weighted);
        let total = tape.add(flow_obj, reward_obj)?;
        Ok((total, flow_report, reward_report))
    }

    /// Objective value, its gradient, and the report losses for a fixed draw.
    /// With the reward head disabled its parameters are absent from the gradient.
    pub fn loss_and_grad(&self, batch: &TrainBatch, draw: &FlowDraw) -> Result<(f64, ParamSet, StepLoss)> {
        let mut report = StepLoss {
            flow: f64::NAN,
            reward: f64::NAN,
        };
        let train_head = self.config.enable_reward_head;
        let (total, grads) = grad_filtered(
            &self.params,
            |n| train_head || !Self::is_reward_param(n),
            |tape, vars| {
                let (obj, flow, reward) = self.objective(tape, vars, batch, draw)?;
                report = StepLoss { flow, reward };
                Ok(obj)
            },
        )?;
        Ok((total, grads, report))
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
        let config: WorldModelConfig = serde_json::from_str(&text).map_err(|e| Error::json(&side, e))?;
        config.validate()?;
        let params = load_params(dir.join(CHECKPOINT_FILE))?;
        let expected = Self::zeros(config.clone())?;
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

pub fn classify_success(trace: &[f64], threshold: f64) -> Result<bool> {
    if trace.is_empty() {
        return Err(Error::contract("cannot classify an empty reward trace"));
    }
    Ok(trace.iter().copied().fold(f64::NEG_INFINITY, f64::max) > threshold)
}

fn history_tensor(histories: &[Vec<Frame>]) -> Result<Tensor> {
    let h = histories.first().map_or(0, |h| h.len());
    let data: Vec<f64> = histories
        .iter()
        .flat_map(|hs| hs.iter().flat_map(|f| f.data.iter().copied()))
        .collect();
    Tensor::matrix(histories.len(), h * FRAME_LEN, data)
}

/// Initial history for a rollout from frame `f0`: `h` copies.
pub fn initial_history(f0: &Frame, h: usize) -> Vec<Frame> {
    vec![f0.clone(); h]
}

/// History frames ending at frame `s`, padding before the start with frame 0.
pub fn history_at(frames: &[Frame], s: usize, h: usize) -> Vec<Frame> {
    (0..h)
        .map(|j| frames[(s + 1 + j).saturating_sub(h)].clone())
        .collect()
}

/// `(record, start)` pairs of every window with `T` future frames.
pub fn training_windows(ds: &SansDataset, chunk_len: usize) -> Vec<(usize, usize)> {
    ds.records
        .iter()
        .enumerate()
        .flat_map(|(i, r)| {
            let n = r.len();
            (0..(n + 1).saturating_sub(chunk_len)).map(move |s| (i, s))
        })
        .collect()
}

pub fn gather_batch(ds: &SansDataset, windows: &[(usize, usize)], cfg: &WorldModelConfig) -> Result<TrainBatch> {
    let (h, t) = (cfg.history_len, cfg.chunk_len);
    let b = windows.len();
    let mut history = Vec::with_capacity(b * cfg.history_dim());
    let mut target = Vec::with_capacity(b * cfg.chunk_dim());
    let mut actions = Vec::with_capacity(b * t);
    let mut rewards = Vec::with_capacity(b * t);
    for &(ri, s) in windows {
        let r = ds
            .records
            .get(ri)
            .ok_or_else(|| Error::contract(format!("window references record {ri}")))?;
        if s + t > r.len() {
            return Err(Error::contract(format!("window at {s} overruns record {ri}")));
        }
        for f in history_at(&r.frames, s, h) {
            history.extend_from_slice(&f.data);
        }
        for f in &r.frames[s + 1..=s + t] {
            target.extend_from_slice(&f.data);
        }
        actions.extend_from_slice(&r.actions[s..s + t]);
        rewards.extend(r.rewards[s..s + t].iter().map(|&x| f64::from(x)));
    }
    Ok(TrainBatch {
        history: Tensor::matrix(b, cfg.history_dim(), history)?,
        actions,
        target: Tensor::matrix(b, cfg.chunk_dim(), target)?,
        rewards: Tensor::matrix(b, t, rewards)?,
    })
}

/// Adam state plus the sampling stream for a training run.
#[derive(Clone, Debug)]
pub struct WmTrainer {
    pub adam: AdamState,
    pub adam_config: AdamConfig,
    rng: ChaCha8Rng,
}

impl WmTrainer {
    pub fn new(lr: f64, seed: u64) -> Self {
        Self {
            adam: AdamState::new(),
            adam_config: AdamConfig::with_lr(lr),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// One joint update on `batch`. A non-finite loss leaves the model untouched.
    pub fn train_step(&mut self, model: &mut WorldModel, batch: &TrainBatch) -> Result<StepLoss> {
        let draw = FlowDraw::sample(batch.len(), model.config.chunk_dim(), &mut self.rng);
        let (total, grads, report) = model.loss_and_grad(batch, &draw)?;
        if !total.is_finite() || !report.flow.is_finite() {
            return Err(Error::numeric(format!(
                "world-model loss not finite (objective {total}, flow {}, reward {}) at update {}",
                report.flow, report.reward, self.adam.step_count
            )));
        }
        adam_update(&mut model.params, &grads, &mut self.adam, &self.adam_config)?;
        Ok(report)
    }

    /// `steps` updates on uniformly drawn windows of `ds`.
    pub fn fit(
        &mut self,
        model: &mut WorldModel,
        ds: &SansDataset,
        steps: usize,
        mut on_step: impl FnMut(usize, &StepLoss),
    ) -> Result<Vec<StepLoss>> {
        let windows = training_windows(ds, model.config.chunk_len);
        if windows.is_empty() && steps > 0 {
            return Err(Error::contract("dataset has no complete training windows"));
        }
        let mut curve = Vec::with_capacity(steps);
        for step in 0..steps {
            let pick: Vec<(usize, usize)> = (0..model.config.batch_size)
                .map(|_| windows[self.rng.random_range(0..windows.len())])
                .collect();
            let batch = gather_batch(ds, &pick, &model.config)?;
            let loss = self.train_step(model, &batch)?;
            on_step(step, &loss);
            curve.push(loss);
        }
        Ok(curve)
    }
}

/// Trains `model` on `ds` for `steps` updates from a fresh optimizer state.
pub fn train(model: &mut WorldModel, ds: &SansDataset, steps: usize, seed: u64) -> Result<Vec<StepLoss>> {
    WmTrainer::new(model.config.lr, seed).fit(model, ds, steps, |_, _| {})
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{render, Env, TaskSpec};

    fn tiny() -> WorldModelConfig {
        WorldModelConfig {
            chunk_len: 2,
            denoiser_hidden: vec![8],
            embedder_hidden: vec![4],
            action_embed_dim: 4,
            reward_hidden: vec![4],
            euler_steps: 3,
            max_chunks: 3,
            batch_size: 2,
            ..WorldModelConfig::default()
        }
    }

    fn start() -> Vec<Frame> {
        let env = Env::new(TaskSpec::reference());
        initial_history(&render(&env.reset(1), env.task.goal_radius), 2)
    }

    fn hold(n: usize) -> Vec<ActionPose> {
        vec![ActionPose::new(0.5, 0.1, false); n]
    }

    /// Forces every predicted reward to sigmoid(bias).
    fn with_reward_bias(mut wm: WorldModel, bias: f64) -> WorldModel {
        let head = wm.reward_head();
        let last = head.spec.layers() - 1;
        wm.params.get_mut(&head.weight_name(last)).unwrap().data_mut().fill(0.0);
        wm.params.get_mut(&head.bias_name(last)).unwrap().data_mut().fill(bias);
        wm
    }

    #[test]
    fn reward_weight_endpoints() {
        assert_eq!(reward_weight(0.1, 0.0), 0.0);
        assert_eq!(reward_weight(0.1, 1.0), 0.1);
        assert_eq!(reward_weight(0.1, 0.5), 0.025);
    }

    #[test]
    fn threshold_is_strict() {
        assert!(!classify_success(&[0.2, 0.9], 0.9).unwrap());
        assert!(classify_success(&[0.2, 0.9000001], 0.9).unwrap());
        assert!(classify_success(&[], 0.9).is_err());
    }

    #[test]
    fn history_pads_with_first_frame() {
        let frames: Vec<Frame> = (0..4)
            .map(|i| Frame::from_data(vec![i as f64 / 4.0; FRAME_LEN]).unwrap())
            .collect();
        let h = history_at(&frames, 0, 3);
        assert_eq!(h, vec![frames[0].clone(), frames[0].clone(), frames[0].clone()]);
        let h = history_at(&frames, 3, 2);
        assert_eq!(h, vec![frames[2].clone(), frames[3].clone()]);
    }

    #[test]
    fn fresh_model_samples_blank_frames() {
        // Zero output layer: D = 0, so the last Euler step lands on 0 up to rounding.
        let wm = WorldModel::new(tiny(), 3).unwrap();
        let (frames, rewards) = wm.sample_chunk(&start(), &hold(2), 9).unwrap();
        assert_eq!(frames.len(), 2);
        assert!(frames.iter().all(|f| f.data.iter().all(|&v| v.abs() < 1e-12)));
        assert_eq!(rewards.len(), 2);
    }

    #[test]
    fn batched_rows_match_single_calls() {
        let mut wm = WorldModel::new(tiny(), 4).unwrap();
        for (_, t) in wm.params.iter_mut() {
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v += 0.01 * ((i % 7) as f64 - 3.0);
            }
        }
        let hs = vec![start(), start()];
        let acts = vec![hold(2), vec![ActionPose::new(0.2, 0.8, true); 2]];
        let batch = wm.sample_chunks(&hs, &acts, &[5, 6]).unwrap();
        for i in 0..2 {
            let single = wm.sample_chunk(&hs[i], &acts[i], [5, 6][i]).unwrap();
            for (a, b) in single.0.iter().zip(&batch[i].0) {
                for (x, y) in a.data.iter().zip(&b.data) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn confident_head_stops_after_one_chunk() {
        let wm = with_reward_bias(WorldModel::new(tiny(), 1).unwrap(), 10.0);
        let r = wm.rollout(&start(), |_| hold(2), 3, 0).unwrap();
        assert!(r.success);
        assert_eq!(r.chunks_executed, 1);
        assert_eq!(r.frames.len(), 2);
    }

    #[test]
    fn disabled_head_runs_full_length_and_fails() {
        let mut cfg = tiny();
        cfg.enable_reward_head = false;
        let wm = with_reward_bias(WorldModel::new(cfg, 1).unwrap(), 10.0);
        let r = wm.rollout(&start(), |_| hold(2), 3, 0).unwrap();
        assert!(!r.success);
        assert_eq!(r.chunks_executed, 3);
        assert_eq!(r.reward_trace.len(), 6);
    }

    #[test]
    fn wrong_chunk_length_is_contract_error() {
        let wm = WorldModel::new(tiny(), 1).unwrap();
        assert!(matches!(wm.sample_chunk(&start(), &hold(3), 0), Err(Error::Contract(_))));
        assert!(matches!(wm.sample_chunk(&start()[..1], &hold(2), 0), Err(Error::Contract(_))));
    }

    #[test]
    fn disabled_head_gets_no_gradient() {
        let env = Env::new(TaskSpec::reference());
        let ep = crate::env::run_episode(&env, env.reset(2), |s| crate::env::expert_action(s, &env.task, [0.0, 0.0])).unwrap();
        let rec = crate::sans::TrajectoryRecord::from_episode(&env.task, &ep, crate::sans::Provenance::Expert, 2);
        let ds = SansDataset::new(vec![rec], 0).unwrap();
        let mut cfg = tiny();
        let batch = gather_batch(&ds, &[(0, 0), (0, 5)], &cfg).unwrap();
        let draw = FlowDraw::sample(2, cfg.chunk_dim(), &mut ChaCha8Rng::seed_from_u64(0));
        let (_, g_on, _) = WorldModel::new(cfg.clone(), 1).unwrap().loss_and_grad(&batch, &draw).unwrap();
        cfg.enable_reward_head = false;
        let (_, g_off, _) = WorldModel::new(cfg, 1).unwrap().loss_and_grad(&batch, &draw).unwrap();
        assert!(g_on.names().any(|n| WorldModel::is_reward_param(n)));
        assert!(!g_off.names().any(|n| WorldModel::is_reward_param(n)));
    }

    #[test]
    fn save_load_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let wm = WorldModel::new(tiny(), 8).unwrap();
        wm.save(dir.path()).unwrap();
        assert_eq!(WorldModel::load(dir.path()).unwrap(), wm);
    }
}

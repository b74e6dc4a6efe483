//! Run configuration: one JSON document with a section per component.
//!
//! Every field has a default, so `{}` is a complete config. Unknown keys are
//! rejected and all of them are listed in the error.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::env::TaskSpec;
use crate::error::{Error, Result};
use crate::policy::PolicyConfig;
use crate::rl::RlConfig;
use crate::seed::{SeedTree, DEFAULT_MASTER_SEED};
use crate::worldmodel::WorldModelConfig;

/// Overrides `output_dir` when set (a `--out` flag still wins).
pub const OUT_ENV: &str = "LOOPWORLD_OUT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SansConfig {
    pub n_success: usize,
    pub n_near: usize,
    /// Share of the iteration-0 dataset held out for evaluation.
    pub holdout_fraction: f64,
}

impl Default for SansConfig {
    fn default() -> Self {
        Self {
            n_success: 50,
            n_near: 50,
            holdout_fraction: 0.2,
        }
    }
}

/// The pool the shared world-model initialization is trained on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    /// Expert and near-success episodes per task variant.
    pub n_success: usize,
    pub n_near: usize,
    /// Noisy-expert episodes per task variant.
    pub n_explore: usize,
    /// Upper bound of the per-episode action noise std.
    pub explore_noise: f64,
    /// Upper bound of the per-episode gripper flip probability.
    pub explore_flip: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            n_success: 50,
            n_near: 50,
            n_explore: 200,
            explore_noise: 0.25,
            explore_flip: 0.15,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopConfig {
    /// Ground-truth episodes recorded per deployment phase.
    pub deploy_episodes: usize,
    /// SFT-policy episodes added to the curated SANS before iteration 0.
    pub seed_rollouts: usize,
    /// Ground-truth episodes per policy evaluation.
    pub eval_episodes: usize,
    /// Held-out records used for the alignment metrics.
    pub alignment_samples: usize,
    /// Learning rate of the per-iteration world-model fine-tune.
    pub finetune_lr: f64,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            deploy_episodes: 40,
            seed_rollouts: 40,
            eval_episodes: 200,
            alignment_samples: 20,
            finetune_lr: 3e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskSpec,
    pub wm: WorldModelConfig,
    pub policy: PolicyConfig,
    pub rl: RlConfig,
    pub sans: SansConfig,
    pub pretrain: PretrainConfig,
    #[serde(rename = "loop")]
    pub loop_: LoopConfig,
    pub output_dir: PathBuf,
    pub master_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: TaskSpec::reference(),
            wm: WorldModelConfig::default(),
            policy: PolicyConfig::default(),
            rl: RlConfig::default(),
            sans: SansConfig::default(),
            pretrain: PretrainConfig::default(),
            loop_: LoopConfig::default(),
            output_dir: PathBuf::from("runs"),
            master_seed: DEFAULT_MASTER_SEED,
        }
    }
}

impl RunConfig {
    pub fn seeds(&self) -> SeedTree {
        SeedTree::new(self.master_seed)
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.wm.validate()?;
        self.policy.validate()?;
        self.rl.validate()?;
        let fail = |k: &str, m: &str| Err(Error::Config(format!("{k} {m}")));
        if self.policy.chunk_len != self.wm.chunk_len {
            return fail("policy.chunk_len", "must equal wm.chunk_len");
        }
        if self.policy.history_len != self.wm.history_len {
            return fail("policy.history_len", "must equal wm.history_len");
        }
        if self.sans.n_success == 0 {
            return fail("sans.n_success", "must be at least 1 (SFT trains on successes)");
        }
        if !(self.sans.holdout_fraction > 0.0 && self.sans.holdout_fraction < 1.0) {
            return fail("sans.holdout_fraction", "must lie strictly between 0 and 1");
        }
        if self.pretrain.n_success + self.pretrain.n_near + self.pretrain.n_explore == 0 {
            return fail("pretrain.n_success", "pretraining pool would be empty");
        }
        if !(self.pretrain.explore_noise >= 0.0 && self.pretrain.explore_noise.is_finite()) {
            return fail("pretrain.explore_noise", "must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&self.pretrain.explore_flip) {
            return fail("pretrain.explore_flip", "must lie in [0, 1]");
        }
        if self.loop_.eval_episodes == 0 {
            return fail("loop.eval_episodes", "must be at least 1");
        }
        if self.loop_.alignment_samples == 0 {
            return fail("loop.alignment_samples", "must be at least 1");
        }
        if !(self.loop_.finetune_lr > 0.0 && self.loop_.finetune_lr.is_finite()) {
            return fail("loop.finetune_lr", "must be positive");
        }
        Ok(())
    }

    /// Applies `LOOPWORLD_OUT` if it is set and non-empty.
    pub fn with_env_overrides(mut self) -> Self {
        if let Some(dir) = std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()) {
            self.output_dir = PathBuf::from(dir);
        }
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Dotted paths of every key in `given` that has no counterpart in `known`.
fn unknown_keys(known: &Value, given: &Value, prefix: &str, out: &mut Vec<String>) {
    let (Value::Object(k), Value::Object(g)) = (known, given) else {
        return;
    };
    for (key, value) in g {
        let path = if prefix.is_empty() {
            key.clone()
        } else {
            format!("{prefix}.{key}")
        };
        match k.get(key) {
            Some(sub) => unknown_keys(sub, value, &path, out),
            None => out.push(path),
        }
    }
}

/// Parses and validates a config document.
pub fn parse_config_str(text: &str, origin: &Path) -> Result<RunConfig> {
    let value: Value = serde_json::from_str(text).map_err(|e| Error::json(origin, e))?;
    if !value.is_object() {
        return Err(Error::Config("top level must be a JSON object".into()));
    }
    let known = serde_json::to_value(RunConfig::default()).expect("config serializes");
    let mut extra = Vec::new();
    unknown_keys(&known, &value, "", &mut extra);
    if !extra.is_empty() {
        return Err(Error::Config(format!("unknown keys: {}", extra.join(", "))));
    }
    let cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads, parses and validates `path`. A missing file, malformed JSON and an
/// invalid value map to `Io`, `Json` and `Config` errors respectively.
pub fn parse_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig> {
        parse_config_str(text, Path::new("inline.json"))
    }

    #[test]
    fn empty_object_is_default() {
        assert_eq!(parse("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn zero_chunk_names_the_key() {
        let err = parse(r#"{"wm": {"chunk_len": 0}}"#).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("wm.chunk_len"), "{err}");
    }

    #[test]
    fn all_unknown_keys_listed() {
        let err = parse(r#"{"bogus": 1, "rl": {"lr": 0.01, "kl": 0.1}, "wm": {"x": 2}}"#).unwrap_err();
        let msg = err.to_string();
        for k in ["bogus", "rl.kl", "wm.x"] {
            assert!(msg.contains(k), "{msg} lacks {k}");
        }
        assert!(!msg.contains("rl.lr"));
    }

    #[test]
    fn roundtrip() {
        let mut cfg = RunConfig::default();
        cfg.rl.lr = 3e-4;
        cfg.loop_.deploy_episodes = 7;
        cfg.master_seed = 99;
        assert_eq!(parse(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn malformed_json_is_distinct() {
        assert!(matches!(parse("{"), Err(Error::Json { .. })));
        assert!(matches!(
            parse_config("/definitely/not/here.json"),
            Err(Error::Io { .. })
        ));
    }
}

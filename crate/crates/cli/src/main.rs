use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use loopworld::config::{parse_config, RunConfig};
use loopworld::log::Logger;
use loopworld::pipeline::{self, Ablation, Layout};
use loopworld::policy::Policy;
use loopworld::sans;
use loopworld::worldmodel::WorldModel;
use loopworld::{Error, Result};

/// Closed-loop world-model and policy co-training on a toy pick-and-place task.
#[derive(Debug, Parser)]
#[command(name = "loopworld", version)]
struct Cli {
    /// JSON run config; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overriding the config and LOOPWORLD_OUT.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Suppress the JSON progress lines on stderr.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the SANS dataset and its held-out split.
    Curate,
    /// Train the shared world-model initialization on the pretraining pool.
    PretrainWm,
    /// Fine-tune the world model on an iteration's SANS.
    TrainWm {
        #[arg(long, default_value_t = 0)]
        iteration: u64,
    },
    /// Behavior-clone the SFT baseline on the curated successes.
    Sft,
    /// GRPO inside the iteration's world model, starting from SFT.
    Rl {
        #[arg(long, default_value_t = 0)]
        iteration: u64,
    },
    /// Deploy the iteration's RL policy and write the augmented SANS.
    Deploy {
        #[arg(long, default_value_t = 0)]
        iteration: u64,
    },
    /// Run the full loop until `k` iterations have completed.
    Iterate {
        #[arg(long, default_value_t = 1)]
        k: u64,
    },
    /// Evaluate an iteration's world model and policies.
    Eval {
        #[arg(long, default_value_t = 0)]
        iteration: u64,
    },
    /// Retrain iteration 0's world model under an ablation.
    Ablate {
        /// no_near_success or no_reward_head
        #[arg(long)]
        variant: String,
    },
    /// Render report files from the completed iterations.
    Report,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => parse_config(path)?,
        None => RunConfig::default(),
    }
    .with_env_overrides();
    if let Some(seed) = cli.seed {
        cfg.master_seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn need<T>(what: &str, path: PathBuf, load: impl FnOnce(PathBuf) -> Result<T>) -> Result<T> {
    if !path.exists() {
        return Err(Error::contract(format!("{what} not found at {}", path.display())));
    }
    load(path)
}

fn print(value: serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(&value).expect("json value serializes"));
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let layout = Layout::new(&cfg.output_dir);
    let log = if cli.quiet { Logger::silent() } else { Logger::stderr() };
    match &cli.command {
        Command::Curate => {
            let (train, held) = pipeline::load_or_curate(&cfg, &layout)?;
            print(json!({
                "train": layout.relative(&layout.curated()),
                "train_records": train.len(),
                "heldout": layout.relative(&layout.heldout()),
                "heldout_records": held.len(),
            }));
        }
        Command::PretrainWm => {
            pipeline::load_or_pretrain(&cfg, &layout, &log)?;
            print(json!({ "wm": layout.relative(&layout.pretrained()) }));
        }
        Command::TrainWm { iteration } => {
            let ds = pipeline::iteration_sans(&cfg, &layout, *iteration)?;
            pipeline::train_wm_phase(&cfg, &layout, *iteration, &ds, &log)?;
            print(json!({ "wm": layout.relative(&layout.wm(*iteration)), "records": ds.len() }));
        }
        Command::Sft => {
            pipeline::load_or_sft(&cfg, &layout)?;
            print(json!({ "sft": layout.relative(&layout.sft()) }));
        }
        Command::Rl { iteration } => {
            let k = *iteration;
            let ds = pipeline::iteration_sans(&cfg, &layout, k)?;
            let wm = need("world model", layout.wm(k), WorldModel::load)?;
            let sft = pipeline::load_or_sft(&cfg, &layout)?;
            pipeline::rl_phase(&cfg, &layout, k, &sft, &wm, &ds, &log)?;
            print(json!({ "rl": layout.relative(&layout.rl(k)), "curve": layout.relative(&layout.curve(k)) }));
        }
        Command::Deploy { iteration } => {
            let k = *iteration;
            let ds = need("SANS", layout.sans(k), sans::load)?;
            let rl = need("RL policy", layout.rl(k), Policy::load)?;
            let next = pipeline::deploy_phase(&cfg, &layout, k, &rl, &ds, &log)?;
            print(json!({
                "sans": layout.relative(&layout.augmented(k)),
                "records": next.len(),
                "iteration_index": next.iteration_index,
            }));
        }
        Command::Iterate { k } => {
            let manifests = pipeline::run_iterations(&cfg, *k, &layout, &log)?;
            let summary: Vec<_> = manifests
                .iter()
                .map(|m| json!({ "iteration": m.iteration_index, "metrics": m.metrics }))
                .collect();
            print(json!(summary));
        }
        Command::Eval { iteration } => {
            let k = *iteration;
            let held = need("held-out set", layout.heldout(), sans::load)?;
            let wm = need("world model", layout.wm(k), WorldModel::load)?;
            let sft = need("SFT policy", layout.sft(), Policy::load)?;
            let rl = need("RL policy", layout.rl(k), Policy::load)?;
            let (metrics, warnings) = pipeline::eval_phase(&cfg, &wm, &sft, &rl, &held, &log)?;
            print(json!({ "metrics": metrics, "warnings": warnings }));
        }
        Command::Ablate { variant } => {
            let variant = Ablation::parse(variant)?;
            let metrics = pipeline::run_ablation(&cfg, variant, &layout, &log)?;
            print(json!({ "variant": variant.name(), "metrics": metrics }));
        }
        Command::Report => {
            let manifests = pipeline::completed_manifests(&layout)?;
            let files = pipeline::emit_report(&manifests, &layout)?;
            let files: Vec<String> = files.iter().map(|f| layout.relative(f)).collect();
            print(json!({ "files": files }));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

use loopworld::config::RunConfig;

/// A run small enough to finish in seconds while touching every phase.
pub fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.wm.denoiser_hidden = vec![16];
    cfg.wm.embedder_hidden = vec![4];
    cfg.wm.action_embed_dim = 4;
    cfg.wm.reward_hidden = vec![4];
    cfg.wm.euler_steps = 2;
    cfg.wm.batch_size = 4;
    cfg.wm.pretrain_steps = 6;
    cfg.wm.train_steps = 6;
    cfg.policy.trunk_hidden = vec![8];
    cfg.policy.feature_dim = 4;
    cfg.policy.sft_steps = 5;
    cfg.policy.batch_size = 4;
    cfg.rl.total_steps = 2;
    cfg.rl.groups_per_step = 1;
    cfg.rl.group_size = 2;
    cfg.sans.n_success = 5;
    cfg.sans.n_near = 5;
    cfg.pretrain.n_success = 1;
    cfg.pretrain.n_near = 1;
    cfg.pretrain.n_explore = 1;
    cfg.loop_.deploy_episodes = 3;
    cfg.loop_.seed_rollouts = 2;
    cfg.loop_.eval_episodes = 4;
    cfg.loop_.alignment_samples = 4;
    cfg.validate().expect("tiny config is valid");
    cfg
}

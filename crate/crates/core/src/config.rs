//! Run configuration: a TOML file with one table per subsystem.
//!
//! Missing keys fall back to the desk-scale preset, so a config file only
//! needs to state what it changes.

use std::path::{Path, PathBuf};

use candle_core::DType;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::envs::EnvConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Overshooting InfoNCE with independent dynamics plus overshooting KL.
    Dreaming,
    /// Pixel reconstruction baseline: decoder likelihood plus one-step KL.
    DreamerRecon,
    /// Single-step contrastive baseline (no overshooting in the NCE branch).
    PlainNce,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Dreaming => "dreaming",
            Mode::DreamerRecon => "dreamer_recon",
            Mode::PlainNce => "plain_nce",
        }
    }
}

/// Which predictor feeds the contrastive branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "snake_case")]
pub enum DynamicsKind {
    Linear,
    /// Reuse the recurrent prior (the shared-dynamics ablation).
    Shared,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Full,
    Desk,
    Tiny,
    Smoke,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub outdir: PathBuf,
    pub precision: Precision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Deterministic (recurrent) state size.
    pub deter: usize,
    /// Stochastic state size.
    pub stoch: usize,
    /// Width of the dense layers inside the recurrent model.
    pub hidden: usize,
    /// Output channels of the four stride-2 encoder stages. The embedding
    /// size is `4 * encoder_channels[3]`.
    pub encoder_channels: [usize; 4],
    pub reward_hidden: Vec<usize>,
    pub min_std: f64,
    pub free_nats: f64,
}

impl ModelConfig {
    pub fn embed_dim(&self) -> usize {
        4 * self.encoder_channels[3]
    }

    pub fn latent_dim(&self) -> usize {
        self.deter + self.stoch
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveConfig {
    pub mode: Mode,
    /// Overshooting distance K.
    pub overshoot: usize,
    pub dynamics: DynamicsKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub crop: bool,
    pub jitter: bool,
    pub jitter_strength: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BehaviorConfig {
    pub horizon: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub explore_std: f64,
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub model_lr: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub grad_clip: f64,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReplayConfig {
    /// Capacity in stored steps.
    pub capacity: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub prefill_episodes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    /// Budget in raw environment (control) steps, counting action repeat.
    pub total_env_steps: u64,
    pub train_steps_per_episode: usize,
    /// Optional hard cap on gradient steps (smoke runs and ablation cells).
    pub max_grad_steps: Option<u64>,
    pub eval_every_episodes: usize,
    pub eval_episodes: usize,
    pub checkpoint_every_episodes: usize,
    pub log_every: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub run: RunConfig,
    pub task: EnvConfig,
    pub model: ModelConfig,
    pub objective: ObjectiveConfig,
    pub augment: AugmentConfig,
    pub behavior: BehaviorConfig,
    pub optim: OptimConfig,
    pub replay: ReplayConfig,
    pub schedule: ScheduleConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            outdir: PathBuf::from("runs/default"),
            precision: Precision::F32,
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        TrainConfig::preset(Preset::Desk).model
    }
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Dreaming,
            overshoot: 3,
            dynamics: DynamicsKind::Linear,
        }
    }
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop: true,
            jitter: false,
            jitter_strength: 1.0,
        }
    }
}

impl Default for BehaviorConfig {
    fn default() -> Self {
        TrainConfig::preset(Preset::Desk).behavior
    }
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            model_lr: 6e-4,
            actor_lr: 8e-5,
            critic_lr: 8e-5,
            grad_clip: 100.0,
            eps: 1e-7,
        }
    }
}

impl Default for ReplayConfig {
    fn default() -> Self {
        TrainConfig::preset(Preset::Desk).replay
    }
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        TrainConfig::preset(Preset::Desk).schedule
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::preset(Preset::Desk)
    }
}

impl TrainConfig {
    pub fn preset(preset: Preset) -> Self {
        let run = RunConfig::default();
        let objective = ObjectiveConfig::default();
        let augment = AugmentConfig::default();
        let optim = OptimConfig::default();
        let task = EnvConfig::default();
        match preset {
            Preset::Full => Self {
                run,
                task,
                model: ModelConfig {
                    deter: 200,
                    stoch: 30,
                    hidden: 200,
                    encoder_channels: [32, 64, 128, 256],
                    reward_hidden: vec![400, 400],
                    min_std: 0.1,
                    free_nats: 3.0,
                },
                objective,
                augment,
                behavior: BehaviorConfig {
                    horizon: 15,
                    gamma: 0.99,
                    lambda: 0.95,
                    explore_std: 0.3,
                    actor_hidden: vec![400, 400, 400, 400],
                    critic_hidden: vec![400, 400, 400],
                },
                optim,
                replay: ReplayConfig {
                    capacity: 100_000,
                    batch_size: 50,
                    seq_len: 50,
                    prefill_episodes: 5,
                },
                schedule: ScheduleConfig {
                    total_env_steps: 500_000,
                    train_steps_per_episode: 100,
                    max_grad_steps: None,
                    eval_every_episodes: 10,
                    eval_episodes: 10,
                    checkpoint_every_episodes: 50,
                    log_every: 100,
                },
            },
            Preset::Desk => Self {
                run,
                task,
                model: ModelConfig {
                    deter: 64,
                    stoch: 16,
                    hidden: 64,
                    encoder_channels: [4, 8, 16, 32],
                    reward_hidden: vec![64, 64],
                    min_std: 0.1,
                    free_nats: 3.0,
                },
                objective,
                augment,
                behavior: BehaviorConfig {
                    horizon: 15,
                    gamma: 0.99,
                    lambda: 0.95,
                    explore_std: 0.3,
                    actor_hidden: vec![64, 64],
                    critic_hidden: vec![64, 64],
                },
                optim,
                replay: ReplayConfig {
                    capacity: 100_000,
                    batch_size: 8,
                    seq_len: 16,
                    prefill_episodes: 5,
                },
                schedule: ScheduleConfig {
                    total_env_steps: 30_000,
                    train_steps_per_episode: 100,
                    max_grad_steps: None,
                    eval_every_episodes: 10,
                    eval_episodes: 10,
                    checkpoint_every_episodes: 50,
                    log_every: 50,
                },
            },
            Preset::Tiny => Self {
                run: RunConfig {
                    precision: Precision::F64,
                    ..run
                },
                task,
                model: ModelConfig {
                    deter: 4,
                    stoch: 4,
                    hidden: 4,
                    encoder_channels: [2, 2, 2, 2],
                    reward_hidden: vec![4],
                    min_std: 0.1,
                    free_nats: 3.0,
                },
                objective,
                augment,
                behavior: BehaviorConfig {
                    horizon: 3,
                    gamma: 0.99,
                    lambda: 0.95,
                    explore_std: 0.3,
                    actor_hidden: vec![4],
                    critic_hidden: vec![4],
                },
                optim,
                replay: ReplayConfig {
                    capacity: 10_000,
                    batch_size: 2,
                    seq_len: 4,
                    prefill_episodes: 1,
                },
                schedule: ScheduleConfig {
                    total_env_steps: 400,
                    train_steps_per_episode: 5,
                    max_grad_steps: None,
                    eval_every_episodes: 1,
                    eval_episodes: 1,
                    checkpoint_every_episodes: 1,
                    log_every: 1,
                },
            },
            Preset::Smoke => Self {
                run,
                task: EnvConfig {
                    episode_length: 40,
                    ..task
                },
                model: ModelConfig {
                    deter: 16,
                    stoch: 8,
                    hidden: 16,
                    encoder_channels: [4, 4, 8, 8],
                    reward_hidden: vec![16],
                    min_std: 0.1,
                    free_nats: 3.0,
                },
                objective,
                augment,
                behavior: BehaviorConfig {
                    horizon: 5,
                    gamma: 0.99,
                    lambda: 0.95,
                    explore_std: 0.3,
                    actor_hidden: vec![16],
                    critic_hidden: vec![16],
                },
                optim,
                replay: ReplayConfig {
                    capacity: 10_000,
                    batch_size: 2,
                    seq_len: 8,
                    prefill_episodes: 2,
                },
                schedule: ScheduleConfig {
                    total_env_steps: 1_000_000,
                    train_steps_per_episode: 100,
                    max_grad_steps: Some(200),
                    eval_every_episodes: 1,
                    eval_episodes: 2,
                    checkpoint_every_episodes: 1,
                    log_every: 25,
                },
            },
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn dtype(&self) -> DType {
        self.run.precision.dtype()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let m = &self.model;
        if m.deter == 0 || m.stoch == 0 || m.hidden == 0 || m.encoder_channels.contains(&0) {
            return bad("model dimensions must be positive".into());
        }
        if !(m.min_std > 0.0) {
            return bad(format!("min_std must be positive, got {}", m.min_std));
        }
        if m.free_nats < 0.0 {
            return bad("free_nats must be non-negative".into());
        }
        let k = self.objective.overshoot;
        if self.objective.mode == Mode::Dreaming && k == 0 {
            return bad("overshooting distance K must be at least 1 in dreaming mode".into());
        }
        if self.replay.seq_len < k + 1 {
            return bad(format!(
                "sequence length {} too short for overshooting distance {k} (need T >= K+1)",
                self.replay.seq_len
            ));
        }
        if self.replay.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        let b = &self.behavior;
        if b.horizon == 0 {
            return bad("imagination horizon must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&b.lambda) {
            return bad(format!("lambda must lie in [0, 1], got {}", b.lambda));
        }
        if !(b.gamma > 0.0 && b.gamma <= 1.0) {
            return bad(format!("gamma must lie in (0, 1], got {}", b.gamma));
        }
        if b.explore_std < 0.0 {
            return bad("explore_std must be non-negative".into());
        }
        let o = &self.optim;
        if !(o.model_lr > 0.0 && o.actor_lr > 0.0 && o.critic_lr > 0.0 && o.grad_clip > 0.0) {
            return bad("learning rates and grad_clip must be positive".into());
        }
        if self.augment.jitter_strength < 0.0 {
            return bad("jitter_strength must be non-negative".into());
        }
        self.task.validate()?;
        let episode_steps = self.task.agent_steps() + 1;
        if self.replay.capacity < episode_steps {
            return bad(format!(
                "replay capacity {} smaller than one episode ({episode_steps} steps)",
                self.replay.capacity
            ));
        }
        if episode_steps < self.replay.seq_len {
            return bad(format!(
                "episodes have {episode_steps} steps, shorter than sequence length {}",
                self.replay.seq_len
            ));
        }
        if self.schedule.eval_episodes == 0 {
            return bad("eval_episodes must be positive".into());
        }
        Ok(())
    }

    /// Hash of everything that affects training; the output directory is excluded.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.run.outdir = PathBuf::new();
        let mut hasher = Sha256::new();
        hasher.update(c.to_toml()?.as_bytes());
        Ok(format!("{:x}", hasher.finalize()))
    }

    /// Short label for tables and plots, e.g. `dreaming/linear/crop/K3`.
    pub fn label(&self) -> String {
        let aug = match (self.augment.crop, self.augment.jitter) {
            (false, false) => "none",
            (true, false) => "crop",
            (false, true) => "jitter",
            (true, true) => "crop+jitter",
        };
        match self.objective.mode {
            Mode::Dreaming => format!(
                "dreaming/{}/{aug}/K{}",
                match self.objective.dynamics {
                    DynamicsKind::Linear => "linear",
                    DynamicsKind::Shared => "shared",
                },
                self.objective.overshoot
            ),
            other => format!("{}/{aug}", other.as_str()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for p in [Preset::Full, Preset::Desk, Preset::Tiny, Preset::Smoke] {
            TrainConfig::preset(p).validate().unwrap();
        }
    }

    #[test]
    fn desk_and_full_dimensions() {
        let full = TrainConfig::preset(Preset::Full);
        assert_eq!((full.model.deter, full.model.stoch, full.model.embed_dim()), (200, 30, 1024));
        let desk = TrainConfig::preset(Preset::Desk);
        assert_eq!((desk.model.deter, desk.model.stoch, desk.model.embed_dim()), (64, 16, 128));
        assert_eq!((desk.replay.batch_size, desk.replay.seq_len), (8, 16));
        let tiny = TrainConfig::preset(Preset::Tiny);
        assert_eq!((tiny.model.deter, tiny.model.stoch, tiny.model.embed_dim()), (4, 4, 8));
    }

    #[test]
    fn partial_toml_falls_back_to_defaults() {
        let cfg = TrainConfig::from_toml("[objective]\nmode = \"plain_nce\"\n[run]\nseed = 9\n").unwrap();
        assert_eq!(cfg.objective.mode, Mode::PlainNce);
        assert_eq!(cfg.run.seed, 9);
        assert_eq!(cfg.model, TrainConfig::default().model);
    }

    #[test]
    fn toml_round_trip_preserves_hash() {
        let cfg = TrainConfig::preset(Preset::Smoke);
        let back = TrainConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.hash().unwrap(), back.hash().unwrap());
    }

    #[test]
    fn hash_ignores_outdir_but_not_seed() {
        let a = TrainConfig::preset(Preset::Smoke);
        let mut b = a.clone();
        b.run.outdir = "elsewhere".into();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        b.run.seed += 1;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
    }

    #[test]
    fn short_sequences_are_rejected() {
        let mut cfg = TrainConfig::preset(Preset::Desk);
        cfg.objective.overshoot = 16;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_mode_fails_to_parse() {
        assert!(TrainConfig::from_toml("[objective]\nmode = \"pixels\"\n").is_err());
    }
}

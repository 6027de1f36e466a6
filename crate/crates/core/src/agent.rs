//! World model plus actor-critic: acting in the environment, evaluation,
//! and checkpoint archives.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{CENTER_ORIGIN, TARGET_HW};
use crate::behavior::{self, Behavior};
use crate::config::TrainConfig;
use crate::envs::{DotEnv, EnvConfig, EnvStep, ACTION_DIM, CHANNELS, IMAGE_SIZE};
use crate::error::{Error, Result};
use crate::latent::LatentState;
use crate::nn::ParamStore;
use crate::replay::{normalize_pixel, Episode};
use crate::world_model::WorldModel;

pub const EVAL_SEED_BASE: u64 = 1_000_000;
pub const MODEL_FILE: &str = "model.safetensors";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";

pub struct Agent {
    pub config: TrainConfig,
    pub model: WorldModel,
    pub behavior: Behavior,
}

/// Center-cropped, normalized `(1, 1, 64, 64, 3)` tensor from a raw frame.
pub fn frame_tensor(image: &[u8], dtype: candle_core::DType) -> Result<Tensor> {
    if image.len() != IMAGE_SIZE * IMAGE_SIZE * CHANNELS {
        return Err(Error::Shape(format!("expected a 72x72x3 frame, got {} bytes", image.len())));
    }
    let (r0, c0) = CENTER_ORIGIN;
    let mut data = Vec::with_capacity(TARGET_HW * TARGET_HW * CHANNELS);
    for r in r0..r0 + TARGET_HW {
        let row = (r * IMAGE_SIZE + c0) * CHANNELS;
        data.extend(image[row..row + TARGET_HW * CHANNELS].iter().map(|&p| normalize_pixel(p)));
    }
    Ok(Tensor::from_vec(data, (1, 1, TARGET_HW, TARGET_HW, CHANNELS), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Running posterior over one environment's observations.
pub struct OnlineFilter<'a> {
    model: &'a WorldModel,
    state: LatentState,
    prev_action: Tensor,
}

impl<'a> OnlineFilter<'a> {
    pub fn new(model: &'a WorldModel) -> Result<Self> {
        let state = model.initial_state(1)?;
        let prev_action = Tensor::zeros((1, ACTION_DIM), model.dtype(), &Device::Cpu)?;
        Ok(Self { model, state, prev_action })
    }

    /// Folds in the next frame. Without an rng the posterior mean is used
    /// as the stochastic state.
    pub fn observe(&mut self, image: &[u8], rng: Option<&mut ChaCha8Rng>) -> Result<&LatentState> {
        let e = self.model.embed(&frame_tensor(image, self.model.dtype())?)?.squeeze(1)?;
        let rssm = &self.model.rssm;
        let h = rssm.transition(&self.state, &self.prev_action)?;
        let post = rssm.posterior(&h, &e)?;
        let sample = match rng {
            Some(rng) => post.sample(rng)?,
            None => post.mean.clone(),
        };
        self.state = LatentState::from_dist(h, &post, sample).detach();
        Ok(&self.state)
    }

    pub fn record_action(&mut self, action: &Tensor) {
        self.prev_action = action.detach();
    }

    pub fn state(&self) -> &LatentState {
        &self.state
    }
}

/// Steps the environment `repeat` times with one action, summing rewards.
pub fn repeat_step(env: &mut DotEnv, action: &[f64], repeat: usize) -> Result<EnvStep> {
    let mut total = 0.0;
    let mut last = None;
    for _ in 0..repeat {
        let step = env.step(action)?;
        total += step.reward;
        let done = step.terminal;
        last = Some(step);
        if done {
            break;
        }
    }
    let mut step = last.ok_or_else(|| Error::Config("action repeat must be positive".into()))?;
    step.reward = total;
    Ok(step)
}

/// Uniform random actions for a whole episode.
pub fn random_episode(config: &EnvConfig, seed: u64, rng: &mut impl Rng) -> Result<Episode> {
    let mut env = DotEnv::new(config.clone())?;
    let first = env.reset(seed)?;
    let mut episode = Episode::new(config.task.as_str(), seed, &first);
    loop {
        let action: Vec<f64> = (0..ACTION_DIM).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let step = repeat_step(&mut env, &action, config.action_repeat)?;
        let done = step.terminal;
        episode.push(&action, &step);
        if done {
            return Ok(episode);
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub mean: f64,
    pub std: f64,
    pub returns: Vec<f64>,
}

impl EvalReport {
    pub fn from_returns(returns: Vec<f64>) -> Self {
        let n = returns.len().max(1) as f64;
        let mean = returns.iter().sum::<f64>() / n;
        let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt(), returns }
    }
}

/// Return of a uniform-random policy over `episodes` seeded episodes.
pub fn random_baseline(config: &EnvConfig, episodes: usize, seed: u64) -> Result<EvalReport> {
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    let returns = (0..episodes)
        .map(|i| random_episode(config, EVAL_SEED_BASE + i as u64, &mut rng).map(|e| e.score()))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_returns(returns))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub step: u64,
    pub env_step: u64,
    pub config_hash: String,
    pub params: Vec<ParamEntry>,
}

impl Agent {
    pub fn new(config: &TrainConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let model = WorldModel::new(config, rng)?;
        let behavior = Behavior::new(&config.model, &config.behavior, ACTION_DIM, config.dtype(), rng)?;
        Ok(Self {
            config: config.clone(),
            model,
            behavior,
        })
    }

    pub fn stores(&self) -> [&ParamStore; 3] {
        [&self.model.store, &self.behavior.actor_store, &self.behavior.critic_store]
    }

    /// Runs one episode. With `explore`, the posterior is sampled and
    /// Gaussian action noise is added; otherwise acting is deterministic.
    pub fn run_episode(&self, env_config: &EnvConfig, seed: u64, mut explore: Option<&mut ChaCha8Rng>) -> Result<Episode> {
        let mut env = DotEnv::new(env_config.clone())?;
        let first = env.reset(seed)?;
        let mut episode = Episode::new(env_config.task.as_str(), seed, &first);
        let mut filter = OnlineFilter::new(&self.model)?;
        let mut image = first.image;
        loop {
            let state = filter.observe(&image, explore.as_deref_mut())?.clone();
            let action_t = match explore.as_deref_mut() {
                Some(rng) => behavior::act(&state, &self.behavior.actor, true, self.config.behavior.explore_std, rng)?.action,
                None => behavior::act_mode(&state, &self.behavior.actor)?,
            };
            let action = behavior::action_rows(&action_t)?.remove(0);
            filter.record_action(&action_t);
            let step = repeat_step(&mut env, &action, env_config.action_repeat)?;
            let done = step.terminal;
            episode.push(&action, &step);
            if done {
                return Ok(episode);
            }
            image = step.image;
        }
    }

    /// Deterministic policy with center crop on `episodes` fixed seeds.
    pub fn evaluate(&self, episodes: usize) -> Result<EvalReport> {
        let returns = (0..episodes)
            .map(|i| self.run_episode(&self.config.task, EVAL_SEED_BASE + i as u64, None).map(|e| e.score()))
            .collect::<Result<Vec<_>>>()?;
        Ok(EvalReport::from_returns(returns))
    }

    fn named_tensors(&self) -> HashMap<String, Tensor> {
        let mut all = HashMap::new();
        for store in self.stores() {
            all.extend(store.tensors());
        }
        all
    }

    pub fn save_checkpoint(&self, dir: &Path, step: u64, env_step: u64) -> Result<()> {
        fs::create_dir_all(dir)?;
        let tensors = self.named_tensors();
        candle_core::safetensors::save(&tensors, dir.join(MODEL_FILE))?;
        let mut params: Vec<ParamEntry> = self
            .stores()
            .iter()
            .flat_map(|s| s.shapes())
            .map(|(name, shape)| ParamEntry { name, shape })
            .collect();
        params.sort_by(|a, b| a.name.cmp(&b.name));
        let manifest = Manifest {
            step,
            env_step,
            config_hash: self.config.hash()?,
            params,
        };
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
        fs::write(dir.join(CONFIG_FILE), self.config.to_toml()?)?;
        Ok(())
    }

    pub fn read_manifest(dir: &Path) -> Result<Manifest> {
        let text = fs::read_to_string(dir.join(MANIFEST_FILE)).map_err(|e| Error::Load(format!("{}: {e}", dir.join(MANIFEST_FILE).display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Load(format!("corrupt manifest: {e}")))
    }

    /// Copies checkpoint parameters into this agent.
    pub fn load_params(&self, dir: &Path) -> Result<Manifest> {
        let manifest = Self::read_manifest(dir)?;
        let tensors = candle_core::safetensors::load(dir.join(MODEL_FILE), &Device::Cpu)
            .map_err(|e| Error::Load(format!("{}: {e}", dir.join(MODEL_FILE).display())))?;
        for store in self.stores() {
            store.load_from(&tensors)?;
        }
        Ok(manifest)
    }

    /// Rebuilds an agent from a checkpoint directory.
    pub fn load(dir: &Path) -> Result<(Self, Manifest)> {
        let text = fs::read_to_string(dir.join(CONFIG_FILE)).map_err(|e| Error::Load(format!("{}: {e}", dir.join(CONFIG_FILE).display())))?;
        let config = TrainConfig::from_toml(&text)?;
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(config.run.seed);
        let agent = Self::new(&config, &mut rng)?;
        let manifest = agent.load_params(dir)?;
        if manifest.config_hash != config.hash()? {
            return Err(Error::Load("checkpoint config does not match its manifest hash".into()));
        }
        Ok((agent, manifest))
    }
}

/// Finds the checkpoint with the highest step under `run_dir/checkpoints`.
pub fn latest_checkpoint(run_dir: &Path) -> Result<Option<PathBuf>> {
    let dir = run_dir.join("checkpoints");
    if !dir.exists() {
        return Ok(None);
    }
    let mut best: Option<PathBuf> = None;
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.join(MANIFEST_FILE).exists() && best.as_ref().is_none_or(|b| path.file_name() > b.file_name()) {
            best = Some(path);
        }
    }
    Ok(best)
}

pub fn checkpoint_dir(run_dir: &Path, step: u64) -> PathBuf {
    run_dir.join("checkpoints").join(format!("step_{step:08}"))
}

#![allow(dead_code)]

use candle_core::{Device, Tensor, Var};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dreaming::agent::{self, Agent};
use dreaming::augment::BranchRngs;
use dreaming::config::{Preset, TrainConfig};
use dreaming::replay::EpisodeStore;
use dreaming::world_model::{self, ModelInputs};

/// Tiny double-precision configuration with the free-nats floor removed so
/// every KL term carries gradient.
pub fn tiny_config() -> TrainConfig {
    let mut cfg = TrainConfig::preset(Preset::Tiny);
    cfg.model.free_nats = 0.0;
    cfg.task.episode_length = 40;
    cfg
}

pub fn tiny_agent(cfg: &TrainConfig, seed: u64) -> Agent {
    Agent::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

/// A cropped replay batch from uniform-random episodes.
pub fn batch_inputs(cfg: &TrainConfig, seed: u64) -> ModelInputs {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = EpisodeStore::new(cfg.replay.capacity);
    for i in 0..2 {
        store.add_episode(agent::random_episode(&cfg.task, seed * 10 + i, &mut rng).unwrap()).unwrap();
    }
    let batch = store.sample_batch(cfg.replay.batch_size, cfg.replay.seq_len, cfg.behavior.gamma, &mut rng).unwrap();
    let mut rngs = BranchRngs {
        online: ChaCha8Rng::seed_from_u64(seed + 1),
        target: ChaCha8Rng::seed_from_u64(seed + 2),
    };
    world_model::prepare_inputs(&batch, cfg.objective.mode, &cfg.augment, &mut rngs, cfg.dtype()).unwrap()
}

pub fn values(var: &Var) -> Vec<f64> {
    var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

pub fn set_values(var: &Var, vals: Vec<f64>) {
    let t = Tensor::from_vec(vals, var.shape(), &Device::Cpu).unwrap();
    var.set(&t).unwrap();
}

/// Adds small seeded noise to every parameter. Zero-initialised biases
/// leave ReLU pre-activations exactly on the kink wherever a whole input
/// window is dead, and finite differences are meaningless there.
pub fn jitter_params(store: &dreaming::nn::ParamStore, scale: f64, rng: &mut ChaCha8Rng) {
    use rand_distr::{Distribution, StandardNormal};
    for var in store.vars() {
        let vals = values(&var).into_iter().map(|v| v + scale * Distribution::<f64>::sample(&StandardNormal, rng)).collect();
        set_values(&var, vals);
    }
}

#[derive(Debug, Clone)]
pub struct Check {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Denominator floor of the relative error, so that near-zero gradients are
/// judged on absolute error below `1e-8`.
pub const REL_FLOOR: f64 = 1e-4;

impl Check {
    pub fn rel_error(&self) -> f64 {
        (self.analytic - self.numeric).abs() / self.analytic.abs().max(self.numeric.abs()).max(REL_FLOOR)
    }
}

/// Central differences on `count` random elements of `var` against the
/// analytic gradient `grad` (same layout as the variable).
pub fn central_differences(
    name: &str,
    var: &Var,
    grad: &[f64],
    count: usize,
    eps: f64,
    rng: &mut ChaCha8Rng,
    loss: &mut dyn FnMut() -> f64,
) -> Vec<Check> {
    let base = values(var);
    let picks = sample(rng, base.len(), count.min(base.len())).into_vec();
    let mut out = Vec::with_capacity(picks.len());
    for i in picks {
        let mut plus = base.clone();
        plus[i] += eps;
        set_values(var, plus);
        let lp = loss();
        let mut minus = base.clone();
        minus[i] -= eps;
        set_values(var, minus);
        let lm = loss();
        set_values(var, base.clone());
        out.push(Check {
            param: name.to_string(),
            index: i,
            analytic: grad[i],
            numeric: (lp - lm) / (2.0 * eps),
        });
    }
    out
}

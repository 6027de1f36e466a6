//! Actor-critic learning on imagined rollouts through the RSSM prior.
//!
//! Imagination only reads the RSSM, the reward head and the actor. The
//! contrastive dynamics never enter this module.

use candle_core::{DType, Tensor};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::{BehaviorConfig, ModelConfig};
use crate::error::{Error, Result};
use crate::latent::{LatentState, RewardHead, Rssm};
use crate::nn::{self, Activation, Mlp, ParamStore};

pub const MEAN_SCALE: f64 = 5.0;
pub const MIN_ACTOR_STD: f64 = 1e-4;
pub const ACTION_LIMIT: f64 = 1.0 - 1e-6;

/// Pre-squash Gaussian parameters of the policy.
#[derive(Clone, Debug)]
pub struct PolicyOutput {
    pub mean: Tensor,
    pub std: Tensor,
}

impl PolicyOutput {
    /// `tanh(mean)`.
    pub fn mode(&self) -> Result<Tensor> {
        Ok(self.mean.tanh()?)
    }

    /// `tanh(mean + std * noise)`, reparameterized.
    pub fn sample(&self, rng: &mut impl Rng) -> Result<Tensor> {
        let noise = nn::normal_tensor(rng, self.mean.dims(), self.mean.dtype())?;
        Ok((&self.mean + (&self.std * noise)?)?.tanh()?)
    }
}

#[derive(Clone)]
pub struct Actor {
    mlp: Mlp,
    action_dim: usize,
}

impl Actor {
    pub fn new(store: &mut ParamStore, latent: usize, hidden: &[usize], action_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::new(store, "actor", latent, hidden, 2 * action_dim, Activation::Elu, rng)?,
            action_dim,
        })
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn policy(&self, z: &Tensor) -> Result<PolicyOutput> {
        let raw = self.mlp.forward(z)?;
        let mean = (raw.narrow(1, 0, self.action_dim)? / MEAN_SCALE)?.tanh()? * MEAN_SCALE;
        let std = (nn::softplus(&raw.narrow(1, self.action_dim, self.action_dim)?)? + MIN_ACTOR_STD)?;
        Ok(PolicyOutput { mean: mean?, std })
    }
}

#[derive(Clone)]
pub struct Critic {
    mlp: Mlp,
}

impl Critic {
    pub fn new(store: &mut ParamStore, latent: usize, hidden: &[usize], rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::new(store, "critic", latent, hidden, 1, Activation::Elu, rng)?,
        })
    }

    /// `(N, Dz)` to `(N,)`.
    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        Ok(self.mlp.forward(z)?.squeeze(1)?)
    }
}

pub struct ImaginedTrajectory {
    /// `H + 1` states, the first being the (detached) start states.
    pub latents: Vec<LatentState>,
    /// `H` actions, each `(N, A)`.
    pub actions: Vec<Tensor>,
    /// `(H, N)`: reward predicted for the state each action leads to.
    pub rewards: Tensor,
    /// `(H, N)`.
    pub discounts: Tensor,
}

impl ImaginedTrajectory {
    pub fn horizon(&self) -> usize {
        self.actions.len()
    }

    /// `(H + 1, N, Dz)` stacked latents.
    pub fn z_stack(&self) -> Result<Tensor> {
        let zs: Vec<Tensor> = self.latents.iter().map(|l| l.z()).collect::<Result<_>>()?;
        Ok(Tensor::stack(&zs, 0)?)
    }
}

/// Rolls the prior forward `horizon` steps under the actor. Gradients flow
/// through the sampled dynamics into the actor.
pub fn imagine(rssm: &Rssm, reward: &RewardHead, actor: &Actor, start: &LatentState, horizon: usize, gamma: f64, rng: &mut impl Rng) -> Result<ImaginedTrajectory> {
    if horizon < 1 {
        return Err(Error::Config("imagination horizon must be at least 1".into()));
    }
    let start = start.detach();
    let mut latents = vec![start];
    let mut actions = Vec::with_capacity(horizon);
    let mut rewards = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let prev = latents.last().expect("non-empty");
        let action = actor.policy(&prev.z()?)?.sample(rng)?;
        let next = rssm.imagine_step(prev, &action, rng)?;
        rewards.push(reward.forward(&next.z()?)?);
        actions.push(action);
        latents.push(next);
    }
    let rewards = Tensor::stack(&rewards, 0)?;
    let discounts = (rewards.ones_like()? * gamma)?;
    Ok(ImaginedTrajectory {
        latents,
        actions,
        rewards,
        discounts,
    })
}

/// `V(τ) = r_τ + d_τ [(1 - λ) v_{τ+1} + λ V(τ+1)]` with `V(H) = v_H`.
/// `rewards` and `discounts` are `(H, N)`, `values` is `(H + 1, N)`;
/// returns `(H, N)`.
pub fn lambda_returns(rewards: &Tensor, values: &Tensor, discounts: &Tensor, lambda: f64) -> Result<Tensor> {
    let (h, n) = rewards.dims2()?;
    if values.dims() != [h + 1, n] || discounts.dims() != [h, n] {
        return Err(crate::error::shape_err(format!(
            "lambda returns: rewards {:?}, values {:?}, discounts {:?}",
            rewards.dims(),
            values.dims(),
            discounts.dims()
        )));
    }
    let mut next = values.get(h)?;
    let mut out = Vec::with_capacity(h);
    for t in (0..h).rev() {
        let mix = ((values.get(t + 1)? * (1.0 - lambda))? + (&next * lambda)?)?;
        let ret = (rewards.get(t)? + (discounts.get(t)? * mix)?)?;
        out.push(ret.clone());
        next = ret;
    }
    out.reverse();
    Ok(Tensor::stack(&out, 0)?)
}

/// Cumulative discount weights `[1, d_0, d_0 d_1, ...]` for the first `H`
/// steps, without gradient.
pub fn discount_weights(discounts: &Tensor) -> Result<Tensor> {
    let (h, n) = discounts.dims2()?;
    let ones = Tensor::ones((1, n), discounts.dtype(), discounts.device())?;
    let shifted = Tensor::cat(&[&ones, &discounts.narrow(0, 0, h - 1)?], 0)?;
    cumprod0(&shifted.detach())
}

fn cumprod0(x: &Tensor) -> Result<Tensor> {
    let h = x.dims()[0];
    let mut rows = Vec::with_capacity(h);
    let mut acc = x.get(0)?;
    rows.push(acc.clone());
    for t in 1..h {
        acc = (acc * x.get(t)?)?;
        rows.push(acc.clone());
    }
    Ok(Tensor::stack(&rows, 0)?)
}

/// `-mean(w * V_λ)`.
pub fn actor_loss(returns: &Tensor, weights: &Tensor) -> Result<Tensor> {
    Ok((returns * weights)?.mean_all()?.neg()?)
}

/// `mean(w * 0.5 (v - sg(target))^2)`.
pub fn critic_loss(values: &Tensor, targets: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let diff = (values - targets.detach())?;
    Ok(((diff.sqr()? * 0.5)? * weights)?.mean_all()?)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BehaviorStats {
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub mean_value: f64,
    pub mean_imagined_reward: f64,
}

pub struct BehaviorLosses {
    pub actor: Tensor,
    pub critic: Tensor,
    pub stats: BehaviorStats,
}

/// Actor and critic with their own parameter stores.
pub struct Behavior {
    pub actor_store: ParamStore,
    pub critic_store: ParamStore,
    pub actor: Actor,
    pub critic: Critic,
    pub config: BehaviorConfig,
}

impl Behavior {
    pub fn new(model: &ModelConfig, config: &BehaviorConfig, action_dim: usize, dtype: DType, rng: &mut impl Rng) -> Result<Self> {
        let mut actor_store = ParamStore::new(dtype);
        let mut critic_store = ParamStore::new(dtype);
        let actor = Actor::new(&mut actor_store, model.latent_dim(), &config.actor_hidden, action_dim, rng)?;
        let critic = Critic::new(&mut critic_store, model.latent_dim(), &config.critic_hidden, rng)?;
        Ok(Self {
            actor_store,
            critic_store,
            actor,
            critic,
            config: config.clone(),
        })
    }

    pub fn losses(&self, rssm: &Rssm, reward: &RewardHead, start: &LatentState, rng: &mut impl Rng) -> Result<BehaviorLosses> {
        let traj = imagine(rssm, reward, &self.actor, start, self.config.horizon, self.config.gamma, rng)?;
        let z = traj.z_stack()?;
        let (h1, n, dz) = z.dims3()?;
        let values = self.critic.forward(&z.reshape((h1 * n, dz))?)?.reshape((h1, n))?;
        let returns = lambda_returns(&traj.rewards, &values, &traj.discounts, self.config.lambda)?;
        let weights = discount_weights(&traj.discounts)?;
        let actor = actor_loss(&returns, &weights)?;
        let h = h1 - 1;
        let z_detached = z.narrow(0, 0, h)?.detach().reshape((h * n, dz))?;
        let critic_values = self.critic.forward(&z_detached)?.reshape((h, n))?;
        let critic = critic_loss(&critic_values, &returns, &weights)?;
        let stats = BehaviorStats {
            actor_loss: nn::scalar(&actor)?,
            critic_loss: nn::scalar(&critic)?,
            mean_value: nn::scalar(&values.mean_all()?)?,
            mean_imagined_reward: nn::scalar(&traj.rewards.mean_all()?)?,
        };
        Ok(BehaviorLosses { actor, critic, stats })
    }
}

pub struct ActOutput {
    /// `(N, A)` actions in `(-1, 1)`.
    pub action: Tensor,
    /// Exploration noise added to the mode, when exploring.
    pub noise: Option<Vec<f64>>,
}

/// Policy mode, plus clamped Gaussian noise when exploring.
pub fn act(latent: &LatentState, actor: &Actor, explore: bool, explore_std: f64, rng: &mut impl Rng) -> Result<ActOutput> {
    let mode = act_mode(latent, actor)?;
    if !explore {
        return Ok(ActOutput { action: mode, noise: None });
    }
    let dims = mode.dims().to_vec();
    let noise: Vec<f64> = (0..mode.elem_count()).map(|_| explore_std * Distribution::<f64>::sample(&StandardNormal, rng)).collect();
    let noise_t = Tensor::from_vec(noise.clone(), dims, mode.device())?.to_dtype(mode.dtype())?;
    let action = (mode + noise_t)?.clamp(-ACTION_LIMIT, ACTION_LIMIT)?;
    Ok(ActOutput { action, noise: Some(noise) })
}

/// The deterministic action `tanh(mean)`.
pub fn act_mode(latent: &LatentState, actor: &Actor) -> Result<Tensor> {
    Ok(actor.policy(&latent.z()?)?.mode()?.clamp(-ACTION_LIMIT, ACTION_LIMIT)?)
}

/// Row-major values of an `(N, A)` action tensor.
pub fn action_rows(action: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(action.to_dtype(DType::F64)?.to_vec2::<f64>()?)
}

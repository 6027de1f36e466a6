//! The world model as trained in each mode, and its combined loss.
//!
//! * `dreaming`: Σ nce_k (k = 1..K) + Σ kl_k (k = 0..K) + reward NLL.
//! * `dreamer_recon`: pixel NLL + reward NLL + kl_0.
//! * `plain_nce`: same-step InfoNCE + reward NLL + kl_0.
//!
//! Only the heads a mode uses are constructed, so e.g. a dreaming model has
//! no decoder parameters at all.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use ndarray::Array5;
use rand::Rng;

use crate::augment::{self, BranchRngs};
use crate::config::{AugmentConfig, DynamicsKind, Mode, ModelConfig, TrainConfig};
use crate::contrastive::{self, Bilinear, LinearDynamics, Predictor};
use crate::envs::ACTION_DIM;
use crate::error::{Error, Result};
use crate::latent::{self, Decoder, Encoder, Filtered, LatentState, RewardHead, Rssm};
use crate::nn::{self, ParamStore};
use crate::replay::SequenceBatch;

pub struct WorldModel {
    pub store: ParamStore,
    pub encoder: Encoder,
    pub rssm: Rssm,
    pub reward: RewardHead,
    decoder: Option<Decoder>,
    linear: Option<LinearDynamics>,
    bilinear: Option<Bilinear>,
    config: ModelConfig,
    mode: Mode,
    dynamics: DynamicsKind,
    overshoot: usize,
}

/// Preprocessed model inputs as tensors.
pub struct ModelInputs {
    /// `(B, T, 64, 64, 3)` online-branch images.
    pub online: Tensor,
    /// `(B, T, 64, 64, 3)` target-branch images, for contrastive modes.
    pub target: Option<Tensor>,
    /// `(B, T, A)`.
    pub actions: Tensor,
    /// `(B, T)`.
    pub rewards: Tensor,
}

impl ModelInputs {
    pub fn batch_size(&self) -> usize {
        self.actions.dims()[0]
    }

    pub fn seq_len(&self) -> usize {
        self.actions.dims()[1]
    }
}

/// Scalar values of every loss term.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossBreakdown {
    /// `nce_k` for `k = 1..=K` (a single same-step term in plain mode).
    pub nce: Vec<f64>,
    /// `kl_k` for `k = 0..=K`.
    pub kl: Vec<f64>,
    pub reward_nll: f64,
    pub pixel_nll: Option<f64>,
    pub total: f64,
}

impl LossBreakdown {
    pub fn to_map(&self, plain: bool) -> BTreeMap<String, f64> {
        let mut map = BTreeMap::new();
        for (i, v) in self.nce.iter().enumerate() {
            let k = if plain { i } else { i + 1 };
            map.insert(format!("nce_{k}"), *v);
        }
        for (k, v) in self.kl.iter().enumerate() {
            map.insert(format!("kl_{k}"), *v);
        }
        map.insert("reward_nll".into(), self.reward_nll);
        if let Some(p) = self.pixel_nll {
            map.insert("pixel_nll".into(), p);
        }
        map.insert("total".into(), self.total);
        map
    }
}

pub struct ModelOutput {
    pub total: Tensor,
    pub breakdown: LossBreakdown,
    pub filtered: Filtered,
}

pub fn array_to_tensor(a: &Array5<f32>, dtype: DType) -> Result<Tensor> {
    let shape = a.shape().to_vec();
    let data: Vec<f32> = a.iter().copied().collect();
    Ok(Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

/// Runs both preprocessors over a replay batch. The target branch is only
/// produced for contrastive modes.
pub fn prepare_inputs(batch: &SequenceBatch, mode: Mode, augment_cfg: &AugmentConfig, rngs: &mut BranchRngs, dtype: DType) -> Result<ModelInputs> {
    let online = augment::preprocess(batch.images.view(), augment_cfg, &mut rngs.online)?;
    let target = match mode {
        Mode::DreamerRecon => None,
        Mode::Dreaming | Mode::PlainNce => Some(array_to_tensor(&augment::preprocess(batch.images.view(), augment_cfg, &mut rngs.target)?, dtype)?),
    };
    let actions = batch.actions.mapv(|v| v as f64);
    let rewards = batch.rewards.mapv(|v| v as f64);
    let dev = Device::Cpu;
    Ok(ModelInputs {
        online: array_to_tensor(&online, dtype)?,
        target,
        actions: Tensor::from_vec(actions.iter().copied().collect::<Vec<_>>(), actions.shape(), &dev)?.to_dtype(dtype)?,
        rewards: Tensor::from_vec(rewards.iter().copied().collect::<Vec<_>>(), rewards.shape(), &dev)?.to_dtype(dtype)?,
    })
}

impl WorldModel {
    pub fn new(config: &TrainConfig, rng: &mut impl Rng) -> Result<Self> {
        let model = &config.model;
        let mut store = ParamStore::new(config.dtype());
        let encoder = Encoder::new(&mut store, model, rng)?;
        let rssm = Rssm::new(&mut store, model, ACTION_DIM, rng)?;
        let reward = RewardHead::new(&mut store, model, rng)?;
        let mode = config.objective.mode;
        let dynamics = config.objective.dynamics;
        let (decoder, linear, bilinear) = match mode {
            Mode::DreamerRecon => (Some(Decoder::new(&mut store, "decoder", model, rng)?), None, None),
            Mode::PlainNce => (None, None, Some(Bilinear::new(&mut store, model.latent_dim(), model.embed_dim(), rng)?)),
            Mode::Dreaming => {
                let linear = match dynamics {
                    DynamicsKind::Linear => Some(LinearDynamics::new(&mut store, model.latent_dim(), ACTION_DIM, rng)?),
                    DynamicsKind::Shared => None,
                };
                (None, linear, Some(Bilinear::new(&mut store, model.latent_dim(), model.embed_dim(), rng)?))
            }
        };
        Ok(Self {
            store,
            encoder,
            rssm,
            reward,
            decoder,
            linear,
            bilinear,
            config: model.clone(),
            mode,
            dynamics,
            overshoot: config.objective.overshoot,
        })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn linear_dynamics(&self) -> Option<&LinearDynamics> {
        self.linear.as_ref()
    }

    pub fn bilinear(&self) -> Option<&Bilinear> {
        self.bilinear.as_ref()
    }

    /// The reconstruction head; only present in reconstruction mode.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        match &self.decoder {
            Some(d) => d.forward(z),
            None => Err(Error::Mode(format!("no decoder in {} mode", self.mode.as_str()))),
        }
    }

    pub fn initial_state(&self, batch: usize) -> Result<LatentState> {
        LatentState::zeros(batch, &self.config, self.dtype())
    }

    /// `(B, T, 64, 64, 3)` images to `(B, T, De)` embeddings.
    pub fn embed(&self, images: &Tensor) -> Result<Tensor> {
        let dims = images.dims().to_vec();
        if dims.len() != 5 {
            return Err(crate::error::shape_err(format!("expected (B, T, H, W, C) images, got {dims:?}")));
        }
        let flat = images.reshape((dims[0] * dims[1], dims[2], dims[3], dims[4]))?;
        let e = self.encoder.forward(&flat)?;
        Ok(e.reshape((dims[0], dims[1], ()))?)
    }

    pub fn observe(&self, inputs: &ModelInputs, rng: &mut impl Rng) -> Result<Filtered> {
        let embeds = self.embed(&inputs.online)?;
        let init = self.initial_state(inputs.batch_size())?;
        self.rssm.observe(&embeds, &inputs.actions, &init, rng)
    }

    /// The mode's full training loss.
    pub fn loss(&self, inputs: &ModelInputs, rng: &mut impl Rng) -> Result<ModelOutput> {
        let filtered = self.observe(inputs, rng)?;
        let (b, t) = (inputs.batch_size(), inputs.seq_len());
        let k_max = match self.mode {
            Mode::Dreaming => self.overshoot,
            Mode::DreamerRecon | Mode::PlainNce => 0,
        };
        let chains = latent::overshoot_chains(&self.rssm, &filtered, &inputs.actions, k_max, rng)?;
        let kl_terms = latent::kl_overshoot_terms(&filtered, &chains, self.config.free_nats)?;

        let zs: Vec<Tensor> = filtered.posts.iter().map(|p| p.z()).collect::<Result<_>>()?;
        // (T*B, Dz) ordered by time then batch item
        let z_all = Tensor::cat(&zs, 0)?;
        let reward_target = inputs.rewards.t()?.contiguous()?.flatten_all()?;
        let reward_nll = latent::reward_nll(&self.reward.forward(&z_all)?, &reward_target)?;

        let mut nce_terms = Vec::new();
        let mut pixel = None;
        match self.mode {
            Mode::Dreaming => {
                let target = self.target_embeddings(inputs)?;
                let bilinear = self.bilinear.as_ref().expect("dreaming mode has a bilinear head");
                let predictor = match self.dynamics {
                    DynamicsKind::Linear => Predictor::Linear(self.linear.as_ref().expect("linear dynamics present")),
                    DynamicsKind::Shared => Predictor::Shared(&self.rssm),
                };
                let logits = contrastive::build_logit_matrices(&filtered.posts, &inputs.actions, &target, k_max, &predictor, bilinear, rng)?;
                nce_terms = contrastive::nce_terms(&logits, b, k_max)?;
            }
            Mode::PlainNce => {
                let target = self.target_embeddings(inputs)?;
                let bilinear = self.bilinear.as_ref().expect("plain mode has a bilinear head");
                let logits = contrastive::plain_logit_matrices(&filtered.posts, &target, bilinear)?;
                nce_terms.push(contrastive::nce_loss(&logits)?);
            }
            Mode::DreamerRecon => {
                let recon = self.decode(&z_all)?;
                let images = inputs.online.transpose(0, 1)?.contiguous()?.reshape((t * b, 64, 64, 3))?;
                pixel = Some(latent::pixel_nll(&recon, &images)?);
            }
        }

        let mut total = reward_nll.clone();
        for term in nce_terms.iter().chain(kl_terms.iter()) {
            total = (total + term)?;
        }
        if let Some(p) = &pixel {
            total = (total + p)?;
        }
        let breakdown = LossBreakdown {
            nce: nce_terms.iter().map(nn::scalar).collect::<Result<_>>()?,
            kl: kl_terms.iter().map(nn::scalar).collect::<Result<_>>()?,
            reward_nll: nn::scalar(&reward_nll)?,
            pixel_nll: pixel.as_ref().map(nn::scalar).transpose()?,
            total: nn::scalar(&total)?,
        };
        Ok(ModelOutput { total, breakdown, filtered })
    }

    fn target_embeddings(&self, inputs: &ModelInputs) -> Result<Tensor> {
        match &inputs.target {
            Some(t) => self.embed(t),
            None => Err(Error::Config("contrastive modes need a target image branch".into())),
        }
    }
}

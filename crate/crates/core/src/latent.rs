//! Recurrent state-space model: convolutional encoder, GRU deterministic
//! path, Gaussian prior/posterior heads, reward head, the optional pixel
//! decoder, and the KL terms with latent overshooting.
//!
//! Batched tensors are `(N, dim)`. Within a sequence, the action at index
//! `t` is the action taken after observing image `t`, so the prior at step
//! `t` is predicted from the posterior at `t - 1` and action `t - 1`.

use candle_core::{DType, Tensor};
use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{shape_err, Error, Result};
use crate::nn::{self, Activation, Conv2d, ConvTranspose2d, GruCell, Linear, Mlp, ParamStore};

pub const IMAGE_HW: usize = 64;
pub const LOG_2PI: f64 = 1.837_877_066_409_345_3;

/// Diagonal Gaussian over the stochastic state.
#[derive(Clone, Debug)]
pub struct GaussianParams {
    pub mean: Tensor,
    pub std: Tensor,
}

impl GaussianParams {
    /// `mean + std * noise`, differentiable in both parameters.
    pub fn sample_with(&self, noise: &Tensor) -> Result<Tensor> {
        Ok((&self.mean + (&self.std * noise)?)?)
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Result<Tensor> {
        let noise = nn::normal_tensor(rng, self.mean.dims(), self.mean.dtype())?;
        self.sample_with(&noise)
    }

    pub fn detach(&self) -> Self {
        Self {
            mean: self.mean.detach(),
            std: self.std.detach(),
        }
    }

    pub fn cat(parts: &[&GaussianParams]) -> Result<Self> {
        let means: Vec<&Tensor> = parts.iter().map(|p| &p.mean).collect();
        let stds: Vec<&Tensor> = parts.iter().map(|p| &p.std).collect();
        Ok(Self {
            mean: Tensor::cat(&means, 0)?,
            std: Tensor::cat(&stds, 0)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct LatentState {
    pub h: Tensor,
    pub sample: Tensor,
    pub mean: Tensor,
    pub std: Tensor,
}

impl LatentState {
    pub fn zeros(batch: usize, config: &ModelConfig, dtype: DType) -> Result<Self> {
        let dev = candle_core::Device::Cpu;
        let s = Tensor::zeros((batch, config.stoch), dtype, &dev)?;
        Ok(Self {
            h: Tensor::zeros((batch, config.deter), dtype, &dev)?,
            sample: s.clone(),
            mean: s.clone(),
            std: s.ones_like()?,
        })
    }

    pub fn from_dist(h: Tensor, dist: &GaussianParams, sample: Tensor) -> Self {
        Self {
            h,
            sample,
            mean: dist.mean.clone(),
            std: dist.std.clone(),
        }
    }

    pub fn batch(&self) -> usize {
        self.h.dims()[0]
    }

    /// `[h; sample]`, the latent vector used by every head.
    pub fn z(&self) -> Result<Tensor> {
        Ok(Tensor::cat(&[&self.h, &self.sample], 1)?)
    }

    /// `[h; mean]`, the noise-free latent used for probing and acting.
    pub fn z_mean(&self) -> Result<Tensor> {
        Ok(Tensor::cat(&[&self.h, &self.mean], 1)?)
    }

    pub fn dist(&self) -> GaussianParams {
        GaussianParams {
            mean: self.mean.clone(),
            std: self.std.clone(),
        }
    }

    pub fn detach(&self) -> Self {
        Self {
            h: self.h.detach(),
            sample: self.sample.detach(),
            mean: self.mean.detach(),
            std: self.std.detach(),
        }
    }

    pub fn cat(parts: &[&LatentState]) -> Result<Self> {
        let pick = |f: fn(&LatentState) -> &Tensor| -> Result<Tensor> {
            let v: Vec<&Tensor> = parts.iter().map(|p| f(p)).collect();
            Ok(Tensor::cat(&v, 0)?)
        };
        Ok(Self {
            h: pick(|s| &s.h)?,
            sample: pick(|s| &s.sample)?,
            mean: pick(|s| &s.mean)?,
            std: pick(|s| &s.std)?,
        })
    }

    pub fn check_finite(&self) -> Result<()> {
        nn::ensure_finite(&self.h, "latent h")?;
        nn::ensure_finite(&self.sample, "latent sample")?;
        nn::ensure_finite(&self.mean, "latent mean")?;
        nn::ensure_finite(&self.std, "latent std")
    }
}

/// Four stride-2 convolutions, 64x64x3 in, `4 * channels[3]` features out.
#[derive(Clone)]
pub struct Encoder {
    convs: Vec<Conv2d>,
    out_dim: usize,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut convs = Vec::with_capacity(4);
        let mut prev = 3;
        for (i, &c) in config.encoder_channels.iter().enumerate() {
            convs.push(Conv2d::new(store, &format!("encoder.conv{i}"), prev, c, 4, 2, rng)?);
            prev = c;
        }
        Ok(Self {
            convs,
            out_dim: config.embed_dim(),
        })
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// `images` is `(N, 64, 64, 3)`; returns `(N, De)`.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let dims = images.dims();
        if dims.len() != 4 || dims[1..] != [IMAGE_HW, IMAGE_HW, 3] {
            return Err(shape_err(format!("encoder expects (N, 64, 64, 3) images, got {dims:?}")));
        }
        let mut x = images.permute((0, 3, 1, 2))?.contiguous()?;
        for conv in &self.convs {
            x = conv.forward(&x)?.relu()?;
        }
        Ok(x.flatten_from(1)?)
    }
}

/// Transposed-convolution decoder mirroring the encoder. Only built in the
/// reconstruction mode and by the probe decoder.
#[derive(Clone)]
pub struct Decoder {
    input: Linear,
    deconvs: Vec<ConvTranspose2d>,
    embed: usize,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, prefix: &str, config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let embed = config.embed_dim();
        let input = Linear::new(store, &format!("{prefix}.input"), config.latent_dim(), embed, true, rng)?;
        let [c1, c2, c3, _] = config.encoder_channels;
        let plan = [(embed, c3, 5), (c3, c2, 5), (c2, c1, 6), (c1, 3, 6)];
        let mut deconvs = Vec::with_capacity(4);
        for (i, &(cin, cout, k)) in plan.iter().enumerate() {
            deconvs.push(ConvTranspose2d::new(store, &format!("{prefix}.deconv{i}"), cin, cout, k, 2, rng)?);
        }
        Ok(Self { input, deconvs, embed })
    }

    /// `(N, Dz)` latents to `(N, 64, 64, 3)` image means.
    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let n = z.dims()[0];
        let mut x = self.input.forward(z)?.reshape((n, self.embed, 1, 1))?;
        let last = self.deconvs.len() - 1;
        for (i, deconv) in self.deconvs.iter().enumerate() {
            x = deconv.forward(&x)?;
            if i < last {
                x = x.relu()?;
            }
        }
        Ok(x.permute((0, 2, 3, 1))?.contiguous()?)
    }
}

/// Unit-variance Gaussian negative log-likelihood summed over each image,
/// averaged over images.
pub fn pixel_nll(mean: &Tensor, target: &Tensor) -> Result<Tensor> {
    if mean.dims() != target.dims() {
        return Err(shape_err(format!("pixel nll: {:?} vs {:?}", mean.dims(), target.dims())));
    }
    let n = mean.dims()[0];
    let per_image = ((mean - target)?.sqr()? * 0.5)?.flatten_from(1)?.sum(1)?;
    let pixels = mean.elem_count() / n.max(1);
    Ok((per_image.mean_all()? + 0.5 * LOG_2PI * pixels as f64)?)
}

/// Unit-variance Gaussian negative log-likelihood averaged over elements.
pub fn reward_nll(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if pred.dims() != target.dims() {
        return Err(shape_err(format!("reward nll: {:?} vs {:?}", pred.dims(), target.dims())));
    }
    Ok((((pred - target)?.sqr()? * 0.5)?.mean_all()? + 0.5 * LOG_2PI)?)
}

#[derive(Clone)]
pub struct RewardHead {
    mlp: Mlp,
}

impl RewardHead {
    pub fn new(store: &mut ParamStore, config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::new(store, "reward", config.latent_dim(), &config.reward_hidden, 1, Activation::Elu, rng)?,
        })
    }

    /// `(N, Dz)` to `(N,)` reward means.
    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        Ok(self.mlp.forward(z)?.squeeze(1)?)
    }
}

#[derive(Clone)]
pub struct Rssm {
    input: Linear,
    gru: GruCell,
    prior_hidden: Linear,
    prior_out: Linear,
    post_hidden: Linear,
    post_out: Linear,
    deter: usize,
    stoch: usize,
    embed: usize,
    action_dim: usize,
    min_std: f64,
}

/// Output of filtering a batch of sequences: one entry per time step.
pub struct Filtered {
    pub posts: Vec<LatentState>,
    pub priors: Vec<GaussianParams>,
}

impl Rssm {
    pub fn new(store: &mut ParamStore, config: &ModelConfig, action_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let (dh, ds, hid, de) = (config.deter, config.stoch, config.hidden, config.embed_dim());
        Ok(Self {
            input: Linear::new(store, "rssm.input", ds + action_dim, hid, true, rng)?,
            gru: GruCell::new(store, "rssm.gru", hid, dh, rng)?,
            prior_hidden: Linear::new(store, "rssm.prior.hidden", dh, hid, true, rng)?,
            prior_out: Linear::new(store, "rssm.prior.out", hid, 2 * ds, true, rng)?,
            post_hidden: Linear::new(store, "rssm.post.hidden", dh + de, hid, true, rng)?,
            post_out: Linear::new(store, "rssm.post.out", hid, 2 * ds, true, rng)?,
            deter: dh,
            stoch: ds,
            embed: de,
            action_dim,
            min_std: config.min_std,
        })
    }

    pub fn deter(&self) -> usize {
        self.deter
    }

    pub fn stoch(&self) -> usize {
        self.stoch
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn min_std(&self) -> f64 {
        self.min_std
    }

    fn gaussian(&self, raw: &Tensor) -> Result<GaussianParams> {
        let mean = raw.narrow(1, 0, self.stoch)?;
        let std = (nn::softplus(&raw.narrow(1, self.stoch, self.stoch)?)? + self.min_std)?;
        Ok(GaussianParams { mean, std })
    }

    /// Deterministic transition `h' = GRU(h, [s; a])`.
    pub fn transition(&self, prev: &LatentState, action: &Tensor) -> Result<Tensor> {
        let x = Tensor::cat(&[&prev.sample, action], 1)?;
        let x = self.input.forward(&x)?.elu(1.0)?;
        self.gru.forward(&x, &prev.h)
    }

    pub fn prior_from_h(&self, h: &Tensor) -> Result<GaussianParams> {
        let x = self.prior_hidden.forward(h)?.elu(1.0)?;
        self.gaussian(&self.prior_out.forward(&x)?)
    }

    /// One prior step. Rejects non-finite inputs.
    pub fn prior_step(&self, prev: &LatentState, action: &Tensor) -> Result<(Tensor, GaussianParams)> {
        nn::ensure_finite(&prev.h, "previous h")?;
        nn::ensure_finite(&prev.sample, "previous sample")?;
        nn::ensure_finite(action, "action")?;
        let h = self.transition(prev, action)?;
        let prior = self.prior_from_h(&h)?;
        Ok((h, prior))
    }

    /// Posterior over the stochastic state given `h` and an image embedding.
    pub fn posterior(&self, h: &Tensor, embed: &Tensor) -> Result<GaussianParams> {
        if h.dims().get(1) != Some(&self.deter) || embed.dims().get(1) != Some(&self.embed) || h.dims()[0] != embed.dims()[0] {
            return Err(shape_err(format!(
                "posterior expects h (N, {}) and e (N, {}), got {:?} and {:?}",
                self.deter,
                self.embed,
                h.dims(),
                embed.dims()
            )));
        }
        let x = Tensor::cat(&[h, embed], 1)?;
        let x = self.post_hidden.forward(&x)?.elu(1.0)?;
        self.gaussian(&self.post_out.forward(&x)?)
    }

    /// Prior step followed by sampling from the prior.
    pub fn imagine_step(&self, prev: &LatentState, action: &Tensor, rng: &mut impl Rng) -> Result<LatentState> {
        let h = self.transition(prev, action)?;
        let prior = self.prior_from_h(&h)?;
        let sample = prior.sample(rng)?;
        Ok(LatentState::from_dist(h, &prior, sample))
    }

    pub fn observe_step(&self, prev: &LatentState, action: &Tensor, embed: &Tensor, rng: &mut impl Rng) -> Result<(LatentState, GaussianParams)> {
        let h = self.transition(prev, action)?;
        let prior = self.prior_from_h(&h)?;
        let post = self.posterior(&h, embed)?;
        let sample = post.sample(rng)?;
        Ok((LatentState::from_dist(h, &post, sample), prior))
    }

    /// Filters `(B, T, De)` embeddings with `(B, T, A)` actions from `init`.
    /// The first step uses a zero action.
    pub fn observe(&self, embeds: &Tensor, actions: &Tensor, init: &LatentState, rng: &mut impl Rng) -> Result<Filtered> {
        let (b, t, _) = embeds.dims3()?;
        if actions.dims() != [b, t, self.action_dim] {
            return Err(shape_err(format!("actions {:?} do not match embeddings {:?}", actions.dims(), embeds.dims())));
        }
        if init.batch() != b {
            return Err(shape_err(format!("initial state batch {} vs {b}", init.batch())));
        }
        let mut posts = Vec::with_capacity(t);
        let mut priors = Vec::with_capacity(t);
        let mut state = init.clone();
        let mut action = Tensor::zeros((b, self.action_dim), embeds.dtype(), embeds.device())?;
        for i in 0..t {
            let e = embeds.narrow(1, i, 1)?.squeeze(1)?;
            let (post, prior) = self.observe_step(&state, &action, &e, rng)?;
            action = actions.narrow(1, i, 1)?.squeeze(1)?;
            state = post.clone();
            posts.push(post);
            priors.push(prior);
        }
        Ok(Filtered { posts, priors })
    }
}

/// Closed-form `KL[q || p]` for diagonal Gaussians, summed over the last
/// dimension.
pub fn kl_divergence(q: &GaussianParams, p: &GaussianParams) -> Result<Tensor> {
    let log_ratio = (p.std.log()? - q.std.log()?)?;
    let num = (q.std.sqr()? + (&q.mean - &p.mean)?.sqr()?)?;
    let frac = (num / (p.std.sqr()? * 2.0)?)?;
    Ok(((log_ratio + frac)? - 0.5)?.sum(candle_core::D::Minus1)?)
}

/// `mean(max(kl - free_nats, 0))`.
pub fn clamped_kl(kl: &Tensor, free_nats: f64) -> Result<Tensor> {
    Ok((kl - free_nats)?.relu()?.mean_all()?)
}

/// Multi-step priors for overshooting distances `0..=k_max`.
///
/// `chains[k][j]` is the prior at target step `k + j`, predicted from the
/// posterior at step `j - 1` (the initial state when `j = 0`) by one GRU
/// step followed by `k` sampled prior steps. Each level is stored as one
/// tensor batch, ordered by target step then batch item.
pub fn overshoot_chains(
    rssm: &Rssm,
    filtered: &Filtered,
    actions: &Tensor,
    k_max: usize,
    rng: &mut impl Rng,
) -> Result<Vec<GaussianParams>> {
    let t = filtered.posts.len();
    if k_max > t.saturating_sub(1) {
        return Err(Error::Config(format!("overshooting distance {k_max} needs at least {} steps, got {t}", k_max + 1)));
    }
    let b = actions.dims()[0];
    let prior_refs: Vec<&GaussianParams> = filtered.priors.iter().collect();
    let level0 = GaussianParams::cat(&prior_refs)?;
    let mut levels = vec![level0.clone()];
    // states at level m, targets m..T-1, each (B, .) block in time order
    let h_refs: Vec<Tensor> = filtered.posts.iter().map(|p| p.h.clone()).collect();
    let mut h = Tensor::cat(&h_refs, 0)?;
    let mut dist = level0;
    for m in 0..k_max {
        let count = t - m - 1;
        let h_in = h.narrow(0, 0, count * b)?;
        let d_in = GaussianParams {
            mean: dist.mean.narrow(0, 0, count * b)?,
            std: dist.std.narrow(0, 0, count * b)?,
        };
        let sample = d_in.sample(rng)?;
        let state = LatentState::from_dist(h_in, &d_in, sample);
        let acts: Vec<Tensor> = (m..t - 1)
            .map(|u| actions.narrow(1, u, 1).and_then(|a| a.squeeze(1)))
            .collect::<std::result::Result<_, _>>()?;
        let a = Tensor::cat(&acts, 0)?;
        let h_next = rssm.transition(&state, &a)?;
        dist = rssm.prior_from_h(&h_next)?;
        h = h_next;
        levels.push(dist.clone());
    }
    Ok(levels)
}

/// Per-distance KL losses `kl_k` for `k = 0..=K`. The posterior is a
/// gradient-free target for `k >= 1`.
pub fn kl_overshoot_terms(filtered: &Filtered, chains: &[GaussianParams], free_nats: f64) -> Result<Vec<Tensor>> {
    let t = filtered.posts.len();
    let mut terms = Vec::with_capacity(chains.len());
    for (k, prior) in chains.iter().enumerate() {
        if k >= t {
            return Err(Error::Config(format!("overshooting distance {k} exceeds sequence length {t}")));
        }
        let targets: Vec<GaussianParams> = filtered.posts[k..].iter().map(|p| p.dist()).collect();
        let refs: Vec<&GaussianParams> = targets.iter().collect();
        let mut q = GaussianParams::cat(&refs)?;
        if k >= 1 {
            q = q.detach();
        }
        terms.push(clamped_kl(&kl_divergence(&q, prior)?, free_nats)?);
    }
    Ok(terms)
}

/// Sum of the overshooting KL terms.
pub fn kl_overshoot_loss(filtered: &Filtered, chains: &[GaussianParams], free_nats: f64) -> Result<Tensor> {
    let terms = kl_overshoot_terms(filtered, chains, free_nats)?;
    let mut total = terms[0].clone();
    for term in &terms[1..] {
        total = (total + term)?;
    }
    Ok(total)
}

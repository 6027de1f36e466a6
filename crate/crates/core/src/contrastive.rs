//! Contrastive objective: linear latent dynamics, the bilinear
//! discriminator, logit matrices over batch x offset, and InfoNCE.

use candle_core::{Tensor, D};
use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::latent::{LatentState, Rssm};
use crate::nn::{Linear, ParamStore};

/// `z' = W_z z + W_a a`, no bias.
#[derive(Clone)]
pub struct LinearDynamics {
    w_z: Linear,
    w_a: Linear,
}

impl LinearDynamics {
    /// `W_z` starts at the identity, `W_a` at a Glorot draw.
    pub fn new(store: &mut ParamStore, latent: usize, action: usize, rng: &mut impl Rng) -> Result<Self> {
        let eye = Tensor::eye(latent, store.dtype(), store.device())?;
        let w_z = Linear::from_weight(store.add("contrastive.linear.w_z", eye)?, None);
        let w_a = Linear::new(store, "contrastive.linear.w_a", action, latent, false, rng)?;
        Ok(Self { w_z, w_a })
    }

    pub fn from_weights(w_z: Tensor, w_a: Tensor) -> Result<Self> {
        let (n, m) = w_z.dims2()?;
        if n != m || w_a.dims2()?.0 != n {
            return Err(shape_err(format!("W_z {:?} and W_a {:?} do not fit", w_z.dims(), w_a.dims())));
        }
        Ok(Self {
            w_z: Linear::from_weight(w_z, None),
            w_a: Linear::from_weight(w_a, None),
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.w_z.out_dim()
    }

    /// `z` is `(N, Dz)`, `a` is `(N, A)`.
    pub fn step(&self, z: &Tensor, a: &Tensor) -> Result<Tensor> {
        if z.dims().get(1) != Some(&self.w_z.in_dim()) || a.dims().get(1) != Some(&self.w_a.in_dim()) || z.dims()[0] != a.dims()[0] {
            return Err(shape_err(format!("linear step: z {:?}, a {:?}", z.dims(), a.dims())));
        }
        Ok((self.w_z.forward(z)? + self.w_a.forward(a)?)?)
    }

    /// Applies `k` steps; `actions` is `(N, k, A)`.
    pub fn multi_step(&self, z: &Tensor, actions: &Tensor) -> Result<Tensor> {
        let k = actions.dims3()?.1;
        if k == 0 {
            return Err(Error::Contract("multi-step prediction needs k >= 1".into()));
        }
        let mut out = z.clone();
        for i in 0..k {
            out = self.step(&out, &actions.narrow(1, i, 1)?.squeeze(1)?)?;
        }
        Ok(out)
    }
}

/// `zᵀ W e`.
#[derive(Clone)]
pub struct Bilinear {
    w: Tensor,
}

impl Bilinear {
    pub fn new(store: &mut ParamStore, latent: usize, embed: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            w: store.glorot("contrastive.bilinear.w", &[latent, embed], latent, embed, rng)?,
        })
    }

    pub fn from_weight(w: Tensor) -> Self {
        Self { w }
    }

    pub fn weight(&self) -> &Tensor {
        &self.w
    }

    /// Pairwise logits between rows of `z` `(.., N, Dz)` and `e` `(.., M, De)`.
    pub fn logits(&self, z: &Tensor, e: &Tensor) -> Result<Tensor> {
        let (dz, de) = self.w.dims2()?;
        if z.dims().last() != Some(&dz) || e.dims().last() != Some(&de) {
            return Err(shape_err(format!("bilinear: z {:?}, e {:?}, W {:?}", z.dims(), e.dims(), self.w.dims())));
        }
        let zw = z.broadcast_matmul(&self.w)?;
        Ok(zw.matmul(&e.transpose(D::Minus2, D::Minus1)?.contiguous()?)?)
    }

    /// Single-pair score for `(Dz,)` and `(De,)` vectors.
    pub fn score(&self, z: &Tensor, e: &Tensor) -> Result<Tensor> {
        let out = self.logits(&z.unsqueeze(0)?, &e.unsqueeze(0)?)?;
        Ok(out.squeeze(0)?.squeeze(0)?)
    }
}

/// InfoNCE over the rows of a square `(N, N)` or batched `(M, N, N)` logit
/// matrix with the diagonal as the positive class; batched inputs are
/// averaged over matrices.
pub fn nce_loss(logits: &Tensor) -> Result<Tensor> {
    let dims = logits.dims();
    let batched = match dims.len() {
        2 => logits.unsqueeze(0)?,
        3 => logits.clone(),
        _ => return Err(shape_err(format!("logit matrix must be 2-d or 3-d, got {dims:?}"))),
    };
    let (_, n, m) = batched.dims3()?;
    if n != m {
        return Err(shape_err(format!("logit matrix must be square, got {n}x{m}")));
    }
    let max = batched.max_keepdim(D::Minus1)?.detach();
    let shifted = batched.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum(D::Minus1)?.log()?;
    let eye = Tensor::eye(n, batched.dtype(), batched.device())?;
    let diag = batched.broadcast_mul(&eye)?.sum(D::Minus1)?;
    let diag = (diag - max.squeeze(D::Minus1)?)?;
    Ok((lse - diag)?.mean_all()?)
}

/// How the contrastive branch predicts future latents.
pub enum Predictor<'a> {
    Linear(&'a LinearDynamics),
    /// The RSSM prior, sampled.
    Shared(&'a Rssm),
}

/// Logit matrices for every anchor `t0 in 0..T-K`, as an `(A, B*K, B*K)`
/// tensor. Row `b*K + (k-1)` holds the prediction for item `b` at `t0 + k`;
/// column `b'*K + (k'-1)` the target embedding of item `b'` at `t0 + k'`.
pub fn build_logit_matrices(
    posts: &[LatentState],
    actions: &Tensor,
    targets: &Tensor,
    k_max: usize,
    predictor: &Predictor,
    bilinear: &Bilinear,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let t = posts.len();
    let (b, ta, _) = actions.dims3()?;
    let (bt, tt, _) = targets.dims3()?;
    if k_max == 0 {
        return Err(Error::Contract("logit matrix needs K >= 1".into()));
    }
    if t < k_max + 1 || ta != t || tt != t || bt != b {
        return Err(Error::Config(format!(
            "logit matrix needs T >= K + 1 and matching shapes (T = {t}, K = {k_max}, actions {:?}, targets {:?})",
            actions.dims(),
            targets.dims()
        )));
    }
    let anchors = t - k_max;
    // anchors stacked on the batch axis: row a*B + b
    let starts: Vec<&LatentState> = posts[..anchors].iter().collect();
    let mut state = LatentState::cat(&starts)?;
    let mut z = state.z()?;
    let step_action = |k: usize| -> Result<Tensor> {
        let parts: Vec<Tensor> = (0..anchors)
            .map(|a| actions.narrow(1, a + k, 1).and_then(|x| x.squeeze(1)))
            .collect::<std::result::Result<_, _>>()?;
        Ok(Tensor::cat(&parts, 0)?)
    };
    let mut preds = Vec::with_capacity(k_max);
    for k in 0..k_max {
        let a = step_action(k)?;
        z = match predictor {
            Predictor::Linear(dynamics) => dynamics.step(&z, &a)?,
            Predictor::Shared(rssm) => {
                state = rssm.imagine_step(&state, &a, rng)?;
                state.z()?
            }
        };
        preds.push(z.reshape((anchors, b, 1, ()))?);
    }
    let dz = preds[0].dims()[3];
    let preds = Tensor::cat(&preds, 2)?.reshape((anchors, b * k_max, dz))?;
    let tgt: Vec<Tensor> = (0..anchors)
        .map(|a| targets.narrow(1, a + 1, k_max))
        .collect::<std::result::Result<_, _>>()?;
    let de = targets.dims()[2];
    let tgt = Tensor::stack(&tgt, 0)?.reshape((anchors, b * k_max, de))?;
    bilinear.logits(&preds, &tgt)
}

/// Per-offset InfoNCE losses `nce_k`, `k = 1..=K`: for each `k`, the row
/// losses of the rows predicting offset `k`, averaged over anchors and
/// batch items.
pub fn nce_terms(logits: &Tensor, batch: usize, k_max: usize) -> Result<Vec<Tensor>> {
    let (anchors, n, _) = logits.dims3()?;
    if n != batch * k_max {
        return Err(shape_err(format!("logit matrix size {n} is not B*K = {}", batch * k_max)));
    }
    let max = logits.max_keepdim(D::Minus1)?.detach();
    let lse = (logits.broadcast_sub(&max)?.exp()?.sum(D::Minus1)?.log()? + max.squeeze(D::Minus1)?)?;
    let eye = Tensor::eye(n, logits.dtype(), logits.device())?;
    let diag = logits.broadcast_mul(&eye)?.sum(D::Minus1)?;
    let rows = (lse - diag)?.reshape((anchors, batch, k_max))?;
    (0..k_max)
        .map(|k| Ok(rows.narrow(2, k, 1)?.mean_all()?))
        .collect()
}

/// Plain InfoNCE: at each step, a `B x B` matrix of posterior latents
/// against same-step target embeddings, as `(T, B, B)`.
pub fn plain_logit_matrices(posts: &[LatentState], targets: &Tensor, bilinear: &Bilinear) -> Result<Tensor> {
    let zs: Vec<Tensor> = posts
        .iter()
        .map(|p| p.z().and_then(|z| Ok(z.unsqueeze(0)?)))
        .collect::<Result<_>>()?;
    let z = Tensor::cat(&zs, 0)?;
    let e = targets.transpose(0, 1)?.contiguous()?;
    bilinear.logits(&z, &e)
}

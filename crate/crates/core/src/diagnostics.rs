//! Representation diagnostics: ridge probes from latents to ground-truth
//! positions, the InfoNCE mutual-information bound, and a probe decoder
//! trained on frozen latents for open-loop video prediction.

use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::codecs::gif::{GifEncoder, Repeat};
use image::{Delay, Frame, RgbImage, RgbaImage};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{frame_tensor, OnlineFilter};
use crate::augment::TARGET_HW;
use crate::envs::ACTION_DIM;
use crate::error::{Error, Result};
use crate::latent::{self, Decoder, LatentState};
use crate::nn::{self, ParamStore};
use crate::optim::Optimizer;
use crate::replay::{denormalize_pixel, Episode};
use crate::world_model::WorldModel;

pub const PROBE_RIDGE: f64 = 1e-4;
pub const CONTEXT_FRAMES: usize = 5;
/// Held-out samples are those with `index % HOLDOUT_EVERY == HOLDOUT_EVERY - 1`.
pub const HOLDOUT_EVERY: usize = 5;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ProbeReport {
    /// Held-out R² per target dimension.
    pub r2: Vec<f64>,
    pub samples: usize,
    pub source: String,
}

impl ProbeReport {
    pub fn mean_r2(&self, dims: &[usize]) -> f64 {
        dims.iter().map(|&d| self.r2[d]).sum::<f64>() / dims.len() as f64
    }
}

/// Ridge regression from `latents` (N x D) to `targets` (N x G) with the
/// default ridge, R² reported on a deterministic 20% held-out split.
pub fn linear_probe(latents: &DMatrix<f64>, targets: &DMatrix<f64>, source: &str) -> Result<ProbeReport> {
    linear_probe_with(latents, targets, PROBE_RIDGE, source)
}

pub fn linear_probe_with(latents: &DMatrix<f64>, targets: &DMatrix<f64>, ridge: f64, source: &str) -> Result<ProbeReport> {
    let (n, d) = latents.shape();
    let g = targets.ncols();
    if targets.nrows() != n {
        return Err(Error::Shape(format!("{n} latent rows vs {} target rows", targets.nrows())));
    }
    if n < 10 * d {
        return Err(Error::Config(format!("probe needs at least {} samples for latent dim {d}, got {n}", 10 * d)));
    }
    let held = |i: usize| i % HOLDOUT_EVERY == HOLDOUT_EVERY - 1;
    let train: Vec<usize> = (0..n).filter(|&i| !held(i)).collect();
    let test: Vec<usize> = (0..n).filter(|&i| held(i)).collect();
    let x_train = latents.select_rows(&train);
    let y_train = targets.select_rows(&train);
    let x_mean = x_train.row_mean();
    let y_mean = y_train.row_mean();
    let xc = DMatrix::from_fn(train.len(), d, |i, j| x_train[(i, j)] - x_mean[j]);
    let yc = DMatrix::from_fn(train.len(), g, |i, j| y_train[(i, j)] - y_mean[j]);
    let gram = xc.transpose() * &xc + DMatrix::<f64>::identity(d, d) * ridge;
    let rhs = xc.transpose() * &yc;
    let weights = match gram.clone().cholesky() {
        Some(c) => c.solve(&rhs),
        None => gram
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Numeric("probe normal equations are singular".into()))?,
    };
    let x_test = latents.select_rows(&test);
    let y_test = targets.select_rows(&test);
    let xt = DMatrix::from_fn(test.len(), d, |i, j| x_test[(i, j)] - x_mean[j]);
    let pred = xt * weights;
    let r2 = (0..g)
        .map(|j| {
            let truth: Vec<f64> = (0..test.len()).map(|i| y_test[(i, j)]).collect();
            let mean = truth.iter().sum::<f64>() / truth.len() as f64;
            let sst: f64 = truth.iter().map(|t| (t - mean).powi(2)).sum();
            let sse: f64 = (0..test.len()).map(|i| (truth[i] - pred[(i, j)] - y_mean[j]).powi(2)).sum();
            if sst <= f64::EPSILON {
                0.0
            } else {
                1.0 - sse / sst
            }
        })
        .collect();
    Ok(ProbeReport {
        r2,
        samples: n,
        source: source.to_string(),
    })
}

/// `max(log N - loss, 0)`.
pub fn mi_lower_bound(nce_loss: f64, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::Config("InfoNCE bound needs N >= 1".into()));
    }
    Ok(((n as f64).ln() - nce_loss).max(0.0))
}

/// Filters each episode with posterior means; returns per-frame latents
/// `[h; mean]` and the matching ground-truth vectors.
pub fn collect_latents(model: &WorldModel, episodes: &[Episode]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let mut rows = Vec::new();
    let mut gts = Vec::new();
    for ep in episodes {
        let mut filter = OnlineFilter::new(model)?;
        for t in 0..ep.len() {
            let state = filter.observe(ep.image(t), None)?;
            rows.push(nn::to_f64_vec(&state.z_mean()?)?);
            gts.push(ep.ground_truth_at(t).iter().map(|&v| v as f64).collect::<Vec<_>>());
            filter.record_action(&action_tensor(ep.action(t), model.dtype())?);
        }
    }
    let d = rows.first().map_or(0, |r| r.len());
    let g = gts.first().map_or(0, |r| r.len());
    let x = DMatrix::from_row_iterator(rows.len(), d, rows.into_iter().flatten());
    let y = DMatrix::from_row_iterator(gts.len(), g, gts.into_iter().flatten());
    Ok((x, y))
}

/// A decoder trained on detached latents of a frozen world model.
pub struct ProbeDecoder {
    pub store: ParamStore,
    pub decoder: Decoder,
}

#[derive(Debug, Clone, Copy)]
pub struct ProbeTraining {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for ProbeTraining {
    fn default() -> Self {
        Self {
            steps: 500,
            batch: 32,
            lr: 1e-3,
        }
    }
}

/// Trains a decoder from frozen latents to center-cropped frames. Only the
/// probe's own parameters are updated.
pub fn train_probe_decoder(model: &WorldModel, episodes: &[Episode], training: ProbeTraining, rng: &mut impl Rng) -> Result<(ProbeDecoder, Vec<f64>)> {
    let dtype = model.dtype();
    let mut store = ParamStore::new(dtype);
    let decoder = Decoder::new(&mut store, "probe", model.config(), rng)?;
    let mut latents = Vec::new();
    let mut frames = Vec::new();
    for ep in episodes {
        let mut filter = OnlineFilter::new(model)?;
        for t in 0..ep.len() {
            let state = filter.observe(ep.image(t), None)?;
            latents.push(state.z_mean()?.detach());
            frames.push(frame_tensor(ep.image(t), dtype)?.squeeze(0)?);
            let action = action_tensor(ep.action(t), dtype)?;
            filter.record_action(&action);
        }
    }
    if latents.is_empty() {
        return Err(Error::Config("probe decoder needs at least one frame".into()));
    }
    let mut opt = Optimizer::new(store.vars(), training.lr, 1e-7, 100.0)?;
    let mut order: Vec<usize> = (0..latents.len()).collect();
    let mut losses = Vec::with_capacity(training.steps);
    let mut cursor = order.len();
    for _ in 0..training.steps {
        let mut idx = Vec::with_capacity(training.batch);
        while idx.len() < training.batch.min(order.len()) {
            if cursor >= order.len() {
                order.shuffle(rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let z: Vec<&Tensor> = idx.iter().map(|&i| &latents[i]).collect();
        let x: Vec<&Tensor> = idx.iter().map(|&i| &frames[i]).collect();
        let z = Tensor::cat(&z, 0)?;
        let x = Tensor::cat(&x, 0)?;
        let loss = latent::pixel_nll(&decoder.forward(&z)?, &x)?;
        losses.push(nn::scalar(&loss)?);
        opt.step(&loss)?;
    }
    Ok((ProbeDecoder { store, decoder }, losses))
}

fn action_tensor(action: &[f32], dtype: DType) -> Result<Tensor> {
    let data: Vec<f32> = action.to_vec();
    Ok(Tensor::from_vec(data, (1, ACTION_DIM), &Device::Cpu)?.to_dtype(dtype)?)
}

fn image_to_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let values = nn::to_f64_vec(t)?;
    Ok(values.into_iter().map(|v| denormalize_pixel(v as f32)).collect())
}

/// Predicted and ground-truth 64x64x3 frames of an open-loop rollout.
pub struct Video {
    pub predicted: Vec<Vec<u8>>,
    pub truth: Vec<Vec<u8>>,
    pub context: usize,
}

/// Reconstructs the first `CONTEXT_FRAMES` frames from filtered posteriors,
/// then generates `horizon` frames open-loop from the prior (mean path)
/// under the recorded actions.
pub fn open_loop_video(model: &WorldModel, probe: &ProbeDecoder, episode: &Episode, horizon: usize) -> Result<Video> {
    let needed = CONTEXT_FRAMES + horizon;
    if needed > episode.len() {
        return Err(Error::Config(format!(
            "horizon {horizon} after {CONTEXT_FRAMES} context frames needs {needed} stored steps, episode has {}",
            episode.len()
        )));
    }
    let dtype = model.dtype();
    let mut filter = OnlineFilter::new(model)?;
    let mut predicted = Vec::with_capacity(needed);
    let mut truth = Vec::with_capacity(needed);
    for t in 0..CONTEXT_FRAMES {
        let state = filter.observe(episode.image(t), None)?;
        predicted.push(image_to_bytes(&probe.decoder.forward(&state.z_mean()?)?)?);
        truth.push(image_to_bytes(&frame_tensor(episode.image(t), dtype)?)?);
        if t + 1 < CONTEXT_FRAMES {
            filter.record_action(&action_tensor(episode.action(t), dtype)?);
        }
    }
    let mut state: LatentState = filter.state().clone();
    for t in CONTEXT_FRAMES..needed {
        let action = action_tensor(episode.action(t - 1), dtype)?;
        let (h, prior) = model.rssm.prior_step(&state, &action)?;
        state = LatentState::from_dist(h, &prior, prior.mean.clone());
        predicted.push(image_to_bytes(&probe.decoder.forward(&state.z_mean()?)?)?);
        truth.push(image_to_bytes(&frame_tensor(episode.image(t), dtype)?)?);
    }
    Ok(Video {
        predicted,
        truth,
        context: CONTEXT_FRAMES,
    })
}

/// Writes `frame_XXX.png` (truth above prediction) and `video.gif`.
pub fn write_video(video: &Video, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (w, h) = (TARGET_HW as u32, TARGET_HW as u32);
    let mut gif_frames = Vec::with_capacity(video.predicted.len());
    for (i, (pred, truth)) in video.predicted.iter().zip(&video.truth).enumerate() {
        let mut data = truth.clone();
        data.extend_from_slice(pred);
        let img = RgbImage::from_raw(w, 2 * h, data).ok_or_else(|| Error::Shape("frame buffer size mismatch".into()))?;
        img.save(dir.join(format!("frame_{i:03}.png")))?;
        let rgba: RgbaImage = image::DynamicImage::ImageRgb8(img).to_rgba8();
        gif_frames.push(Frame::from_parts(rgba, 0, 0, Delay::from_numer_denom_ms(100, 1)));
    }
    let file = fs::File::create(dir.join("video.gif"))?;
    let mut encoder = GifEncoder::new(file);
    encoder.set_repeat(Repeat::Infinite)?;
    encoder.encode_frames(gif_frames)?;
    Ok(())
}

//! Episodic replay: whole trajectories in, fixed-length windows out.

use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, Array3, Array5};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{EnvStep, ACTION_DIM, CHANNELS, GROUND_TRUTH_DIM, IMAGE_LEN, IMAGE_SIZE};
use crate::error::{Error, Result};

/// One trajectory. Index `t` holds image `t`, the action taken after
/// observing image `t` (zero on the final step), the reward of arriving at
/// image `t`, and whether image `t` is terminal.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub task: String,
    pub seed: u64,
    pub images: Vec<u8>,
    pub actions: Vec<f32>,
    pub rewards: Vec<f32>,
    pub terminals: Vec<bool>,
    pub ground_truth: Vec<f32>,
}

impl Episode {
    pub fn new(task: &str, seed: u64, first: &EnvStep) -> Self {
        let mut ep = Self {
            task: task.to_string(),
            seed,
            images: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            terminals: Vec::new(),
            ground_truth: Vec::new(),
        };
        ep.push_step(first);
        ep
    }

    fn push_step(&mut self, step: &EnvStep) {
        self.images.extend_from_slice(&step.image);
        self.actions.extend(std::iter::repeat_n(0.0, ACTION_DIM));
        self.rewards.push(step.reward as f32);
        self.terminals.push(step.terminal);
        self.ground_truth.extend(step.ground_truth.iter().map(|&v| v as f32));
    }

    /// Records `action` against the latest image, then appends the step it produced.
    pub fn push(&mut self, action: &[f64], step: &EnvStep) {
        let last = self.len() - 1;
        for (i, a) in action.iter().enumerate().take(ACTION_DIM) {
            self.actions[last * ACTION_DIM + i] = *a as f32;
        }
        self.push_step(step);
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn image(&self, t: usize) -> &[u8] {
        &self.images[t * IMAGE_LEN..(t + 1) * IMAGE_LEN]
    }

    pub fn action(&self, t: usize) -> &[f32] {
        &self.actions[t * ACTION_DIM..(t + 1) * ACTION_DIM]
    }

    pub fn ground_truth_at(&self, t: usize) -> &[f32] {
        &self.ground_truth[t * GROUND_TRUTH_DIM..(t + 1) * GROUND_TRUTH_DIM]
    }

    /// Sum of rewards after the first frame.
    pub fn score(&self) -> f64 {
        self.rewards.iter().skip(1).map(|&r| r as f64).sum()
    }

    fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.images.len() != n * IMAGE_LEN
            || self.actions.len() != n * ACTION_DIM
            || self.terminals.len() != n
            || self.ground_truth.len() != n * GROUND_TRUTH_DIM
        {
            return Err(Error::Shape("episode arrays have inconsistent lengths".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct EpisodeHeader {
    format: String,
    length: usize,
    task: String,
    seed: u64,
    image_shape: [usize; 3],
    action_dim: usize,
    ground_truth_dim: usize,
}

const EPISODE_FORMAT: &str = "dreaming-episode-v1";

/// Writes a JSON header line followed by little-endian raw arrays:
/// images (u8), actions (f32), rewards (f32), terminals (u8), ground truth (f32).
pub fn save_episode(episode: &Episode, path: &Path) -> Result<()> {
    episode.validate()?;
    let header = EpisodeHeader {
        format: EPISODE_FORMAT.into(),
        length: episode.len(),
        task: episode.task.clone(),
        seed: episode.seed,
        image_shape: [IMAGE_SIZE, IMAGE_SIZE, CHANNELS],
        action_dim: ACTION_DIM,
        ground_truth_dim: GROUND_TRUTH_DIM,
    };
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    w.write_all(&episode.images)?;
    for v in episode.actions.iter().chain(&episode.rewards) {
        w.write_f32::<LittleEndian>(*v)?;
    }
    for &t in &episode.terminals {
        w.write_u8(t as u8)?;
    }
    for v in &episode.ground_truth {
        w.write_f32::<LittleEndian>(*v)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_episode(path: &Path) -> Result<Episode> {
    let mut r = BufReader::new(File::open(path)?);
    let mut line = String::new();
    r.read_line(&mut line)?;
    let header: EpisodeHeader = serde_json::from_str(line.trim_end())?;
    if header.format != EPISODE_FORMAT
        || header.image_shape != [IMAGE_SIZE, IMAGE_SIZE, CHANNELS]
        || header.action_dim != ACTION_DIM
        || header.ground_truth_dim != GROUND_TRUTH_DIM
    {
        return Err(Error::Shape(format!("unsupported episode layout in {}", path.display())));
    }
    let n = header.length;
    let mut images = vec![0u8; n * IMAGE_LEN];
    r.read_exact(&mut images)?;
    let mut read_f32 = |count: usize| -> Result<Vec<f32>> {
        let mut v = vec![0f32; count];
        r.read_f32_into::<LittleEndian>(&mut v)?;
        Ok(v)
    };
    let actions = read_f32(n * ACTION_DIM)?;
    let rewards = read_f32(n)?;
    let mut term = vec![0u8; n];
    r.read_exact(&mut term)?;
    let mut gt = vec![0f32; n * GROUND_TRUTH_DIM];
    r.read_f32_into::<LittleEndian>(&mut gt)?;
    let ep = Episode {
        task: header.task,
        seed: header.seed,
        images,
        actions,
        rewards,
        terminals: term.into_iter().map(|b| b != 0).collect(),
        ground_truth: gt,
    };
    ep.validate()?;
    Ok(ep)
}

/// A batch of `B` windows of length `T`. Images are normalized to
/// `[-0.5, 0.5]`; the action at index `t` follows image `t`.
#[derive(Debug, Clone)]
pub struct SequenceBatch {
    /// (B, T, 72, 72, 3)
    pub images: Array5<f32>,
    /// (B, T, A)
    pub actions: Array3<f32>,
    /// (B, T)
    pub rewards: Array2<f32>,
    /// (B, T), 0 on terminal steps and gamma elsewhere.
    pub discounts: Array2<f32>,
    /// (B, T, G); for probes only.
    pub ground_truth: Array3<f32>,
}

impl SequenceBatch {
    pub fn batch_size(&self) -> usize {
        self.rewards.dim().0
    }

    pub fn seq_len(&self) -> usize {
        self.rewards.dim().1
    }

    /// Builds a batch from explicit windows `(episode, offset)`.
    pub fn from_windows(windows: &[(&Episode, usize)], seq_len: usize, gamma: f64) -> Result<Self> {
        let b = windows.len();
        let mut images = Array5::<f32>::zeros((b, seq_len, IMAGE_SIZE, IMAGE_SIZE, CHANNELS));
        let mut actions = Array3::<f32>::zeros((b, seq_len, ACTION_DIM));
        let mut rewards = Array2::<f32>::zeros((b, seq_len));
        let mut discounts = Array2::<f32>::zeros((b, seq_len));
        let mut gt = Array3::<f32>::zeros((b, seq_len, GROUND_TRUTH_DIM));
        for (i, (ep, offset)) in windows.iter().enumerate() {
            if offset + seq_len > ep.len() {
                return Err(Error::Shape(format!(
                    "window [{offset}, {}) exceeds episode of length {}",
                    offset + seq_len,
                    ep.len()
                )));
            }
            for t in 0..seq_len {
                let src = offset + t;
                let dst = images
                    .slice_mut(ndarray::s![i, t, .., .., ..])
                    .into_slice()
                    .expect("standard layout");
                for (d, &p) in dst.iter_mut().zip(ep.image(src)) {
                    *d = normalize_pixel(p);
                }
                for (a, &v) in ep.action(src).iter().enumerate() {
                    actions[[i, t, a]] = v;
                }
                rewards[[i, t]] = ep.rewards[src];
                discounts[[i, t]] = if ep.terminals[src] { 0.0 } else { gamma as f32 };
                for (g, &v) in ep.ground_truth_at(src).iter().enumerate() {
                    gt[[i, t, g]] = v;
                }
            }
        }
        Ok(Self {
            images,
            actions,
            rewards,
            discounts,
            ground_truth: gt,
        })
    }
}

pub fn normalize_pixel(p: u8) -> f32 {
    p as f32 / 255.0 - 0.5
}

pub fn denormalize_pixel(v: f32) -> u8 {
    ((v + 0.5) * 255.0).round().clamp(0.0, 255.0) as u8
}

/// FIFO store of whole episodes, bounded by total stored steps.
pub struct EpisodeStore {
    episodes: VecDeque<Arc<Episode>>,
    capacity: usize,
    total_steps: usize,
    inserted: u64,
}

impl EpisodeStore {
    pub fn new(capacity: usize) -> Self {
        Self {
            episodes: VecDeque::new(),
            capacity,
            total_steps: 0,
            inserted: 0,
        }
    }

    pub fn add_episode(&mut self, episode: Episode) -> Result<()> {
        episode.validate()?;
        if episode.len() > self.capacity {
            return Err(Error::Config(format!(
                "episode of {} steps exceeds replay capacity {}",
                episode.len(),
                self.capacity
            )));
        }
        self.total_steps += episode.len();
        self.episodes.push_back(Arc::new(episode));
        self.inserted += 1;
        while self.total_steps > self.capacity {
            let old = self.episodes.pop_front().expect("non-empty while over capacity");
            self.total_steps -= old.len();
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    /// Episodes ever inserted, including evicted ones.
    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    pub fn episodes(&self) -> impl Iterator<Item = &Arc<Episode>> {
        self.episodes.iter()
    }

    /// Draws `(episode index, offset)` pairs: episode uniform over those at
    /// least `seq_len` long, offset uniform over valid starts.
    pub fn sample_windows(&self, batch: usize, seq_len: usize, rng: &mut impl Rng) -> Result<Vec<(usize, usize)>> {
        let eligible: Vec<usize> = self
            .episodes
            .iter()
            .enumerate()
            .filter(|(_, e)| e.len() >= seq_len)
            .map(|(i, _)| i)
            .collect();
        if eligible.is_empty() {
            return Err(Error::NotReady(format!(
                "no stored episode has at least {seq_len} steps ({} episodes stored)",
                self.episodes.len()
            )));
        }
        Ok((0..batch)
            .map(|_| {
                let idx = eligible[rng.random_range(0..eligible.len())];
                let offset = rng.random_range(0..=self.episodes[idx].len() - seq_len);
                (idx, offset)
            })
            .collect())
    }

    pub fn sample_batch(&self, batch: usize, seq_len: usize, gamma: f64, rng: &mut impl Rng) -> Result<SequenceBatch> {
        let windows = self.sample_windows(batch, seq_len, rng)?;
        let refs: Vec<(&Episode, usize)> = windows.iter().map(|&(i, o)| (self.episodes[i].as_ref(), o)).collect();
        SequenceBatch::from_windows(&refs, seq_len, gamma)
    }
}

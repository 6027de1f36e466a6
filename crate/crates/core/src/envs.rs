//! Software-rendered point-mass tasks with a small goal marker.
//!
//! The arena is the square `[-0.5, 0.5]^2` (metres), drawn onto a 72x72
//! canvas. The agent is a 4 px disc; the target disc is 1 to 3 px, small
//! enough that its pixel-space reconstruction error is negligible next to
//! the background.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const IMAGE_SIZE: usize = 72;
pub const CHANNELS: usize = 3;
pub const IMAGE_LEN: usize = IMAGE_SIZE * IMAGE_SIZE * CHANNELS;
pub const ACTION_DIM: usize = 2;
/// Ground truth layout: agent x, agent y, target x, target y.
pub const GROUND_TRUTH_DIM: usize = 4;

pub const ARENA_HALF: f64 = 0.5;
pub const DT: f64 = 0.05;
pub const THRUST: f64 = 1.0;
pub const DAMPING: f64 = 2.0;
pub const AGENT_RADIUS_PX: i64 = 4;
const SPAWN_MARGIN: f64 = 0.05;

pub const REACH_BOUNDS: (f64, f64) = (0.0, 0.04);
pub const REACH_MARGIN: f64 = 0.15;
pub const CATCH_BOUNDS: (f64, f64) = (0.0, 0.05);
pub const VALUE_AT_MARGIN: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Dense tolerance reward around the target.
    DotReach,
    /// Reward only inside the catch radius.
    DotCatch,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::DotReach => "dot_reach",
            Task::DotCatch => "dot_catch",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dot_reach" => Ok(Task::DotReach),
            "dot_catch" => Ok(Task::DotCatch),
            other => Err(Error::Config(format!("unknown task {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Background {
    Plain,
    Checkered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub task: Task,
    pub target_radius_px: u8,
    pub background: Background,
    /// Episode length in control steps.
    pub episode_length: usize,
    pub action_repeat: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            task: Task::DotReach,
            target_radius_px: 2,
            background: Background::Plain,
            episode_length: 200,
            action_repeat: 2,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.target_radius_px) {
            return Err(Error::Config(format!(
                "target_radius_px must be 1, 2 or 3, got {}",
                self.target_radius_px
            )));
        }
        if self.action_repeat == 0 || self.episode_length == 0 {
            return Err(Error::Config("episode_length and action_repeat must be positive".into()));
        }
        if self.episode_length % self.action_repeat != 0 {
            return Err(Error::Config("episode_length must be a multiple of action_repeat".into()));
        }
        Ok(())
    }

    /// Agent decisions per episode.
    pub fn agent_steps(&self) -> usize {
        self.episode_length / self.action_repeat
    }

    pub fn reward_spec(&self) -> (f64, f64, f64) {
        match self.task {
            Task::DotReach => (REACH_BOUNDS.0, REACH_BOUNDS.1, REACH_MARGIN),
            Task::DotCatch => (CATCH_BOUNDS.0, CATCH_BOUNDS.1, 0.0),
        }
    }
}

/// Bounded reward with a long-tail falloff: 1 inside `bounds`, and
/// `1 / ((d * scale)^2 + 1)` outside where `d` is the distance to the
/// nearest bound in units of `margin` and `scale` is chosen so that the
/// value at `d = 1` equals `value_at_margin`. A zero margin gives an
/// indicator of the bounds.
pub fn tolerance(x: f64, bounds: (f64, f64), margin: f64, value_at_margin: f64) -> Result<f64> {
    let (low, high) = bounds;
    if !(low <= high) {
        return Err(Error::Config(format!("tolerance bounds out of order: ({low}, {high})")));
    }
    if !(margin >= 0.0) {
        return Err(Error::Config(format!("tolerance margin must be non-negative, got {margin}")));
    }
    if !(value_at_margin > 0.0 && value_at_margin < 1.0) {
        return Err(Error::Config(format!("value_at_margin must lie in (0, 1), got {value_at_margin}")));
    }
    let in_bounds = low <= x && x <= high;
    if in_bounds {
        return Ok(1.0);
    }
    if margin == 0.0 {
        return Ok(0.0);
    }
    let d = if x < low { (low - x) / margin } else { (x - high) / margin };
    let scale = (1.0 / value_at_margin - 1.0).sqrt();
    Ok(1.0 / ((d * scale).powi(2) + 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DotReachState {
    pub agent_pos: [f64; 2],
    pub agent_vel: [f64; 2],
    pub target_pos: [f64; 2],
    pub step: usize,
}

impl DotReachState {
    pub fn distance(&self) -> f64 {
        let dx = self.agent_pos[0] - self.target_pos[0];
        let dy = self.agent_pos[1] - self.target_pos[1];
        (dx * dx + dy * dy).sqrt()
    }

    pub fn ground_truth(&self) -> [f64; GROUND_TRUTH_DIM] {
        [self.agent_pos[0], self.agent_pos[1], self.target_pos[0], self.target_pos[1]]
    }
}

#[derive(Debug, Clone)]
pub struct EnvStep {
    /// 72x72x3, row-major HWC.
    pub image: Vec<u8>,
    pub reward: f64,
    pub terminal: bool,
    /// For probes only; never fed to the agent.
    pub ground_truth: [f64; GROUND_TRUTH_DIM],
}

/// Reward recomputed from a ground-truth vector.
pub fn reward_from_ground_truth(config: &EnvConfig, gt: &[f64]) -> Result<f64> {
    let dx = gt[0] - gt[2];
    let dy = gt[1] - gt[3];
    let (lo, hi, margin) = config.reward_spec();
    tolerance((dx * dx + dy * dy).sqrt(), (lo, hi), margin, VALUE_AT_MARGIN)
}

pub struct DotEnv {
    config: EnvConfig,
    state: DotReachState,
    rng: ChaCha8Rng,
    done: bool,
    started: bool,
}

impl DotEnv {
    pub fn new(config: EnvConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            state: DotReachState {
                agent_pos: [0.0; 2],
                agent_vel: [0.0; 2],
                target_pos: [0.0; 2],
                step: 0,
            },
            rng: ChaCha8Rng::seed_from_u64(0),
            done: false,
            started: false,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn state(&self) -> &DotReachState {
        &self.state
    }

    /// Starts an episode from an explicit state (tests and oracles).
    pub fn reset_to(&mut self, state: DotReachState) -> Result<EnvStep> {
        self.state = state;
        self.done = false;
        self.started = true;
        self.observe(false)
    }

    pub fn reset(&mut self, seed: u64) -> Result<EnvStep> {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        let lim = ARENA_HALF - SPAWN_MARGIN;
        let draw = |rng: &mut ChaCha8Rng| [rng.random_range(-lim..=lim), rng.random_range(-lim..=lim)];
        let agent = draw(&mut self.rng);
        let target = draw(&mut self.rng);
        self.reset_to(DotReachState {
            agent_pos: agent,
            agent_vel: [0.0; 2],
            target_pos: target,
            step: 0,
        })
    }

    /// Advances one control step. Components of `action` are clipped to [-1, 1].
    pub fn step(&mut self, action: &[f64]) -> Result<EnvStep> {
        if !self.started {
            return Err(Error::Protocol("step called before reset".into()));
        }
        if self.done {
            return Err(Error::Protocol("step called after the episode terminated".into()));
        }
        if action.len() != ACTION_DIM {
            return Err(Error::Shape(format!("expected {ACTION_DIM} action components, got {}", action.len())));
        }
        for i in 0..2 {
            let a = action[i].clamp(-1.0, 1.0);
            let v = self.state.agent_vel[i] + DT * (THRUST * a - DAMPING * self.state.agent_vel[i]);
            let mut p = self.state.agent_pos[i] + DT * v;
            let mut v = v;
            if p > ARENA_HALF {
                p = ARENA_HALF;
                v = 0.0;
            } else if p < -ARENA_HALF {
                p = -ARENA_HALF;
                v = 0.0;
            }
            self.state.agent_pos[i] = p;
            self.state.agent_vel[i] = v;
        }
        self.state.step += 1;
        let terminal = self.state.step >= self.config.episode_length;
        self.done = terminal;
        self.observe(terminal)
    }

    fn observe(&self, terminal: bool) -> Result<EnvStep> {
        let (lo, hi, margin) = self.config.reward_spec();
        Ok(EnvStep {
            image: render(&self.state, &self.config),
            reward: tolerance(self.state.distance(), (lo, hi), margin, VALUE_AT_MARGIN)?,
            terminal,
            ground_truth: self.state.ground_truth(),
        })
    }
}

/// Pixel containing the world point, as (row, col).
pub fn to_pixel(pos: [f64; 2]) -> (i64, i64) {
    let scale = IMAGE_SIZE as f64 / (2.0 * ARENA_HALF);
    let col = ((pos[0] + ARENA_HALF) * scale).floor() as i64;
    let row = ((ARENA_HALF - pos[1]) * scale).floor() as i64;
    let max = IMAGE_SIZE as i64 - 1;
    (row.clamp(0, max), col.clamp(0, max))
}

const BG_DARK: [u8; 3] = [40, 44, 52];
const BG_LIGHT: [u8; 3] = [70, 76, 88];
const AGENT_COLOR: [u8; 3] = [90, 170, 230];
const TARGET_COLOR: [u8; 3] = [235, 70, 60];
const CHECKER_PX: usize = 8;

fn background_pixel(bg: Background, row: usize, col: usize) -> [u8; 3] {
    match bg {
        Background::Plain => BG_DARK,
        Background::Checkered => {
            if (row / CHECKER_PX + col / CHECKER_PX) % 2 == 0 {
                BG_DARK
            } else {
                BG_LIGHT
            }
        }
    }
}

fn draw_disc(img: &mut [u8], center: (i64, i64), radius: i64, color: [u8; 3]) {
    let n = IMAGE_SIZE as i64;
    for dr in -radius..=radius {
        for dc in -radius..=radius {
            if dr * dr + dc * dc > radius * radius {
                continue;
            }
            let (r, c) = (center.0 + dr, center.1 + dc);
            if r < 0 || c < 0 || r >= n || c >= n {
                continue;
            }
            let idx = ((r * n + c) as usize) * CHANNELS;
            img[idx..idx + 3].copy_from_slice(&color);
        }
    }
}

/// Pure function of the state. The target is drawn over the agent so it
/// stays visible when reached.
pub fn render(state: &DotReachState, config: &EnvConfig) -> Vec<u8> {
    let mut img = vec![0u8; IMAGE_LEN];
    for row in 0..IMAGE_SIZE {
        for col in 0..IMAGE_SIZE {
            let idx = (row * IMAGE_SIZE + col) * CHANNELS;
            img[idx..idx + 3].copy_from_slice(&background_pixel(config.background, row, col));
        }
    }
    draw_disc(&mut img, to_pixel(state.agent_pos), AGENT_RADIUS_PX, AGENT_COLOR);
    draw_disc(&mut img, to_pixel(state.target_pos), config.target_radius_px as i64, TARGET_COLOR);
    img
}

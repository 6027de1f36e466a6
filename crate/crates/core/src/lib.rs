//! Decoder-free model-based reinforcement learning: a recurrent state-space
//! world model trained with a contrastive objective, behaviors learned in
//! latent imagination, and small pixel environments to run them on.

pub mod ablate;
pub mod agent;
pub mod augment;
pub mod behavior;
pub mod config;
pub mod diagnostics;
pub mod contrastive;
pub mod envs;
pub mod error;
pub mod latent;
pub mod nn;
pub mod optim;
pub mod plot;
pub mod replay;
pub mod train;
pub mod world_model;

pub use config::{Mode, TrainConfig};
pub use error::{Error, Result};
pub use replay::{Episode, EpisodeStore, SequenceBatch};

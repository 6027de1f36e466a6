//! The outer loop: model learning, behavior learning in imagination, and
//! environment interaction, with metrics and checkpoints.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{self, Agent, EvalReport, CONFIG_FILE};
use crate::augment::BranchRngs;
use crate::config::{Mode, TrainConfig};
use crate::error::{Error, Result};
use crate::latent::LatentState;
use crate::optim::Optimizer;
use crate::replay::EpisodeStore;
use crate::world_model::{self, LossBreakdown};

pub const METRICS_FILE: &str = "metrics.jsonl";

/// One JSON line of the metrics stream.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsRecord {
    pub env_step: u64,
    pub grad_step: u64,
    pub losses: BTreeMap<String, f64>,
    pub eval_return: Option<f64>,
    pub eval_std: Option<f64>,
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::MissingMetrics(format!("{}: {e}", path.display())))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Independent random streams derived from the run seed.
pub struct Streams {
    pub replay: ChaCha8Rng,
    pub augment: BranchRngs,
    pub model: ChaCha8Rng,
    pub behavior: ChaCha8Rng,
    pub explore: ChaCha8Rng,
    pub prefill: ChaCha8Rng,
}

pub fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        Self {
            replay: stream(seed, 1),
            augment: BranchRngs {
                online: stream(seed, 2),
                target: stream(seed, 3),
            },
            model: stream(seed, 4),
            behavior: stream(seed, 5),
            explore: stream(seed, 6),
            prefill: stream(seed, 7),
        }
    }
}

/// Environment seed of the `index`-th training episode.
pub fn episode_seed(run_seed: u64, index: u64) -> u64 {
    run_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepReport {
    pub model: LossBreakdown,
    pub behavior: crate::behavior::BehaviorStats,
    pub model_grad_norm: f64,
}

impl StepReport {
    pub fn losses(&self, mode: Mode) -> BTreeMap<String, f64> {
        let mut map = self.model.to_map(mode == Mode::PlainNce);
        map.insert("actor_loss".into(), self.behavior.actor_loss);
        map.insert("critic_loss".into(), self.behavior.critic_loss);
        map.insert("mean_value".into(), self.behavior.mean_value);
        map.insert("mean_imagined_reward".into(), self.behavior.mean_imagined_reward);
        map.insert("model_grad_norm".into(), self.model_grad_norm);
        map
    }
}

pub struct Trainer {
    pub agent: Agent,
    pub store: EpisodeStore,
    pub streams: Streams,
    model_opt: Optimizer,
    actor_opt: Optimizer,
    critic_opt: Optimizer,
    pub grad_step: u64,
    pub env_step: u64,
    pub episodes: u64,
    outdir: Option<PathBuf>,
    metrics: Option<BufWriter<File>>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Continue from the latest checkpoint in the output directory.
    pub resume: bool,
    /// Skip writing anything to disk.
    pub in_memory: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub grad_steps: u64,
    pub env_steps: u64,
    pub final_eval: EvalReport,
    pub last_losses: BTreeMap<String, f64>,
    pub checkpoints: Vec<PathBuf>,
}

impl Trainer {
    pub fn new(config: &TrainConfig, options: &TrainOptions) -> Result<Self> {
        config.validate()?;
        let mut init = stream(config.run.seed, 0);
        let agent = Agent::new(config, &mut init)?;
        let o = &config.optim;
        let model_opt = Optimizer::new(agent.model.store.vars(), o.model_lr, o.eps, o.grad_clip)?;
        let actor_opt = Optimizer::new(agent.behavior.actor_store.vars(), o.actor_lr, o.eps, o.grad_clip)?;
        let critic_opt = Optimizer::new(agent.behavior.critic_store.vars(), o.critic_lr, o.eps, o.grad_clip)?;
        let mut trainer = Self {
            agent,
            store: EpisodeStore::new(config.replay.capacity),
            streams: Streams::new(config.run.seed),
            model_opt,
            actor_opt,
            critic_opt,
            grad_step: 0,
            env_step: 0,
            episodes: 0,
            outdir: None,
            metrics: None,
        };
        if !options.in_memory {
            trainer.open_outdir(&config.run.outdir, options.resume)?;
        }
        Ok(trainer)
    }

    fn config(&self) -> &TrainConfig {
        &self.agent.config
    }

    fn open_outdir(&mut self, outdir: &Path, resume: bool) -> Result<()> {
        fs::create_dir_all(outdir)?;
        let config_path = outdir.join(CONFIG_FILE);
        let hash = self.config().hash()?;
        if resume {
            let stored = TrainConfig::load(&config_path).map_err(|e| Error::Resume(format!("cannot read {}: {e}", config_path.display())))?;
            if stored.hash()? != hash {
                return Err(Error::Resume("configuration hash differs from the run being resumed".into()));
            }
            if let Some(ckpt) = agent::latest_checkpoint(outdir)? {
                let manifest = self.agent.load_params(&ckpt)?;
                if manifest.config_hash != hash {
                    return Err(Error::Resume(format!("checkpoint {} was written by a different configuration", ckpt.display())));
                }
                self.grad_step = manifest.step;
                self.env_step = manifest.env_step;
            }
        } else {
            fs::write(&config_path, self.config().to_toml()?)?;
            if outdir.join(METRICS_FILE).exists() {
                fs::remove_file(outdir.join(METRICS_FILE))?;
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(outdir.join(METRICS_FILE))?;
        self.metrics = Some(BufWriter::new(file));
        self.outdir = Some(outdir.to_path_buf());
        Ok(())
    }

    fn write_record(&mut self, record: &MetricsRecord) -> Result<()> {
        if let Some(w) = self.metrics.as_mut() {
            serde_json::to_writer(&mut *w, record)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        Ok(())
    }

    /// Fills the buffer with uniform-random episodes.
    pub fn prefill(&mut self) -> Result<()> {
        let cfg = self.config().clone();
        for _ in 0..cfg.replay.prefill_episodes {
            let seed = episode_seed(cfg.run.seed, self.episodes);
            let ep = agent::random_episode(&cfg.task, seed, &mut self.streams.prefill)?;
            self.add_episode(ep)?;
        }
        Ok(())
    }

    fn add_episode(&mut self, ep: crate::replay::Episode) -> Result<()> {
        self.env_step += ((ep.len() - 1) * self.config().task.action_repeat) as u64;
        self.episodes += 1;
        self.store.add_episode(ep)
    }

    /// One model update followed by one actor and one critic update.
    pub fn train_step(&mut self) -> Result<StepReport> {
        let cfg = self.config().clone();
        let batch = self
            .store
            .sample_batch(cfg.replay.batch_size, cfg.replay.seq_len, cfg.behavior.gamma, &mut self.streams.replay)?;
        let inputs = world_model::prepare_inputs(&batch, cfg.objective.mode, &cfg.augment, &mut self.streams.augment, cfg.dtype())?;
        let out = self.agent.model.loss(&inputs, &mut self.streams.model)?;
        if !out.breakdown.total.is_finite() {
            return Err(Error::Numeric(format!("model loss is not finite at step {}", self.grad_step)));
        }
        let model_grad_norm = self.model_opt.step(&out.total)?;

        let posts: Vec<&LatentState> = out.filtered.posts.iter().collect();
        let start = LatentState::cat(&posts)?.detach();
        let beh = self
            .agent
            .behavior
            .losses(&self.agent.model.rssm, &self.agent.model.reward, &start, &mut self.streams.behavior)?;
        self.actor_opt.step(&beh.actor)?;
        self.critic_opt.step(&beh.critic)?;
        self.grad_step += 1;
        Ok(StepReport {
            model: out.breakdown,
            behavior: beh.stats,
            model_grad_norm,
        })
    }

    fn budget_left(&self) -> bool {
        let cfg = self.config();
        let grads_ok = cfg.schedule.max_grad_steps.is_none_or(|m| self.grad_step < m);
        grads_ok && self.env_step < cfg.schedule.total_env_steps
    }

    pub fn checkpoint(&self) -> Result<Option<PathBuf>> {
        match &self.outdir {
            Some(dir) => {
                let path = agent::checkpoint_dir(dir, self.grad_step);
                self.agent.save_checkpoint(&path, self.grad_step, self.env_step)?;
                log::info!("checkpoint {}", path.display());
                Ok(Some(path))
            }
            None => Ok(None),
        }
    }

    /// Runs the whole schedule.
    pub fn run(&mut self) -> Result<TrainSummary> {
        let cfg = self.config().clone();
        self.prefill()?;
        let mut last = BTreeMap::new();
        let mut checkpoints = Vec::new();
        let mut episodes_since_start = 0usize;
        while self.budget_left() {
            for _ in 0..cfg.schedule.train_steps_per_episode {
                if cfg.schedule.max_grad_steps.is_some_and(|m| self.grad_step >= m) {
                    break;
                }
                let report = self.train_step()?;
                last = report.losses(cfg.objective.mode);
                if self.grad_step % cfg.schedule.log_every == 0 {
                    let record = MetricsRecord {
                        env_step: self.env_step,
                        grad_step: self.grad_step,
                        losses: last.clone(),
                        eval_return: None,
                        eval_std: None,
                    };
                    self.write_record(&record)?;
                }
            }
            let seed = episode_seed(cfg.run.seed, self.episodes);
            let ep = self.agent.run_episode(&cfg.task, seed, Some(&mut self.streams.explore))?;
            self.add_episode(ep)?;
            episodes_since_start += 1;
            if cfg.schedule.eval_every_episodes > 0 && episodes_since_start % cfg.schedule.eval_every_episodes == 0 {
                self.eval_record(&last, cfg.schedule.eval_episodes)?;
            }
            if cfg.schedule.checkpoint_every_episodes > 0 && episodes_since_start % cfg.schedule.checkpoint_every_episodes == 0 {
                checkpoints.extend(self.checkpoint()?);
            }
        }
        let final_eval = self.eval_record(&last, cfg.schedule.eval_episodes)?;
        checkpoints.extend(self.checkpoint()?);
        Ok(TrainSummary {
            grad_steps: self.grad_step,
            env_steps: self.env_step,
            final_eval,
            last_losses: last,
            checkpoints,
        })
    }

    fn eval_record(&mut self, losses: &BTreeMap<String, f64>, episodes: usize) -> Result<EvalReport> {
        let report = self.agent.evaluate(episodes)?;
        log::info!(
            "grad step {} env step {}: eval return {:.2} ± {:.2}",
            self.grad_step,
            self.env_step,
            report.mean,
            report.std
        );
        let record = MetricsRecord {
            env_step: self.env_step,
            grad_step: self.grad_step,
            losses: losses.clone(),
            eval_return: Some(report.mean),
            eval_std: Some(report.std),
        };
        self.write_record(&record)?;
        Ok(report)
    }
}

/// Trains with `config`, writing artifacts to `config.run.outdir`.
pub fn train(config: &TrainConfig, options: &TrainOptions) -> Result<TrainSummary> {
    Trainer::new(config, options)?.run()
}

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use dreaming::ablate::{self, AblationMatrix};
use dreaming::agent::{self, Agent};
use dreaming::config::{Preset, TrainConfig};
use dreaming::diagnostics::{self, ProbeTraining};
use dreaming::envs::{EnvConfig, Task};
use dreaming::plot;
use dreaming::replay::{load_episode, save_episode, Episode};
use dreaming::train::{self, TrainOptions};

#[derive(Parser)]
#[command(name = "dreaming", version, about = "Decoder-free model-based RL on small pixel tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Full,
    Desk,
    Tiny,
    Smoke,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Full => Preset::Full,
            PresetArg::Desk => Preset::Desk,
            PresetArg::Tiny => Preset::Tiny,
            PresetArg::Smoke => Preset::Smoke,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train an agent from a configuration file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, env = "DREAMING_SEED")]
        seed: Option<u64>,
        #[arg(long, env = "DREAMING_OUTDIR")]
        outdir: Option<PathBuf>,
        /// Continue from the latest checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint with the deterministic policy.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        /// Also report a uniform-random policy over this many episodes.
        #[arg(long, default_value_t = 100)]
        baseline_episodes: usize,
    },
    /// Run the dynamics x augmentation x K ablation matrix.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        matrix: PathBuf,
        #[arg(long, env = "DREAMING_OUTDIR")]
        outdir: Option<PathBuf>,
    },
    /// Plot evaluation curves of one or more runs.
    Plot {
        #[arg(required = true)]
        rundirs: Vec<PathBuf>,
        #[arg(long, default_value = "plots")]
        out: PathBuf,
    },
    /// Linear probe from filtered latents to ground-truth positions.
    Probe {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_parser = parse_task)]
        task: Task,
        #[arg(long, default_value_t = 20)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Open-loop video prediction through an independently trained decoder.
    Video {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        episode: PathBuf,
        #[arg(long)]
        horizon: usize,
        #[arg(long, default_value = "video")]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        probe_episodes: usize,
        #[arg(long, default_value_t = 500)]
        probe_steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Record one episode to an archive file, with a checkpoint's policy or
    /// uniform-random actions.
    Record {
        #[arg(long, value_parser = parse_task)]
        task: Task,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Print a preset configuration as TOML.
    Preset {
        #[arg(value_enum)]
        name: PresetArg,
    },
}

fn parse_task(s: &str) -> std::result::Result<Task, String> {
    Task::parse(s).map_err(|e| e.to_string())
}

fn random_episodes(env: &EnvConfig, n: usize, seed: u64) -> Result<Vec<Episode>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| agent::random_episode(env, seed.wrapping_mul(1_000).wrapping_add(i as u64), &mut rng).map_err(Into::into))
        .collect()
}

fn print_json(value: &serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, seed, outdir, resume } => {
            let mut cfg = TrainConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            if let Some(s) = seed {
                cfg.run.seed = s;
            }
            if let Some(o) = outdir {
                cfg.run.outdir = o;
            }
            let summary = train::train(&cfg, &TrainOptions { resume, in_memory: false })?;
            print_json(&json!({
                "outdir": cfg.run.outdir,
                "grad_steps": summary.grad_steps,
                "env_steps": summary.env_steps,
                "eval_return": summary.final_eval.mean,
                "eval_std": summary.final_eval.std,
                "checkpoints": summary.checkpoints,
            }))
        }
        Command::Eval { ckpt, episodes, baseline_episodes } => {
            if episodes == 0 {
                bail!("--episodes must be positive");
            }
            let (agent, manifest) = Agent::load(&ckpt)?;
            let report = agent.evaluate(episodes)?;
            let baseline = agent::random_baseline(&agent.config.task, baseline_episodes.max(1), 0)?;
            print_json(&json!({
                "checkpoint": ckpt,
                "step": manifest.step,
                "episodes": episodes,
                "mean": report.mean,
                "std": report.std,
                "returns": report.returns,
                "random_baseline": { "episodes": baseline.returns.len(), "mean": baseline.mean, "std": baseline.std },
            }))
        }
        Command::Ablate { config, matrix, outdir } => {
            let cfg = TrainConfig::load(&config)?;
            let m = AblationMatrix::load(&matrix).with_context(|| format!("loading {}", matrix.display()))?;
            let out = outdir.unwrap_or_else(|| cfg.run.outdir.join("ablation"));
            let table = ablate::run(&cfg, &m, &out)?;
            print!("{}", ablate::format_table(&table));
            Ok(())
        }
        Command::Plot { rundirs, out } => {
            let path = plot::plot_runs(&rundirs, &out)?;
            println!("{}", path.display());
            Ok(())
        }
        Command::Probe { ckpt, task, episodes, seed } => {
            let (agent, _) = Agent::load(&ckpt)?;
            let env = EnvConfig { task, ..agent.config.task.clone() };
            let eps = random_episodes(&env, episodes, seed)?;
            let (x, y) = diagnostics::collect_latents(&agent.model, &eps)?;
            let report = diagnostics::linear_probe(&x, &y, agent.config.objective.mode.as_str())?;
            print_json(&json!({
                "source": report.source,
                "samples": report.samples,
                "r2": report.r2,
                "agent_position_r2": report.mean_r2(&[0, 1]),
                "target_position_r2": report.mean_r2(&[2, 3]),
            }))
        }
        Command::Video {
            ckpt,
            episode,
            horizon,
            out,
            probe_episodes,
            probe_steps,
            seed,
        } => {
            let (agent, _) = Agent::load(&ckpt)?;
            let ep = load_episode(&episode)?;
            let train_eps = random_episodes(&agent.config.task, probe_episodes, seed)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let training = ProbeTraining {
                steps: probe_steps,
                ..ProbeTraining::default()
            };
            let (probe, losses) = diagnostics::train_probe_decoder(&agent.model, &train_eps, training, &mut rng)?;
            let video = diagnostics::open_loop_video(&agent.model, &probe, &ep, horizon)?;
            diagnostics::write_video(&video, &out)?;
            print_json(&json!({
                "out": out,
                "frames": video.predicted.len(),
                "context": video.context,
                "probe_final_loss": losses.last(),
            }))
        }
        Command::Record { task, out, seed, ckpt } => {
            let ep = match ckpt {
                Some(path) => {
                    let (agent, _) = Agent::load(&path)?;
                    let env = EnvConfig { task, ..agent.config.task.clone() };
                    agent.run_episode(&env, seed, None)?
                }
                None => {
                    let env = EnvConfig { task, ..EnvConfig::default() };
                    agent::random_episode(&env, seed, &mut ChaCha8Rng::seed_from_u64(seed))?
                }
            };
            save_episode(&ep, &out)?;
            print_json(&json!({ "out": out, "length": ep.len(), "return": ep.score() }))
        }
        Command::Preset { name } => {
            print!("{}", TrainConfig::preset(name.into()).to_toml()?);
            Ok(())
        }
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        log::error!("{e:#}");
        std::process::exit(1);
    }
}

//! Ablation runner over predictive dynamics, augmentation and overshooting
//! distance. Every cell trains the contrastive mode from the same base
//! configuration and reports its final evaluation and losses.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{AugmentConfig, DynamicsKind, Mode, TrainConfig};
use crate::error::{Error, Result};
use crate::train::{self, TrainOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentCell {
    pub crop: bool,
    pub jitter: bool,
}

impl AugmentCell {
    pub fn name(&self) -> &'static str {
        match (self.crop, self.jitter) {
            (false, false) => "none",
            (true, false) => "crop",
            (false, true) => "jitter",
            (true, true) => "crop+jitter",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationMatrix {
    pub dynamics: Vec<DynamicsKind>,
    pub augment: Vec<AugmentCell>,
    pub overshoot: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Gradient steps per cell; overrides the schedule of the base config.
    pub grad_steps: Option<u64>,
    pub eval_episodes: Option<usize>,
}

impl Default for AblationMatrix {
    fn default() -> Self {
        Self {
            dynamics: vec![DynamicsKind::Linear, DynamicsKind::Shared],
            augment: vec![
                AugmentCell { crop: false, jitter: false },
                AugmentCell { crop: true, jitter: false },
                AugmentCell { crop: false, jitter: true },
                AugmentCell { crop: true, jitter: true },
            ],
            overshoot: vec![1, 3, 5, 7],
            seeds: vec![0],
            grad_steps: None,
            eval_episodes: None,
        }
    }
}

impl AblationMatrix {
    pub fn load(path: &Path) -> Result<Self> {
        let m: Self = toml::from_str(&fs::read_to_string(path)?)?;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dynamics.is_empty() || self.augment.is_empty() || self.overshoot.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("every ablation axis needs at least one value".into()));
        }
        if self.overshoot.contains(&0) {
            return Err(Error::Config("overshooting distance must be at least 1".into()));
        }
        Ok(())
    }

    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &dynamics in &self.dynamics {
            for &augment in &self.augment {
                for &k in &self.overshoot {
                    out.push(Cell { dynamics, augment, k });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub dynamics: DynamicsKind,
    pub augment: AugmentCell,
    pub k: usize,
}

impl Cell {
    pub fn dynamics_name(&self) -> &'static str {
        match self.dynamics {
            DynamicsKind::Linear => "linear",
            DynamicsKind::Shared => "shared",
        }
    }

    pub fn slug(&self) -> String {
        format!("{}_{}_K{}", self.dynamics_name(), self.augment.name().replace('+', "-"), self.k)
    }

    /// The base configuration with this cell's switches applied.
    pub fn apply(&self, base: &TrainConfig, seed: u64, grad_steps: Option<u64>, eval_episodes: Option<usize>, outdir: PathBuf) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.objective.mode = Mode::Dreaming;
        cfg.objective.dynamics = self.dynamics;
        cfg.objective.overshoot = self.k;
        cfg.augment = AugmentConfig {
            crop: self.augment.crop,
            jitter: self.augment.jitter,
            jitter_strength: base.augment.jitter_strength,
        };
        cfg.replay.seq_len = cfg.replay.seq_len.max(self.k + 1);
        cfg.task.episode_length = cfg.task.episode_length.max(cfg.replay.seq_len * cfg.task.action_repeat);
        cfg.run.seed = seed;
        cfg.run.outdir = outdir;
        if let Some(steps) = grad_steps {
            cfg.schedule.max_grad_steps = Some(steps);
            cfg.schedule.eval_every_episodes = 0;
        }
        cfg.schedule.checkpoint_every_episodes = 0;
        if let Some(n) = eval_episodes {
            cfg.schedule.eval_episodes = n;
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub dynamics: String,
    pub augment: String,
    pub k: usize,
    pub seed: u64,
    pub seq_len: usize,
    pub grad_steps: u64,
    pub env_steps: u64,
    pub eval_return: f64,
    pub eval_std: f64,
    pub nce_total: f64,
    pub kl_total: f64,
    pub total_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub base_label: String,
    pub matrix: AblationMatrix,
    pub results: Vec<CellResult>,
}

/// Trains every cell for every seed under `outdir/cells/` and writes
/// `ablation.json` and `ablation.txt` into `outdir`.
pub fn run(base: &TrainConfig, matrix: &AblationMatrix, outdir: &Path) -> Result<AblationTable> {
    matrix.validate()?;
    fs::create_dir_all(outdir)?;
    let mut results = Vec::new();
    for cell in matrix.cells() {
        for &seed in &matrix.seeds {
            let dir = outdir.join("cells").join(cell.slug()).join(format!("seed_{seed}"));
            let cfg = cell.apply(base, seed, matrix.grad_steps, matrix.eval_episodes, dir);
            let summary = train::train(&cfg, &TrainOptions::default())?;
            let sum_prefix = |p: &str| summary.last_losses.iter().filter(|(k, _)| k.starts_with(p)).map(|(_, v)| v).sum::<f64>();
            results.push(CellResult {
                dynamics: cell.dynamics_name().into(),
                augment: cell.augment.name().into(),
                k: cell.k,
                seed,
                seq_len: cfg.replay.seq_len,
                grad_steps: summary.grad_steps,
                env_steps: summary.env_steps,
                eval_return: summary.final_eval.mean,
                eval_std: summary.final_eval.std,
                nce_total: sum_prefix("nce_"),
                kl_total: sum_prefix("kl_"),
                total_loss: summary.last_losses.get("total").copied().unwrap_or(f64::NAN),
            });
        }
    }
    let table = AblationTable {
        base_label: base.label(),
        matrix: matrix.clone(),
        results,
    };
    fs::write(outdir.join("ablation.json"), serde_json::to_string_pretty(&table)?)?;
    fs::write(outdir.join("ablation.txt"), format_table(&table))?;
    Ok(table)
}

fn mean_std(vals: &[f64]) -> (f64, f64) {
    let n = vals.len().max(1) as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn marginal(table: &AblationTable, out: &mut String, title: &str, levels: &[String], key: impl Fn(&CellResult) -> String) {
    let _ = writeln!(out, "{title}");
    let _ = writeln!(out, "{:<14} {:>6} {:>20}", "", "runs", "return (mean ± std)");
    for level in levels {
        let vals: Vec<f64> = table.results.iter().filter(|r| &key(r) == level).map(|r| r.eval_return).collect();
        let (m, s) = mean_std(&vals);
        let _ = writeln!(out, "{:<14} {:>6} {:>11.2} ± {:<7.2}", level, vals.len(), m, s);
    }
    out.push('\n');
}

/// Plain-text rendering: one marginal table per axis (averaged over the
/// other axes and seeds) followed by every cell.
pub fn format_table(table: &AblationTable) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "ablation over dynamics x augmentation x K (base {})\n", table.base_label);
    let m = &table.matrix;
    let dyn_levels: Vec<String> = m
        .dynamics
        .iter()
        .map(|d| match d {
            DynamicsKind::Linear => "linear".to_string(),
            DynamicsKind::Shared => "shared".to_string(),
        })
        .collect();
    marginal(table, &mut out, "predictive dynamics", &dyn_levels, |r| r.dynamics.clone());
    let aug_levels: Vec<String> = m.augment.iter().map(|a| a.name().to_string()).collect();
    marginal(table, &mut out, "augmentation", &aug_levels, |r| r.augment.clone());
    let k_levels: Vec<String> = m.overshoot.iter().map(|k| format!("K={k}")).collect();
    marginal(table, &mut out, "overshooting distance", &k_levels, |r| format!("K={}", r.k));

    let _ = writeln!(out, "all cells");
    let _ = writeln!(
        out,
        "{:<8} {:<12} {:>3} {:>6} {:>7} {:>10} {:>9} {:>9} {:>9} {:>10}",
        "dynamics", "augment", "K", "seed", "steps", "return", "std", "nce", "kl", "total"
    );
    for r in &table.results {
        let _ = writeln!(
            out,
            "{:<8} {:<12} {:>3} {:>6} {:>7} {:>10.2} {:>9.2} {:>9.4} {:>9.4} {:>10.4}",
            r.dynamics, r.augment, r.k, r.seed, r.grad_steps, r.eval_return, r.eval_std, r.nce_total, r.kl_total, r.total_loss
        );
    }
    out
}

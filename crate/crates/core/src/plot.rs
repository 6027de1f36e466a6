//! Learning curves: evaluation return against environment steps, mean over
//! seeds with a one-standard-deviation band.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use crate::agent::CONFIG_FILE;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::train::{read_metrics, METRICS_FILE};

/// Mean and spread of one group of runs at each shared evaluation step.
#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub label: String,
    pub seeds: usize,
    /// `(env_step, mean, std)`.
    pub points: Vec<(u64, f64, f64)>,
}

fn eval_points(run: &Path) -> Result<Vec<(u64, f64)>> {
    let path = run.join(METRICS_FILE);
    if !path.exists() {
        return Err(Error::MissingMetrics(format!("no {METRICS_FILE} in {}", run.display())));
    }
    let points: Vec<(u64, f64)> = read_metrics(&path)?
        .into_iter()
        .filter_map(|r| r.eval_return.map(|v| (r.env_step, v)))
        .collect();
    if points.is_empty() {
        return Err(Error::MissingMetrics(format!("{} has no evaluation records", path.display())));
    }
    Ok(points)
}

fn run_label(run: &Path) -> Result<String> {
    let cfg_path = run.join(CONFIG_FILE);
    if cfg_path.exists() {
        let cfg = TrainConfig::load(&cfg_path)?;
        Ok(format!("{} {}", cfg.task.task.as_str(), cfg.label()))
    } else {
        Ok(run.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default())
    }
}

/// Groups runs by configuration label and averages over seeds at the
/// evaluation steps every run in the group shares.
pub fn curves(runs: &[PathBuf]) -> Result<Vec<Curve>> {
    if runs.is_empty() {
        return Err(Error::MissingMetrics("no run directories given".into()));
    }
    let mut groups: BTreeMap<String, Vec<Vec<(u64, f64)>>> = BTreeMap::new();
    for run in runs {
        groups.entry(run_label(run)?).or_default().push(eval_points(run)?);
    }
    let mut out = Vec::with_capacity(groups.len());
    for (label, series) in groups {
        let maps: Vec<BTreeMap<u64, f64>> = series.iter().map(|s| s.iter().copied().collect()).collect();
        let steps: Vec<u64> = maps[0].keys().copied().filter(|k| maps.iter().all(|m| m.contains_key(k))).collect();
        let points = steps
            .into_iter()
            .map(|s| {
                let vals: Vec<f64> = maps.iter().map(|m| m[&s]).collect();
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
                (s, mean, var.sqrt())
            })
            .collect();
        out.push(Curve {
            label,
            seeds: maps.len(),
            points,
        });
    }
    Ok(out)
}

fn plot_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Plot(e.to_string())
}

/// Draws all curves into one SVG file.
pub fn draw(curves: &[Curve], path: &Path) -> Result<()> {
    let xs = curves.iter().flat_map(|c| c.points.iter().map(|p| p.0 as f64));
    let x_max = xs.fold(1.0f64, f64::max);
    let (mut y_min, mut y_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for c in curves {
        for &(_, m, s) in &c.points {
            y_min = y_min.min(m - s);
            y_max = y_max.max(m + s);
        }
    }
    if !y_min.is_finite() {
        return Err(Error::MissingMetrics("no points to plot".into()));
    }
    let pad = ((y_max - y_min) * 0.05).max(1e-3);
    let root = SVGBackend::new(path, (900, 560)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("evaluation return", ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(0.0..x_max, (y_min - pad)..(y_max + pad))
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("environment steps")
        .y_desc("return")
        .draw()
        .map_err(plot_err)?;
    for (i, c) in curves.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        if c.seeds > 1 {
            let mut band: Vec<(f64, f64)> = c.points.iter().map(|&(x, m, s)| (x as f64, m + s)).collect();
            band.extend(c.points.iter().rev().map(|&(x, m, s)| (x as f64, m - s)));
            chart
                .draw_series(std::iter::once(Polygon::new(band, color.mix(0.2).filled())))
                .map_err(plot_err)?;
        }
        let label = format!("{} (n={})", c.label, c.seeds);
        chart
            .draw_series(LineSeries::new(c.points.iter().map(|&(x, m, _)| (x as f64, m)), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(label)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Reads the runs and writes `returns.svg` into `outdir`.
pub fn plot_runs(runs: &[PathBuf], outdir: &Path) -> Result<PathBuf> {
    let curves = curves(runs)?;
    std::fs::create_dir_all(outdir)?;
    let path = outdir.join("returns.svg");
    draw(&curves, &path)?;
    Ok(path)
}

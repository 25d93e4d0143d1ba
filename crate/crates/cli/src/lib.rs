//! Command implementations behind the `robustfl` binary.

pub mod output;
pub mod plot;
pub mod sweep;

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use robustfl_core::metrics;
use robustfl_core::orchestrator;
use robustfl_core::ExperimentConfig;

use crate::output::OutputSet;

pub const METRICS_FILE: &str = "metrics.csv";
pub const SWEEP_PLOT: &str = "sweep.svg";

/// Reads and validates an experiment config.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    ExperimentConfig::from_toml_str(&text).with_context(|| format!("in {}", path.display()))
}

/// Config from an optional path, with the seed override applied.
pub fn resolve_config(path: Option<&Path>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => load_config(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seed {
        cfg.master_seed = s;
    }
    Ok(cfg)
}

/// The two attack-free reference runs for pre-filtering experiments.
///
/// Baseline 1 keeps the full data (the attack plan, if any, with ratio 0).
/// Baseline 2 drops a fraction `r_a` of every cache's authentic samples, where
/// `r_a` is the configured attack ratio.
pub fn baseline_modes(cfg: &ExperimentConfig) -> (ExperimentConfig, ExperimentConfig) {
    let r_a = cfg.attack.as_ref().map_or(0.0, |p| p.ratio);
    let mut full = cfg.clone();
    if let Some(plan) = &mut full.attack {
        plan.ratio = 0.0;
    }
    full.exclude_ratio = 0.0;
    let mut reduced = cfg.without_attack();
    reduced.exclude_ratio = r_a;
    (full, reduced)
}

fn write_csv(out: &mut OutputSet, path: &Path, records: &[robustfl_core::MetricsRecord]) -> Result<()> {
    out.write(path, metrics::to_csv_string(records).as_bytes())
}

/// Runs one experiment into `dir/metrics.csv`.
pub fn cmd_run(cfg: &ExperimentConfig, dir: &Path, out: &mut OutputSet) -> Result<PathBuf> {
    let records = orchestrator::run_experiment(cfg)?;
    let path = dir.join(METRICS_FILE);
    write_csv(out, &path, &records)?;
    Ok(path)
}

/// Runs both baselines into `dir/baseline1.csv` and `dir/baseline2.csv`,
/// plus a combined plot.
pub fn cmd_baselines(cfg: &ExperimentConfig, dir: &Path, out: &mut OutputSet) -> Result<Vec<PathBuf>> {
    let (b1, b2) = baseline_modes(cfg);
    b2.validate()?;
    let pre = orchestrator::pretrain(&b1)?;
    let (r1, r2) = rayon::join(
        || orchestrator::run_pretrained(&b1, pre.clone()),
        || orchestrator::run_pretrained(&b2, pre.clone()),
    );
    let mut paths = Vec::new();
    for (name, records) in [("baseline1.csv", r1?), ("baseline2.csv", r2?)] {
        let p = dir.join(name);
        write_csv(out, &p, &records)?;
        paths.push(p);
    }
    let svg = plot::plot_files("baselines", &paths)?;
    let p = dir.join("baselines.svg");
    out.write(&p, svg.as_bytes())?;
    paths.push(p);
    Ok(paths)
}

/// Runs a sweep into `dir`: one CSV per cell and one combined SVG.
pub fn cmd_sweep(spec_path: &Path, seed: Option<u64>, dir: &Path, out: &mut OutputSet) -> Result<Vec<PathBuf>> {
    let (mut spec, base) = sweep::SweepSpec::load(spec_path)?;
    if let Some(s) = seed {
        spec.seeds = vec![s];
    }
    let cells = spec.cells(&base)?;
    let results = sweep::run_cells(&cells)?;
    let mut paths = Vec::with_capacity(cells.len() + 1);
    for (cell, records) in cells.iter().zip(&results) {
        let p = dir.join(format!("{}.csv", cell.name));
        write_csv(out, &p, records)?;
        paths.push(p);
    }
    let title = spec.title.clone().unwrap_or_else(|| "sweep".into());
    let svg = plot::plot_files(&title, &paths)?;
    let p = dir.join(SWEEP_PLOT);
    out.write(&p, svg.as_bytes())?;
    paths.push(p);
    Ok(paths)
}

/// Renders CSV files into one SVG at `target`.
pub fn cmd_plot(inputs: &[PathBuf], title: &str, target: &Path, out: &mut OutputSet) -> Result<()> {
    let svg = plot::plot_files(title, inputs)?;
    out.write(target, svg.as_bytes())
}

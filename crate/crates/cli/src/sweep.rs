//! Sweeps: a base config crossed with aggregator, attack, deployment, r_a
//! and seed axes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use robustfl_core::attacks::{AttackMode, AttackPlan, Deployment};
use robustfl_core::orchestrator::{self, Pretrained};
use robustfl_core::{AggregatorKind, ExperimentConfig, MetricsRecord};
use serde::Deserialize;

/// Attack axis entry; `none` runs without an adversary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeAxis {
    None,
    Outdate,
    Collusion,
    Reverse,
}

impl ModeAxis {
    fn attack(self) -> Option<AttackMode> {
        match self {
            ModeAxis::None => None,
            ModeAxis::Outdate => Some(AttackMode::Outdate),
            ModeAxis::Collusion => Some(AttackMode::Collusion),
            ModeAxis::Reverse => Some(AttackMode::Reverse),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    /// Base experiment config, relative to the sweep file.
    pub base: Option<PathBuf>,
    pub title: Option<String>,
    pub aggregators: Vec<AggregatorKind>,
    pub modes: Vec<ModeAxis>,
    #[serde(default = "default_deployments")]
    pub deployments: Vec<Deployment>,
    #[serde(default = "default_ratios")]
    pub ratios: Vec<f64>,
    pub seeds: Vec<u64>,
}

fn default_deployments() -> Vec<Deployment> {
    vec![Deployment::Widespread]
}

fn default_ratios() -> Vec<f64> {
    vec![0.2]
}

/// One experiment of a sweep.
#[derive(Debug, Clone)]
pub struct Cell {
    pub name: String,
    pub config: ExperimentConfig,
}

impl SweepSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).context("parsing sweep spec")?;
        for (axis, empty) in [
            ("aggregators", spec.aggregators.is_empty()),
            ("modes", spec.modes.is_empty()),
            ("deployments", spec.deployments.is_empty()),
            ("ratios", spec.ratios.is_empty()),
            ("seeds", spec.seeds.is_empty()),
        ] {
            if empty {
                bail!("sweep axis `{axis}` is empty");
            }
        }
        Ok(spec)
    }

    /// Loads the spec and its base config.
    pub fn load(path: &Path) -> Result<(Self, ExperimentConfig)> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let spec = Self::from_toml_str(&text).with_context(|| format!("in {}", path.display()))?;
        let base = match &spec.base {
            Some(rel) => {
                let full = path.parent().unwrap_or(Path::new(".")).join(rel);
                crate::load_config(&full)?
            }
            None => ExperimentConfig::default(),
        };
        Ok((spec, base))
    }

    /// Expands the axes into validated cells. Attack-free cells ignore the
    /// deployment and ratio axes, so they appear once per aggregator and seed.
    pub fn cells(&self, base: &ExperimentConfig) -> Result<Vec<Cell>> {
        let mut cells = Vec::new();
        for agg in &self.aggregators {
            for &mode in &self.modes {
                let variants: Vec<Option<(AttackMode, Deployment, f64)>> = match mode.attack() {
                    None => vec![None],
                    Some(m) => self
                        .deployments
                        .iter()
                        .flat_map(|&d| self.ratios.iter().map(move |&r| Some((m, d, r))))
                        .collect(),
                };
                for v in variants {
                    for &seed in &self.seeds {
                        let mut cfg = base.clone();
                        cfg.master_seed = seed;
                        cfg.aggregator = *agg;
                        cfg.attack = v.map(|(m, d, r)| AttackPlan {
                            mode: m,
                            deployment: d,
                            ratio: r,
                            ..base.attack.clone().unwrap_or_default()
                        });
                        cfg.validate().map_err(anyhow::Error::from)?;
                        let attack = match v {
                            None => "none".to_string(),
                            Some((m, d, r)) => format!("{}_{}_ra{}", m.name(), d.name(), r),
                        };
                        let name = sanitize(&format!("{}_{}_seed{}", agg.name(), attack, seed));
                        cells.push(Cell { name, config: cfg });
                    }
                }
            }
        }
        Ok(cells)
    }
}

fn sanitize(name: &str) -> String {
    let mut out = String::with_capacity(name.len());
    for c in name.chars() {
        let c = if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' };
        if !(c == '_' && out.ends_with('_')) {
            out.push(c);
        }
    }
    out.trim_matches('_').to_string()
}

/// Runs every cell, sharing one pre-training per seed. Results come back in
/// cell order regardless of scheduling.
pub fn run_cells(cells: &[Cell]) -> Result<Vec<Vec<MetricsRecord>>> {
    let mut seeds: Vec<u64> = cells.iter().map(|c| c.config.master_seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let pretrained: BTreeMap<u64, Pretrained> = seeds
        .par_iter()
        .map(|&s| {
            let cfg = &cells.iter().find(|c| c.config.master_seed == s).expect("seed from cells").config;
            orchestrator::pretrain(cfg).map(|p| (s, p))
        })
        .collect::<robustfl_core::Result<_>>()?;
    cells
        .par_iter()
        .map(|c| {
            log::info!("running {}", c.name);
            orchestrator::run_pretrained(&c.config, pretrained[&c.config.master_seed].clone())
                .with_context(|| format!("sweep cell {}", c.name))
        })
        .collect()
}

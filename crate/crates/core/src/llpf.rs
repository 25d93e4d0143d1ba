//! Local loss pre-filtering.
//!
//! Each SBS scores its cached samples with the current global model. The
//! per-sample losses are compared against
//!
//! ```text
//! Phi(x) = 1/2 + 1/2 * erf(k_sigma * mu / sqrt(2) * (x - mu))
//! ```
//!
//! where `mu` is the median loss. Samples with `Phi(loss) > theta` sit in the
//! high-loss tail and are treated as untrusted; each one is overwritten by a
//! uniformly drawn trusted sample, so the cache length never changes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::median_in_place;
use crate::channel::CachedDataset;
use crate::error::{Error, Result};
use crate::nn::{self, NetworkSpec, ParamVector};
use crate::rng::SimRng;

/// Location used to centre the CDF.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MuMode {
    Median,
    /// Sum of all losses in the cache.
    Sum,
}

/// How a sample's squared errors are reduced to one loss value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossReduction {
    /// Mean over grid elements.
    Mean,
    /// Sum over grid elements (squared Frobenius norm of the residual).
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlpfConfig {
    pub enabled: bool,
    pub k_sigma: f64,
    pub theta: f64,
    pub mu_mode: MuMode,
    pub loss: LossReduction,
}

impl Default for LlpfConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            k_sigma: 0.6,
            theta: 0.95,
            mu_mode: MuMode::Median,
            loss: LossReduction::Sum,
        }
    }
}

impl LlpfConfig {
    pub fn enabled() -> Self {
        Self {
            enabled: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.k_sigma > 0.0) || !self.k_sigma.is_finite() {
            return Err(Error::InvalidConfig("llpf.k_sigma must be > 0".into()));
        }
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return Err(Error::InvalidConfig("llpf.theta must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Per-sample losses aligned with the cache order.
#[derive(Debug, Clone, PartialEq)]
pub struct LossSet(pub Vec<f64>);

impl LossSet {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn median(&self) -> f64 {
        if self.0.is_empty() {
            return 0.0;
        }
        let mut v = self.0.clone();
        median_in_place(&mut v)
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn location(&self, mode: MuMode) -> f64 {
        match mode {
            MuMode::Median => self.median(),
            MuMode::Sum => self.sum(),
        }
    }
}

pub fn per_sample_losses(spec: &NetworkSpec, params: &ParamVector, cache: &CachedDataset, reduction: LossReduction) -> Result<LossSet> {
    let mut losses = nn::per_sample_mse(spec, params, &cache.samples)?;
    if reduction == LossReduction::Sum {
        let cells: usize = spec.output_dims().iter().product();
        for l in &mut losses {
            *l *= cells as f64;
        }
    }
    Ok(LossSet(losses))
}

pub fn trunc_gauss_cdf(x: f64, mu: f64, k_sigma: f64) -> Result<f64> {
    if !(mu > 0.0) || !mu.is_finite() {
        return Err(Error::DegenerateScale(mu));
    }
    Ok(0.5 + 0.5 * libm::erf(k_sigma * mu / std::f64::consts::SQRT_2 * (x - mu)))
}

/// Largest gap between the empirical CDF of `losses` and the fitted curve.
pub fn cdf_fit_gap(losses: &LossSet, mu: f64, k_sigma: f64) -> Result<f64> {
    let mut v = losses.0.clone();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mut gap: f64 = 0.0;
    for (i, &x) in v.iter().enumerate() {
        let model = trunc_gauss_cdf(x, mu, k_sigma)?;
        gap = gap.max((model - i as f64 / n).abs()).max((model - (i + 1) as f64 / n).abs());
    }
    Ok(gap)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LlpfReport {
    /// Cache indices classified as untrusted (and replaced).
    pub untrusted: Vec<usize>,
    pub mu: f64,
    /// Set when no sample could be classified or no trusted sample was left.
    pub warning: bool,
}

/// Classifies each loss: `true` marks an untrusted sample.
pub fn classify(losses: &LossSet, cfg: &LlpfConfig) -> Result<Vec<bool>> {
    let mu = losses.location(cfg.mu_mode);
    losses
        .0
        .iter()
        .map(|&l| trunc_gauss_cdf(l, mu, cfg.k_sigma).map(|p| p > cfg.theta))
        .collect()
}

/// Filters one cache in place.
pub fn filter_cache(spec: &NetworkSpec, params: &ParamVector, cache: &mut CachedDataset, cfg: &LlpfConfig, rng: &mut SimRng) -> Result<LlpfReport> {
    if cache.is_empty() {
        return Err(Error::EmptyCache);
    }
    let losses = per_sample_losses(spec, params, cache, cfg.loss)?;
    let mu = losses.location(cfg.mu_mode);
    if !(mu > 0.0) || !mu.is_finite() {
        // Median loss of zero: nothing to scale against.
        return Ok(LlpfReport {
            untrusted: Vec::new(),
            mu,
            warning: true,
        });
    }
    let flags = classify(&losses, cfg)?;
    let trusted: Vec<usize> = flags.iter().enumerate().filter(|(_, &u)| !u).map(|(i, _)| i).collect();
    let untrusted: Vec<usize> = flags.iter().enumerate().filter(|(_, &u)| u).map(|(i, _)| i).collect();
    if untrusted.is_empty() {
        return Ok(LlpfReport {
            untrusted,
            mu,
            warning: false,
        });
    }
    if trusted.is_empty() {
        return Ok(LlpfReport {
            untrusted: Vec::new(),
            mu,
            warning: true,
        });
    }
    for &i in &untrusted {
        let r = trusted[rng.random_range(0..trusted.len())];
        cache.samples[i] = cache.samples[r].clone();
    }
    Ok(LlpfReport {
        untrusted,
        mu,
        warning: false,
    })
}

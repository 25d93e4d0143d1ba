//! Aggregation of local weight updates into the next global model.
//!
//! All aggregators work on the flat parameter view and treat each coordinate
//! independently, except FedBE, which additionally distills an ensemble of
//! sampled models into one network.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, NetworkSpec, ParamBlock, ParamVector};
use crate::optim::{self, OptimizerConfig, OptimizerState};
use crate::rng::SimRng;
use crate::tensor::Tensor;

/// Floor applied to FedBE's per-coordinate variance.
pub const FEDBE_VARIANCE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct WeightUpdate {
    pub params: Vec<f64>,
    /// Cached dataset length used as the aggregation weight.
    pub weight: usize,
    pub sbs_id: usize,
}

impl WeightUpdate {
    pub fn new(params: Vec<f64>, weight: usize, sbs_id: usize) -> Self {
        Self { params, weight, sbs_id }
    }
}

/// Spread estimator for the StoMedian filter width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StdMode {
    /// Divide by N.
    Population,
    /// Divide by N - 1.
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AggregatorKind {
    FedAvg,
    TrimmedMean {
        trim: usize,
    },
    FedMedian,
    FedBe {
        #[serde(default = "default_fedbe_samples")]
        samples: usize,
        #[serde(default = "default_distill_epochs")]
        distill_epochs: usize,
    },
    StoMedian {
        #[serde(default = "default_stomedian_epsilon")]
        epsilon: f64,
        #[serde(default = "default_std_mode")]
        std: StdMode,
    },
}

fn default_fedbe_samples() -> usize {
    10
}
fn default_distill_epochs() -> usize {
    20
}
fn default_stomedian_epsilon() -> f64 {
    1e-8
}
fn default_std_mode() -> StdMode {
    StdMode::Population
}

impl Default for AggregatorKind {
    fn default() -> Self {
        AggregatorKind::FedAvg
    }
}

impl AggregatorKind {
    pub fn fed_be(samples: usize) -> Self {
        AggregatorKind::FedBe {
            samples,
            distill_epochs: default_distill_epochs(),
        }
    }

    pub fn sto_median() -> Self {
        AggregatorKind::StoMedian {
            epsilon: default_stomedian_epsilon(),
            std: StdMode::Population,
        }
    }

    /// Short label used in CSV output and file names.
    pub fn name(&self) -> String {
        match self {
            AggregatorKind::FedAvg => "fedavg".into(),
            AggregatorKind::TrimmedMean { trim } => format!("trimmed_mean({trim})"),
            AggregatorKind::FedMedian => "fedmedian".into(),
            AggregatorKind::FedBe { samples, .. } => format!("fedbe({samples})"),
            AggregatorKind::StoMedian { epsilon, .. } => format!("stomedian({epsilon:e})"),
        }
    }

    pub fn validate(&self, sbs_count: usize) -> Result<()> {
        match *self {
            AggregatorKind::TrimmedMean { trim } if 2 * trim >= sbs_count => {
                Err(Error::TrimTooLarge { trim, count: sbs_count })
            }
            AggregatorKind::FedBe { samples: 0, .. } => Err(Error::InvalidConfig("FedBE needs S >= 1".into())),
            AggregatorKind::StoMedian { epsilon, .. } if !(epsilon > 0.0) => {
                Err(Error::InvalidConfig("StoMedian epsilon must be > 0".into()))
            }
            _ => Ok(()),
        }
    }
}

fn check_updates(updates: &[WeightUpdate]) -> Result<usize> {
    let first = updates.first().ok_or(Error::EmptyUpdates)?;
    let len = first.params.len();
    for u in updates {
        if u.params.len() != len {
            return Err(Error::LengthMismatch {
                expected: len,
                got: u.params.len(),
            });
        }
    }
    Ok(len)
}

/// `sum_n (l_n / sum(l)) * w_n` over the listed `(weight, value)` pairs.
///
/// Returns the shared value exactly when all values agree.
fn weighted_mean(pairs: impl Iterator<Item = (f64, f64)> + Clone) -> f64 {
    let total: f64 = pairs.clone().map(|(l, _)| l).sum();
    let mut it = pairs.clone();
    if let Some((_, v0)) = it.next() {
        if it.all(|(_, v)| v == v0) {
            return v0;
        }
    }
    pairs.map(|(l, v)| (l / total) * v).sum()
}

pub fn fed_avg(updates: &[WeightUpdate]) -> Result<Vec<f64>> {
    let len = check_updates(updates)?;
    Ok((0..len)
        .map(|j| weighted_mean(updates.iter().map(|u| (u.weight as f64, u.params[j]))))
        .collect())
}

/// Coordinate-wise trimmed mean.
///
/// Per coordinate the `trim` lowest and `trim` highest values are dropped and
/// the survivors are averaged with their own dataset lengths. Survivors are
/// summed in update order, so `trim = 0` reproduces [`fed_avg`] bit for bit.
pub fn trimmed_mean(updates: &[WeightUpdate], trim: usize) -> Result<Vec<f64>> {
    let len = check_updates(updates)?;
    let n = updates.len();
    if 2 * trim >= n {
        return Err(Error::TrimTooLarge { trim, count: n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut keep = vec![false; n];
    Ok((0..len)
        .map(|j| {
            order.sort_by(|&a, &b| updates[a].params[j].total_cmp(&updates[b].params[j]).then(a.cmp(&b)));
            keep.fill(false);
            for &i in &order[trim..n - trim] {
                keep[i] = true;
            }
            weighted_mean(
                updates
                    .iter()
                    .zip(&keep)
                    .filter(|(_, &k)| k)
                    .map(|(u, _)| (u.weight as f64, u.params[j])),
            )
        })
        .collect())
}

/// Median with the midpoint convention for even counts. Sorts `values`.
pub(crate) fn median_in_place(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        let (a, b) = (values[n / 2 - 1], values[n / 2]);
        if a == b {
            a
        } else {
            (a + b) / 2.0
        }
    }
}

pub fn fed_median(updates: &[WeightUpdate]) -> Result<Vec<f64>> {
    let len = check_updates(updates)?;
    let mut col = vec![0.0; updates.len()];
    Ok((0..len)
        .map(|j| {
            for (c, u) in col.iter_mut().zip(updates) {
                *c = u.params[j];
            }
            median_in_place(&mut col)
        })
        .collect())
}

/// The StoMedian log transform.
#[inline]
pub fn log_transform(w: f64, epsilon: f64) -> f64 {
    if w > 0.0 {
        -(w + epsilon).ln()
    } else {
        (w - epsilon).abs().ln()
    }
}

/// Per-coordinate StoMedian filter probabilities, normalized with the
/// dataset lengths. Row `n` of the result belongs to update `n`.
pub fn sto_median_weights(updates: &[WeightUpdate], epsilon: f64, std_mode: StdMode) -> Result<Vec<Vec<f64>>> {
    let len = check_updates(updates)?;
    let n = updates.len();
    let mut probs = vec![vec![0.0; len]; n];
    let mut col = vec![0.0; n];
    let mut sorted = vec![0.0; n];
    for j in 0..len {
        transformed_column(updates, j, epsilon, &mut col);
        for (k, p) in coordinate_filter(&col, &mut sorted, updates, epsilon, std_mode).into_iter().enumerate() {
            probs[k][j] = p;
        }
    }
    Ok(probs)
}

fn transformed_column(updates: &[WeightUpdate], j: usize, epsilon: f64, out: &mut [f64]) {
    for (o, u) in out.iter_mut().zip(updates) {
        *o = log_transform(u.params[j], epsilon);
    }
}

/// Normalized `p_{n,j}` for one coordinate given the transformed column.
fn coordinate_filter(col: &[f64], scratch: &mut [f64], updates: &[WeightUpdate], epsilon: f64, std_mode: StdMode) -> Vec<f64> {
    let n = col.len();
    scratch.copy_from_slice(col);
    let mu = median_in_place(scratch);
    let mean = col.iter().sum::<f64>() / n as f64;
    let ss: f64 = col.iter().map(|v| (v - mean) * (v - mean)).sum();
    let denom = match std_mode {
        StdMode::Population => n as f64,
        StdMode::Sample => (n as f64 - 1.0).max(1.0),
    };
    let sigma = (ss / denom).sqrt().max(epsilon);
    // The Gaussian normalizer cancels after normalization; exponents are
    // shifted by their maximum so no probability underflows to zero.
    let expo: Vec<f64> = col
        .iter()
        .map(|v| {
            let z = (v - mu) / sigma;
            -0.5 * z * z
        })
        .collect();
    let peak = expo.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let scored: Vec<f64> = expo
        .iter()
        .zip(updates)
        .map(|(e, u)| (e - peak).exp() * u.weight as f64)
        .collect();
    let total: f64 = scored.iter().sum();
    scored.into_iter().map(|s| s / total).collect()
}

/// StoMedian: median-centred Gaussian filter over log-transformed weights.
pub fn sto_median(updates: &[WeightUpdate], epsilon: f64) -> Result<Vec<f64>> {
    sto_median_with(updates, epsilon, StdMode::Population)
}

pub fn sto_median_with(updates: &[WeightUpdate], epsilon: f64, std_mode: StdMode) -> Result<Vec<f64>> {
    let len = check_updates(updates)?;
    for (i, u) in updates.iter().enumerate() {
        if let Some(j) = u.params.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteWeight { update: i, coord: j });
        }
    }
    let n = updates.len();
    let mut col = vec![0.0; n];
    let mut scratch = vec![0.0; n];
    Ok((0..len)
        .map(|j| {
            let first = updates[0].params[j];
            let (lo, hi) = updates.iter().fold((first, first), |(lo, hi), u| {
                (lo.min(u.params[j]), hi.max(u.params[j]))
            });
            if lo == hi {
                return lo;
            }
            transformed_column(updates, j, epsilon, &mut col);
            let p = coordinate_filter(&col, &mut scratch, updates, epsilon, std_mode);
            let w: f64 = p.iter().zip(updates).map(|(p, u)| p * u.params[j]).sum();
            w.clamp(lo, hi)
        })
        .collect())
}

/// FedBE's diagonal Gaussian: length-weighted mean and variance (floored).
pub fn fed_be_moments(updates: &[WeightUpdate]) -> Result<(Vec<f64>, Vec<f64>)> {
    let len = check_updates(updates)?;
    let total: f64 = updates.iter().map(|u| u.weight as f64).sum();
    let mu = fed_avg(updates)?;
    let var = (0..len)
        .map(|j| {
            let v: f64 = updates
                .iter()
                .map(|u| {
                    let d = u.params[j] - mu[j];
                    (u.weight as f64 / total) * d * d
                })
                .sum();
            v.max(FEDBE_VARIANCE_FLOOR)
        })
        .collect();
    Ok((mu, var))
}

/// Draws `count` weight vectors from `N(mu, diag(var))`, sample by sample,
/// coordinate by coordinate.
pub fn sample_diag_gaussian(mu: &[f64], var: &[f64], count: usize, rng: &mut SimRng) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| {
            mu.iter()
                .zip(var)
                .map(|(m, v)| {
                    let z: f64 = rng.sample(StandardNormal);
                    m + v.sqrt() * z
                })
                .collect()
        })
        .collect()
}

/// Everything FedBE needs besides the updates.
pub struct FedBeContext<'a> {
    pub spec: &'a NetworkSpec,
    pub layout: &'a [ParamBlock],
    /// Server-held inputs the ensemble is distilled on.
    pub distill_inputs: &'a [Tensor],
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
}

/// FedBE: sample an ensemble from the fitted Gaussian, average its
/// predictions on the distillation inputs, and distill them into one model
/// starting from the mean.
pub fn fed_be(updates: &[WeightUpdate], samples: usize, distill_epochs: usize, ctx: &FedBeContext<'_>, rng: &mut SimRng) -> Result<Vec<f64>> {
    if samples == 0 {
        return Err(Error::InvalidConfig("FedBE needs S >= 1".into()));
    }
    if ctx.distill_inputs.is_empty() {
        return Err(Error::EmptyDistillSet);
    }
    let (mu, var) = fed_be_moments(updates)?;
    let draws = sample_diag_gaussian(&mu, &var, samples, rng);
    let out_dims = ctx.spec.output_dims();
    let mut targets: Vec<Tensor> = ctx.distill_inputs.iter().map(|_| Tensor::zeros(&out_dims)).collect();
    for w in draws {
        let member = ParamVector::unflatten(ctx.layout, w)?;
        let preds = nn::forward_many(ctx.spec, &member, ctx.distill_inputs)?;
        for (acc, p) in targets.iter_mut().zip(preds) {
            for (a, v) in acc.data_mut().iter_mut().zip(p.data()) {
                *a += v;
            }
        }
    }
    let inv = 1.0 / samples as f64;
    let pairs: Vec<(Tensor, Tensor)> = ctx
        .distill_inputs
        .iter()
        .cloned()
        .zip(targets.into_iter().map(|t| t.map(|v| v * inv)))
        .collect();
    let mut student = ParamVector::unflatten(ctx.layout, mu)?;
    let mut state = OptimizerState::new(ctx.optimizer, student.len());
    optim::train_epochs(ctx.spec, &mut student, &pairs, distill_epochs, ctx.batch_size, &mut state, rng)?;
    Ok(student.into_flat())
}

/// Dispatches to the configured aggregator. FedBE requires `fedbe`.
pub fn aggregate(kind: &AggregatorKind, updates: &[WeightUpdate], fedbe: Option<&FedBeContext<'_>>, rng: &mut SimRng) -> Result<Vec<f64>> {
    kind.validate(updates.len())?;
    match *kind {
        AggregatorKind::FedAvg => fed_avg(updates),
        AggregatorKind::TrimmedMean { trim } => trimmed_mean(updates, trim),
        AggregatorKind::FedMedian => fed_median(updates),
        AggregatorKind::StoMedian { epsilon, std } => sto_median_with(updates, epsilon, std),
        AggregatorKind::FedBe { samples, distill_epochs } => {
            let ctx = fedbe.ok_or(Error::EmptyDistillSet)?;
            fed_be(updates, samples, distill_epochs, ctx, rng)
        }
    }
}

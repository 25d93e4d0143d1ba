//! Data-poisoning attacks as label transformations on cached datasets.
//!
//! Adversaries only touch the CSI labels they report; pilot inputs are never
//! modified.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{self, CachedDataset, ChannelSample, Provenance};
use crate::error::{Error, Result};
use crate::rng::SimRng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackMode {
    /// Report a stale realization of the same channel.
    Outdate,
    /// Every adversary reports one shared CSI.
    Collusion,
    /// Reflect every CSI value about the sample mean.
    Reverse,
}

impl AttackMode {
    pub fn name(self) -> &'static str {
        match self {
            AttackMode::Outdate => "outdate",
            AttackMode::Collusion => "collusion",
            AttackMode::Reverse => "reverse",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Deployment {
    Widespread,
    Targeted(usize),
}

impl Deployment {
    pub fn name(self) -> String {
        match self {
            Deployment::Widespread => "widespread".into(),
            Deployment::Targeted(s) => format!("targeted({s})"),
        }
    }
}

/// How many samples a targeted adversary poisons.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetedBudget {
    /// `floor(r_a * sum(l) / N)`, capped at the victim's length.
    PerCache,
    /// `floor(r_a * sum(l))`: the whole adversary population reports to the
    /// victim. Poisoned samples beyond the victim's own length are appended,
    /// which raises its aggregation weight.
    Total,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackPlan {
    pub mode: AttackMode,
    pub deployment: Deployment,
    pub ratio: f64,
    /// Fixed collusion label (flattened `[h, w, 2]`, or a single value
    /// broadcast to every cell). Defaults to the first victim's label.
    pub collusion_payload: Option<Vec<f64>>,
    /// Symbols between consecutive outdated reports.
    pub outdate_lag: f64,
    /// Number of stored outdated reports per channel.
    pub outdate_depth: usize,
    pub targeted_budget: TargetedBudget,
}

impl Default for AttackPlan {
    fn default() -> Self {
        Self {
            mode: AttackMode::Reverse,
            deployment: Deployment::Widespread,
            ratio: 0.2,
            collusion_payload: None,
            outdate_lag: 7.0,
            outdate_depth: 2,
            targeted_budget: TargetedBudget::Total,
        }
    }
}

impl AttackPlan {
    pub fn new(mode: AttackMode, deployment: Deployment, ratio: f64) -> Self {
        Self {
            mode,
            deployment,
            ratio,
            ..Self::default()
        }
    }

    pub fn validate(&self, sbs_count: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ratio) {
            return Err(Error::InvalidConfig(format!("attack ratio {} outside [0, 1]", self.ratio)));
        }
        if let Deployment::Targeted(s) = self.deployment {
            if s >= sbs_count {
                return Err(Error::InvalidSbs {
                    sbs_id: s,
                    count: sbs_count,
                });
            }
        }
        if !self.outdate_lag.is_finite() {
            return Err(Error::InvalidConfig("outdate_lag must be finite".into()));
        }
        if self.mode == AttackMode::Outdate && self.outdate_depth == 0 {
            return Err(Error::InvalidConfig("outdate_depth must be >= 1".into()));
        }
        Ok(())
    }
}

/// State that persists across rounds of one experiment.
#[derive(Debug, Clone, Default)]
pub struct AttackContext {
    /// Collusion label, frozen at first use.
    pub payload: Option<Tensor>,
}

impl AttackContext {
    pub fn new(plan: &AttackPlan, label_dims: &[usize]) -> Result<Self> {
        let payload = match &plan.collusion_payload {
            None => None,
            Some(values) => {
                let len: usize = label_dims.iter().product();
                let data = match values.len() {
                    1 => vec![values[0]; len],
                    n if n == len => values.clone(),
                    n => return Err(Error::LengthMismatch { expected: len, got: n }),
                };
                Some(Tensor::from_vec(label_dims, data)?)
            }
        };
        Ok(Self { payload })
    }
}

/// Reflects every element about the label's mean (both channels pooled).
pub fn reverse_label(label: &Tensor) -> Tensor {
    let m = label.mean();
    label.map(|e| 2.0 * m - e)
}

pub fn collude_label(mut sample: ChannelSample, payload: &Tensor) -> Result<ChannelSample> {
    sample.label.check_same_shape(payload)?;
    sample.label = payload.clone();
    sample.provenance = Provenance::Poisoned(AttackMode::Collusion);
    Ok(sample)
}

pub fn outdate_label(mut sample: ChannelSample, pool: &[Tensor], rng: &mut SimRng) -> Result<ChannelSample> {
    if pool.is_empty() {
        return Err(Error::EmptyPool);
    }
    let pick = &pool[rng.random_range(0..pool.len())];
    sample.label.check_same_shape(pick)?;
    sample.label = pick.clone();
    sample.provenance = Provenance::Poisoned(AttackMode::Outdate);
    Ok(sample)
}

fn poison_sample(sample: ChannelSample, plan: &AttackPlan, ctx: &mut AttackContext, rng: &mut SimRng) -> Result<ChannelSample> {
    match plan.mode {
        AttackMode::Reverse => {
            let mut s = sample;
            s.label = reverse_label(&s.label);
            s.provenance = Provenance::Poisoned(AttackMode::Reverse);
            Ok(s)
        }
        AttackMode::Collusion => {
            let payload = ctx.payload.get_or_insert_with(|| sample.label.clone()).clone();
            collude_label(sample, &payload)
        }
        AttackMode::Outdate => {
            let pool = channel::outdated_labels(&sample, plan.outdate_lag, plan.outdate_depth);
            outdate_label(sample, &pool, rng)
        }
    }
}

fn poison_indices(cache: &mut CachedDataset, count: usize, plan: &AttackPlan, ctx: &mut AttackContext, rng: &mut SimRng) -> Result<()> {
    let mut picks = index::sample(rng, cache.len(), count.min(cache.len())).into_vec();
    picks.sort_unstable();
    for i in picks {
        let s = cache.samples[i].clone();
        cache.samples[i] = poison_sample(s, plan, ctx, rng)?;
    }
    Ok(())
}

/// Applies `plan` to this round's caches in place.
pub fn poison_caches(caches: &mut [CachedDataset], plan: &AttackPlan, ctx: &mut AttackContext, rng: &mut SimRng) -> Result<()> {
    plan.validate(caches.len())?;
    if plan.ratio == 0.0 || caches.is_empty() {
        return Ok(());
    }
    match plan.deployment {
        Deployment::Widespread => {
            for cache in caches.iter_mut() {
                let count = (plan.ratio * cache.len() as f64).floor() as usize;
                poison_indices(cache, count, plan, ctx, rng)?;
            }
        }
        Deployment::Targeted(s) => {
            let total: usize = caches.iter().map(CachedDataset::len).sum();
            let budget = match plan.targeted_budget {
                TargetedBudget::PerCache => (plan.ratio * total as f64 / caches.len() as f64).floor() as usize,
                TargetedBudget::Total => (plan.ratio * total as f64).floor() as usize,
            };
            let victim = &mut caches[s];
            let own = victim.len();
            let originals = victim.samples.clone();
            poison_indices(victim, budget.min(own), plan, ctx, rng)?;
            if plan.targeted_budget == TargetedBudget::Total && budget > own && !originals.is_empty() {
                for _ in own..budget {
                    let src = originals[rng.random_range(0..originals.len())].clone();
                    let poisoned = poison_sample(src, plan, ctx, rng)?;
                    victim.samples.push(poisoned);
                }
            }
        }
    }
    Ok(())
}

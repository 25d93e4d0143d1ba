//! The federation loop: pre-training, then per round cache generation,
//! poisoning, top-up, optional pre-filtering, local training, aggregation
//! and evaluation.
//!
//! Every stochastic step draws from an RNG stream derived from the master
//! seed, the step's stream tag, the round and (where applicable) the SBS id,
//! so per-SBS work can run in parallel without changing results.

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;

use crate::aggregation::{self, AggregatorKind, FedBeContext, WeightUpdate};
use crate::attacks::{self, AttackContext};
use crate::channel::{self, CachedDataset, ChannelSample};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::llpf;
use crate::metrics::MetricsRecord;
use crate::nn::{self, NetworkSpec, ParamVector};
use crate::optim::{self, OptimizerConfig, OptimizerState};
use crate::rng::{self, stream, SimRng};
use crate::tensor::Tensor;

/// MU ids of server-held data live above this offset so they never collide
/// with cache ids.
const PRETRAIN_ID_BASE: u32 = 1 << 30;
const VALIDATION_ID_BASE: u32 = 3 << 29;

#[derive(Debug, Clone)]
pub struct Pretrained {
    pub params: ParamVector,
    pub pretrain_set: Vec<ChannelSample>,
    pub validation_set: Vec<ChannelSample>,
    pub initial_validation_mse: f64,
}

pub fn mean_mse(spec: &NetworkSpec, params: &ParamVector, samples: &[ChannelSample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let losses = nn::per_sample_mse(spec, params, samples)?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

pub fn pretrain(cfg: &ExperimentConfig) -> Result<Pretrained> {
    cfg.validate()?;
    let spec = cfg.network_spec()?;
    let seed = cfg.master_seed;
    let pretrain_set = channel::generate_samples(
        &cfg.channel,
        cfg.pretrain_size,
        PRETRAIN_ID_BASE,
        &mut rng::rng_from(seed, &[stream::PRETRAIN_DATA]),
    );
    let validation_set = channel::generate_samples(
        &cfg.channel,
        cfg.validation_size,
        VALIDATION_ID_BASE,
        &mut rng::rng_from(seed, &[stream::VALIDATION_DATA]),
    );
    let mut params = nn::init_params(&spec, rng::derive_seed(seed, &[stream::INIT]));
    let initial_validation_mse = mean_mse(&spec, &params, &validation_set)?;
    let mut state = OptimizerState::new(cfg.pretrain_optimizer(), params.len());
    optim::train_epochs(
        &spec,
        &mut params,
        &pretrain_set,
        cfg.pretrain_epochs(),
        cfg.batch_size,
        &mut state,
        &mut rng::rng_from(seed, &[stream::PRETRAIN_SHUFFLE]),
    )?;
    Ok(Pretrained {
        params,
        pretrain_set,
        validation_set,
        initial_validation_mse,
    })
}

/// Local fine-tuning on one cache. Returns the trained weights and the
/// per-epoch training losses.
pub fn local_train_with_history(
    spec: &NetworkSpec,
    global: &ParamVector,
    cache: &CachedDataset,
    cfg: &ExperimentConfig,
    rng: &mut SimRng,
) -> Result<(ParamVector, Vec<f64>)> {
    if cache.is_empty() {
        return Err(Error::EmptyCache);
    }
    let mut params = global.clone();
    match cfg.local_sgd_steps {
        Some(steps) => {
            let mut state = OptimizerState::new(OptimizerConfig::sgd(cfg.optimizer.learning_rate), params.len());
            optim::train_steps(spec, &mut params, &cache.samples, steps, cfg.batch_size, &mut state, rng)?;
            Ok((params, Vec::new()))
        }
        None => {
            let mut state = OptimizerState::new(cfg.optimizer, params.len());
            let history = optim::train_epochs(spec, &mut params, &cache.samples, cfg.local_epochs, cfg.batch_size, &mut state, rng)?;
            Ok((params, history))
        }
    }
}

/// `weight` is the cache length before top-up.
pub fn local_train(
    spec: &NetworkSpec,
    global: &ParamVector,
    cache: &CachedDataset,
    weight: usize,
    cfg: &ExperimentConfig,
    rng: &mut SimRng,
) -> Result<WeightUpdate> {
    let (params, _) = local_train_with_history(spec, global, cache, cfg, rng)?;
    Ok(WeightUpdate::new(params.into_flat(), weight, cache.sbs_id))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub mse_gamma: f64,
    pub mse_delta: f64,
    pub mse_beta: Option<f64>,
}

/// Errors on authentic cached data, validation data and poisoned labels.
pub fn evaluate(spec: &NetworkSpec, params: &ParamVector, caches: &[CachedDataset], validation: &[ChannelSample]) -> Result<Evaluation> {
    let mut authentic = Vec::new();
    let mut poisoned = Vec::new();
    for c in caches {
        for s in &c.samples {
            if s.provenance.is_poisoned() {
                poisoned.push(s);
            } else {
                authentic.push(s);
            }
        }
    }
    let avg = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    let mse_gamma = if authentic.is_empty() {
        0.0
    } else {
        avg(nn::per_sample_mse(spec, params, &authentic)?)
    };
    let mse_delta = avg(nn::per_sample_mse(spec, params, validation)?);
    let mse_beta = if poisoned.is_empty() {
        None
    } else {
        Some(avg(nn::per_sample_mse(spec, params, &poisoned)?))
    };
    Ok(Evaluation {
        mse_gamma,
        mse_delta,
        mse_beta,
    })
}

/// Mutable state carried between rounds.
#[derive(Debug, Clone)]
pub struct FederationState {
    pub round: usize,
    pub global: ParamVector,
    pub spec: NetworkSpec,
    pub pretrain_set: Vec<ChannelSample>,
    pub validation_set: Vec<ChannelSample>,
    pub attack: AttackContext,
    /// First round's clean caches when `persist_caches` is on.
    pub persisted: Option<Vec<CachedDataset>>,
}

impl FederationState {
    pub fn new(cfg: &ExperimentConfig, pre: Pretrained) -> Result<Self> {
        let spec = cfg.network_spec()?;
        let attack = match &cfg.attack {
            Some(plan) => AttackContext::new(plan, &cfg.channel.sample_dims())?,
            None => AttackContext::default(),
        };
        Ok(Self {
            round: 0,
            global: pre.params,
            spec,
            pretrain_set: pre.pretrain_set,
            validation_set: pre.validation_set,
            attack,
            persisted: None,
        })
    }
}

fn record(cfg: &ExperimentConfig, round: usize, ev: Evaluation, llpf_replaced: usize) -> MetricsRecord {
    let (mode, deployment, ratio) = match &cfg.attack {
        Some(p) => (p.mode.name().to_string(), p.deployment.name(), p.ratio),
        None => ("none".to_string(), "none".to_string(), 0.0),
    };
    MetricsRecord {
        round,
        mse_gamma: ev.mse_gamma,
        mse_delta: ev.mse_delta,
        mse_beta: ev.mse_beta,
        aggregator: cfg.aggregator.name(),
        attack_mode: mode,
        deployment,
        r_a: ratio,
        seed: cfg.master_seed,
        llpf_replaced,
    }
}

/// Caches as received by the SBSs this round, before top-up.
pub fn round_caches(state: &mut FederationState, cfg: &ExperimentConfig, round: usize) -> Result<Vec<CachedDataset>> {
    let seed = cfg.master_seed;
    let r = round as u64;
    let mut caches = match (&state.persisted, cfg.persist_caches) {
        (Some(saved), true) => saved.clone(),
        _ => {
            let mut len_rng = rng::rng_from(seed, &[stream::CACHE_LENGTHS, r]);
            let lengths: Vec<usize> = (0..cfg.sbs_count)
                .map(|_| len_rng.random_range(cfg.cache_len_lo..=cfg.cache_len_hi))
                .collect();
            let fresh = channel::generate_round_caches(&cfg.channel, &lengths, round, rng::derive_seed(seed, &[stream::CACHE_DATA, r]));
            if cfg.persist_caches {
                state.persisted = Some(fresh.clone());
            }
            fresh
        }
    };
    for c in &mut caches {
        c.round = round;
    }
    if cfg.exclude_ratio > 0.0 {
        for c in &mut caches {
            let drop = (cfg.exclude_ratio * c.len() as f64).floor() as usize;
            let mut ex_rng = rng::rng_from(seed, &[stream::EXCLUDE, r, c.sbs_id as u64]);
            let mut gone = index::sample(&mut ex_rng, c.len(), drop).into_vec();
            gone.sort_unstable();
            for i in gone.into_iter().rev() {
                c.samples.remove(i);
            }
        }
    }
    if let Some(plan) = &cfg.attack {
        let mut poison_rng = rng::rng_from(seed, &[stream::POISON, r]);
        attacks::poison_caches(&mut caches, plan, &mut state.attack, &mut poison_rng)?;
    }
    Ok(caches)
}

/// Runs federation round `state.round + 1`.
pub fn run_round(state: &mut FederationState, cfg: &ExperimentConfig) -> Result<MetricsRecord> {
    if state.round >= cfg.rounds {
        return Err(Error::InvalidConfig(format!("all {} rounds already ran", cfg.rounds)));
    }
    let round = state.round + 1;
    let r = round as u64;
    let seed = cfg.master_seed;
    let received = round_caches(state, cfg, round)?;

    let spec = &state.spec;
    let global = &state.global;
    let pretrain_set = &state.pretrain_set;
    let results: Vec<Result<(WeightUpdate, usize)>> = received
        .par_iter()
        .map(|cache| {
            let sbs = cache.sbs_id as u64;
            let weight = cache.len().max(1);
            let mut working = cache.clone();
            let mut topup_rng = rng::rng_from(seed, &[stream::TOPUP, r, sbs]);
            channel::topup_with_pretrain(&mut working, pretrain_set, cfg.min_cache_len, &mut topup_rng);
            let mut replaced = 0;
            if cfg.llpf.enabled && !working.is_empty() {
                let mut llpf_rng = rng::rng_from(seed, &[stream::LLPF, r, sbs]);
                let report = llpf::filter_cache(spec, global, &mut working, &cfg.llpf, &mut llpf_rng)?;
                replaced = report.untrusted.len();
            }
            let mut train_rng = rng::rng_from(seed, &[stream::LOCAL_TRAIN, r, sbs]);
            let update = local_train(spec, global, &working, weight, cfg, &mut train_rng)?;
            Ok((update, replaced))
        })
        .collect();
    let mut updates = Vec::with_capacity(results.len());
    let mut replaced = 0;
    for res in results {
        let (u, n) = res?;
        updates.push(u);
        replaced += n;
    }

    let distill_inputs: Vec<Tensor>;
    let fedbe_ctx = if matches!(cfg.aggregator, AggregatorKind::FedBe { .. }) {
        distill_inputs = state.pretrain_set.iter().map(|s| s.input.clone()).collect();
        Some(FedBeContext {
            spec: &state.spec,
            layout: state.global.layout(),
            distill_inputs: &distill_inputs,
            optimizer: cfg.optimizer,
            batch_size: cfg.batch_size,
        })
    } else {
        None
    };
    let mut agg_rng = rng::rng_from(seed, &[stream::AGGREGATE, r]);
    let flat = aggregation::aggregate(&cfg.aggregator, &updates, fedbe_ctx.as_ref(), &mut agg_rng)?;
    if let Some(coord) = flat.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteAggregate {
            aggregator: cfg.aggregator.name(),
            coord,
        });
    }
    state.global = state.global.with_data(flat)?;
    state.round = round;

    let ev = evaluate(&state.spec, &state.global, &received, &state.validation_set)?;
    Ok(record(cfg, round, ev, replaced))
}

/// Pre-trains, then runs every round. The first record (round 0) describes
/// the pre-trained model.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<MetricsRecord>> {
    let pre = pretrain(cfg)?;
    run_pretrained(cfg, pre)
}

/// Like [`run_experiment`], starting from an existing pre-training result.
///
/// `pre` must come from [`pretrain`] on a config that agrees with `cfg` in
/// every pre-training input (seed, channel, network, optimizer, set sizes).
pub fn run_pretrained(cfg: &ExperimentConfig, pre: Pretrained) -> Result<Vec<MetricsRecord>> {
    cfg.validate()?;
    let spec = cfg.network_spec()?;
    let ev0 = Evaluation {
        mse_gamma: mean_mse(&spec, &pre.params, &pre.pretrain_set)?,
        mse_delta: mean_mse(&spec, &pre.params, &pre.validation_set)?,
        mse_beta: None,
    };
    let mut records = vec![record(cfg, 0, ev0, 0)];
    let mut state = FederationState::new(cfg, pre)?;
    while state.round < cfg.rounds {
        records.push(run_round(&mut state, cfg)?);
        log::debug!(
            "seed {} round {} mse_delta {:.6}",
            cfg.master_seed,
            state.round,
            records.last().map_or(0.0, |r| r.mse_delta)
        );
    }
    Ok(records)
}

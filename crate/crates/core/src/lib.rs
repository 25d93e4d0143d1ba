//! Federated learning simulator for CNN channel estimation across small
//! base stations under data-poisoning attacks.
//!
//! The crate covers the whole pipeline: a small convolutional engine with
//! explicit backprop ([`nn`], [`optim`]), synthetic pilot/CSI data
//! ([`channel`]), label-poisoning attacks ([`attacks`]), aggregation rules
//! including the log-domain median filter StoMedian ([`aggregation`]), loss
//! based pre-filtering of cached data ([`llpf`]), and the round loop that
//! ties them together ([`orchestrator`]).

pub mod aggregation;
pub mod attacks;
pub mod channel;
pub mod config;
pub mod error;
pub mod llpf;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod orchestrator;
pub mod rng;
pub mod tensor;

pub use aggregation::{AggregatorKind, WeightUpdate};
pub use attacks::{AttackMode, AttackPlan, Deployment};
pub use channel::{CachedDataset, ChannelConfig, ChannelSample, Provenance};
pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use llpf::LlpfConfig;
pub use metrics::MetricsRecord;
pub use nn::{NetworkSpec, ParamVector};
pub use tensor::Tensor;

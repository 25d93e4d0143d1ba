//! Experiment configuration and its TOML form.
//!
//! Every key is optional; missing keys take the reference simulation setup
//! (N = 10 SBS, I_min = 200, l_n ~ U(170, 230), validation 200, Adam with
//! lr 0.001 and momentum 0.9, E = 100, batch 64, 200 pre-training samples).
//! Unknown keys are rejected.

use serde::{Deserialize, Serialize};

use crate::aggregation::AggregatorKind;
use crate::attacks::AttackPlan;
use crate::channel::ChannelConfig;
use crate::error::{Error, Result};
use crate::llpf::LlpfConfig;
use crate::nn::{default_layers, LayerSpec, NetworkSpec};
use crate::optim::OptimizerConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub layers: Vec<LayerSpec>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            layers: default_layers(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    /// N.
    pub sbs_count: usize,
    /// T.
    pub rounds: usize,
    /// U; bookkeeping only.
    pub mu_count: usize,
    pub cache_len_lo: usize,
    pub cache_len_hi: usize,
    /// I_min.
    pub min_cache_len: usize,
    pub pretrain_size: usize,
    /// Delta.
    pub validation_size: usize,
    /// E.
    pub local_epochs: usize,
    /// Epochs of server pre-training; defaults to `local_epochs`.
    pub pretrain_epochs: Option<usize>,
    pub batch_size: usize,
    /// When set, local training runs this many plain mini-batch steps with
    /// the optimizer's learning rate instead of `local_epochs` of training.
    pub local_sgd_steps: Option<usize>,
    /// Fraction of authentic samples dropped from every cache before
    /// training.
    pub exclude_ratio: f64,
    /// Reuse the first round's caches in every round.
    pub persist_caches: bool,
    pub optimizer: OptimizerConfig,
    /// Optimizer for server pre-training; defaults to `optimizer`.
    pub pretrain_optimizer: Option<OptimizerConfig>,
    pub network: NetworkConfig,
    pub channel: ChannelConfig,
    pub attack: Option<AttackPlan>,
    pub aggregator: AggregatorKind,
    pub llpf: LlpfConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            master_seed: 1,
            sbs_count: 10,
            rounds: 10,
            mu_count: 1000,
            cache_len_lo: 170,
            cache_len_hi: 230,
            min_cache_len: 200,
            pretrain_size: 200,
            validation_size: 200,
            local_epochs: 100,
            pretrain_epochs: None,
            batch_size: 64,
            local_sgd_steps: None,
            exclude_ratio: 0.0,
            persist_caches: false,
            optimizer: OptimizerConfig::default(),
            pretrain_optimizer: None,
            network: NetworkConfig::default(),
            channel: ChannelConfig::default(),
            attack: None,
            aggregator: AggregatorKind::default(),
            llpf: LlpfConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn network_spec(&self) -> Result<NetworkSpec> {
        let spec = NetworkSpec::new(
            self.network.layers.clone(),
            self.channel.grid_height,
            self.channel.grid_width,
            2,
        )?;
        if spec.output_channels() != 2 {
            return Err(Error::InvalidConfig(format!(
                "final layer must have 2 filters (real/imag), has {}",
                spec.output_channels()
            )));
        }
        Ok(spec)
    }

    pub fn pretrain_epochs(&self) -> usize {
        self.pretrain_epochs.unwrap_or(self.local_epochs)
    }

    pub fn pretrain_optimizer(&self) -> OptimizerConfig {
        self.pretrain_optimizer.unwrap_or(self.optimizer)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        for (name, v) in [
            ("sbs_count", self.sbs_count),
            ("mu_count", self.mu_count),
            ("cache_len_lo", self.cache_len_lo),
            ("pretrain_size", self.pretrain_size),
            ("validation_size", self.validation_size),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.cache_len_lo > self.cache_len_hi {
            return bad(format!(
                "cache_len_lo ({}) exceeds cache_len_hi ({})",
                self.cache_len_lo, self.cache_len_hi
            ));
        }
        if !(0.0..1.0).contains(&self.exclude_ratio) {
            return bad("exclude_ratio must lie in [0, 1)".into());
        }
        self.optimizer.validate()?;
        if let Some(o) = &self.pretrain_optimizer {
            o.validate()?;
        }
        self.channel.validate()?;
        self.network_spec()?;
        if let Some(plan) = &self.attack {
            plan.validate(self.sbs_count)?;
        }
        self.aggregator.validate(self.sbs_count)?;
        self.llpf.validate()?;
        Ok(())
    }

    /// Attack-free copy.
    pub fn without_attack(&self) -> Self {
        Self {
            attack: None,
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregation::StdMode;
    use crate::attacks::{AttackMode, Deployment};

    #[test]
    fn empty_file_gives_reference_defaults() {
        let cfg = ExperimentConfig::from_toml_str("").unwrap();
        assert_eq!(cfg.sbs_count, 10);
        assert_eq!(cfg.validation_size, 200);
        assert_eq!(cfg.local_epochs, 100);
        assert_eq!(cfg.batch_size, 64);
        assert_eq!(cfg.min_cache_len, 200);
        assert_eq!((cfg.cache_len_lo, cfg.cache_len_hi), (170, 230));
        assert_eq!(cfg.pretrain_size, 200);
        assert_eq!(cfg.optimizer.learning_rate, 0.001);
        assert_eq!(cfg.optimizer.momentum, 0.9);
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn nested_sections_parse() {
        let text = r#"
            master_seed = 5
            rounds = 3

            [channel]
            grid_height = 24

            [network]
            layers = [
              { kernel_height = 3, kernel_width = 3, filters = 4, activation = "selu" },
              { kernel_height = 3, kernel_width = 3, filters = 2, activation = "selu" },
            ]

            [attack]
            mode = "reverse"
            deployment = { targeted = 2 }
            ratio = 0.7

            [aggregator]
            kind = "sto_median"
            std = "sample"

            [llpf]
            enabled = true
        "#;
        let cfg = ExperimentConfig::from_toml_str(text).unwrap();
        assert_eq!(cfg.channel.grid_height, 24);
        assert_eq!(cfg.channel.grid_width, 14);
        let plan = cfg.attack.unwrap();
        assert_eq!(plan.mode, AttackMode::Reverse);
        assert_eq!(plan.deployment, Deployment::Targeted(2));
        assert_eq!(plan.ratio, 0.7);
        assert_eq!(
            cfg.aggregator,
            AggregatorKind::StoMedian {
                epsilon: 1e-8,
                std: StdMode::Sample
            }
        );
        assert!(cfg.llpf.enabled);
        assert_eq!(cfg.llpf.theta, 0.95);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = ExperimentConfig::from_toml_str("rounds = 2\nbogus_key = 1\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bogus_key"), "{msg}");
        assert!(msg.contains("line 2"), "{msg}");
    }

    #[test]
    fn invariant_violations_are_named() {
        let err = ExperimentConfig::from_toml_str("sbs_count = 0").unwrap_err();
        assert!(err.to_string().contains("sbs_count"));
        let err = ExperimentConfig::from_toml_str("[attack]\nratio = 1.5").unwrap_err();
        assert!(err.to_string().contains("ratio"));
        let err = ExperimentConfig::from_toml_str("[aggregator]\nkind = \"trimmed_mean\"\ntrim = 5").unwrap_err();
        assert!(matches!(err, Error::TrimTooLarge { .. }));
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = ExperimentConfig::default();
        cfg.attack = Some(AttackPlan::default());
        cfg.aggregator = AggregatorKind::fed_be(4);
        cfg.pretrain_optimizer = Some(OptimizerConfig::adam(0.01));
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
    }
}

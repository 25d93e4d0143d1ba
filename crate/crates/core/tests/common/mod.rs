use robustfl_core::config::ExperimentConfig;

/// A configuration small enough for unit-speed integration tests.
pub fn tiny_config() -> ExperimentConfig {
    ExperimentConfig::from_toml_str(
        r#"
        master_seed = 7
        sbs_count = 3
        rounds = 2
        cache_len_lo = 10
        cache_len_hi = 14
        min_cache_len = 12
        pretrain_size = 24
        validation_size = 10
        local_epochs = 2
        pretrain_epochs = 30
        batch_size = 8

        [optimizer]
        learning_rate = 0.01

        [channel]
        grid_height = 12
        grid_width = 6

        [network]
        layers = [
          { kernel_height = 3, kernel_width = 3, filters = 4, activation = "selu" },
          { kernel_height = 3, kernel_width = 3, filters = 2, activation = "selu" },
        ]
        "#,
    )
    .expect("tiny config is valid")
}

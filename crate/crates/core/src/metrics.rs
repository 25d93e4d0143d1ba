//! Per-round metrics and their CSV encoding.

use std::io::Write;

use crate::error::Result;

pub const CSV_HEADER: &str = "round,mse_gamma,mse_delta,mse_beta,aggregator,attack_mode,deployment,r_a,seed";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub round: usize,
    /// Error on authentic cached (seen) samples.
    pub mse_gamma: f64,
    /// Error on the held-out validation set.
    pub mse_delta: f64,
    /// Error against the poisoned labels; `None` when nothing was poisoned.
    pub mse_beta: Option<f64>,
    pub aggregator: String,
    pub attack_mode: String,
    pub deployment: String,
    pub r_a: f64,
    pub seed: u64,
    /// Samples replaced by pre-filtering this round.
    pub llpf_replaced: usize,
}

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        let beta = self.mse_beta.map(|b| b.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.round,
            self.mse_gamma,
            self.mse_delta,
            beta,
            self.aggregator,
            self.attack_mode,
            self.deployment,
            self.r_a,
            self.seed
        )
    }
}

pub fn write_csv<W: Write>(mut out: W, records: &[MetricsRecord]) -> Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in records {
        writeln!(out, "{}", r.csv_row())?;
    }
    Ok(())
}

pub fn to_csv_string(records: &[MetricsRecord]) -> String {
    let mut buf = Vec::new();
    write_csv(&mut buf, records).expect("writing to memory");
    String::from_utf8(buf).expect("ascii output")
}

//! Versioned CSV and JSON outputs. Each CSV starts with a `#schema=` line
//! and a fixed header; numbers use Rust's shortest round-trip formatting,
//! so identical runs give identical bytes.

use std::fmt::Write;

use serde::{Deserialize, Serialize};
use spikenorm::training::{EpochMetrics, EvalReport};

use crate::config::RunConfig;

pub const METRICS_SCHEMA: &str = "spikenorm-metrics/1";
pub const METRICS_HEADER: &str =
    "epoch,train_loss,train_accuracy,val_samples,val_loss,val_accuracy,val_total_rate,val_layer_rates";
pub const SWEEP_SCHEMA: &str = "spikenorm-sweep/1";
pub const SWEEP_HEADER: &str = "param,value,accuracy,total_rate";
pub const DIAG_SCHEMA: &str = "spikenorm-diag-threshold/1";
pub const DIAG_HEADER: &str = "lambda,theta,moment,theta_hat";
pub const SUMMARY_SCHEMA: &str = "spikenorm-train-summary/1";
pub const EVAL_SCHEMA: &str = "spikenorm-eval/1";

/// Per-layer rates in one field, `;`-separated, so the column set does not
/// depend on the network.
fn join_rates(rates: &[f64]) -> String {
    rates.iter().map(|r| r.to_string()).collect::<Vec<_>>().join(";")
}

pub fn metrics_csv(epochs: &[EpochMetrics]) -> String {
    let mut out = format!("#schema={METRICS_SCHEMA}\n{METRICS_HEADER}\n");
    for e in epochs {
        let v = &e.val;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            e.epoch,
            e.train_loss,
            e.train_accuracy,
            v.samples,
            v.loss,
            v.accuracy,
            v.total_rate,
            join_rates(&v.layer_rates)
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: String,
    pub value: f64,
    pub accuracy: f64,
    pub total_rate: f64,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("#schema={SWEEP_SCHEMA}\n{SWEEP_HEADER}\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.param, r.value, r.accuracy, r.total_rate);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiagRow {
    pub lambda: f64,
    pub theta: f64,
    pub moment: f64,
    pub theta_hat: f64,
}

pub fn diag_csv(rows: &[DiagRow]) -> String {
    let mut out = format!("#schema={DIAG_SCHEMA}\n{DIAG_HEADER}\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.lambda, r.theta, r.moment, r.theta_hat);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub schema: String,
    /// The architecture exactly as configured.
    pub architecture: String,
    pub canonical_architecture: String,
    pub config_hash: String,
    pub weighted_layers: usize,
    pub hidden_layers: usize,
    pub parameters: usize,
    pub config: RunConfig,
    pub train_samples: usize,
    pub epochs: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub test: EvalReport,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub schema: String,
    pub architecture: String,
    pub config_hash: String,
    pub report: EvalReport,
}

//! JSON-serializable run reports.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::QuantConfig;
use crate::error::DqError;

/// Solve record for one output column.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ColumnReport {
    pub column: usize,
    /// Objective of the initialization.
    pub g_init: f64,
    /// Objective after every half-step: two entries per alternation round
    /// (integer step, then scale/zero step), one per round when (s, z) are
    /// pinned.
    pub g_trajectory: Vec<f64>,
    /// Objective of the returned solution, recomputed against the packed
    /// (32-bit) scales and zeros that the layer file actually stores.
    pub g_final: f64,
    /// Ridge values that any solve along the way had to apply.
    pub ridge_events: Vec<f64>,
    /// True when the column fell back to its best earlier iterate because an
    /// analytic solve stayed singular at maximum ridge.
    pub flagged: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportTotals {
    /// Sum of per-column final objectives, accumulated in column order.
    pub total_g: f64,
    pub columns: usize,
    pub flagged_columns: usize,
    /// Ridge applied to the layer-level factorization shared by Level2
    /// columns, when one was needed.
    pub hessian_factor_ridge: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportTimings {
    pub total_seconds: f64,
    pub mean_column_seconds: f64,
}

/// Full record of one quantize run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveReport {
    pub config: QuantConfig,
    pub per_column: Vec<ColumnReport>,
    pub totals: ReportTotals,
    pub timings: ReportTimings,
}

/// Loss curve of one block fine-tuning run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub initial_loss: f64,
    /// Full-set loss after each epoch.
    pub epoch_losses: Vec<f64>,
    /// Best-seen full-set loss; never exceeds `initial_loss`.
    pub final_loss: f64,
    /// Epoch that produced the best parameters; None when the initial
    /// parameters were never improved.
    pub best_epoch: Option<usize>,
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<(), DqError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| DqError::Format(format!("serializing report: {e}")))?;
    std::fs::write(path, text).map_err(|e| DqError::io(path, e))
}

pub fn load_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, DqError> {
    let text = std::fs::read_to_string(path).map_err(|e| DqError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| DqError::Format(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solve_report_round_trips_through_json() {
        let report = SolveReport {
            config: QuantConfig::default(),
            per_column: vec![ColumnReport {
                column: 0,
                g_init: 1.5,
                g_trajectory: vec![1.2, 0.9],
                g_final: 0.9,
                ridge_events: vec![1e-10],
                flagged: false,
            }],
            totals: ReportTotals {
                total_g: 0.9,
                columns: 1,
                flagged_columns: 0,
                hessian_factor_ridge: None,
            },
            timings: ReportTimings {
                total_seconds: 0.01,
                mean_column_seconds: 0.01,
            },
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        save_json(&path, &report).unwrap();
        let back: SolveReport = load_json(&path).unwrap();
        assert_eq!(back.per_column.len(), 1);
        assert_eq!(back.totals.total_g, 0.9);
        assert_eq!(back.per_column[0].g_trajectory, vec![1.2, 0.9]);
    }

    #[test]
    fn report_json_has_expected_top_level_keys() {
        let report = SolveReport {
            config: QuantConfig::default(),
            per_column: vec![],
            totals: ReportTotals {
                total_g: 0.0,
                columns: 0,
                flagged_columns: 0,
                hessian_factor_ridge: None,
            },
            timings: ReportTimings {
                total_seconds: 0.0,
                mean_column_seconds: 0.0,
            },
        };
        let value = serde_json::to_value(&report).unwrap();
        for key in ["config", "per_column", "totals", "timings"] {
            assert!(value.get(key).is_some(), "missing key {key}");
        }
    }
}

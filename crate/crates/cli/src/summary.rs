//! JSON summary and manifest schemas.

use rendezvous_core::analysis::{check_ms_bound, BoundCheck};
use rendezvous_core::scenario::{GainMode, Scenario, ScenarioConfig};
use rendezvous_core::sim::GainModeComparison;
use rendezvous_core::stats::SeriesStats;
use rendezvous_core::{Axis, AxisPair, BatchStats};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const SUMMARY_SCHEMA_VERSION: u32 = 1;
/// Relative gap above which the minimum-cost expression is flagged.
pub const COST_EXPRESSION_FLAG: f64 = 0.10;

/// SHA-256 of the compact JSON rendering of the config (fields in
/// declaration order).
pub fn config_hash(cfg: &ScenarioConfig) -> String {
    let canonical = serde_json::to_vec(cfg).expect("scenario config serializes");
    hex::encode(Sha256::digest(&canonical))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub scenario: String,
    pub config_hash: String,
    pub master_seed: u64,
    pub artifact_version: String,
    pub outputs: Vec<String>,
    pub wall_clock_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceSummary {
    pub all_converged: bool,
    pub converged_runs: usize,
    pub min_step: Option<usize>,
    pub mean_step: Option<f64>,
    pub max_step: Option<usize>,
    pub steps: Vec<Option<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostExpressionComparison {
    pub expression_mean: f64,
    pub realized_cost_mean: f64,
    pub relative_gap: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundSummary {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub check: Option<BoundCheck>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unavailable: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AxisSummary {
    pub true_mse: SeriesStats,
    pub est_mse: SeriesStats,
    pub cov_trace_mean: Vec<f64>,
    pub lyapunov_mean: Vec<f64>,
    pub noise_floor_mean: Vec<f64>,
    pub realized_cost_mean: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cost_expression: Option<CostExpressionComparison>,
    pub bound: BoundSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub scenario: String,
    pub config_hash: String,
    pub master_seed: u64,
    pub runs: usize,
    pub gain_mode: GainMode,
    pub steps: usize,
    pub convergence: ConvergenceSummary,
    pub initial_true_mse: f64,
    pub terminal_true_mse: f64,
    pub max_error_growth: f64,
    pub max_coordinate_growth: f64,
    pub mean_terminal_positions: Vec<[f64; 2]>,
    pub true_mse_total: SeriesStats,
    pub axes: AxisPair<AxisSummary>,
    pub gain_mode_comparison: GainModeComparison,
    pub warnings: Vec<String>,
}

impl RunSummary {
    pub fn build(scenario: &Scenario, stats: &BatchStats, gain_mode_comparison: GainModeComparison) -> Self {
        let cfg = scenario.config();
        let conv = stats.convergence_summary();
        let axes = AxisPair::from_fn(|axis| axis_summary(scenario, stats, axis));
        let mut warnings = Vec::new();
        if !scenario.topology().is_connected() {
            warnings.push("communication graph is disconnected for at least one schedule entry".to_string());
        }
        for axis in Axis::BOTH {
            let a = axes.get(axis);
            if let Some(c) = &a.cost_expression {
                if c.flagged {
                    warnings.push(format!(
                        "axis {}: minimum-cost expression differs from the mean realized cost by {:.1}%",
                        axis.name(),
                        100.0 * c.relative_gap
                    ));
                }
            }
        }
        if !gain_mode_comparison.agree {
            warnings.push(gain_mode_comparison.note.clone());
        }
        RunSummary {
            schema_version: SUMMARY_SCHEMA_VERSION,
            scenario: cfg.name.clone(),
            config_hash: config_hash(cfg),
            master_seed: cfg.master_seed,
            runs: stats.runs,
            gain_mode: cfg.gain_mode,
            steps: stats.steps,
            convergence: ConvergenceSummary {
                all_converged: stats.all_converged,
                converged_runs: stats.convergence_steps.iter().flatten().count(),
                min_step: conv.map(|c| c.0),
                mean_step: conv.map(|c| c.1),
                max_step: conv.map(|c| c.2),
                steps: stats.convergence_steps.clone(),
            },
            initial_true_mse: stats.initial_true_mse,
            terminal_true_mse: stats.terminal_true_mse,
            max_error_growth: stats.max_error_growth,
            max_coordinate_growth: stats.max_coordinate_growth,
            mean_terminal_positions: stats.mean_terminal_positions.clone(),
            true_mse_total: stats.true_mse_total.clone(),
            axes,
            gain_mode_comparison,
            warnings,
        }
    }
}

fn axis_summary(scenario: &Scenario, stats: &BatchStats, axis: Axis) -> AxisSummary {
    let realized_cost_mean = *stats.mean_cost.get(axis);
    let cost_expression = stats.mean_cost_to_go_expression.as_ref().map(|e| {
        let expression_mean = *e.get(axis);
        let relative_gap = if realized_cost_mean != 0.0 {
            (expression_mean - realized_cost_mean).abs() / realized_cost_mean.abs()
        } else {
            expression_mean.abs()
        };
        CostExpressionComparison {
            expression_mean,
            realized_cost_mean,
            relative_gap,
            flagged: relative_gap > COST_EXPRESSION_FLAG,
        }
    });
    let bound = match check_ms_bound(stats, scenario, axis) {
        Ok(check) => BoundSummary {
            check: Some(check),
            unavailable: None,
        },
        Err(e) => BoundSummary {
            check: None,
            unavailable: Some(e.to_string()),
        },
    };
    AxisSummary {
        true_mse: stats.true_mse.get(axis).clone(),
        est_mse: stats.est_mse.get(axis).clone(),
        cov_trace_mean: stats.cov_trace.get(axis).mean.clone(),
        lyapunov_mean: stats.lyapunov.get(axis).mean.clone(),
        noise_floor_mean: stats.noise_floor.get(axis).mean.clone(),
        realized_cost_mean,
        cost_expression,
        bound,
    }
}

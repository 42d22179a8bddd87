//! CSV and JSON writers. Floats are written with `f64`'s `Display`, which is
//! the shortest string that parses back to the same value.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rendezvous_core::sim::EpisodeTrace;
use rendezvous_core::{Axis, Scenario};
use serde::Serialize;

use crate::summary::RunSummary;
use crate::{io_error, CliError};

/// Per-robot columns of a trace row, in order.
pub const TRACE_ROBOT_COLUMNS: [&str; 11] = ["x", "y", "theta", "xhat", "yhat", "Px", "Py", "ux", "uy", "vl", "vr"];

pub fn trace_header(n: usize) -> Vec<String> {
    let mut cols = vec!["step".to_string(), "time_s".to_string()];
    for i in 0..n {
        cols.extend(TRACE_ROBOT_COLUMNS.iter().map(|c| format!("{c}_{i}")));
    }
    cols
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| io_error(path, e))
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| io_error(path, e))?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>, CliError> {
    let file = File::create(path).map_err(|e| io_error(path, e))?;
    Ok(csv::Writer::from_writer(BufWriter::new(file)))
}

fn finish(mut w: csv::Writer<BufWriter<File>>, path: &Path) -> Result<(), CliError> {
    w.flush().map_err(|e| io_error(path, e))?;
    let inner = w.into_inner().map_err(|e| io_error(path, e.error()))?;
    inner.into_inner().map_err(|e| io_error(path, e.error()))?.flush().map_err(|e| io_error(path, e))
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// `step,time_s` then [`TRACE_ROBOT_COLUMNS`] for each robot.
pub fn emit_trace_csv(trace: &EpisodeTrace, path: &Path) -> Result<(), CliError> {
    let mut w = csv_writer(path)?;
    let err = |e: csv::Error| io_error(path, e);
    w.write_record(trace_header(trace.n())).map_err(err)?;
    for rec in &trace.records {
        let mut row = vec![rec.step.to_string(), (rec.step as f64 * trace.h).to_string()];
        for r in &rec.robots {
            row.extend(
                [
                    r.truth.x,
                    r.truth.y,
                    r.truth.theta,
                    r.x_hat,
                    r.y_hat,
                    r.p_x,
                    r.p_y,
                    r.input.ux,
                    r.input.uy,
                    r.wheels.left,
                    r.wheels.right,
                ]
                .iter()
                .map(f64::to_string),
            );
        }
        w.write_record(&row).map_err(err)?;
    }
    finish(w, path)
}

pub fn series_header() -> Vec<String> {
    let mut cols = vec!["step".to_string(), "time_s".to_string(), "mse".to_string(), "mse_se".to_string()];
    for axis in Axis::BOTH {
        let a = axis.name();
        for c in ["mse", "mse_se", "est_mse", "est_mse_se", "cov_trace", "lyapunov", "noise_floor", "bound"] {
            cols.push(format!("{c}_{a}"));
        }
    }
    cols
}

/// One row per step of the batch means; cells past the end of a shorter
/// series (noise floor, bound) are left empty.
pub fn emit_series_csv(summary: &RunSummary, h: f64, path: &Path) -> Result<(), CliError> {
    let mut w = csv_writer(path)?;
    let err = |e: csv::Error| io_error(path, e);
    w.write_record(series_header()).map_err(err)?;
    let total = &summary.true_mse_total;
    for k in 0..summary.steps {
        let mut row = vec![
            k.to_string(),
            (k as f64 * h).to_string(),
            opt(total.mean.get(k).copied()),
            opt(total.std_error.get(k).copied()),
        ];
        for axis in Axis::BOTH {
            let a = summary.axes.get(axis);
            let bound = a.bound.check.as_ref().and_then(|c| c.bound.get(k).copied());
            row.extend([
                opt(a.true_mse.mean.get(k).copied()),
                opt(a.true_mse.std_error.get(k).copied()),
                opt(a.est_mse.mean.get(k).copied()),
                opt(a.est_mse.std_error.get(k).copied()),
                opt(a.cov_trace_mean.get(k).copied()),
                opt(a.lyapunov_mean.get(k).copied()),
                opt(a.noise_floor_mean.get(k).copied()),
                opt(bound),
            ]);
        }
        w.write_record(&row).map_err(err)?;
    }
    finish(w, path)
}

/// `axis,step,row,col,pi,gain`; the gain cell is empty at the terminal step,
/// which only has a `Pi`.
pub fn emit_gains_csv(scenario: &Scenario, path: &Path) -> Result<(), CliError> {
    let mut w = csv_writer(path)?;
    let err = |e: csv::Error| io_error(path, e);
    w.write_record(["axis", "step", "row", "col", "pi", "gain"]).map_err(err)?;
    for axis in Axis::BOTH {
        let schedule = scenario.schedule(axis);
        for (k, pi) in schedule.pi.iter().enumerate() {
            let gain = schedule.gains.get(k);
            for i in 0..pi.nrows() {
                for j in 0..pi.ncols() {
                    w.write_record([
                        axis.name().to_string(),
                        k.to_string(),
                        i.to_string(),
                        j.to_string(),
                        pi[(i, j)].to_string(),
                        opt(gain.map(|g| g[(i, j)])),
                    ])
                    .map_err(err)?;
                }
            }
        }
    }
    finish(w, path)
}

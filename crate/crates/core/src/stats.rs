//! Order-deterministic summation helpers for Monte Carlo aggregation.

use serde::Serialize;

/// Pairwise (cascade) summation. The result depends only on the order of
/// `values`, not on how work was scheduled.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const LEAF: usize = 16;
    if values.len() <= LEAF {
        return values.iter().sum();
    }
    let (lo, hi) = values.split_at(values.len() / 2);
    pairwise_sum(lo) + pairwise_sum(hi)
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    pairwise_sum(values) / values.len() as f64
}

/// Sample mean and its standard error (`s / sqrt(n)`, zero for `n < 2`).
/// Deviations are taken from the first value, so a constant column gives
/// exactly that value and a zero error.
pub fn mean_and_std_error(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n < 2 {
        return (mean(values), 0.0);
    }
    let shift = values[0];
    let dev: Vec<f64> = values.iter().map(|v| v - shift).collect();
    let dm = mean(&dev);
    let sq: Vec<f64> = dev.iter().map(|d| (d - dm) * (d - dm)).collect();
    let var = pairwise_sum(&sq) / (n - 1) as f64;
    (shift + dm, (var / n as f64).sqrt())
}

/// Per-step mean and standard error across equally long series.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct SeriesStats {
    pub mean: Vec<f64>,
    pub std_error: Vec<f64>,
}

impl SeriesStats {
    pub fn from_runs(runs: &[Vec<f64>]) -> Self {
        let len = runs.iter().map(Vec::len).max().unwrap_or(0);
        let mut out = SeriesStats {
            mean: Vec::with_capacity(len),
            std_error: Vec::with_capacity(len),
        };
        let mut column = Vec::with_capacity(runs.len());
        for k in 0..len {
            column.clear();
            column.extend(runs.iter().map(|r| r[k]));
            let (m, se) = mean_and_std_error(&column);
            out.mean.push(m);
            out.std_error.push(se);
        }
        out
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }
}

/// Extends `series` to `len` by repeating its last element (or `fill` when
/// given).
pub fn pad_to(series: &mut Vec<f64>, len: usize, fill: Option<f64>) {
    if let Some(v) = fill.or_else(|| series.last().copied()) {
        series.resize(len.max(series.len()), v);
    }
}

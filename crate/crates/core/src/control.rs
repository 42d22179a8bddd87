//! Finite-horizon Riccati synthesis and the neighbour-difference rendezvous
//! law.
//!
//! Two synthesis paths share one recursion:
//! * [`riccati_backward`] on stacked team matrices (`A = I_N`, `B = L ⊗ h`),
//!   producing `N x N` gains;
//! * [`local_riccati`], the per-robot scalar recursion (`a = 1`, `b = h`)
//!   whose gain every robot applies to its neighbour differences.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::DriveParams;
use crate::error::{Error, Result};
use crate::estimation::GlobalEstimate;
use crate::graph::Topology;

/// Symmetric-matrix eigenvalue slack accepted for PSD checks.
pub const PSD_TOL: f64 = 1e-9;

/// Per-axis scalar weights; the team-level matrices are these times `I_N`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScalarWeights {
    pub q_state: f64,
    pub r_input: f64,
    pub q_terminal: f64,
}

impl Default for ScalarWeights {
    fn default() -> Self {
        Self {
            q_state: 1.0,
            r_input: 1.0,
            q_terminal: 1.0,
        }
    }
}

impl ScalarWeights {
    pub fn validate(&self, field: &str) -> Result<()> {
        for (name, v) in [("q_state", self.q_state), ("q_terminal", self.q_terminal)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(format!("{field}.{name}"), "must be finite and >= 0"));
            }
        }
        if !self.r_input.is_finite() || self.r_input <= 0.0 {
            return Err(Error::config(format!("{field}.r_input"), "must be finite and > 0"));
        }
        Ok(())
    }

    pub fn to_cost_weights(&self, n: usize, horizon: usize) -> Result<CostWeights> {
        let eye = DMatrix::<f64>::identity(n, n);
        CostWeights::new(&eye * self.q_state, &eye * self.r_input, &eye * self.q_terminal, horizon)
    }
}

/// Quadratic cost weights for one axis over horizon `M`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostWeights {
    pub q_state: DMatrix<f64>,
    pub r_input: DMatrix<f64>,
    pub q_terminal: DMatrix<f64>,
    pub horizon: usize,
}

impl CostWeights {
    pub fn new(
        q_state: DMatrix<f64>,
        r_input: DMatrix<f64>,
        q_terminal: DMatrix<f64>,
        horizon: usize,
    ) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::config("weights.horizon", "must be >= 1"));
        }
        let n = q_state.nrows();
        if q_state.shape() != (n, n) || q_terminal.shape() != (n, n) {
            return Err(Error::config("weights", "state weights must be square and equally sized"));
        }
        if r_input.nrows() != r_input.ncols() {
            return Err(Error::config("weights.r_input", "must be square"));
        }
        check_symmetric_min_eig(&q_state, "weights.q_state", -PSD_TOL)?;
        check_symmetric_min_eig(&q_terminal, "weights.q_terminal", -PSD_TOL)?;
        check_symmetric_min_eig(&r_input, "weights.r_input", 0.0)?;
        Ok(Self {
            q_state,
            r_input,
            q_terminal,
            horizon,
        })
    }

    pub fn scalar(q_state: f64, r_input: f64, q_terminal: f64, horizon: usize) -> Result<Self> {
        Self::new(
            DMatrix::from_element(1, 1, q_state),
            DMatrix::from_element(1, 1, r_input),
            DMatrix::from_element(1, 1, q_terminal),
            horizon,
        )
    }

    pub fn state_dim(&self) -> usize {
        self.q_state.nrows()
    }
}

fn check_symmetric_min_eig(m: &DMatrix<f64>, field: &str, strict_above: f64) -> Result<()> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::config(field, "entries must be finite"));
    }
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > 1e-12 * scale {
        return Err(Error::config(field, "must be symmetric"));
    }
    let min = m.clone().symmetric_eigen().eigenvalues.min();
    let ok = if strict_above == 0.0 { min > 0.0 } else { min >= strict_above };
    if !ok {
        let what = if strict_above == 0.0 { "positive definite" } else { "positive semidefinite" };
        return Err(Error::config(field, format!("must be {what} (min eigenvalue {min:e})")));
    }
    Ok(())
}

/// Cost-to-go matrices `pi[k] = Π_k` for `k = 0..=M` and gains
/// `gains[k] = L_k` for `k = 0..M`.
#[derive(Debug, Clone, PartialEq)]
pub struct GainSchedule {
    pub pi: Vec<DMatrix<f64>>,
    pub gains: Vec<DMatrix<f64>>,
}

impl GainSchedule {
    pub fn horizon(&self) -> usize {
        self.gains.len()
    }

    /// `L_k`, holding the stationary `L_0` past the horizon.
    pub fn gain_at(&self, k: usize) -> &DMatrix<f64> {
        self.gains.get(k).unwrap_or(&self.gains[0])
    }

    /// `Π_k`, holding `Π_0` past the horizon.
    pub fn pi_at(&self, k: usize) -> &DMatrix<f64> {
        self.pi.get(k).unwrap_or(&self.pi[0])
    }

    pub fn is_scalar(&self) -> bool {
        self.pi[0].shape() == (1, 1)
    }

    /// Smallest and largest eigenvalue over every `Π_k`.
    pub fn pi_eigen_extremes(&self) -> (f64, f64) {
        self.pi.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            let ev = p.clone().symmetric_eigen().eigenvalues;
            (lo.min(ev.min()), hi.max(ev.max()))
        })
    }
}

/// Backward recursion with time-invariant system matrices.
pub fn riccati_backward(weights: &CostWeights, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<GainSchedule> {
    riccati_backward_varying(weights, |_| (a.clone(), b.clone()))
}

/// Backward recursion where `system(k)` supplies `(A_k, B_k)`:
///
/// `L_k = (R + B^T Π_{k+1} B)^-1 B^T Π_{k+1} A`,
/// `Π_k = (A - B L_k)^T Π_{k+1} (A - B L_k) + L_k^T R L_k + Q`, `Π_M = Q_M`.
pub fn riccati_backward_varying<F>(weights: &CostWeights, mut system: F) -> Result<GainSchedule>
where
    F: FnMut(usize) -> (DMatrix<f64>, DMatrix<f64>),
{
    let m = weights.horizon;
    let n = weights.state_dim();
    let nu = weights.r_input.nrows();
    let mut pi = vec![DMatrix::zeros(n, n); m + 1];
    let mut gains = vec![DMatrix::zeros(nu, n); m];
    pi[m] = weights.q_terminal.clone();

    for k in (0..m).rev() {
        let (a, b) = system(k);
        if a.shape() != (n, n) || b.shape() != (n, nu) {
            return Err(Error::Synthesis {
                step: k,
                reason: format!(
                    "system matrices {:?}/{:?} do not match weights ({n} states, {nu} inputs)",
                    a.shape(),
                    b.shape()
                ),
            });
        }
        let next = &pi[k + 1];
        let bt_pi = b.transpose() * next;
        let s = &weights.r_input + &bt_pi * &b;
        let s_inv = s.try_inverse().ok_or_else(|| Error::Synthesis {
            step: k,
            reason: "R + B^T Π B is singular".into(),
        })?;
        let gain = s_inv * (&bt_pi * &a);
        let closed = &a - &b * &gain;
        let p = closed.transpose() * next * &closed + gain.transpose() * &weights.r_input * &gain + &weights.q_state;
        pi[k] = (&p + p.transpose()) * 0.5;
        gains[k] = gain;
    }
    Ok(GainSchedule { pi, gains })
}

/// Per-robot scalar recursion with `a = 1`, `b = h`. Evaluates the same
/// expression tree as [`riccati_backward`] on `1 x 1` matrices, so the two
/// agree bit for bit.
pub fn local_riccati(weights: &ScalarWeights, horizon: usize, h: f64) -> Result<GainSchedule> {
    weights.validate("weights")?;
    if horizon == 0 {
        return Err(Error::config("weights.horizon", "must be >= 1"));
    }
    let (a, b) = (1.0, h);
    let (q, r) = (weights.q_state, weights.r_input);
    let mut pi = vec![0.0; horizon + 1];
    let mut gains = vec![0.0; horizon];
    pi[horizon] = weights.q_terminal;
    for k in (0..horizon).rev() {
        let next = pi[k + 1];
        let bt_pi = b * next;
        let s = r + bt_pi * b;
        if s == 0.0 || !s.is_finite() {
            return Err(Error::Synthesis {
                step: k,
                reason: "r + b^2 Π is not invertible".into(),
            });
        }
        let gain = (1.0 / s) * (bt_pi * a);
        let closed = a - b * gain;
        let p = closed * next * closed + gain * r * gain + q;
        pi[k] = (p + p) * 0.5;
        gains[k] = gain;
    }
    Ok(GainSchedule {
        pi: pi.into_iter().map(|v| DMatrix::from_element(1, 1, v)).collect(),
        gains: gains.into_iter().map(|v| DMatrix::from_element(1, 1, v)).collect(),
    })
}

/// Planar velocity command, m/s.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct PlanarInput {
    pub ux: f64,
    pub uy: f64,
}

/// `d_i = sum_j a_ij (v_i - v_j)`, evaluated difference by difference so
/// that equal entries give exactly zero.
pub fn neighbor_differences(adjacency: &DMatrix<f64>, v: &DVector<f64>) -> DVector<f64> {
    let n = v.len();
    DVector::from_fn(n, |i, _| {
        (0..n)
            .filter(|&j| j != i && adjacency[(i, j)] != 0.0)
            .map(|j| adjacency[(i, j)] * (v[i] - v[j]))
            .sum()
    })
}

/// `u = -G d` on one axis: a `1 x 1` gain scales every robot, an `N x N`
/// gain mixes them.
pub fn apply_gain(gain: &DMatrix<f64>, differences: &DVector<f64>) -> DVector<f64> {
    if gain.shape() == (1, 1) {
        differences.map(|d| -(gain[(0, 0)] * d))
    } else {
        -(gain * differences)
    }
}

/// Neighbour-difference rendezvous law on both axes at step `k`.
pub fn distributed_control(
    est: &GlobalEstimate,
    topology: &Topology,
    gain_x: &DMatrix<f64>,
    gain_y: &DMatrix<f64>,
    k: usize,
) -> Vec<PlanarInput> {
    let adjacency = topology.adjacency_at(k);
    let ux = apply_gain(gain_x, &neighbor_differences(adjacency, &est.xs));
    let uy = apply_gain(gain_y, &neighbor_differences(adjacency, &est.ys));
    ux.iter()
        .zip(uy.iter())
        .map(|(&ux, &uy)| PlanarInput { ux, uy })
        .collect()
}

/// Scales each planar command down (direction kept) to at most the wheel
/// speed limit, which bounds both wheels when the heading error is zero.
pub fn saturate_inputs(inputs: &[PlanarInput], params: &DriveParams) -> Vec<PlanarInput> {
    let limit = params.wheel_speed_limit;
    inputs
        .iter()
        .map(|u| {
            let norm = u.ux.hypot(u.uy);
            if norm > limit {
                let s = limit / norm;
                PlanarInput {
                    ux: u.ux * s,
                    uy: u.uy * s,
                }
            } else {
                *u
            }
        })
        .collect()
}

//! Self-contained oracle checks: filter steady state, Riccati optimality
//! against a least-squares solve, the Gaussian quadratic-form identity, and
//! the mean-square error bound on the low-noise preset.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::analysis::{check_ms_bound, quadratic_expectation_oracle};
use crate::axis::Axis;
use crate::control::{local_riccati, ScalarWeights};
use crate::error::{Error, Result};
use crate::estimation::{steady_state_covariance, AxisFilter};
use crate::scenario::{four_robot_low_noise, Scenario};
use crate::sim::episode_seed;

pub const KALMAN_TOL: f64 = 1e-10;
pub const RICCATI_TOL: f64 = 1e-8;
pub const LEMMA1_Z_LIMIT: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Kalman,
    Riccati,
    Lemma1,
    Bound,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Kalman, Suite::Riccati, Suite::Lemma1, Suite::Bound];

    pub fn as_str(self) -> &'static str {
        match self {
            Suite::Kalman => "kalman",
            Suite::Riccati => "riccati",
            Suite::Lemma1 => "lemma1",
            Suite::Bound => "bound",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|suite| suite.as_str() == s)
            .ok_or_else(|| Error::config("suite", format!("unknown suite {s:?}; expected kalman, riccati, lemma1 or bound")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckLine {
    pub label: String,
    pub detail: String,
    pub pass: bool,
}

impl fmt::Display for CheckLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.pass { "ok" } else { "FAIL" };
        write!(f, "{status:>4}  {}  {}", self.label, self.detail)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub lines: Vec<CheckLine>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.lines.iter().all(|l| l.pass)
    }

    pub fn failures(&self) -> usize {
        self.lines.iter().filter(|l| !l.pass).count()
    }
}

pub fn run_suite(suite: Suite, seed: u64) -> Result<SuiteReport> {
    let lines = match suite {
        Suite::Kalman => kalman_lines(seed)?,
        Suite::Riccati => riccati_lines(seed, 20, 10_000)?,
        Suite::Lemma1 => lemma1_lines(seed, 20, 1_000_000)?,
        Suite::Bound => bound_lines(seed)?,
    };
    Ok(SuiteReport { suite, lines })
}

fn log_uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    (rng.random_range(lo.ln()..=hi.ln())).exp()
}

/// Iterates the single-channel filter covariance until it stops moving.
pub fn iterate_filter_covariance(q: f64, r: f64, max_iter: usize) -> Result<f64> {
    let mut filter = AxisFilter::new(0.0, r, 1.0, q, vec![r])?;
    for _ in 0..max_iter {
        let before = filter.covariance;
        filter.predict(0.0);
        filter.update(&[0.0])?;
        if (filter.covariance - before).abs() <= f64::EPSILON * before {
            break;
        }
    }
    Ok(filter.covariance)
}

fn kalman_lines(seed: u64) -> Result<Vec<CheckLine>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..50)
        .map(|i| {
            let q = log_uniform(&mut rng, 1e-9, 1e-2);
            let r = log_uniform(&mut rng, 1e-9, 1e-2);
            let iterated = iterate_filter_covariance(q, r, 10_000_000)?;
            let closed = steady_state_covariance(q, r);
            let rel = (iterated - closed).abs() / closed;
            Ok(CheckLine {
                label: format!("pair {i:2} q={q:.3e} r={r:.3e}"),
                detail: format!("iterated={iterated:.12e} closed={closed:.12e} rel_err={rel:.2e} (limit {KALMAN_TOL:e})"),
                pass: rel <= KALMAN_TOL,
            })
        })
        .collect()
}

/// One-robot integrator `x' = x + h u` with scalar weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScalarInstance {
    pub weights: ScalarWeights,
    pub horizon: usize,
    pub h: f64,
    pub x0: f64,
}

impl ScalarInstance {
    pub fn random<R: Rng>(rng: &mut R) -> Self {
        Self {
            weights: ScalarWeights {
                q_state: rng.random_range(0.1..5.0),
                r_input: rng.random_range(0.1..5.0),
                q_terminal: rng.random_range(0.1..5.0),
            },
            horizon: rng.random_range(1..=4),
            h: rng.random_range(0.05..1.0),
            x0: rng.random_range(-2.0..2.0),
        }
    }

    /// Cost of the open-loop input sequence `u`.
    pub fn open_loop_cost(&self, u: &[f64]) -> f64 {
        let w = &self.weights;
        let mut x = self.x0;
        let mut cost = 0.0;
        for &uk in &u[..self.horizon] {
            cost += w.q_state * x * x + w.r_input * uk * uk;
            x += self.h * uk;
        }
        cost + w.q_terminal * x * x
    }

    /// Cost of the state feedback `u_k = -gains[k] x_k`, with the inputs.
    pub fn feedback_cost(&self, gains: &[f64]) -> (f64, Vec<f64>) {
        let mut x = self.x0;
        let u: Vec<f64> = gains[..self.horizon]
            .iter()
            .map(|g| {
                let uk = -g * x;
                x += self.h * uk;
                uk
            })
            .collect();
        (self.open_loop_cost(&u), u)
    }

    /// Minimum over open-loop sequences from the normal equations of the
    /// quadratic `J(u)`: with `x = x0 1 + h T u` (`T` strictly lower
    /// triangular ones), `(h^2 T' W T + r I) u = -h T' W 1 x0`.
    pub fn least_squares_minimum(&self) -> (f64, Vec<f64>) {
        let m = self.horizon;
        let w = &self.weights;
        let t = DMatrix::from_fn(m + 1, m, |k, j| if j < k { 1.0 } else { 0.0 });
        let weights = DVector::from_fn(m + 1, |k, _| if k == m { w.q_terminal } else { w.q_state });
        let wd = DMatrix::from_diagonal(&weights);
        let lhs = t.transpose() * &wd * &t * (self.h * self.h) + DMatrix::identity(m, m) * w.r_input;
        let rhs = -(t.transpose() * &weights) * (self.h * self.x0);
        let u = lhs.cholesky().expect("r > 0 makes the normal matrix definite").solve(&rhs);
        let u: Vec<f64> = u.iter().copied().collect();
        (self.open_loop_cost(&u), u)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptimalityResult {
    pub instance: ScalarInstance,
    pub synthesized_cost: f64,
    pub least_squares_cost: f64,
    pub best_random_cost: f64,
    /// Random gain sequences that beat the synthesized cost.
    pub random_wins: usize,
}

pub fn optimality_check<R: Rng>(instance: ScalarInstance, random_trials: usize, rng: &mut R) -> Result<OptimalityResult> {
    let schedule = local_riccati(&instance.weights, instance.horizon, instance.h)?;
    let gains: Vec<f64> = (0..instance.horizon).map(|k| schedule.gain_at(k)[(0, 0)]).collect();
    let (synthesized_cost, _) = instance.feedback_cost(&gains);
    let (least_squares_cost, _) = instance.least_squares_minimum();
    let gain_range = 3.0 / instance.h;
    let mut best_random_cost = f64::INFINITY;
    let mut random_wins = 0;
    for _ in 0..random_trials {
        let g: Vec<f64> = (0..instance.horizon).map(|_| rng.random_range(-gain_range..gain_range)).collect();
        let (c, _) = instance.feedback_cost(&g);
        best_random_cost = best_random_cost.min(c);
        if c < synthesized_cost {
            random_wins += 1;
        }
    }
    Ok(OptimalityResult {
        instance,
        synthesized_cost,
        least_squares_cost,
        best_random_cost,
        random_wins,
    })
}

fn riccati_lines(seed: u64, instances: usize, random_trials: usize) -> Result<Vec<CheckLine>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..instances)
        .map(|i| {
            let inst = ScalarInstance::random(&mut rng);
            let res = optimality_check(inst, random_trials, &mut rng)?;
            let gap = (res.synthesized_cost - res.least_squares_cost).abs();
            Ok(CheckLine {
                label: format!("instance {i:2} M={}", inst.horizon),
                detail: format!(
                    "riccati={:.12e} least_squares={:.12e} gap={gap:.2e} (limit {RICCATI_TOL:e}) best_random={:.6e} random_wins={}",
                    res.synthesized_cost, res.least_squares_cost, res.best_random_cost, res.random_wins
                ),
                pass: gap <= RICCATI_TOL && res.random_wins == 0,
            })
        })
        .collect()
}

/// Random `(mean, cov, S)` with `cov = A A^T` and `S = (B + B^T) / 2`.
pub fn random_triple<R: Rng>(rng: &mut R, n: usize) -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>) {
    let mean = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let b = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let cov = &a * a.transpose();
    let s = (&b + b.transpose()) * 0.5;
    (mean, cov, s)
}

fn lemma1_lines(seed: u64, triples: usize, samples: usize) -> Result<Vec<CheckLine>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cases: Vec<_> = (0..triples).map(|_| random_triple(&mut rng, 3)).collect();
    cases
        .into_par_iter()
        .enumerate()
        .map(|(i, (mean, cov, s))| {
            let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(seed, i));
            let r = quadratic_expectation_oracle(&mean, &cov, &s, samples, &mut rng)?;
            let z = r.z_score();
            Ok(CheckLine {
                label: format!("triple {i:2}"),
                detail: format!(
                    "empirical={:.6e} analytic={:.6e} se={:.2e} z={z:.2} (limit {LEMMA1_Z_LIMIT})",
                    r.empirical, r.analytic, r.std_error
                ),
                pass: z < LEMMA1_Z_LIMIT,
            })
        })
        .collect()
}

/// Low-noise preset run to the horizon so the floor is visible.
pub fn bound_scenario(seed: u64) -> Result<Scenario> {
    let mut cfg = four_robot_low_noise();
    cfg.run_to_horizon = true;
    cfg.master_seed = seed;
    Scenario::new(cfg)
}

fn bound_lines(seed: u64) -> Result<Vec<CheckLine>> {
    let scenario = bound_scenario(seed)?;
    let stats = scenario.run_monte_carlo()?;
    Axis::BOTH
        .into_iter()
        .map(|axis| {
            let check = check_ms_bound(&stats, &scenario, axis)?;
            let worst = (1..check.mse.len())
                .map(|k| check.mse[k] / check.bound[k])
                .fold(0.0, f64::max);
            let p = &check.params;
            Ok(CheckLine {
                label: format!("axis {}", axis.name()),
                detail: format!(
                    "kappa=[{:.4}, {:.4}] lambda={:.4e} (ls {:.4e}) mu={:.3e} eps0={:.3e} max mse/bound={worst:.3} violations={}",
                    p.kappa_lo,
                    p.kappa_hi,
                    p.lambda,
                    check.fit.lambda,
                    p.mu,
                    p.epsilon0,
                    check.violations.len()
                ),
                pass: check.holds(),
            })
        })
        .collect()
}

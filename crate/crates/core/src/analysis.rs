//! Costs, Lyapunov values, noise floors and the mean-square error bound
//! evaluated on simulated traces.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::axis::Axis;
use crate::control::{CostWeights, GainSchedule, ScalarWeights};
use crate::dynamics::NoiseSpec;
use crate::error::{Error, Result};
use crate::scenario::Scenario;
use crate::sim::{BatchStats, EpisodeTrace};
use crate::stats::{mean_and_std_error, pairwise_sum};

/// `v^T M v`; a `1 x 1` matrix acts as a scalar multiple of the identity.
pub fn quadratic_form(m: &DMatrix<f64>, v: &[f64]) -> f64 {
    if m.shape() == (1, 1) {
        m[(0, 0)] * pairwise_sum(&v.iter().map(|x| x * x).collect::<Vec<_>>())
    } else {
        let v = DVector::from_column_slice(v);
        v.dot(&(m * &v))
    }
}

/// `xi_M^T Q_M xi_M + sum_{k<M} (xi_k^T Q xi_k + u_k^T R u_k)` for explicit
/// sequences; `xi` has `M + 1` entries and `u` at least `M`.
pub fn quadratic_cost(xi: &[Vec<f64>], u: &[Vec<f64>], weights: &CostWeights) -> f64 {
    let m = weights.horizon;
    let mut terms: Vec<f64> = (0..m)
        .map(|k| quadratic_form(&weights.q_state, &xi[k]) + quadratic_form(&weights.r_input, &u[k]))
        .collect();
    terms.push(quadratic_form(&weights.q_terminal, &xi[m]));
    pairwise_sum(&terms)
}

/// Realized cost of one axis over the first `M` steps of a trace.
pub fn evaluate_cost(trace: &EpisodeTrace, weights: &CostWeights, axis: Axis) -> Result<f64> {
    let m = weights.horizon;
    if trace.last_step() < m {
        return Err(Error::TraceTooShort {
            available: trace.last_step(),
            required: m,
        });
    }
    let xi: Vec<Vec<f64>> = (0..=m).map(|k| trace.estimate_error(k, axis)).collect();
    let u: Vec<Vec<f64>> = (0..m).map(|k| trace.inputs(k, axis)).collect();
    Ok(quadratic_cost(&xi, &u, weights))
}

/// Cost of the executed trajectory with the terminal weight on its last
/// record, whatever the horizon.
pub fn realized_cost(trace: &EpisodeTrace, weights: &ScalarWeights, axis: Axis) -> f64 {
    let t = trace.last_step();
    let sq = |v: Vec<f64>| pairwise_sum(&v.iter().map(|x| x * x).collect::<Vec<_>>());
    let mut terms: Vec<f64> = (0..t)
        .map(|k| weights.q_state * sq(trace.estimate_error(k, axis)) + weights.r_input * sq(trace.inputs(k, axis)))
        .collect();
    terms.push(weights.q_terminal * sq(trace.estimate_error(t, axis)));
    pairwise_sum(&terms)
}

/// `V_k = xi_hat_k^T Pi_k xi_hat_k` for every record.
pub fn lyapunov_sequence(trace: &EpisodeTrace, schedule: &GainSchedule, axis: Axis) -> Vec<f64> {
    (0..trace.records.len())
        .map(|k| quadratic_form(schedule.pi_at(k), &trace.estimate_error(k, axis)))
        .collect()
}

fn pi_diagonal(pi: &DMatrix<f64>, i: usize) -> f64 {
    if pi.shape() == (1, 1) {
        pi[(0, 0)]
    } else {
        pi[(i, i)]
    }
}

/// Noise contribution of one robot to the one-step Lyapunov increment:
/// `pi_ii ((sum_c K_c)^2 (P + W) + sum_c K_c^2 V_c)`.
pub fn noise_floor_term(pi_ii: f64, gains: &[f64], p: f64, w: f64, meas_vars: &[f64]) -> f64 {
    let total: f64 = gains.iter().sum();
    let meas: f64 = gains.iter().zip(meas_vars).map(|(k, v)| k * k * v).sum();
    pi_ii * (total * total * (p + w) + meas)
}

/// `mu_k` for `k = 0 .. T-1`, pairing `P_{k|k}` with the gain `K_{k+1}` of
/// the following update and `Pi_{k+1}`.
pub fn noise_floor(trace: &EpisodeTrace, schedule: &GainSchedule, noise: &NoiseSpec, axis: Axis) -> Vec<f64> {
    let w = match axis {
        Axis::X => noise.process_var_x,
        Axis::Y => noise.process_var_y,
    };
    let meas_vars = noise.meas_vars();
    (0..trace.last_step())
        .map(|k| {
            let pi = schedule.pi_at(k + 1);
            let terms: Vec<f64> = (0..trace.n())
                .map(|i| {
                    let now = &trace.records[k].robots[i];
                    let next = &trace.records[k + 1].robots[i];
                    noise_floor_term(pi_diagonal(pi, i), next.gains(axis), now.covariance(axis), w, &meas_vars)
                })
                .collect();
            pairwise_sum(&terms)
        })
        .collect()
}

/// Minimum-cost expression for one realization:
/// `V_M + tr(Pi_M P_M) + sum_{k<M} (V_k + mu_k)`.
pub fn cost_to_go_expression(
    trace: &EpisodeTrace,
    schedule: &GainSchedule,
    noise: &NoiseSpec,
    axis: Axis,
    horizon: usize,
) -> f64 {
    let v = lyapunov_sequence(trace, schedule, axis);
    let mu = noise_floor(trace, schedule, noise, axis);
    let pi_m = schedule.pi_at(horizon);
    let terminal_trace: f64 = (0..trace.n())
        .map(|i| pi_diagonal(pi_m, i) * trace.records[horizon].robots[i].covariance(axis))
        .sum();
    let mut terms: Vec<f64> = (0..horizon).map(|k| v[k] + mu[k]).collect();
    terms.push(v[horizon]);
    terms.push(terminal_trace);
    pairwise_sum(&terms)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StabilityBoundParams {
    pub kappa_lo: f64,
    pub kappa_hi: f64,
    pub lambda: f64,
    pub mu: f64,
    pub epsilon0: f64,
}

impl StabilityBoundParams {
    pub fn new(kappa_lo: f64, kappa_hi: f64, lambda: f64, mu: f64, epsilon0: f64) -> Result<Self> {
        if !(kappa_lo > 0.0 && kappa_lo <= kappa_hi && kappa_hi.is_finite()) {
            return Err(Error::config("kappa", format!("need 0 < kappa_lo <= kappa_hi, got {kappa_lo}, {kappa_hi}")));
        }
        if !(lambda > 0.0 && lambda <= 1.0) {
            return Err(Error::config("lambda", format!("need 0 < lambda <= 1, got {lambda}")));
        }
        if !(mu >= 0.0 && mu.is_finite()) {
            return Err(Error::config("mu", "must be finite and >= 0"));
        }
        if !(epsilon0 >= 0.0 && epsilon0.is_finite()) {
            return Err(Error::config("epsilon0", "must be finite and >= 0"));
        }
        Ok(Self {
            kappa_lo,
            kappa_hi,
            lambda,
            mu,
            epsilon0,
        })
    }
}

/// `(kappa_hi / kappa_lo) eps0 (1 - lambda)^k + (mu / kappa_lo) sum_{m=1}^{k-1} (1 - lambda)^m`.
pub fn ms_bound(params: &StabilityBoundParams, k: usize) -> f64 {
    let rho = 1.0 - params.lambda;
    let transient = params.kappa_hi / params.kappa_lo * params.epsilon0 * rho.powi(k as i32);
    // sum_{m=1}^{k-1} rho^m = rho (1 - rho^{k-1}) / (1 - rho)
    let tail = if k < 2 || rho == 0.0 {
        0.0
    } else {
        rho * (1.0 - rho.powi(k as i32 - 1)) / params.lambda
    };
    transient + params.mu / params.kappa_lo * tail
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QuadraticExpectation {
    pub empirical: f64,
    pub analytic: f64,
    /// Standard error of the sample mean.
    pub std_error: f64,
    pub samples: usize,
}

impl QuadraticExpectation {
    /// `|empirical - analytic|` in standard errors.
    pub fn z_score(&self) -> f64 {
        let diff = (self.empirical - self.analytic).abs();
        if self.std_error > 0.0 {
            diff / self.std_error
        } else if diff <= 1e-12 * self.analytic.abs().max(1.0) {
            0.0
        } else {
            f64::INFINITY
        }
    }
}

pub const MIN_ORACLE_SAMPLES: usize = 10_000;
const PSD_EIGEN_TOL: f64 = 1e-10;

/// Sample mean of `x^T S x` for `x ~ N(mean, cov)` next to the closed form
/// `m^T S m + tr(S cov)`. Draws use `x = m + V sqrt(D) z` from the
/// eigendecomposition of `cov`.
pub fn quadratic_expectation_oracle<R: Rng + ?Sized>(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    s: &DMatrix<f64>,
    samples: usize,
    rng: &mut R,
) -> Result<QuadraticExpectation> {
    let n = mean.len();
    if cov.shape() != (n, n) || s.shape() != (n, n) {
        return Err(Error::config("cov", "mean, cov and S dimensions disagree"));
    }
    if samples < MIN_ORACLE_SAMPLES {
        return Err(Error::config("samples", format!("need at least {MIN_ORACLE_SAMPLES}")));
    }
    let scale = cov.abs().max().max(1.0);
    if (cov - cov.transpose()).abs().max() > PSD_EIGEN_TOL * scale {
        return Err(Error::config("cov", "covariance is not symmetric"));
    }
    let eig = cov.clone().symmetric_eigen();
    if eig.eigenvalues.iter().any(|&l| l < -PSD_EIGEN_TOL * scale) {
        return Err(Error::config("cov", "covariance is not positive semidefinite"));
    }
    let root = DVector::from_iterator(n, eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()));
    let factor = &eig.eigenvectors * DMatrix::from_diagonal(&root);

    let mut values = Vec::with_capacity(samples);
    let mut z = DVector::<f64>::zeros(n);
    for _ in 0..samples {
        for zi in z.iter_mut() {
            *zi = rng.sample(StandardNormal);
        }
        let x = mean + &factor * &z;
        values.push(x.dot(&(s * &x)));
    }
    let (empirical, std_error) = mean_and_std_error(&values);
    let analytic = mean.dot(&(s * mean)) + (s * cov).trace();
    Ok(QuadraticExpectation {
        empirical,
        analytic,
        std_error,
        samples,
    })
}

pub const MIN_FIT_WINDOW: usize = 20;
const MIN_DECAY_RATE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecayFit {
    /// `1 - exp(slope)` of the least-squares line through `ln(mse_k - floor)`.
    pub lambda: f64,
    /// Largest rate whose envelope `r_0 (1 - lambda)^k` stays above every
    /// residual in the window.
    pub lambda_conservative: f64,
    pub floor: f64,
    /// Half-open step range used for the fit.
    pub window: (usize, usize),
}

/// Fits a geometric decay to `mse_k - floor` over the leading steps where
/// that residual is strictly positive.
pub fn estimate_decay_rate(mse: &[f64], floor: f64) -> Result<DecayFit> {
    let end = mse.iter().position(|&m| !(m - floor > 0.0)).unwrap_or(mse.len());
    if end < MIN_FIT_WINDOW {
        return Err(Error::TraceTooShort {
            available: end,
            required: MIN_FIT_WINDOW,
        });
    }
    let logs: Vec<f64> = mse[..end].iter().map(|m| (m - floor).ln()).collect();
    let ks: Vec<f64> = (0..end).map(|k| k as f64).collect();
    let k_mean = pairwise_sum(&ks) / end as f64;
    let l_mean = pairwise_sum(&logs) / end as f64;
    let sxy = pairwise_sum(&ks.iter().zip(&logs).map(|(k, l)| (k - k_mean) * (l - l_mean)).collect::<Vec<_>>());
    let sxx = pairwise_sum(&ks.iter().map(|k| (k - k_mean) * (k - k_mean)).collect::<Vec<_>>());
    let slope = sxy / sxx;
    let lambda = -slope.exp_m1();
    if !(lambda > MIN_DECAY_RATE) {
        return Err(Error::Fit(format!("no decay in the fit window (slope {slope:.3e})")));
    }
    let lambda_conservative = (1..end)
        .map(|k| -((logs[k] - logs[0]) / k as f64).min(0.0).exp_m1())
        .fold(1.0, f64::min);
    if !(lambda_conservative > MIN_DECAY_RATE) {
        return Err(Error::Fit("residuals do not stay below any decaying envelope".to_string()));
    }
    Ok(DecayFit {
        lambda: lambda.min(1.0),
        lambda_conservative,
        floor,
        window: (0, end),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundCheck {
    pub axis: Axis,
    pub params: StabilityBoundParams,
    pub fit: DecayFit,
    pub mse: Vec<f64>,
    pub bound: Vec<f64>,
    /// Steps `k >= 1` where the empirical mean exceeds the bound.
    pub violations: Vec<usize>,
}

impl BoundCheck {
    pub fn holds(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Compares the batch mean-square true error of one axis with the bound,
/// using `kappa` from the eigenvalues of the synthesized `Pi` sequence, the
/// conservative decay fit, `mu = max_k mean(mu_k)` and `eps0` the initial
/// mean-square error.
pub fn check_ms_bound(stats: &BatchStats, scenario: &Scenario, axis: Axis) -> Result<BoundCheck> {
    let mse = stats.true_mse.get(axis).mean.clone();
    let floor = mse.iter().copied().fold(f64::INFINITY, f64::min);
    let fit = estimate_decay_rate(&mse, floor)?;
    let (kappa_lo, kappa_hi) = scenario.schedule(axis).pi_eigen_extremes();
    let mu = stats.noise_floor.get(axis).mean.iter().copied().fold(0.0, f64::max);
    let params = StabilityBoundParams::new(kappa_lo, kappa_hi, fit.lambda_conservative, mu, mse[0])?;
    let bound: Vec<f64> = (0..mse.len()).map(|k| ms_bound(&params, k)).collect();
    let violations = (1..mse.len()).filter(|&k| mse[k] > bound[k]).collect();
    Ok(BoundCheck {
        axis,
        params,
        fit,
        mse,
        bound,
        violations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn quadratic_form_examples() {
        assert_eq!(quadratic_form(&DMatrix::from_element(1, 1, 2.0), &[3.0]), 18.0);
        assert_eq!(quadratic_form(&DMatrix::from_element(1, 1, 2.0), &[0.0, 0.0]), 0.0);
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]);
        assert_eq!(quadratic_form(&m, &[1.0, -1.0]), 3.0);
    }

    #[test]
    fn hand_summed_cost() {
        let w = CostWeights::scalar(1.0, 1.0, 1.0, 1).unwrap();
        assert_eq!(quadratic_cost(&[vec![1.0], vec![1.0]], &[vec![0.0]], &w), 2.0);
        assert_eq!(quadratic_cost(&[vec![0.0], vec![0.0]], &[vec![0.0]], &w), 0.0);
        let w2 = CostWeights::scalar(2.0, 2.0, 2.0, 1).unwrap();
        let xi = [vec![0.3], vec![-0.7]];
        let u = [vec![1.1]];
        assert_relative_eq!(quadratic_cost(&xi, &u, &w2), 2.0 * quadratic_cost(&xi, &u, &w), max_relative = 1e-15);
    }

    #[test]
    fn scalar_noise_floor_example() {
        let mu = noise_floor_term(1.0, &[0.5], 1e-5, 1e-8, &[1e-4]);
        assert_relative_eq!(mu, 0.25 * 1e-5 + 0.25 * 1e-8 + 0.25 * 1e-4, max_relative = 1e-14);
        assert_eq!(noise_floor_term(3.0, &[0.4, 0.2], 0.0, 0.0, &[0.0, 0.0]), 0.0);
    }

    #[test]
    fn bound_examples() {
        let p = StabilityBoundParams::new(1.0, 1.0, 1.0, 0.0, 5.0).unwrap();
        for k in 1..10 {
            assert_eq!(ms_bound(&p, k), 0.0);
        }
        let p = StabilityBoundParams::new(1.0, 1.0, 0.5, 0.0, 1.0).unwrap();
        for k in 0..30 {
            assert_eq!(ms_bound(&p, k), 0.5f64.powi(k as i32));
        }
        let p = StabilityBoundParams::new(1.0, 1.0, 0.1, 1e-4, 0.0).unwrap();
        let direct: f64 = (1..100).map(|m| 1e-4 * 0.9f64.powi(m)).sum();
        assert_relative_eq!(ms_bound(&p, 100), direct, max_relative = 1e-12);
        assert_relative_eq!(ms_bound(&p, 100), 9e-4, max_relative = 1e-3);
    }

    #[test]
    fn bound_params_are_checked() {
        assert!(StabilityBoundParams::new(2.0, 1.0, 0.5, 0.0, 1.0).is_err());
        assert!(StabilityBoundParams::new(1.0, 1.0, 0.0, 0.0, 1.0).is_err());
        assert!(StabilityBoundParams::new(1.0, 1.0, 1.5, 0.0, 1.0).is_err());
        assert!(StabilityBoundParams::new(1.0, 1.0, 0.5, -1.0, 1.0).is_err());
    }

    #[test]
    fn decay_fit_examples() {
        let mse: Vec<f64> = (0..60).map(|k| 0.5f64.powi(k)).collect();
        let fit = estimate_decay_rate(&mse, 0.0).unwrap();
        assert!((fit.lambda - 0.5).abs() < 1e-6);
        assert!((fit.lambda_conservative - 0.5).abs() < 1e-6);

        let mse: Vec<f64> = (0..300).map(|k| 0.9f64.powi(k) + 1e-6).collect();
        let fit = estimate_decay_rate(&mse, 1e-6).unwrap();
        assert!((fit.lambda - 0.1).abs() < 1e-3);

        assert!(estimate_decay_rate(&[1.0; 100], 0.0).is_err());
        assert!(estimate_decay_rate(&[1.0; 100], 1.0).is_err());
        assert!(estimate_decay_rate(&mse[..10], 1e-6).is_err());
    }

    #[test]
    fn oracle_rejects_indefinite_covariance() {
        let mut rng = rand::rng();
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let err = quadratic_expectation_oracle(
            &DVector::zeros(2),
            &cov,
            &DMatrix::identity(2, 2),
            MIN_ORACLE_SAMPLES,
            &mut rng,
        )
        .unwrap_err();
        assert!(err.is_config());
    }

    #[test]
    fn oracle_closed_form_examples() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let r = quadratic_expectation_oracle(
            &DVector::zeros(3),
            &DMatrix::identity(3, 3),
            &DMatrix::identity(3, 3),
            MIN_ORACLE_SAMPLES,
            &mut rng,
        )
        .unwrap();
        assert_eq!(r.analytic, 3.0);
        assert!(r.z_score() < 5.0);
        let r = quadratic_expectation_oracle(
            &DVector::from_column_slice(&[1.0, 0.0]),
            &DMatrix::zeros(2, 2),
            &DMatrix::from_diagonal(&DVector::from_column_slice(&[2.0, 3.0])),
            MIN_ORACLE_SAMPLES,
            &mut rng,
        )
        .unwrap();
        assert_eq!(r.analytic, 2.0);
        assert_eq!(r.empirical, 2.0);
        assert_eq!(r.z_score(), 0.0);
    }
}

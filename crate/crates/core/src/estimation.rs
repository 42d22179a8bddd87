//! Per-robot, per-axis linear Kalman filtering with a stacked multi-channel
//! position observation (`H = [1, ..., 1]^T`, `R = diag(channel variances)`).
//!
//! The update is processed one channel at a time, which is algebraically the
//! same as the batch gain `K = P H^T (H P H^T + R)^-1` when every channel
//! variance is positive and stays well defined when some are zero. The gain
//! reported in [`AxisFilter::last_gain`] is the batch-equivalent one.

use nalgebra::DVector;
use serde::Serialize;

use crate::error::{Error, Result};

/// Residual magnitude tolerated on a channel whose innovation variance is
/// exactly zero before it is treated as a contradiction.
pub const ZERO_VARIANCE_RESIDUAL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AxisFilter {
    /// Current estimate, m.
    pub estimate: f64,
    /// Current error variance, m^2.
    pub covariance: f64,
    /// Batch-equivalent gain per channel from the most recent update.
    pub last_gain: Vec<f64>,
    /// `z_c - estimate_prior` per channel from the most recent update.
    pub last_innovation: Vec<f64>,
    /// State coefficient (1 for the integrator plant).
    pub a: f64,
    /// Input coefficient, s.
    pub b: f64,
    pub process_var: f64,
    pub meas_vars: Vec<f64>,
}

impl AxisFilter {
    pub fn new(estimate: f64, covariance: f64, h: f64, process_var: f64, meas_vars: Vec<f64>) -> Result<Self> {
        if !covariance.is_finite() || covariance < 0.0 {
            return Err(Error::config("initial_covariance", "must be finite and >= 0"));
        }
        if !process_var.is_finite() || process_var < 0.0 {
            return Err(Error::config("process_var", "must be finite and >= 0"));
        }
        if meas_vars.is_empty() {
            return Err(Error::config("meas_vars", "at least one measurement channel is required"));
        }
        if meas_vars.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::config("meas_vars", "channel variances must be finite and >= 0"));
        }
        let channels = meas_vars.len();
        Ok(Self {
            estimate,
            covariance,
            last_gain: vec![0.0; channels],
            last_innovation: vec![0.0; channels],
            a: 1.0,
            b: h,
            process_var,
            meas_vars,
        })
    }

    pub fn channels(&self) -> usize {
        self.meas_vars.len()
    }

    /// `x <- a x + b u`, `P <- a^2 P + Q`.
    pub fn predict(&mut self, u: f64) {
        self.estimate = self.a * self.estimate + self.b * u;
        self.covariance = self.a * self.covariance * self.a + self.process_var;
    }

    pub fn update(&mut self, z: &[f64]) -> Result<()> {
        if z.len() != self.channels() {
            return Err(Error::config(
                "measurement",
                format!("expected {} channels, got {}", self.channels(), z.len()),
            ));
        }
        let prior = self.estimate;
        let prior_cov = self.covariance;
        let mut estimate = prior;
        let mut p = prior_cov;
        let mut scalar_gains = vec![0.0; z.len()];

        for (c, (&zc, &rc)) in z.iter().zip(&self.meas_vars).enumerate() {
            let s = p + rc;
            let residual = zc - estimate;
            if s <= 0.0 {
                if residual.abs() > ZERO_VARIANCE_RESIDUAL_TOL {
                    return Err(Error::SingularInnovation { channel: c, residual });
                }
                continue;
            }
            let k = p / s;
            estimate += k * residual;
            p = ((1.0 - k) * p).max(0.0);
            scalar_gains[c] = k;
        }

        // x_post = x_prior + sum_c k_c prod_{j>c} (1 - k_j) (z_c - x_prior)
        let mut tail = 1.0;
        let mut batch = vec![0.0; z.len()];
        for c in (0..z.len()).rev() {
            batch[c] = scalar_gains[c] * tail;
            tail *= 1.0 - scalar_gains[c];
        }

        self.estimate = estimate;
        self.covariance = p.min(prior_cov);
        self.last_gain = batch;
        self.last_innovation = z.iter().map(|zc| zc - prior).collect();
        Ok(())
    }

    /// Sum of the batch gains, i.e. `K H`.
    pub fn total_gain(&self) -> f64 {
        self.last_gain.iter().sum()
    }
}

pub fn kf_predict(filter: &AxisFilter, u: f64, h: f64) -> AxisFilter {
    let mut f = filter.clone();
    f.b = h;
    f.predict(u);
    f
}

pub fn kf_update(filter: &AxisFilter, z: &[f64]) -> Result<AxisFilter> {
    let mut f = filter.clone();
    f.update(z)?;
    Ok(f)
}

/// Variance of the optimally fused channels, `1 / sum(1 / r_c)`; zero if any
/// channel is noiseless.
pub fn fused_variance(meas_vars: &[f64]) -> f64 {
    if meas_vars.contains(&0.0) {
        return 0.0;
    }
    1.0 / meas_vars.iter().map(|r| 1.0 / r).sum::<f64>()
}

/// Fixed point of the posterior variance recursion
/// `P = (P + q) - (P + q)^2 / (P + q + r)`, i.e. the nonnegative root of
/// `P^2 + q P - q r = 0`.
pub fn steady_state_covariance(process_var: f64, meas_var_effective: f64) -> f64 {
    let (q, r) = (process_var, meas_var_effective);
    if q == 0.0 {
        return 0.0;
    }
    // (-q + sqrt(q^2 + 4qr)) / 2 without the cancellation for q >> r
    2.0 * q * r / (q + (q * q + 4.0 * q * r).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RobotFilter {
    pub x: AxisFilter,
    pub y: AxisFilter,
}

/// Team-wide estimate ordered by robot index.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalEstimate {
    pub xs: DVector<f64>,
    pub ys: DVector<f64>,
    /// `(P^x, P^y)` per robot.
    pub covariances: Vec<(f64, f64)>,
}

impl GlobalEstimate {
    pub fn n(&self) -> usize {
        self.xs.len()
    }
}

pub fn stack(filters: &[RobotFilter]) -> GlobalEstimate {
    GlobalEstimate {
        xs: DVector::from_iterator(filters.len(), filters.iter().map(|f| f.x.estimate)),
        ys: DVector::from_iterator(filters.len(), filters.iter().map(|f| f.y.estimate)),
        covariances: filters.iter().map(|f| (f.x.covariance, f.y.covariance)).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;

    fn filter(est: f64, p: f64, q: f64, r: Vec<f64>) -> AxisFilter {
        AxisFilter::new(est, p, 0.1, q, r).unwrap()
    }

    #[test]
    fn predict_examples() {
        let f = kf_predict(&filter(0.2, 1e-4, 0.0, vec![1e-4]), 0.0, 0.1);
        assert_eq!((f.estimate, f.covariance), (0.2, 1e-4));
        let f = kf_predict(&filter(0.0, 1e-4, 0.0, vec![1e-4]), 1.0, 0.1);
        assert_eq!(f.estimate, 0.1);
        let f = kf_predict(&filter(0.0, 1e-4, 1e-8, vec![1e-4]), 0.0, 0.1);
        assert_relative_eq!(f.covariance, 1.0001e-4, max_relative = 1e-14);
    }

    #[test]
    fn update_examples() {
        let f = kf_update(&filter(0.3, 1e-4, 0.0, vec![1e-6, 1e-4]), &[0.3, 0.3]).unwrap();
        assert_eq!(f.estimate, 0.3);

        let f = kf_update(&filter(0.3, 1e-4, 0.0, vec![1e30, 1e30]), &[5.0, -5.0]).unwrap();
        assert!(f.total_gain() < 1e-25);
        assert_relative_eq!(f.estimate, 0.3, max_relative = 1e-20);

        let f = kf_update(&filter(0.0, 1e-4, 0.0, vec![1e-4]), &[1.0]).unwrap();
        assert_relative_eq!(f.last_gain[0], 0.5, max_relative = 1e-15);
        assert_relative_eq!(f.covariance, 5e-5, max_relative = 1e-15);
    }

    #[test]
    fn zero_variance_channels() {
        // consistent noiseless channels are absorbed
        let f = kf_update(&filter(0.0, 1e-6, 0.0, vec![0.0, 0.0]), &[0.25, 0.25]).unwrap();
        assert_eq!(f.estimate, 0.25);
        assert_eq!(f.covariance, 0.0);
        // contradictory noiseless channels cannot be reconciled
        let err = kf_update(&filter(0.0, 1e-6, 0.0, vec![0.0, 0.0]), &[0.25, 0.5]).unwrap_err();
        assert!(matches!(err, Error::SingularInnovation { channel: 1, .. }));
        // prior certain and sensor noiseless
        let err = kf_update(&filter(0.0, 0.0, 0.0, vec![0.0]), &[0.1]).unwrap_err();
        assert!(matches!(err, Error::SingularInnovation { channel: 0, .. }));
    }

    #[test]
    fn wrong_channel_count_rejected() {
        assert!(kf_update(&filter(0.0, 1.0, 0.0, vec![1.0, 1.0]), &[0.0]).is_err());
        assert!(AxisFilter::new(0.0, 1.0, 0.1, 0.0, vec![]).is_err());
        assert!(AxisFilter::new(0.0, -1.0, 0.1, 0.0, vec![1.0]).is_err());
    }

    #[test]
    fn steady_state_examples() {
        assert_eq!(steady_state_covariance(0.0, 1e-4), 0.0);
        let r = 3e-5;
        assert_relative_eq!(steady_state_covariance(r, r), r * (5f64.sqrt() - 1.0) / 2.0, max_relative = 1e-14);

        let q = 1e-8;
        let r_eff = fused_variance(&[1e-6, 1e-4]);
        assert_relative_eq!(r_eff, 9.900990099009901e-7, max_relative = 1e-14);
        let closed = steady_state_covariance(q, r_eff);
        let mut f = filter(0.0, 1e-6, q, vec![1e-6, 1e-4]);
        for _ in 0..200 {
            f.predict(0.0);
            f.update(&[0.0, 0.0]).unwrap();
        }
        assert!((f.covariance - closed).abs() < 1e-12);
        // quadratic formula evaluated the textbook way
        let textbook = (-q + (q * q + 4.0 * q * r_eff).sqrt()) / 2.0;
        assert_relative_eq!(closed, textbook, max_relative = 1e-9);
    }

    #[test]
    fn covariance_converges_monotonically_after_first_step() {
        let (q, vars) = (1e-8, vec![1e-6, 1e-4]);
        let target = steady_state_covariance(q, fused_variance(&vars));
        let mut f = filter(0.0, 1e-6, q, vars);
        let mut gaps = Vec::new();
        for _ in 0..200 {
            f.predict(0.0);
            f.update(&[0.0, 0.0]).unwrap();
            gaps.push((f.covariance - target).abs());
        }
        assert!(gaps.windows(2).all(|w| w[1] <= w[0]));
        assert!(*gaps.last().unwrap() < 1e-10);
    }

    #[test]
    fn error_contracts_without_realized_noise() {
        let mut f = filter(0.0, 1e-4, 0.0, vec![1e-4]);
        let truth = 1.0;
        let mut err = (f.estimate - truth).abs();
        for _ in 0..10 {
            f.predict(0.0);
            f.update(&[truth]).unwrap();
            let k = f.last_gain[0];
            assert!(k > 0.0 && k < 1.0);
            let next = (f.estimate - truth).abs();
            assert_relative_eq!(next, (1.0 - k) * err, max_relative = 1e-12);
            err = next;
        }
    }

    #[test]
    fn stack_orders_by_robot() {
        let xs = [0.2, -0.2, -0.2, 0.2];
        let ys = [-0.065, -0.065, 0.065, 0.065];
        let filters: Vec<RobotFilter> = xs
            .iter()
            .zip(ys)
            .map(|(&x, y)| RobotFilter {
                x: filter(x, 1e-6, 1e-8, vec![1e-6, 1e-4]),
                y: filter(y, 1e-6, 1e-8, vec![1e-6, 1e-4]),
            })
            .collect();
        let g = stack(&filters);
        assert_eq!(g.xs.as_slice(), &xs);
        assert_eq!(g.ys.as_slice(), &ys);
        assert_eq!(stack(&filters[..1]).n(), 1);

        let mut permuted = filters.clone();
        permuted.swap(0, 2);
        let gp = stack(&permuted);
        assert_eq!(gp.xs[0], g.xs[2]);
        assert_eq!(gp.xs[2], g.xs[0]);
        assert_eq!(gp.ys[1], g.ys[1]);
    }

    proptest! {
        #[test]
        fn sequential_update_matches_batch_gain(
            p in 1e-8f64..1.0, r1 in 1e-8f64..1.0, r2 in 1e-8f64..1.0,
            x in -1.0f64..1.0, z1 in -1.0f64..1.0, z2 in -1.0f64..1.0,
        ) {
            let f = kf_update(&filter(x, p, 0.0, vec![r1, r2]), &[z1, z2]).unwrap();
            let h = DMatrix::from_element(2, 1, 1.0);
            let r = DMatrix::from_diagonal(&DVector::from_vec(vec![r1, r2]));
            let s = &h * p * h.transpose() + r;
            let k = (h.transpose() * p) * s.try_inverse().unwrap();
            let innov = DVector::from_vec(vec![z1 - x, z2 - x]);
            let est = x + (&k * innov)[0];
            let cov = (1.0 - (&k * &h)[0]) * p;
            prop_assert!((f.estimate - est).abs() <= 1e-9 * (1.0 + est.abs()));
            prop_assert!((f.covariance - cov).abs() <= 1e-9 * cov);
            prop_assert!((f.last_gain[0] - k[0]).abs() <= 1e-9);
            prop_assert!((f.last_gain[1] - k[1]).abs() <= 1e-9);
        }

        #[test]
        fn posterior_never_exceeds_prior(
            p in 0.0f64..1.0, r1 in 0.0f64..1.0, r2 in 1e-12f64..1.0, z in -1.0f64..1.0,
        ) {
            let prior = filter(0.0, p, 0.0, vec![r1, r2]);
            if let Ok(post) = kf_update(&prior, &[z, z]) {
                prop_assert!(post.covariance <= prior.covariance);
                prop_assert!(post.covariance >= 0.0);
            }
        }

        #[test]
        fn axis_filters_are_symmetric(
            p in 1e-8f64..1.0, q in 0.0f64..1e-3, zs in prop::collection::vec(-1.0f64..1.0, 10),
        ) {
            let mut fx = filter(0.1, p, q, vec![1e-4, 1e-2]);
            let mut fy = filter(0.1, p, q, vec![1e-4, 1e-2]);
            for z in zs {
                fx.predict(0.3);
                fx.update(&[z, -z]).unwrap();
                fy.predict(0.3);
                fy.update(&[z, -z]).unwrap();
            }
            prop_assert_eq!(fx, fy);
        }
    }
}

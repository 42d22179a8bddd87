//! Truth propagation for the decoupled-axis integrator robot, sensor and
//! process noise sampling, and the differential-drive back-end that turns a
//! planar velocity command into wheel speeds.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Planar speed below which the heading is held instead of following
/// `atan2(uy, ux)`.
pub const HEADING_DEADBAND: f64 = 1e-6;

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(angle: f64) -> f64 {
    let mut a = angle.rem_euclid(2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    }
    if a <= -PI {
        a += 2.0 * PI;
    }
    a
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    /// m
    pub x: f64,
    /// m
    pub y: f64,
    /// rad, in `(-pi, pi]`
    pub theta: f64,
}

impl RobotState {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: wrap_angle(theta),
        }
    }

    pub fn at(x: f64, y: f64) -> Self {
        Self::new(x, y, 0.0)
    }
}

/// Variances of the process noise on each axis and of the two position
/// sensors (wheel odometry and IMU-derived pose).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSpec {
    pub process_var_x: f64,
    pub process_var_y: f64,
    pub meas_var_odom: f64,
    pub meas_var_imu: f64,
}

impl NoiseSpec {
    pub const fn zero() -> Self {
        Self {
            process_var_x: 0.0,
            process_var_y: 0.0,
            meas_var_odom: 0.0,
            meas_var_imu: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("noise.process_var_x", self.process_var_x),
            ("noise.process_var_y", self.process_var_y),
            ("noise.meas_var_odom", self.meas_var_odom),
            ("noise.meas_var_imu", self.meas_var_imu),
        ];
        for (name, v) in fields {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(name, format!("variance must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Channel variances in measurement order `[odometry, imu]`.
    pub fn meas_vars(&self) -> [f64; 2] {
        [self.meas_var_odom, self.meas_var_imu]
    }
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            process_var_x: 1e-8,
            process_var_y: 1e-8,
            meas_var_odom: 1e-6,
            meas_var_imu: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DriveParams {
    /// m
    pub wheelbase: f64,
    /// m/s, applied to each wheel
    pub wheel_speed_limit: f64,
    /// 1/s
    pub heading_gain: f64,
}

impl DriveParams {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("drive.wheelbase", self.wheelbase),
            ("drive.wheel_speed_limit", self.wheel_speed_limit),
            ("drive.heading_gain", self.heading_gain),
        ];
        for (name, v) in fields {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::config(name, format!("must be finite and > 0, got {v}")));
            }
        }
        Ok(())
    }
}

impl Default for DriveParams {
    fn default() -> Self {
        Self {
            wheelbase: 0.105,
            wheel_speed_limit: 0.154,
            heading_gain: 2.0,
        }
    }
}

/// One step of `x' = x + h ux + wx`, `y' = y + h uy + wy`. The heading
/// snaps to the direction of the commanded velocity.
pub fn step_true_state(state: RobotState, ux: f64, uy: f64, h: f64, wx: f64, wy: f64) -> RobotState {
    let theta = if ux.hypot(uy) > HEADING_DEADBAND {
        wrap_angle(uy.atan2(ux))
    } else {
        state.theta
    };
    RobotState {
        x: state.x + h * ux + wx,
        y: state.y + h * uy + wy,
        theta,
    }
}

/// Zero-mean Gaussian draw with the given variance. A standard normal is
/// always consumed so the stream position does not depend on the variance.
fn gaussian<R: Rng + ?Sized>(rng: &mut R, variance: f64) -> f64 {
    let n: f64 = rng.sample(StandardNormal);
    if variance == 0.0 {
        0.0
    } else {
        variance.sqrt() * n
    }
}

pub fn sample_process_noise<R: Rng + ?Sized>(rng: &mut R, spec: &NoiseSpec) -> (f64, f64) {
    let wx = gaussian(rng, spec.process_var_x);
    let wy = gaussian(rng, spec.process_var_y);
    (wx, wy)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Measurement {
    pub z_odom_x: f64,
    pub z_imu_x: f64,
    pub z_odom_y: f64,
    pub z_imu_y: f64,
}

impl Measurement {
    pub fn x_channels(&self) -> [f64; 2] {
        [self.z_odom_x, self.z_imu_x]
    }

    pub fn y_channels(&self) -> [f64; 2] {
        [self.z_odom_y, self.z_imu_y]
    }
}

/// Draw order: odometry x, IMU x, odometry y, IMU y.
pub fn measure<R: Rng + ?Sized>(state: &RobotState, rng: &mut R, spec: &NoiseSpec) -> Measurement {
    let z_odom_x = state.x + gaussian(rng, spec.meas_var_odom);
    let z_imu_x = state.x + gaussian(rng, spec.meas_var_imu);
    let z_odom_y = state.y + gaussian(rng, spec.meas_var_odom);
    let z_imu_y = state.y + gaussian(rng, spec.meas_var_imu);
    Measurement {
        z_odom_x,
        z_imu_x,
        z_odom_y,
        z_imu_y,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct WheelSpeeds {
    pub left: f64,
    pub right: f64,
}

/// Heading-tracking differential-drive conversion. Linear speed is the
/// projection of the command on the current heading, angular rate is
/// proportional to the heading error, and each wheel is clamped
/// independently.
pub fn unicycle_to_wheels(ux: f64, uy: f64, state: &RobotState, params: &DriveParams) -> WheelSpeeds {
    let limit = params.wheel_speed_limit;
    let (sin, cos) = state.theta.sin_cos();
    let v = (ux * cos + uy * sin).clamp(-limit, limit);
    let omega = if ux.hypot(uy) > HEADING_DEADBAND {
        params.heading_gain * wrap_angle(uy.atan2(ux) - state.theta)
    } else {
        0.0
    };
    let half_track = 0.5 * omega * params.wheelbase;
    WheelSpeeds {
        left: (v - half_track).clamp(-limit, limit),
        right: (v + half_track).clamp(-limit, limit),
    }
}

//! Experiment description and the prepared (validated, synthesized) form
//! used by the episode runner.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::axis::{Axis, AxisPair};
use crate::control::{local_riccati, riccati_backward_varying, GainSchedule, ScalarWeights};
use crate::dynamics::{DriveParams, NoiseSpec, RobotState};
use crate::error::{Error, Result};
use crate::graph::Topology;

pub const SCHEMA_VERSION: u32 = 1;

pub const PRESET_LOW_NOISE: &str = "paper-sec5-low-noise";
pub const PRESET_HIGH_NOISE: &str = "paper-sec5-high-noise";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GainMode {
    /// One scalar schedule shared by every robot.
    #[default]
    Local,
    /// Stacked `N x N` schedule for the Laplacian-coupled team.
    Global,
}

impl GainMode {
    pub fn as_str(self) -> &'static str {
        match self {
            GainMode::Local => "local",
            GainMode::Global => "global",
        }
    }
}

impl fmt::Display for GainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "local" => Ok(GainMode::Local),
            "global" => Ok(GainMode::Global),
            other => Err(Error::config("gain_mode", format!("expected \"local\" or \"global\", got {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TopologyPreset {
    Complete,
    Ring,
    Path,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleEntry {
    pub from_step: usize,
    pub adjacency: Vec<Vec<f64>>,
}

/// Either a named preset or an explicit adjacency matrix, optionally
/// followed by switching entries. Neither given means the complete graph.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TopologySpec {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<TopologyPreset>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adjacency: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub schedule: Vec<ScheduleEntry>,
}

fn rows_to_matrix(rows: &[Vec<f64>], n: usize, field: &str) -> Result<DMatrix<f64>> {
    if rows.len() != n || rows.iter().any(|r| r.len() != n) {
        return Err(Error::config(field, format!("adjacency must be {n} x {n}")));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

impl TopologySpec {
    pub fn build(&self, n: usize) -> Result<Topology> {
        let mut topology = match (&self.preset, &self.adjacency) {
            (Some(_), Some(_)) => {
                return Err(Error::config("topology", "give either preset or adjacency, not both"));
            }
            (Some(TopologyPreset::Complete), None) | (None, None) => Topology::complete(n),
            (Some(TopologyPreset::Ring), None) => Topology::ring(n),
            (Some(TopologyPreset::Path), None) => Topology::path(n),
            (None, Some(rows)) => Topology::new(rows_to_matrix(rows, n, "topology.adjacency")?)?,
        };
        for (idx, entry) in self.schedule.iter().enumerate() {
            let field = format!("topology.schedule[{idx}].adjacency");
            topology = topology.with_schedule_entry(entry.from_step, rows_to_matrix(&entry.adjacency, n, &field)?)?;
        }
        Ok(topology)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeightsSpec {
    pub x: ScalarWeights,
    pub y: ScalarWeights,
    /// Riccati horizon `M`; defaults to `max_steps`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub horizon: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialState {
    pub x: f64,
    pub y: f64,
    #[serde(default)]
    pub theta: f64,
}

impl From<InitialState> for RobotState {
    fn from(s: InitialState) -> Self {
        RobotState::new(s.x, s.y, s.theta)
    }
}

fn default_schema_version() -> u32 {
    SCHEMA_VERSION
}
fn default_name() -> String {
    "scenario".to_string()
}
fn default_h() -> f64 {
    0.1
}
fn default_initial_covariance() -> f64 {
    1e-6
}
fn default_epsilon() -> f64 {
    0.005
}
fn default_max_steps() -> usize {
    600
}
fn default_runs() -> usize {
    200
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default = "default_schema_version")]
    pub schema_version: u32,
    #[serde(default = "default_name")]
    pub name: String,
    pub n: usize,
    /// Sampling interval, s.
    #[serde(default = "default_h")]
    pub h: f64,
    pub initial_states: Vec<InitialState>,
    /// `[x_hat, y_hat]` per robot; the true positions when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_estimates: Option<Vec<[f64; 2]>>,
    /// m^2, per axis per robot.
    #[serde(default = "default_initial_covariance")]
    pub initial_covariance: f64,
    #[serde(default)]
    pub noise: NoiseSpec,
    #[serde(default)]
    pub topology: TopologySpec,
    #[serde(default)]
    pub weights: WeightsSpec,
    #[serde(default)]
    pub gain_mode: GainMode,
    #[serde(default)]
    pub drive: DriveParams,
    /// Convergence tolerance on pairwise estimate gaps, m.
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
    /// Keep stepping after the convergence test passes, up to `max_steps`.
    #[serde(default)]
    pub run_to_horizon: bool,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default = "default_runs")]
    pub monte_carlo_runs: usize,
}

impl ScenarioConfig {
    /// A config with every optional field at its default.
    pub fn with_initial_states(name: &str, initial_states: Vec<InitialState>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            name: name.to_string(),
            n: initial_states.len(),
            h: default_h(),
            initial_states,
            initial_estimates: None,
            initial_covariance: default_initial_covariance(),
            noise: NoiseSpec::default(),
            topology: TopologySpec::default(),
            weights: WeightsSpec::default(),
            gain_mode: GainMode::Local,
            drive: DriveParams::default(),
            epsilon: default_epsilon(),
            max_steps: default_max_steps(),
            run_to_horizon: false,
            master_seed: 0,
            monte_carlo_runs: default_runs(),
        }
    }

    pub fn horizon(&self) -> usize {
        self.weights.horizon.unwrap_or(self.max_steps)
    }

    pub fn initial_robot_states(&self) -> Vec<RobotState> {
        self.initial_states.iter().map(|&s| s.into()).collect()
    }

    pub fn initial_estimate(&self, i: usize) -> [f64; 2] {
        match &self.initial_estimates {
            Some(est) => est[i],
            None => [self.initial_states[i].x, self.initial_states[i].y],
        }
    }

    /// Mean of the initial true positions.
    pub fn centroid(&self) -> [f64; 2] {
        let n = self.initial_states.len() as f64;
        let xs: Vec<f64> = self.initial_states.iter().map(|s| s.x).collect();
        let ys: Vec<f64> = self.initial_states.iter().map(|s| s.y).collect();
        [crate::stats::pairwise_sum(&xs) / n, crate::stats::pairwise_sum(&ys) / n]
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(
                "schema_version",
                format!("unsupported version {} (expected {SCHEMA_VERSION})", self.schema_version),
            ));
        }
        if self.n < 2 {
            return Err(Error::config("n", format!("at least 2 robots are required, got {}", self.n)));
        }
        if !self.h.is_finite() || self.h <= 0.0 {
            return Err(Error::config("h", "must be finite and > 0"));
        }
        if self.initial_states.len() != self.n {
            return Err(Error::config(
                "initial_states",
                format!("expected {} entries, got {}", self.n, self.initial_states.len()),
            ));
        }
        for (i, s) in self.initial_states.iter().enumerate() {
            if !(s.x.is_finite() && s.y.is_finite() && s.theta.is_finite()) {
                return Err(Error::config(format!("initial_states[{i}]"), "coordinates must be finite"));
            }
        }
        if let Some(est) = &self.initial_estimates {
            if est.len() != self.n {
                return Err(Error::config(
                    "initial_estimates",
                    format!("expected {} entries, got {}", self.n, est.len()),
                ));
            }
            if est.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::config("initial_estimates", "coordinates must be finite"));
            }
        }
        if !self.initial_covariance.is_finite() || self.initial_covariance < 0.0 {
            return Err(Error::config("initial_covariance", "must be finite and >= 0"));
        }
        self.noise.validate()?;
        self.drive.validate()?;
        self.weights.x.validate("weights.x")?;
        self.weights.y.validate("weights.y")?;
        if self.horizon() == 0 {
            return Err(Error::config("weights.horizon", "must be >= 1"));
        }
        if !self.epsilon.is_finite() || self.epsilon <= 0.0 {
            return Err(Error::config("epsilon", "must be finite and > 0"));
        }
        if self.max_steps == 0 {
            return Err(Error::config("max_steps", "must be >= 1"));
        }
        if self.monte_carlo_runs == 0 {
            return Err(Error::config("monte_carlo_runs", "must be >= 1"));
        }
        self.topology.build(self.n)?;
        Ok(())
    }
}

fn four_robot_square() -> Vec<InitialState> {
    [(0.2, -0.065), (-0.2, -0.065), (-0.2, 0.065), (0.2, 0.065)]
        .into_iter()
        .map(|(x, y)| InitialState { x, y, theta: 0.0 })
        .collect()
}

/// Four robots on the 0.4 m x 0.13 m rectangle, accurate odometry.
pub fn four_robot_low_noise() -> ScenarioConfig {
    let mut cfg = ScenarioConfig::with_initial_states(PRESET_LOW_NOISE, four_robot_square());
    cfg.noise.meas_var_odom = 1e-6;
    cfg.noise.meas_var_imu = 1e-4;
    cfg
}

/// Same geometry with both sensor variances raised.
pub fn four_robot_high_noise() -> ScenarioConfig {
    let mut cfg = four_robot_low_noise();
    cfg.name = PRESET_HIGH_NOISE.to_string();
    cfg.noise.meas_var_odom = 1e-3;
    cfg.noise.meas_var_imu = 1e-2;
    cfg
}

pub const PRESET_NAMES: [&str; 2] = [PRESET_LOW_NOISE, PRESET_HIGH_NOISE];

pub fn preset(name: &str) -> Option<ScenarioConfig> {
    match name {
        PRESET_LOW_NOISE => Some(four_robot_low_noise()),
        PRESET_HIGH_NOISE => Some(four_robot_high_noise()),
        _ => None,
    }
}

/// A validated config with its topology and gain schedules built once and
/// shared read-only by every episode.
#[derive(Debug, Clone)]
pub struct Scenario {
    config: ScenarioConfig,
    topology: Topology,
    schedules: AxisPair<GainSchedule>,
    target: [f64; 2],
}

impl Scenario {
    pub fn new(config: ScenarioConfig) -> Result<Self> {
        config.validate()?;
        let topology = config.topology.build(config.n)?;
        let horizon = config.horizon();
        let schedules = AxisPair::try_from_fn(|axis| {
            let w = match axis {
                Axis::X => &config.weights.x,
                Axis::Y => &config.weights.y,
            };
            synthesize(w, config.gain_mode, &topology, horizon, config.h)
        })?;
        let target = config.centroid();
        Ok(Self {
            config,
            topology,
            schedules,
            target,
        })
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.config
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn schedules(&self) -> &AxisPair<GainSchedule> {
        &self.schedules
    }

    pub fn schedule(&self, axis: Axis) -> &GainSchedule {
        self.schedules.get(axis)
    }

    /// Rendezvous point `(x0, y0)`: the centroid of the initial positions.
    pub fn target(&self) -> [f64; 2] {
        self.target
    }

    pub fn weights(&self, axis: Axis) -> &ScalarWeights {
        match axis {
            Axis::X => &self.config.weights.x,
            Axis::Y => &self.config.weights.y,
        }
    }
}

/// Gain schedule for one axis. Local mode treats each robot as the scalar
/// plant `x' = x + h u`; global mode uses `A = I_N`, `B = L(k) h`.
pub fn synthesize(
    weights: &ScalarWeights,
    mode: GainMode,
    topology: &Topology,
    horizon: usize,
    h: f64,
) -> Result<GainSchedule> {
    match mode {
        GainMode::Local => local_riccati(weights, horizon, h),
        GainMode::Global => {
            let n = topology.n();
            let cost = weights.to_cost_weights(n, horizon)?;
            riccati_backward_varying(&cost, |k| {
                let a = DMatrix::<f64>::identity(n, n);
                let b = topology.laplacian(k).into_inner() * h;
                (a, b)
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_match_published_setup() {
        let low = preset(PRESET_LOW_NOISE).unwrap();
        assert_eq!(low.n, 4);
        assert_eq!(low.h, 0.1);
        assert_eq!(low.noise.meas_var_odom, 1e-6);
        assert_eq!(low.noise.meas_var_imu, 1e-4);
        assert_eq!(low.drive.wheel_speed_limit, 0.154);
        assert_eq!(low.centroid(), [0.0, 0.0]);
        let high = preset(PRESET_HIGH_NOISE).unwrap();
        assert_eq!(high.noise.meas_var_odom, 1e-3);
        assert_eq!(high.noise.meas_var_imu, 1e-2);
        assert_eq!(high.initial_states, low.initial_states);
        assert!(preset("nope").is_none());
    }

    #[test]
    fn validation_names_the_field() {
        let mut cfg = four_robot_low_noise();
        cfg.n = 3;
        assert!(matches!(cfg.validate(), Err(Error::Config { field, .. }) if field == "initial_states"));
        let mut cfg = four_robot_low_noise();
        cfg.n = 1;
        cfg.initial_states.truncate(1);
        assert!(matches!(cfg.validate(), Err(Error::Config { field, .. }) if field == "n"));
        let mut cfg = four_robot_low_noise();
        cfg.epsilon = 0.0;
        assert!(matches!(cfg.validate(), Err(Error::Config { field, .. }) if field == "epsilon"));
        let mut cfg = four_robot_low_noise();
        cfg.topology.adjacency = Some(vec![vec![0.0; 3]; 3]);
        assert!(matches!(cfg.validate(), Err(Error::Config { field, .. }) if field == "topology.adjacency"));
    }

    #[test]
    fn global_schedule_is_team_sized() {
        let mut cfg = four_robot_low_noise();
        cfg.gain_mode = GainMode::Global;
        cfg.max_steps = 10;
        let sc = Scenario::new(cfg).unwrap();
        assert_eq!(sc.schedule(Axis::X).gain_at(0).shape(), (4, 4));
        assert_eq!(sc.schedule(Axis::Y).horizon(), 10);
    }
}

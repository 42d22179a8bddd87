//! Distributed LQG rendezvous for planar integrator robots: per-robot
//! Kalman filtering of fused position sensors, Riccati-synthesized
//! neighbour-difference control, closed-loop simulation and Monte Carlo
//! analysis of the mean-square rendezvous error.

pub mod analysis;
pub mod axis;
pub mod control;
pub mod dynamics;
pub mod error;
pub mod estimation;
pub mod graph;
pub mod scenario;
pub mod sim;
pub mod stats;
pub mod verify;

pub use axis::{Axis, AxisPair};
pub use control::{CostWeights, GainSchedule, PlanarInput, ScalarWeights};
pub use dynamics::{DriveParams, NoiseSpec, RobotState, WheelSpeeds};
pub use error::{Error, Result};
pub use estimation::{AxisFilter, GlobalEstimate, RobotFilter};
pub use graph::{LaplacianMatrix, Topology};
pub use scenario::{GainMode, Scenario, ScenarioConfig};
pub use sim::{BatchStats, EpisodeSeries, EpisodeTrace, StepRecord};

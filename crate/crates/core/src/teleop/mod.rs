//! The teleoperation loop: a virtual gripper squeezing a plasticine ball
//! against the simulated gel, with the estimated force fed back as vibration.

pub mod ball;
pub mod experiment;
pub mod pipeline;
pub mod session;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flowtrack::{TrackConfig, TrackError};
use crate::forceest::{Calibration, EstimateError, SlipConfig};
use crate::gelsim::{GelConfig, GelError};
use crate::hapticmap::HapticConfig;
use crate::sliprig::RigConfig;

pub use ball::{step_ball, BallParams, BallState};
pub use experiment::{robustness_check, run_controller_experiment, ControllerMode, RobustnessDraw, RobustnessReport};
pub use pipeline::{GripCommand, Pipeline, PipelineHandles, Stamped};
pub use session::{
    replay_session, spawn_recorder, SessionLine, SessionRecord, SessionSummary, TaskSummary, TickRecord,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid pipeline config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Gel(#[from] GelError),
    #[error(transparent)]
    Track(#[from] TrackError),
    #[error(transparent)]
    Estimate(#[from] EstimateError),
    #[error("session log: {0}")]
    Session(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GripperConfig {
    /// Aperture (mm) at normalized command 1.0.
    pub max_aperture: f64,
    /// Normalized aperture change per second when a command omits a rate.
    pub default_rate: f64,
}

impl Default for GripperConfig {
    fn default() -> Self {
        Self {
            max_aperture: 60.0,
            default_rate: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Feedback mode stops closing once the shaped intensity reaches this.
    pub i_target: f64,
    /// Naive mode closes to this fraction of the rest diameter.
    pub naive_target_ratio: f64,
    /// mm/s.
    pub close_speed: f64,
    /// Seconds held after lifting.
    pub hold_s: f64,
    /// Hard stop for the closing phase, seconds.
    pub max_close_s: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            i_target: 0.35,
            naive_target_ratio: 0.8,
            close_speed: 10.0,
            hold_s: 2.0,
            max_close_s: 30.0,
        }
    }
}

/// Inclusive `[lo, hi]` bounds for the randomized ball draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BallRanges {
    pub rest_diameter: [f64; 2],
    pub stiffness: [f64; 2],
    pub yield_force: [f64; 2],
    pub plastic_rate: [f64; 2],
    pub hold_min: [f64; 2],
}

impl Default for BallRanges {
    fn default() -> Self {
        Self {
            rest_diameter: [30.0, 50.0],
            stiffness: [1.5, 3.0],
            yield_force: [2.5, 4.0],
            plastic_rate: [0.3, 1.0],
            hold_min: [0.5, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WireConfig {
    pub bind: String,
    pub tcp_port: u16,
    pub ws_port: u16,
}

impl Default for WireConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1".into(),
            tcp_port: 7455,
            ws_port: 7456,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Hz.
    pub tick_rate: f64,
    pub gel: GelConfig,
    pub track: TrackConfig,
    /// Derived from `gel` when absent.
    pub calibration: Option<Calibration>,
    pub haptic: HapticConfig,
    pub slip: SlipConfig,
    pub ball: BallParams,
    pub gripper: GripperConfig,
    /// fy applied to the gel as a fraction of the contact force.
    pub shear_fraction: f64,
    /// While serving, lift once contact has stayed at or above `hold_min`
    /// for this many seconds. Zero disables.
    pub auto_lift_s: f64,
    pub experiment: ExperimentConfig,
    pub ball_ranges: BallRanges,
    pub wire: WireConfig,
    /// Used by the slip bench, not by the grasp loop.
    pub rig: RigConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            tick_rate: 25.0,
            gel: GelConfig::default(),
            track: TrackConfig::default(),
            calibration: None,
            haptic: HapticConfig::default(),
            slip: SlipConfig::default(),
            ball: BallParams::default(),
            gripper: GripperConfig::default(),
            shear_fraction: 0.3,
            auto_lift_s: 1.0,
            experiment: ExperimentConfig::default(),
            ball_ranges: BallRanges::default(),
            wire: WireConfig::default(),
            rig: RigConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn dt(&self) -> f64 {
        1.0 / self.tick_rate
    }

    pub fn calibration(&self) -> Calibration {
        self.calibration.unwrap_or_else(|| Calibration::from_gel(&self.gel))
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::InvalidConfig(m));
        if !(self.tick_rate > 0.0 && self.tick_rate.is_finite()) {
            return bad(format!("tick_rate {} must be > 0", self.tick_rate));
        }
        self.gel.validate()?;
        self.track.validate()?;
        self.calibration().validate()?;
        self.haptic
            .validate()
            .map_err(|e| PipelineError::InvalidConfig(e.to_string()))?;
        let b = &self.ball;
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !(positive(b.rest_diameter) && positive(b.stiffness) && positive(b.yield_force)) {
            return bad("ball diameter, stiffness and yield force must be > 0".into());
        }
        if !(b.plastic_rate >= 0.0 && b.hold_min >= 0.0) {
            return bad("ball plastic_rate and hold_min must be >= 0".into());
        }
        if !(positive(self.gripper.max_aperture) && positive(self.gripper.default_rate)) {
            return bad("gripper max_aperture and default_rate must be > 0".into());
        }
        if !(self.shear_fraction.is_finite() && self.shear_fraction >= 0.0) {
            return bad(format!("shear_fraction {} must be >= 0", self.shear_fraction));
        }
        let e = &self.experiment;
        if !(positive(e.close_speed) && e.hold_s >= 0.0 && positive(e.max_close_s)) {
            return bad("experiment speeds and durations must be positive".into());
        }
        if !(e.i_target > 0.0 && e.i_target <= 1.0) {
            return bad(format!("i_target {} outside (0,1]", e.i_target));
        }
        if !(e.naive_target_ratio >= 0.0 && e.naive_target_ratio <= 1.0) {
            return bad(format!("naive_target_ratio {} outside [0,1]", e.naive_target_ratio));
        }
        Ok(())
    }
}

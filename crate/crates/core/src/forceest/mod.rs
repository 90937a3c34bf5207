//! Force estimation from marker flow.
//!
//! [`estimate_from_flow`] inverts the gel's linear deformation model in closed
//! form. [`ridge`] holds the learned alternative trained on pooled flow
//! features, and [`slip`] the baseline slip detector.

pub mod dataset;
pub mod ridge;
pub mod slip;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flowtrack::FlowField;
use crate::gelsim::{perp, GelConfig, GridFrame, Wrench};
use crate::Vec2;

pub use dataset::{fit_gains, synthesize_dataset, SynthError, WrenchRanges};
pub use ridge::{predict_ridge, r_squared, train_ridge, RidgeModel, Sample, FEATURE_NAMES, LABEL_NAMES, N_FEATURES};
pub use slip::{detect_slip, SlipConfig, SlipDetector, SlipEvent, SlipReason};

/// Fewest valid flow entries the estimators accept.
pub const MIN_VALID: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimateError {
    #[error("need at least {MIN_VALID} valid flow entries, got {0}")]
    InsufficientValidFlow(usize),
    #[error("degenerate design: {0}")]
    DegenerateDesign(String),
    #[error("expected {expected} features, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("invalid calibration: {0}")]
    InvalidCalibration(String),
}

/// Gains and grid geometry needed to invert marker flow into a wrench.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub k_s: f64,
    pub k_n: f64,
    pub k_t: f64,
    pub centroid: [f64; 2],
    pub radius_norm: f64,
}

impl Calibration {
    /// Calibration matching a gel configuration exactly.
    pub fn from_gel(cfg: &GelConfig) -> Self {
        let frame = GridFrame::of(&cfg.rest_grid());
        Self {
            k_s: cfg.k_s,
            k_n: cfg.k_n,
            k_t: cfg.k_t,
            centroid: [frame.centroid.x, frame.centroid.y],
            radius_norm: frame.radius_norm,
        }
    }

    pub fn validate(&self) -> Result<(), EstimateError> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !(positive(self.k_s) && positive(self.k_n) && positive(self.k_t)) {
            return Err(EstimateError::InvalidCalibration("gains must be positive".into()));
        }
        if !positive(self.radius_norm) {
            return Err(EstimateError::InvalidCalibration("radius_norm must be positive".into()));
        }
        Ok(())
    }

    pub fn centroid(&self) -> Vec2 {
        Vec2::new(self.centroid[0], self.centroid[1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForceEstimate {
    pub wrench: Wrench,
    /// Norm of the force axes with the normal component clamped at zero.
    pub total: f64,
    /// Fraction of flow entries that were valid.
    pub quality: f64,
}

impl ForceEstimate {
    pub fn new(wrench: Wrench, quality: f64) -> Self {
        Self {
            wrench,
            total: wrench.total(),
            quality: quality.clamp(0.0, 1.0),
        }
    }

    pub fn zero() -> Self {
        Self::new(Wrench::ZERO, 1.0)
    }
}

fn quality_of(flow: &FlowField, valid: usize) -> f64 {
    if flow.is_empty() {
        0.0
    } else {
        valid as f64 / flow.len() as f64
    }
}

/// Closed-form inverse of the linear gel model over the valid entries:
/// the mean delta gives shear, and the radial and tangential projections of
/// the de-meaned deltas give normal load and torsion.
pub fn estimate_from_flow(flow: &FlowField, cal: &Calibration) -> Result<ForceEstimate, EstimateError> {
    cal.validate()?;
    let valid = flow.valid_count();
    if valid < MIN_VALID {
        return Err(EstimateError::InsufficientValidFlow(valid));
    }
    let mean = flow.mean_delta();
    let c = cal.centroid();
    let (mut radial, mut tangential, mut norm_sq) = (0.0, 0.0, 0.0);
    for e in flow.valid() {
        let r = e.base - c;
        let dd = e.delta - mean;
        radial += dd.dot(&r);
        tangential += dd.dot(&perp(r));
        norm_sq += r.norm_squared();
    }
    if norm_sq <= 0.0 {
        return Err(EstimateError::InsufficientValidFlow(valid));
    }
    let fx = mean.x / cal.k_s;
    let fy = mean.y / cal.k_s;
    let fn_ = (cal.radius_norm / cal.k_n * radial / norm_sq).max(0.0);
    let tau = cal.radius_norm / cal.k_t * tangential / norm_sq;
    Ok(ForceEstimate::new(
        Wrench::new(fx, fy, fn_, tau),
        quality_of(flow, valid),
    ))
}

/// Six pooled flow features over valid entries: mean dx, mean dy, mean
/// radial and tangential projection of the de-meaned delta onto the unit
/// direction from the grid centroid, and mean and standard deviation of |d|.
pub fn pool_features(flow: &FlowField, cal: &Calibration) -> Result<[f64; N_FEATURES], EstimateError> {
    let valid = flow.valid_count();
    if valid < MIN_VALID {
        return Err(EstimateError::InsufficientValidFlow(valid));
    }
    let n = valid as f64;
    let mean = flow.mean_delta();
    let c = cal.centroid();
    let (mut radial, mut tangential, mut mag_sum) = (0.0, 0.0, 0.0);
    for e in flow.valid() {
        let r = e.base - c;
        let len = r.norm();
        if len > 0.0 {
            let dd = e.delta - mean;
            radial += dd.dot(&r) / len;
            tangential += dd.dot(&perp(r)) / len;
        }
        mag_sum += e.delta.norm();
    }
    let mag_mean = mag_sum / n;
    let mag_var = flow.valid().map(|e| (e.delta.norm() - mag_mean).powi(2)).sum::<f64>() / n;
    Ok([mean.x, mean.y, radial / n, tangential / n, mag_mean, mag_var.sqrt()])
}

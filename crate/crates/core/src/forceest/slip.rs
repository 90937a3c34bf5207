//! Baseline slip detector over a history of force estimates and flows.
//!
//! Two triggers: a sudden drop of the mean marker displacement relative to
//! its running maximum (the gel relaxing as the object slides), and a large
//! spread of per-marker deltas around the mean while the contact is loaded
//! (partial slip tearing the flow field apart).

use serde::{Deserialize, Serialize};

use super::ForceEstimate;
use crate::flowtrack::FlowField;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SlipConfig {
    /// Fire when mean |d| falls by more than this fraction of its running
    /// maximum within one frame.
    pub drop_ratio: f64,
    /// Fire when std of |d_i − d̄| exceeds this (px) under load.
    pub disp_thresh: f64,
    /// Total force (N) above which the dispersion trigger is armed.
    pub force_threshold: f64,
    /// Running maximum of mean |d| (px) below which the drop trigger stays quiet.
    pub min_flow: f64,
}

impl Default for SlipConfig {
    fn default() -> Self {
        Self {
            drop_ratio: 0.3,
            disp_thresh: 1.0,
            force_threshold: 0.2,
            min_flow: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlipReason {
    FlowDrop,
    Dispersion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlipEvent {
    pub frame: usize,
    pub reason: SlipReason,
}

/// Streaming form of [`detect_slip`].
#[derive(Debug, Clone)]
pub struct SlipDetector {
    cfg: SlipConfig,
    frame: usize,
    prev_mean: Option<f64>,
    running_max: f64,
}

impl SlipDetector {
    pub fn new(cfg: SlipConfig) -> Self {
        Self {
            cfg,
            frame: 0,
            prev_mean: None,
            running_max: 0.0,
        }
    }

    pub fn push(&mut self, estimate: &ForceEstimate, flow: &FlowField) -> Option<SlipEvent> {
        let frame = self.frame;
        self.frame += 1;

        let mags: Vec<f64> = flow.valid().map(|e| e.delta.norm()).collect();
        let mean_mag = if mags.is_empty() {
            0.0
        } else {
            mags.iter().sum::<f64>() / mags.len() as f64
        };

        let mut reason = None;
        if let Some(prev) = self.prev_mean {
            if self.running_max >= self.cfg.min_flow && prev - mean_mag > self.cfg.drop_ratio * self.running_max {
                reason = Some(SlipReason::FlowDrop);
            }
        }
        if reason.is_none() && frame > 0 && estimate.total > self.cfg.force_threshold {
            let mean = flow.mean_delta();
            let spread: Vec<f64> = flow.valid().map(|e| (e.delta - mean).norm()).collect();
            if !spread.is_empty() {
                let m = spread.iter().sum::<f64>() / spread.len() as f64;
                let var = spread.iter().map(|s| (s - m).powi(2)).sum::<f64>() / spread.len() as f64;
                if var.sqrt() > self.cfg.disp_thresh {
                    reason = Some(SlipReason::Dispersion);
                }
            }
        }

        self.prev_mean = Some(mean_mag);
        self.running_max = self.running_max.max(mean_mag);
        reason.map(|reason| SlipEvent { frame, reason })
    }
}

/// Runs the detector over an aligned history; frame indices refer to it.
pub fn detect_slip(history: &[(ForceEstimate, FlowField)], cfg: &SlipConfig) -> Vec<SlipEvent> {
    if history.len() < 2 {
        return Vec::new();
    }
    let mut det = SlipDetector::new(cfg.clone());
    history.iter().filter_map(|(est, flow)| det.push(est, flow)).collect()
}

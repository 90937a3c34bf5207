//! Total force to per-finger vibration intensity.
//!
//! Forces at or below the threshold produce nothing. Above it the intensity
//! follows `ln(1 + (f − θ)/s) / ln(1 + (f_max − θ)/s)`, capped at 1, which
//! spends more of the intensity range on small forces.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const FINGERS: usize = 5;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid haptic config: {0}")]
pub struct HapticConfigError(String);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HapticConfig {
    /// Dead-zone threshold θ, N.
    pub threshold: f64,
    /// Force mapped to full intensity, N.
    pub f_max: f64,
    /// Curvature knob s of the log map, N.
    pub log_scale: f64,
    /// Thumb, index, middle, ring, little.
    pub finger_mask: [bool; FINGERS],
    /// Largest per-finger change between successive commands.
    pub rate_limit: f64,
}

impl Default for HapticConfig {
    fn default() -> Self {
        Self {
            threshold: 0.2,
            f_max: 10.0,
            log_scale: 1.0,
            finger_mask: [true; FINGERS],
            rate_limit: 0.2,
        }
    }
}

impl HapticConfig {
    pub fn validate(&self) -> Result<(), HapticConfigError> {
        if !(self.threshold >= 0.0 && self.threshold < self.f_max && self.f_max.is_finite()) {
            return Err(HapticConfigError(format!(
                "need 0 <= threshold < f_max, got {} and {}",
                self.threshold, self.f_max
            )));
        }
        if !(self.log_scale > 0.0 && self.log_scale.is_finite()) {
            return Err(HapticConfigError(format!("log_scale {} must be > 0", self.log_scale)));
        }
        if !(self.rate_limit > 0.0 && self.rate_limit <= 1.0) {
            return Err(HapticConfigError(format!(
                "rate_limit {} outside (0,1]",
                self.rate_limit
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HapticCommand {
    pub intensities: [f64; FINGERS],
    pub source_timestamp: u64,
}

impl HapticCommand {
    pub fn silent(source_timestamp: u64) -> Self {
        Self {
            intensities: [0.0; FINGERS],
            source_timestamp,
        }
    }

    pub fn peak(&self) -> f64 {
        self.intensities.iter().copied().fold(0.0, f64::max)
    }
}

pub fn shape_intensity(total: f64, cfg: &HapticConfig) -> f64 {
    if !(total > cfg.threshold) {
        return 0.0;
    }
    let s = cfg.log_scale;
    let num = ((total - cfg.threshold) / s).ln_1p();
    let den = ((cfg.f_max - cfg.threshold) / s).ln_1p();
    (num / den).min(1.0)
}

/// Broadcasts the shaped intensity to the enabled fingers, limiting each
/// finger's change against `prev` (an absent `prev` counts as all zero).
pub fn make_command(total: f64, prev: Option<&HapticCommand>, cfg: &HapticConfig, ts: u64) -> HapticCommand {
    let target = shape_intensity(total, cfg);
    let before = prev.map_or([0.0; FINGERS], |p| p.intensities);
    let mut intensities = [0.0; FINGERS];
    for (i, out) in intensities.iter_mut().enumerate() {
        if cfg.finger_mask[i] {
            let lo = before[i] - cfg.rate_limit;
            let hi = before[i] + cfg.rate_limit;
            *out = target.clamp(lo, hi).clamp(0.0, 1.0);
        }
    }
    HapticCommand {
        intensities,
        source_timestamp: ts,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boundaries() {
        let cfg = HapticConfig::default();
        assert_eq!(shape_intensity(cfg.threshold, &cfg), 0.0);
        assert_eq!(shape_intensity(0.0, &cfg), 0.0);
        assert_eq!(shape_intensity(cfg.f_max, &cfg), 1.0);
        assert_eq!(shape_intensity(1e6, &cfg), 1.0);
        assert!(shape_intensity(cfg.threshold + 1e-9, &cfg) > 0.0);
    }

    #[test]
    fn worked_value() {
        let cfg = HapticConfig {
            threshold: 1.0,
            f_max: 10.0,
            log_scale: 1.0,
            ..HapticConfig::default()
        };
        // ln(4)/ln(10)
        assert!((shape_intensity(4.0, &cfg) - 0.602_059_991_3).abs() < 1e-9);
    }

    #[test]
    fn zero_force_silent() {
        let cfg = HapticConfig::default();
        let cmd = make_command(0.0, Some(&HapticCommand::silent(0)), &cfg, 7);
        assert_eq!(cmd.intensities, [0.0; 5]);
        assert_eq!(cmd.source_timestamp, 7);
    }

    #[test]
    fn rate_limit_clamps_rise() {
        let cfg = HapticConfig {
            rate_limit: 0.25,
            ..HapticConfig::default()
        };
        let cmd = make_command(100.0, Some(&HapticCommand::silent(0)), &cfg, 0);
        assert_eq!(cmd.intensities, [0.25; 5]);
        let next = make_command(100.0, Some(&cmd), &cfg, 1);
        assert_eq!(next.intensities, [0.5; 5]);
    }

    #[test]
    fn masked_fingers_are_zero() {
        let mut cfg = HapticConfig {
            rate_limit: 1.0,
            finger_mask: [true, true, false, false, false],
            ..HapticConfig::default()
        };
        // Pick the force whose shaped intensity is exactly one half.
        let den = ((cfg.f_max - cfg.threshold) / cfg.log_scale).ln_1p();
        let total = cfg.threshold + cfg.log_scale * (0.5 * den).exp_m1();
        let cmd = make_command(total, None, &cfg, 0);
        for (got, want) in cmd.intensities.iter().zip([0.5, 0.5, 0.0, 0.0, 0.0]) {
            assert!((got - want).abs() < 1e-12);
        }
        cfg.finger_mask = [false; 5];
        assert_eq!(make_command(total, None, &cfg, 0).intensities, [0.0; 5]);
    }

    #[test]
    fn config_validation() {
        assert!(HapticConfig::default().validate().is_ok());
        let bad = HapticConfig {
            threshold: 10.0,
            ..HapticConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = HapticConfig {
            rate_limit: 0.0,
            ..HapticConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}

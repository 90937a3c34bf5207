//! Shear/slip test rig simulation.
//!
//! A test object is clamped against the gel with normal force `N`. A linear
//! motor pulls it through a wire (slack length `L0`) and a spring of stiffness
//! `k`, so the shear load is `k·max(0, motor − object − L0)`. Friction is
//! quasi-static and event based: the object sticks while the tension stays at
//! or below `μs·N`; the step in which it crosses that level is a slip, during
//! which the object slides until the tension has fallen to `μk·N`.
//!
//! The measurement protocol loads the object to a commanded tension, releases
//! it again, and reports a slip when the object ended up somewhere else. The
//! commanded tension is raised by `tension_step` until a slip is seen.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gelsim::{make_gel, GelConfig, GelError, Wrench};
use crate::image::GelImage;

/// Tension tolerance when comparing against the static friction limit.
pub const SLIP_TOL: f64 = 1e-9;
/// Hard bound on protocol trials, on top of the tension cap.
pub const MAX_TRIALS: usize = 200;
/// Hard bound on simulation steps per trial phase.
const MAX_PHASE_STEPS: usize = 10_000_000;

#[derive(Debug, Error)]
pub enum RigError {
    #[error("invalid rig config: {0}")]
    InvalidConfig(String),
    #[error("no slip up to {cap:.3} N after {trials} trials")]
    NoSlipBelowCap { cap: f64, trials: usize },
    #[error(transparent)]
    Gel(#[from] GelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RigConfig {
    /// N/mm.
    pub spring_k: f64,
    /// mm of wire to take up before the spring loads.
    pub wire_slack_len: f64,
    /// N.
    pub clamp_normal: f64,
    pub mu_static: f64,
    pub mu_kinetic: f64,
    /// mm/s.
    pub motor_speed: f64,
    /// s.
    pub dt: f64,
    /// mm of net object travel that counts as a slip.
    pub slip_epsilon: f64,
    /// N added to the commanded tension between trials.
    pub tension_step: f64,
}

impl Default for RigConfig {
    fn default() -> Self {
        Self {
            spring_k: 1.0,
            wire_slack_len: 1.0,
            clamp_normal: 5.0,
            mu_static: 0.8,
            mu_kinetic: 0.6,
            motor_speed: 5.0,
            dt: 0.004,
            slip_epsilon: 0.01,
            tension_step: 0.5,
        }
    }
}

impl RigConfig {
    pub fn validate(&self) -> Result<(), RigError> {
        let bad = |m: &str| Err(RigError::InvalidConfig(m.into()));
        let pos = |v: f64| v.is_finite() && v > 0.0;
        if !pos(self.spring_k) {
            return bad("spring_k must be > 0");
        }
        if !(self.wire_slack_len.is_finite() && self.wire_slack_len >= 0.0) {
            return bad("wire_slack_len must be >= 0");
        }
        if !pos(self.clamp_normal) {
            return bad("clamp_normal must be > 0");
        }
        if !(pos(self.mu_kinetic) && self.mu_kinetic <= self.mu_static) {
            return bad("need 0 < mu_kinetic <= mu_static");
        }
        if !(pos(self.motor_speed) && pos(self.dt) && pos(self.slip_epsilon) && pos(self.tension_step)) {
            return bad("motor_speed, dt, slip_epsilon and tension_step must be > 0");
        }
        Ok(())
    }

    pub fn static_limit(&self) -> f64 {
        self.mu_static * self.clamp_normal
    }

    pub fn kinetic_level(&self) -> f64 {
        self.mu_kinetic * self.clamp_normal
    }

    /// Tension change produced by one full-speed motor step.
    pub fn tension_quantum(&self) -> f64 {
        self.spring_k * self.motor_speed * self.dt
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Stuck,
    Slipping,
}

/// Instant and load at which static friction gave way, interpolated within
/// the step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlipOnset {
    pub time: f64,
    pub tension: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigState {
    pub motor_pos: f64,
    pub object_pos: f64,
    pub time: f64,
    /// `Slipping` only for the step in which the object slid.
    pub regime: Regime,
    pub tension: f64,
    pub normal_reading: f64,
    pub shear_reading: f64,
    pub onset: Option<SlipOnset>,
}

impl RigState {
    pub fn at_rest(cfg: &RigConfig) -> Self {
        Self {
            motor_pos: 0.0,
            object_pos: 0.0,
            time: 0.0,
            regime: Regime::Stuck,
            tension: 0.0,
            normal_reading: cfg.clamp_normal,
            shear_reading: 0.0,
            onset: None,
        }
    }
}

fn spring_tension(cfg: &RigConfig, motor: f64, object: f64) -> f64 {
    cfg.spring_k * (motor - object - cfg.wire_slack_len).max(0.0)
}

/// Advances the rig by one `dt`. Velocities beyond `motor_speed` are clamped.
pub fn step_rig(state: &RigState, motor_velocity: f64, cfg: &RigConfig) -> RigState {
    let v = motor_velocity.clamp(-cfg.motor_speed, cfg.motor_speed);
    let motor_pos = state.motor_pos + v * cfg.dt;
    let mut object_pos = state.object_pos;
    let mut tension = spring_tension(cfg, motor_pos, object_pos);
    let limit = cfg.static_limit();
    let mut regime = Regime::Stuck;
    let mut onset = None;

    if tension > limit + SLIP_TOL {
        let before = state.tension.min(limit);
        let frac = ((limit - before) / (tension - before)).clamp(0.0, 1.0);
        onset = Some(SlipOnset {
            time: state.time + frac * cfg.dt,
            tension: limit,
        });
        // Slide until the spring has relaxed to the kinetic friction level.
        object_pos = motor_pos - cfg.wire_slack_len - cfg.kinetic_level() / cfg.spring_k;
        tension = cfg.kinetic_level();
        regime = Regime::Slipping;
    }

    RigState {
        motor_pos,
        object_pos,
        time: state.time + cfg.dt,
        regime,
        tension,
        normal_reading: cfg.clamp_normal,
        shear_reading: tension,
        onset,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub slipped: bool,
    pub commanded_tension: f64,
    pub slip_force: Option<f64>,
    pub slip_time: Option<f64>,
    pub object_displacement: f64,
}

/// Loads the object towards `commanded_tension` (stopping early on a slip),
/// then backs the motor off until the wire is slack again.
pub fn run_trial(cfg: &RigConfig, commanded_tension: f64) -> (TrialResult, Vec<RigState>) {
    let commanded = commanded_tension.max(0.0);
    let mut state = RigState::at_rest(cfg);
    let start = state.object_pos;
    let mut telemetry = vec![state];
    let mut onset = None;

    for _ in 0..MAX_PHASE_STEPS {
        if state.tension >= commanded - SLIP_TOL {
            break;
        }
        let target = state.object_pos + cfg.wire_slack_len + commanded / cfg.spring_k;
        let v = ((target - state.motor_pos) / cfg.dt).min(cfg.motor_speed);
        state = step_rig(&state, v, cfg);
        telemetry.push(state);
        if state.onset.is_some() {
            onset = state.onset;
            break;
        }
    }

    for _ in 0..MAX_PHASE_STEPS {
        if state.tension <= SLIP_TOL {
            break;
        }
        let target = state.object_pos + cfg.wire_slack_len;
        let v = -((state.motor_pos - target) / cfg.dt).min(cfg.motor_speed);
        state = step_rig(&state, v, cfg);
        telemetry.push(state);
    }

    let displacement = state.object_pos - start;
    let slipped = displacement.abs() > cfg.slip_epsilon;
    let result = TrialResult {
        slipped,
        commanded_tension: commanded,
        slip_force: onset.filter(|_| slipped).map(|o| o.tension),
        slip_time: onset.filter(|_| slipped).map(|o| o.time),
        object_displacement: displacement,
    };
    (result, telemetry)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlipSearch {
    pub slip_force: f64,
    pub trials: usize,
    pub commanded_tension: f64,
}

/// Repeats [`run_trial`] at `tension_step`, `2·tension_step`, … until one slips.
pub fn find_slip_force(cfg: &RigConfig) -> Result<f64, RigError> {
    search_slip_force(cfg).map(|s| s.slip_force)
}

pub fn search_slip_force(cfg: &RigConfig) -> Result<SlipSearch, RigError> {
    cfg.validate()?;
    let cap = 10.0 * cfg.static_limit();
    for trial in 1..=MAX_TRIALS {
        let commanded = trial as f64 * cfg.tension_step;
        if commanded > cap {
            return Err(RigError::NoSlipBelowCap { cap, trials: trial - 1 });
        }
        let (result, _) = run_trial(cfg, commanded);
        if let Some(slip_force) = result.slip_force {
            return Ok(SlipSearch {
                slip_force,
                trials: trial,
                commanded_tension: commanded,
            });
        }
    }
    Err(RigError::NoSlipBelowCap {
        cap: cap.min(MAX_TRIALS as f64 * cfg.tension_step),
        trials: MAX_TRIALS,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameLabel {
    pub frame: usize,
    pub slip: bool,
    pub tension: f64,
}

#[derive(Debug, Clone)]
pub struct LabeledSequence {
    pub frames: Vec<GelImage>,
    pub labels: Vec<FrameLabel>,
    pub telemetry: Vec<RigState>,
}

impl LabeledSequence {
    pub fn first_slip(&self) -> Option<usize> {
        self.labels.iter().find(|l| l.slip).map(|l| l.frame)
    }

    /// Writes `frame_NNNNN.pgm` files and `labels.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), RigError> {
        std::fs::create_dir_all(dir)?;
        for (i, frame) in self.frames.iter().enumerate() {
            frame.save_pgm(dir.join(format!("frame_{i:05}.pgm")))?;
        }
        let file = std::fs::File::create(dir.join("labels.csv"))?;
        write_labels_csv(&self.labels, file)?;
        Ok(())
    }
}

/// Runs one trial and renders a gel frame per rig step. Rig tension loads the
/// gel in shear along +y; at a slip the gel relaxes by `1 − μk/μs`.
pub fn generate_labeled_sequence(
    rig: &RigConfig,
    gel: &GelConfig,
    commanded_tension: f64,
) -> Result<LabeledSequence, RigError> {
    rig.validate()?;
    let (_, telemetry) = run_trial(rig, commanded_tension);
    let mut state = make_gel(gel.clone())?;
    let relax = 1.0 - rig.mu_kinetic / rig.mu_static;
    let mut frames = Vec::with_capacity(telemetry.len());
    let mut labels = Vec::with_capacity(telemetry.len());
    for (i, s) in telemetry.iter().enumerate() {
        state = match s.onset {
            Some(onset) => state
                .apply_wrench(Wrench::new(0.0, onset.tension, 0.0, 0.0))?
                .snap_back(relax)?,
            None => state.apply_wrench(Wrench::new(0.0, s.tension, 0.0, 0.0))?,
        };
        frames.push(state.render()?);
        labels.push(FrameLabel {
            frame: i,
            slip: s.regime == Regime::Slipping,
            tension: s.tension,
        });
    }
    Ok(LabeledSequence {
        frames,
        labels,
        telemetry,
    })
}

/// `time,motor_pos,object_pos,tension,normal,regime`
pub fn write_telemetry_csv<W: Write>(states: &[RigState], out: W) -> csv::Result<()> {
    let mut wr = csv::Writer::from_writer(out);
    wr.write_record(["time", "motor_pos", "object_pos", "tension", "normal", "regime"])?;
    for s in states {
        let regime = match s.regime {
            Regime::Stuck => "stuck",
            Regime::Slipping => "slipping",
        };
        wr.write_record([
            s.time.to_string(),
            s.motor_pos.to_string(),
            s.object_pos.to_string(),
            s.tension.to_string(),
            s.normal_reading.to_string(),
            regime.to_string(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

/// `frame,slip,tension`
pub fn write_labels_csv<W: Write>(labels: &[FrameLabel], out: W) -> csv::Result<()> {
    let mut wr = csv::Writer::from_writer(out);
    wr.write_record(["frame", "slip", "tension"])?;
    for l in labels {
        wr.write_record([l.frame.to_string(), u8::from(l.slip).to_string(), l.tension.to_string()])?;
    }
    wr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rig() -> RigConfig {
        RigConfig::default()
    }

    #[test]
    fn idle_step_only_advances_time() {
        let cfg = rig();
        let mut s = RigState::at_rest(&cfg);
        s.motor_pos = 3.0;
        s.tension = spring_tension(&cfg, 3.0, 0.0);
        let next = step_rig(&s, 0.0, &cfg);
        assert_eq!(next.motor_pos, s.motor_pos);
        assert_eq!(next.object_pos, s.object_pos);
        assert_eq!(next.tension, s.tension);
        assert_eq!(next.regime, Regime::Stuck);
        assert!((next.time - cfg.dt).abs() < 1e-15);
    }

    #[test]
    fn slip_onset_at_static_limit_and_relaxes_to_kinetic() {
        let cfg = rig();
        let mut s = RigState::at_rest(&cfg);
        let mut onset = None;
        for _ in 0..10_000 {
            s = step_rig(&s, cfg.motor_speed, &cfg);
            if s.onset.is_some() {
                onset = s.onset;
                break;
            }
            assert!(s.tension <= cfg.static_limit() + SLIP_TOL);
        }
        let onset = onset.expect("slip");
        assert_eq!(onset.tension, 4.0);
        assert_eq!(s.tension, 3.0);
        assert_eq!(s.regime, Regime::Slipping);
        // Loaded from 1 mm of slack at 5 mm/s and 1 N/mm: 4 N after 1 s.
        assert!((onset.time - 1.0).abs() < 1e-9, "{}", onset.time);
        let after = step_rig(&s, 0.0, &cfg);
        assert_eq!(after.regime, Regime::Stuck);
        assert_eq!(after.tension, 3.0);
    }

    #[test]
    fn trial_protocol_examples() {
        let cfg = rig();
        let (zero, tel) = run_trial(&cfg, 0.0);
        assert!(!zero.slipped);
        assert_eq!(zero.object_displacement, 0.0);
        assert_eq!(tel.len(), 1);

        let (below, _) = run_trial(&cfg, 3.9);
        assert!(!below.slipped);
        assert_eq!(below.slip_force, None);

        let (above, tel) = run_trial(&cfg, 4.1);
        assert!(above.slipped);
        let f = above.slip_force.unwrap();
        assert!((f - 4.0).abs() <= cfg.tension_quantum());
        assert!(tel.iter().all(|s| s.tension >= 0.0));
        assert!(tel.last().unwrap().tension <= SLIP_TOL);
    }

    #[test]
    fn protocol_finds_limit_on_ninth_trial() {
        let s = search_slip_force(&rig()).unwrap();
        assert_eq!(s.trials, 9);
        assert_eq!(s.commanded_tension, 4.5);
        assert!((s.slip_force - 4.0).abs() < 1e-9);
    }

    #[test]
    fn weak_friction_slips_first_trial() {
        let cfg = RigConfig {
            mu_static: 0.05,
            mu_kinetic: 0.04,
            ..rig()
        };
        assert_eq!(search_slip_force(&cfg).unwrap().trials, 1);
    }

    #[test]
    fn sticky_contact_hits_cap() {
        let cfg = RigConfig {
            mu_static: 1e9,
            ..rig()
        };
        assert!(matches!(find_slip_force(&cfg), Err(RigError::NoSlipBelowCap { .. })));
    }

    #[test]
    fn invalid_configs() {
        let cfg = RigConfig {
            mu_kinetic: 0.9,
            ..rig()
        };
        assert!(cfg.validate().is_err());
        let cfg = RigConfig { dt: 0.0, ..rig() };
        assert!(find_slip_force(&cfg).is_err());
    }

    #[test]
    fn labeled_sequence_matches_regimes() {
        let rig = RigConfig { dt: 0.02, ..rig() };
        let seq = generate_labeled_sequence(&rig, &GelConfig::default(), 4.5).unwrap();
        assert_eq!(seq.frames.len(), seq.telemetry.len());
        let slipping: Vec<usize> = seq
            .telemetry
            .iter()
            .enumerate()
            .filter(|(_, s)| s.regime == Regime::Slipping)
            .map(|(i, _)| i)
            .collect();
        let labeled: Vec<usize> = seq.labels.iter().filter(|l| l.slip).map(|l| l.frame).collect();
        assert_eq!(slipping, labeled);
        assert_eq!(labeled.len(), 1);

        let quiet = generate_labeled_sequence(&rig, &GelConfig::default(), 0.0).unwrap();
        assert!(quiet.labels.iter().all(|l| !l.slip));
        assert!(quiet.frames.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn telemetry_csv_columns() {
        let (_, tel) = run_trial(&rig(), 0.0);
        let mut buf = Vec::new();
        write_telemetry_csv(&tel, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "time,motor_pos,object_pos,tension,normal,regime\n0,0,0,0,5,stuck\n"
        );
    }
}

//! Scripted grasp controllers standing in for the human operator.
//!
//! Naive closes to a fixed fraction of the ball's rest diameter. Feedback
//! closes until the vibration intensity it receives reaches a target and
//! then freezes the aperture. Both lift and hold for the configured time.

use std::fmt;
use std::str::FromStr;
use std::thread;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::wire::ControlCode;

use super::ball::BallParams;
use super::pipeline::{GripCommand, Pipeline};
use super::session::SessionRecord;
use super::{PipelineConfig, PipelineError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerMode {
    Naive,
    Feedback,
}

impl ControllerMode {
    pub fn name(self) -> &'static str {
        match self {
            ControllerMode::Naive => "naive",
            ControllerMode::Feedback => "feedback",
        }
    }
}

impl fmt::Display for ControllerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ControllerMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "naive" => Ok(ControllerMode::Naive),
            "feedback" => Ok(ControllerMode::Feedback),
            other => Err(format!("unknown controller mode {other:?}")),
        }
    }
}

pub fn run_controller_experiment(cfg: &PipelineConfig, mode: ControllerMode) -> Result<SessionRecord, PipelineError> {
    let (mut pipeline, handles) = Pipeline::new(cfg.clone())?;
    pipeline.set_auto_lift(false);

    let exp = &cfg.experiment;
    let max_ap = cfg.gripper.max_aperture;
    let rate = exp.close_speed / max_ap;
    let naive_target = exp.naive_target_ratio * cfg.ball.rest_diameter / max_ap;
    let close_limit = (exp.max_close_s * cfg.tick_rate).ceil() as usize;
    let hold_ticks = (exp.hold_s * cfg.tick_rate).round() as usize;

    let feedback = mode == ControllerMode::Feedback;
    let code = if feedback {
        ControlCode::FeedbackOn
    } else {
        ControlCode::FeedbackOff
    };
    let queue_err = |e: crate::wire::ChannelError| PipelineError::Session(e.to_string());
    handles.control.try_send(code).map_err(queue_err)?;

    let mut ticks = Vec::new();
    let mut hold_at: Option<f64> = None;
    let mut lifted_after: Option<usize> = None;
    loop {
        let target = hold_at.unwrap_or(if feedback { 0.0 } else { naive_target });
        handles
            .grip
            .try_send(GripCommand::new(target, rate))
            .map_err(queue_err)?;
        let rec = pipeline
            .tick()
            .ok_or_else(|| PipelineError::Session("pipeline paused".into()))?;
        let aperture = rec.aperture_mm;
        let reached = match mode {
            ControllerMode::Naive => aperture <= naive_target * max_ap + 1e-9,
            ControllerMode::Feedback => rec
                .haptic
                .is_some_and(|h| h.iter().copied().fold(0.0, f64::max) >= exp.i_target),
        };
        ticks.push(rec);

        match lifted_after {
            Some(at) => {
                if ticks.len() - at >= hold_ticks {
                    break;
                }
            }
            None => {
                if reached || aperture <= 0.0 || ticks.len() >= close_limit {
                    hold_at = Some(aperture / max_ap);
                    pipeline.lift();
                    lifted_after = Some(ticks.len());
                    if hold_ticks == 0 {
                        break;
                    }
                }
            }
        }
    }
    Ok(SessionRecord::new(cfg.clone(), Some(mode.name().to_string()), ticks))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessDraw {
    pub ball: BallParams,
    pub naive_deformation: f64,
    pub feedback_deformation: f64,
    pub naive_dropped: bool,
    pub feedback_dropped: bool,
}

impl RobustnessDraw {
    pub fn feedback_gentler(&self) -> bool {
        self.feedback_deformation < self.naive_deformation
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub draws: Vec<RobustnessDraw>,
}

impl RobustnessReport {
    pub fn gentler_count(&self) -> usize {
        self.draws.iter().filter(|d| d.feedback_gentler()).count()
    }
}

fn draw_in(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Runs both controllers on `draws` balls sampled uniformly from the
/// configured ranges. Draws are independent and run on parallel threads;
/// the result does not depend on scheduling.
pub fn robustness_check(cfg: &PipelineConfig, draws: usize, seed: u64) -> Result<RobustnessReport, PipelineError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &cfg.ball_ranges;
    let balls: Vec<BallParams> = (0..draws)
        .map(|_| BallParams {
            rest_diameter: draw_in(&mut rng, r.rest_diameter),
            stiffness: draw_in(&mut rng, r.stiffness),
            yield_force: draw_in(&mut rng, r.yield_force),
            plastic_rate: draw_in(&mut rng, r.plastic_rate),
            hold_min: draw_in(&mut rng, r.hold_min),
        })
        .collect();
    let workers = thread::available_parallelism().map_or(1, |n| n.get()).min(draws.max(1));
    let chunk = draws.div_ceil(workers).max(1);
    let results: Vec<Result<RobustnessDraw, PipelineError>> = thread::scope(|scope| {
        let handles: Vec<_> = balls
            .chunks(chunk)
            .map(|group| scope.spawn(move || group.iter().map(|ball| paired_run(cfg, ball)).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("robustness worker panicked"))
            .collect()
    });
    Ok(RobustnessReport {
        draws: results.into_iter().collect::<Result<_, _>>()?,
    })
}

fn paired_run(cfg: &PipelineConfig, ball: &BallParams) -> Result<RobustnessDraw, PipelineError> {
    let trial = PipelineConfig {
        ball: ball.clone(),
        ..cfg.clone()
    };
    let naive = run_controller_experiment(&trial, ControllerMode::Naive)?;
    let feedback = run_controller_experiment(&trial, ControllerMode::Feedback)?;
    Ok(RobustnessDraw {
        ball: ball.clone(),
        naive_deformation: naive.summary.task.final_deformation_ratio,
        feedback_deformation: feedback.summary.task.final_deformation_ratio,
        naive_dropped: naive.summary.task.dropped,
        feedback_dropped: feedback.summary.task.dropped,
    })
}

use log::warn;

use crate::flowtrack::{detect_markers, FlowField, ReferenceFrame};
use crate::forceest::{estimate_from_flow, Calibration, ForceEstimate, SlipDetector};
use crate::gelsim::{make_gel, GelState, Wrench};
use crate::hapticmap::{make_command, HapticCommand};
use crate::image::GelImage;
use crate::wire::channel::{fifo, latest_wins, FifoConsumer, FifoProducer, LatestConsumer, LatestProducer};
use crate::wire::{now_ns, ControlCode};
use crate::Vec2;

use super::ball::{step_ball, BallState};
use super::session::TickRecord;
use super::{PipelineConfig, PipelineError};

const GRIP_QUEUE: usize = 1024;
const CONTROL_QUEUE: usize = 64;

/// Operator grip request. `aperture` and `max_rate` are normalized to the
/// gripper's full opening.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GripCommand {
    pub aperture: f64,
    pub max_rate: f64,
    /// Wall clock when the command entered the queue.
    pub enqueued_ns: u64,
}

impl GripCommand {
    pub fn new(aperture: f64, max_rate: f64) -> Self {
        Self {
            aperture,
            max_rate,
            enqueued_ns: now_ns(),
        }
    }
}

/// A published value with the tick that produced it and the wall-clock
/// time its sensor frame was rendered.
#[derive(Debug, Clone, PartialEq)]
pub struct Stamped<T> {
    pub seq: u32,
    pub timestamp_ns: u64,
    pub value: T,
}

/// The outside world's ends of the pipeline's channels.
pub struct PipelineHandles {
    pub grip: FifoProducer<GripCommand>,
    pub control: FifoProducer<ControlCode>,
    pub force: LatestConsumer<Stamped<ForceEstimate>>,
    pub haptic: LatestConsumer<Stamped<HapticCommand>>,
    pub sensor: LatestConsumer<Stamped<GelImage>>,
    pub flow: LatestConsumer<Stamped<FlowField>>,
}

struct Outputs {
    force: LatestProducer<Stamped<ForceEstimate>>,
    haptic: LatestProducer<Stamped<HapticCommand>>,
    sensor: LatestProducer<Stamped<GelImage>>,
    flow: LatestProducer<Stamped<FlowField>>,
}

struct Perception {
    image: GelImage,
    flow: FlowField,
    estimate: ForceEstimate,
}

/// Owns every piece of simulation state. One call to [`Pipeline::tick`]
/// advances the world by one period.
pub struct Pipeline {
    cfg: PipelineConfig,
    cal: Calibration,
    gel: GelState,
    reference: ReferenceFrame,
    markers: Vec<Vec2>,
    ball: BallState,
    aperture_mm: f64,
    target: f64,
    rate: f64,
    feedback: bool,
    paused: bool,
    auto_lift: bool,
    pending_lift: bool,
    held_for: f64,
    tick: u64,
    prev_haptic: Option<HapticCommand>,
    slip: SlipDetector,
    grip_rx: FifoConsumer<GripCommand>,
    control_rx: FifoConsumer<ControlCode>,
    out: Outputs,
    faults: u64,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Result<(Pipeline, PipelineHandles), PipelineError> {
        cfg.validate()?;
        let gel = make_gel(cfg.gel.clone())?;
        let rest_image = gel.render()?;
        let markers = detect_markers(&rest_image, cfg.gel.marker_count())?.centroids;
        let reference = ReferenceFrame::new(&rest_image, &cfg.track)?;

        let (grip_tx, grip_rx) = fifo(GRIP_QUEUE).expect("nonzero capacity");
        let (control_tx, control_rx) = fifo(CONTROL_QUEUE).expect("nonzero capacity");
        let (force_tx, force_rx) = latest_wins();
        let (haptic_tx, haptic_rx) = latest_wins();
        let (sensor_tx, sensor_rx) = latest_wins();
        let (flow_tx, flow_rx) = latest_wins();

        let pipeline = Pipeline {
            cal: cfg.calibration(),
            gel,
            reference,
            markers,
            ball: BallState::new(&cfg.ball),
            aperture_mm: cfg.gripper.max_aperture,
            target: 1.0,
            rate: cfg.gripper.default_rate,
            feedback: true,
            paused: false,
            auto_lift: cfg.auto_lift_s > 0.0,
            pending_lift: false,
            held_for: 0.0,
            tick: 0,
            prev_haptic: None,
            slip: SlipDetector::new(cfg.slip.clone()),
            grip_rx,
            control_rx,
            out: Outputs {
                force: force_tx,
                haptic: haptic_tx,
                sensor: sensor_tx,
                flow: flow_tx,
            },
            faults: 0,
            cfg,
        };
        let handles = PipelineHandles {
            grip: grip_tx,
            control: control_tx,
            force: force_rx,
            haptic: haptic_rx,
            sensor: sensor_rx,
            flow: flow_rx,
        };
        Ok((pipeline, handles))
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn ball(&self) -> &BallState {
        &self.ball
    }

    pub fn aperture_mm(&self) -> f64 {
        self.aperture_mm
    }

    pub fn feedback_enabled(&self) -> bool {
        self.feedback
    }

    pub fn is_paused(&self) -> bool {
        self.paused
    }

    /// Ticks completed so far.
    pub fn ticks(&self) -> u64 {
        self.tick
    }

    pub fn faults(&self) -> u64 {
        self.faults
    }

    /// Lifts the ball at the start of the next tick.
    pub fn lift(&mut self) {
        if !self.ball.lifted {
            self.pending_lift = true;
        }
    }

    pub fn set_auto_lift(&mut self, on: bool) {
        self.auto_lift = on && self.cfg.auto_lift_s > 0.0;
    }

    fn reset_task(&mut self) {
        self.ball = BallState::new(&self.cfg.ball);
        self.aperture_mm = self.cfg.gripper.max_aperture;
        self.target = 1.0;
        self.rate = self.cfg.gripper.default_rate;
        self.pending_lift = false;
        self.held_for = 0.0;
        self.prev_haptic = None;
        self.slip = SlipDetector::new(self.cfg.slip.clone());
    }

    /// Runs one period. Returns `None` while paused by a stop request.
    pub fn tick(&mut self) -> Option<TickRecord> {
        let started = now_ns();
        let mut events = Vec::new();

        for code in self.control_rx.drain() {
            match code {
                ControlCode::Start => {
                    self.reset_task();
                    self.paused = false;
                    events.push("start".to_string());
                }
                ControlCode::Stop => {
                    self.paused = true;
                }
                ControlCode::FeedbackOn => {
                    self.feedback = true;
                    events.push("feedback_on".to_string());
                }
                ControlCode::FeedbackOff => {
                    self.feedback = false;
                    events.push("feedback_off".to_string());
                }
            }
        }

        let grips = self.grip_rx.drain();
        let enqueued: Vec<u64> = grips.iter().map(|g| g.enqueued_ns).collect();
        if let Some(last) = grips.last() {
            if last.aperture.is_finite() {
                self.target = last.aperture.clamp(0.0, 1.0);
            }
            self.rate = if last.max_rate.is_finite() && last.max_rate > 0.0 {
                last.max_rate
            } else {
                self.cfg.gripper.default_rate
            };
        }

        if self.paused {
            return None;
        }

        if self.pending_lift {
            self.pending_lift = false;
            if !self.ball.lifted {
                self.ball.lifted = true;
                events.push("lift".to_string());
            }
        }

        let dt = self.cfg.dt();
        let max_ap = self.cfg.gripper.max_aperture;
        let goal = self.target * max_ap;
        let step = self.rate * max_ap * dt;
        self.aperture_mm += (goal - self.aperture_mm).clamp(-step, step);

        let was_dropped = self.ball.dropped;
        let (ball, contact) = step_ball(&self.ball, self.aperture_mm, dt);
        self.ball = ball;
        if self.ball.dropped && !was_dropped {
            events.push("drop".to_string());
        }

        if self.auto_lift && !self.ball.lifted {
            if contact > 0.0 && contact >= self.ball.hold_min {
                self.held_for += dt;
                if self.held_for + 1e-9 >= self.cfg.auto_lift_s {
                    self.pending_lift = true;
                }
            } else {
                self.held_for = 0.0;
            }
        }

        let wrench = Wrench::new(0.0, self.cfg.shear_fraction * contact, contact, 0.0);
        let seq = self.tick as u32;
        let frame_ns = now_ns();
        let mut record = TickRecord {
            seq: self.tick,
            t_ns: (self.tick as f64 * dt * 1e9).round() as u64,
            grip_target: self.target,
            grip_rate: self.rate,
            grip_commands: grips.len() as u32,
            feedback: self.feedback,
            aperture_mm: self.aperture_mm,
            contact_force: contact,
            wrench_norm: wrench.total(),
            total_estimate: None,
            quality: None,
            haptic: None,
            ball_diameter: self.ball.current_diameter,
            deformation_ratio: self.ball.deformation_ratio(),
            lifted: self.ball.lifted,
            dropped: self.ball.dropped,
            events,
            latency_ns: None,
            max_latency_ns: None,
            compute_ns: 0,
        };
        self.tick += 1;

        match self.perceive(wrench) {
            Ok(p) => {
                if self.slip.push(&p.estimate, &p.flow).is_some() {
                    record.events.push("slip".to_string());
                }
                let shaped = make_command(p.estimate.total, self.prev_haptic.as_ref(), &self.cfg.haptic, frame_ns);
                let haptic = if self.feedback {
                    shaped
                } else {
                    HapticCommand::silent(frame_ns)
                };
                self.prev_haptic = Some(haptic);
                record.total_estimate = Some(p.estimate.total);
                record.quality = Some(p.estimate.quality);
                record.haptic = Some(haptic.intensities);

                // A consumer that hung up is not the pipeline's problem.
                let _ = self.out.force.send(Stamped {
                    seq,
                    timestamp_ns: frame_ns,
                    value: p.estimate,
                });
                let _ = self.out.haptic.send(Stamped {
                    seq,
                    timestamp_ns: frame_ns,
                    value: haptic,
                });
                let _ = self.out.sensor.send(Stamped {
                    seq,
                    timestamp_ns: frame_ns,
                    value: p.image,
                });
                let _ = self.out.flow.send(Stamped {
                    seq,
                    timestamp_ns: frame_ns,
                    value: p.flow,
                });
                let published = now_ns();
                if !enqueued.is_empty() {
                    let waits = enqueued.iter().map(|&t| published.saturating_sub(t));
                    record.latency_ns = Some(waits.clone().sum::<u64>() / enqueued.len() as u64);
                    record.max_latency_ns = waits.max();
                }
            }
            Err(e) => {
                self.faults += 1;
                warn!("tick {}: {}", record.seq, e);
                record.events.push(format!("fault: {e}"));
            }
        }
        record.compute_ns = now_ns().saturating_sub(started);
        Some(record)
    }

    fn perceive(&mut self, wrench: Wrench) -> Result<Perception, PipelineError> {
        // Keeping the deformed state carries the jitter generator forward.
        self.gel = self.gel.apply_wrench(wrench)?;
        let image = self.gel.render()?;
        let flow = self.reference.track(&image, &self.markers)?;
        let estimate = estimate_from_flow(&flow, &self.cal)?;
        Ok(Perception { image, flow, estimate })
    }
}

//! Session logs: one JSON object per line, tagged by `kind`.
//!
//! A log starts with the config snapshot, then one line per tick, then the
//! summary. A log cut short by a crash still loads; its summary is rebuilt
//! from the ticks that made it to disk.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::thread::{self, JoinHandle};

use serde::{Deserialize, Serialize};

use crate::hapticmap::FINGERS;
use crate::wire::channel::{fifo, FifoProducer};
use crate::wire::ControlCode;

use super::pipeline::{GripCommand, Pipeline};
use super::{PipelineConfig, PipelineError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub seq: u64,
    /// Simulated time since the session started.
    pub t_ns: u64,
    /// Normalized aperture target in force during this tick.
    pub grip_target: f64,
    pub grip_rate: f64,
    /// GRIP_CMDs consumed this tick.
    pub grip_commands: u32,
    pub feedback: bool,
    pub aperture_mm: f64,
    pub contact_force: f64,
    /// Norm of the wrench applied to the gel.
    pub wrench_norm: f64,
    pub total_estimate: Option<f64>,
    pub quality: Option<f64>,
    pub haptic: Option<[f64; FINGERS]>,
    pub ball_diameter: f64,
    pub deformation_ratio: f64,
    pub lifted: bool,
    pub dropped: bool,
    pub events: Vec<String>,
    /// Enqueue-to-HAPTIC_CMD time averaged over the GRIP_CMDs consumed this tick.
    pub latency_ns: Option<u64>,
    /// The same for the oldest of them.
    #[serde(default)]
    pub max_latency_ns: Option<u64>,
    pub compute_ns: u64,
}

impl TickRecord {
    /// The record with its wall-clock measurements zeroed, leaving only what
    /// the simulation determines.
    pub fn without_timing(&self) -> TickRecord {
        TickRecord {
            latency_ns: None,
            max_latency_ns: None,
            compute_ns: 0,
            ..self.clone()
        }
    }

    pub fn has_event(&self, name: &str) -> bool {
        self.events.iter().any(|e| e == name)
    }
}

/// Outcome of the grasp task. Fully determined by the config and inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub ticks: u64,
    pub peak_force: f64,
    pub final_deformation_ratio: f64,
    pub lifted: bool,
    pub dropped: bool,
    pub faults: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub task: TaskSummary,
    /// Mean enqueue-to-haptic latency over every consumed GRIP_CMD.
    pub mean_latency_ms: Option<f64>,
    pub mean_tick_ms: f64,
    pub max_tick_ms: f64,
}

impl SessionSummary {
    pub fn from_ticks(ticks: &[TickRecord]) -> Self {
        let task = TaskSummary {
            ticks: ticks.len() as u64,
            peak_force: ticks.iter().map(|t| t.contact_force).fold(0.0, f64::max),
            final_deformation_ratio: ticks.last().map_or(0.0, |t| t.deformation_ratio),
            lifted: ticks.iter().any(|t| t.lifted),
            dropped: ticks.iter().any(|t| t.dropped),
            faults: ticks
                .iter()
                .filter(|t| t.events.iter().any(|e| e.starts_with("fault")))
                .count() as u64,
        };
        // Each tick's mean stands for grip_commands commands.
        let (weighted, commands) = ticks
            .iter()
            .filter_map(|t| {
                t.latency_ns
                    .map(|ns| (ns as f64 / 1e6, f64::from(t.grip_commands.max(1))))
            })
            .fold((0.0, 0.0), |(s, n), (ms, w)| (s + ms * w, n + w));
        let mean_latency_ms = (commands > 0.0).then(|| weighted / commands);
        let n = ticks.len().max(1) as f64;
        let tick_ms = ticks.iter().map(|t| t.compute_ns as f64 / 1e6);
        Self {
            task,
            mean_latency_ms,
            mean_tick_ms: tick_ms.clone().sum::<f64>() / n,
            max_tick_ms: tick_ms.fold(0.0, f64::max),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SessionLine {
    Config {
        config: Box<PipelineConfig>,
        mode: Option<String>,
    },
    Tick(TickRecord),
    Summary(SessionSummary),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionRecord {
    pub config: PipelineConfig,
    pub mode: Option<String>,
    pub ticks: Vec<TickRecord>,
    pub summary: SessionSummary,
}

impl SessionRecord {
    pub fn new(config: PipelineConfig, mode: Option<String>, ticks: Vec<TickRecord>) -> Self {
        let summary = SessionSummary::from_ticks(&ticks);
        Self {
            config,
            mode,
            ticks,
            summary,
        }
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> io::Result<()> {
        let mut line = |l: &SessionLine| -> io::Result<()> {
            serde_json::to_writer(&mut out, l)?;
            out.write_all(b"\n")
        };
        line(&SessionLine::Config {
            config: Box::new(self.config.clone()),
            mode: self.mode.clone(),
        })?;
        for t in &self.ticks {
            line(&SessionLine::Tick(t.clone()))?;
        }
        line(&SessionLine::Summary(self.summary.clone()))?;
        out.flush()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> io::Result<()> {
        self.write_jsonl(BufWriter::new(File::create(path)?))
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self, PipelineError> {
        let mut config = None;
        let mut ticks = Vec::new();
        let mut summary = None;
        for (no, line) in input.lines().enumerate() {
            let line = line.map_err(|e| PipelineError::Session(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: SessionLine =
                serde_json::from_str(&line).map_err(|e| PipelineError::Session(format!("line {}: {e}", no + 1)))?;
            match parsed {
                SessionLine::Config { config: c, mode } => config = Some((*c, mode)),
                SessionLine::Tick(t) => ticks.push(t),
                SessionLine::Summary(s) => summary = Some(s),
            }
        }
        let (config, mode) = config.ok_or_else(|| PipelineError::Session("missing config line".into()))?;
        let summary = summary.unwrap_or_else(|| SessionSummary::from_ticks(&ticks));
        Ok(Self {
            config,
            mode,
            ticks,
            summary,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let file = File::open(path).map_err(|e| PipelineError::Session(e.to_string()))?;
        Self::read_jsonl(BufReader::new(file))
    }
}

/// Starts the thread that owns a session log file. Lines are appended and
/// flushed as they arrive; the thread exits once every producer is dropped
/// and returns the number of lines written.
pub fn spawn_recorder(path: impl AsRef<Path>) -> io::Result<(FifoProducer<SessionLine>, JoinHandle<io::Result<u64>>)> {
    let mut out = BufWriter::new(File::create(path)?);
    let (tx, rx) = fifo::<SessionLine>(4096).expect("nonzero capacity");
    let handle = thread::Builder::new().name("session-recorder".into()).spawn(move || {
        let mut written = 0;
        while let Ok(line) = rx.recv() {
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
            out.flush()?;
            written += 1;
        }
        Ok(written)
    })?;
    Ok((tx, handle))
}

/// Feeds a recorded session's operator inputs (grip targets, control
/// requests and lifts) back through a fresh pipeline built from its config.
pub fn replay_session(record: &SessionRecord) -> Result<SessionRecord, PipelineError> {
    let (mut pipeline, handles) = Pipeline::new(record.config.clone())?;
    // Lifts come from the log, whatever triggered them originally.
    pipeline.set_auto_lift(false);
    let mut ticks = Vec::with_capacity(record.ticks.len());
    for rec in &record.ticks {
        for event in &rec.events {
            let code = match event.as_str() {
                "start" => ControlCode::Start,
                "feedback_on" => ControlCode::FeedbackOn,
                "feedback_off" => ControlCode::FeedbackOff,
                "lift" => {
                    pipeline.lift();
                    continue;
                }
                _ => continue,
            };
            send(&handles.control, code)?;
        }
        if rec.grip_commands > 0 {
            send(&handles.grip, GripCommand::new(rec.grip_target, rec.grip_rate))?;
        }
        let tick = pipeline
            .tick()
            .ok_or_else(|| PipelineError::Session(format!("pipeline paused at tick {}", rec.seq)))?;
        ticks.push(tick);
    }
    Ok(SessionRecord::new(record.config.clone(), record.mode.clone(), ticks))
}

fn send<T>(tx: &FifoProducer<T>, value: T) -> Result<(), PipelineError> {
    tx.try_send(value).map_err(|e| PipelineError::Session(e.to_string()))
}

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "teleopd", version, about = "Simulated visuotactile teleoperation daemon")]
pub struct Cli {
    /// JSON pipeline config; missing fields take their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic gel images or a labeled feature dataset.
    Gen(GenArgs),
    /// Track markers through a directory of PGM frames.
    Track(TrackArgs),
    /// Estimate the wrench for each frame of a PGM sequence.
    Estimate(EstimateArgs),
    /// Fit gel gains or a ridge model from a labeled feature CSV.
    Calibrate(CalibrateArgs),
    /// Sweep the slip rig over friction and clamp force.
    SlipBench(SlipBenchArgs),
    /// Run the live pipeline behind TCP and web-socket endpoints.
    Serve(ServeArgs),
    /// Run the scripted grasp controllers.
    Experiment(ExperimentArgs),
    /// Re-run a recorded session and check it reproduces.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GenKind {
    /// Frames under a wrench ramped linearly from zero.
    Ramp,
    /// Frames from one slip-rig trial, with per-frame slip labels.
    Slip,
    /// Pooled flow features for random wrenches, as CSV.
    Dataset,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, value_enum, default_value = "ramp")]
    pub kind: GenKind,
    /// Output directory (ramp, slip) or CSV file (dataset).
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    /// Frames in a ramp, including the rest frame.
    #[arg(long, default_value_t = 10)]
    pub frames: usize,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub fx: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub fy: f64,
    #[arg(long = "fn", default_value_t = 0.0)]
    pub fn_: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub tau: f64,
    /// Commanded rig tension for a slip sequence, N.
    #[arg(long, default_value_t = 5.0)]
    pub tension: f64,
    /// Samples in a dataset.
    #[arg(long, default_value_t = 200)]
    pub samples: usize,
    /// Marker jitter σ in pixels, overriding the config.
    #[arg(long)]
    pub noise: Option<f64>,
    /// Random seed, overriding the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrackArgs {
    /// Directory of PGM frames; the first in name order is the reference.
    #[arg(long, value_name = "DIR")]
    pub input: PathBuf,
    /// Flow CSV; stdout when omitted.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[arg(long, value_name = "DIR")]
    pub input: PathBuf,
    /// Ridge model JSON; the closed-form inverse is used when omitted.
    #[arg(long, value_name = "PATH")]
    pub model: Option<PathBuf>,
    /// Calibration JSON replacing the one derived from the gel config.
    #[arg(long, value_name = "PATH")]
    pub calibration: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CalibrateModel {
    Gains,
    Ridge,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// Labeled feature CSV as written by `gen --kind dataset`.
    #[arg(long, value_name = "PATH")]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value = "ridge")]
    pub model: CalibrateModel,
    /// Ridge penalty.
    #[arg(long, default_value_t = 1e-6)]
    pub lambda: f64,
    /// Fitted calibration or model, as JSON.
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    /// Fit report CSV; stdout when omitted.
    #[arg(long, value_name = "PATH")]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SlipBenchArgs {
    /// Static friction coefficients to sweep.
    #[arg(long = "mu-s", value_delimiter = ',', num_args = 1..)]
    pub mu_s: Vec<f64>,
    /// Clamp normal forces to sweep, N.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub normal: Vec<f64>,
    /// Kinetic coefficient; defaults to the config's μk/μs ratio times μs.
    #[arg(long = "mu-k")]
    pub mu_k: Option<f64>,
    /// CSV path; stdout when omitted.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub bind: Option<String>,
    /// TCP port for raw frames (0 picks a free port).
    #[arg(long)]
    pub tcp_port: Option<u16>,
    /// Web-socket port (0 picks a free port).
    #[arg(long)]
    pub ws_port: Option<u16>,
    #[arg(long)]
    pub tick_rate: Option<f64>,
    /// Stop after this many seconds instead of running until killed.
    #[arg(long)]
    pub duration: Option<f64>,
    /// Append the session log to this JSONL file.
    #[arg(long, value_name = "PATH")]
    pub session: Option<PathBuf>,
    /// Write serving statistics as JSON on exit.
    #[arg(long, value_name = "PATH")]
    pub stats: Option<PathBuf>,
    /// Restrict the whole process to one CPU.
    #[arg(long, value_name = "CPU")]
    pub pin_cpu: Option<usize>,
    /// Never lift the ball automatically.
    #[arg(long)]
    pub no_auto_lift: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Naive,
    Feedback,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    #[arg(long, value_enum, default_value = "feedback", conflicts_with = "both")]
    pub mode: ModeArg,
    /// Run naive and feedback back to back and report the reduction.
    #[arg(long)]
    pub both: bool,
    /// Directory for the session logs.
    #[arg(long, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
    /// Also run this many randomized ball draws through both controllers.
    #[arg(long, value_name = "N")]
    pub robustness: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// Session JSONL to replay.
    #[arg(long, value_name = "PATH")]
    pub session: PathBuf,
    /// Write the replayed session here.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

//! Command-line front end and live server for the simulated visuotactile
//! teleoperation pipeline.

pub mod cli;
pub mod commands;
pub mod serve;

use std::fs;
use std::io::Write;
use std::time::Duration;

use anyhow::{ensure, Context, Result};

use cli::{Cli, Command, ServeArgs};
use tactile_core::teleop::PipelineConfig;

pub fn run(cli: Cli) -> Result<()> {
    let cfg = commands::load_config(cli.config.as_deref())?;
    match &cli.command {
        Command::Gen(a) => commands::gen(&cfg, a),
        Command::Track(a) => commands::track(&cfg, a),
        Command::Estimate(a) => commands::estimate(&cfg, a),
        Command::Calibrate(a) => commands::calibrate(&cfg, a),
        Command::SlipBench(a) => commands::slip_bench(&cfg, a),
        Command::Serve(a) => run_serve(cfg, a),
        Command::Experiment(a) => commands::experiment(&cfg, a),
        Command::Replay(a) => commands::replay(a),
    }
}

fn run_serve(mut cfg: PipelineConfig, args: &ServeArgs) -> Result<()> {
    if let Some(cpu) = args.pin_cpu {
        serve::pin_to_cpu(cpu)?;
    }
    if let Some(bind) = &args.bind {
        cfg.wire.bind = bind.clone();
    }
    if let Some(p) = args.tcp_port {
        cfg.wire.tcp_port = p;
    }
    if let Some(p) = args.ws_port {
        cfg.wire.ws_port = p;
    }
    if let Some(r) = args.tick_rate {
        cfg.tick_rate = r;
    }
    let duration = match args.duration {
        Some(s) => {
            ensure!(
                s.is_finite() && s >= 0.0,
                "--duration must be a non-negative number of seconds"
            );
            Some(Duration::from_secs_f64(s))
        }
        None => None,
    };
    let server = serve::bind(serve::ServeOptions {
        cfg,
        duration,
        session: args.session.clone(),
        auto_lift: !args.no_auto_lift,
    })?;
    // Machine-readable so scripts can find ports chosen by the OS.
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "tcp {}", server.tcp_addr()?)?;
    writeln!(stdout, "ws {}", server.ws_addr()?)?;
    stdout.flush()?;
    drop(stdout);

    let stats = server.run()?;
    log::info!(
        "served {} ticks, {} grip commands, mean latency {:?} ms",
        stats.ticks,
        stats.grip_received,
        stats.mean_latency_ms
    );
    if let Some(path) = &args.stats {
        fs::write(path, serde_json::to_string_pretty(&stats)?)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

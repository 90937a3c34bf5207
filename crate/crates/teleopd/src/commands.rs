use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};

use tactile_core::flowtrack::{track_sequence, FlowField};
use tactile_core::forceest::ridge::{read_dataset, write_dataset};
use tactile_core::forceest::{
    estimate_from_flow, fit_gains, pool_features, predict_ridge, r_squared, synthesize_dataset, train_ridge,
    Calibration, ForceEstimate, RidgeModel, SlipDetector, WrenchRanges, LABEL_NAMES,
};
use tactile_core::gelsim::{make_gel, GelConfig, Wrench};
use tactile_core::sliprig::{generate_labeled_sequence, search_slip_force, write_telemetry_csv, RigConfig};
use tactile_core::teleop::{
    replay_session, robustness_check, run_controller_experiment, ControllerMode, PipelineConfig, SessionRecord,
};
use tactile_core::GelImage;

use crate::cli::{
    CalibrateArgs, CalibrateModel, EstimateArgs, ExperimentArgs, GenArgs, GenKind, ModeArg, ReplayArgs, SlipBenchArgs,
    TrackArgs,
};

pub fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    let cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
        }
        None => PipelineConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(io::stdout().lock()),
    })
}

fn frame_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pgm"))
        .collect();
    paths.sort();
    ensure!(!paths.is_empty(), "no .pgm frames in {}", dir.display());
    Ok(paths)
}

fn load_frames(dir: &Path) -> Result<Vec<GelImage>> {
    frame_paths(dir)?
        .iter()
        .map(|p| GelImage::load_pgm(p).with_context(|| format!("loading {}", p.display())))
        .collect()
}

fn gel_config(cfg: &PipelineConfig, args: &GenArgs) -> GelConfig {
    let mut gel = cfg.gel.clone();
    if let Some(sigma) = args.noise {
        gel.noise_sigma = sigma;
    }
    if let Some(seed) = args.seed {
        gel.seed = seed;
    }
    gel
}

pub fn gen(cfg: &PipelineConfig, args: &GenArgs) -> Result<()> {
    let gel = gel_config(cfg, args);
    gel.validate()?;
    match args.kind {
        GenKind::Ramp => {
            ensure!(args.frames >= 1, "--frames must be at least 1");
            fs::create_dir_all(&args.out)?;
            let full = Wrench::new(args.fx, args.fy, args.fn_, args.tau);
            let mut state = make_gel(gel)?;
            let mut labels = csv::Writer::from_path(args.out.join("wrenches.csv"))?;
            labels.write_record(["frame", "fx", "fy", "fn", "tau"])?;
            for i in 0..args.frames {
                let scale = if args.frames > 1 {
                    i as f64 / (args.frames - 1) as f64
                } else {
                    1.0
                };
                let w = full * scale;
                state = state.apply_wrench(w)?;
                state.render()?.save_pgm(args.out.join(format!("frame_{i:05}.pgm")))?;
                labels
                    .write_record(std::iter::once(i.to_string()).chain(w.components().iter().map(|v| v.to_string())))?;
            }
            labels.flush()?;
            eprintln!("wrote {} frames to {}", args.frames, args.out.display());
        }
        GenKind::Slip => {
            let seq = generate_labeled_sequence(&cfg.rig, &gel, args.tension)?;
            seq.save(&args.out)?;
            write_telemetry_csv(&seq.telemetry, File::create(args.out.join("telemetry.csv"))?)?;
            match seq.first_slip() {
                Some(f) => eprintln!("wrote {} frames, first slip at frame {f}", seq.frames.len()),
                None => eprintln!("wrote {} frames, no slip", seq.frames.len()),
            }
        }
        GenKind::Dataset => {
            let seed = args.seed.unwrap_or(gel.seed);
            let data = synthesize_dataset(&gel, &cfg.track, &WrenchRanges::default(), args.samples, seed)?;
            write_dataset(&data, BufWriter::new(File::create(&args.out)?))?;
            eprintln!("wrote {} samples to {}", data.len(), args.out.display());
        }
    }
    Ok(())
}

pub fn track(cfg: &PipelineConfig, args: &TrackArgs) -> Result<()> {
    let frames = load_frames(&args.input)?;
    let flows = track_sequence(&frames, &cfg.track)?;
    let mut wr = csv::Writer::from_writer(output(args.out.as_deref())?);
    wr.write_record(["frame", "base_x", "base_y", "dx", "dy", "valid", "residual"])?;
    for (i, flow) in flows.iter().enumerate() {
        for e in &flow.entries {
            wr.write_record([
                i.to_string(),
                e.base.x.to_string(),
                e.base.y.to_string(),
                e.delta.x.to_string(),
                e.delta.y.to_string(),
                u8::from(e.valid).to_string(),
                e.residual.to_string(),
            ])?;
        }
    }
    wr.flush()?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn estimate_one(flow: &FlowField, cal: &Calibration, model: Option<&RidgeModel>) -> Result<ForceEstimate> {
    Ok(match model {
        Some(m) => {
            let quality = flow.valid_count() as f64 / flow.len().max(1) as f64;
            predict_ridge(m, &pool_features(flow, cal)?, quality)?
        }
        None => estimate_from_flow(flow, cal)?,
    })
}

pub fn estimate(cfg: &PipelineConfig, args: &EstimateArgs) -> Result<()> {
    let cal = match &args.calibration {
        Some(p) => read_json(p)?,
        None => cfg.calibration(),
    };
    let model = match &args.model {
        Some(p) => Some(RidgeModel::from_json(
            &fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        )?),
        None => None,
    };
    let frames = load_frames(&args.input)?;
    let flows = track_sequence(&frames, &cfg.track)?;
    let mut detector = SlipDetector::new(cfg.slip.clone());
    let mut wr = csv::Writer::from_writer(output(args.out.as_deref())?);
    wr.write_record(["frame", "fx", "fy", "fn", "tau", "total", "quality", "slip"])?;
    for (i, flow) in flows.iter().enumerate() {
        let est = estimate_one(flow, &cal, model.as_ref()).with_context(|| format!("frame {i}"))?;
        let slip = detector.push(&est, flow).is_some();
        let w = est.wrench;
        wr.write_record([
            i.to_string(),
            w.fx.to_string(),
            w.fy.to_string(),
            w.fn_.to_string(),
            w.tau.to_string(),
            est.total.to_string(),
            est.quality.to_string(),
            u8::from(slip).to_string(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

pub fn calibrate(cfg: &PipelineConfig, args: &CalibrateArgs) -> Result<()> {
    let file = File::open(&args.input).with_context(|| format!("opening {}", args.input.display()))?;
    let data = read_dataset(file).with_context(|| format!("reading {}", args.input.display()))?;
    let mut report = csv::Writer::from_writer(output(args.report.as_deref())?);
    match args.model {
        CalibrateModel::Gains => {
            let cal = fit_gains(&data, &cfg.gel)?;
            fs::write(&args.out, serde_json::to_string_pretty(&cal)?)?;
            report.write_record(["parameter", "value"])?;
            for (name, v) in [("k_s", cal.k_s), ("k_n", cal.k_n), ("k_t", cal.k_t)] {
                report.write_record([name, &v.to_string()])?;
            }
        }
        CalibrateModel::Ridge => {
            let model = train_ridge(&data, args.lambda)?;
            fs::write(&args.out, model.to_json()?)?;
            report.write_record(["output", "r2"])?;
            for (name, r2) in LABEL_NAMES.iter().zip(r_squared(&model, &data)) {
                report.write_record([*name, &r2.to_string()])?;
            }
        }
    }
    report.flush()?;
    Ok(())
}

const DEFAULT_MU_S: [f64; 4] = [0.3, 0.5, 0.8, 1.2];
const DEFAULT_NORMAL: [f64; 4] = [1.0, 2.0, 5.0, 10.0];

pub fn slip_bench(cfg: &PipelineConfig, args: &SlipBenchArgs) -> Result<()> {
    let mus = if args.mu_s.is_empty() {
        DEFAULT_MU_S.to_vec()
    } else {
        args.mu_s.clone()
    };
    let normals = if args.normal.is_empty() {
        DEFAULT_NORMAL.to_vec()
    } else {
        args.normal.clone()
    };
    let ratio = cfg.rig.mu_kinetic / cfg.rig.mu_static;
    let mut wr = csv::Writer::from_writer(output(args.out.as_deref())?);
    wr.write_record([
        "mu_s",
        "mu_k",
        "normal",
        "slip_force",
        "oracle",
        "rel_error",
        "quantum",
        "trials",
    ])?;
    for &mu_s in &mus {
        for &normal in &normals {
            let rig = RigConfig {
                mu_static: mu_s,
                mu_kinetic: args.mu_k.unwrap_or(ratio * mu_s),
                clamp_normal: normal,
                ..cfg.rig.clone()
            };
            let found = search_slip_force(&rig).with_context(|| format!("mu_s={mu_s} normal={normal}"))?;
            let oracle = rig.static_limit();
            wr.write_record([
                mu_s.to_string(),
                rig.mu_kinetic.to_string(),
                normal.to_string(),
                found.slip_force.to_string(),
                oracle.to_string(),
                ((found.slip_force - oracle).abs() / oracle).to_string(),
                rig.tension_quantum().to_string(),
                found.trials.to_string(),
            ])?;
        }
    }
    wr.flush()?;
    Ok(())
}

fn describe(rec: &SessionRecord) -> String {
    let t = &rec.summary.task;
    let latency = rec
        .summary
        .mean_latency_ms
        .map_or_else(|| "n/a".to_string(), |v| format!("{v:.3}"));
    format!(
        "{}: deformation_ratio={:.6} peak_force={:.4} lifted={} dropped={} ticks={} mean_latency_ms={}",
        rec.mode.as_deref().unwrap_or("session"),
        t.final_deformation_ratio,
        t.peak_force,
        t.lifted,
        t.dropped,
        t.ticks,
        latency
    )
}

pub fn experiment(cfg: &PipelineConfig, args: &ExperimentArgs) -> Result<()> {
    let modes: Vec<ControllerMode> = if args.both {
        vec![ControllerMode::Naive, ControllerMode::Feedback]
    } else {
        vec![match args.mode {
            ModeArg::Naive => ControllerMode::Naive,
            ModeArg::Feedback => ControllerMode::Feedback,
        }]
    };
    if let Some(dir) = &args.out_dir {
        fs::create_dir_all(dir)?;
    }
    let mut ratios = Vec::new();
    for mode in modes {
        let rec = run_controller_experiment(cfg, mode)?;
        println!("{}", describe(&rec));
        if let Some(dir) = &args.out_dir {
            let path = dir.join(format!("{mode}.jsonl"));
            rec.save(&path).with_context(|| format!("writing {}", path.display()))?;
        }
        ratios.push(rec.summary.task.final_deformation_ratio);
    }
    if let [naive, feedback] = ratios[..] {
        if naive > 0.0 {
            println!("reduction={:.1}%", 100.0 * (1.0 - feedback / naive));
        } else {
            println!("reduction=n/a (naive run did not deform the ball)");
        }
    }
    if let Some(draws) = args.robustness {
        let report = robustness_check(cfg, draws, args.seed)?;
        for d in &report.draws {
            println!(
                "draw d0={:.2} K={:.3} F_y={:.3} rate={:.3} hold_min={:.3}: naive={:.6} feedback={:.6}",
                d.ball.rest_diameter,
                d.ball.stiffness,
                d.ball.yield_force,
                d.ball.plastic_rate,
                d.ball.hold_min,
                d.naive_deformation,
                d.feedback_deformation
            );
        }
        println!(
            "robustness: feedback gentler in {}/{} draws",
            report.gentler_count(),
            draws
        );
    }
    Ok(())
}

pub fn replay(args: &ReplayArgs) -> Result<()> {
    let original = SessionRecord::load(&args.session)?;
    let replayed = replay_session(&original)?;
    if let Some(out) = &args.out {
        replayed
            .save(out)
            .with_context(|| format!("writing {}", out.display()))?;
    }
    for (a, b) in original.ticks.iter().zip(&replayed.ticks) {
        if a.without_timing() != b.without_timing() {
            bail!("replay diverged at tick {}", a.seq);
        }
    }
    if original.summary.task != replayed.summary.task {
        bail!(
            "replayed summary differs: {:?} vs {:?}",
            replayed.summary.task,
            original.summary.task
        );
    }
    println!("replay reproduced {} ticks", replayed.ticks.len());
    println!("{}", describe(&replayed));
    Ok(())
}

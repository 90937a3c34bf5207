use proptest::prelude::*;

use tactile_core::flowtrack::track_sequence;
use tactile_core::forceest::{detect_slip, estimate_from_flow, Calibration, SlipConfig};
use tactile_core::gelsim::GelConfig;
use tactile_core::sliprig::{
    generate_labeled_sequence, run_trial, search_slip_force, step_rig, Regime, RigConfig, RigState, SLIP_TOL,
};

fn rig(mu_s: f64, normal: f64) -> RigConfig {
    RigConfig {
        mu_static: mu_s,
        mu_kinetic: 0.75 * mu_s,
        clamp_normal: normal,
        ..RigConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn slip_force_tracks_the_static_limit(mu_s in 0.2..1.5f64, normal in 0.5..12.0f64) {
        let cfg = rig(mu_s, normal);
        let s = search_slip_force(&cfg).unwrap();
        let oracle = mu_s * normal;
        prop_assert!((s.slip_force - oracle).abs() <= (0.02 * oracle).max(cfg.tension_quantum()));
        // The protocol stops at the first commanded level that reaches the limit.
        prop_assert!(s.commanded_tension >= oracle - SLIP_TOL);
        prop_assert!(s.commanded_tension - cfg.tension_step < oracle + SLIP_TOL);
    }

    #[test]
    fn slip_force_is_monotone_in_friction_and_load(
        mu_s in 0.2..1.2f64,
        normal in 0.5..8.0f64,
        dmu in 0.0..0.5f64,
        dn in 0.0..4.0f64,
    ) {
        let base = search_slip_force(&rig(mu_s, normal)).unwrap().slip_force;
        let more_mu = search_slip_force(&rig(mu_s + dmu, normal)).unwrap().slip_force;
        let more_n = search_slip_force(&rig(mu_s, normal + dn)).unwrap().slip_force;
        prop_assert!(more_mu >= base - SLIP_TOL);
        prop_assert!(more_n >= base - SLIP_TOL);
    }

    #[test]
    fn below_the_limit_nothing_moves(mu_s in 0.2..1.5f64, normal in 0.5..12.0f64, frac in 0.0..0.99f64) {
        let cfg = rig(mu_s, normal);
        let (result, tel) = run_trial(&cfg, frac * cfg.static_limit());
        prop_assert!(!result.slipped);
        prop_assert_eq!(result.object_displacement, 0.0);
        prop_assert!(tel.iter().all(|s| s.regime == Regime::Stuck && s.tension <= cfg.static_limit() + SLIP_TOL));
    }
}

#[test]
fn stick_slip_cycles_show_hysteresis() {
    let cfg = RigConfig::default();
    let mut s = RigState::at_rest(&cfg);
    let mut onsets = Vec::new();
    let mut after_slip = Vec::new();
    for _ in 0..5_000 {
        s = step_rig(&s, cfg.motor_speed, &cfg);
        if let Some(o) = s.onset {
            onsets.push(o);
            after_slip.push(s.tension);
        }
    }
    assert!(onsets.len() >= 3, "{}", onsets.len());
    for o in &onsets {
        assert_eq!(o.tension, cfg.static_limit());
    }
    for t in &after_slip {
        assert!((t - cfg.kinetic_level()).abs() < 1e-9);
    }
    // Each cycle reloads from the kinetic level to the static limit.
    let reload_time = (cfg.static_limit() - cfg.kinetic_level()) / cfg.tension_quantum() * cfg.dt;
    for w in onsets.windows(2) {
        assert!((w[1].time - w[0].time - reload_time).abs() < 2.0 * cfg.dt);
    }
}

#[test]
fn labeled_sequence_agrees_with_telemetry_and_detector() {
    let rig = RigConfig {
        dt: 0.02,
        mu_kinetic: 0.4,
        ..RigConfig::default()
    };
    let gel = GelConfig::default();
    let seq = generate_labeled_sequence(&rig, &gel, 1.3 * rig.static_limit()).unwrap();
    assert_eq!(seq.frames.len(), seq.labels.len());
    for (label, state) in seq.labels.iter().zip(&seq.telemetry) {
        assert_eq!(label.slip, state.regime == Regime::Slipping);
        assert_eq!(label.tension, state.tension);
    }
    let first = seq.first_slip().expect("slipped");

    let flows = track_sequence(&seq.frames, &Default::default()).unwrap();
    let cal = Calibration::from_gel(&gel);
    let history: Vec<_> = flows
        .into_iter()
        .map(|f| (estimate_from_flow(&f, &cal).unwrap(), f))
        .collect();
    let events = detect_slip(&history, &SlipConfig::default());
    assert!(!events.is_empty());
    assert!(events[0].frame.abs_diff(first) <= 1, "{events:?} vs {first}");
}

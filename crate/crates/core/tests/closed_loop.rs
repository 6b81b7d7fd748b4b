use std::f64::consts::PI;

use lateral_mpc::adapt::{OperatingCondition, ParameterAdapter};
use lateral_mpc::mpc::MpcParams;
use lateral_mpc::scenario::{compute_mse, run_closed_loop, ControllerMode, LoopConfig, PlantKind, Scenario, SimLog};

fn assert_steering_bounds(log: &SimLog) {
    for r in &log.records {
        assert!(r.u.abs() <= PI / 6.0, "t={} u={}", r.t, r.u);
        assert!(r.du.abs() <= PI / 12.0, "t={} du={}", r.t, r.du);
    }
}

/// Picks calmer knobs at higher speed; enough to exercise the adaptive path.
struct SpeedSchedule;

impl ParameterAdapter for SpeedSchedule {
    fn adapt(&self, c: &OperatingCondition) -> MpcParams {
        let nc = if c.vx > 8.0 { 2 } else { 3 };
        MpcParams { np: 30, nc, q: 10.0, r: 0.1 }
    }

    fn name(&self) -> &str {
        "speed-schedule"
    }
}

#[test]
fn linear_plant_has_no_steady_state_offset() {
    let cfg = LoopConfig {
        plant: PlantKind::Linear,
        ..LoopConfig::default()
    };
    for vx in [5.0, 15.0, 25.0] {
        for wind in [0.0, 10.0] {
            let cond = OperatingCondition { vx, wind, mu: 0.9, y_ref: 2.0 };
            let log = run_closed_loop(&Scenario::step(&cond, 20.0, 0.0), &cfg, None).unwrap();
            let late = log.records.iter().filter(|r| r.t >= 10.0);
            let worst = late.map(|r| r.error.abs()).fold(0.0, f64::max);
            assert!(worst < 1e-3, "vx={vx} wind={wind} late error {worst}");
        }
    }
}

#[test]
fn straight_road_stays_straight_in_every_mode() {
    let cfg = LoopConfig::default();
    for mode in [ControllerMode::Fixed, ControllerMode::NnAdaptive] {
        let sc = Scenario::regulation_zero().with_mode(mode);
        let adapter: Option<&dyn ParameterAdapter> = mode.is_adaptive().then_some(&SpeedSchedule);
        let log = run_closed_loop(&sc, &cfg, adapter).unwrap();
        assert!(log.records.iter().all(|r| r.y.abs() < 1e-3));
        assert!(compute_mse(&log).unwrap() < 1e-6);
    }
}

#[test]
fn builtin_scenarios_respect_steering_bounds() {
    let cfg = LoopConfig::default();
    for name in Scenario::BUILTIN_NAMES {
        let sc = Scenario::builtin(name).unwrap();
        let log = run_closed_loop(&sc, &cfg, None).unwrap();
        assert_steering_bounds(&log);
        let adaptive = sc.with_mode(ControllerMode::AnfisAdaptive);
        let log = run_closed_loop(&adaptive, &cfg, Some(&SpeedSchedule)).unwrap();
        assert_steering_bounds(&log);
    }
}

#[test]
fn mirrored_scenario_mirrors_the_trajectory() {
    let cfg = LoopConfig::default();
    for name in ["triple-lane-change", "general-trajectory"] {
        let sc = Scenario::builtin(name).unwrap().with_mode(ControllerMode::NnAdaptive);
        let a = run_closed_loop(&sc, &cfg, Some(&SpeedSchedule)).unwrap();
        let b = run_closed_loop(&sc.mirrored(), &cfg, Some(&SpeedSchedule)).unwrap();
        assert_eq!(a.len(), b.len());
        for (p, q) in a.records.iter().zip(&b.records) {
            assert!((p.y + q.y).abs() < 1e-9 && (p.u + q.u).abs() < 1e-9, "{name} t={}", p.t);
        }
    }
}

#[test]
fn reruns_are_bit_identical() {
    let cfg = LoopConfig::default();
    let sc = Scenario::triple_lane_change().with_mode(ControllerMode::NnAdaptive);
    let render = |log: &SimLog| {
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        buf
    };
    let a = run_closed_loop(&sc, &cfg, Some(&SpeedSchedule)).unwrap();
    let b = run_closed_loop(&sc, &cfg, Some(&SpeedSchedule)).unwrap();
    assert_eq!(a, b);
    assert_eq!(render(&a), render(&b));
}

#[test]
fn knob_columns_follow_the_mode() {
    let cfg = LoopConfig::default();
    let fixed = run_closed_loop(&Scenario::triple_lane_change(), &cfg, None).unwrap();
    let d = MpcParams::default();
    assert!(fixed.records.iter().all(|r| r.np == d.np && r.nc == d.nc && r.q == d.q && r.r == d.r));

    let sc = Scenario::triple_lane_change().with_mode(ControllerMode::NnAdaptive);
    let adaptive = run_closed_loop(&sc, &cfg, Some(&SpeedSchedule)).unwrap();
    let ncs: std::collections::BTreeSet<usize> = adaptive.records.iter().map(|r| r.nc).collect();
    assert_eq!(ncs.into_iter().collect::<Vec<_>>(), vec![2, 3]);
}

#[test]
fn adaptive_mode_without_adapter_is_rejected() {
    let sc = Scenario::regulation_zero().with_mode(ControllerMode::NnAdaptive);
    let err = run_closed_loop(&sc, &LoopConfig::default(), None).unwrap_err();
    assert_eq!(err.step, 0);
    assert!(err.log.is_empty());
}

#[test]
fn log_csv_has_the_documented_header() {
    let log = run_closed_loop(&Scenario::regulation_zero(), &LoopConfig::default(), None).unwrap();
    let mut buf = Vec::new();
    log.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "t,y_ref,y,error,u,du,psi_dot,vx,wind,mu,np,nc,q,r,qp_iterations"
    );
    assert_eq!(lines.count(), log.len());
}

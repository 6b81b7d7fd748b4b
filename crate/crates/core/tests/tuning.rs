use lateral_mpc::adapt::OperatingCondition;
use lateral_mpc::mpc::MpcParams;
use lateral_mpc::pso::{
    generate_dataset, inertia_weight, params_fitness, read_dataset, run_pso, tune_condition, update_accelerations, write_dataset,
    GridSpec, PsoConfig, TuningConfig,
};
use lateral_mpc::scenario::LoopConfig;

fn default_pso() -> PsoConfig {
    TuningConfig::default().pso_config(0)
}

#[test]
fn inertia_schedule_endpoints() {
    let cfg = default_pso();
    assert_eq!(cfg.n_gen, 15);
    assert!((inertia_weight(0, &cfg) - 0.99708).abs() < 1e-5);
    assert!((inertia_weight(cfg.n_gen, &cfg) - 0.1).abs() < 1e-9);
}

#[test]
fn accelerations_conserve_their_sum() {
    let cfg = default_pso();
    let (mut c1, mut c2) = (cfg.c1_init, cfg.c2_init);
    for g in 0..cfg.n_gen {
        (c1, c2) = update_accelerations(c1, c2, g, &cfg);
        assert!((c1 + c2 - 4.0).abs() < 1e-12, "g={g}");
    }
}

fn sphere(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

#[test]
fn sphere_run_improves_hundredfold() {
    let cfg = PsoConfig {
        seed: 11,
        ..PsoConfig::with_bounds(vec![(-5.0, 5.0); 10])
    };
    let out = run_pso(&cfg, 0, &[], &sphere).unwrap();
    assert_eq!(out.history.len(), cfg.n_gen + 1);
    assert!(out.history.windows(2).all(|w| w[1] <= w[0]));
    assert!(out.accelerations.iter().all(|(a, b)| (a + b - 4.0).abs() < 1e-12));
    let ratio = out.history[0] / out.best_cost;
    assert!(ratio >= 100.0, "improvement only {ratio}");
}

#[test]
fn pso_runs_are_reproducible() {
    let cfg = PsoConfig {
        seed: 5,
        ..PsoConfig::with_bounds(vec![(-5.0, 5.0); 4])
    };
    let a = run_pso(&cfg, 3, &[], &sphere).unwrap();
    let b = run_pso(&cfg, 3, &[], &sphere).unwrap();
    assert_eq!(a, b);
    let c = run_pso(&PsoConfig { seed: 6, ..cfg }, 3, &[], &sphere).unwrap();
    assert_ne!(a.best_position, c.best_position);
}

fn small_tuning() -> TuningConfig {
    TuningConfig {
        n_gen: 3,
        n_pop: 4,
        ..TuningConfig::default()
    }
}

#[test]
fn tuned_knobs_never_lose_to_the_defaults() {
    let loop_cfg = LoopConfig::default();
    let grid = GridSpec::with_counts(2, 1, 1, 2);
    let records = generate_dataset(&grid, &small_tuning(), &loop_cfg, 1).unwrap();
    assert_eq!(records.len(), 4);
    for (rec, cond) in records.iter().zip(grid.points()) {
        assert_eq!(rec.condition, cond);
        let baseline = params_fitness(&MpcParams::default(), &cond, &loop_cfg);
        assert!(rec.achieved_mse <= baseline, "{rec:?} vs {baseline}");
        assert_eq!(params_fitness(&rec.optimal, &cond, &loop_cfg), rec.achieved_mse);
    }
}

#[test]
fn mirrored_conditions_get_mirrored_tuning() {
    let loop_cfg = LoopConfig::default();
    let a = OperatingCondition { vx: 12.0, wind: 10.0, mu: 0.7, y_ref: 5.0 };
    let b = OperatingCondition { wind: -10.0, y_ref: -5.0, ..a };
    let ra = tune_condition(&a, &small_tuning(), &loop_cfg, 3, &[]).unwrap();
    let rb = tune_condition(&b, &small_tuning(), &loop_cfg, 3, &[]).unwrap();
    assert_eq!(ra.optimal, rb.optimal);
    assert_eq!(ra.achieved_mse, rb.achieved_mse);
}

#[test]
fn dataset_csv_roundtrip() {
    let loop_cfg = LoopConfig::default();
    let grid = GridSpec::with_counts(1, 2, 1, 1);
    let records = generate_dataset(&grid, &small_tuning(), &loop_cfg, 9).unwrap();
    let mut buf = Vec::new();
    write_dataset(&records, &mut buf).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert!(text.starts_with("vx,wind,mu,y_ref,np,nc,q,r,mse\n"));
    let back = read_dataset(buf.as_slice()).unwrap();
    assert_eq!(back.len(), records.len());
    for (x, y) in back.iter().zip(&records) {
        assert_eq!(x.condition, y.condition);
        assert_eq!((x.optimal.np, x.optimal.nc), (y.optimal.np, y.optimal.nc));
        assert!((x.optimal.q - y.optimal.q).abs() <= 1e-5 * y.optimal.q);
    }
}

#[test]
fn full_grid_has_6400_points() {
    let g = GridSpec::default();
    assert_eq!(g.len(), 6400);
    assert_eq!(g.points().len(), 6400);
}

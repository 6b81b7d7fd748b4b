use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use lateral_mpc::adapt::{Knob, OperatingCondition, ParameterAdapter};
use lateral_mpc::anfis::AnfisAdapter;
use lateral_mpc::nn::{split_indices, usable_records, NnAdapter};
use lateral_mpc::pso::{generate_dataset, load_dataset, save_dataset, tune_condition, TuningRecord};
use lateral_mpc::scenario::{format_sig, run_closed_loop, ControllerMode, SimLog, Summary};

use crate::config::{hex, RunConfig};
use crate::{CliError, Common};

pub struct Context {
    pub cfg: RunConfig,
    pub seed: u64,
    pub out: PathBuf,
    config_path: Option<PathBuf>,
}

impl Context {
    pub fn new(common: &Common) -> Result<Self, CliError> {
        let mut cfg = match &common.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = common.seed {
            cfg.seed = seed;
            cfg.nn.seed = seed;
            cfg.anfis.seed = seed;
        }
        if let Some(out) = &common.out {
            cfg.output_dir = out.clone();
        }
        let out = cfg.output_root();
        Ok(Self {
            seed: cfg.seed,
            cfg,
            out,
            config_path: common.config.clone(),
        })
    }

    fn dir(&self, sub: &str) -> Result<PathBuf, CliError> {
        let d = self.out.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", d.display())))?;
        Ok(d)
    }

    fn dataset_path(&self, arg: Option<PathBuf>) -> PathBuf {
        arg.or_else(|| self.cfg.paths.dataset.clone())
            .unwrap_or_else(|| self.out.join("dataset").join("tuning_dataset.csv"))
    }
}

#[derive(Serialize)]
struct FileEntry {
    path: String,
    sha256: String,
}

/// Provenance record written next to every command's outputs. Contains
/// no timestamps so reruns are byte-identical.
#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'static str,
    seed: u64,
    config: Option<String>,
    config_sha256: String,
    args: BTreeMap<&'a str, String>,
    inputs: Vec<FileEntry>,
    outputs: Vec<FileEntry>,
}

fn file_entry(path: &Path) -> Result<FileEntry, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", path.display())))?;
    Ok(FileEntry {
        path: path.display().to_string(),
        sha256: hex(&Sha256::digest(&bytes)),
    })
}

fn write_manifest(
    ctx: &Context,
    dir: &Path,
    command: &str,
    args: BTreeMap<&str, String>,
    inputs: &[&Path],
    outputs: &[&Path],
) -> Result<(), CliError> {
    let m = Manifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        seed: ctx.seed,
        config: ctx.config_path.as_ref().map(|p| p.display().to_string()),
        config_sha256: ctx.cfg.hash(),
        args,
        inputs: inputs.iter().map(|p| file_entry(p)).collect::<Result<_, _>>()?,
        outputs: outputs.iter().map(|p| file_entry(p)).collect::<Result<_, _>>()?,
    };
    let path = dir.join(format!("manifest-{command}.json"));
    write_text(&path, &(serde_json::to_string_pretty(&m).map_err(runtime)? + "\n"))
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{what} not found: {}", path.display())))
    }
}

fn load_records(path: &Path) -> Result<Vec<TuningRecord>, CliError> {
    require_file(path, "dataset")?;
    load_dataset(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn load_adapter(kind: ControllerMode, path: &Path) -> Result<Box<dyn ParameterAdapter>, CliError> {
    require_file(path, "model file")?;
    let bad = |e: lateral_mpc::Error| CliError::Config(format!("{}: {e}", path.display()));
    Ok(match kind {
        ControllerMode::NnAdaptive => Box::new(NnAdapter::load(path).map_err(bad)?),
        ControllerMode::AnfisAdaptive => Box::new(AnfisAdapter::load(path).map_err(bad)?),
        ControllerMode::Fixed => unreachable!("fixed mode has no adapter"),
    })
}

fn model_path(ctx: &Context, mode: ControllerMode, arg: Option<PathBuf>) -> PathBuf {
    arg.unwrap_or_else(|| match mode {
        ControllerMode::AnfisAdaptive => ctx.cfg.anfis_model_path(),
        _ => ctx.cfg.nn_model_path(),
    })
}

fn cond_args(args: &mut BTreeMap<&str, String>, c: &OperatingCondition) {
    args.insert("vx", c.vx.to_string());
    args.insert("wind", c.wind.to_string());
    args.insert("mu", c.mu.to_string());
    args.insert("y_ref", c.y_ref.to_string());
}

pub fn simulate(ctx: &Context, scenario: &str, mode: ControllerMode, model: Option<PathBuf>) -> Result<(), CliError> {
    let sc = ctx.cfg.scenario(scenario)?.with_mode(mode);
    let model = mode.is_adaptive().then(|| model_path(ctx, mode, model));
    let adapter = match &model {
        Some(p) => Some(load_adapter(mode, p)?),
        None => None,
    };
    let dir = ctx.dir("simulate")?;
    let stem = format!("{scenario}-{mode}");
    let log_path = dir.join(format!("{stem}.csv"));
    let summary_path = dir.join(format!("{stem}.summary.json"));
    let mut args = BTreeMap::from([("scenario", scenario.to_string()), ("mode", mode.to_string())]);
    if let Some(p) = &model {
        args.insert("model", p.display().to_string());
    }
    let inputs: Vec<&Path> = model.iter().map(PathBuf::as_path).collect();

    match run_closed_loop(&sc, &ctx.cfg.loop_config(), adapter.as_deref()) {
        Ok(log) => {
            log.save_csv(&log_path).map_err(runtime)?;
            let summary = Summary::from_log(&sc, &log).map_err(runtime)?;
            write_text(&summary_path, &(serde_json::to_string_pretty(&summary).map_err(runtime)? + "\n"))?;
            write_manifest(ctx, &dir, &format!("simulate-{stem}"), args, &inputs, &[&log_path, &summary_path])?;
            println!(
                "{scenario} {mode}: mse {} max |e| {} m, {} steps",
                format_sig(summary.mse, 6),
                format_sig(summary.max_abs_error, 6),
                log.len()
            );
            if let Some(us) = summary.adapter_latency_us {
                println!("adapter latency {us:.2} us/query");
            }
            Ok(())
        }
        Err(fail) => {
            // keep the partial log for diagnosis
            fail.log.save_csv(&log_path).map_err(runtime)?;
            write_manifest(ctx, &dir, &format!("simulate-{stem}"), args, &inputs, &[&log_path])?;
            Err(CliError::Runtime(format!(
                "{scenario} {mode}: {fail} (partial log in {})",
                log_path.display()
            )))
        }
    }
}

pub fn tune(ctx: &Context, vx: f64, wind: f64, mu: f64, y_ref: f64) -> Result<(), CliError> {
    let cond = OperatingCondition { vx, wind, mu, y_ref };
    cond.validate()?;
    let rec = tune_condition(&cond, &ctx.cfg.pso, &ctx.cfg.loop_config(), ctx.seed, &[])?;
    let dir = ctx.dir("tune")?;
    let path = dir.join("tune.json");
    write_text(&path, &(serde_json::to_string_pretty(&rec).map_err(runtime)? + "\n"))?;
    let mut args = BTreeMap::new();
    cond_args(&mut args, &cond);
    write_manifest(ctx, &dir, "tune", args, &[], &[&path])?;
    let p = rec.optimal;
    println!(
        "np {} nc {} q {} r {} mse {}",
        p.np,
        p.nc,
        format_sig(p.q, 6),
        format_sig(p.r, 6),
        format_sig(rec.achieved_mse, 6)
    );
    if !rec.achieved_mse.is_finite() {
        return Err(CliError::Runtime("no stable candidate found".into()));
    }
    Ok(())
}

pub fn dataset(ctx: &Context, counts: Option<[usize; 4]>) -> Result<(), CliError> {
    let mut grid = ctx.cfg.grid;
    if let Some(c) = &counts {
        grid.vx.n = c[0];
        grid.wind.n = c[1];
        grid.mu.n = c[2];
        grid.y_ref.n = c[3];
    }
    grid.validate()?;
    eprintln!("tuning {} grid points", grid.len());
    let records = generate_dataset(&grid, &ctx.cfg.pso, &ctx.cfg.loop_config(), ctx.seed)?;
    let dir = ctx.dir("dataset")?;
    let path = dir.join("tuning_dataset.csv");
    save_dataset(&records, &path).map_err(runtime)?;
    let mut args = BTreeMap::new();
    if let Some(c) = counts {
        args.insert("counts", format!("{},{},{},{}", c[0], c[1], c[2], c[3]));
    }
    write_manifest(ctx, &dir, "dataset", args, &[], &[&path])?;
    let infeasible = records.len() - usable_records(&records).len();
    println!("{} records, {} without a stable candidate -> {}", records.len(), infeasible, path.display());
    Ok(())
}

fn model_dir(path: &Path) -> Result<PathBuf, CliError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new(".")).to_path_buf();
    std::fs::create_dir_all(&dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn loss_path(model: &Path) -> PathBuf {
    let stem = model.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    model.with_file_name(format!("{stem}_loss.csv"))
}

pub fn train_nn(ctx: &Context, dataset: Option<PathBuf>) -> Result<(), CliError> {
    let data = ctx.dataset_path(dataset);
    let records = load_records(&data)?;
    let adapter = NnAdapter::train(&records, &ctx.cfg.nn, ctx.cfg.pso.bounds)?;
    let model = ctx.cfg.nn_model_path();
    let dir = model_dir(&model)?;
    adapter.save(&model).map_err(runtime)?;

    let losses = loss_path(&model);
    let mut text = String::from("epoch,np,nc,q,r\n");
    for e in 0..ctx.cfg.nn.epochs {
        let row: Vec<String> = adapter.nets.iter().map(|n| format_sig(n.meta.loss_curve[e], 6)).collect();
        text.push_str(&format!("{e},{}\n", row.join(",")));
    }
    write_text(&losses, &text)?;
    write_manifest(ctx, &dir, "train-nn", BTreeMap::new(), &[&data], &[&model, &losses])?;
    for n in &adapter.nets {
        println!(
            "{}: train mse {} validation mse {}",
            n.knob,
            format_sig(n.meta.final_loss, 4),
            n.meta.validation_mse.map_or("-".into(), |v| format_sig(v, 4))
        );
    }
    println!("model -> {}", model.display());
    Ok(())
}

pub fn train_anfis(ctx: &Context, dataset: Option<PathBuf>) -> Result<(), CliError> {
    let data = ctx.dataset_path(dataset);
    let records = load_records(&data)?;
    let start = Instant::now();
    let adapter = AnfisAdapter::train(&records, &ctx.cfg.anfis, ctx.cfg.pso.bounds)?;
    let elapsed = start.elapsed();
    let model = ctx.cfg.anfis_model_path();
    let dir = model_dir(&model)?;
    adapter.save(&model).map_err(runtime)?;

    let losses = loss_path(&model);
    let mut text = String::from("knob,epoch,before_rls,after_rls,after_premise\n");
    for m in &adapter.models {
        for (e, l) in m.meta.loss_curve.iter().enumerate() {
            text.push_str(&format!(
                "{},{e},{},{},{}\n",
                m.knob,
                format_sig(l.before_rls, 6),
                format_sig(l.after_rls, 6),
                format_sig(l.after_premise, 6)
            ));
        }
    }
    write_text(&losses, &text)?;
    write_manifest(ctx, &dir, "train-anfis", BTreeMap::new(), &[&data], &[&model, &losses])?;
    for m in &adapter.models {
        println!(
            "{}: {} rules, train mse {} validation mse {}",
            m.knob,
            m.rule_count(),
            format_sig(m.meta.final_loss, 4),
            m.meta.validation_mse.map_or("-".into(), |v| format_sig(v, 4))
        );
    }
    println!("training time {:.2} s", elapsed.as_secs_f64());
    println!("model -> {}", model.display());
    Ok(())
}

#[derive(Serialize)]
struct SpotPoint {
    condition: OperatingCondition,
    expected: [f64; 4],
    predicted: [f64; 4],
    pass: bool,
}

#[derive(Serialize)]
struct SpotReport {
    adapter: String,
    points: usize,
    /// Fraction of points within tolerance, per knob.
    knob_pass_rate: BTreeMap<String, f64>,
    /// Fraction of points with all four knobs within tolerance.
    pass_rate: f64,
    detail: Vec<SpotPoint>,
}

/// Horizons within ±2 steps, weights within ±25 %.
pub fn knob_within_tolerance(knob: Knob, expected: f64, predicted: f64) -> bool {
    match knob {
        Knob::Np | Knob::Nc => (predicted - expected).abs() <= 2.0,
        Knob::Q | Knob::R => (predicted - expected).abs() <= 0.25 * expected.abs(),
    }
}

pub fn evaluate(
    ctx: &Context,
    adapter: &str,
    model: Option<PathBuf>,
    dataset: Option<PathBuf>,
    points: usize,
) -> Result<(), CliError> {
    let mode = if adapter == "nn" { ControllerMode::NnAdaptive } else { ControllerMode::AnfisAdaptive };
    let model = model_path(ctx, mode, model);
    let imp = load_adapter(mode, &model)?;
    let data = ctx.dataset_path(dataset);
    let records = load_records(&data)?;
    let usable = usable_records(&records);
    if usable.is_empty() || points == 0 {
        return Err(CliError::Config("nothing to evaluate".into()));
    }
    let n = usable.len();
    let take = points.min(n);
    let (_, mut picked) = split_indices(n, (take as f64 + 0.5) / n as f64, ctx.seed);
    if take == n {
        picked = (0..n).collect();
    }
    picked.sort_unstable();

    let mut detail = Vec::with_capacity(picked.len());
    let mut knob_hits = [0usize; 4];
    let start = Instant::now();
    for &i in &picked {
        let rec = usable[i];
        let p = imp.adapt(&rec.condition);
        let expected = Knob::ALL.map(|k| k.of(&rec.optimal));
        let predicted = Knob::ALL.map(|k| k.of(&p));
        let ok = Knob::ALL.map(|k| knob_within_tolerance(k, expected[k.index()], predicted[k.index()]));
        for (h, o) in knob_hits.iter_mut().zip(ok) {
            *h += o as usize;
        }
        detail.push(SpotPoint {
            condition: rec.condition,
            expected,
            predicted,
            pass: ok.iter().all(|&o| o),
        });
    }
    let per_query = start.elapsed().as_secs_f64() * 1e6 / picked.len() as f64;
    let m = detail.len() as f64;
    let report = SpotReport {
        adapter: adapter.to_string(),
        points: detail.len(),
        knob_pass_rate: Knob::ALL.iter().map(|k| (k.to_string(), knob_hits[k.index()] as f64 / m)).collect(),
        pass_rate: detail.iter().filter(|d| d.pass).count() as f64 / m,
        detail,
    };
    let dir = ctx.dir("evaluate")?;
    let path = dir.join(format!("{adapter}.json"));
    write_text(&path, &(serde_json::to_string_pretty(&report).map_err(runtime)? + "\n"))?;
    let args = BTreeMap::from([("adapter", adapter.to_string()), ("points", points.to_string())]);
    write_manifest(ctx, &dir, &format!("evaluate-{adapter}"), args, &[&model, &data], &[&path])?;
    for (k, r) in &report.knob_pass_rate {
        println!("{k}: {:.0}% within tolerance", r * 100.0);
    }
    println!("all knobs: {:.0}% of {} points", report.pass_rate * 100.0, report.points);
    println!("inference {per_query:.2} us/query");
    Ok(())
}

struct CompareRow {
    mode: ControllerMode,
    mse: f64,
    max_abs_error: f64,
    status: String,
}

fn status_and_metrics(log: &SimLog, failed_at: Option<usize>, ts: f64) -> (f64, f64, String) {
    let mse = match failed_at {
        Some(_) => f64::INFINITY,
        None => lateral_mpc::scenario::compute_mse(log).unwrap_or(f64::INFINITY),
    };
    let max = log.records.iter().map(|r| r.error.abs()).fold(0.0, f64::max);
    let status = match failed_at {
        Some(step) => format!("diverged at t={}s", format_sig(step as f64 * ts, 4)),
        None => "ok".into(),
    };
    (mse, max, status)
}

pub fn compare(ctx: &Context, scenario: &str, nn_model: Option<PathBuf>, anfis_model: Option<PathBuf>) -> Result<(), CliError> {
    let base = ctx.cfg.scenario(scenario)?;
    let nn_path = model_path(ctx, ControllerMode::NnAdaptive, nn_model);
    let anfis_path = model_path(ctx, ControllerMode::AnfisAdaptive, anfis_model);
    let nn = load_adapter(ControllerMode::NnAdaptive, &nn_path)?;
    let anfis = load_adapter(ControllerMode::AnfisAdaptive, &anfis_path)?;
    let dir = ctx.dir("compare")?;
    let loop_cfg = ctx.cfg.loop_config();

    let mut rows = Vec::new();
    let mut outputs = Vec::new();
    for (mode, adapter) in [
        (ControllerMode::Fixed, None),
        (ControllerMode::NnAdaptive, Some(nn.as_ref())),
        (ControllerMode::AnfisAdaptive, Some(anfis.as_ref())),
    ] {
        let sc = base.clone().with_mode(mode);
        let (log, failed_at) = match run_closed_loop(&sc, &loop_cfg, adapter) {
            Ok(log) => (log, None),
            Err(f) => (f.log, Some(f.step)),
        };
        let path = dir.join(format!("{scenario}-{mode}.csv"));
        log.save_csv(&path).map_err(runtime)?;
        outputs.push(path);
        let (mse, max_abs_error, status) = status_and_metrics(&log, failed_at, loop_cfg.ts);
        rows.push(CompareRow {
            mode,
            mse,
            max_abs_error,
            status,
        });
    }

    let table = dir.join(format!("{scenario}.csv"));
    let mut text = String::from("mode,mse,max_abs_error,status\n");
    for r in &rows {
        text.push_str(&format!(
            "{},{},{},{}\n",
            r.mode,
            format_sig(r.mse, 6),
            format_sig(r.max_abs_error, 6),
            r.status
        ));
    }
    write_text(&table, &text)?;
    outputs.push(table);
    let outs: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
    let args = BTreeMap::from([("scenario", scenario.to_string())]);
    write_manifest(ctx, &dir, &format!("compare-{scenario}"), args, &[&nn_path, &anfis_path], &outs)?;

    let mut stdout = std::io::stdout().lock();
    let _ = writeln!(stdout, "{:<16} {:>12} {:>14}  status", "mode", "mse", "max |e| (m)");
    for r in &rows {
        let _ = writeln!(
            stdout,
            "{:<16} {:>12} {:>14}  {}",
            r.mode.to_string(),
            format_sig(r.mse, 6),
            format_sig(r.max_abs_error, 6),
            r.status
        );
    }
    Ok(())
}

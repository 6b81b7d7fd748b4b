//! Improved particle swarm tuning of `(np, nc, q, r)` and the grid sweep
//! that produces the optimal-parameter dataset.

mod swarm;

pub use swarm::*;

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapt::{KnobBounds, OperatingCondition};
use crate::error::{Error, Result};
use crate::mpc::MpcParams;
use crate::scenario::{episode_mse_bounded, LoopConfig, Scenario};

/// Length of a fitness episode (s).
pub const FITNESS_DURATION: f64 = 10.0;
/// Time of the lateral step in a fitness episode (s).
pub const FITNESS_STEP_AT: f64 = 1.0;

/// Rounds a raw candidate into controller knobs without the box clamp:
/// `np = round(np_raw)`, `nc = min(round(nc_raw), np)`.
pub fn candidate_params(candidate: &[f64]) -> MpcParams {
    let np = candidate[0].round().max(1.0) as usize;
    let nc = (candidate[1].round().max(1.0) as usize).min(np);
    MpcParams {
        np,
        nc,
        q: candidate[2],
        r: candidate[3],
    }
}

/// Closed-loop MSE of the knobs under one operating condition; `+∞` when the
/// episode diverges or the knobs are unusable.
pub fn params_fitness(params: &MpcParams, cond: &OperatingCondition, loop_cfg: &LoopConfig) -> f64 {
    params_fitness_bounded(params, cond, loop_cfg, f64::INFINITY)
}

/// Like [`params_fitness`] but may stop early once the MSE is known to
/// exceed `cutoff`; exact whenever the result is `<= cutoff`.
pub fn params_fitness_bounded(params: &MpcParams, cond: &OperatingCondition, loop_cfg: &LoopConfig, cutoff: f64) -> f64 {
    if params.validate().is_err() {
        return f64::INFINITY;
    }
    let scenario = Scenario::step(cond, FITNESS_DURATION, FITNESS_STEP_AT);
    let cfg = LoopConfig {
        fixed_params: *params,
        ..loop_cfg.clone()
    };
    episode_mse_bounded(&scenario, &cfg, None, cutoff)
}

/// Fitness of a raw 4-vector candidate.
pub fn evaluate_fitness(candidate: &[f64], cond: &OperatingCondition, loop_cfg: &LoopConfig) -> f64 {
    params_fitness(&candidate_params(candidate), cond, loop_cfg)
}

/// Evenly spaced samples of one grid axis; a single sample sits at the midpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl Axis {
    pub fn values(&self) -> Vec<f64> {
        match self.n {
            0 => Vec::new(),
            1 => vec![0.5 * (self.lo + self.hi)],
            n => (0..n)
                .map(|i| self.lo + (self.hi - self.lo) * i as f64 / (n - 1) as f64)
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub vx: Axis,
    pub wind: Axis,
    pub mu: Axis,
    pub y_ref: Axis,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self::with_counts(8, 10, 10, 8)
    }
}

impl GridSpec {
    /// Full operating ranges with the given number of samples per axis.
    pub fn with_counts(vx: usize, wind: usize, mu: usize, y_ref: usize) -> Self {
        Self {
            vx: Axis { lo: 3.0, hi: 27.0, n: vx },
            wind: Axis { lo: -30.0, hi: 30.0, n: wind },
            mu: Axis { lo: 0.5, hi: 0.9, n: mu },
            y_ref: Axis { lo: -15.0, hi: 15.0, n: y_ref },
        }
    }

    pub fn len(&self) -> usize {
        self.vx.n * self.wind.n * self.mu.n * self.y_ref.n
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        for (name, a) in [
            ("grid.vx", self.vx),
            ("grid.wind", self.wind),
            ("grid.mu", self.mu),
            ("grid.y_ref", self.y_ref),
        ] {
            if a.n == 0 || !(a.lo <= a.hi) {
                return Err(Error::invalid(name, "need n >= 1 and lo <= hi"));
            }
        }
        for c in self.points() {
            c.validate()?;
        }
        Ok(())
    }

    /// Grid points with `vx` outermost and `y_ref` innermost.
    pub fn points(&self) -> Vec<OperatingCondition> {
        let (vxs, winds, mus, ys) = (self.vx.values(), self.wind.values(), self.mu.values(), self.y_ref.values());
        let mut out = Vec::with_capacity(self.len());
        for &vx in &vxs {
            for &wind in &winds {
                for &mu in &mus {
                    for &y_ref in &ys {
                        out.push(OperatingCondition { vx, wind, mu, y_ref });
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TuningConfig {
    pub bounds: KnobBounds,
    pub n_gen: usize,
    pub n_pop: usize,
    pub w_max: f64,
    pub w_min: f64,
    pub c1_init: f64,
    pub c2_init: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub velocity_clamp: f64,
    /// Put one particle on the default knobs so the swarm never ends worse.
    pub seed_incumbent: bool,
    /// Seed each grid point's swarm with the previous point's best
    /// (forces a sequential sweep).
    pub warm_start: bool,
    /// Rescale `(q, r)` along their ratio line before emitting a record.
    pub canonical_weights: bool,
}

impl Default for TuningConfig {
    fn default() -> Self {
        let p = PsoConfig::with_bounds(Vec::new());
        Self {
            bounds: KnobBounds::default(),
            n_gen: p.n_gen,
            n_pop: p.n_pop,
            w_max: p.w_max,
            w_min: p.w_min,
            c1_init: p.c1_init,
            c2_init: p.c2_init,
            lambda1: p.lambda1,
            lambda2: p.lambda2,
            velocity_clamp: p.velocity_clamp,
            seed_incumbent: true,
            warm_start: false,
            canonical_weights: true,
        }
    }
}

impl TuningConfig {
    pub fn pso_config(&self, seed: u64) -> PsoConfig {
        PsoConfig {
            n_gen: self.n_gen,
            n_pop: self.n_pop,
            w_max: self.w_max,
            w_min: self.w_min,
            c1_init: self.c1_init,
            c2_init: self.c2_init,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            bounds: self.bounds.as_vec(),
            velocity_clamp: self.velocity_clamp,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.bounds.validate()?;
        self.pso_config(0).validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TuningRecord {
    pub condition: OperatingCondition,
    pub optimal: MpcParams,
    pub achieved_mse: f64,
}

pub const DATASET_COLUMNS: [&str; 9] = ["vx", "wind", "mu", "y_ref", "np", "nc", "q", "r", "mse"];

#[derive(Serialize, Deserialize)]
struct CsvRow {
    vx: f64,
    wind: f64,
    mu: f64,
    y_ref: f64,
    np: usize,
    nc: usize,
    q: f64,
    r: f64,
    mse: f64,
}

impl From<&TuningRecord> for CsvRow {
    fn from(t: &TuningRecord) -> Self {
        Self {
            vx: t.condition.vx,
            wind: t.condition.wind,
            mu: t.condition.mu,
            y_ref: t.condition.y_ref,
            np: t.optimal.np,
            nc: t.optimal.nc,
            q: t.optimal.q,
            r: t.optimal.r,
            mse: t.achieved_mse,
        }
    }
}

impl From<CsvRow> for TuningRecord {
    fn from(r: CsvRow) -> Self {
        Self {
            condition: OperatingCondition {
                vx: r.vx,
                wind: r.wind,
                mu: r.mu,
                y_ref: r.y_ref,
            },
            optimal: MpcParams {
                np: r.np,
                nc: r.nc,
                q: r.q,
                r: r.r,
            },
            achieved_mse: r.mse,
        }
    }
}

/// Writes records with full float precision so a reload is exact.
pub fn write_dataset<W: Write>(records: &[TuningRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for rec in records {
        w.serialize(CsvRow::from(rec))?;
    }
    if records.is_empty() {
        w.write_record(DATASET_COLUMNS)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset<R: Read>(input: R) -> Result<Vec<TuningRecord>> {
    let mut rdr = csv::Reader::from_reader(input);
    let headers = rdr.headers()?.clone();
    if headers.iter().ne(DATASET_COLUMNS) {
        return Err(Error::invalid(
            "dataset",
            format!("expected columns {}, found {}", DATASET_COLUMNS.join(","), headers.iter().collect::<Vec<_>>().join(",")),
        ));
    }
    let mut out = Vec::new();
    for row in rdr.deserialize::<CsvRow>() {
        let rec = TuningRecord::from(row?);
        rec.optimal.validate()?;
        out.push(rec);
    }
    Ok(out)
}

pub fn save_dataset(records: &[TuningRecord], path: &Path) -> Result<()> {
    write_dataset(records, std::fs::File::create(path)?)
}

pub fn load_dataset(path: &Path) -> Result<Vec<TuningRecord>> {
    read_dataset(std::fs::File::open(path)?)
}

/// Random-stream id of a condition. Mirrored conditions (wind and
/// reference negated) share an id, so their swarms search identically;
/// the id does not depend on where the condition sits in a grid.
pub fn condition_stream(cond: &OperatingCondition) -> u64 {
    let (y, w) = (cond.y_ref + 0.0, cond.wind + 0.0);
    let (y, w) = if (y, w) >= (-y, -w) { (y, w) } else { (-y + 0.0, -w + 0.0) };
    let mut h = 0xA076_1D64_78BD_642Fu64;
    for v in [cond.vx, cond.mu, y, w] {
        h = (h ^ (v + 0.0).to_bits()).wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(29);
    }
    h
}

/// Runs one swarm for a single operating condition.
///
/// `seeds` are extra starting positions (raw 4-vectors). When every
/// candidate diverges the record keeps the default knobs with an infinite
/// MSE.
pub fn tune_condition(
    cond: &OperatingCondition,
    cfg: &TuningConfig,
    loop_cfg: &LoopConfig,
    seed: u64,
    seeds: &[Vec<f64>],
) -> Result<TuningRecord> {
    let stream = condition_stream(cond);
    let fitness = |x: &[f64], cutoff: f64| params_fitness_bounded(&candidate_params(x), cond, loop_cfg, cutoff);
    let mut start = Vec::new();
    if cfg.seed_incumbent {
        let d = loop_cfg.fixed_params;
        start.push(vec![d.np as f64, d.nc as f64, d.q, d.r]);
    }
    start.extend_from_slice(seeds);
    let outcome = run_pso_bounded(&cfg.pso_config(seed), stream, &start, &fitness)?;
    if !outcome.best_cost.is_finite() {
        log::warn!(
            "no stable candidate for vx={} wind={} mu={} y_ref={}",
            cond.vx,
            cond.wind,
            cond.mu,
            cond.y_ref
        );
        return Ok(TuningRecord {
            condition: *cond,
            optimal: loop_cfg.fixed_params,
            achieved_mse: f64::INFINITY,
        });
    }
    let mut best = candidate_params(&outcome.best_position);
    let mut mse = outcome.best_cost;
    if cfg.canonical_weights {
        let (q, r) = cfg.bounds.canonical_weights(best.q, best.r);
        let canon = MpcParams { q, r, ..best };
        let canon_mse = params_fitness(&canon, cond, loop_cfg);
        // the rescaled weights give the same controller up to rounding
        if canon_mse <= mse {
            best = canon;
            mse = canon_mse;
        }
    }
    Ok(TuningRecord {
        condition: *cond,
        optimal: best,
        achieved_mse: mse,
    })
}

/// Runs a swarm per grid point. Parallel unless warm starting; the result
/// does not depend on the thread count.
pub fn generate_dataset(grid: &GridSpec, cfg: &TuningConfig, loop_cfg: &LoopConfig, seed: u64) -> Result<Vec<TuningRecord>> {
    grid.validate()?;
    cfg.validate()?;
    let points = grid.points();
    if cfg.warm_start {
        let mut out: Vec<TuningRecord> = Vec::with_capacity(points.len());
        for (i, c) in points.iter().enumerate() {
            let seeds: Vec<Vec<f64>> = out
                .last()
                .map(|p| vec![vec![p.optimal.np as f64, p.optimal.nc as f64, p.optimal.q, p.optimal.r]])
                .unwrap_or_default();
            out.push(tune_condition(c, cfg, loop_cfg, seed, &seeds)?);
            log::info!("grid point {}/{} done", i + 1, points.len());
        }
        Ok(out)
    } else {
        let done = std::sync::atomic::AtomicUsize::new(0);
        points
            .par_iter()
            .map(|c| {
                let rec = tune_condition(c, cfg, loop_cfg, seed, &[]);
                let n = done.fetch_add(1, std::sync::atomic::Ordering::Relaxed) + 1;
                if n % 50 == 0 || n == points.len() {
                    log::info!("grid point {}/{} done", n, points.len());
                }
                rec
            })
            .collect()
    }
}

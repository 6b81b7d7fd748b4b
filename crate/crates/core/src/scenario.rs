//! Closed-loop scenarios: reference paths, speed/wind/adhesion profiles,
//! the plant–controller loop, per-step logs and tracking metrics.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adapt::{OperatingCondition, ParameterAdapter};
use crate::error::{Error, Result};
use crate::mpc::{HildrethSettings, MpcConstraints, MpcController, MpcParams, DEFAULT_TS};
use crate::vehicle::{
    Disturbance, LateralState, LinearPlant, NonlinearPlant, PacejkaParams, Plant, VehicleParams, VX_MIN,
};

/// Lane width used by the lane-change path (m).
pub const LANE_WIDTH: f64 = 3.5;

/// Logistic slope giving a 1 %–99 % transition over two seconds.
const LANE_CHANGE_SLOPE: f64 = 4.59511985013459; // ln(99)

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Three lane transitions 0 → 3.5 → 7 → 3.5 m centred at 5, 12 and 19 s.
pub fn triple_lane_change_ref(t: f64) -> f64 {
    let k = LANE_CHANGE_SLOPE;
    LANE_WIDTH * (logistic(k * (t - 5.0)) + logistic(k * (t - 12.0)) - logistic(k * (t - 19.0)))
}

pub fn general_trajectory_ref(t: f64) -> f64 {
    use std::f64::consts::PI;
    4.0 * (0.08 * PI * t).sin() + 2.0 * (0.2 * PI * t).sin()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Reference {
    TripleLaneChange,
    GeneralTrajectory,
    Step { at: f64, magnitude: f64 },
    Constant { value: f64 },
    Negated { inner: Box<Reference> },
}

impl Reference {
    pub fn at(&self, t: f64) -> f64 {
        match self {
            Reference::TripleLaneChange => triple_lane_change_ref(t),
            Reference::GeneralTrajectory => general_trajectory_ref(t),
            Reference::Step { at, magnitude } => {
                if t >= *at {
                    *magnitude
                } else {
                    0.0
                }
            }
            Reference::Constant { value } => *value,
            Reference::Negated { inner } => -inner.at(t),
        }
    }
}

/// Scalar signal over time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Profile {
    Constant { value: f64 },
    /// Linear interpolation between `(t, value)` breakpoints, held outside.
    Linear { points: Vec<(f64, f64)> },
    /// Piecewise constant: `initial`, then each `(t, value)` holds from `t` on.
    Steps { initial: f64, changes: Vec<(f64, f64)> },
}

impl Profile {
    pub fn at(&self, t: f64) -> f64 {
        match self {
            Profile::Constant { value } => *value,
            Profile::Linear { points } => {
                let Some(first) = points.first() else { return 0.0 };
                if t <= first.0 {
                    return first.1;
                }
                for w in points.windows(2) {
                    let (t0, v0) = w[0];
                    let (t1, v1) = w[1];
                    if t <= t1 {
                        return if t1 > t0 { v0 + (v1 - v0) * (t - t0) / (t1 - t0) } else { v1 };
                    }
                }
                points[points.len() - 1].1
            }
            Profile::Steps { initial, changes } => changes
                .iter()
                .take_while(|(tc, _)| t >= *tc)
                .last()
                .map_or(*initial, |(_, v)| *v),
        }
    }

    pub fn negated(&self) -> Self {
        match self {
            Profile::Constant { value } => Profile::Constant { value: -value },
            Profile::Linear { points } => Profile::Linear {
                points: points.iter().map(|&(t, v)| (t, -v)).collect(),
            },
            Profile::Steps { initial, changes } => Profile::Steps {
                initial: -initial,
                changes: changes.iter().map(|&(t, v)| (t, -v)).collect(),
            },
        }
    }

    fn values(&self) -> Vec<f64> {
        match self {
            Profile::Constant { value } => vec![*value],
            Profile::Linear { points } => points.iter().map(|p| p.1).collect(),
            Profile::Steps { initial, changes } => std::iter::once(*initial).chain(changes.iter().map(|c| c.1)).collect(),
        }
    }

    fn is_time_ordered(&self) -> bool {
        let times: Vec<f64> = match self {
            Profile::Constant { .. } => return true,
            Profile::Linear { points } => points.iter().map(|p| p.0).collect(),
            Profile::Steps { changes, .. } => changes.iter().map(|p| p.0).collect(),
        };
        times.windows(2).all(|w| w[0] <= w[1]) && times.iter().all(|t| t.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControllerMode {
    Fixed,
    NnAdaptive,
    AnfisAdaptive,
}

impl ControllerMode {
    pub fn is_adaptive(self) -> bool {
        self != ControllerMode::Fixed
    }
}

impl std::fmt::Display for ControllerMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ControllerMode::Fixed => "fixed",
            ControllerMode::NnAdaptive => "nn-adaptive",
            ControllerMode::AnfisAdaptive => "anfis-adaptive",
        })
    }
}

impl std::str::FromStr for ControllerMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "fixed" => Ok(ControllerMode::Fixed),
            "nn-adaptive" => Ok(ControllerMode::NnAdaptive),
            "anfis-adaptive" => Ok(ControllerMode::AnfisAdaptive),
            other => Err(format!("unknown controller mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    /// Seconds.
    pub duration: f64,
    pub reference: Reference,
    /// Longitudinal speed (m/s).
    pub velocity: Profile,
    /// Lateral wind (m/s).
    pub wind: Profile,
    /// Road adhesion.
    pub mu: Profile,
    pub mode: ControllerMode,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return Err(Error::invalid("scenario.duration", "must be > 0"));
        }
        for (name, p) in [("scenario.velocity", &self.velocity), ("scenario.wind", &self.wind), ("scenario.mu", &self.mu)] {
            if !p.is_time_ordered() || p.values().iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(name, "breakpoints must be finite and time-ordered"));
            }
        }
        if self.velocity.values().iter().any(|&v| !(VX_MIN..=30.0).contains(&v)) {
            return Err(Error::invalid("scenario.velocity", format!("values must lie in [{VX_MIN}, 30]")));
        }
        if self.mu.values().iter().any(|&v| !(v > 0.0 && v <= 1.2)) {
            return Err(Error::invalid("scenario.mu", "values must lie in (0, 1.2]"));
        }
        Ok(())
    }

    pub fn with_mode(mut self, mode: ControllerMode) -> Self {
        self.mode = mode;
        self
    }

    /// Reference and wind negated, everything else unchanged.
    pub fn mirrored(&self) -> Self {
        Scenario {
            name: format!("{}-mirrored", self.name),
            reference: Reference::Negated {
                inner: Box::new(self.reference.clone()),
            },
            wind: self.wind.negated(),
            ..self.clone()
        }
    }

    /// Disturbed triple lane change: speed rise–hold–fall, two opposite
    /// wind gusts and an adhesion drop from 0.9 to 0.5.
    pub fn triple_lane_change() -> Self {
        Scenario {
            name: "triple-lane-change".into(),
            duration: 25.0,
            reference: Reference::TripleLaneChange,
            velocity: Profile::Linear {
                points: vec![(0.0, 5.5), (6.0, 10.0), (16.0, 10.0), (25.0, 6.5)],
            },
            wind: Profile::Steps {
                initial: 0.0,
                changes: vec![(7.0, 20.0), (10.0, 0.0), (15.0, -20.0), (17.0, 0.0)],
            },
            mu: Profile::Steps {
                initial: 0.9,
                changes: vec![(10.0, 0.5)],
            },
            mode: ControllerMode::Fixed,
        }
    }

    /// Disturbed sum-of-sinusoids path over 40 s.
    pub fn general_trajectory() -> Self {
        Scenario {
            name: "general-trajectory".into(),
            duration: 40.0,
            reference: Reference::GeneralTrajectory,
            velocity: Profile::Linear {
                points: vec![(0.0, 4.0), (10.0, 10.0), (28.0, 10.0), (40.0, 5.0)],
            },
            wind: Profile::Steps {
                initial: 0.0,
                changes: vec![(8.0, 20.0), (12.0, 0.0), (24.0, -20.0), (28.0, 0.0)],
            },
            mu: Profile::Steps {
                initial: 0.9,
                changes: vec![(16.0, 0.5), (32.0, 0.9)],
            },
            mode: ControllerMode::Fixed,
        }
    }

    /// Vehicle on a straight path with nothing to reject.
    pub fn regulation_zero() -> Self {
        Scenario {
            name: "regulation-zero".into(),
            duration: 10.0,
            reference: Reference::Constant { value: 0.0 },
            velocity: Profile::Constant { value: 15.0 },
            wind: Profile::Constant { value: 0.0 },
            mu: Profile::Constant { value: 0.9 },
            mode: ControllerMode::Fixed,
        }
    }

    /// Constant condition with a lateral step at `step_at` seconds.
    pub fn step(cond: &OperatingCondition, duration: f64, step_at: f64) -> Self {
        Scenario {
            name: "step".into(),
            duration,
            reference: Reference::Step {
                at: step_at,
                magnitude: cond.y_ref,
            },
            velocity: Profile::Constant { value: cond.vx },
            wind: Profile::Constant { value: cond.wind },
            mu: Profile::Constant { value: cond.mu },
            mode: ControllerMode::Fixed,
        }
    }

    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "triple-lane-change" => Some(Self::triple_lane_change()),
            "general-trajectory" => Some(Self::general_trajectory()),
            "regulation-zero" => Some(Self::regulation_zero()),
            _ => None,
        }
    }

    pub const BUILTIN_NAMES: [&'static str; 3] = ["triple-lane-change", "general-trajectory", "regulation-zero"];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlantKind {
    Nonlinear,
    Linear,
}

/// Everything about the loop that is not the scenario itself.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopConfig {
    pub vehicle: VehicleParams,
    pub tire: PacejkaParams,
    pub plant: PlantKind,
    pub ts: f64,
    pub constraints: MpcConstraints,
    pub solver: HildrethSettings,
    /// Knobs used in fixed mode and before the first adapter query.
    pub fixed_params: MpcParams,
    /// Query the adapter every this many steps.
    pub adapter_every: usize,
    /// Wall-clock timing of adapter queries; off keeps logs reproducible.
    pub measure_latency: bool,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            vehicle: VehicleParams::default(),
            tire: PacejkaParams::default(),
            plant: PlantKind::Nonlinear,
            ts: DEFAULT_TS,
            constraints: MpcConstraints::default(),
            solver: HildrethSettings::default(),
            fixed_params: MpcParams::default(),
            adapter_every: 1,
            measure_latency: false,
        }
    }
}

impl LoopConfig {
    fn build_plant(&self) -> Result<Plant> {
        Ok(match self.plant {
            PlantKind::Nonlinear => Plant::Nonlinear(NonlinearPlant::new(self.vehicle, self.tire)?),
            PlantKind::Linear => Plant::Linear(LinearPlant::new(self.vehicle)?),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimRecord {
    pub t: f64,
    pub y_ref: f64,
    pub y: f64,
    pub error: f64,
    pub u: f64,
    pub du: f64,
    pub psi_dot: f64,
    pub vx: f64,
    pub wind: f64,
    pub mu: f64,
    pub np: usize,
    pub nc: usize,
    pub q: f64,
    pub r: f64,
    pub qp_iterations: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SimLog {
    pub records: Vec<SimRecord>,
    /// Mean adapter query time (µs), when measured.
    pub adapter_latency_us: Option<f64>,
}

pub const SIMLOG_COLUMNS: [&str; 15] = [
    "t", "y_ref", "y", "error", "u", "du", "psi_dot", "vx", "wind", "mu", "np", "nc", "q", "r", "qp_iterations",
];

impl SimLog {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(SIMLOG_COLUMNS)?;
        for r in &self.records {
            let floats = [r.t, r.y_ref, r.y, r.error, r.u, r.du, r.psi_dot, r.vx, r.wind, r.mu];
            let mut row: Vec<String> = floats.iter().map(|&v| format_sig(v, 6)).collect();
            row.push(r.np.to_string());
            row.push(r.nc.to_string());
            row.push(format_sig(r.q, 6));
            row.push(format_sig(r.r, 6));
            row.push(r.qp_iterations.to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    /// Largest violation of the steering bounds over the log (0 when none).
    pub fn constraint_violation(&self, cons: &MpcConstraints) -> f64 {
        self.records
            .iter()
            .map(|r| (r.u.abs() - cons.u_max).max(r.du.abs() - cons.du_max).max(0.0))
            .fold(0.0, f64::max)
    }
}

/// Formats with `sig` significant digits, `%g` style.
pub fn format_sig(v: f64, sig: usize) -> String {
    if v == 0.0 || !v.is_finite() {
        return if v == 0.0 { "0".into() } else { v.to_string() };
    }
    let exp = v.abs().log10().floor() as i32;
    if exp < -5 || exp >= sig as i32 {
        let s = format!("{:.*e}", sig - 1, v);
        let (mantissa, e) = s.split_once('e').expect("exponent present");
        let mantissa = trim_zeros(mantissa);
        format!("{mantissa}e{e}")
    } else {
        let decimals = (sig as i32 - 1 - exp).max(0) as usize;
        trim_zeros(&format!("{v:.decimals$}")).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub fn compute_mse(log: &SimLog) -> Result<f64> {
    if log.records.is_empty() {
        return Err(Error::Empty("simulation log"));
    }
    Ok(log.records.iter().map(|r| r.error * r.error).sum::<f64>() / log.records.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub scenario: String,
    pub mode: ControllerMode,
    pub mse: f64,
    pub max_abs_error: f64,
    pub mean_qp_iterations: f64,
    pub adapter_latency_us: Option<f64>,
}

impl Summary {
    pub fn from_log(scenario: &Scenario, log: &SimLog) -> Result<Self> {
        let mse = compute_mse(log)?;
        let n = log.records.len() as f64;
        Ok(Summary {
            scenario: scenario.name.clone(),
            mode: scenario.mode,
            mse,
            max_abs_error: log.records.iter().map(|r| r.error.abs()).fold(0.0, f64::max),
            mean_qp_iterations: log.records.iter().map(|r| r.qp_iterations as f64).sum::<f64>() / n,
            adapter_latency_us: log.adapter_latency_us,
        })
    }
}

/// A run that stopped early; `log` holds every completed step.
#[derive(Debug)]
pub struct EpisodeFailure {
    pub log: SimLog,
    pub step: usize,
    pub error: Error,
}

impl std::fmt::Display for EpisodeFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "episode failed at step {}: {}", self.step, self.error)
    }
}

impl std::error::Error for EpisodeFailure {}

impl From<EpisodeFailure> for Error {
    fn from(f: EpisodeFailure) -> Self {
        Error::AtStep {
            step: f.step,
            source: Box::new(f.error),
        }
    }
}

/// Spun out or numerically blown up; a heading beyond ±90° from the path
/// is treated as lost control.
fn physically_diverged(s: &LateralState) -> bool {
    !s.is_finite() || s.vy.abs() > 50.0 || s.psi_dot.abs() > 10.0 || s.psi.abs() > std::f64::consts::FRAC_PI_2
}

/// Runs one episode.
///
/// Adaptive modes query `adapter` with the current speed, wind, adhesion
/// and reference setpoint and apply the returned knobs before the
/// controller step.
pub fn run_closed_loop(
    scenario: &Scenario,
    cfg: &LoopConfig,
    adapter: Option<&dyn ParameterAdapter>,
) -> std::result::Result<SimLog, EpisodeFailure> {
    run_episode(scenario, cfg, adapter, f64::INFINITY).map(|(log, _)| log)
}

/// Tracking MSE of an episode, giving up early once it provably exceeds
/// `cutoff`.
///
/// The result is exact whenever it is `<= cutoff`; otherwise it is some
/// value above `cutoff` (a lower bound on the true MSE), or `+∞` if the
/// episode failed.
pub fn episode_mse_bounded(scenario: &Scenario, cfg: &LoopConfig, adapter: Option<&dyn ParameterAdapter>, cutoff: f64) -> f64 {
    match run_episode(scenario, cfg, adapter, cutoff) {
        Ok((_, Some(bound))) => bound,
        Ok((log, None)) => compute_mse(&log).unwrap_or(f64::INFINITY),
        Err(f) => {
            log::debug!("episode failed at step {}: {}", f.step, f.error);
            f64::INFINITY
        }
    }
}

/// Runs until the end or until the squared-error sum guarantees an MSE
/// above `cutoff`, in which case that guaranteed bound is returned too.
fn run_episode(
    scenario: &Scenario,
    cfg: &LoopConfig,
    adapter: Option<&dyn ParameterAdapter>,
    cutoff: f64,
) -> std::result::Result<(SimLog, Option<f64>), EpisodeFailure> {
    let fail = |log: SimLog, step: usize, error: Error| EpisodeFailure { log, step, error };
    if let Err(e) = scenario.validate() {
        return Err(fail(SimLog::default(), 0, e));
    }
    let adapter = match (scenario.mode.is_adaptive(), adapter) {
        (true, None) => {
            return Err(fail(
                SimLog::default(),
                0,
                Error::invalid("adapter", format!("mode {} needs a trained adapter", scenario.mode)),
            ))
        }
        (true, Some(a)) => Some(a),
        (false, _) => None,
    };
    let plant = match cfg.build_plant() {
        Ok(p) => p,
        Err(e) => return Err(fail(SimLog::default(), 0, e)),
    };
    let mut ctl = match MpcController::new(cfg.vehicle, cfg.ts, cfg.constraints) {
        Ok(c) => c.with_solver_settings(cfg.solver),
        Err(e) => return Err(fail(SimLog::default(), 0, e)),
    };

    let steps = (scenario.duration / cfg.ts).round() as usize;
    let every = cfg.adapter_every.max(1);
    let mut log = SimLog {
        records: Vec::with_capacity(steps),
        adapter_latency_us: None,
    };
    let mut latency_total = 0.0;
    let mut queries = 0usize;
    let mut params = cfg.fixed_params;
    let mut state = LateralState::default();
    let mut window = Vec::new();
    let mut sse = 0.0;

    for k in 0..steps {
        let t = k as f64 * cfg.ts;
        let vx = scenario.velocity.at(t);
        let dist = Disturbance {
            wind_speed: scenario.wind.at(t),
            mu: scenario.mu.at(t),
        };
        let y_ref = scenario.reference.at(t);

        if let Some(a) = adapter {
            if k % every == 0 {
                let cond = OperatingCondition {
                    vx,
                    wind: dist.wind_speed,
                    mu: dist.mu,
                    y_ref,
                };
                let start = cfg.measure_latency.then(Instant::now);
                params = a.adapt(&cond);
                if let Some(s) = start {
                    latency_total += s.elapsed().as_secs_f64() * 1e6;
                }
                queries += 1;
            }
        }

        window.clear();
        window.extend((1..=params.np).map(|i| scenario.reference.at((t + i as f64 * cfg.ts).min(scenario.duration))));
        let out = match ctl.step(&state, vx, &window, &params) {
            Ok(o) => o,
            Err(e) => return Err(fail(log, k, e)),
        };
        log.records.push(SimRecord {
            t,
            y_ref,
            y: state.y,
            error: y_ref - state.y,
            u: out.u,
            du: out.du,
            psi_dot: state.psi_dot,
            vx,
            wind: dist.wind_speed,
            mu: dist.mu,
            np: params.np,
            nc: params.nc,
            q: params.q,
            r: params.r,
            qp_iterations: out.qp_iterations,
        });
        sse += (y_ref - state.y).powi(2);
        if sse / steps as f64 > cutoff {
            return Ok((log, Some(sse / steps as f64)));
        }
        state = match plant.step(&state, out.u, vx, &dist, cfg.ts) {
            Ok(s) if !physically_diverged(&s) => s,
            Ok(_) => return Err(fail(log, k, Error::Diverged { step: k })),
            Err(e) => return Err(fail(log, k, e)),
        };
    }
    if cfg.measure_latency && queries > 0 {
        log.adapter_latency_us = Some(latency_total / queries as f64);
    }
    Ok((log, None))
}

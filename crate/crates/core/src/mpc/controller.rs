use nalgebra::{DVector, Vector4};

use super::hildreth::{HildrethSettings, HildrethSolver};
use super::model::{augment, discretize};
use super::prediction::{build_prediction, PredictionMatrices};
use super::qp::{constraint_bounds, constraint_matrix, hessian, linear_term};
use super::{MpcConstraints, MpcParams};
use crate::error::{Error, Result};
use crate::vehicle::{clamp_speed, linear_lateral_matrices, LateralState, VehicleParams};

/// Speed change (m/s) that triggers a rebuild of the prediction model.
pub const DEFAULT_REBUILD_THRESHOLD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MpcOutput {
    /// Applied steering angle (rad).
    pub u: f64,
    /// Applied steering change, `u − u_prev` (rad).
    pub du: f64,
    pub qp_iterations: usize,
    pub qp_converged: bool,
}

#[derive(Debug, Clone)]
struct CachedModel {
    vx: f64,
    params: MpcParams,
    pred: PredictionMatrices,
    solver: HildrethSolver,
    /// Multipliers of the last solve, reused as the next starting point.
    lambda: Vec<f64>,
}

/// Receding-horizon lateral controller.
///
/// Owns the previous input and measurement (for the velocity-form state)
/// and caches the prediction model until the speed or the knobs change.
#[derive(Debug, Clone)]
pub struct MpcController {
    vehicle: VehicleParams,
    ts: f64,
    constraints: MpcConstraints,
    settings: HildrethSettings,
    rebuild_threshold: f64,
    cache: Option<CachedModel>,
    u_prev: f64,
    x_prev: Option<Vector4<f64>>,
    rebuilds: usize,
}

impl MpcController {
    pub fn new(vehicle: VehicleParams, ts: f64, constraints: MpcConstraints) -> Result<Self> {
        vehicle.validate()?;
        constraints.validate()?;
        if !(ts.is_finite() && ts > 0.0) {
            return Err(Error::invalid("ts", format!("must be > 0, got {ts}")));
        }
        Ok(Self {
            vehicle,
            ts,
            constraints,
            settings: HildrethSettings::default(),
            rebuild_threshold: DEFAULT_REBUILD_THRESHOLD,
            cache: None,
            u_prev: 0.0,
            x_prev: None,
            rebuilds: 0,
        })
    }

    pub fn with_solver_settings(mut self, settings: HildrethSettings) -> Self {
        self.settings = settings;
        self
    }

    pub fn with_rebuild_threshold(mut self, threshold: f64) -> Self {
        self.rebuild_threshold = threshold;
        self
    }

    pub fn u_prev(&self) -> f64 {
        self.u_prev
    }

    pub fn ts(&self) -> f64 {
        self.ts
    }

    pub fn constraints(&self) -> &MpcConstraints {
        &self.constraints
    }

    /// Number of prediction-model rebuilds so far.
    pub fn rebuilds(&self) -> usize {
        self.rebuilds
    }

    pub fn prediction(&self) -> Option<&PredictionMatrices> {
        self.cache.as_ref().map(|c| &c.pred)
    }

    pub fn reset(&mut self) {
        self.u_prev = 0.0;
        self.x_prev = None;
        if let Some(c) = self.cache.as_mut() {
            c.lambda.clear();
        }
    }

    fn refresh_model(&mut self, vx: f64, params: &MpcParams) -> Result<()> {
        let stale = match &self.cache {
            Some(c) => c.params != *params || (vx - c.vx).abs() > self.rebuild_threshold,
            None => true,
        };
        if !stale {
            return Ok(());
        }
        let css = linear_lateral_matrices(&self.vehicle, vx)?;
        let aug = augment(&discretize(&css, self.ts)?);
        let pred = build_prediction(&aug, params.np, params.nc)?;
        let solver = HildrethSolver::new(&hessian(&pred, params), &constraint_matrix(&pred, &self.constraints))?;
        self.cache = Some(CachedModel {
            vx,
            params: *params,
            pred,
            solver,
            lambda: Vec::new(),
        });
        self.rebuilds += 1;
        Ok(())
    }

    /// Computes and commits the next steering command.
    ///
    /// `reference` holds lateral setpoints for the next samples; it is
    /// truncated or padded (holding its last value) to the horizon.
    pub fn step(
        &mut self,
        measurement: &LateralState,
        vx: f64,
        reference: &[f64],
        params: &MpcParams,
    ) -> Result<MpcOutput> {
        params.validate()?;
        if !measurement.is_finite() || !vx.is_finite() {
            return Err(Error::Numeric("non-finite measurement".into()));
        }
        let Some(&last) = reference.last() else {
            return Err(Error::Empty("reference window"));
        };
        let vx = clamp_speed(vx);
        self.refresh_model(vx, params)?;
        let cache = self.cache.as_mut().expect("model cached above");

        let x = measurement.to_vector();
        let dx = self.x_prev.map_or_else(Vector4::zeros, |p| x - p);
        let x_aug = DVector::from_column_slice(&[dx[0], dx[1], dx[2], dx[3], measurement.y]);
        let window: Vec<f64> = (0..params.np).map(|i| reference.get(i).copied().unwrap_or(last)).collect();

        let free = &cache.pred.f * &x_aug;
        let k = linear_term(&cache.pred, &free, &window, params.q);
        let gamma = constraint_bounds(&cache.pred, &free, &self.constraints, self.u_prev);
        let sol = cache.solver.solve_from(&k, &gamma, self.settings, Some(&cache.lambda))?;
        cache.lambda.clone_from(&sol.report.lambda);
        if !sol.report.converged {
            log::debug!("Hildreth stopped at max_iter={}", self.settings.max_iter);
        }

        let (u, du) = apply_bounds(self.u_prev, sol.x[0], &self.constraints);
        self.u_prev = u;
        self.x_prev = Some(x);
        Ok(MpcOutput {
            u,
            du,
            qp_iterations: sol.report.iterations,
            qp_converged: sol.report.converged,
        })
    }
}

/// Clamps the first move and the resulting amplitude so that both bounds
/// hold exactly in floating point for the reported `u` and `u − u_prev`.
fn apply_bounds(u_prev: f64, du_opt: f64, cons: &MpcConstraints) -> (f64, f64) {
    let du = if du_opt.is_finite() {
        du_opt.clamp(-cons.du_max, cons.du_max)
    } else {
        0.0
    };
    let mut u = (u_prev + du).clamp(-cons.u_max, cons.u_max);
    while (u - u_prev).abs() > cons.du_max {
        u = if u > u_prev { u.next_down() } else { u.next_up() };
    }
    (u, u - u_prev)
}

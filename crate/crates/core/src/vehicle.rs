//! Lateral vehicle dynamics.
//!
//! Two models live here: the linear single-track model the controller
//! predicts with, and a nonlinear single-track plant with magic-formula
//! tires, a lateral wind force and adhesion scaling that serves as the
//! simulation truth.

use nalgebra::{Matrix1x4, Matrix4, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_positive, Error, Result};

/// Gravitational acceleration (m/s²).
pub const GRAVITY: f64 = 9.81;

/// Longitudinal speed floor; the linear model is singular at zero speed.
pub const VX_MIN: f64 = 1.0;

/// Air density (kg/m³) used by the wind force.
pub const AIR_DENSITY: f64 = 1.225;

/// Side force coefficient times side area (m²).
pub const SIDE_AREA_COEFF: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VehicleParams {
    /// Mass (kg).
    pub m: f64,
    /// Yaw inertia (kg·m²).
    pub iz: f64,
    /// CG to front axle (m).
    pub lf: f64,
    /// CG to rear axle (m).
    pub lr: f64,
    /// Front cornering stiffness per wheel (N/rad).
    pub cyf: f64,
    /// Rear cornering stiffness per wheel (N/rad).
    pub cyr: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            m: 1575.0,
            iz: 2875.0,
            lf: 1.2,
            lr: 1.6,
            cyf: 19000.0,
            cyr: 33000.0,
        }
    }
}

impl VehicleParams {
    pub fn validate(&self) -> Result<()> {
        ensure_positive("vehicle.m", self.m)?;
        ensure_positive("vehicle.iz", self.iz)?;
        ensure_positive("vehicle.lf", self.lf)?;
        ensure_positive("vehicle.lr", self.lr)?;
        ensure_positive("vehicle.cyf", self.cyf)?;
        ensure_positive("vehicle.cyr", self.cyr)?;
        Ok(())
    }

    pub fn wheelbase(&self) -> f64 {
        self.lf + self.lr
    }

    /// Static normal load on one front wheel (N).
    pub fn front_wheel_load(&self) -> f64 {
        self.m * GRAVITY * self.lr / (2.0 * self.wheelbase())
    }

    /// Static normal load on one rear wheel (N).
    pub fn rear_wheel_load(&self) -> f64 {
        self.m * GRAVITY * self.lf / (2.0 * self.wheelbase())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LateralState {
    /// Lateral velocity in the body frame (m/s).
    pub vy: f64,
    /// Heading angle (rad).
    pub psi: f64,
    /// Yaw rate (rad/s).
    pub psi_dot: f64,
    /// Inertial lateral position (m).
    pub y: f64,
}

impl LateralState {
    pub fn to_vector(&self) -> Vector4<f64> {
        Vector4::new(self.vy, self.psi, self.psi_dot, self.y)
    }

    pub fn from_vector(v: &Vector4<f64>) -> Self {
        Self {
            vy: v[0],
            psi: v[1],
            psi_dot: v[2],
            y: v[3],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.vy.is_finite() && self.psi.is_finite() && self.psi_dot.is_finite() && self.y.is_finite()
    }

    /// Mirror image about the path centreline.
    pub fn mirrored(&self) -> Self {
        Self {
            vy: -self.vy,
            psi: -self.psi,
            psi_dot: -self.psi_dot,
            y: -self.y,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousStateSpace {
    pub a: Matrix4<f64>,
    pub b: Vector4<f64>,
    pub c: Matrix1x4<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PacejkaParams {
    pub b_stiff: f64,
    pub c_shape: f64,
    pub e_curv: f64,
}

impl Default for PacejkaParams {
    fn default() -> Self {
        Self {
            b_stiff: 10.0,
            c_shape: 1.9,
            e_curv: 0.97,
        }
    }
}

impl PacejkaParams {
    pub fn validate(&self) -> Result<()> {
        ensure_positive("tire.b_stiff", self.b_stiff)?;
        if !(1.0..=2.0).contains(&self.c_shape) {
            return Err(Error::invalid("tire.c_shape", format!("must lie in [1, 2], got {}", self.c_shape)));
        }
        if !self.e_curv.is_finite() || self.e_curv > 1.0 {
            return Err(Error::invalid("tire.e_curv", format!("must be <= 1, got {}", self.e_curv)));
        }
        Ok(())
    }

    /// Small-slip cornering stiffness B·C·D of one tire (N/rad).
    pub fn cornering_stiffness(&self, fz: f64, mu: f64) -> f64 {
        mu * fz * self.b_stiff * self.c_shape
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Disturbance {
    /// Lateral wind speed (m/s), positive towards +y.
    pub wind_speed: f64,
    /// Road adhesion coefficient.
    pub mu: f64,
}

impl Default for Disturbance {
    fn default() -> Self {
        Self {
            wind_speed: 0.0,
            mu: 0.9,
        }
    }
}

impl Disturbance {
    pub fn validate(&self) -> Result<()> {
        if !self.wind_speed.is_finite() {
            return Err(Error::invalid("disturbance.wind_speed", "must be finite"));
        }
        if !(self.mu > 0.0 && self.mu <= 1.2) {
            return Err(Error::invalid("disturbance.mu", format!("must lie in (0, 1.2], got {}", self.mu)));
        }
        Ok(())
    }

    /// Lateral wind force applied at the CG (N).
    pub fn wind_force(&self) -> f64 {
        0.5 * AIR_DENSITY * SIDE_AREA_COEFF * self.wind_speed * self.wind_speed.abs()
    }
}

/// Applies the speed floor, warning when it bites.
pub fn clamp_speed(vx: f64) -> f64 {
    if vx < VX_MIN {
        log::warn!("longitudinal speed {vx} below floor, clamped to {VX_MIN}");
        VX_MIN
    } else {
        vx
    }
}

/// Continuous linear lateral model at longitudinal speed `vx`.
pub fn linear_lateral_matrices(params: &VehicleParams, vx: f64) -> Result<ContinuousStateSpace> {
    params.validate()?;
    if !vx.is_finite() {
        return Err(Error::invalid("vx", "must be finite"));
    }
    let vx = clamp_speed(vx);
    let VehicleParams { m, iz, lf, lr, cyf, cyr } = *params;

    #[rustfmt::skip]
    let a = Matrix4::new(
        -2.0 * (cyf + cyr) / (m * vx), 0.0, -vx - 2.0 * (cyf * lf - cyr * lr) / (m * vx), 0.0,
        0.0, 0.0, 1.0, 0.0,
        -2.0 * (cyf * lf - cyr * lr) / (iz * vx), 0.0, -2.0 * (cyf * lf * lf + cyr * lr * lr) / (iz * vx), 0.0,
        1.0, vx, 0.0, 0.0,
    );
    let b = Vector4::new(2.0 * cyf / m, 0.0, 2.0 * cyf * lf / iz, 0.0);
    let c = Matrix1x4::new(0.0, 0.0, 0.0, 1.0);
    Ok(ContinuousStateSpace { a, b, c })
}

/// Front and rear slip angles (rad). The rear wheel does not steer.
pub fn tire_slip_angles(state: &LateralState, vx: f64, delta_f: f64, params: &VehicleParams) -> (f64, f64) {
    let alpha_f = delta_f - ((state.vy + params.lf * state.psi_dot) / vx).atan();
    let alpha_r = -((state.vy - params.lr * state.psi_dot) / vx).atan();
    (alpha_f, alpha_r)
}

/// Magic-formula lateral force of one tire (N).
pub fn pacejka_lateral_force(alpha: f64, fz: f64, mu: f64, pj: &PacejkaParams) -> f64 {
    let ba = pj.b_stiff * alpha;
    mu * fz * (pj.c_shape * (ba - pj.e_curv * (ba - ba.atan())).atan()).sin()
}

/// Nonlinear single-track plant used as simulation truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NonlinearPlant {
    pub vehicle: VehicleParams,
    pub tire: PacejkaParams,
}

impl NonlinearPlant {
    pub fn new(vehicle: VehicleParams, tire: PacejkaParams) -> Result<Self> {
        vehicle.validate()?;
        tire.validate()?;
        Ok(Self { vehicle, tire })
    }

    fn derivative(&self, x: &Vector4<f64>, delta_f: f64, vx: f64, dist: &Disturbance) -> Vector4<f64> {
        let p = &self.vehicle;
        let s = LateralState::from_vector(x);
        let (alpha_f, alpha_r) = tire_slip_angles(&s, vx, delta_f, p);
        let fyf = pacejka_lateral_force(alpha_f, p.front_wheel_load(), dist.mu, &self.tire);
        let fyr = pacejka_lateral_force(alpha_r, p.rear_wheel_load(), dist.mu, &self.tire);
        let vy_dot = (2.0 * fyf + 2.0 * fyr + dist.wind_force()) / p.m - vx * s.psi_dot;
        let r_dot = (2.0 * p.lf * fyf - 2.0 * p.lr * fyr) / p.iz;
        let y_dot = vx * s.psi.sin() + s.vy * s.psi.cos();
        Vector4::new(vy_dot, s.psi_dot, r_dot, y_dot)
    }

    /// Advances the plant by `dt` with one RK4 step.
    pub fn step(&self, state: &LateralState, delta_f: f64, vx: f64, dist: &Disturbance, dt: f64) -> Result<LateralState> {
        check_step_inputs(state, dt)?;
        let vx = clamp_speed(vx);
        let f = |x: &Vector4<f64>| self.derivative(x, delta_f, vx, dist);
        let next = rk4(&state.to_vector(), dt, f);
        let out = LateralState::from_vector(&next);
        if !out.is_finite() {
            return Err(Error::Numeric("plant state became non-finite".into()));
        }
        Ok(out)
    }
}

/// Linear single-track model (small slip, small heading) with the wind
/// force entering the lateral balance. Useful as an idealised plant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearPlant {
    pub vehicle: VehicleParams,
}

impl LinearPlant {
    pub fn new(vehicle: VehicleParams) -> Result<Self> {
        vehicle.validate()?;
        Ok(Self { vehicle })
    }

    pub fn step(&self, state: &LateralState, delta_f: f64, vx: f64, dist: &Disturbance, dt: f64) -> Result<LateralState> {
        check_step_inputs(state, dt)?;
        let css = linear_lateral_matrices(&self.vehicle, vx)?;
        let wind = Vector4::new(dist.wind_force() / self.vehicle.m, 0.0, 0.0, 0.0);
        let f = |x: &Vector4<f64>| css.a * x + css.b * delta_f + wind;
        let out = LateralState::from_vector(&rk4(&state.to_vector(), dt, f));
        if !out.is_finite() {
            return Err(Error::Numeric("plant state became non-finite".into()));
        }
        Ok(out)
    }
}

/// Simulation truth used by closed-loop runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Plant {
    Nonlinear(NonlinearPlant),
    Linear(LinearPlant),
}

impl Plant {
    pub fn step(&self, state: &LateralState, delta_f: f64, vx: f64, dist: &Disturbance, dt: f64) -> Result<LateralState> {
        match self {
            Plant::Nonlinear(p) => p.step(state, delta_f, vx, dist, dt),
            Plant::Linear(p) => p.step(state, delta_f, vx, dist, dt),
        }
    }
}

/// One step of the default nonlinear plant.
pub fn plant_step(
    plant: &NonlinearPlant,
    state: &LateralState,
    delta_f: f64,
    vx: f64,
    dist: &Disturbance,
    dt: f64,
) -> Result<LateralState> {
    plant.step(state, delta_f, vx, dist, dt)
}

fn check_step_inputs(state: &LateralState, dt: f64) -> Result<()> {
    if !(dt > 0.0 && dt <= 0.1) {
        return Err(Error::invalid("dt", format!("must lie in (0, 0.1], got {dt}")));
    }
    if !state.is_finite() {
        return Err(Error::Numeric("non-finite plant state (diverged simulation)".into()));
    }
    Ok(())
}

fn rk4(x: &Vector4<f64>, dt: f64, f: impl Fn(&Vector4<f64>) -> Vector4<f64>) -> Vector4<f64> {
    let k1 = f(x);
    let k2 = f(&(x + k1 * (0.5 * dt)));
    let k3 = f(&(x + k2 * (0.5 * dt)));
    let k4 = f(&(x + k3 * dt));
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
}

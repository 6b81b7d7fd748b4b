//! Shared pieces of online knob adaptation: the operating condition an
//! adapter observes, the admissible knob box, and the rounding/clamping
//! rules that turn raw regressor outputs into valid [`MpcParams`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mpc::MpcParams;

/// Conditions an adapter is queried with; also the tuning grid axes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingCondition {
    /// Longitudinal speed (m/s).
    pub vx: f64,
    /// Lateral wind speed (m/s).
    pub wind: f64,
    /// Road adhesion coefficient.
    pub mu: f64,
    /// Lateral reference (m).
    pub y_ref: f64,
}

impl OperatingCondition {
    pub fn to_array(&self) -> [f64; 4] {
        [self.vx, self.wind, self.mu, self.y_ref]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self {
            vx: a[0],
            wind: a[1],
            mu: a[2],
            y_ref: a[3],
        }
    }

    /// Checks the ranges covered by the tuning grid.
    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("condition.vx", self.vx, 3.0, 27.0),
            ("condition.wind", self.wind, -30.0, 30.0),
            ("condition.mu", self.mu, 0.5, 0.9),
            ("condition.y_ref", self.y_ref, -15.0, 15.0),
        ];
        for (name, v, lo, hi) in checks {
            if !(lo..=hi).contains(&v) {
                return Err(Error::invalid(name, format!("{v} outside [{lo}, {hi}]")));
            }
        }
        Ok(())
    }
}

/// Search box for `(np, nc, q, r)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KnobBounds {
    pub np: (f64, f64),
    pub nc: (f64, f64),
    pub q: (f64, f64),
    pub r: (f64, f64),
}

impl Default for KnobBounds {
    fn default() -> Self {
        Self {
            np: (10.0, 60.0),
            nc: (2.0, 15.0),
            q: (0.1, 100.0),
            r: (0.001, 1.0),
        }
    }
}

impl KnobBounds {
    pub fn as_vec(&self) -> Vec<(f64, f64)> {
        vec![self.np, self.nc, self.q, self.r]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [
            ("bounds.np", self.np),
            ("bounds.nc", self.nc),
            ("bounds.q", self.q),
            ("bounds.r", self.r),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::invalid(name, format!("need lo < hi, got [{lo}, {hi}]")));
            }
        }
        if self.nc.0 < 1.0 || self.q.0 <= 0.0 || self.r.0 <= 0.0 {
            return Err(Error::invalid("bounds", "nc >= 1 and q, r > 0 required"));
        }
        Ok(())
    }

    /// Rounds the horizons and clamps everything into the box, with `nc ≤ np`.
    pub fn snap(&self, raw: [f64; 4]) -> MpcParams {
        let finite_or = |v: f64, fallback: f64| if v.is_finite() { v } else { fallback };
        let np = finite_or(raw[0], self.np.0).round().clamp(self.np.0.ceil(), self.np.1.floor()) as usize;
        let nc = finite_or(raw[1], self.nc.0)
            .round()
            .clamp(self.nc.0.ceil(), self.nc.1.floor())
            .min(np as f64) as usize;
        MpcParams {
            np,
            nc: nc.max(1),
            q: finite_or(raw[2], self.q.0).clamp(self.q.0, self.q.1),
            r: finite_or(raw[3], self.r.0).clamp(self.r.0, self.r.1),
        }
    }

    /// Moves `(q, r)` along their ratio line to the point closest (in log
    /// space) to the box's geometric centre, staying inside the box.
    ///
    /// The MPC minimiser depends on `q` and `r` only through `r/q`, so the
    /// result describes the same controller as the input.
    pub fn canonical_weights(&self, q: f64, r: f64) -> (f64, f64) {
        let log_ratio = q.ln() - r.ln();
        let centre = 0.5 * ((self.q.0 * self.q.1).ln() + (self.r.0 * self.r.1).ln());
        // ln q' + ln r' = centre, ln q' - ln r' = log_ratio
        let mut lq = 0.5 * (centre + log_ratio);
        let lq_lo = self.q.0.ln().max(self.r.0.ln() + log_ratio);
        let lq_hi = self.q.1.ln().min(self.r.1.ln() + log_ratio);
        if lq_lo <= lq_hi {
            lq = lq.clamp(lq_lo, lq_hi);
            (lq.exp(), (lq - log_ratio).exp())
        } else {
            (q, r)
        }
    }
}

/// Maps an operating condition to MPC knobs.
pub trait ParameterAdapter: Send + Sync {
    fn adapt(&self, cond: &OperatingCondition) -> MpcParams;

    fn name(&self) -> &str;
}

/// Min-max scaling of one feature to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinMax {
    pub min: f64,
    pub max: f64,
}

impl MinMax {
    pub fn fit(values: impl IntoIterator<Item = f64>) -> Self {
        let (min, max) = values
            .into_iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        Self { min, max }
    }

    fn span(&self) -> f64 {
        let s = self.max - self.min;
        if s > 0.0 {
            s
        } else {
            1.0
        }
    }

    /// Scales and clamps into `[0, 1]`.
    pub fn normalize(&self, v: f64) -> f64 {
        ((v - self.min) / self.span()).clamp(0.0, 1.0)
    }

    pub fn normalize_unclamped(&self, v: f64) -> f64 {
        (v - self.min) / self.span()
    }

    pub fn denormalize(&self, v: f64) -> f64 {
        self.min + v * self.span()
    }
}

/// Which knob a single-output regressor predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Knob {
    Np,
    Nc,
    Q,
    R,
}

impl Knob {
    pub const ALL: [Knob; 4] = [Knob::Np, Knob::Nc, Knob::Q, Knob::R];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn of(self, p: &MpcParams) -> f64 {
        match self {
            Knob::Np => p.np as f64,
            Knob::Nc => p.nc as f64,
            Knob::Q => p.q,
            Knob::R => p.r,
        }
    }
}

impl std::fmt::Display for Knob {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Knob::Np => "np",
            Knob::Nc => "nc",
            Knob::Q => "q",
            Knob::R => "r",
        })
    }
}

//! Independent reference implementations used by the integration tests
//! and the acceptance run.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use lateral_mpc::mpc::QpProblem;

/// Random strictly convex QP with a known feasible point. Some instances
/// carry two-sided bounds (a row and its exact negative).
pub fn random_feasible_qp(rng: &mut impl Rng) -> QpProblem {
    let n = rng.random_range(1..=6);
    let m = rng.random_range(1..=10);
    let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let e = a.tr_mul(&a) + DMatrix::identity(n, n) * rng.random_range(0.1..2.0);
    let k = DVector::from_fn(n, |_, _| rng.random_range(-5.0..5.0));
    let x0 = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    let mut rows: Vec<DVector<f64>> = Vec::with_capacity(m);
    let mut gamma = Vec::with_capacity(m);
    while rows.len() < m {
        let row = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let slack = rng.random_range(0.0..0.5);
        let two_sided = rows.len() + 2 <= m && rng.random_bool(0.3);
        gamma.push(row.dot(&x0) + slack);
        if two_sided {
            gamma.push(-row.dot(&x0) + rng.random_range(0.0..0.5));
            rows.push(row.clone());
            rows.push(-row);
        } else {
            rows.push(row);
        }
    }
    let mm = DMatrix::from_fn(m, n, |i, j| rows[i][j]);
    QpProblem {
        e,
        k,
        m: mm,
        gamma: DVector::from_vec(gamma),
    }
}

pub fn objective(qp: &QpProblem, x: &DVector<f64>) -> f64 {
    0.5 * x.dot(&(&qp.e * x)) + x.dot(&qp.k)
}

/// Exact minimiser by trying every active set: solves the equality
/// constrained KKT system for each subset and keeps the best point that is
/// primal feasible with non-negative multipliers.
pub fn enumerate_active_sets(qp: &QpProblem) -> DVector<f64> {
    let n = qp.e.nrows();
    let m = qp.m.nrows();
    let mut best: Option<(f64, DVector<f64>)> = None;
    for mask in 0u32..(1 << m) {
        let act: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
        if act.len() > n {
            continue;
        }
        let s = act.len();
        let mut kkt = DMatrix::zeros(n + s, n + s);
        kkt.view_mut((0, 0), (n, n)).copy_from(&qp.e);
        let mut rhs = DVector::zeros(n + s);
        rhs.rows_mut(0, n).copy_from(&(-&qp.k));
        for (r, &i) in act.iter().enumerate() {
            for j in 0..n {
                kkt[(n + r, j)] = qp.m[(i, j)];
                kkt[(j, n + r)] = qp.m[(i, j)];
            }
            rhs[n + r] = qp.gamma[i];
        }
        let lu = kkt.full_piv_lu();
        if !lu.is_invertible() {
            continue;
        }
        let Some(sol) = lu.solve(&rhs) else { continue };
        let x = sol.rows(0, n).into_owned();
        if sol.rows(n, s).iter().any(|&l| l < -1e-10) {
            continue;
        }
        if (&qp.m * &x - &qp.gamma).iter().any(|&v| v > 1e-10) {
            continue;
        }
        let f = objective(qp, &x);
        if best.as_ref().is_none_or(|(b, _)| f < *b) {
            best = Some((f, x));
        }
    }
    best.expect("feasible problem has a minimiser").1
}

#[derive(Debug, Clone, Copy)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal: f64,
    pub dual: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.primal).max(self.dual).max(self.complementarity)
    }
}

pub fn kkt_residuals(qp: &QpProblem, x: &DVector<f64>, lambda: &[f64]) -> KktResiduals {
    let l = DVector::from_column_slice(lambda);
    let grad = &qp.e * x + &qp.k + qp.m.tr_mul(&l);
    let slack = &qp.gamma - &qp.m * x;
    KktResiduals {
        stationarity: grad.amax(),
        primal: slack.iter().map(|s| (-s).max(0.0)).fold(0.0, f64::max),
        dual: lambda.iter().map(|l| (-l).max(0.0)).fold(0.0, f64::max),
        complementarity: l.iter().zip(slack.iter()).map(|(l, s)| (l * s).abs()).fold(0.0, f64::max),
    }
}

/// Textbook recursive least squares with forgetting, started from
/// `θ = 0`, `P = p0·I`.
pub fn recursive_least_squares(rows: &[Vec<f64>], ts: &[f64], forgetting: f64, p0: f64) -> DVector<f64> {
    let n = rows[0].len();
    let mut theta = DVector::zeros(n);
    let mut p = DMatrix::identity(n, n) * p0;
    for (a, &t) in rows.iter().zip(ts) {
        let a = DVector::from_column_slice(a);
        let pa = &p * &a;
        let denom = forgetting + a.dot(&pa);
        let gain = &pa / denom;
        let err = t - a.dot(&theta);
        theta += &gain * err;
        p = (&p - &gain * pa.transpose()) / forgetting;
    }
    theta
}

/// Ordinary least squares through an SVD of the design matrix.
pub fn least_squares(rows: &[Vec<f64>], ts: &[f64]) -> DVector<f64> {
    let a = DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j]);
    let y = DVector::from_column_slice(ts);
    a.svd(true, true).solve(&y, 1e-14).expect("svd solve")
}

/// Central difference of `f` along coordinate `i` of `theta`.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, theta: &[f64], i: usize, h: f64) -> f64 {
    let mut p = theta.to_vec();
    p[i] += h;
    let up = f(&p);
    p[i] -= 2.0 * h;
    let down = f(&p);
    (up - down) / (2.0 * h)
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

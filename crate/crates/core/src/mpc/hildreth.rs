//! Hildreth's dual coordinate-ascent method for
//! `min ½xᵀEx + xᵀK  s.t.  Mx ≤ γ` with `E` positive definite.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::qp::QpProblem;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HildrethSettings {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for HildrethSettings {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 200 }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ActiveSetReport {
    /// Sweeps over the constraint set; zero when the unconstrained minimum was feasible.
    pub iterations: usize,
    /// False when `max_iter` was reached before the dual change fell below `tol`.
    pub converged: bool,
    /// Indices of constraints with a strictly positive multiplier.
    pub active: Vec<usize>,
    pub lambda: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub report: ActiveSetReport,
}

/// Precomputed pieces that depend only on `E` and `M`, reusable when only
/// `K` and `γ` change between solves.
#[derive(Debug, Clone)]
pub struct HildrethSolver {
    chol: Cholesky<f64, Dyn>,
    m: DMatrix<f64>,
    /// `E⁻¹Mᵀ`
    einv_mt: DMatrix<f64>,
    /// `M E⁻¹ Mᵀ`, symmetrised
    h: DMatrix<f64>,
    h_diag: Vec<f64>,
    /// Sweep units: single rows, or pairs of rows that are exact negatives
    /// of each other (two-sided bounds).
    units: Vec<(usize, Option<usize>)>,
}

impl HildrethSolver {
    pub fn new(e: &DMatrix<f64>, m: &DMatrix<f64>) -> Result<Self> {
        if !e.is_square() || m.ncols() != e.nrows() {
            return Err(Error::Dimension(format!(
                "E is {}x{}, M is {}x{}",
                e.nrows(),
                e.ncols(),
                m.nrows(),
                m.ncols()
            )));
        }
        let chol = Cholesky::new(e.clone())
            .ok_or_else(|| Error::Numeric("QP Hessian is not positive definite".into()))?;
        let einv_mt = chol.solve(&m.transpose());
        let h = m * &einv_mt;
        let h = (&h + h.transpose()) * 0.5;
        let h_diag = h.diagonal().iter().copied().collect();
        Ok(Self {
            chol,
            m: m.clone(),
            einv_mt,
            h,
            h_diag,
            units: pair_rows(m),
        })
    }

    pub fn n_constraints(&self) -> usize {
        self.m.nrows()
    }

    pub fn solve(&self, k: &DVector<f64>, gamma: &DVector<f64>, settings: HildrethSettings) -> Result<QpSolution> {
        self.solve_from(k, gamma, settings, None)
    }

    /// Starts the dual sweeps from `warm` (e.g. the previous control step's
    /// multipliers) instead of zero; negative entries are clipped.
    pub fn solve_from(
        &self,
        k: &DVector<f64>,
        gamma: &DVector<f64>,
        settings: HildrethSettings,
        warm: Option<&[f64]>,
    ) -> Result<QpSolution> {
        let ncon = self.m.nrows();
        if k.len() != self.chol.l_dirty().nrows() || gamma.len() != ncon {
            return Err(Error::Dimension(format!(
                "K has {} entries, γ has {} for a {}x{} constraint matrix",
                k.len(),
                gamma.len(),
                ncon,
                self.m.ncols()
            )));
        }
        let x_unc = -self.chol.solve(k);
        let slack = gamma - &self.m * &x_unc;
        if slack.iter().all(|&s| s >= 0.0) {
            return Ok(QpSolution {
                x: x_unc,
                report: ActiveSetReport {
                    iterations: 0,
                    converged: true,
                    active: Vec::new(),
                    lambda: vec![0.0; ncon],
                },
            });
        }

        // dual: min ½λᵀHλ + λᵀd, λ ≥ 0 with d = γ + M E⁻¹ K.
        // `grad` tracks d + Hλ and is patched only when a multiplier moves.
        let h = self.h.as_slice();
        let mut grad: Vec<f64> = slack.iter().copied().collect();
        let mut lambda = vec![0.0; ncon];
        if let Some(w) = warm.filter(|w| w.len() == ncon) {
            for (i, &l) in w.iter().enumerate() {
                if l > 0.0 && l.is_finite() {
                    lambda[i] = l;
                }
            }
            // pairs enter as one combined row, as in the primal recovery below
            for &(a, b) in &self.units {
                let coef = b.map_or(lambda[a], |b| lambda[a] - lambda[b]);
                if coef != 0.0 {
                    for (g, ha) in grad.iter_mut().zip(&h[a * ncon..(a + 1) * ncon]) {
                        *g += coef * ha;
                    }
                }
            }
        }
        let mut iterations = 0;
        let mut converged = false;
        while iterations < settings.max_iter {
            iterations += 1;
            let mut max_change = 0.0f64;
            for &(a, b) in &self.units {
                // visit the row with the larger multiplier (then the smaller
                // gradient) first, so mirrored problems give mirrored iterates
                let (first, second) = match b {
                    Some(b) if (lambda[b], -grad[b]) > (lambda[a], -grad[a]) => (b, Some(a)),
                    _ => (a, b),
                };
                for i in std::iter::once(first).chain(second) {
                    let hii = self.h_diag[i];
                    if hii <= 0.0 {
                        continue;
                    }
                    let new = (lambda[i] - grad[i] / hii).max(0.0);
                    let delta = new - lambda[i];
                    if delta != 0.0 {
                        // H is symmetric, so column i doubles as row i
                        for (g, hj) in grad.iter_mut().zip(&h[i * ncon..(i + 1) * ncon]) {
                            *g += delta * hj;
                        }
                        lambda[i] = new;
                        max_change = max_change.max(delta.abs());
                    }
                }
            }
            if max_change < settings.tol {
                converged = true;
                break;
            }
        }
        if !lambda.iter().all(|l| l.is_finite()) {
            return Err(Error::Numeric("Hildreth multipliers became non-finite".into()));
        }
        // combine each two-sided pair before summing so that mirrored
        // problems round identically
        let mut x = x_unc;
        for &(a, b) in &self.units {
            let coef = match b {
                Some(b) => lambda[a] - lambda[b],
                None => lambda[a],
            };
            if coef != 0.0 {
                x.axpy(-coef, &self.einv_mt.column(a), 1.0);
            }
        }
        let active = lambda
            .iter()
            .enumerate()
            .filter(|(_, &l)| l > 0.0)
            .map(|(i, _)| i)
            .collect();
        Ok(QpSolution {
            x,
            report: ActiveSetReport {
                iterations,
                converged,
                active,
                lambda,
            },
        })
    }
}

/// Groups each row with a later row equal to its exact negation.
fn pair_rows(m: &DMatrix<f64>) -> Vec<(usize, Option<usize>)> {
    let n = m.nrows();
    let mut taken = vec![false; n];
    let mut units = Vec::with_capacity(n);
    for i in 0..n {
        if taken[i] {
            continue;
        }
        let partner = (i + 1..n).find(|&j| !taken[j] && m.row(i).iter().zip(m.row(j).iter()).all(|(a, b)| *a == -*b));
        if let Some(j) = partner {
            taken[j] = true;
        }
        units.push((i, partner));
    }
    units
}

pub fn hildreth_solve(qp: &QpProblem, tol: f64, max_iter: usize) -> Result<QpSolution> {
    HildrethSolver::new(&qp.e, &qp.m)?.solve(&qp.k, &qp.gamma, HildrethSettings { tol, max_iter })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn qp(e: &[f64], k: &[f64], m: &[f64], gamma: &[f64]) -> QpProblem {
        let n = k.len();
        QpProblem {
            e: DMatrix::from_row_slice(n, n, e),
            k: DVector::from_column_slice(k),
            m: DMatrix::from_row_slice(gamma.len(), n, m),
            gamma: DVector::from_column_slice(gamma),
        }
    }

    #[test]
    fn unconstrained_minimum() {
        let p = qp(&[2.0, 0.0, 0.0, 2.0], &[-2.0, -2.0], &[], &[]);
        let s = hildreth_solve(&p, 1e-8, 200).unwrap();
        assert!((s.x[0] - 1.0).abs() < 1e-14 && (s.x[1] - 1.0).abs() < 1e-14);
        assert_eq!(s.report.iterations, 0);
    }

    #[test]
    fn single_active_bound() {
        let p = qp(&[2.0], &[-2.0], &[1.0], &[0.5]);
        let s = hildreth_solve(&p, 1e-10, 200).unwrap();
        assert!((s.x[0] - 0.5).abs() < 1e-12);
        assert_eq!(s.report.active, vec![0]);
        assert!(s.report.converged);
    }

    #[test]
    fn inactive_constraint_keeps_unconstrained_solution() {
        let p = qp(&[2.0, 0.0, 0.0, 2.0], &[-2.0, -2.0], &[1.0, 1.0], &[5.0]);
        let s = hildreth_solve(&p, 1e-10, 200).unwrap();
        assert!((s.x[0] - 1.0).abs() < 1e-14 && (s.x[1] - 1.0).abs() < 1e-14);
        assert!(s.report.active.is_empty());
    }

    #[test]
    fn warm_start_reaches_same_solution() {
        let p = qp(
            &[4.0, 1.0, 1.0, 3.0],
            &[-8.0, -9.0],
            &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0],
            &[1.0, 1.5, 2.0],
        );
        let settings = HildrethSettings { tol: 1e-12, max_iter: 10_000 };
        let solver = HildrethSolver::new(&p.e, &p.m).unwrap();
        let cold = solver.solve(&p.k, &p.gamma, settings).unwrap();
        let warm = solver.solve_from(&p.k, &p.gamma, settings, Some(&cold.report.lambda)).unwrap();
        assert!((cold.x.clone() - warm.x).amax() < 1e-10);
        assert!(warm.report.iterations <= 2);
    }

    #[test]
    fn two_sided_rows_are_paired() {
        let m = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 0.0, 1.0, -1.0, 0.0, 1.0, 1.0]);
        assert_eq!(pair_rows(&m), vec![(0, Some(2)), (1, None), (3, None)]);
    }

    #[test]
    fn mirrored_problem_gives_mirrored_solution() {
        let e = [3.0, 1.0, 1.0, 2.0];
        let m = [1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0, 1.0, 1.0, -1.0, -1.0];
        let p = qp(&e, &[-7.0, 3.0], &m, &[0.5, 0.5, 0.4, 0.4, 0.6, 0.6]);
        let mirror = qp(&e, &[7.0, -3.0], &m, &[0.5, 0.5, 0.4, 0.4, 0.6, 0.6]);
        // capped early so both runs stop mid-way
        let a = hildreth_solve(&p, 1e-15, 3).unwrap();
        let b = hildreth_solve(&mirror, 1e-15, 3).unwrap();
        assert_eq!((a.x[0], a.x[1]), (-b.x[0], -b.x[1]));
    }

    #[test]
    fn mirrored_warm_start_stays_mirrored() {
        let e = DMatrix::from_row_slice(2, 2, &[3.0, 1.1, 1.1, 2.0]);
        let m = DMatrix::from_row_slice(6, 2, &[1.0, 0.0, 1.0, 1.0, -1.0, 0.0, -1.0, -1.0, 0.0, 1.0, 0.0, -1.0]);
        let solver = HildrethSolver::new(&e, &m).unwrap();
        let settings = HildrethSettings { tol: 1e-12, max_iter: 7 };
        let gamma = |s: f64| DVector::from_column_slice(&[0.5 - 0.1 * s, 0.6 - 0.3 * s, 0.5 + 0.1 * s, 0.6 + 0.3 * s, 0.4, 0.4]);
        let k = DVector::from_column_slice(&[-7.3, 2.9]);
        let prev_a = solver.solve(&(&k * 0.8), &gamma(0.7), settings).unwrap().report.lambda;
        let prev_b = solver.solve(&(&k * -0.8), &gamma(-0.7), settings).unwrap().report.lambda;
        let a = solver.solve_from(&k, &gamma(1.0), settings, Some(&prev_a)).unwrap();
        let b = solver.solve_from(&-&k, &gamma(-1.0), settings, Some(&prev_b)).unwrap();
        assert_eq!((a.x[0], a.x[1]), (-b.x[0], -b.x[1]));
    }

    #[test]
    fn non_pd_hessian_is_an_error() {
        let p = qp(&[1.0, 0.0, 0.0, -1.0], &[0.0, 0.0], &[], &[]);
        assert!(matches!(hildreth_solve(&p, 1e-8, 10), Err(Error::Numeric(_))));
    }

    #[test]
    fn iteration_cap_is_flagged_not_fatal() {
        // coupled constraints converge slowly
        let p = qp(
            &[1.0, 0.99, 0.99, 1.0],
            &[-10.0, -10.0],
            &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0],
            &[1.0, 1.0, 1.5],
        );
        let s = hildreth_solve(&p, 1e-14, 2).unwrap();
        assert!(!s.report.converged);
        assert_eq!(s.report.iterations, 2);
    }
}

//! Dense, strictly convex QPs with box constraints:
//!
//! ```text
//! minimize 1/2 x'Hx + g'x   subject to  lb <= x <= ub
//! ```
//!
//! Solved with a primal active-set method. Each working-set change
//! refactorizes the free block of `H` by Cholesky, which is cheap at the sizes
//! produced by condensing (a few dozen variables).

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// Smallest eigenvalue enforced on the Hessian.
pub const MIN_CURVATURE: f64 = 1e-8;

const FEAS_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct DenseBoxQp {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub lb: DVector<f64>,
    pub ub: DVector<f64>,
}

impl DenseBoxQp {
    pub fn new(h: DMatrix<f64>, g: DVector<f64>, lb: DVector<f64>, ub: DVector<f64>) -> Result<Self> {
        let n = g.len();
        if h.nrows() != n || h.ncols() != n || lb.len() != n || ub.len() != n {
            return Err(Error::Config(format!(
                "QP dimension mismatch: H {}x{}, g {n}, lb {}, ub {}",
                h.nrows(),
                h.ncols(),
                lb.len(),
                ub.len()
            )));
        }
        let scale = h.amax().max(1.0);
        if (&h - h.transpose()).amax() > 1e-10 * scale {
            return Err(Error::Config("QP Hessian is not symmetric".into()));
        }
        if lb.iter().zip(ub.iter()).any(|(l, u)| !(l <= u)) {
            return Err(Error::Config("QP bounds cross".into()));
        }
        Ok(Self { h, g, lb, ub })
    }

    pub fn unconstrained(h: DMatrix<f64>, g: DVector<f64>) -> Result<Self> {
        let n = g.len();
        Self::new(
            h,
            g,
            DVector::from_element(n, f64::NEG_INFINITY),
            DVector::from_element(n, f64::INFINITY),
        )
    }

    pub fn dim(&self) -> usize {
        self.g.len()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.h * x)) + self.g.dot(x)
    }

    pub fn project(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            x.len(),
            x.iter()
                .zip(self.lb.iter().zip(self.ub.iter()))
                .map(|(v, (l, u))| v.clamp(*l, *u)),
        )
    }

    /// Max-norm of the projected gradient step `x - P(x - (Hx + g))`.
    pub fn kkt_residual(&self, x: &DVector<f64>) -> f64 {
        let grad = &self.h * x + &self.g;
        self.project(&(x - &grad))
            .iter()
            .zip(x.iter())
            .map(|(p, v)| (p - v).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundState {
    Free,
    AtLower,
    AtUpper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    /// Iteration cap hit; the best feasible iterate is returned.
    IterationLimit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub active_set: Vec<BoundState>,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub status: QpStatus,
    /// A diagonal shift was added to make `H` positive definite.
    pub regularized: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct WarmStart {
    pub x: Option<DVector<f64>>,
    pub active_set: Option<Vec<BoundState>>,
}

impl WarmStart {
    pub fn from_solution(sol: &QpSolution) -> Self {
        Self {
            x: Some(sol.x.clone()),
            active_set: Some(sol.active_set.clone()),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct BoxQpSolver {
    /// Defaults to `10 * n`.
    pub max_iterations: Option<usize>,
}

impl BoxQpSolver {
    pub fn solve(&self, qp: &DenseBoxQp, warm: Option<&WarmStart>) -> QpSolution {
        let n = qp.dim();
        let max_iter = self.max_iterations.unwrap_or(10 * n).max(1);
        let (h, regularized) = regularize(&qp.h);

        let mut x = match warm.and_then(|w| w.x.as_ref()) {
            Some(x0) if x0.len() == n => qp.project(x0),
            _ => qp.project(&DVector::zeros(n)),
        };
        let mut active = vec![BoundState::Free; n];
        let hint = warm.and_then(|w| w.active_set.as_ref()).filter(|a| a.len() == n);
        for i in 0..n {
            let wanted = hint.map(|a| a[i]).unwrap_or_else(|| {
                if x[i] == qp.lb[i] {
                    BoundState::AtLower
                } else if x[i] == qp.ub[i] {
                    BoundState::AtUpper
                } else {
                    BoundState::Free
                }
            });
            match wanted {
                BoundState::AtLower if qp.lb[i].is_finite() => {
                    x[i] = qp.lb[i];
                    active[i] = BoundState::AtLower;
                }
                BoundState::AtUpper if qp.ub[i].is_finite() => {
                    x[i] = qp.ub[i];
                    active[i] = BoundState::AtUpper;
                }
                _ => {}
            }
        }

        let mut status = QpStatus::IterationLimit;
        let mut iterations = 0;
        while iterations < max_iter {
            iterations += 1;
            let free: Vec<usize> = (0..n).filter(|&i| active[i] == BoundState::Free).collect();
            let target = if free.is_empty() {
                DVector::zeros(0)
            } else {
                match free_minimizer(&h, &qp.g, &x, &free) {
                    Some(t) => t,
                    None => break,
                }
            };

            // Longest feasible step toward the subspace minimizer.
            let mut alpha = 1.0;
            let mut blocking = None;
            for (k, &i) in free.iter().enumerate() {
                let d = target[k] - x[i];
                if d < 0.0 && target[k] < qp.lb[i] - FEAS_TOL {
                    let a = (qp.lb[i] - x[i]) / d;
                    if a < alpha {
                        alpha = a;
                        blocking = Some((i, BoundState::AtLower));
                    }
                } else if d > 0.0 && target[k] > qp.ub[i] + FEAS_TOL {
                    let a = (qp.ub[i] - x[i]) / d;
                    if a < alpha {
                        alpha = a;
                        blocking = Some((i, BoundState::AtUpper));
                    }
                }
            }
            let alpha = alpha.max(0.0);
            for (k, &i) in free.iter().enumerate() {
                x[i] = (x[i] + alpha * (target[k] - x[i])).clamp(qp.lb[i], qp.ub[i]);
            }
            if let Some((i, side)) = blocking {
                x[i] = if side == BoundState::AtLower { qp.lb[i] } else { qp.ub[i] };
                active[i] = side;
                continue;
            }

            // Subspace optimum reached; release the bound with the most
            // negative multiplier.
            let grad = &h * &x + &qp.g;
            let tol = 1e-12 * (1.0 + grad.amax());
            let mut release = None;
            let mut worst = tol;
            for i in 0..n {
                let violation = match active[i] {
                    BoundState::AtLower => -grad[i],
                    BoundState::AtUpper => grad[i],
                    BoundState::Free => continue,
                };
                if violation > worst {
                    worst = violation;
                    release = Some(i);
                }
            }
            match release {
                Some(i) => active[i] = BoundState::Free,
                None => {
                    status = QpStatus::Optimal;
                    break;
                }
            }
        }

        let x = qp.project(&x);
        let reg_qp = DenseBoxQp {
            h,
            g: qp.g.clone(),
            lb: qp.lb.clone(),
            ub: qp.ub.clone(),
        };
        let kkt_residual = reg_qp.kkt_residual(&x);
        QpSolution {
            x,
            active_set: active,
            kkt_residual,
            iterations,
            status,
            regularized,
        }
    }
}

/// Solve with default settings.
pub fn solve_box_qp(qp: &DenseBoxQp, warm: Option<&WarmStart>) -> QpSolution {
    BoxQpSolver::default().solve(qp, warm)
}

/// Adds `rho * I` with `rho = max(0, MIN_CURVATURE - lambda_min)` when `H` is
/// not numerically positive definite.
fn regularize(h: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    if let Some(chol) = Cholesky::new(h.clone()) {
        let l = chol.l_dirty();
        let min_pivot = l.diagonal().iter().fold(f64::INFINITY, |a, v| a.min(v * v));
        if min_pivot >= MIN_CURVATURE {
            return (h.clone(), false);
        }
    }
    let lambda_min = SymmetricEigen::new(h.clone())
        .eigenvalues
        .iter()
        .fold(f64::INFINITY, |a, v| a.min(*v));
    let rho = (MIN_CURVATURE - lambda_min).max(0.0);
    if rho == 0.0 {
        return (h.clone(), false);
    }
    let mut out = h.clone();
    for i in 0..out.nrows() {
        out[(i, i)] += rho;
    }
    (out, true)
}

/// Minimizer over the free coordinates with the others held at `x`.
fn free_minimizer(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    x: &DVector<f64>,
    free: &[usize],
) -> Option<DVector<f64>> {
    let nf = free.len();
    let n = x.len();
    let hff = DMatrix::from_fn(nf, nf, |a, b| h[(free[a], free[b])]);
    let mut rhs = DVector::from_fn(nf, |a, _| -g[free[a]]);
    let mut is_free = vec![false; n];
    for &i in free {
        is_free[i] = true;
    }
    for (a, &i) in free.iter().enumerate() {
        for j in (0..n).filter(|&j| !is_free[j]) {
            rhs[a] -= h[(i, j)] * x[j];
        }
    }
    Cholesky::<f64, Dyn>::new(hff).map(|c| c.solve(&rhs))
}

//! Reference computations used to check the solvers. Each one takes a
//! deliberately different route from the production code: enumeration
//! instead of active-set iterations, fine explicit Euler or the 3/8 rule
//! instead of classical RK4, central differences instead of propagated
//! sensitivities, and a full-covariance Kalman filter instead of square-root
//! information updates.

use nalgebra::{DMatrix, DVector, SMatrix, SVector, Vector2};

use crate::model::{rk4_step, Dynamics};
use crate::qp::DenseBoxQp;
use crate::Result;

/// Global minimizer of a box QP by trying every assignment of
/// `{free, lower, upper}` to the variables (`3^n` candidates).
pub fn qp_by_enumeration(qp: &DenseBoxQp) -> DVector<f64> {
    let n = qp.dim();
    let mut best: Option<(f64, DVector<f64>)> = None;
    let total = 3usize.pow(n as u32);
    for code in 0..total {
        let mut c = code;
        let mut x = DVector::zeros(n);
        let mut free = Vec::new();
        let mut ok = true;
        for i in 0..n {
            match c % 3 {
                0 => free.push(i),
                1 => {
                    ok &= qp.lb[i].is_finite();
                    x[i] = qp.lb[i];
                }
                _ => {
                    ok &= qp.ub[i].is_finite();
                    x[i] = qp.ub[i];
                }
            }
            c /= 3;
        }
        if !ok {
            continue;
        }
        if !free.is_empty() {
            let nf = free.len();
            let a = DMatrix::from_fn(nf, nf, |r, s| qp.h[(free[r], free[s])]);
            let b = DVector::from_fn(nf, |r, _| {
                let i = free[r];
                -qp.g[i]
                    - (0..n)
                        .filter(|j| !free.contains(j))
                        .map(|j| qp.h[(i, j)] * x[j])
                        .sum::<f64>()
            });
            let Some(sol) = a.full_piv_lu().solve(&b) else {
                continue;
            };
            for (r, &i) in free.iter().enumerate() {
                x[i] = sol[r];
            }
            if free
                .iter()
                .any(|&i| x[i] < qp.lb[i] - 1e-12 || x[i] > qp.ub[i] + 1e-12)
            {
                continue;
            }
        }
        let f = qp.objective(&x);
        if best.as_ref().is_none_or(|(bf, _)| f < *bf) {
            best = Some((f, x));
        }
    }
    best.map(|(_, x)| x).expect("box QP always has a feasible vertex or interior point")
}

/// Explicit Euler with `substeps` equal sub-intervals of `dt`.
pub fn fine_euler<M, const NX: usize>(
    model: &M,
    x: &SVector<f64, NX>,
    u: &Vector2<f64>,
    dt: f64,
    substeps: usize,
) -> Result<SVector<f64, NX>>
where
    M: Dynamics<NX>,
{
    let h = dt / substeps as f64;
    let mut x = *x;
    for _ in 0..substeps {
        x += model.rhs(&x, u)? * h;
    }
    Ok(x)
}

/// Many small steps of the Runge-Kutta 3/8 rule. Accurate enough to serve as
/// ground truth for the production integrator.
pub fn fine_rk38<M, const NX: usize>(
    model: &M,
    x: &SVector<f64, NX>,
    u: &Vector2<f64>,
    dt: f64,
    substeps: usize,
) -> Result<SVector<f64, NX>>
where
    M: Dynamics<NX>,
{
    let h = dt / substeps as f64;
    let mut x = *x;
    for _ in 0..substeps {
        let k1 = model.rhs(&x, u)?;
        let k2 = model.rhs(&(x + k1 * (h / 3.0)), u)?;
        let k3 = model.rhs(&(x + (k2 - k1 / 3.0) * h), u)?;
        let k4 = model.rhs(&(x + (k1 - k2 + k3) * h), u)?;
        x += (k1 + (k2 + k3) * 3.0 + k4) * (h / 8.0);
    }
    Ok(x)
}

/// Central-difference sensitivities of the RK4 step.
pub fn central_step_jacobians<M, const NX: usize>(
    model: &M,
    x: &SVector<f64, NX>,
    u: &Vector2<f64>,
    dt: f64,
    h: f64,
) -> Result<(SMatrix<f64, NX, NX>, SMatrix<f64, NX, 2>)>
where
    M: Dynamics<NX>,
{
    let mut a = SMatrix::<f64, NX, NX>::zeros();
    for j in 0..NX {
        let (mut xp, mut xm) = (*x, *x);
        xp[j] += h;
        xm[j] -= h;
        let col = (rk4_step(model, &xp, u, dt)? - rk4_step(model, &xm, u, dt)?) / (2.0 * h);
        a.set_column(j, &col);
    }
    let mut b = SMatrix::<f64, NX, 2>::zeros();
    for j in 0..2 {
        let (mut up, mut um) = (*u, *u);
        up[j] += h;
        um[j] -= h;
        let col = (rk4_step(model, x, &up, dt)? - rk4_step(model, x, &um, dt)?) / (2.0 * h);
        b.set_column(j, &col);
    }
    Ok((a, b))
}

/// Textbook extended Kalman filter covariance recursion: Joseph-form
/// measurement update with rows `c` and noise covariance `r`, then
/// `P = A P A' + B Su B' + Qp`.
pub fn ekf_covariance_step(
    p: &DMatrix<f64>,
    c: &DMatrix<f64>,
    r: &DMatrix<f64>,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    input_cov: &DMatrix<f64>,
    process_cov: &DMatrix<f64>,
) -> DMatrix<f64> {
    let n = p.nrows();
    let p_upd = if c.nrows() == 0 {
        p.clone()
    } else {
        let s = c * p * c.transpose() + r;
        let s_inv = s.try_inverse().expect("innovation covariance is invertible");
        let k = p * c.transpose() * s_inv;
        let ikc = DMatrix::identity(n, n) - &k * c;
        &ikc * p * ikc.transpose() + &k * r * k.transpose()
    };
    a * p_upd * a.transpose() + b * input_cov * b.transpose() + process_cov
}

/// Central-difference gradient of a scalar function.
pub fn central_gradient<F>(f: F, x: &DVector<f64>, h: f64) -> DVector<f64>
where
    F: Fn(&DVector<f64>) -> f64,
{
    DVector::from_fn(x.len(), |i, _| {
        let (mut xp, mut xm) = (x.clone(), x.clone());
        xp[i] += h;
        xm[i] -= h;
        (f(&xp) - f(&xm)) / (2.0 * h)
    })
}

/// Max-norm projected gradient for box constraints, given a gradient.
pub fn projected_gradient_norm(
    x: &DVector<f64>,
    grad: &DVector<f64>,
    lb: &DVector<f64>,
    ub: &DVector<f64>,
) -> f64 {
    (0..x.len())
        .map(|i| (x[i] - (x[i] - grad[i]).clamp(lb[i], ub[i])).abs())
        .fold(0.0, f64::max)
}

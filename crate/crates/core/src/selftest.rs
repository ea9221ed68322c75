//! Quick randomized comparisons of the solvers against the reference
//! implementations in [`crate::oracle`], runnable from the command line.

use nalgebra::{DMatrix, DVector, SMatrix, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{
    rk4_step, step_jacobians, Control, ControlModel, EstState, EstimationModel, SlipParams,
    StateJacobians, VehicleGeometry, VehicleState,
};
use crate::nmhe::{update_arrival_cost, ArrivalCost, ArrivalLinearization, ChannelMask, MeasSample, MheConfig, Vec6, N_OUTPUTS, OUTPUT_INDEX};
use crate::oracle;
use crate::path::{build_eight_track, SAMPLE_SPACING};
use crate::qp::{solve_box_qp, DenseBoxQp};

#[derive(Debug, Clone)]
pub struct SelfTestResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn result(name: &'static str, worst: f64, tol: f64) -> SelfTestResult {
    SelfTestResult {
        name,
        passed: worst.is_finite() && worst < tol,
        detail: format!("worst {worst:.3e} (tolerance {tol:.0e})"),
    }
}

pub fn random_box_qp(rng: &mut ChaCha8Rng, n: usize) -> DenseBoxQp {
    let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let h = m.transpose() * &m + DMatrix::identity(n, n) * 0.1;
    let g = DVector::from_fn(n, |_, _| rng.random_range(-5.0..5.0));
    let lb = DVector::from_fn(n, |_, _| rng.random_range(-2.0..0.0));
    let ub = DVector::from_fn(n, |_, _| rng.random_range(0.0..2.0));
    DenseBoxQp::new(h, g, lb, ub).expect("well-formed by construction")
}

fn qp_vs_enumeration(rng: &mut ChaCha8Rng) -> SelfTestResult {
    let mut worst = 0.0f64;
    for _ in 0..300 {
        let qp = random_box_qp(rng, 4);
        let x = solve_box_qp(&qp, None).x;
        worst = worst.max((x - oracle::qp_by_enumeration(&qp)).amax());
    }
    result("box QP vs enumeration", worst, 1e-8)
}

fn random_pose(rng: &mut ChaCha8Rng) -> VehicleState {
    VehicleState {
        xt: rng.random_range(-5.0..5.0),
        yt: rng.random_range(-5.0..5.0),
        theta: rng.random_range(-3.0..3.0),
        xi: rng.random_range(-5.0..5.0),
        yi: rng.random_range(-5.0..5.0),
        psi: rng.random_range(-3.0..3.0),
    }
}

fn random_slip(rng: &mut ChaCha8Rng) -> SlipParams {
    SlipParams::new(
        rng.random_range(0.25..1.0),
        rng.random_range(0.25..1.0),
        rng.random_range(0.25..1.0),
    )
}

fn random_control(rng: &mut ChaCha8Rng) -> Vector2<f64> {
    Vector2::new(rng.random_range(-0.6..0.6), rng.random_range(-0.4..0.4))
}

fn rk4_vs_fine(rng: &mut ChaCha8Rng) -> SelfTestResult {
    let geom = VehicleGeometry::default();
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let m = ControlModel::new(geom, random_slip(rng), 1.0);
        let x = random_pose(rng).to_vector();
        let u = random_control(rng);
        let a = rk4_step(&m, &x, &u, 0.2).unwrap();
        let b = oracle::fine_rk38(&m, &x, &u, 0.2, 400).unwrap();
        worst = worst.max((a - b).amax());
    }
    result("RK4 vs fine 3/8 rule", worst, 1e-6)
}

fn rel_err<const R: usize, const C: usize>(a: &SMatrix<f64, R, C>, b: &SMatrix<f64, R, C>) -> f64 {
    (a - b).amax() / b.amax().max(1.0)
}

fn jacobians_vs_central(rng: &mut ChaCha8Rng) -> SelfTestResult {
    let geom = VehicleGeometry::default();
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let slip = random_slip(rng);
        let u = random_control(rng);
        let cm = ControlModel::new(geom, slip, rng.random_range(0.5..1.5));
        let x = random_pose(rng).to_vector();
        let j = step_jacobians(&cm, &x, &u, 0.2).unwrap();
        let (a, b) = oracle::central_step_jacobians(&cm, &x, &u, 0.2, 1e-5).unwrap();
        worst = worst.max(rel_err(&j.d_state, &a)).max(rel_err(&j.d_control, &b));

        let em = EstimationModel::new(geom);
        let z = EstState::new(random_pose(rng), slip, rng.random_range(-0.3..0.3), 1.0).to_vector();
        let j = step_jacobians(&em, &z, &u, 0.2).unwrap();
        let (a, b) = oracle::central_step_jacobians(&em, &z, &u, 0.2, 1e-5).unwrap();
        worst = worst.max(rel_err(&j.d_state, &a)).max(rel_err(&j.d_control, &b));
    }
    result("RK4 sensitivities vs central FD", worst, 1e-5)
}

/// Random arrival-cost instance; returns the worst covariance mismatch
/// between the square-root update and the full-covariance filter.
pub fn arrival_instance(rng: &mut ChaCha8Rng) -> f64 {
    let cfg = MheConfig::default();
    let l0 = SMatrix::<f64, 11, 11>::from_fn(|i, j| match i.cmp(&j) {
        std::cmp::Ordering::Equal => rng.random_range(0.5..2.0),
        std::cmp::Ordering::Less => rng.random_range(-0.3..0.3),
        std::cmp::Ordering::Greater => 0.0,
    });
    let a = SMatrix::<f64, 11, 11>::identity() + SMatrix::from_fn(|_, _| rng.random_range(-0.1..0.1));
    let b = SMatrix::<f64, 11, 2>::from_fn(|_, _| rng.random_range(-0.2..0.2));
    let mask = ChannelMask::from_bits(rng.random::<u8>());
    let arr = ArrivalCost {
        prior: nalgebra::SVector::zeros(),
        sqrt_weight: l0,
    };
    let sample = MeasSample {
        t: 0.0,
        y: Vec6::zeros(),
        u: Control::default(),
        mask,
    };
    let lin = ArrivalLinearization {
        jacobians: StateJacobians {
            next: nalgebra::SVector::zeros(),
            d_state: a,
            d_control: b,
        },
        next_prior: nalgebra::SVector::zeros(),
    };
    let upd = update_arrival_cost(&arr, &sample, &lin, &cfg);
    let p_sqrt = (upd.cost.sqrt_weight.transpose() * upd.cost.sqrt_weight)
        .try_inverse()
        .expect("updated information is invertible");

    let sig = cfg.output_sigma();
    let rows: Vec<usize> = (0..N_OUTPUTS).filter(|&i| mask.output(i)).collect();
    let c = DMatrix::from_fn(rows.len(), 11, |r, j| if OUTPUT_INDEX[rows[r]] == j { 1.0 } else { 0.0 });
    let r = DMatrix::from_fn(rows.len(), rows.len(), |i, j| if i == j { sig[rows[i]].powi(2) } else { 0.0 });
    let p0 = (l0.transpose() * l0).try_inverse().unwrap();
    let dyn_ = |m: &SMatrix<f64, 11, 11>| DMatrix::from_column_slice(11, 11, m.as_slice());
    let su = DMatrix::from_diagonal(&DVector::from_iterator(2, cfg.sigma_input.iter().map(|s| s * s)));
    let qp = DMatrix::from_diagonal(&DVector::from_iterator(11, cfg.process_sigma.iter().map(|s| s * s)));
    let p_ekf = oracle::ekf_covariance_step(
        &dyn_(&p0),
        &c,
        &r,
        &dyn_(&a),
        &DMatrix::from_column_slice(11, 2, b.as_slice()),
        &su,
        &qp,
    );
    (dyn_(&p_sqrt) - p_ekf).amax()
}

fn arrival_vs_ekf(rng: &mut ChaCha8Rng) -> SelfTestResult {
    let worst = (0..50).map(|_| arrival_instance(rng)).fold(0.0, f64::max);
    result("arrival cost vs full EKF", worst, 1e-8)
}

fn projection_vs_scan(rng: &mut ChaCha8Rng) -> SelfTestResult {
    let path = build_eight_track(30.0, 10.0).unwrap();
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let (x, y) = (rng.random_range(-30.0..30.0), rng.random_range(-15.0..15.0));
        let p = path.project(x, y);
        let best = path
            .samples()
            .iter()
            .map(|s| (s.x - x).hypot(s.y - y))
            .fold(f64::INFINITY, f64::min);
        // The refined distance can only beat the best sample.
        worst = worst.max((p.distance - best).max(0.0));
    }
    result("path projection vs scan", worst, SAMPLE_SPACING)
}

/// Runs every comparison with a fixed seed.
pub fn run_selftest() -> Vec<SelfTestResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    vec![
        qp_vs_enumeration(&mut rng),
        rk4_vs_fine(&mut rng),
        jacobians_vs_central(&mut rng),
        arrival_vs_ekf(&mut rng),
        projection_vs_scan(&mut rng),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_pass() {
        for r in run_selftest() {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }
}

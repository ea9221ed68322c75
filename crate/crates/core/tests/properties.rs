mod common;

use nalgebra::{DMatrix, DVector, SMatrix};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tractor_nmpc::model::{
    hitch_closure, pose_rates, trailer_yaw, Control, SlipParams, VehicleGeometry, VehicleState, MAX_TRACTOR_STEER,
    MAX_TRAILER_STEER,
};
use tractor_nmpc::nmhe::{sqrt_measurement_update, sqrt_time_update, Estimator, MheConfig};
use tractor_nmpc::path::{build_eight_track, reference_from_station, LookaheadParams, SegmentTag};
use tractor_nmpc::plant::{actuator_step, plant_step, ActuatorParams, PlantConfig, PlantState, ACTUATOR_OVERSHOOT};
use tractor_nmpc::qp::{solve_box_qp, DenseBoxQp, WarmStart};

fn pose() -> impl Strategy<Value = VehicleState> {
    (
        -50.0..50.0f64,
        -50.0..50.0f64,
        -6.0..6.0f64,
        -50.0..50.0f64,
        -50.0..50.0f64,
        -6.0..6.0f64,
    )
        .prop_map(|(xt, yt, theta, xi, yi, psi)| VehicleState {
            xt,
            yt,
            theta,
            xi,
            yi,
            psi,
        })
}

fn slip() -> impl Strategy<Value = SlipParams> {
    (0.25..=1.0f64, 0.25..=1.0f64, 0.25..=1.0f64).prop_map(|(m, k, e)| SlipParams::new(m, k, e))
}

fn control() -> impl Strategy<Value = Control> {
    (-MAX_TRACTOR_STEER..MAX_TRACTOR_STEER, -MAX_TRAILER_STEER..MAX_TRAILER_STEER)
        .prop_map(|(a, b)| Control::new(a, b))
}

/// Random positive definite box QP of size `n`.
fn box_qp(n: usize) -> impl Strategy<Value = DenseBoxQp> {
    (
        prop::collection::vec(-1.0..1.0f64, n * n),
        prop::collection::vec(-5.0..5.0f64, n),
        prop::collection::vec(0.0..2.0f64, n),
        prop::collection::vec(0.0..2.0f64, n),
    )
        .prop_map(move |(m, g, lo, hi)| {
            let m = DMatrix::from_vec(n, n, m);
            let h = m.transpose() * &m + DMatrix::identity(n, n) * 0.05;
            DenseBoxQp::new(
                h,
                DVector::from_vec(g),
                -DVector::from_vec(lo),
                DVector::from_vec(hi),
            )
            .unwrap()
        })
}

proptest! {
    #[test]
    fn hitch_closure_round_trip(theta in -10.0..10.0f64, psi in -10.0..10.0f64, di in -1.0..1.0f64) {
        let beta = hitch_closure(theta, psi, di);
        let back = trailer_yaw(theta, beta, di);
        prop_assert!((back - psi).abs() <= 1e-14 * (1.0 + theta.abs() + psi.abs()));
    }

    #[test]
    fn rates_scale_with_speed_and_drive_slip(p in pose(), s in slip(), u in control(), beta in -0.5..0.5f64,
                                             v in 0.1..3.0f64, a in 0.25..4.0f64) {
        let g = VehicleGeometry::default();
        let base = pose_rates(&p, beta, &u, &s, v, &g).unwrap();
        let faster = pose_rates(&p, beta, &u, &s, a * v, &g).unwrap();
        let slipped = pose_rates(&p, beta, &u, &SlipParams::new(s.mu / 4.0, s.kappa, s.eta), v, &g).unwrap();
        prop_assert!((faster - base * a).amax() <= 1e-12 * (1.0 + base.amax() * a));
        prop_assert!((slipped - base / 4.0).amax() <= 1e-12 * (1.0 + base.amax()));
    }

    #[test]
    fn aligned_straight_has_no_yaw_rate(x in -50.0..50.0f64, y in -50.0..50.0f64, h in -6.0..6.0f64, v in 0.0..3.0f64) {
        let g = VehicleGeometry::default();
        let p = VehicleState::aligned(x, y, h, &g);
        let r = pose_rates(&p, 0.0, &Control::default(), &SlipParams::NO_SLIP, v, &g).unwrap();
        prop_assert_eq!(r[2], 0.0);
        prop_assert_eq!(r[5], 0.0);
        prop_assert!((r[0] - v * h.cos()).abs() <= 1e-15 * v);
        prop_assert!((r[1] - v * h.sin()).abs() <= 1e-15 * v);
    }

    #[test]
    fn plant_keeps_heading_without_steering(x in -50.0..50.0f64, y in -50.0..50.0f64, h in -6.0..6.0f64,
                                           steps in 1usize..40) {
        let g = VehicleGeometry::default();
        let cfg = PlantConfig::default();
        let mut ps = PlantState::new(VehicleState::aligned(x, y, h, &g), Control::default(), SlipParams::NO_SLIP, 1.0);
        for _ in 0..steps {
            ps = plant_step(&ps, &Control::default(), 0.2, &cfg, &g).unwrap();
        }
        prop_assert_eq!(ps.pose.theta, h);
        prop_assert_eq!(ps.pose.psi, h);
        prop_assert_eq!(ps.beta, 0.0);
    }

    #[test]
    fn actuators_stay_within_allowance(cmds in prop::collection::vec((-2.0..2.0f64, -2.0..2.0f64), 1..200),
                                       dt in 0.001..0.2f64) {
        let (pt, pi) = (ActuatorParams::tractor(), ActuatorParams::trailer());
        let (mut a, mut b) = (0.0, 0.0);
        for (ct, ci) in cmds {
            a = actuator_step(a, ct, dt, &pt);
            b = actuator_step(b, ci, dt, &pi);
            prop_assert!(a.abs() <= pt.limit + ACTUATOR_OVERSHOOT);
            prop_assert!(b.abs() <= pi.limit + ACTUATOR_OVERSHOOT);
        }
    }

    #[test]
    fn qp_solution_in_box_and_optimal(qp in box_qp(6), seed in any::<u64>()) {
        let sol = solve_box_qp(&qp, None);
        let x = &sol.x;
        for i in 0..6 {
            prop_assert!(qp.lb[i] <= x[i] && x[i] <= qp.ub[i]);
        }
        let f = qp.objective(x);
        let unconstrained = qp.h.clone().cholesky().unwrap().solve(&(-&qp.g));
        let clipped = DVector::from_fn(6, |i, _| unconstrained[i].clamp(qp.lb[i], qp.ub[i]));
        prop_assert!(f <= qp.objective(&clipped) + 1e-10);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..100 {
            use rand::Rng;
            let y = DVector::from_fn(6, |i, _| rng.random_range(qp.lb[i]..=qp.ub[i]));
            prop_assert!(f <= qp.objective(&y) + 1e-10);
        }
    }

    #[test]
    fn qp_warm_start_agrees_with_cold(qp in box_qp(8), guess in prop::collection::vec(-3.0..3.0f64, 8)) {
        let cold = solve_box_qp(&qp, None);
        let warm = WarmStart { x: Some(DVector::from_vec(guess)), active_set: None };
        let hot = solve_box_qp(&qp, Some(&warm));
        prop_assert!((cold.x - hot.x).amax() < 1e-7);
    }

    #[test]
    fn projection_is_idempotent(x in -30.0..30.0f64, y in -15.0..15.0f64) {
        let path = build_eight_track(30.0, 10.0).unwrap();
        let first = path.project(x, y);
        let foot = path.point_at(first.station);
        let again = path.project(foot.x, foot.y);
        prop_assert!(again.distance < 1e-6);
        // The two branches meet at the crossing, where either station is valid.
        if (foot.x.hypot(foot.y)) > 0.5 {
            prop_assert!((path.wrap(again.station) - path.wrap(first.station)).abs() < 1e-6);
        }
    }

    #[test]
    fn reference_stations_spaced_by_speed(s0 in 0.0..150.0f64, v in 0.1..2.0f64) {
        let path = build_eight_track(30.0, 10.0).unwrap();
        let params = LookaheadParams { lookahead: 1.6, horizon: 15, dt: 0.2, speed: v };
        let refs = reference_from_station(&path, s0, Control::default(), &params, &VehicleGeometry::default());
        for w in refs.stations.windows(2) {
            prop_assert!((w[1] - w[0] - v * 0.2).abs() < 1e-12);
        }
        for (k, st) in refs.states.iter().enumerate() {
            let p = path.point_at(refs.stations[k]);
            if p.tag == SegmentTag::Straight && path.point_at(refs.stations[k] - 0.06).tag == SegmentTag::Straight {
                prop_assert!((st.theta - p.heading).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn measurement_update_keeps_factor_valid(diag in prop::collection::vec(0.1..10.0f64, 11),
                                             rows in prop::collection::vec(-30.0..30.0f64, 3 * 11)) {
        let l = SMatrix::<f64, 11, 11>::from_diagonal(&nalgebra::SVector::from_vec(diag));
        let w = DMatrix::from_row_slice(3, 11, &rows);
        let out = sqrt_measurement_update(&l, &w);
        prop_assert!(out.iter().all(|v| v.is_finite()));
        prop_assert!(out.diagonal().iter().all(|&d| d >= 0.0));
        let (next, _) = sqrt_time_update(&out, &SMatrix::identity(), &DMatrix::identity(11, 11));
        prop_assert!(next.iter().all(|v| v.is_finite()));
        prop_assert!(next.diagonal().iter().all(|&d| d >= 0.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn slip_estimates_respect_bounds(mu in 0.05..1.4f64, kappa in 0.05..1.4f64, eta in 0.05..1.4f64, seed in any::<u64>()) {
        let data = common::synthetic(120, SlipParams::new(mu, kappa, eta), Some(seed));
        let mut est = Estimator::new(MheConfig::default(), VehicleGeometry::default(), common::prior_from(&data.truth[0])).unwrap();
        for s in &data.samples {
            est.add_sample(*s).unwrap();
            let z = est.estimate().unwrap().state;
            prop_assert!(z.slip.in_bounds(), "{:?}", z.slip);
            est.prepare_next().unwrap();
        }
    }
}

use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tractor_nmpc::model::{rk4_step, step_jacobians, ControlModel, EstState, EstimationModel, SlipParams, VehicleGeometry, VehicleState};
use tractor_nmpc::oracle::{central_step_jacobians, fine_euler, fine_rk38};

fn slope(h: &[f64], e: &[f64]) -> f64 {
    let n = h.len() as f64;
    let x: Vec<f64> = h.iter().map(|v| v.ln()).collect();
    let y: Vec<f64> = e.iter().map(|v| v.ln()).collect();
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

#[test]
fn rk4_is_fourth_order() {
    let geom = VehicleGeometry::default();
    let steps = [0.2, 0.1, 0.05, 0.025];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..5 {
        let m = ControlModel::new(geom, SlipParams::new(rng.random_range(0.5..1.0), rng.random_range(0.5..1.0), rng.random_range(0.5..1.0)), 1.5);
        let x = VehicleState::aligned(0.0, 0.0, rng.random_range(-3.0..3.0), &geom).to_vector();
        let u = Vector2::new(rng.random_range(-0.6..0.6), rng.random_range(-0.4..0.4));
        // One-step error divided by the step: error per unit time.
        let e: Vec<f64> = steps
            .iter()
            .map(|&h| (rk4_step(&m, &x, &u, h).unwrap() - fine_rk38(&m, &x, &u, h, 2000).unwrap()).amax() / h)
            .collect();
        let s = slope(&steps, &e);
        assert!((3.7..=4.3).contains(&s), "slope {s}, errors {e:?}");
    }
}

#[test]
fn oracles_agree() {
    let geom = VehicleGeometry::default();
    let m = ControlModel::new(geom, SlipParams::new(0.9, 0.8, 0.7), 1.0);
    let x = VehicleState::aligned(1.0, 2.0, 0.3, &geom).to_vector();
    let u = Vector2::new(0.4, -0.2);
    let a = fine_rk38(&m, &x, &u, 0.2, 400).unwrap();
    let b = fine_euler(&m, &x, &u, 0.2, 200_000).unwrap();
    assert!((a - b).amax() < 1e-5);
}

#[test]
fn sensitivities_match_central_differences() {
    let geom = VehicleGeometry::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..10 {
        let slip = SlipParams::new(rng.random_range(0.25..1.0), rng.random_range(0.25..1.0), rng.random_range(0.25..1.0));
        let u = Vector2::new(rng.random_range(-0.6..0.6), rng.random_range(-0.4..0.4));
        let pose = VehicleState {
            xt: rng.random_range(-10.0..10.0),
            yt: rng.random_range(-10.0..10.0),
            theta: rng.random_range(-3.0..3.0),
            xi: rng.random_range(-10.0..10.0),
            yi: rng.random_range(-10.0..10.0),
            psi: rng.random_range(-3.0..3.0),
        };
        let cm = ControlModel::new(geom, slip, rng.random_range(0.2..2.0));
        let x = pose.to_vector();
        let j = step_jacobians(&cm, &x, &u, 0.2).unwrap();
        let (a, b) = central_step_jacobians(&cm, &x, &u, 0.2, 1e-5).unwrap();
        assert!((j.d_state - a).amax() <= 1e-5 * a.amax().max(1.0));
        assert!((j.d_control - b).amax() <= 1e-5 * b.amax().max(1.0));
        assert_eq!(j.next, rk4_step(&cm, &x, &u, 0.2).unwrap());

        let em = EstimationModel::new(geom);
        let z = EstState::new(pose, slip, rng.random_range(-0.4..0.4), rng.random_range(0.2..2.0)).to_vector();
        let j = step_jacobians(&em, &z, &u, 0.2).unwrap();
        let (a, b) = central_step_jacobians(&em, &z, &u, 0.2, 1e-5).unwrap();
        assert!((j.d_state - a).amax() <= 1e-5 * a.amax().max(1.0));
        assert!((j.d_control - b).amax() <= 1e-5 * b.amax().max(1.0));
    }
}

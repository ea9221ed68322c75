#![allow(dead_code)]

use nalgebra::Vector2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use tractor_nmpc::model::{rk4_step, Control, EstState, EstimationModel, SlipParams, Vec11, VehicleGeometry, VehicleState};
use tractor_nmpc::nmhe::{measurement_model, ChannelMask, MeasSample, MheConfig};
use tractor_nmpc::nmpc::{Nmpc, OcpConfig, ShootingTrajectory};
use tractor_nmpc::path::{build_eight_track, lookahead_reference, LookaheadParams, Projector, ReferenceHorizon};
use tractor_nmpc::plant::{plant_step, PlantConfig, PlantState, SlipSchedule};

/// Steering that keeps every slip coefficient observable.
pub fn excitation(t: f64) -> Control {
    Control::new(0.3 * (0.5 * t).sin(), 0.25 * (0.31 * t + 1.0).sin())
}

pub struct Synthetic {
    pub samples: Vec<MeasSample>,
    pub truth: Vec<Vec11>,
}

/// Data generated by the estimation model itself, optionally with Gaussian
/// noise at the estimator's own standard deviations.
pub fn synthetic(cycles: usize, slip: SlipParams, noise_seed: Option<u64>) -> Synthetic {
    let geom = VehicleGeometry::default();
    let model = EstimationModel::new(geom);
    let cfg = MheConfig::default();
    let mut z = EstState::new(VehicleState::aligned(0.0, 0.0, 0.3, &geom), slip, 0.05, 1.0).to_vector();
    let mut rng = noise_seed.map(ChaCha8Rng::seed_from_u64);
    let sig = cfg.output_sigma();
    let mut samples = Vec::with_capacity(cycles);
    let mut truth = Vec::with_capacity(cycles);
    for k in 0..cycles {
        let t = k as f64 * cfg.dt;
        let u = excitation(t);
        let mut y = measurement_model(&EstState::from_vector(&z), &u);
        let mut um = u;
        if let Some(r) = rng.as_mut() {
            for i in 0..6 {
                y[i] += Normal::new(0.0, sig[i]).unwrap().sample(r);
            }
            um.delta_t += Normal::new(0.0, cfg.sigma_input[0]).unwrap().sample(r);
            um.delta_i += Normal::new(0.0, cfg.sigma_input[1]).unwrap().sample(r);
        }
        samples.push(MeasSample {
            t,
            y,
            u: um,
            mask: ChannelMask::ALL,
        });
        truth.push(z);
        z = rk4_step(&model, &z, &Vector2::new(u.delta_t, u.delta_i), cfg.dt).unwrap();
    }
    Synthetic { samples, truth }
}

/// Estimator prior: true pose, no slip assumed.
pub fn prior_from(truth: &Vec11) -> EstState {
    let mut z = EstState::from_vector(truth);
    z.slip = SlipParams::NO_SLIP;
    z
}

pub struct Frozen {
    pub x: VehicleState,
    pub refs: ReferenceHorizon,
    pub slip: SlipParams,
    pub speed: f64,
    pub warm: ShootingTrajectory,
}

/// Snapshots of the controller's warm start along a closed-loop run.
pub fn frozen_problems() -> Vec<Frozen> {
    let geom = VehicleGeometry::default();
    let cfg = OcpConfig::default();
    let path = build_eight_track(30.0, 10.0).expect("track");
    let slip = SlipParams::new(0.9, 0.9, 0.9);
    let p0 = path.point_at(5.0);
    let x0 = VehicleState::aligned(p0.x, p0.y + 0.3, p0.heading, &geom);
    let pcfg = PlantConfig {
        slip: SlipSchedule::constant(slip),
        ..PlantConfig::default()
    };
    let mut plant = PlantState::new(x0, Control::default(), slip, 1.0);
    let mut nmpc = Nmpc::new(cfg.clone(), geom, &x0).expect("controller");
    let mut projector = Projector::default();
    let params = LookaheadParams {
        lookahead: 1.6,
        horizon: cfg.horizon,
        dt: cfg.dt,
        speed: 0.9,
    };
    let mut out = Vec::new();
    for k in 0..=1000 {
        let refs = lookahead_reference(&path, &mut projector, (plant.pose.xt, plant.pose.yt), plant.actuators, &params, &geom);
        nmpc.prepare(slip, 1.0, &refs).expect("prepare");
        if k > 0 && k % 100 == 0 {
            out.push(Frozen {
                x: plant.pose,
                refs: refs.clone(),
                slip,
                speed: 1.0,
                warm: nmpc.trajectory().clone(),
            });
        }
        let u = nmpc.feedback(&plant.pose, &refs).expect("feedback").control;
        plant = plant_step(&plant, &u, cfg.dt, &pcfg, &geom).expect("plant");
    }
    out
}

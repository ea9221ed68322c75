mod common;

use tractor_nmpc::model::{Control, ControlModel, SlipParams, VehicleGeometry, VehicleState};
use tractor_nmpc::nmpc::{feedback, prepare, Nmpc, OcpConfig, ShootingTrajectory};
use tractor_nmpc::path::{build_straight, lookahead_reference, LookaheadParams, Projector};
use tractor_nmpc::plant::{plant_step, PlantConfig, PlantState};

/// Full Gauss-Newton iterations on a frozen problem, returning every iterate.
fn iterate(p: &common::Frozen, count: usize) -> Vec<ShootingTrajectory> {
    let (cfg, geom) = (OcpConfig::default(), VehicleGeometry::default());
    let mut traj = p.warm.clone();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let prep = prepare(&traj, p.slip, p.speed, &p.refs, &cfg, &geom).unwrap();
        traj = feedback(&prep, &p.x, &p.refs, &cfg, None).unwrap().solution;
        out.push(traj.clone());
    }
    out
}

#[test]
fn iterates_approach_converged_controls() {
    for p in common::frozen_problems() {
        let its = iterate(&p, 40);
        let flat = |t: &ShootingTrajectory| nalgebra::DVector::from_iterator(30, t.controls.iter().flat_map(|u| [u.delta_t, u.delta_i]));
        let star = flat(its.last().unwrap());
        let gaps: Vec<f64> = its[..25].iter().map(|t| (flat(t) - &star).norm()).collect();
        for w in gaps.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{gaps:?}");
        }
    }
}

#[test]
fn cost_does_not_increase() {
    let cfg = OcpConfig::default();
    for p in common::frozen_problems() {
        let mut last = p.warm.cost(&p.refs, &cfg);
        for t in iterate(&p, 15) {
            let c = t.cost(&p.refs, &cfg);
            assert!(c <= last * (1.0 + 1e-12), "{c} > {last}");
            last = c;
        }
    }
}

#[test]
fn solutions_are_continuous() {
    let geom = VehicleGeometry::default();
    for p in common::frozen_problems() {
        let t = iterate(&p, 20).pop().unwrap();
        let model = ControlModel::new(geom, p.slip, p.speed);
        assert!(t.max_defect(&model, 0.2).unwrap() < 1e-6);
        assert_eq!(t.states[0], p.x);
        assert!(t.controls.iter().all(|u| u.within_limits()));
    }
}

#[test]
fn straight_line_offset_is_removed() {
    let geom = VehicleGeometry::default();
    let cfg = OcpConfig::default();
    let path = build_straight(0.0, 0.0, 0.0, 200.0).unwrap();
    let x0 = VehicleState::aligned(5.0, 0.3, 0.0, &geom);
    let plant_cfg = PlantConfig {
        bypass_actuators: true,
        ..PlantConfig::default()
    };
    let mut plant = PlantState::new(x0, Control::default(), SlipParams::NO_SLIP, 1.0);
    let mut nmpc = Nmpc::new(cfg.clone(), geom, &x0).unwrap();
    let mut projector = Projector::default();
    let params = LookaheadParams {
        lookahead: 1.6,
        horizon: cfg.horizon,
        dt: cfg.dt,
        speed: 1.0,
    };
    let mut worst_late: f64 = 0.0;
    for k in 0..400 {
        let refs = lookahead_reference(&path, &mut projector, (plant.pose.xt, plant.pose.yt), plant.actuators, &params, &geom);
        nmpc.prepare(SlipParams::NO_SLIP, 1.0, &refs).unwrap();
        let u = nmpc.feedback(&plant.pose, &refs).unwrap().control;
        plant = plant_step(&plant, &u, cfg.dt, &plant_cfg, &geom).unwrap();
        if k >= 300 {
            worst_late = worst_late.max(plant.pose.yt.abs());
        }
    }
    assert!(worst_late < 1e-6, "tractor offset {worst_late:e}");
}

//! Sequential versus rayon execution of the per-cycle kernels and of a
//! multi-seed batch.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nalgebra::Vector2;
use tractor_nmpc::exec::ExecMode;
use tractor_nmpc::harness::{run_batch, ExperimentConfig};
use tractor_nmpc::model::{rk4_step, Control, EstState, EstimationModel, SlipParams, VehicleGeometry, VehicleState};
use tractor_nmpc::nmhe::{measurement_model, ChannelMask, Estimator, MeasSample, MheConfig};
use tractor_nmpc::nmpc::{prepare, OcpConfig, ShootingTrajectory};
use tractor_nmpc::path::{build_eight_track, reference_from_station, LookaheadParams};
use tractor_nmpc::model::ControlModel;
use tractor_nmpc::plant::SlipSchedule;

const MODES: [ExecMode; 2] = [ExecMode::Sequential, ExecMode::Parallel];

fn nmpc_prepare(c: &mut Criterion) {
    let geom = VehicleGeometry::default();
    let path = build_eight_track(30.0, 10.0).unwrap();
    let p = path.point_at(40.0);
    let x0 = VehicleState::aligned(p.x, p.y + 0.2, p.heading, &geom);
    let slip = SlipParams::new(0.9, 0.9, 0.9);
    let mut group = c.benchmark_group("nmpc_prepare");
    for mode in MODES {
        let cfg = OcpConfig {
            exec: mode,
            ..OcpConfig::default()
        };
        let params = LookaheadParams {
            lookahead: 1.6,
            horizon: cfg.horizon,
            dt: cfg.dt,
            speed: 0.9,
        };
        let refs = reference_from_station(&path, 40.0, Control::default(), &params, &geom);
        let model = ControlModel::new(geom, slip, 1.0);
        let traj = ShootingTrajectory::rollout(&model, &x0, vec![Control::new(0.05, 0.0); cfg.horizon], cfg.dt).unwrap();
        group.bench_function(BenchmarkId::from_parameter(format!("{mode:?}")), |b| {
            b.iter(|| prepare(black_box(&traj), slip, 1.0, &refs, &cfg, &geom).unwrap())
        });
    }
    group.finish();
}

/// Estimator with a full window of clean data.
fn filled_estimator(mode: ExecMode) -> (Estimator, MeasSample) {
    let geom = VehicleGeometry::default();
    let model = EstimationModel::new(geom);
    let cfg = MheConfig {
        exec: mode,
        ..MheConfig::default()
    };
    let truth = EstState::new(VehicleState::aligned(0.0, 0.0, 0.3, &geom), SlipParams::new(0.9, 0.85, 0.8), 0.05, 1.0);
    let mut z = truth.to_vector();
    let mut prior = truth;
    prior.slip = SlipParams::NO_SLIP;
    let mut est = Estimator::new(cfg.clone(), geom, prior).unwrap();
    let mut next = None;
    for k in 0..=cfg.window {
        let t = k as f64 * cfg.dt;
        let u = Control::new(0.3 * (0.5 * t).sin(), 0.25 * (0.31 * t).sin());
        let s = MeasSample {
            t,
            y: measurement_model(&EstState::from_vector(&z), &u),
            u,
            mask: ChannelMask::ALL,
        };
        if k == cfg.window {
            next = Some(s);
            break;
        }
        est.add_sample(s).unwrap();
        est.estimate().unwrap();
        est.prepare_next().unwrap();
        z = rk4_step(&model, &z, &Vector2::new(u.delta_t, u.delta_i), cfg.dt).unwrap();
    }
    (est, next.unwrap())
}

fn mhe_cycle(c: &mut Criterion) {
    let mut group = c.benchmark_group("mhe_cycle");
    for mode in MODES {
        let (est, sample) = filled_estimator(mode);
        group.bench_function(BenchmarkId::from_parameter(format!("{mode:?}")), |b| {
            b.iter_batched(
                || est.clone(),
                |mut e| {
                    e.add_sample(sample).unwrap();
                    e.estimate().unwrap();
                    e.prepare_next().unwrap()
                },
                criterion::BatchSize::SmallInput,
            )
        });
    }
    group.finish();
}

fn seed_batch(c: &mut Criterion) {
    let mut cfg = ExperimentConfig {
        duration_s: 20.0,
        record_timing: false,
        ..ExperimentConfig::default()
    };
    cfg.plant.slip = SlipSchedule::constant(SlipParams::new(0.9, 0.9, 0.9));
    let seeds: Vec<u64> = (0..8).collect();
    let mut group = c.benchmark_group("seed_batch");
    group.sample_size(10);
    for mode in MODES {
        group.bench_function(BenchmarkId::from_parameter(format!("{mode:?}")), |b| {
            b.iter(|| run_batch(&cfg, black_box(&seeds), mode))
        });
    }
    group.finish();
}

criterion_group!(benches, nmpc_prepare, mhe_cycle, seed_batch);
criterion_main!(benches);

//! Closed-loop experiments: estimator, controller and plant wired at the
//! sampling rate, with a per-cycle CSV log and summary metrics.

use std::fmt;
use std::fs;
use std::path::{Path as FsPath, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{join, map_range, ExecMode};
use crate::model::{Control, EstState, SlipParams, VehicleGeometry, VehicleState, SLIP_MAX, SLIP_MIN};
use crate::nmhe::{Estimator, MheConfig};
use crate::nmpc::{Nmpc, OcpConfig};
use crate::path::{build_eight_track, build_straight, lookahead_reference, LookaheadParams, Path, Projector, SegmentTag};
use crate::plant::{
    plant_step, ActuatorParams, DropoutSchedule, PlantConfig, PlantState, Sensor, SensorConfig,
    SlipSchedule,
};

const DEG: f64 = std::f64::consts::PI / 180.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrackKind {
    Eight,
    Straight,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackConfig {
    pub kind: TrackKind,
    /// Straight length; the whole path length for a straight track.
    pub straight_len: f64,
    pub radius: f64,
    pub lookahead: f64,
}

impl Default for TrackConfig {
    fn default() -> Self {
        Self {
            kind: TrackKind::Eight,
            straight_len: 30.0,
            radius: 10.0,
            lookahead: 1.6,
        }
    }
}

impl TrackConfig {
    pub fn build(&self) -> Result<Path> {
        match self.kind {
            TrackKind::Eight => build_eight_track(self.straight_len, self.radius),
            TrackKind::Straight => build_straight(0.0, 0.0, 0.0, self.straight_len),
        }
    }
}

/// Initial placement relative to the path.
#[derive(Debug, Clone, PartialEq)]
pub struct InitConfig {
    pub station: f64,
    /// Lateral offset of the whole vehicle, positive to the left.
    pub lateral_offset: f64,
    pub heading_offset: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            station: 5.0,
            lateral_offset: 0.0,
            heading_offset: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub track: TrackConfig,
    pub nmpc: OcpConfig,
    pub mhe: MheConfig,
    pub sensor: SensorConfig,
    pub plant: PlantConfig,
    pub init: InitConfig,
    pub geometry: VehicleGeometry,
    pub duration_s: f64,
    pub seed: u64,
    /// Cycles before this time are left out of the segment means.
    pub transient_s: f64,
    /// Write wall-clock phase timings; zeros otherwise so logs are
    /// reproducible byte for byte.
    pub record_timing: bool,
    /// Run next-cycle controller preparation and estimator preparation
    /// concurrently.
    pub concurrent: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            track: TrackConfig::default(),
            nmpc: OcpConfig::default(),
            mhe: MheConfig::default(),
            sensor: SensorConfig::default(),
            plant: PlantConfig::default(),
            init: InitConfig::default(),
            geometry: VehicleGeometry::default(),
            duration_s: 180.0,
            seed: 0,
            transient_s: 10.0,
            record_timing: true,
            concurrent: false,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return Err(Error::Config("duration_s must be positive".into()));
        }
        if !(self.transient_s >= 0.0) {
            return Err(Error::Config("transient_s must be non-negative".into()));
        }
        if (self.nmpc.dt - self.mhe.dt).abs() > 1e-12 {
            return Err(Error::Config("controller and estimator must share dt".into()));
        }
        if !(self.track.lookahead >= 0.0) {
            return Err(Error::Config("lookahead must be non-negative".into()));
        }
        self.geometry.validate()?;
        self.nmpc.validate()?;
        self.mhe.validate()?;
        self.sensor.validate()?;
        self.plant.validate()?;
        self.track.build().map(|_| ())
    }

    pub fn cycles(&self) -> usize {
        (self.duration_s / self.nmpc.dt).round() as usize
    }

    /// Parses a config file; relative file references resolve against
    /// `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: &FsPath) -> Result<Self> {
        let file: FileConfig = toml::from_str(text)?;
        file.into_config(base_dir)
    }

    pub fn from_file(path: &FsPath) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let base = path.parent().map(FsPath::to_path_buf).unwrap_or_default();
        Self::from_toml_str(&text, &base)
    }
}

// On-disk layout. Every key is optional and falls back to the defaults.

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    duration_s: f64,
    seed: u64,
    transient_s: f64,
    record_timing: bool,
    concurrent: bool,
    exec: ExecMode,
    track: TrackSection,
    vehicle: VehicleSection,
    init: InitSection,
    nmpc: NmpcSection,
    mhe: MheSection,
    sensor: SensorSection,
    plant: PlantSection,
}

impl Default for FileConfig {
    fn default() -> Self {
        let d = ExperimentConfig::default();
        Self {
            duration_s: d.duration_s,
            seed: d.seed,
            transient_s: d.transient_s,
            record_timing: d.record_timing,
            concurrent: d.concurrent,
            exec: ExecMode::Sequential,
            track: TrackSection::default(),
            vehicle: VehicleSection::default(),
            init: InitSection::default(),
            nmpc: NmpcSection::default(),
            mhe: MheSection::default(),
            sensor: SensorSection::default(),
            plant: PlantSection::default(),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrackSection {
    kind: TrackKind,
    straight_len: f64,
    radius: f64,
    lookahead: f64,
}

impl Default for TrackSection {
    fn default() -> Self {
        let d = TrackConfig::default();
        Self {
            kind: d.kind,
            straight_len: d.straight_len,
            radius: d.radius,
            lookahead: d.lookahead,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct VehicleSection {
    tractor_wheelbase: f64,
    trailer_length: f64,
    drawbar_length: f64,
}

impl Default for VehicleSection {
    fn default() -> Self {
        let g = VehicleGeometry::default();
        Self {
            tractor_wheelbase: g.tractor_wheelbase,
            trailer_length: g.trailer_length,
            drawbar_length: g.drawbar_length,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct InitSection {
    station: f64,
    lateral_offset: f64,
    heading_offset_deg: f64,
}

impl Default for InitSection {
    fn default() -> Self {
        let d = InitConfig::default();
        Self {
            station: d.station,
            lateral_offset: d.lateral_offset,
            heading_offset_deg: d.heading_offset / DEG,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct NmpcSection {
    #[serde(rename = "N")]
    horizon: usize,
    dt: f64,
    q: [f64; 6],
    r: [f64; 2],
    s: [f64; 6],
    delta_t_max_deg: f64,
    delta_i_max_deg: f64,
}

impl Default for NmpcSection {
    fn default() -> Self {
        let d = OcpConfig::default();
        Self {
            horizon: d.horizon,
            dt: d.dt,
            q: d.q,
            r: d.r,
            s: d.s,
            delta_t_max_deg: d.u_max.delta_t / DEG,
            delta_i_max_deg: d.u_max.delta_i / DEG,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct MheSection {
    #[serde(rename = "M")]
    window: usize,
    sigma_pos: f64,
    sigma_beta: f64,
    sigma_v: f64,
    sigma_delta: f64,
    prior_sigma: [f64; 11],
    process_sigma: [f64; 11],
}

impl Default for MheSection {
    fn default() -> Self {
        let d = MheConfig::default();
        Self {
            window: d.window,
            sigma_pos: d.sigma_pos,
            sigma_beta: d.sigma_beta,
            sigma_v: d.sigma_v,
            sigma_delta: d.sigma_input[0],
            prior_sigma: d.prior_sigma,
            process_sigma: d.process_sigma,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SensorSection {
    sigma_pos: f64,
    sigma_beta: f64,
    sigma_v: f64,
    sigma_delta: f64,
    resolution_deg: f64,
    dropout_probability: f64,
    dropout_schedule: Option<PathBuf>,
}

impl Default for SensorSection {
    fn default() -> Self {
        let d = SensorConfig::default();
        Self {
            sigma_pos: d.sigma_pos,
            sigma_beta: d.sigma_beta,
            sigma_v: d.sigma_v,
            sigma_delta: d.sigma_delta,
            resolution_deg: d.angle_resolution / DEG,
            dropout_probability: d.dropout_probability,
            dropout_schedule: None,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct PlantSection {
    mu: f64,
    kappa: f64,
    eta: f64,
    slip_schedule: Option<PathBuf>,
    speed_ref: f64,
    speed_tau: f64,
    substeps: usize,
    tractor_tau: f64,
    tractor_rate_deg: f64,
    trailer_tau: f64,
    trailer_rate_deg: f64,
    bypass_actuators: bool,
}

impl Default for PlantSection {
    fn default() -> Self {
        let d = PlantConfig::default();
        let (ta, tr) = (ActuatorParams::tractor(), ActuatorParams::trailer());
        Self {
            mu: 1.0,
            kappa: 1.0,
            eta: 1.0,
            slip_schedule: None,
            speed_ref: d.speed_ref,
            speed_tau: d.speed_time_constant,
            substeps: d.substeps,
            tractor_tau: ta.time_constant,
            tractor_rate_deg: ta.rate_limit / DEG,
            trailer_tau: tr.time_constant,
            trailer_rate_deg: tr.rate_limit / DEG,
            bypass_actuators: d.bypass_actuators,
        }
    }
}

impl FileConfig {
    fn into_config(self, base: &FsPath) -> Result<ExperimentConfig> {
        let resolve = |p: &PathBuf| if p.is_absolute() { p.clone() } else { base.join(p) };
        let n = &self.nmpc;
        let nmpc = OcpConfig {
            horizon: n.horizon,
            dt: n.dt,
            q: n.q,
            r: n.r,
            s: n.s,
            u_min: Control::new(-n.delta_t_max_deg * DEG, -n.delta_i_max_deg * DEG),
            u_max: Control::new(n.delta_t_max_deg * DEG, n.delta_i_max_deg * DEG),
            exec: self.exec,
        };
        let m = &self.mhe;
        let mhe = MheConfig {
            window: m.window,
            dt: n.dt,
            sigma_pos: m.sigma_pos,
            sigma_beta: m.sigma_beta,
            sigma_v: m.sigma_v,
            sigma_input: [m.sigma_delta; 2],
            prior_sigma: m.prior_sigma,
            process_sigma: m.process_sigma,
            exec: self.exec,
            ..Default::default()
        };
        let s = &self.sensor;
        let sensor = SensorConfig {
            sigma_pos: s.sigma_pos,
            sigma_beta: s.sigma_beta,
            sigma_v: s.sigma_v,
            sigma_delta: s.sigma_delta,
            angle_resolution: s.resolution_deg * DEG,
            dropout_probability: s.dropout_probability,
            dropout_schedule: s
                .dropout_schedule
                .as_ref()
                .map(|p| DropoutSchedule::from_csv(&resolve(p)))
                .transpose()?,
            seed: self.seed,
        };
        let p = &self.plant;
        let slip = match &p.slip_schedule {
            Some(path) => SlipSchedule::from_csv(&resolve(path))?,
            None => SlipSchedule::constant(SlipParams::new(p.mu, p.kappa, p.eta)),
        };
        let plant = PlantConfig {
            tractor_actuator: ActuatorParams {
                time_constant: p.tractor_tau,
                rate_limit: p.tractor_rate_deg * DEG,
                ..ActuatorParams::tractor()
            },
            trailer_actuator: ActuatorParams {
                time_constant: p.trailer_tau,
                rate_limit: p.trailer_rate_deg * DEG,
                ..ActuatorParams::trailer()
            },
            speed_ref: p.speed_ref,
            speed_time_constant: p.speed_tau,
            substeps: p.substeps,
            slip,
            bypass_actuators: p.bypass_actuators,
        };
        let v = &self.vehicle;
        let cfg = ExperimentConfig {
            track: TrackConfig {
                kind: self.track.kind,
                straight_len: self.track.straight_len,
                radius: self.track.radius,
                lookahead: self.track.lookahead,
            },
            nmpc,
            mhe,
            sensor,
            plant,
            init: InitConfig {
                station: self.init.station,
                lateral_offset: self.init.lateral_offset,
                heading_offset: self.init.heading_offset_deg * DEG,
            },
            geometry: VehicleGeometry::new(v.tractor_wheelbase, v.trailer_length, v.drawbar_length)?,
            duration_s: self.duration_s,
            seed: self.seed,
            transient_s: self.transient_s,
            record_timing: self.record_timing,
            concurrent: self.concurrent,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One row of the experiment log. Field order is the column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub t: f64,
    pub true_xt: f64,
    pub true_yt: f64,
    pub true_theta: f64,
    pub true_xi: f64,
    pub true_yi: f64,
    pub true_psi: f64,
    pub true_beta: f64,
    pub true_v: f64,
    pub true_mu: f64,
    pub true_kappa: f64,
    pub true_eta: f64,
    pub est_xt: f64,
    pub est_yt: f64,
    pub est_theta: f64,
    pub est_xi: f64,
    pub est_yi: f64,
    pub est_psi: f64,
    pub est_mu: f64,
    pub est_kappa: f64,
    pub est_eta: f64,
    pub est_beta: f64,
    pub est_v: f64,
    pub cmd_delta_t: f64,
    pub cmd_delta_i: f64,
    pub act_delta_t: f64,
    pub act_delta_i: f64,
    pub gps_masked: u8,
    pub err_tractor: f64,
    pub err_trailer: f64,
    pub seg_tag: String,
    pub t_nmpc_prep_ms: f64,
    pub t_nmpc_fb_ms: f64,
    pub t_mhe_prep_ms: f64,
    pub t_mhe_est_ms: f64,
}

pub const LOG_COLUMNS: [&str; 35] = [
    "t", "true_xt", "true_yt", "true_theta", "true_xi", "true_yi", "true_psi", "true_beta",
    "true_v", "true_mu", "true_kappa", "true_eta", "est_xt", "est_yt", "est_theta", "est_xi",
    "est_yi", "est_psi", "est_mu", "est_kappa", "est_eta", "est_beta", "est_v", "cmd_delta_t",
    "cmd_delta_i", "act_delta_t", "act_delta_i", "gps_masked", "err_tractor", "err_trailer",
    "seg_tag", "t_nmpc_prep_ms", "t_nmpc_fb_ms", "t_mhe_prep_ms", "t_mhe_est_ms",
];

pub fn write_log<W: std::io::Write>(rows: &[LogRow], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_log<R: std::io::Read>(r: R) -> Result<Vec<LogRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    if header != LOG_COLUMNS {
        return Err(Error::Config("log header does not match the expected columns".into()));
    }
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

/// Initial true state of the plant.
fn start_pose(path: &Path, cfg: &ExperimentConfig) -> VehicleState {
    let p = path.point_at(cfg.init.station);
    let (s, c) = p.heading.sin_cos();
    let off = cfg.init.lateral_offset;
    VehicleState::aligned(
        p.x - s * off,
        p.y + c * off,
        p.heading + cfg.init.heading_offset,
        &cfg.geometry,
    )
}

/// Result of a closed-loop run kept in memory.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub rows: Vec<LogRow>,
    pub report: MetricsReport,
    pub path: Path,
}

/// Runs the closed loop. Per cycle: sense, estimate, feedback, plant step,
/// then preparation of the next controller and estimator iterations.
pub fn simulate(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let path = cfg.track.build()?;
    let geom = cfg.geometry;
    let dt = cfg.nmpc.dt;
    let x0 = start_pose(&path, cfg);

    let mut plant = PlantState::new(x0, Control::default(), cfg.plant.slip.at(0.0), cfg.plant.speed_ref);
    let mut sensor = Sensor::new(SensorConfig {
        seed: cfg.seed,
        ..cfg.sensor.clone()
    })?;
    let prior = EstState::new(x0, SlipParams::NO_SLIP, 0.0, cfg.plant.speed_ref);
    let mut mhe = Estimator::new(cfg.mhe.clone(), geom, prior)?;
    let mut nmpc = Nmpc::new(cfg.nmpc.clone(), geom, &x0)?;
    let mut projector = Projector::default();
    let mode = if cfg.concurrent { ExecMode::Parallel } else { ExecMode::Sequential };

    let mut rows = Vec::with_capacity(cfg.cycles());
    let mut last_cmd = Control::default();
    let mut mhe_prep_ms = 0.0;
    for _ in 0..cfg.cycles() {
        let meas = sensor.sense(&plant);
        mhe.add_sample(meas)?;
        let est = mhe.estimate()?;
        let z = est.state;
        let steering = Control::new(
            if meas.mask.input(0) { meas.u.delta_t } else { last_cmd.delta_t },
            if meas.mask.input(1) { meas.u.delta_i } else { last_cmd.delta_i },
        );
        let params = LookaheadParams {
            lookahead: cfg.track.lookahead,
            horizon: cfg.nmpc.horizon,
            dt,
            speed: (z.slip.mu * z.v).max(0.0),
        };
        let refs = lookahead_reference(&path, &mut projector, (z.pose.xt, z.pose.yt), steering, &params, &geom);
        let fb = nmpc.feedback(&z.pose, &refs)?;
        let cmd = fb.control;
        last_cmd = cmd;

        let pt = path.project(plant.pose.xt, plant.pose.yt);
        let pi = path.project(plant.pose.xi, plant.pose.yi);
        let timing = |v: f64| if cfg.record_timing { v } else { 0.0 };
        rows.push(LogRow {
            t: plant.t,
            true_xt: plant.pose.xt,
            true_yt: plant.pose.yt,
            true_theta: plant.pose.theta,
            true_xi: plant.pose.xi,
            true_yi: plant.pose.yi,
            true_psi: plant.pose.psi,
            true_beta: plant.beta,
            true_v: plant.v,
            true_mu: plant.slip.mu,
            true_kappa: plant.slip.kappa,
            true_eta: plant.slip.eta,
            est_xt: z.pose.xt,
            est_yt: z.pose.yt,
            est_theta: z.pose.theta,
            est_xi: z.pose.xi,
            est_yi: z.pose.yi,
            est_psi: z.pose.psi,
            est_mu: z.slip.mu,
            est_kappa: z.slip.kappa,
            est_eta: z.slip.eta,
            est_beta: z.beta,
            est_v: z.v,
            cmd_delta_t: cmd.delta_t,
            cmd_delta_i: cmd.delta_i,
            act_delta_t: plant.actuators.delta_t,
            act_delta_i: plant.actuators.delta_i,
            gps_masked: u8::from(!meas.mask.gps_available()),
            err_tractor: pt.distance,
            err_trailer: pi.distance,
            seg_tag: pt.tag.as_str().to_owned(),
            t_nmpc_prep_ms: timing(fb.stats.preparation_ms),
            t_nmpc_fb_ms: timing(fb.stats.feedback_ms),
            t_mhe_prep_ms: timing(mhe_prep_ms),
            t_mhe_est_ms: timing(est.stats.estimation_ms),
        });

        plant = plant_step(&plant, &cmd, dt, &cfg.plant, &geom)?;

        // Next-cycle preparation. References come from the predicted state.
        let pred = nmpc.predicted_state();
        let refs_next = lookahead_reference(&path, &mut projector.clone(), (pred.xt, pred.yt), steering, &params, &geom);
        let (r_nmpc, r_mhe) = join(
            mode,
            || nmpc.prepare(z.slip, z.v, &refs_next),
            || mhe.prepare_next(),
        );
        r_nmpc?;
        mhe_prep_ms = r_mhe?;
    }
    let report = compute_metrics(&rows, cfg.transient_s)?;
    Ok(RunOutput { rows, report, path })
}

/// Runs an experiment and writes `log.csv`, `path.csv`, `slip_schedule.csv`
/// and `metrics.txt` into `out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &FsPath) -> Result<MetricsReport> {
    let out = simulate(cfg)?;
    fs::create_dir_all(out_dir)?;
    write_log(&out.rows, fs::File::create(out_dir.join("log.csv"))?)?;
    out.path.write_csv(fs::File::create(out_dir.join("path.csv"))?)?;
    cfg.plant.slip.write_csv(fs::File::create(out_dir.join("slip_schedule.csv"))?)?;
    fs::write(out_dir.join("metrics.txt"), out.report.to_string())?;
    Ok(out.report)
}

/// Same experiment over several seeds, possibly in parallel.
pub fn run_batch(cfg: &ExperimentConfig, seeds: &[u64], mode: ExecMode) -> Vec<Result<RunOutput>> {
    map_range(mode, seeds.len(), |i| {
        simulate(&ExperimentConfig {
            seed: seeds[i],
            ..cfg.clone()
        })
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SegmentErrors {
    pub cycles: usize,
    pub tractor_mean: f64,
    pub tractor_max: f64,
    pub trailer_mean: f64,
    pub trailer_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TimingStats {
    pub min: f64,
    pub avg: f64,
    pub max: f64,
}

impl TimingStats {
    fn of(values: impl Iterator<Item = f64>) -> Self {
        let (mut min, mut max, mut sum, mut n) = (f64::INFINITY, f64::NEG_INFINITY, 0.0, 0usize);
        for v in values {
            min = min.min(v);
            max = max.max(v);
            sum += v;
            n += 1;
        }
        if n == 0 {
            return Self::default();
        }
        Self {
            min,
            avg: sum / n as f64,
            max,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    pub cycles: usize,
    pub straight: SegmentErrors,
    pub curve: SegmentErrors,
    pub dropouts: usize,
    pub nmpc_preparation: TimingStats,
    pub nmpc_feedback: TimingStats,
    pub nmpc_overall: TimingStats,
    pub mhe_preparation: TimingStats,
    pub mhe_estimation: TimingStats,
    pub mhe_overall: TimingStats,
    /// Controller plus estimator per cycle.
    pub combined: TimingStats,
    /// Commanded controls outside the steering bounds.
    pub control_violations: usize,
    /// Slip estimates outside their bounds.
    pub slip_violations: usize,
}

fn segment(rows: &[&LogRow], tag: SegmentTag) -> SegmentErrors {
    let sel: Vec<&&LogRow> = rows.iter().filter(|r| r.seg_tag == tag.as_str()).collect();
    if sel.is_empty() {
        return SegmentErrors::default();
    }
    let n = sel.len() as f64;
    SegmentErrors {
        cycles: sel.len(),
        tractor_mean: sel.iter().map(|r| r.err_tractor).sum::<f64>() / n,
        tractor_max: sel.iter().map(|r| r.err_tractor).fold(0.0, f64::max),
        trailer_mean: sel.iter().map(|r| r.err_trailer).sum::<f64>() / n,
        trailer_max: sel.iter().map(|r| r.err_trailer).fold(0.0, f64::max),
    }
}

/// Aggregates a log. Segment means skip rows with `t < transient_s`; timing
/// and violation counts use every row.
pub fn compute_metrics(rows: &[LogRow], transient_s: f64) -> Result<MetricsReport> {
    if rows.is_empty() {
        return Err(Error::Config("empty log".into()));
    }
    let steady: Vec<&LogRow> = rows.iter().filter(|r| r.t >= transient_s - 1e-9).collect();
    let bounds = OcpConfig::default();
    let tol = 1e-12;
    let control_violations = rows
        .iter()
        .filter(|r| {
            r.cmd_delta_t.abs() > bounds.u_max.delta_t + tol || r.cmd_delta_i.abs() > bounds.u_max.delta_i + tol
        })
        .count();
    let slip_violations = rows
        .iter()
        .filter(|r| {
            [r.est_mu, r.est_kappa, r.est_eta]
                .iter()
                .any(|s| !(SLIP_MIN..=SLIP_MAX).contains(s))
        })
        .count();
    Ok(MetricsReport {
        cycles: rows.len(),
        straight: segment(&steady, SegmentTag::Straight),
        curve: segment(&steady, SegmentTag::Curve),
        dropouts: rows.iter().filter(|r| r.gps_masked != 0).count(),
        nmpc_preparation: TimingStats::of(rows.iter().map(|r| r.t_nmpc_prep_ms)),
        nmpc_feedback: TimingStats::of(rows.iter().map(|r| r.t_nmpc_fb_ms)),
        nmpc_overall: TimingStats::of(rows.iter().map(|r| r.t_nmpc_prep_ms + r.t_nmpc_fb_ms)),
        mhe_preparation: TimingStats::of(rows.iter().map(|r| r.t_mhe_prep_ms)),
        mhe_estimation: TimingStats::of(rows.iter().map(|r| r.t_mhe_est_ms)),
        mhe_overall: TimingStats::of(rows.iter().map(|r| r.t_mhe_prep_ms + r.t_mhe_est_ms)),
        combined: TimingStats::of(
            rows.iter()
                .map(|r| r.t_nmpc_prep_ms + r.t_nmpc_fb_ms + r.t_mhe_prep_ms + r.t_mhe_est_ms),
        ),
        control_violations,
        slip_violations,
    })
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "cycles            {}", self.cycles)?;
        writeln!(f, "gps dropouts      {}", self.dropouts)?;
        writeln!(f, "segment   cycles  tractor mean/max [m]   trailer mean/max [m]")?;
        for (name, s) in [("straight", &self.straight), ("curve", &self.curve)] {
            writeln!(
                f,
                "{name:<9} {:>6}  {:>8.4} / {:<8.4}    {:>8.4} / {:<8.4}",
                s.cycles, s.tractor_mean, s.tractor_max, s.trailer_mean, s.trailer_max
            )?;
        }
        writeln!(f, "timing [ms]               min       avg       max")?;
        for (name, t) in [
            ("nmpc preparation", &self.nmpc_preparation),
            ("nmpc feedback", &self.nmpc_feedback),
            ("nmpc overall", &self.nmpc_overall),
            ("mhe preparation", &self.mhe_preparation),
            ("mhe estimation", &self.mhe_estimation),
            ("mhe overall", &self.mhe_overall),
            ("combined", &self.combined),
        ] {
            writeln!(f, "{name:<20} {:>9.4} {:>9.4} {:>9.4}", t.min, t.avg, t.max)?;
        }
        writeln!(f, "control violations {}", self.control_violations)?;
        write!(f, "slip violations    {}", self.slip_violations)
    }
}

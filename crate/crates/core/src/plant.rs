//! Ground-truth plant and sensor synthesis for closed-loop runs.

use std::io::{Read, Write};
use std::path::Path as FsPath;

use nalgebra::SVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    hitch_closure, pose_rates, Control, SlipParams, VehicleGeometry, VehicleState,
    MAX_TRACTOR_STEER, MAX_TRAILER_STEER,
};
use crate::nmhe::{ChannelMask, MeasSample, Vec6};

const DEG: f64 = std::f64::consts::PI / 180.0;

/// Transient allowance beyond the mechanical steering limit.
pub const ACTUATOR_OVERSHOOT: f64 = DEG;

/// Low-level steering loop abstracted as lag plus slew limit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActuatorParams {
    pub time_constant: f64,
    pub rate_limit: f64,
    pub limit: f64,
}

impl ActuatorParams {
    pub fn tractor() -> Self {
        Self {
            time_constant: 0.15,
            rate_limit: 30.0 * DEG,
            limit: MAX_TRACTOR_STEER,
        }
    }

    pub fn trailer() -> Self {
        Self {
            time_constant: 0.4,
            rate_limit: 15.0 * DEG,
            limit: MAX_TRAILER_STEER,
        }
    }
}

/// One actuator update over `dt`: exact first-order lag toward `command`,
/// slew-limited, then clamped to the mechanical limit plus the allowance.
pub fn actuator_step(current: f64, command: f64, dt: f64, p: &ActuatorParams) -> f64 {
    let lagged = current + (command - current) * (1.0 - (-dt / p.time_constant).exp());
    let max_move = p.rate_limit * dt;
    let moved = current + (lagged - current).clamp(-max_move, max_move);
    let bound = p.limit + ACTUATOR_OVERSHOOT;
    moved.clamp(-bound, bound)
}

/// Piecewise-constant true slip over time.
#[derive(Debug, Clone, PartialEq)]
pub struct SlipSchedule {
    entries: Vec<(f64, SlipParams)>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SlipRow {
    t_start_s: f64,
    mu: f64,
    kappa: f64,
    eta: f64,
}

impl SlipSchedule {
    pub fn constant(p: SlipParams) -> Self {
        Self {
            entries: vec![(f64::NEG_INFINITY, p)],
        }
    }

    /// Entries must have strictly increasing start times.
    pub fn new(mut entries: Vec<(f64, SlipParams)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Config("slip schedule is empty".into()));
        }
        if entries.windows(2).any(|w| !(w[1].0 > w[0].0)) {
            return Err(Error::Config("slip schedule start times must increase".into()));
        }
        if entries
            .iter()
            .any(|(t, p)| t.is_nan() || ![p.mu, p.kappa, p.eta].iter().all(|c| c.is_finite() && *c > 0.0))
        {
            return Err(Error::Config("slip schedule values must be positive".into()));
        }
        // Before the first entry the first value holds.
        entries[0].0 = f64::NEG_INFINITY;
        Ok(Self { entries })
    }

    pub fn at(&self, t: f64) -> SlipParams {
        let idx = self.entries.partition_point(|(s, _)| *s <= t);
        self.entries[idx.saturating_sub(1)].1
    }

    pub fn entries(&self) -> &[(f64, SlipParams)] {
        &self.entries
    }

    pub fn from_reader<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
        let mut entries = Vec::new();
        for row in rdr.deserialize() {
            let row: SlipRow = row?;
            entries.push((row.t_start_s, SlipParams::new(row.mu, row.kappa, row.eta)));
        }
        Self::new(entries)
    }

    pub fn from_csv(path: &FsPath) -> Result<Self> {
        Self::from_reader(std::fs::File::open(path)?)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        for (i, (t, p)) in self.entries.iter().enumerate() {
            wtr.serialize(SlipRow {
                t_start_s: if i == 0 { 0.0 } else { *t },
                mu: p.mu,
                kappa: p.kappa,
                eta: p.eta,
            })?;
        }
        wtr.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantConfig {
    pub tractor_actuator: ActuatorParams,
    pub trailer_actuator: ActuatorParams,
    pub speed_ref: f64,
    pub speed_time_constant: f64,
    pub substeps: usize,
    pub slip: SlipSchedule,
    /// Apply commands directly, skipping the steering loops.
    pub bypass_actuators: bool,
}

impl Default for PlantConfig {
    fn default() -> Self {
        Self {
            tractor_actuator: ActuatorParams::tractor(),
            trailer_actuator: ActuatorParams::trailer(),
            speed_ref: 1.0,
            speed_time_constant: 0.5,
            substeps: 10,
            slip: SlipSchedule::constant(SlipParams::NO_SLIP),
            bypass_actuators: false,
        }
    }
}

impl PlantConfig {
    pub fn validate(&self) -> Result<()> {
        let acts = [self.tractor_actuator, self.trailer_actuator];
        if acts
            .iter()
            .any(|a| !(a.time_constant > 0.0 && a.rate_limit > 0.0 && a.limit > 0.0))
        {
            return Err(Error::Config("actuator parameters must be positive".into()));
        }
        if !(self.speed_time_constant > 0.0) || !self.speed_ref.is_finite() || self.substeps == 0 {
            return Err(Error::Config("invalid speed loop or substep count".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantState {
    pub t: f64,
    pub pose: VehicleState,
    /// Integrated hitch angle.
    pub beta: f64,
    pub actuators: Control,
    pub slip: SlipParams,
    pub v: f64,
}

impl PlantState {
    pub fn new(pose: VehicleState, actuators: Control, slip: SlipParams, v: f64) -> Self {
        Self {
            t: 0.0,
            beta: hitch_closure(pose.theta, pose.psi, actuators.delta_i),
            pose,
            actuators,
            slip,
            v,
        }
    }
}

type Aug = SVector<f64, 8>;

fn aug_rates(x: &Aug, u: &Control, slip: &SlipParams, cfg: &PlantConfig, geom: &VehicleGeometry) -> Result<Aug> {
    let pose = VehicleState::from_vector(&x.fixed_rows::<6>(0).into_owned());
    let d = pose_rates(&pose, x[6], u, slip, x[7], geom)?;
    let mut out = Aug::zeros();
    out.fixed_rows_mut::<6>(0).copy_from(&d);
    out[6] = d[2] - d[5];
    out[7] = (cfg.speed_ref - x[7]) / cfg.speed_time_constant;
    Ok(out)
}

/// Advances the plant by one control period. Actuators move first in every
/// substep; the kinematics then take an RK4 substep with the actuator angles
/// held. The hitch angle follows `theta' - psi' - delta_i'`.
pub fn plant_step(
    ps: &PlantState,
    commands: &Control,
    dt: f64,
    cfg: &PlantConfig,
    geom: &VehicleGeometry,
) -> Result<PlantState> {
    if !(dt > 0.0) {
        return Err(Error::Config("plant step needs dt > 0".into()));
    }
    let h = dt / cfg.substeps as f64;
    let mut s = *ps;
    for k in 0..cfg.substeps {
        let t = ps.t + k as f64 * h;
        let slip = cfg.slip.at(t);
        let prev_di = s.actuators.delta_i;
        s.actuators = if cfg.bypass_actuators {
            *commands
        } else {
            Control::new(
                actuator_step(s.actuators.delta_t, commands.delta_t, h, &cfg.tractor_actuator),
                actuator_step(s.actuators.delta_i, commands.delta_i, h, &cfg.trailer_actuator),
            )
        };
        s.beta -= s.actuators.delta_i - prev_di;
        let mut x = Aug::zeros();
        x.fixed_rows_mut::<6>(0).copy_from(&s.pose.to_vector());
        x[6] = s.beta;
        x[7] = s.v;
        let u = s.actuators;
        let k1 = aug_rates(&x, &u, &slip, cfg, geom)?;
        let k2 = aug_rates(&(x + k1 * (h / 2.0)), &u, &slip, cfg, geom)?;
        let k3 = aug_rates(&(x + k2 * (h / 2.0)), &u, &slip, cfg, geom)?;
        let k4 = aug_rates(&(x + k3 * h), &u, &slip, cfg, geom)?;
        x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        s.pose = VehicleState::from_vector(&x.fixed_rows::<6>(0).into_owned());
        s.beta = x[6];
        s.v = x[7];
        s.slip = slip;
    }
    s.t = ps.t + dt;
    s.slip = cfg.slip.at(s.t);
    Ok(s)
}

/// GPS outage intervals `[t_start_s, t_end_s)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DropoutSchedule {
    pub intervals: Vec<(f64, f64)>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DropoutRow {
    t_start_s: f64,
    t_end_s: f64,
}

impl DropoutSchedule {
    pub fn contains(&self, t: f64) -> bool {
        // Sample times are multiples of dt; a small slack avoids edge jitter.
        self.intervals
            .iter()
            .any(|(a, b)| t >= a - 1e-9 && t < b - 1e-9)
    }

    pub fn from_reader<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
        let mut intervals = Vec::new();
        for row in rdr.deserialize() {
            let row: DropoutRow = row?;
            if !(row.t_end_s >= row.t_start_s) {
                return Err(Error::Config(format!(
                    "dropout interval ends before it starts at t={}",
                    row.t_start_s
                )));
            }
            intervals.push((row.t_start_s, row.t_end_s));
        }
        Ok(Self { intervals })
    }

    pub fn from_csv(path: &FsPath) -> Result<Self> {
        Self::from_reader(std::fs::File::open(path)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensorConfig {
    pub sigma_pos: f64,
    pub sigma_beta: f64,
    pub sigma_v: f64,
    pub sigma_delta: f64,
    /// Resolution of the steering and hitch angle sensors.
    pub angle_resolution: f64,
    pub dropout_probability: f64,
    /// Replaces the random dropouts when set.
    pub dropout_schedule: Option<DropoutSchedule>,
    pub seed: u64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            sigma_pos: 0.03,
            sigma_beta: 0.0175,
            sigma_v: 0.1,
            sigma_delta: 0.0175,
            angle_resolution: DEG,
            dropout_probability: 11.0 / 871.0,
            dropout_schedule: None,
            seed: 0,
        }
    }
}

impl SensorConfig {
    pub fn noiseless() -> Self {
        Self {
            sigma_pos: 0.0,
            sigma_beta: 0.0,
            sigma_v: 0.0,
            sigma_delta: 0.0,
            dropout_probability: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = [self.sigma_pos, self.sigma_beta, self.sigma_v, self.sigma_delta, self.angle_resolution];
        if s.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("sensor noise and resolution must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.dropout_probability) {
            return Err(Error::Config("dropout probability must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

pub fn quantize(x: f64, resolution: f64) -> f64 {
    if resolution > 0.0 {
        (x / resolution).round() * resolution
    } else {
        x
    }
}

/// Seeded sensor model. Every call consumes the same number of random draws,
/// so runs are reproducible whatever the dropout outcome.
#[derive(Debug, Clone)]
pub struct Sensor {
    pub cfg: SensorConfig,
    rng: ChaCha8Rng,
}

impl Sensor {
    pub fn new(cfg: SensorConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
        })
    }

    fn gauss(&mut self, sigma: f64) -> f64 {
        let n: f64 = self.rng.sample(StandardNormal);
        n * sigma
    }

    pub fn sense(&mut self, ps: &PlantState) -> MeasSample {
        let c = self.cfg.clone();
        let p = &ps.pose;
        let y = Vec6::new(
            p.xt + self.gauss(c.sigma_pos),
            p.yt + self.gauss(c.sigma_pos),
            p.xi + self.gauss(c.sigma_pos),
            p.yi + self.gauss(c.sigma_pos),
            quantize(ps.beta + self.gauss(c.sigma_beta), c.angle_resolution),
            ps.v + self.gauss(c.sigma_v),
        );
        let u = Control::new(
            quantize(ps.actuators.delta_t + self.gauss(c.sigma_delta), c.angle_resolution),
            quantize(ps.actuators.delta_i + self.gauss(c.sigma_delta), c.angle_resolution),
        );
        let draw: f64 = self.rng.random();
        let dropped = match &c.dropout_schedule {
            Some(s) => s.contains(ps.t),
            None => draw < c.dropout_probability,
        };
        let mask = if dropped {
            ChannelMask::ALL.without(ChannelMask::GPS)
        } else {
            ChannelMask::ALL
        };
        MeasSample { t: ps.t, y, u, mask }
    }
}

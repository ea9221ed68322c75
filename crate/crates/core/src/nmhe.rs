//! Moving horizon estimation of the eleven-entry estimator state.
//!
//! Each sampling instant performs one constrained Gauss-Newton iteration on
//! the window of the last `M` samples. Decision variables are the state at
//! the window start and the inputs on every interval; the node states follow
//! by simulation, so the condensed problem is a dense box QP whose only finite
//! bounds are the slip limits.
//!
//! Information older than the window is summarized by the arrival cost, a
//! prior with a square-root information factor. When a sample leaves the
//! window it is folded into that factor by a square-root EKF measurement
//! update followed by a time update with process noise, linearized at the
//! current solution.

use std::collections::VecDeque;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, SMatrix, SVector, Vector2};

use crate::error::{Error, Result};
use crate::exec::{map_range, ExecMode};
use crate::model::{
    rk4_step, step_jacobians, Control, EstState, EstimationModel, SlipParams, StateJacobians,
    Vec11, VehicleGeometry, SLIP_MAX, SLIP_MIN,
};
use crate::qp::{BoundState, BoxQpSolver, DenseBoxQp, QpStatus};

pub type Mat11 = SMatrix<f64, 11, 11>;
pub type Vec6 = SVector<f64, 6>;

/// Number of measured outputs `(xt, yt, xi, yi, beta, v)`.
pub const N_OUTPUTS: usize = 6;

/// Estimator-state index of each measured output.
pub const OUTPUT_INDEX: [usize; N_OUTPUTS] = [0, 1, 3, 4, EstState::BETA, EstState::V];

const SLIP_INDEX: [usize; 3] = [EstState::MU, EstState::KAPPA, EstState::ETA];

/// Availability bits: outputs in bits 0..6, inputs in bits 6..8.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ChannelMask(u8);

impl ChannelMask {
    pub const ALL: Self = Self(0xff);
    pub const NONE: Self = Self(0);
    /// The four satellite position channels.
    pub const GPS: Self = Self(0b1111);

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn from_bits(bits: u8) -> Self {
        Self(bits)
    }

    pub fn output(self, i: usize) -> bool {
        self.0 & (1 << i) != 0
    }

    pub fn input(self, j: usize) -> bool {
        self.0 & (1 << (N_OUTPUTS + j)) != 0
    }

    pub fn without(self, other: Self) -> Self {
        Self(self.0 & !other.0)
    }

    pub fn gps_available(self) -> bool {
        self.0 & Self::GPS.0 == Self::GPS.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasSample {
    pub t: f64,
    /// `(xt, yt, xi, yi, beta, v)`.
    pub y: Vec6,
    /// Measured steering angles.
    pub u: Control,
    pub mask: ChannelMask,
}

/// Output map: a plain selection of six estimator-state entries.
pub fn measurement_model(z: &EstState, _u: &Control) -> Vec6 {
    let v = z.to_vector();
    Vec6::from_fn(|i, _| v[OUTPUT_INDEX[i]])
}

pub fn measurement_jacobian() -> SMatrix<f64, 6, 11> {
    SMatrix::from_fn(|i, j| if OUTPUT_INDEX[i] == j { 1.0 } else { 0.0 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MheConfig {
    /// Samples in the window.
    pub window: usize,
    pub dt: f64,
    pub sigma_pos: f64,
    pub sigma_beta: f64,
    pub sigma_v: f64,
    /// Steering measurement std devs `(delta_t, delta_i)`.
    pub sigma_input: [f64; 2],
    /// Initial arrival prior std devs, estimator-state order.
    pub prior_sigma: [f64; 11],
    /// Per-step process noise std devs for the arrival-cost time update.
    pub process_sigma: [f64; 11],
    pub slip_min: f64,
    pub slip_max: f64,
    pub exec: ExecMode,
}

impl Default for MheConfig {
    fn default() -> Self {
        Self {
            window: 20,
            dt: 0.2,
            sigma_pos: 0.03,
            sigma_beta: 0.0175,
            sigma_v: 0.1,
            sigma_input: [0.0175, 0.0175],
            prior_sigma: [10.0, 10.0, 0.1, 10.0, 10.0, 0.1, 0.25, 0.25, 0.25, 0.1745, 0.1],
            process_sigma: [0.01, 0.01, 0.01, 0.01, 0.01, 0.01, 0.005, 0.005, 0.005, 0.01, 0.05],
            slip_min: SLIP_MIN,
            slip_max: SLIP_MAX,
            exec: ExecMode::Sequential,
        }
    }
}

impl MheConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 1 {
            return Err(Error::Config("mhe window must hold at least one sample".into()));
        }
        if !(self.dt > 0.0) {
            return Err(Error::Config("mhe dt must be positive".into()));
        }
        let sig = [self.sigma_pos, self.sigma_beta, self.sigma_v];
        let all = sig
            .iter()
            .chain(self.sigma_input.iter())
            .chain(self.prior_sigma.iter())
            .chain(self.process_sigma.iter());
        if all.clone().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Config("mhe standard deviations must be positive".into()));
        }
        if !(self.slip_min <= self.slip_max) {
            return Err(Error::Config("mhe slip bounds cross".into()));
        }
        Ok(())
    }

    pub fn output_sigma(&self) -> [f64; N_OUTPUTS] {
        let p = self.sigma_pos;
        [p, p, p, p, self.sigma_beta, self.sigma_v]
    }
}

/// Fixed-capacity buffer of equally spaced samples.
#[derive(Debug, Clone)]
pub struct EstimationWindow {
    samples: VecDeque<MeasSample>,
    capacity: usize,
    dt: f64,
}

impl EstimationWindow {
    pub fn new(capacity: usize, dt: f64) -> Self {
        Self {
            samples: VecDeque::with_capacity(capacity + 1),
            capacity,
            dt,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.samples.len() >= self.capacity
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn samples(&self) -> &VecDeque<MeasSample> {
        &self.samples
    }

    pub fn back(&self) -> Option<&MeasSample> {
        self.samples.back()
    }

    /// Checks spacing; the caller evicts before pushing into a full window.
    fn check_next(&self, s: &MeasSample) -> Result<()> {
        if let Some(last) = self.samples.back() {
            if (s.t - last.t - self.dt).abs() > 1e-6 {
                return Err(Error::Timestamp {
                    last: last.t,
                    got: s.t,
                });
            }
        }
        Ok(())
    }

    fn push(&mut self, s: MeasSample) {
        self.samples.push_back(s);
    }

    fn pop_front(&mut self) -> Option<MeasSample> {
        self.samples.pop_front()
    }
}

/// Prior at the window start with an upper-triangular factor `L` of its
/// information matrix, `L'L`.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrivalCost {
    pub prior: Vec11,
    pub sqrt_weight: Mat11,
}

impl ArrivalCost {
    pub fn new(prior: &EstState, sigma: &[f64; 11]) -> Self {
        Self {
            prior: prior.to_vector(),
            sqrt_weight: Mat11::from_diagonal(&Vec11::from_fn(|i, _| 1.0 / sigma[i])),
        }
    }

    pub fn information(&self) -> Mat11 {
        self.sqrt_weight.transpose() * self.sqrt_weight
    }

    pub fn covariance(&self) -> Option<Mat11> {
        self.information().try_inverse()
    }
}

/// Upper-triangular `R` from the QR factorization of a tall matrix, with a
/// non-negative diagonal.
fn upper_factor(stacked: DMatrix<f64>, n: usize) -> DMatrix<f64> {
    let r = stacked.qr().r();
    let mut out = DMatrix::zeros(n, n);
    let rows = r.nrows().min(n);
    out.view_mut((0, 0), (rows, n)).copy_from(&r.view((0, 0), (rows, n)));
    for i in 0..n {
        if out[(i, i)] < 0.0 {
            out.row_mut(i).neg_mut();
        }
    }
    out
}

fn to_mat11(m: &DMatrix<f64>) -> Mat11 {
    Mat11::from_fn(|i, j| m[(i, j)])
}

/// Information-form measurement update: triangular factor of `[L; W C]`,
/// where `weighted_rows` already holds `W C`.
pub fn sqrt_measurement_update(l: &Mat11, weighted_rows: &DMatrix<f64>) -> Mat11 {
    let k = weighted_rows.nrows();
    let mut stacked = DMatrix::zeros(11 + k, 11);
    stacked.view_mut((0, 0), (11, 11)).copy_from(l);
    if k > 0 {
        stacked.view_mut((11, 0), (k, 11)).copy_from(weighted_rows);
    }
    to_mat11(&upper_factor(stacked, 11))
}

/// Time update `P <- A P A' + G G'` carried out on square-root factors.
///
/// With `F = L^-T` (so `F'F = P`), the covariance factor of the prediction
/// is the triangular part of `[F A'; G']`; it is then turned back into an
/// upper information factor. Returns the factor and whether a vanishing
/// pivot had to be floored.
pub fn sqrt_time_update(l: &Mat11, a: &Mat11, noise_sqrt: &DMatrix<f64>) -> (Mat11, bool) {
    let mut rank_loss = false;
    let mut l = *l;
    let scale = l.diagonal().amax().max(f64::MIN_POSITIVE);
    for i in 0..11 {
        if l[(i, i)].abs() < 1e-12 * scale {
            l[(i, i)] = 1e-12 * scale;
            rank_loss = true;
        }
    }
    let f = l
        .transpose()
        .solve_lower_triangular(&Mat11::identity())
        .expect("pivots floored above");
    let p = noise_sqrt.ncols();
    let mut stacked = DMatrix::zeros(11 + p, 11);
    stacked
        .view_mut((0, 0), (11, 11))
        .copy_from(&(f * a.transpose()));
    stacked
        .view_mut((11, 0), (p, 11))
        .copy_from(&noise_sqrt.transpose());
    let mut r = to_mat11(&upper_factor(stacked, 11));
    let rscale = r.diagonal().amax().max(f64::MIN_POSITIVE);
    for i in 0..11 {
        if r[(i, i)] < 1e-12 * rscale {
            r[(i, i)] = 1e-12 * rscale;
            rank_loss = true;
        }
    }
    // Information = R^-1 R^-T; re-triangularize R^-T.
    let r_inv_t = r
        .transpose()
        .solve_lower_triangular(&Mat11::identity())
        .expect("pivots floored above");
    let out = to_mat11(&upper_factor(DMatrix::from_column_slice(11, 11, r_inv_t.as_slice()), 11));
    (out, rank_loss)
}

/// Linearization of the oldest window interval at the current solution.
#[derive(Debug, Clone)]
pub struct ArrivalLinearization {
    pub jacobians: StateJacobians<11>,
    /// Solution value at the next window start, which becomes the new prior.
    pub next_prior: Vec11,
}

#[derive(Debug, Clone)]
pub struct ArrivalUpdate {
    pub cost: ArrivalCost,
    pub rank_deficient: bool,
}

/// Folds an evicted sample into the arrival cost.
pub fn update_arrival_cost(
    arr: &ArrivalCost,
    evicted: &MeasSample,
    lin: &ArrivalLinearization,
    cfg: &MheConfig,
) -> ArrivalUpdate {
    let sig = cfg.output_sigma();
    let rows: Vec<usize> = (0..N_OUTPUTS).filter(|&i| evicted.mask.output(i)).collect();
    let mut weighted = DMatrix::zeros(rows.len(), 11);
    for (r, &i) in rows.iter().enumerate() {
        weighted[(r, OUTPUT_INDEX[i])] = 1.0 / sig[i];
    }
    let l_meas = sqrt_measurement_update(&arr.sqrt_weight, &weighted);
    let noise = process_noise_sqrt(&lin.jacobians.d_control, cfg);
    let (l_new, rank_deficient) = sqrt_time_update(&l_meas, &lin.jacobians.d_state, &noise);
    ArrivalUpdate {
        cost: ArrivalCost {
            prior: lin.next_prior,
            sqrt_weight: l_new,
        },
        rank_deficient,
    }
}

/// `G` with `G G' = B Su B' + Qp`: input uncertainty pushed through the
/// control sensitivity plus diagonal process noise.
pub fn process_noise_sqrt(b: &SMatrix<f64, 11, 2>, cfg: &MheConfig) -> DMatrix<f64> {
    let mut g = DMatrix::zeros(11, 13);
    for j in 0..2 {
        for i in 0..11 {
            g[(i, j)] = b[(i, j)] * cfg.sigma_input[j];
        }
    }
    for i in 0..11 {
        g[(i, 2 + i)] = cfg.process_sigma[i];
    }
    g
}

/// Node states and interval inputs over the window.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WindowTrajectory {
    pub nodes: Vec<Vec11>,
    pub controls: Vec<Vector2<f64>>,
}

impl WindowTrajectory {
    pub fn rollout(model: &EstimationModel, z0: Vec11, controls: Vec<Vector2<f64>>, dt: f64) -> Result<Self> {
        let mut nodes = Vec::with_capacity(controls.len() + 1);
        nodes.push(z0);
        for w in &controls {
            let next = rk4_step(model, nodes.last().unwrap(), w, dt)?;
            nodes.push(next);
        }
        Ok(Self { nodes, controls })
    }

    pub fn terminal(&self) -> Option<EstState> {
        self.nodes.last().map(EstState::from_vector)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MheStats {
    pub preparation_ms: f64,
    pub estimation_ms: f64,
    pub kkt_residual: f64,
    pub qp_iterations: usize,
    /// Slip entries `(mu, kappa, eta)` resting on a bound.
    pub clamped: [bool; 3],
    pub degraded: bool,
    pub arrival_rank_loss: bool,
}

#[derive(Debug, Clone)]
pub struct EstimateOutput {
    pub state: EstState,
    pub slip: SlipParams,
    pub trajectory: WindowTrajectory,
    pub stats: MheStats,
}

/// Condensed least-squares problem for the current window.
#[derive(Debug, Clone)]
struct Linearization {
    /// Sensitivity of every node to the decision vector.
    gamma: Vec<DMatrix<f64>>,
    /// Node values for a zero step.
    base: Vec<Vec11>,
    h: DMatrix<f64>,
    g: DVector<f64>,
    /// Samples whose output rows are already in `h` and `g`.
    samples_included: usize,
}

#[derive(Debug, Clone)]
pub struct Estimator {
    pub cfg: MheConfig,
    model: EstimationModel,
    window: EstimationWindow,
    arrival: ArrivalCost,
    traj: WindowTrajectory,
    lin: Option<Linearization>,
    /// The guess holds one node more than the window has samples.
    pending_node: bool,
    last: Option<EstState>,
    preparation_ms: f64,
    arrival_rank_loss: bool,
}

impl Estimator {
    pub fn new(cfg: MheConfig, geom: VehicleGeometry, initial: EstState) -> Result<Self> {
        cfg.validate()?;
        geom.validate()?;
        let arrival = ArrivalCost::new(&initial, &cfg.prior_sigma);
        Ok(Self {
            window: EstimationWindow::new(cfg.window, cfg.dt),
            model: EstimationModel::new(geom),
            arrival,
            traj: WindowTrajectory::default(),
            lin: None,
            pending_node: false,
            last: None,
            preparation_ms: 0.0,
            arrival_rank_loss: false,
            cfg,
        })
    }

    pub fn window(&self) -> &EstimationWindow {
        &self.window
    }

    pub fn arrival(&self) -> &ArrivalCost {
        &self.arrival
    }

    pub fn set_arrival(&mut self, arrival: ArrivalCost) {
        self.arrival = arrival;
        self.lin = None;
    }

    pub fn trajectory(&self) -> &WindowTrajectory {
        &self.traj
    }

    pub fn set_trajectory(&mut self, traj: WindowTrajectory) {
        self.traj = traj;
        self.lin = None;
    }

    pub fn last_estimate(&self) -> Option<EstState> {
        self.last
    }

    /// Folds the oldest sample into the arrival cost and drops it.
    fn absorb_oldest(&mut self) -> Result<()> {
        if self.window.is_empty() {
            return Ok(());
        }
        if self.traj.nodes.len() >= 2 && !self.traj.controls.is_empty() {
            let jac = step_jacobians(&self.model, &self.traj.nodes[0], &self.traj.controls[0], self.cfg.dt)?;
            let lin = ArrivalLinearization {
                jacobians: jac,
                next_prior: self.traj.nodes[1],
            };
            let evicted = self.window.samples()[0];
            let upd = update_arrival_cost(&self.arrival, &evicted, &lin, &self.cfg);
            self.arrival = upd.cost;
            self.arrival_rank_loss |= upd.rank_deficient;
            self.traj.nodes.remove(0);
            self.traj.controls.remove(0);
        }
        self.window.pop_front();
        self.lin = None;
        Ok(())
    }

    /// Appends a predicted node for the next sample, driven by the last
    /// measured input.
    fn extend_guess(&mut self) {
        if self.traj.nodes.is_empty() {
            self.traj.nodes.push(self.arrival.prior);
            self.pending_node = true;
            return;
        }
        let last_node = *self.traj.nodes.last().unwrap();
        let w = match self.window.back() {
            Some(s) => {
                let prev = self.traj.controls.last().copied().unwrap_or_else(Vector2::zeros);
                Vector2::new(
                    if s.mask.input(0) { s.u.delta_t } else { prev[0] },
                    if s.mask.input(1) { s.u.delta_i } else { prev[1] },
                )
            }
            None => Vector2::zeros(),
        };
        let next = rk4_step(&self.model, &last_node, &w, self.cfg.dt).unwrap_or(last_node);
        self.traj.controls.push(w);
        self.traj.nodes.push(next);
        self.pending_node = true;
    }

    /// Preparation phase for the next sample: slide the window if it is full,
    /// predict the next node and linearize everything that does not depend on
    /// the coming measurement. Returns the elapsed milliseconds.
    pub fn prepare_next(&mut self) -> Result<f64> {
        let start = Instant::now();
        if self.window.is_full() {
            self.absorb_oldest()?;
        }
        if !self.pending_node {
            self.extend_guess();
        }
        self.lin = self.linearize(self.window.len()).ok();
        self.preparation_ms = start.elapsed().as_secs_f64() * 1e3;
        Ok(self.preparation_ms)
    }

    pub fn add_sample(&mut self, s: MeasSample) -> Result<()> {
        self.window.check_next(&s)?;
        if self.window.is_full() {
            self.absorb_oldest()?;
        }
        if !self.pending_node {
            self.extend_guess();
            self.lin = None;
        }
        self.window.push(s);
        self.pending_node = false;
        Ok(())
    }

    fn decision_dim(&self) -> usize {
        11 + 2 * self.traj.controls.len()
    }

    /// Builds sensitivities and the Gauss-Newton system including the output
    /// rows of the first `samples` samples.
    fn linearize(&self, samples: usize) -> Result<Linearization> {
        let m = self.traj.nodes.len();
        if m == 0 {
            return Err(Error::EmptyWindow);
        }
        let n = self.decision_dim();
        let dt = self.cfg.dt;
        let jac = map_range(self.cfg.exec, m - 1, |j| {
            step_jacobians(&self.model, &self.traj.nodes[j], &self.traj.controls[j], dt)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

        let mut gamma = Vec::with_capacity(m);
        let mut base = Vec::with_capacity(m);
        let mut g0 = DMatrix::zeros(11, n);
        g0.view_mut((0, 0), (11, 11)).fill_with_identity();
        gamma.push(g0);
        base.push(self.traj.nodes[0]);
        for (j, jj) in jac.iter().enumerate() {
            let a = DMatrix::from_column_slice(11, 11, jj.d_state.as_slice());
            let mut next = &a * &gamma[j];
            let col = 11 + 2 * j;
            for r in 0..11 {
                next[(r, col)] += jj.d_control[(r, 0)];
                next[(r, col + 1)] += jj.d_control[(r, 1)];
            }
            gamma.push(next);
            base.push(jj.next + jj.d_state * (base[j] - self.traj.nodes[j]));
        }

        // Residual rows: arrival, inputs, then outputs per sample.
        let sig_y = self.cfg.output_sigma();
        let samples_vec: Vec<&MeasSample> = self.window.samples().iter().collect();
        let mut rows: Vec<(DVector<f64>, f64)> = Vec::new();
        let l = &self.arrival.sqrt_weight;
        let r0 = l * (base[0] - self.arrival.prior);
        for i in 0..11 {
            let mut row = DVector::zeros(n);
            for k in 0..11 {
                row[k] = l[(i, k)];
            }
            rows.push((row, r0[i]));
        }
        for j in 0..m - 1 {
            let Some(s) = samples_vec.get(j) else { break };
            for c in 0..2 {
                if s.mask.input(c) {
                    let mut row = DVector::zeros(n);
                    row[11 + 2 * j + c] = 1.0 / self.cfg.sigma_input[c];
                    let meas = if c == 0 { s.u.delta_t } else { s.u.delta_i };
                    rows.push((row, (self.traj.controls[j][c] - meas) / self.cfg.sigma_input[c]));
                }
            }
        }
        let mut h = DMatrix::zeros(n, n);
        let mut g = DVector::zeros(n);
        accumulate(&mut h, &mut g, &rows);
        let mut lin = Linearization {
            gamma,
            base,
            h,
            g,
            samples_included: 0,
        };
        for j in 0..samples.min(samples_vec.len()).min(m) {
            self.add_output_rows(&mut lin, j, samples_vec[j], &sig_y);
        }
        lin.samples_included = samples.min(samples_vec.len()).min(m);
        Ok(lin)
    }

    fn add_output_rows(&self, lin: &mut Linearization, j: usize, s: &MeasSample, sig_y: &[f64; N_OUTPUTS]) {
        let mut rows = Vec::new();
        for i in 0..N_OUTPUTS {
            if s.mask.output(i) {
                let idx = OUTPUT_INDEX[i];
                let row = lin.gamma[j].row(idx).transpose() / sig_y[i];
                rows.push((row, (lin.base[j][idx] - s.y[i]) / sig_y[i]));
            }
        }
        accumulate(&mut lin.h, &mut lin.g, &rows);
    }

    fn slip_bounds(&self, z0: &Vec11, n: usize) -> (DVector<f64>, DVector<f64>) {
        let mut lb = DVector::from_element(n, f64::NEG_INFINITY);
        let mut ub = DVector::from_element(n, f64::INFINITY);
        for &i in &SLIP_INDEX {
            lb[i] = (self.cfg.slip_min - z0[i]).min(0.0);
            ub[i] = (self.cfg.slip_max - z0[i]).max(0.0);
        }
        (lb, ub)
    }

    /// One Gauss-Newton iteration on the current window (feedback phase).
    pub fn estimate(&mut self) -> Result<EstimateOutput> {
        let start = Instant::now();
        if self.window.is_empty() {
            return Err(Error::EmptyWindow);
        }
        if self.pending_node {
            // A node was predicted but its sample never arrived.
            self.traj.nodes.pop();
            self.traj.controls.pop();
            self.pending_node = false;
            self.lin = None;
        }
        let m = self.window.len();
        let lin = match self.lin.take() {
            Some(l) if l.gamma.len() == m => Ok(l),
            _ => self.linearize(0).map(|mut l| {
                l.samples_included = 0;
                l
            }),
        };
        let outcome = lin.and_then(|mut lin| {
            let sig_y = self.cfg.output_sigma();
            let samples: Vec<MeasSample> = self.window.samples().iter().copied().collect();
            for j in lin.samples_included..m {
                self.add_output_rows(&mut lin, j, &samples[j], &sig_y);
            }
            self.solve_step(&lin)
        });

        let mut stats = MheStats {
            preparation_ms: self.preparation_ms,
            arrival_rank_loss: self.arrival_rank_loss,
            ..Default::default()
        };
        self.preparation_ms = 0.0;
        self.arrival_rank_loss = false;
        match outcome {
            Ok((traj, sol_kkt, iters, clamped)) => {
                self.traj = traj;
                stats.kkt_residual = sol_kkt;
                stats.qp_iterations = iters;
                stats.clamped = clamped;
            }
            Err(_) => {
                stats.degraded = true;
            }
        }
        let state = if stats.degraded {
            self.last.or_else(|| self.traj.terminal()).ok_or(Error::EmptyWindow)?
        } else {
            self.traj.terminal().ok_or(Error::EmptyWindow)?
        };
        self.last = Some(state);
        stats.estimation_ms = start.elapsed().as_secs_f64() * 1e3;
        Ok(EstimateOutput {
            state,
            slip: state.slip,
            trajectory: self.traj.clone(),
            stats,
        })
    }

    /// Solves the condensed QP and simulates the updated decision.
    #[allow(clippy::type_complexity)]
    fn solve_step(&self, lin: &Linearization) -> Result<(WindowTrajectory, f64, usize, [bool; 3])> {
        let n = lin.g.len();
        let z0 = self.traj.nodes[0];
        let (lb, ub) = self.slip_bounds(&z0, n);
        let h = (&lin.h + lin.h.transpose()) * 0.5;
        let qp = DenseBoxQp {
            h,
            g: lin.g.clone(),
            lb,
            ub,
        };
        let sol = BoxQpSolver::default().solve(&qp, None);
        if sol.status == QpStatus::IterationLimit {
            return Err(Error::Config("estimation QP hit its iteration limit".into()));
        }
        let mut z0_new = z0 + sol.x.rows(0, 11);
        for &i in &SLIP_INDEX {
            z0_new[i] = z0_new[i].clamp(self.cfg.slip_min, self.cfg.slip_max);
        }
        let controls: Vec<Vector2<f64>> = self
            .traj
            .controls
            .iter()
            .enumerate()
            .map(|(j, w)| w + Vector2::new(sol.x[11 + 2 * j], sol.x[12 + 2 * j]))
            .collect();
        let traj = WindowTrajectory::rollout(&self.model, z0_new, controls, self.cfg.dt)?;
        if traj.nodes.iter().any(|z| !z.iter().all(|v| v.is_finite())) {
            return Err(Error::Domain("non-finite estimate".into()));
        }
        let clamped = [0, 1, 2].map(|k| {
            let i = SLIP_INDEX[k];
            sol.active_set[i] != BoundState::Free
                || z0_new[i] <= self.cfg.slip_min
                || z0_new[i] >= self.cfg.slip_max
        });
        Ok((traj, sol.kkt_residual, sol.iterations, clamped))
    }

    /// Another Gauss-Newton iteration on the same window without sliding it.
    pub fn iterate(&mut self) -> Result<EstimateOutput> {
        self.lin = None;
        self.estimate()
    }

    /// Projected gradient of the window objective at the current guess with
    /// respect to the slip bounds. Zero at a KKT point.
    pub fn kkt_residual(&self) -> Result<f64> {
        let lin = self.linearize(self.window.len())?;
        let n = lin.g.len();
        let z0 = self.traj.nodes[0];
        let x = DVector::from_fn(n, |i, _| if i < 11 { z0[i] } else { 0.0 });
        let mut lb = DVector::from_element(n, f64::NEG_INFINITY);
        let mut ub = DVector::from_element(n, f64::INFINITY);
        for &i in &SLIP_INDEX {
            lb[i] = self.cfg.slip_min;
            ub[i] = self.cfg.slip_max;
        }
        Ok(crate::oracle::projected_gradient_norm(&x, &lin.g, &lb, &ub))
    }

    /// Window objective at the current guess (sum of squared weighted
    /// residuals).
    pub fn objective(&self) -> f64 {
        let r0 = self.arrival.sqrt_weight * (self.traj.nodes[0] - self.arrival.prior);
        let mut j = r0.norm_squared();
        let sig_y = self.cfg.output_sigma();
        for (k, s) in self.window.samples().iter().enumerate() {
            let Some(z) = self.traj.nodes.get(k) else { break };
            for i in 0..N_OUTPUTS {
                if s.mask.output(i) {
                    j += ((z[OUTPUT_INDEX[i]] - s.y[i]) / sig_y[i]).powi(2);
                }
            }
            if let Some(w) = self.traj.controls.get(k) {
                for c in 0..2 {
                    if s.mask.input(c) {
                        let meas = if c == 0 { s.u.delta_t } else { s.u.delta_i };
                        j += ((w[c] - meas) / self.cfg.sigma_input[c]).powi(2);
                    }
                }
            }
        }
        j
    }
}

fn accumulate(h: &mut DMatrix<f64>, g: &mut DVector<f64>, rows: &[(DVector<f64>, f64)]) {
    if rows.is_empty() {
        return;
    }
    let n = h.nrows();
    let mut j = DMatrix::zeros(rows.len(), n);
    let mut r = DVector::zeros(rows.len());
    for (k, (row, res)) in rows.iter().enumerate() {
        j.row_mut(k).copy_from(&row.transpose());
        r[k] = *res;
    }
    h.gemm_tr(1.0, &j, &j, 1.0);
    g.gemv_tr(1.0, &j, &r, 1.0);
}

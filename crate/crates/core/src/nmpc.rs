//! Tracking NMPC with a single real-time iteration per sampling instant.
//!
//! The optimal control problem is transcribed by multiple shooting on the RK4
//! grid and linearized by Gauss-Newton. Condensing eliminates the state
//! increments, leaving a dense box QP in the `2N` control increments. The
//! iteration is split in two phases:
//!
//! * [`prepare`] linearizes along the warm-start trajectory and builds the
//!   condensed Hessian and the sensitivities of every node to the initial
//!   state, all before the new state estimate is known;
//! * [`feedback`] embeds the fresh estimate, solves the QP and returns the
//!   first control, which only costs a few matrix-vector products plus the QP.

use std::time::Instant;

use nalgebra::{DMatrix, DVector, SMatrix, Vector2};

use crate::error::{Error, Result};
use crate::exec::{map_range, ExecMode};
use crate::model::{
    rk4_step, step_jacobians, Control, ControlModel, SlipParams, StateJacobians, Vec6,
    VehicleGeometry, VehicleState, MAX_TRACTOR_STEER, MAX_TRAILER_STEER,
};
use crate::path::ReferenceHorizon;
use crate::qp::{BoundState, BoxQpSolver, DenseBoxQp, QpSolution, QpStatus, WarmStart};

type Mat6 = SMatrix<f64, 6, 6>;

#[derive(Debug, Clone, PartialEq)]
pub struct OcpConfig {
    pub horizon: usize,
    pub dt: f64,
    /// Stage weights on `(xt, yt, theta, xi, yi, psi)`.
    pub q: [f64; 6],
    /// Weights on `(delta_t, delta_i)` deviations from the input reference.
    pub r: [f64; 2],
    /// Terminal weights.
    pub s: [f64; 6],
    pub u_min: Control,
    pub u_max: Control,
    pub exec: ExecMode,
}

impl Default for OcpConfig {
    fn default() -> Self {
        Self {
            horizon: 15,
            dt: 0.2,
            q: [0.5, 0.5, 0.0, 0.005, 0.005, 0.0],
            r: [5.0, 0.05],
            s: [5.0, 5.0, 0.0, 0.05, 0.05, 0.0],
            u_min: Control::new(-MAX_TRACTOR_STEER, -MAX_TRAILER_STEER),
            u_max: Control::new(MAX_TRACTOR_STEER, MAX_TRAILER_STEER),
            exec: ExecMode::Sequential,
        }
    }
}

impl OcpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config("nmpc horizon must be at least 1".into()));
        }
        if !(self.dt > 0.0) {
            return Err(Error::Config("nmpc dt must be positive".into()));
        }
        let weights = self.q.iter().chain(self.r.iter()).chain(self.s.iter());
        if weights.clone().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("nmpc weights must be finite and non-negative".into()));
        }
        if !(self.u_min.delta_t <= self.u_max.delta_t && self.u_min.delta_i <= self.u_max.delta_i) {
            return Err(Error::Config("nmpc input bounds cross".into()));
        }
        Ok(())
    }

    fn state_weight(&self, k: usize) -> Vec6 {
        if k == self.horizon {
            Vec6::from_column_slice(&self.s)
        } else {
            Vec6::from_column_slice(&self.q)
        }
    }

    pub fn clamp(&self, u: &Control) -> Control {
        Control::new(
            u.delta_t.clamp(self.u_min.delta_t, self.u_max.delta_t),
            u.delta_i.clamp(self.u_min.delta_i, self.u_max.delta_i),
        )
    }
}

/// States `s_0..s_N` and controls `u_0..u_{N-1}` on the shooting grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ShootingTrajectory {
    pub states: Vec<VehicleState>,
    pub controls: Vec<Control>,
}

impl ShootingTrajectory {
    pub fn horizon(&self) -> usize {
        self.controls.len()
    }

    /// Nonlinear simulation of `controls` from `x0`.
    pub fn rollout(
        model: &ControlModel,
        x0: &VehicleState,
        controls: Vec<Control>,
        dt: f64,
    ) -> Result<Self> {
        let mut states = Vec::with_capacity(controls.len() + 1);
        let mut x = x0.to_vector();
        states.push(*x0);
        for u in &controls {
            x = rk4_step(model, &x, &u.to_vector(), dt)?;
            states.push(VehicleState::from_vector(&x));
        }
        Ok(Self { states, controls })
    }

    /// Largest continuity defect `|s_{k+1} - F(s_k, u_k)|`.
    pub fn max_defect(&self, model: &ControlModel, dt: f64) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for k in 0..self.horizon() {
            let pred = rk4_step(
                model,
                &self.states[k].to_vector(),
                &self.controls[k].to_vector(),
                dt,
            )?;
            worst = worst.max((pred - self.states[k + 1].to_vector()).amax());
        }
        Ok(worst)
    }

    /// Objective of the tracking problem (state, input and terminal terms).
    pub fn cost(&self, refs: &ReferenceHorizon, cfg: &OcpConfig) -> f64 {
        let mut j = 0.0;
        for (k, s) in self.states.iter().enumerate() {
            let e = s.to_vector() - refs.states[k].to_vector();
            j += e.component_mul(&e).dot(&cfg.state_weight(k));
        }
        for (k, u) in self.controls.iter().enumerate() {
            let e = u.to_vector() - refs.controls[k].to_vector();
            j += cfg.r[0] * e[0] * e[0] + cfg.r[1] * e[1] * e[1];
        }
        j
    }
}

/// Drops node 0 and appends the last control with its rollout.
pub fn shift(traj: &ShootingTrajectory, model: &ControlModel, dt: f64) -> Result<ShootingTrajectory> {
    let n = traj.horizon();
    if n == 0 {
        return Ok(traj.clone());
    }
    let last_u = traj.controls[n - 1];
    let last_x = traj.states[n];
    let next = rk4_step(model, &last_x.to_vector(), &last_u.to_vector(), dt)?;
    let mut states = traj.states[1..].to_vec();
    states.push(VehicleState::from_vector(&next));
    let mut controls = traj.controls[1..].to_vec();
    controls.push(last_u);
    Ok(ShootingTrajectory { states, controls })
}

/// Condensed Gauss-Newton QP awaiting the initial-state estimate.
#[derive(Debug, Clone)]
pub struct PreparedQp {
    /// QP in the control increments for a zero initial-state correction.
    pub qp: DenseBoxQp,
    pub traj: ShootingTrajectory,
    pub model: ControlModel,
    pub jacobians: Vec<StateJacobians<6>>,
    /// Node sensitivities to the control increments, `6 x 2N` each.
    gamma: Vec<DMatrix<f64>>,
    /// Node sensitivities to the initial-state correction.
    init_sens: Vec<Mat6>,
    /// Linearized node values for zero increments (defects propagated).
    base: Vec<Vec6>,
    pub preparation_ms: f64,
}

impl PreparedQp {
    pub fn max_defect(&self) -> f64 {
        self.jacobians
            .iter()
            .zip(self.traj.states.iter().skip(1))
            .map(|(j, s)| (j.next - s.to_vector()).amax())
            .fold(0.0, f64::max)
    }

    /// Gradient of the condensed QP for a given initial correction and
    /// references.
    fn gradient(&self, ds0: &Vec6, refs: &ReferenceHorizon, cfg: &OcpConfig) -> DVector<f64> {
        let n = self.traj.horizon();
        let mut g = DVector::zeros(2 * n);
        for k in 0..=n {
            let w = cfg.state_weight(k);
            let e = self.base[k] + self.init_sens[k] * ds0 - refs.states[k].to_vector();
            let we = w.component_mul(&e);
            if k > 0 {
                g.gemv_tr(1.0, &self.gamma[k], &DVector::from_column_slice(we.as_slice()), 1.0);
            }
        }
        for k in 0..n {
            let e = self.traj.controls[k].to_vector() - refs.controls[k].to_vector();
            g[2 * k] += cfg.r[0] * e[0];
            g[2 * k + 1] += cfg.r[1] * e[1];
        }
        g
    }
}

/// Linearizes along `traj` and condenses the tracking problem.
pub fn prepare(
    traj: &ShootingTrajectory,
    slip: SlipParams,
    speed: f64,
    refs: &ReferenceHorizon,
    cfg: &OcpConfig,
    geom: &VehicleGeometry,
) -> Result<PreparedQp> {
    let start = Instant::now();
    let n = cfg.horizon;
    if traj.horizon() != n || traj.states.len() != n + 1 || refs.len() != n || refs.states.len() != n + 1 {
        return Err(Error::Config(format!(
            "trajectory/reference shapes do not match horizon {n}"
        )));
    }
    let model = ControlModel::new(*geom, slip, speed);
    let jacobians = map_range(cfg.exec, n, |k| {
        step_jacobians(
            &model,
            &traj.states[k].to_vector(),
            &traj.controls[k].to_vector(),
            cfg.dt,
        )
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let nu = 2 * n;
    let mut gamma = Vec::with_capacity(n + 1);
    let mut init_sens = Vec::with_capacity(n + 1);
    let mut base = Vec::with_capacity(n + 1);
    gamma.push(DMatrix::zeros(6, nu));
    init_sens.push(Mat6::identity());
    base.push(traj.states[0].to_vector());
    for (k, jac) in jacobians.iter().enumerate() {
        let a = DMatrix::from_column_slice(6, 6, jac.d_state.as_slice());
        let mut next = &a * &gamma[k];
        for r in 0..6 {
            next[(r, 2 * k)] += jac.d_control[(r, 0)];
            next[(r, 2 * k + 1)] += jac.d_control[(r, 1)];
        }
        gamma.push(next);
        init_sens.push(jac.d_state * init_sens[k]);
        // base_{k+1} = s_{k+1} + A_k (base_k - s_k) + defect_k
        let drift = jac.d_state * (base[k] - traj.states[k].to_vector());
        base.push(jac.next + drift);
    }

    let mut h = DMatrix::zeros(nu, nu);
    for k in 1..=n {
        let w = cfg.state_weight(k);
        let mut wg = gamma[k].clone();
        for r in 0..6 {
            wg.row_mut(r).scale_mut(w[r]);
        }
        h.gemm_tr(1.0, &gamma[k], &wg, 1.0);
    }
    for k in 0..n {
        h[(2 * k, 2 * k)] += cfg.r[0];
        h[(2 * k + 1, 2 * k + 1)] += cfg.r[1];
    }
    // Symmetrize against round-off in the accumulated products.
    let h = (&h + h.transpose()) * 0.5;

    let (lb, ub) = increment_bounds(traj, cfg);
    let mut prepared = PreparedQp {
        qp: DenseBoxQp {
            h,
            g: DVector::zeros(nu),
            lb,
            ub,
        },
        traj: traj.clone(),
        model,
        jacobians,
        gamma,
        init_sens,
        base,
        preparation_ms: 0.0,
    };
    prepared.qp.g = prepared.gradient(&Vec6::zeros(), refs, cfg);
    prepared.preparation_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(prepared)
}

fn increment_bounds(traj: &ShootingTrajectory, cfg: &OcpConfig) -> (DVector<f64>, DVector<f64>) {
    let n = traj.horizon();
    let mut lb = DVector::zeros(2 * n);
    let mut ub = DVector::zeros(2 * n);
    for (k, u) in traj.controls.iter().enumerate() {
        lb[2 * k] = (cfg.u_min.delta_t - u.delta_t).min(0.0);
        lb[2 * k + 1] = (cfg.u_min.delta_i - u.delta_i).min(0.0);
        ub[2 * k] = (cfg.u_max.delta_t - u.delta_t).max(0.0);
        ub[2 * k + 1] = (cfg.u_max.delta_i - u.delta_i).max(0.0);
    }
    (lb, ub)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NmpcStats {
    pub preparation_ms: f64,
    pub feedback_ms: f64,
    pub kkt_residual: f64,
    pub qp_iterations: usize,
    pub regularized: bool,
    /// The QP hit its iteration cap and the previous control was reapplied.
    pub degraded: bool,
}

#[derive(Debug, Clone)]
pub struct FeedbackOutput {
    /// Control to apply now, inside the input bounds.
    pub control: Control,
    /// Updated trajectory rolled out from the estimate (not shifted).
    pub solution: ShootingTrajectory,
    /// Shifted warm start for the next sampling instant.
    pub warm_start: ShootingTrajectory,
    pub qp: QpSolution,
    pub stats: NmpcStats,
}

/// Embeds the state estimate, solves the condensed QP and rolls the updated
/// controls out from the estimate.
pub fn feedback(
    prep: &PreparedQp,
    x_hat: &VehicleState,
    refs: &ReferenceHorizon,
    cfg: &OcpConfig,
    warm: Option<&WarmStart>,
) -> Result<FeedbackOutput> {
    let start = Instant::now();
    let ds0 = x_hat.to_vector() - prep.traj.states[0].to_vector();
    let mut qp = prep.qp.clone();
    qp.g = prep.gradient(&ds0, refs, cfg);
    let sol = BoxQpSolver::default().solve(&qp, warm);

    let controls: Vec<Control> = prep
        .traj
        .controls
        .iter()
        .enumerate()
        .map(|(k, u)| {
            let du = Vector2::new(sol.x[2 * k], sol.x[2 * k + 1]);
            cfg.clamp(&Control::from_vector(&(u.to_vector() + du)))
        })
        .collect();
    let solution = ShootingTrajectory::rollout(&prep.model, x_hat, controls, cfg.dt)?;
    let warm_start = shift(&solution, &prep.model, cfg.dt)?;
    let control = cfg.clamp(&solution.controls[0]);
    let stats = NmpcStats {
        preparation_ms: prep.preparation_ms,
        feedback_ms: start.elapsed().as_secs_f64() * 1e3,
        kkt_residual: sol.kkt_residual,
        qp_iterations: sol.iterations,
        regularized: sol.regularized,
        degraded: sol.status == QpStatus::IterationLimit,
    };
    Ok(FeedbackOutput {
        control,
        solution,
        warm_start,
        qp: sol,
        stats,
    })
}

/// Gauss-Newton gradient of the reduced (single-shooting) objective at a
/// defect-free trajectory, and its projected max-norm with respect to the
/// input bounds. Zero at a KKT point of the nonlinear problem.
pub fn reduced_kkt_residual(
    traj: &ShootingTrajectory,
    slip: SlipParams,
    speed: f64,
    refs: &ReferenceHorizon,
    cfg: &OcpConfig,
    geom: &VehicleGeometry,
) -> Result<f64> {
    let prep = prepare(traj, slip, speed, refs, cfg, geom)?;
    let n = traj.horizon();
    let u = DVector::from_iterator(
        2 * n,
        traj.controls.iter().flat_map(|c| [c.delta_t, c.delta_i]),
    );
    let lb = DVector::from_iterator(2 * n, (0..n).flat_map(|_| [cfg.u_min.delta_t, cfg.u_min.delta_i]));
    let ub = DVector::from_iterator(2 * n, (0..n).flat_map(|_| [cfg.u_max.delta_t, cfg.u_max.delta_i]));
    Ok(crate::oracle::projected_gradient_norm(&u, &(prep.qp.g * 2.0), &lb, &ub))
}

/// Controller instance holding the warm start between sampling instants.
#[derive(Debug, Clone)]
pub struct Nmpc {
    pub cfg: OcpConfig,
    pub geom: VehicleGeometry,
    traj: ShootingTrajectory,
    prepared: Option<PreparedQp>,
    warm: Option<WarmStart>,
    last_control: Control,
}

impl Nmpc {
    /// Starts from a rollout of zero controls at `x0`.
    pub fn new(cfg: OcpConfig, geom: VehicleGeometry, x0: &VehicleState) -> Result<Self> {
        cfg.validate()?;
        geom.validate()?;
        let model = ControlModel::new(geom, SlipParams::NO_SLIP, 1.0);
        let traj = ShootingTrajectory::rollout(&model, x0, vec![Control::default(); cfg.horizon], cfg.dt)?;
        Ok(Self {
            cfg,
            geom,
            traj,
            prepared: None,
            warm: None,
            last_control: Control::default(),
        })
    }

    pub fn trajectory(&self) -> &ShootingTrajectory {
        &self.traj
    }

    pub fn prepared(&self) -> Option<&PreparedQp> {
        self.prepared.as_ref()
    }

    /// Predicted state at the next sampling instant.
    pub fn predicted_state(&self) -> VehicleState {
        self.traj.states[0]
    }

    pub fn prepare(&mut self, slip: SlipParams, speed: f64, refs: &ReferenceHorizon) -> Result<f64> {
        let prep = prepare(&self.traj, slip, speed, refs, &self.cfg, &self.geom)?;
        let ms = prep.preparation_ms;
        self.prepared = Some(prep);
        Ok(ms)
    }

    /// Consumes the prepared QP. Without one (first cycle) a preparation is
    /// run on the spot with no-slip parameters.
    pub fn feedback(&mut self, x_hat: &VehicleState, refs: &ReferenceHorizon) -> Result<FeedbackOutput> {
        let prep = match self.prepared.take() {
            Some(p) => p,
            None => prepare(&self.traj, SlipParams::NO_SLIP, 1.0, refs, &self.cfg, &self.geom)?,
        };
        let mut out = feedback(&prep, x_hat, refs, &self.cfg, self.warm.as_ref())?;
        if out.stats.degraded {
            out.control = self.last_control;
        }
        self.warm = Some(shift_warm_start(&out.qp));
        self.traj = out.warm_start.clone();
        self.last_control = out.control;
        Ok(out)
    }
}

/// Active set of the QP shifted by one stage, last stage duplicated.
fn shift_warm_start(sol: &QpSolution) -> WarmStart {
    let n = sol.active_set.len();
    let mut active: Vec<BoundState> = sol.active_set.iter().skip(2).copied().collect();
    if n >= 2 {
        active.extend_from_slice(&sol.active_set[n - 2..]);
    }
    WarmStart {
        x: None,
        active_set: Some(active),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::path::{build_straight, reference_from_station, LookaheadParams};
    use approx::assert_abs_diff_eq;

    fn straight_refs(station: f64, cfg: &OcpConfig, geom: &VehicleGeometry) -> ReferenceHorizon {
        let p = build_straight(-50.0, 0.0, 0.0, 500.0).unwrap();
        let params = LookaheadParams {
            lookahead: 1.6,
            horizon: cfg.horizon,
            dt: cfg.dt,
            speed: 1.0,
        };
        reference_from_station(&p, station, Control::default(), &params, geom)
    }

    /// Trajectory that sits exactly on its own references.
    fn on_reference() -> (ShootingTrajectory, ReferenceHorizon, OcpConfig, VehicleGeometry) {
        let cfg = OcpConfig::default();
        let geom = VehicleGeometry::default();
        let model = ControlModel::new(geom, SlipParams::NO_SLIP, 1.0);
        let x0 = VehicleState::aligned(0.0, 0.0, 0.0, &geom);
        let traj = ShootingTrajectory::rollout(&model, &x0, vec![Control::default(); 15], cfg.dt).unwrap();
        let refs = ReferenceHorizon {
            states: traj.states.clone(),
            controls: traj.controls.clone(),
            stations: vec![0.0; 16],
        };
        (traj, refs, cfg, geom)
    }

    #[test]
    fn zero_increment_on_reference() {
        let (traj, refs, cfg, geom) = on_reference();
        let prep = prepare(&traj, SlipParams::NO_SLIP, 1.0, &refs, &cfg, &geom).unwrap();
        assert!(prep.max_defect() < 1e-12);
        assert!(prep.qp.g.amax() < 1e-12);
        let out = feedback(&prep, &traj.states[0], &refs, &cfg, None).unwrap();
        assert!(out.qp.x.amax() < 1e-12);
        assert_abs_diff_eq!(out.control.delta_t, 0.0, epsilon = 1e-8);
        assert_abs_diff_eq!(out.control.delta_i, 0.0, epsilon = 1e-8);
    }

    #[test]
    fn weight_scaling_keeps_minimizer() {
        let cfg = OcpConfig::default();
        let geom = VehicleGeometry::default();
        let model = ControlModel::new(geom, SlipParams::NO_SLIP, 1.0);
        let x0 = VehicleState::aligned(0.0, 0.4, 0.05, &geom);
        let traj = ShootingTrajectory::rollout(&model, &x0, vec![Control::default(); 15], cfg.dt).unwrap();
        let refs = straight_refs(0.0, &cfg, &geom);
        let p1 = prepare(&traj, SlipParams::NO_SLIP, 1.0, &refs, &cfg, &geom).unwrap();
        let mut cfg2 = cfg.clone();
        cfg2.q.iter_mut().chain(cfg2.r.iter_mut()).chain(cfg2.s.iter_mut()).for_each(|w| *w *= 2.0);
        let p2 = prepare(&traj, SlipParams::NO_SLIP, 1.0, &refs, &cfg2, &geom).unwrap();
        assert_abs_diff_eq!(p2.qp.h, p1.qp.h.clone() * 2.0, epsilon = 1e-9);
        assert_abs_diff_eq!(p2.qp.g, p1.qp.g.clone() * 2.0, epsilon = 1e-9);
        let a = feedback(&p1, &x0, &refs, &cfg, None).unwrap();
        let b = feedback(&p2, &x0, &refs, &cfg2, None).unwrap();
        assert_abs_diff_eq!(a.qp.x, b.qp.x, epsilon = 1e-9);
    }

    #[test]
    fn large_offset_saturates_steering() {
        let cfg = OcpConfig::default();
        let geom = VehicleGeometry::default();
        let refs = straight_refs(0.0, &cfg, &geom);
        let x0 = VehicleState::aligned(0.0, -6.0, 0.0, &geom);
        let mut ctl = Nmpc::new(cfg.clone(), geom, &x0).unwrap();
        ctl.prepare(SlipParams::NO_SLIP, 1.0, &refs).unwrap();
        let out = ctl.feedback(&x0, &refs).unwrap();
        assert_eq!(out.control.delta_t, MAX_TRACTOR_STEER);
        assert!(out.control.within_limits());
    }

    #[test]
    fn shift_properties() {
        let (traj, _, cfg, geom) = on_reference();
        let model = ControlModel::new(geom, SlipParams::NO_SLIP, 1.0);
        let s = shift(&traj, &model, cfg.dt).unwrap();
        for k in 0..cfg.horizon {
            assert_eq!(s.states[k], traj.states[k + 1]);
        }
        for k in 0..cfg.horizon - 1 {
            assert_eq!(s.controls[k], traj.controls[k + 1]);
        }
        assert!(s.max_defect(&model, cfg.dt).unwrap() < 1e-9);

        // A constant-curvature steady state is shift-invariant up to a rigid
        // motion; the control sequence is unchanged.
        let turn = ShootingTrajectory::rollout(
            &model,
            &VehicleState::default(),
            vec![Control::new(0.1, 0.0); cfg.horizon],
            cfg.dt,
        )
        .unwrap();
        assert_eq!(shift(&turn, &model, cfg.dt).unwrap().controls, turn.controls);
    }

    #[test]
    fn condensed_matches_linearized_rollout() {
        let cfg = OcpConfig::default();
        let geom = VehicleGeometry::default();
        let slip = SlipParams::new(0.9, 0.8, 0.85);
        let model = ControlModel::new(geom, slip, 1.0);
        let x0 = VehicleState::aligned(0.0, 0.3, 0.1, &geom);
        let controls: Vec<Control> = (0..15).map(|k| Control::new(0.05 * (k as f64).sin(), 0.02)).collect();
        let mut traj = ShootingTrajectory::rollout(&model, &x0, controls, cfg.dt).unwrap();
        // Inject defects.
        for (k, s) in traj.states.iter_mut().enumerate().skip(1) {
            s.yt += 0.01 * k as f64;
            s.psi -= 0.002 * k as f64;
        }
        let refs = straight_refs(0.0, &cfg, &geom);
        let prep = prepare(&traj, slip, 1.0, &refs, &cfg, &geom).unwrap();

        let sparse = |du: &DVector<f64>| {
            let mut ds = Vec6::zeros();
            let mut j = 0.0;
            for k in 0..=15 {
                let e = traj.states[k].to_vector() + ds - refs.states[k].to_vector();
                j += e.component_mul(&e).dot(&cfg.state_weight(k));
                if k < 15 {
                    let u = Vector2::new(du[2 * k], du[2 * k + 1]);
                    let eu = traj.controls[k].to_vector() + u - refs.controls[k].to_vector();
                    j += cfg.r[0] * eu[0] * eu[0] + cfg.r[1] * eu[1] * eu[1];
                    let jac = &prep.jacobians[k];
                    let defect = jac.next - traj.states[k + 1].to_vector();
                    ds = jac.d_state * ds + jac.d_control * u + defect;
                }
            }
            j
        };
        let du = DVector::from_fn(30, |i, _| 0.01 * ((i * 7 % 11) as f64 - 5.0));
        let lhs = sparse(&du) - sparse(&DVector::zeros(30));
        let rhs = 2.0 * prep.qp.objective(&du);
        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-8);
    }

    #[test]
    fn parallel_prepare_is_identical() {
        let cfg = OcpConfig::default();
        let geom = VehicleGeometry::default();
        let model = ControlModel::new(geom, SlipParams::NO_SLIP, 1.0);
        let x0 = VehicleState::aligned(0.0, 0.3, 0.1, &geom);
        let traj = ShootingTrajectory::rollout(&model, &x0, vec![Control::new(0.1, -0.1); 15], cfg.dt).unwrap();
        let refs = straight_refs(0.0, &cfg, &geom);
        let a = prepare(&traj, SlipParams::NO_SLIP, 1.0, &refs, &cfg, &geom).unwrap();
        let par = OcpConfig {
            exec: ExecMode::Parallel,
            ..cfg.clone()
        };
        let b = prepare(&traj, SlipParams::NO_SLIP, 1.0, &refs, &par, &geom).unwrap();
        assert_eq!(a.qp, b.qp);
    }
}

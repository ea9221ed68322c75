//! Kinematic tractor-trailer model.
//!
//! The tractor is a bicycle with front steering `delta_t`; the trailer hangs
//! off a drawbar through two revolute joints (hitch angle `beta` at the tractor,
//! trailer steering `delta_i` at the trailer). Three multiplicative slip
//! coefficients correct the ideal rolling kinematics:
//!
//! ```text
//! xt'    = mu v cos(theta)
//! yt'    = mu v sin(theta)
//! theta' = mu v tan(kappa delta_t) / Lt
//! xi'    = mu v cos(psi)
//! yi'    = mu v sin(psi)
//! psi'   = mu v / Li * ( sin(eta delta_i + beta) + l / Lt * tan(kappa delta_t) cos(eta delta_i + beta) )
//! ```
//!
//! Two state layouts share these equations. The control model carries the six
//! poses and closes `beta` kinematically; the estimation model carries eleven
//! entries with slips, `beta` and `v` as random-walk states.

use nalgebra::{SMatrix, SVector, Vector2};

use crate::error::{Error, Result};

pub type Vec6 = SVector<f64, 6>;
pub type Vec11 = SVector<f64, 11>;

/// Steering limit of the tractor front wheels [rad].
pub const MAX_TRACTOR_STEER: f64 = 35.0 * std::f64::consts::PI / 180.0;
/// Steering limit of the trailer joint [rad].
pub const MAX_TRAILER_STEER: f64 = 25.0 * std::f64::consts::PI / 180.0;

/// Lower bound admitted for every slip coefficient.
pub const SLIP_MIN: f64 = 0.25;
pub const SLIP_MAX: f64 = 1.0;

const POLE_GUARD: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehicleGeometry {
    /// Front to rear axle of the tractor [m].
    pub tractor_wheelbase: f64,
    /// Trailer joint to trailer axle [m].
    pub trailer_length: f64,
    /// Hitch to trailer joint [m].
    pub drawbar_length: f64,
}

impl Default for VehicleGeometry {
    fn default() -> Self {
        Self {
            tractor_wheelbase: 1.4,
            trailer_length: 1.3,
            drawbar_length: 1.1,
        }
    }
}

impl VehicleGeometry {
    pub fn new(tractor_wheelbase: f64, trailer_length: f64, drawbar_length: f64) -> Result<Self> {
        let g = Self {
            tractor_wheelbase,
            trailer_length,
            drawbar_length,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.tractor_wheelbase, self.trailer_length, self.drawbar_length];
        if all.iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(())
        } else {
            Err(Error::Config(format!("vehicle lengths must be positive: {self:?}")))
        }
    }

    /// Arclength between the tractor rear axle and the trailer axle when the
    /// combination is stretched out.
    pub fn trailer_offset(&self) -> f64 {
        self.drawbar_length + self.trailer_length
    }
}

/// Tractor and trailer poses. Yaw angles are never wrapped.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct VehicleState {
    pub xt: f64,
    pub yt: f64,
    pub theta: f64,
    pub xi: f64,
    pub yi: f64,
    pub psi: f64,
}

impl VehicleState {
    pub fn to_vector(&self) -> Vec6 {
        Vec6::new(self.xt, self.yt, self.theta, self.xi, self.yi, self.psi)
    }

    pub fn from_vector(v: &Vec6) -> Self {
        Self {
            xt: v[0],
            yt: v[1],
            theta: v[2],
            xi: v[3],
            yi: v[4],
            psi: v[5],
        }
    }

    /// Stretched-out configuration with the tractor rear axle at `(x, y)`.
    pub fn aligned(x: f64, y: f64, heading: f64, geom: &VehicleGeometry) -> Self {
        let off = geom.trailer_offset();
        Self {
            xt: x,
            yt: y,
            theta: heading,
            xi: x - off * heading.cos(),
            yi: y - off * heading.sin(),
            psi: heading,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Control {
    pub delta_t: f64,
    pub delta_i: f64,
}

impl Control {
    pub fn new(delta_t: f64, delta_i: f64) -> Self {
        Self { delta_t, delta_i }
    }

    pub fn to_vector(&self) -> Vector2<f64> {
        Vector2::new(self.delta_t, self.delta_i)
    }

    pub fn from_vector(v: &Vector2<f64>) -> Self {
        Self::new(v[0], v[1])
    }

    pub fn clamp_to_limits(&self) -> Self {
        Self::new(
            self.delta_t.clamp(-MAX_TRACTOR_STEER, MAX_TRACTOR_STEER),
            self.delta_i.clamp(-MAX_TRAILER_STEER, MAX_TRAILER_STEER),
        )
    }

    pub fn within_limits(&self) -> bool {
        self.delta_t.abs() <= MAX_TRACTOR_STEER && self.delta_i.abs() <= MAX_TRAILER_STEER
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlipParams {
    pub mu: f64,
    pub kappa: f64,
    pub eta: f64,
}

impl Default for SlipParams {
    fn default() -> Self {
        Self::NO_SLIP
    }
}

impl SlipParams {
    pub const NO_SLIP: Self = Self {
        mu: 1.0,
        kappa: 1.0,
        eta: 1.0,
    };

    pub fn new(mu: f64, kappa: f64, eta: f64) -> Self {
        Self { mu, kappa, eta }
    }

    pub fn in_bounds(&self) -> bool {
        [self.mu, self.kappa, self.eta]
            .iter()
            .all(|s| (SLIP_MIN..=SLIP_MAX).contains(s))
    }
}

/// Eleven-entry estimator state, ordered
/// `(xt, yt, theta, xi, yi, psi, mu, kappa, eta, beta, v)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstState {
    pub pose: VehicleState,
    pub slip: SlipParams,
    pub beta: f64,
    pub v: f64,
}

impl EstState {
    pub const MU: usize = 6;
    pub const KAPPA: usize = 7;
    pub const ETA: usize = 8;
    pub const BETA: usize = 9;
    pub const V: usize = 10;

    pub fn new(pose: VehicleState, slip: SlipParams, beta: f64, v: f64) -> Self {
        Self { pose, slip, beta, v }
    }

    pub fn to_vector(&self) -> Vec11 {
        let p = &self.pose;
        Vec11::from_column_slice(&[
            p.xt,
            p.yt,
            p.theta,
            p.xi,
            p.yi,
            p.psi,
            self.slip.mu,
            self.slip.kappa,
            self.slip.eta,
            self.beta,
            self.v,
        ])
    }

    pub fn from_vector(z: &Vec11) -> Self {
        Self {
            pose: VehicleState::from_vector(&z.fixed_rows::<6>(0).into_owned()),
            slip: SlipParams::new(z[6], z[7], z[8]),
            beta: z[9],
            v: z[10],
        }
    }
}

/// Hitch angle at the tractor joint: `beta = theta - psi - delta_i`.
pub fn hitch_closure(theta: f64, psi: f64, delta_i: f64) -> f64 {
    theta - psi - delta_i
}

/// Inverse of [`hitch_closure`] solved for the trailer yaw.
pub fn trailer_yaw(theta: f64, beta: f64, delta_i: f64) -> f64 {
    theta - beta - delta_i
}

fn steer_tangent(kappa: f64, delta_t: f64) -> Result<f64> {
    let arg = kappa * delta_t;
    if !arg.is_finite() || arg.abs() >= std::f64::consts::FRAC_PI_2 - POLE_GUARD {
        return Err(Error::Domain(format!(
            "tan(kappa * delta_t) with argument {arg} rad"
        )));
    }
    Ok(arg.tan())
}

/// Pose rates for a given hitch angle. Shared by both state layouts and the
/// plant simulator.
pub fn pose_rates(
    pose: &VehicleState,
    beta: f64,
    u: &Control,
    slip: &SlipParams,
    v: f64,
    geom: &VehicleGeometry,
) -> Result<Vec6> {
    let speed = slip.mu * v;
    let tan_steer = steer_tangent(slip.kappa, u.delta_t)?;
    let phi = slip.eta * u.delta_i + beta;
    let lever = geom.drawbar_length / geom.tractor_wheelbase;
    Ok(Vec6::new(
        speed * pose.theta.cos(),
        speed * pose.theta.sin(),
        speed * tan_steer / geom.tractor_wheelbase,
        speed * pose.psi.cos(),
        speed * pose.psi.sin(),
        speed / geom.trailer_length * (phi.sin() + lever * tan_steer * phi.cos()),
    ))
}

/// Right-hand side of the kinematic model with the hitch angle closed
/// kinematically from the poses and the trailer steering.
pub fn dynamics(
    s: &VehicleState,
    u: &Control,
    p: &SlipParams,
    v: f64,
    geom: &VehicleGeometry,
) -> Result<VehicleState> {
    let beta = hitch_closure(s.theta, s.psi, u.delta_i);
    pose_rates(s, beta, u, p, v, geom).map(|d| VehicleState::from_vector(&d))
}

/// Right-hand side of the estimation model. The hitch angle is taken from the
/// state; slips, `beta` and `v` do not move.
pub fn est_dynamics(z: &EstState, u: &Control, geom: &VehicleGeometry) -> Result<EstState> {
    let d = pose_rates(&z.pose, z.beta, u, &z.slip, z.v, geom)?;
    Ok(EstState::new(
        VehicleState::from_vector(&d),
        SlipParams::new(0.0, 0.0, 0.0),
        0.0,
        0.0,
    ))
}

/// A continuous-time model `x' = f(x, u)` with two controls and analytic
/// first derivatives.
pub trait Dynamics<const NX: usize> {
    fn rhs(&self, x: &SVector<f64, NX>, u: &Vector2<f64>) -> Result<SVector<f64, NX>>;

    /// `(df/dx, df/du)` at `(x, u)`.
    fn rhs_jacobians(
        &self,
        x: &SVector<f64, NX>,
        u: &Vector2<f64>,
    ) -> Result<(SMatrix<f64, NX, NX>, SMatrix<f64, NX, 2>)>;
}

/// Six-state prediction model used by the controller. Slips and speed are
/// frozen parameters supplied by the estimator.
#[derive(Debug, Clone, Copy)]
pub struct ControlModel {
    pub geom: VehicleGeometry,
    pub slip: SlipParams,
    pub speed: f64,
}

impl ControlModel {
    pub fn new(geom: VehicleGeometry, slip: SlipParams, speed: f64) -> Self {
        Self { geom, slip, speed }
    }
}

impl Dynamics<6> for ControlModel {
    fn rhs(&self, x: &Vec6, u: &Vector2<f64>) -> Result<Vec6> {
        let s = VehicleState::from_vector(x);
        let u = Control::from_vector(u);
        let beta = hitch_closure(s.theta, s.psi, u.delta_i);
        pose_rates(&s, beta, &u, &self.slip, self.speed, &self.geom)
    }

    fn rhs_jacobians(
        &self,
        x: &Vec6,
        u: &Vector2<f64>,
    ) -> Result<(SMatrix<f64, 6, 6>, SMatrix<f64, 6, 2>)> {
        let g = &self.geom;
        let SlipParams { mu, kappa, eta } = self.slip;
        let (theta, psi) = (x[2], x[5]);
        let (dt, di) = (u[0], u[1]);
        let speed = mu * self.speed;
        let tan_steer = steer_tangent(kappa, dt)?;
        let sec2 = 1.0 + tan_steer * tan_steer;
        let lever = g.drawbar_length / g.tractor_wheelbase;
        let phi = eta * di + hitch_closure(theta, psi, di);
        let dphi = phi.cos() - lever * tan_steer * phi.sin();
        let k = speed / g.trailer_length;

        let mut fx = SMatrix::<f64, 6, 6>::zeros();
        fx[(0, 2)] = -speed * theta.sin();
        fx[(1, 2)] = speed * theta.cos();
        fx[(3, 5)] = -speed * psi.sin();
        fx[(4, 5)] = speed * psi.cos();
        fx[(5, 2)] = k * dphi;
        fx[(5, 5)] = -k * dphi;

        let mut fu = SMatrix::<f64, 6, 2>::zeros();
        fu[(2, 0)] = speed * kappa * sec2 / g.tractor_wheelbase;
        fu[(5, 0)] = k * lever * kappa * sec2 * phi.cos();
        fu[(5, 1)] = k * dphi * (eta - 1.0);
        Ok((fx, fu))
    }
}

/// Eleven-state estimation model.
#[derive(Debug, Clone, Copy, Default)]
pub struct EstimationModel {
    pub geom: VehicleGeometry,
}

impl EstimationModel {
    pub fn new(geom: VehicleGeometry) -> Self {
        Self { geom }
    }
}

impl Dynamics<11> for EstimationModel {
    fn rhs(&self, x: &Vec11, u: &Vector2<f64>) -> Result<Vec11> {
        let z = EstState::from_vector(x);
        let d = pose_rates(&z.pose, z.beta, &Control::from_vector(u), &z.slip, z.v, &self.geom)?;
        let mut out = Vec11::zeros();
        out.fixed_rows_mut::<6>(0).copy_from(&d);
        Ok(out)
    }

    fn rhs_jacobians(
        &self,
        x: &Vec11,
        u: &Vector2<f64>,
    ) -> Result<(SMatrix<f64, 11, 11>, SMatrix<f64, 11, 2>)> {
        let g = &self.geom;
        let (theta, psi) = (x[2], x[5]);
        let (mu, kappa, eta, beta, v) = (x[6], x[7], x[8], x[9], x[10]);
        let (dt, di) = (u[0], u[1]);
        let speed = mu * v;
        let tan_steer = steer_tangent(kappa, dt)?;
        let sec2 = 1.0 + tan_steer * tan_steer;
        let lever = g.drawbar_length / g.tractor_wheelbase;
        let phi = eta * di + beta;
        let shape = phi.sin() + lever * tan_steer * phi.cos();
        let dphi = phi.cos() - lever * tan_steer * phi.sin();
        let k = speed / g.trailer_length;

        // Rates divided by the common speed factor mu * v.
        let unit = [
            theta.cos(),
            theta.sin(),
            tan_steer / g.tractor_wheelbase,
            psi.cos(),
            psi.sin(),
            shape / g.trailer_length,
        ];

        let mut fx = SMatrix::<f64, 11, 11>::zeros();
        fx[(0, 2)] = -speed * theta.sin();
        fx[(1, 2)] = speed * theta.cos();
        fx[(3, 5)] = -speed * psi.sin();
        fx[(4, 5)] = speed * psi.cos();
        for (row, r) in unit.iter().enumerate() {
            fx[(row, EstState::MU)] = v * r;
            fx[(row, EstState::V)] = mu * r;
        }
        fx[(2, EstState::KAPPA)] = speed * dt * sec2 / g.tractor_wheelbase;
        fx[(5, EstState::KAPPA)] = k * lever * dt * sec2 * phi.cos();
        fx[(5, EstState::ETA)] = k * dphi * di;
        fx[(5, EstState::BETA)] = k * dphi;

        let mut fu = SMatrix::<f64, 11, 2>::zeros();
        fu[(2, 0)] = speed * kappa * sec2 / g.tractor_wheelbase;
        fu[(5, 0)] = k * lever * kappa * sec2 * phi.cos();
        fu[(5, 1)] = k * dphi * eta;
        Ok((fx, fu))
    }
}

/// One step of the discretized model together with its sensitivities.
#[derive(Debug, Clone, PartialEq)]
pub struct StateJacobians<const NX: usize> {
    pub next: SVector<f64, NX>,
    pub d_state: SMatrix<f64, NX, NX>,
    pub d_control: SMatrix<f64, NX, 2>,
}

/// Classical fourth-order Runge-Kutta step with the control held over `dt`.
pub fn rk4_step<M, const NX: usize>(
    model: &M,
    x: &SVector<f64, NX>,
    u: &Vector2<f64>,
    dt: f64,
) -> Result<SVector<f64, NX>>
where
    M: Dynamics<NX> + ?Sized,
{
    let k1 = model.rhs(x, u)?;
    let k2 = model.rhs(&(x + k1 * (0.5 * dt)), u)?;
    let k3 = model.rhs(&(x + k2 * (0.5 * dt)), u)?;
    let k4 = model.rhs(&(x + k3 * dt), u)?;
    Ok(x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0))
}

/// RK4 step with exact derivatives of the discrete map, propagated through
/// the four stages.
pub fn step_jacobians<M, const NX: usize>(
    model: &M,
    x: &SVector<f64, NX>,
    u: &Vector2<f64>,
    dt: f64,
) -> Result<StateJacobians<NX>>
where
    M: Dynamics<NX> + ?Sized,
{
    let eye = SMatrix::<f64, NX, NX>::identity();
    let h2 = 0.5 * dt;

    let k1 = model.rhs(x, u)?;
    let (a1, b1) = model.rhs_jacobians(x, u)?;

    let x2 = x + k1 * h2;
    let k2 = model.rhs(&x2, u)?;
    let (a, b) = model.rhs_jacobians(&x2, u)?;
    let a2 = a * (eye + a1 * h2);
    let b2 = a * (b1 * h2) + b;

    let x3 = x + k2 * h2;
    let k3 = model.rhs(&x3, u)?;
    let (a, b) = model.rhs_jacobians(&x3, u)?;
    let a3 = a * (eye + a2 * h2);
    let b3 = a * (b2 * h2) + b;

    let x4 = x + k3 * dt;
    let k4 = model.rhs(&x4, u)?;
    let (a, b) = model.rhs_jacobians(&x4, u)?;
    let a4 = a * (eye + a3 * dt);
    let b4 = a * (b3 * dt) + b;

    let w = dt / 6.0;
    Ok(StateJacobians {
        next: x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * w,
        d_state: eye + (a1 + a2 * 2.0 + a3 * 2.0 + a4) * w,
        d_control: (b1 + b2 * 2.0 + b3 * 2.0 + b4) * w,
    })
}

/// Forward finite-difference sensitivities of [`rk4_step`] with step `h` on
/// every coordinate.
pub fn step_jacobians_fd<M, const NX: usize>(
    model: &M,
    x: &SVector<f64, NX>,
    u: &Vector2<f64>,
    dt: f64,
    h: f64,
) -> Result<StateJacobians<NX>>
where
    M: Dynamics<NX> + ?Sized,
{
    let next = rk4_step(model, x, u, dt)?;
    let mut d_state = SMatrix::<f64, NX, NX>::zeros();
    for j in 0..NX {
        let mut xp = *x;
        xp[j] += h;
        let col = (rk4_step(model, &xp, u, dt)? - next) / h;
        d_state.set_column(j, &col);
    }
    let mut d_control = SMatrix::<f64, NX, 2>::zeros();
    for j in 0..2 {
        let mut up = *u;
        up[j] += h;
        let col = (rk4_step(model, x, &up, dt)? - next) / h;
        d_control.set_column(j, &col);
    }
    Ok(StateJacobians {
        next,
        d_state,
        d_control,
    })
}

//! Unicycle obstacle-avoidance suite: the reduced-order model, circular
//! obstacle tracks, desired and backup controllers, barrier functions with
//! exact gradients and time partials, and a full-order proxy with first-order
//! actuator lag for robustness experiments.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, RowVector3, Vector2, Vector3};
use thiserror::Error;

use crate::safety::{BackupSpec, ControlAffine, SafetySpec};

/// States closer than this to the obstacle center are rejected instead of
/// clamped; clamping would corrupt the gradients.
pub const DEGENERATE_DISTANCE: f64 = 1e-9;

#[derive(Debug, Clone, Error)]
pub enum UnicycleError {
    #[error("degenerate geometry: state within {distance} m of the obstacle center")]
    DegenerateGeometry { distance: f64 },
}

/// Planar pose: position in meters, yaw in radians (unwrapped).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct State3 {
    pub xi: f64,
    pub eta: f64,
    pub psi: f64,
}

impl State3 {
    pub fn new(xi: f64, eta: f64, psi: f64) -> Self {
        State3 { xi, eta, psi }
    }

    pub fn origin() -> Self {
        State3::new(0.0, 0.0, 0.0)
    }

    pub fn position(&self) -> Vector2<f64> {
        Vector2::new(self.xi, self.eta)
    }

    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_vec(vec![self.xi, self.eta, self.psi])
    }

    pub fn from_vector(v: &DVector<f64>) -> Self {
        State3::new(v[0], v[1], v[2])
    }
}

/// Speed and yaw-rate command.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Input2 {
    pub v: f64,
    pub omega: f64,
}

impl Input2 {
    pub fn new(v: f64, omega: f64) -> Self {
        Input2 { v, omega }
    }

    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_vec(vec![self.v, self.omega])
    }

    pub fn from_vector(v: &DVector<f64>) -> Self {
        Input2::new(v[0], v[1])
    }
}

/// Box bounds on the input: `v ∈ [v_min, v_max]`, `|ω| ≤ omega_max`.
#[derive(Debug, Clone, Copy)]
pub struct InputBounds {
    pub v_min: f64,
    pub v_max: f64,
    pub omega_max: f64,
}

impl InputBounds {
    pub fn lower(&self) -> DVector<f64> {
        DVector::from_vec(vec![self.v_min, -self.omega_max])
    }

    pub fn upper(&self) -> DVector<f64> {
        DVector::from_vec(vec![self.v_max, self.omega_max])
    }

    pub fn violation(&self, u: &Input2) -> f64 {
        let v_out = (self.v_min - u.v).max(u.v - self.v_max).max(0.0);
        let w_out = (u.omega.abs() - self.omega_max).max(0.0);
        v_out.max(w_out)
    }
}

impl Default for InputBounds {
    fn default() -> Self {
        InputBounds {
            v_min: 0.1,
            v_max: 0.2,
            omega_max: 0.3,
        }
    }
}

/// Circular obstacle trajectory with analytic velocity and acceleration.
#[derive(Debug, Clone, Copy)]
pub enum ObstacleTrack {
    Static { xi: f64, eta: f64 },
    /// Vertical sinusoid: `η(t) = eta_mean − amplitude·sin(Ωt)/Ω`, so the
    /// peak speed equals `amplitude`.
    Sinusoidal {
        xi: f64,
        eta_mean: f64,
        amplitude: f64,
        frequency: f64,
    },
}

impl ObstacleTrack {
    pub fn position(&self, t: f64) -> Vector2<f64> {
        match *self {
            ObstacleTrack::Static { xi, eta } => Vector2::new(xi, eta),
            ObstacleTrack::Sinusoidal {
                xi,
                eta_mean,
                amplitude,
                frequency,
            } => Vector2::new(xi, eta_mean - amplitude * (frequency * t).sin() / frequency),
        }
    }

    pub fn velocity(&self, t: f64) -> Vector2<f64> {
        match *self {
            ObstacleTrack::Static { .. } => Vector2::zeros(),
            ObstacleTrack::Sinusoidal {
                amplitude,
                frequency,
                ..
            } => Vector2::new(0.0, -amplitude * (frequency * t).cos()),
        }
    }

    pub fn acceleration(&self, t: f64) -> Vector2<f64> {
        match *self {
            ObstacleTrack::Static { .. } => Vector2::zeros(),
            ObstacleTrack::Sinusoidal {
                amplitude,
                frequency,
                ..
            } => Vector2::new(0.0, amplitude * frequency * (frequency * t).sin()),
        }
    }
}

/// Goal-following gains: hold speed `v_g` while steering to the line
/// `η = eta_g`.
#[derive(Debug, Clone, Copy)]
pub struct DesiredParams {
    pub v_g: f64,
    pub eta_g: f64,
    pub k_eta: f64,
    pub k_psi: f64,
}

impl Default for DesiredParams {
    fn default() -> Self {
        DesiredParams {
            v_g: 0.2,
            eta_g: 0.0,
            k_eta: 0.5,
            k_psi: 0.5,
        }
    }
}

/// `ξ̇ = v cos ψ, η̇ = v sin ψ, ψ̇ = ω`.
pub fn rom_dynamics(x: &State3, u: &Input2) -> Vector3<f64> {
    Vector3::new(u.v * x.psi.cos(), u.v * x.psi.sin(), u.omega)
}

/// `k_d(x) = [v_g; K_η (η_g − η) − K_ψ sin ψ]`.
pub fn desired_controller(x: &State3, params: &DesiredParams) -> Input2 {
    Input2::new(
        params.v_g,
        params.k_eta * (params.eta_g - x.eta) - params.k_psi * x.psi.sin(),
    )
}

/// Obstacle-relative geometry shared by the barrier formulas:
/// distance `d`, outward normal `n`, tangential projector `P = I − nnᵀ`,
/// heading `q` and its left normal `r`.
struct Geometry {
    d: f64,
    n: Vector2<f64>,
    proj: Matrix2<f64>,
    q: Vector2<f64>,
    r: Vector2<f64>,
}

fn geometry(x: &State3, t: f64, track: &ObstacleTrack) -> Result<Geometry, UnicycleError> {
    let rel = x.position() - track.position(t);
    let d = rel.norm();
    if d <= DEGENERATE_DISTANCE {
        return Err(UnicycleError::DegenerateGeometry { distance: d });
    }
    let n = rel / d;
    let proj = Matrix2::identity() - n * n.transpose();
    let q = Vector2::new(x.psi.cos(), x.psi.sin());
    let r = Vector2::new(-x.psi.sin(), x.psi.cos());
    Ok(Geometry { d, n, proj, q, r })
}

/// Distance barrier with a heading penalty:
/// `h = D − R_O + δ nᵀq`, returned with its exact gradient over `(ξ, η, ψ)`
/// and its explicit time partial (nonzero for moving obstacles).
pub fn safety_h(
    x: &State3,
    t: f64,
    track: &ObstacleTrack,
    delta: f64,
    r_o: f64,
) -> Result<(f64, RowVector3<f64>, f64), UnicycleError> {
    let g = geometry(x, t, track)?;
    let h = g.d - r_o + delta * g.n.dot(&g.q);

    let grad_p = g.n.transpose() + (g.q.transpose() * g.proj) * (delta / g.d);
    let grad_psi = delta * g.n.dot(&g.r);
    let grad = RowVector3::new(grad_p[0], grad_p[1], grad_psi);

    let v_obs = track.velocity(t);
    let dh_dt = -g.n.dot(&v_obs) - delta * (g.q.transpose() * g.proj * v_obs)[0] / g.d;

    Ok((h, grad, dh_dt))
}

/// Evasive policy: full speed, turning away from the obstacle as fast as the
/// yaw-rate bound allows. `ε` tunes how sharply `ω` saturates; `tanh` keeps
/// the command strictly inside the bounds. Also returns the state Jacobian of
/// the closed backup loop.
pub fn backup_policy(
    x: &State3,
    t: f64,
    track: &ObstacleTrack,
    bounds: &InputBounds,
    epsilon: f64,
) -> Result<(Input2, Matrix3<f64>), UnicycleError> {
    let g = geometry(x, t, track)?;
    let z = g.n.dot(&g.r) / epsilon;
    let th = z.tanh();
    let u = Input2::new(bounds.v_max, bounds.omega_max * th);

    // d(nᵀr)/dp = rᵀP/D and d(nᵀr)/dψ = −nᵀq, scaled by the tanh slope.
    let sech2 = 1.0 - th * th;
    let coeff = bounds.omega_max * sech2 / epsilon;
    let d_p = (g.r.transpose() * g.proj) / g.d;
    let jac = Matrix3::new(
        0.0,
        0.0,
        -bounds.v_max * x.psi.sin(),
        0.0,
        0.0,
        bounds.v_max * x.psi.cos(),
        coeff * d_p[0],
        coeff * d_p[1],
        coeff * (-g.n.dot(&g.q)),
    );
    Ok((u, jac))
}

/// Barrier kept invariant by the evasive policy:
/// `h_b = nᵀ(q v_max − ṗ_O)`, positive once the vehicle outruns the obstacle
/// along the outward normal.
pub fn backup_h(
    x: &State3,
    t: f64,
    track: &ObstacleTrack,
    v_max: f64,
) -> Result<(f64, RowVector3<f64>, f64), UnicycleError> {
    let g = geometry(x, t, track)?;
    let v_obs = track.velocity(t);
    let w = g.q * v_max - v_obs;
    let hb = g.n.dot(&w);

    let grad_p = (w.transpose() * g.proj) / g.d;
    let grad_psi = g.n.dot(&g.r) * v_max;
    let grad = RowVector3::new(grad_p[0], grad_p[1], grad_psi);

    let a_obs = track.acceleration(t);
    let dhb_dt = -(w.transpose() * g.proj * v_obs)[0] / g.d - g.n.dot(&a_obs);

    Ok((hb, grad, dhb_dt))
}

/// Full-order proxy state: the pose plus lagged actuator rates.
#[derive(Debug, Clone, Copy)]
pub struct FosState {
    pub pose: State3,
    pub v_act: f64,
    pub omega_act: f64,
}

impl FosState {
    pub fn at_rest(pose: State3) -> Self {
        FosState {
            pose,
            v_act: 0.0,
            omega_act: 0.0,
        }
    }
}

/// One RK4 step of the proxy: actuated rates follow a first-order lag toward
/// the command, the pose integrates the unicycle with the (optionally
/// perturbed) actuated rates. `noise` is an already-sampled bounded
/// perturbation of the rates, held constant over the step.
pub fn fos_step(s: &FosState, u: &Input2, dt: f64, tau: f64, noise: Option<(f64, f64)>) -> FosState {
    assert!(tau > 0.0 && dt > 0.0);
    let (w_v, w_omega) = noise.unwrap_or((0.0, 0.0));
    let deriv = |st: &[f64; 5]| -> [f64; 5] {
        let psi = st[2];
        let v_eff = st[3] + w_v;
        let omega_eff = st[4] + w_omega;
        [
            v_eff * psi.cos(),
            v_eff * psi.sin(),
            omega_eff,
            (u.v - st[3]) / tau,
            (u.omega - st[4]) / tau,
        ]
    };
    let y0 = [s.pose.xi, s.pose.eta, s.pose.psi, s.v_act, s.omega_act];
    let add = |a: &[f64; 5], b: &[f64; 5], c: f64| -> [f64; 5] {
        [
            a[0] + c * b[0],
            a[1] + c * b[1],
            a[2] + c * b[2],
            a[3] + c * b[3],
            a[4] + c * b[4],
        ]
    };
    let k1 = deriv(&y0);
    let k2 = deriv(&add(&y0, &k1, 0.5 * dt));
    let k3 = deriv(&add(&y0, &k2, 0.5 * dt));
    let k4 = deriv(&add(&y0, &k3, dt));
    let mut y = y0;
    for i in 0..5 {
        y[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    FosState {
        pose: State3::new(y[0], y[1], y[2]),
        v_act: y[3],
        omega_act: y[4],
    }
}

/// Deviation of the true reduced dynamics from the model prediction under
/// command `u`: `((v_act−v)cosψ, (v_act−v)sinψ, ω_act−ω)`.
pub fn discrepancy(s: &FosState, u: &Input2) -> Vector3<f64> {
    let dv = s.v_act - u.v;
    Vector3::new(
        dv * s.pose.psi.cos(),
        dv * s.pose.psi.sin(),
        s.omega_act - u.omega,
    )
}

/// The reduced-order model as a control-affine system: `f(x) = 0`,
/// `g(x) = [[cos ψ, 0], [sin ψ, 0], [0, 1]]`.
#[derive(Debug, Clone, Copy, Default)]
pub struct UnicycleModel;

impl ControlAffine for UnicycleModel {
    fn state_dim(&self) -> usize {
        3
    }

    fn input_dim(&self) -> usize {
        2
    }

    fn drift(&self, _x: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(3)
    }

    fn input_matrix(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let psi = x[2];
        DMatrix::from_row_slice(3, 2, &[psi.cos(), 0.0, psi.sin(), 0.0, 0.0, 1.0])
    }
}

/// Obstacle-distance barrier as a [`SafetySpec`]. Degenerate geometry maps to
/// NaN, which integration and constraint assembly surface as faults rather
/// than silently clamping.
#[derive(Debug, Clone)]
pub struct ObstacleAvoidance {
    pub track: ObstacleTrack,
    pub delta: f64,
    pub r_o: f64,
}

impl SafetySpec for ObstacleAvoidance {
    fn h(&self, x: &DVector<f64>, t: f64) -> f64 {
        match safety_h(&State3::from_vector(x), t, &self.track, self.delta, self.r_o) {
            Ok((h, _, _)) => h,
            Err(_) => f64::NAN,
        }
    }

    fn grad_h(&self, x: &DVector<f64>, t: f64) -> DVector<f64> {
        match safety_h(&State3::from_vector(x), t, &self.track, self.delta, self.r_o) {
            Ok((_, g, _)) => DVector::from_vec(vec![g[0], g[1], g[2]]),
            Err(_) => DVector::from_element(3, f64::NAN),
        }
    }

    fn dh_dt(&self, x: &DVector<f64>, t: f64) -> f64 {
        match safety_h(&State3::from_vector(x), t, &self.track, self.delta, self.r_o) {
            Ok((_, _, dt)) => dt,
            Err(_) => f64::NAN,
        }
    }
}

/// Turn-away backup policy and its barrier as a [`BackupSpec`].
#[derive(Debug, Clone)]
pub struct TurnAwayBackup {
    pub track: ObstacleTrack,
    pub bounds: InputBounds,
    pub epsilon: f64,
}

impl BackupSpec for TurnAwayBackup {
    fn h_b(&self, x: &DVector<f64>, t: f64) -> f64 {
        match backup_h(&State3::from_vector(x), t, &self.track, self.bounds.v_max) {
            Ok((hb, _, _)) => hb,
            Err(_) => f64::NAN,
        }
    }

    fn grad_h_b(&self, x: &DVector<f64>, t: f64) -> DVector<f64> {
        match backup_h(&State3::from_vector(x), t, &self.track, self.bounds.v_max) {
            Ok((_, g, _)) => DVector::from_vec(vec![g[0], g[1], g[2]]),
            Err(_) => DVector::from_element(3, f64::NAN),
        }
    }

    fn dh_b_dt(&self, x: &DVector<f64>, t: f64) -> f64 {
        match backup_h(&State3::from_vector(x), t, &self.track, self.bounds.v_max) {
            Ok((_, _, dt)) => dt,
            Err(_) => f64::NAN,
        }
    }

    fn k_b(&self, x: &DVector<f64>, t: f64) -> DVector<f64> {
        match backup_policy(
            &State3::from_vector(x),
            t,
            &self.track,
            &self.bounds,
            self.epsilon,
        ) {
            Ok((u, _)) => u.to_vector(),
            Err(_) => DVector::from_element(2, f64::NAN),
        }
    }

    fn backup_jacobian(&self, x: &DVector<f64>, t: f64) -> DMatrix<f64> {
        match backup_policy(
            &State3::from_vector(x),
            t,
            &self.track,
            &self.bounds,
            self.epsilon,
        ) {
            Ok((_, j)) => DMatrix::from_row_slice(
                3,
                3,
                &[
                    j[(0, 0)],
                    j[(0, 1)],
                    j[(0, 2)],
                    j[(1, 0)],
                    j[(1, 1)],
                    j[(1, 2)],
                    j[(2, 0)],
                    j[(2, 1)],
                    j[(2, 2)],
                ],
            ),
            Err(_) => DMatrix::from_element(3, 3, f64::NAN),
        }
    }
}

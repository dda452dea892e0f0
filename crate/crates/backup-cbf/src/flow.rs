//! Fixed-step integration of a backup closed-loop vector field together with
//! its variational equation, producing the flow and its state Jacobian on a
//! uniform grid.
//!
//! The sensitivity `Q(θ, x) = ∂φ(θ, x)/∂x` is propagated jointly with the
//! state by the same RK4 scheme, so both share one step size and one error
//! behaviour.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Clone, Error)]
pub enum FlowError {
    #[error("integration diverged at t = {time}: non-finite state")]
    Diverged { time: f64 },
    #[error(
        "invalid flow grid: horizon {horizon}, {grid_count} intervals, {substeps} substeps"
    )]
    InvalidGrid {
        horizon: f64,
        grid_count: usize,
        substeps: usize,
    },
    #[error("state dimension {got} does not match field dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// A time-varying vector field with an analytic state Jacobian.
///
/// Both maps must be deterministic: identical inputs yield bit-identical
/// outputs, which the simulation harness relies on for replayability.
pub trait VectorField: Sync {
    fn dim(&self) -> usize;

    /// Field value `f(x, t)`.
    fn eval(&self, x: &DVector<f64>, t: f64) -> DVector<f64>;

    /// State Jacobian `∂f/∂x (x, t)`.
    fn jacobian(&self, x: &DVector<f64>, t: f64) -> DMatrix<f64>;
}

/// Flow of the backup loop on the grid `θ_i = i·T/N`, with the state
/// sensitivity at every node. `states[0]` is the seed and `sens[0]` is the
/// identity.
#[derive(Debug, Clone)]
pub struct BackupFlow {
    pub horizon: f64,
    /// Wall time at which the flow was launched; node `i` corresponds to
    /// absolute time `base_time + thetas[i]`.
    pub base_time: f64,
    pub thetas: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub sens: Vec<DMatrix<f64>>,
}

impl BackupFlow {
    pub fn grid_count(&self) -> usize {
        self.thetas.len() - 1
    }

    pub fn seed(&self) -> &DVector<f64> {
        &self.states[0]
    }
}

fn check_finite(x: &DVector<f64>, time: f64) -> Result<(), FlowError> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(FlowError::Diverged { time })
    }
}

/// One classical 4th-order Runge-Kutta step of `x` over `[t, t + dt]`.
pub fn rk4_step<F: VectorField + ?Sized>(
    field: &F,
    x: &DVector<f64>,
    t: f64,
    dt: f64,
) -> Result<DVector<f64>, FlowError> {
    if x.len() != field.dim() {
        return Err(FlowError::DimensionMismatch {
            expected: field.dim(),
            got: x.len(),
        });
    }
    if !(dt > 0.0) {
        return Err(FlowError::InvalidGrid {
            horizon: dt,
            grid_count: 1,
            substeps: 1,
        });
    }
    let half = 0.5 * dt;
    let k1 = field.eval(x, t);
    let k2 = field.eval(&(x + &k1 * half), t + half);
    let k3 = field.eval(&(x + &k2 * half), t + half);
    let k4 = field.eval(&(x + &k3 * dt), t + dt);
    let next = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    check_finite(&next, t + dt)?;
    Ok(next)
}

/// RK4 step of the pair `(x, Q)` where `Q' = ∂f/∂x(x, t)·Q`.
fn rk4_joint_step<F: VectorField + ?Sized>(
    field: &F,
    x: &DVector<f64>,
    q: &DMatrix<f64>,
    t: f64,
    dt: f64,
) -> Result<(DVector<f64>, DMatrix<f64>), FlowError> {
    let half = 0.5 * dt;

    let k1x = field.eval(x, t);
    let k1q = field.jacobian(x, t) * q;

    let x2 = x + &k1x * half;
    let q2 = q + &k1q * half;
    let k2x = field.eval(&x2, t + half);
    let k2q = field.jacobian(&x2, t + half) * q2;

    let x3 = x + &k2x * half;
    let q3 = q + &k2q * half;
    let k3x = field.eval(&x3, t + half);
    let k3q = field.jacobian(&x3, t + half) * q3;

    let x4 = x + &k3x * dt;
    let q4 = q + &k3q * dt;
    let k4x = field.eval(&x4, t + dt);
    let k4q = field.jacobian(&x4, t + dt) * q4;

    let xn = x + (k1x + k2x * 2.0 + k3x * 2.0 + k4x) * (dt / 6.0);
    let qn = q + (k1q + k2q * 2.0 + k3q * 2.0 + k4q) * (dt / 6.0);
    check_finite(&xn, t + dt)?;
    if !qn.iter().all(|v| v.is_finite()) {
        return Err(FlowError::Diverged { time: t + dt });
    }
    Ok((xn, qn))
}

/// Integrates the state and its sensitivity from `x` at wall time `t` over
/// `[0, horizon]`, recording both at every grid node `θ_i = i·horizon/grid_count`.
///
/// The integration step is `horizon / (grid_count · substeps)`.
pub fn integrate_backup_flow<F: VectorField + ?Sized>(
    field: &F,
    x: &DVector<f64>,
    t: f64,
    horizon: f64,
    grid_count: usize,
    substeps: usize,
) -> Result<BackupFlow, FlowError> {
    if !(horizon > 0.0) || grid_count == 0 || substeps == 0 {
        return Err(FlowError::InvalidGrid {
            horizon,
            grid_count,
            substeps,
        });
    }
    if x.len() != field.dim() {
        return Err(FlowError::DimensionMismatch {
            expected: field.dim(),
            got: x.len(),
        });
    }
    let n = field.dim();
    let dt = horizon / (grid_count as f64 * substeps as f64);

    let mut thetas = Vec::with_capacity(grid_count + 1);
    let mut states = Vec::with_capacity(grid_count + 1);
    let mut sens = Vec::with_capacity(grid_count + 1);

    let mut state = x.clone();
    let mut q = DMatrix::<f64>::identity(n, n);
    check_finite(&state, t)?;
    thetas.push(0.0);
    states.push(state.clone());
    sens.push(q.clone());

    for i in 0..grid_count {
        let theta_start = i as f64 * horizon / grid_count as f64;
        for j in 0..substeps {
            let theta = theta_start + j as f64 * dt;
            let (xn, qn) = rk4_joint_step(field, &state, &q, t + theta, dt)?;
            state = xn;
            q = qn;
        }
        thetas.push((i + 1) as f64 * horizon / grid_count as f64);
        states.push(state.clone());
        sens.push(q.clone());
    }

    Ok(BackupFlow {
        horizon,
        base_time: t,
        thetas,
        states,
        sens,
    })
}

/// Step size used by [`fd_sensitivity`] re-integrations. Matches the default
/// backup-flow step so truncation errors largely cancel in the difference.
const FD_STEP_TARGET: f64 = 0.01;

/// Central-difference estimate of `∂φ(θ, x)/∂x` via `2·dim` re-integrations
/// of the plain state equation. Intended as an independent cross-check of the
/// variational sensitivity.
pub fn fd_sensitivity<F: VectorField + ?Sized>(
    field: &F,
    x: &DVector<f64>,
    t: f64,
    theta: f64,
    eps: f64,
) -> Result<DMatrix<f64>, FlowError> {
    assert!(eps > 0.0, "perturbation must be positive");
    let n = field.dim();
    if x.len() != n {
        return Err(FlowError::DimensionMismatch {
            expected: n,
            got: x.len(),
        });
    }
    if theta == 0.0 {
        return Ok(DMatrix::identity(n, n));
    }

    let steps = (theta / FD_STEP_TARGET).ceil().max(1.0) as usize;
    let dt = theta / steps as f64;
    let propagate = |x0: DVector<f64>| -> Result<DVector<f64>, FlowError> {
        let mut s = x0;
        for k in 0..steps {
            s = rk4_step(field, &s, t + k as f64 * dt, dt)?;
        }
        Ok(s)
    };

    let mut jac = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut plus = x.clone();
        let mut minus = x.clone();
        plus[j] += eps;
        minus[j] -= eps;
        let fp = propagate(plus)?;
        let fm = propagate(minus)?;
        for i in 0..n {
            jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * eps);
        }
    }
    Ok(jac)
}

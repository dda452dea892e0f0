//! Barrier-based safety filters: the plain CBF quadratic program, the
//! discretized backup-set program, and its slack-relaxed input-to-state safe
//! variant, together with the invariant-set membership tests they rely on.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::flow::{integrate_backup_flow, BackupFlow, FlowError, VectorField};
use crate::qp::{self, ConstraintRow, QpError, QpProblem, QpSolution, QpStatus};

/// Substeps per grid interval used when controllers integrate the backup flow
/// themselves (step 0.01 s at the default horizon and grid).
pub const FLOW_SUBSTEPS: usize = 5;

#[derive(Debug, Clone, Error)]
pub enum SafetyError {
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error("constraint assembly produced a non-finite row ({label})")]
    NonFiniteRow { label: String },
    #[error(
        "backup program infeasible (inside invariant set: {in_invariant_set}, margin {margin}); conflicting rows: {rows:?}"
    )]
    BackupInfeasible {
        in_invariant_set: bool,
        margin: f64,
        rows: Vec<String>,
    },
    #[error("quadratic program did not converge")]
    MaxIterations,
    #[error("safety program infeasible; conflicting rows: {rows:?}")]
    Infeasible { rows: Vec<String> },
    #[error("invalid gains: {what}")]
    InvalidGains { what: String },
}

/// Safe-set description: barrier value, gradient and explicit time partial.
/// Zero must be a regular value of `h`.
pub trait SafetySpec: Sync {
    fn h(&self, x: &DVector<f64>, t: f64) -> f64;
    fn grad_h(&self, x: &DVector<f64>, t: f64) -> DVector<f64>;
    fn dh_dt(&self, x: &DVector<f64>, t: f64) -> f64;
}

/// Backup set description plus the policy that renders it invariant. The
/// policy must respect the input bounds everywhere in the safe set.
pub trait BackupSpec: Sync {
    fn h_b(&self, x: &DVector<f64>, t: f64) -> f64;
    fn grad_h_b(&self, x: &DVector<f64>, t: f64) -> DVector<f64>;
    fn dh_b_dt(&self, x: &DVector<f64>, t: f64) -> f64;
    fn k_b(&self, x: &DVector<f64>, t: f64) -> DVector<f64>;
    /// State Jacobian of the closed backup loop `f(x) + g(x) k_b(x, t)`.
    fn backup_jacobian(&self, x: &DVector<f64>, t: f64) -> DMatrix<f64>;
}

/// Control-affine model `ẋ = f(x) + g(x) u`.
pub trait ControlAffine: Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn drift(&self, x: &DVector<f64>) -> DVector<f64>;
    fn input_matrix(&self, x: &DVector<f64>) -> DMatrix<f64>;
}

/// The closed backup loop as a vector field, for flow integration.
pub struct BackupField<'a, M: ControlAffine, B: BackupSpec> {
    model: &'a M,
    bspec: &'a B,
}

impl<'a, M: ControlAffine, B: BackupSpec> BackupField<'a, M, B> {
    pub fn new(model: &'a M, bspec: &'a B) -> Self {
        BackupField { model, bspec }
    }
}

impl<M: ControlAffine, B: BackupSpec> VectorField for BackupField<'_, M, B> {
    fn dim(&self) -> usize {
        self.model.state_dim()
    }

    fn eval(&self, x: &DVector<f64>, t: f64) -> DVector<f64> {
        self.model.drift(x) + self.model.input_matrix(x) * self.bspec.k_b(x, t)
    }

    fn jacobian(&self, x: &DVector<f64>, t: f64) -> DMatrix<f64> {
        self.bspec.backup_jacobian(x, t)
    }
}

/// Filter gains: linear barrier rates `γ`, `γ_b`, robustness weights `σ`,
/// `σ_b`, the backup horizon and grid, the heading-penalty length and turn
/// sharpness of the concrete suite, and the input-tracking weight `Γ`.
#[derive(Debug, Clone)]
pub struct SafetyGains {
    pub gamma: f64,
    pub gamma_b: f64,
    pub sigma: f64,
    pub sigma_b: f64,
    pub horizon: f64,
    pub grid_count: usize,
    pub delta_heading: f64,
    pub epsilon: f64,
    /// Positive-definite weight of `‖u − k_d‖²_Γ` in the controllers.
    pub input_weight: DMatrix<f64>,
}

impl Default for SafetyGains {
    fn default() -> Self {
        SafetyGains {
            gamma: 1.0,
            gamma_b: 1.0,
            sigma: 0.1,
            sigma_b: 0.1,
            horizon: 4.0,
            grid_count: 80,
            delta_heading: 0.0,
            epsilon: 0.01,
            input_weight: DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.25])),
        }
    }
}

impl SafetyGains {
    pub fn validate(&self) -> Result<(), SafetyError> {
        if !(self.gamma > 0.0 && self.gamma_b > 0.0) {
            return Err(SafetyError::InvalidGains {
                what: "barrier rates must be positive".into(),
            });
        }
        if !(self.sigma >= 0.0 && self.sigma_b >= 0.0) {
            return Err(SafetyError::InvalidGains {
                what: "robustness weights must be nonnegative".into(),
            });
        }
        if !(self.horizon > 0.0) || self.grid_count == 0 {
            return Err(SafetyError::InvalidGains {
                what: "horizon must be positive with at least one grid interval".into(),
            });
        }
        Ok(())
    }
}

/// Input box; infinite entries leave a component unconstrained.
#[derive(Debug, Clone)]
pub struct InputBox {
    pub lb: DVector<f64>,
    pub ub: DVector<f64>,
}

impl InputBox {
    pub fn unbounded(dim: usize) -> Self {
        InputBox {
            lb: DVector::from_element(dim, f64::NEG_INFINITY),
            ub: DVector::from_element(dim, f64::INFINITY),
        }
    }
}

/// Membership verdict with the worst barrier margin over the flow grid.
#[derive(Debug, Clone, Copy)]
pub struct SetMembership {
    pub inside: bool,
    pub margin: f64,
}

/// Barrier data sampled along one backup flow: values, flow-sensitivity
/// gradients `∇h(φ_i)·Q_i` and time partials at every node, plus the backup
/// barrier at the horizon.
pub struct FlowBarriers {
    pub h_values: Vec<f64>,
    pub h_flow_grads: Vec<DVector<f64>>,
    pub h_dts: Vec<f64>,
    pub hb_value: f64,
    pub hb_flow_grad: DVector<f64>,
    pub hb_dt: f64,
}

impl FlowBarriers {
    pub fn min_h(&self) -> f64 {
        self.h_values.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Evaluates both barriers along a computed flow. Time-varying quantities are
/// taken at `base_time + θ_i` along the predicted obstacle motion.
pub fn sample_flow_barriers(
    flow: &BackupFlow,
    spec: &dyn SafetySpec,
    bspec: &dyn BackupSpec,
) -> FlowBarriers {
    let nodes = flow.thetas.len();
    let mut h_values = Vec::with_capacity(nodes);
    let mut h_flow_grads = Vec::with_capacity(nodes);
    let mut h_dts = Vec::with_capacity(nodes);
    for i in 0..nodes {
        let t_i = flow.base_time + flow.thetas[i];
        let phi = &flow.states[i];
        h_values.push(spec.h(phi, t_i));
        // Row-vector chain rule ∇h(φ)·Q, carried as a column.
        h_flow_grads.push(flow.sens[i].transpose() * spec.grad_h(phi, t_i));
        h_dts.push(spec.dh_dt(phi, t_i));
    }
    let t_end = flow.base_time + flow.horizon;
    let phi_end = flow.states.last().expect("flow has at least one node");
    let q_end = flow.sens.last().expect("flow has at least one node");
    FlowBarriers {
        h_values,
        h_flow_grads,
        h_dts,
        hb_value: bspec.h_b(phi_end, t_end),
        hb_flow_grad: q_end.transpose() * bspec.grad_h_b(phi_end, t_end),
        hb_dt: bspec.dh_b_dt(phi_end, t_end),
    }
}

/// Builds the discretized backup-set constraint rows at the flow's seed
/// state: one row per grid node for the safe-set barrier and one row for the
/// backup barrier at the horizon. With `robust` set, each right-hand side is
/// tightened by `σ‖∇h(φ)·Q‖²` (`σ_b` for the backup row).
#[allow(clippy::too_many_arguments)]
pub fn assemble_backup_rows(
    flow: &BackupFlow,
    model: &dyn ControlAffine,
    spec: &dyn SafetySpec,
    bspec: &dyn BackupSpec,
    gains: &SafetyGains,
    robust: bool,
) -> Result<Vec<ConstraintRow>, SafetyError> {
    let x = flow.seed();
    let f = model.drift(x);
    let g = model.input_matrix(x);

    let bars = sample_flow_barriers(flow, spec, bspec);
    let mut rows = Vec::with_capacity(bars.h_values.len() + 1);
    for i in 0..bars.h_values.len() {
        let grad = &bars.h_flow_grads[i];
        let a = g.transpose() * grad;
        let mut b = -gains.gamma * bars.h_values[i] - grad.dot(&f) - bars.h_dts[i];
        if robust {
            b += gains.sigma * grad.norm_squared();
        }
        let row = ConstraintRow::new(a, b, format!("hbar_{i}"));
        if !row.a.iter().all(|v| v.is_finite()) || !row.b.is_finite() {
            return Err(SafetyError::NonFiniteRow { label: row.label });
        }
        rows.push(row);
    }

    let grad_b = &bars.hb_flow_grad;
    let a = g.transpose() * grad_b;
    let mut b = -gains.gamma_b * bars.hb_value - grad_b.dot(&f) - bars.hb_dt;
    if robust {
        b += gains.sigma_b * grad_b.norm_squared();
    }
    let row = ConstraintRow::new(a, b, "hb");
    if !row.a.iter().all(|v| v.is_finite()) || !row.b.is_finite() {
        return Err(SafetyError::NonFiniteRow { label: row.label });
    }
    rows.push(row);
    Ok(rows)
}

fn tracking_problem(
    k_d: &DVector<f64>,
    gains: &SafetyGains,
    bounds: &InputBox,
) -> Result<QpProblem, SafetyError> {
    // ‖u − k_d‖²_Γ = ½ uᵀ(2Γ)u − (2Γ k_d)ᵀu + const.
    let p = &gains.input_weight * 2.0;
    let q = -(&gains.input_weight * 2.0) * k_d;
    Ok(QpProblem::new(p, q, bounds.lb.clone(), bounds.ub.clone())?)
}

fn solved(solution: QpSolution) -> Result<QpSolution, SafetyError> {
    match &solution.status {
        QpStatus::Optimal => Ok(solution),
        QpStatus::Infeasible { rows } => Err(SafetyError::Infeasible { rows: rows.clone() }),
        QpStatus::MaxIterations => Err(SafetyError::MaxIterations),
    }
}

/// Plain CBF filter: minimally modifies `k_d` subject to the single barrier
/// row `∇h·(f + g u) + ∂h/∂t ≥ −γ h`. With a finite box this program may be
/// infeasible; that is surfaced, not masked.
#[allow(clippy::too_many_arguments)]
pub fn cbf_qp_controller(
    x: &DVector<f64>,
    t: f64,
    k_d: &DVector<f64>,
    model: &dyn ControlAffine,
    spec: &dyn SafetySpec,
    gains: &SafetyGains,
    bounds: &InputBox,
) -> Result<QpSolution, SafetyError> {
    gains.validate()?;
    let h = spec.h(x, t);
    let grad = spec.grad_h(x, t);
    let a = model.input_matrix(x).transpose() * &grad;
    let b = -gains.gamma * h - grad.dot(&model.drift(x)) - spec.dh_dt(x, t);
    let row = ConstraintRow::new(a, b, "h");
    if !row.a.iter().all(|v| v.is_finite()) || !row.b.is_finite() {
        return Err(SafetyError::NonFiniteRow { label: row.label });
    }
    let mut problem = tracking_problem(k_d, gains, bounds)?;
    problem.push_row(row);
    solved(qp::solve(&problem))
}

/// Discretized backup-set filter over a precomputed flow. Infeasibility is a
/// contract violation inside the invariant set, so the error carries the
/// membership verdict alongside the conflicting rows.
#[allow(clippy::too_many_arguments)]
pub fn backup_controller_with_flow(
    flow: &BackupFlow,
    k_d: &DVector<f64>,
    model: &dyn ControlAffine,
    spec: &dyn SafetySpec,
    bspec: &dyn BackupSpec,
    gains: &SafetyGains,
    bounds: &InputBox,
) -> Result<QpSolution, SafetyError> {
    gains.validate()?;
    let rows = assemble_backup_rows(flow, model, spec, bspec, gains, false)?;
    let problem = tracking_problem(k_d, gains, bounds)?.with_rows(rows);
    let solution = qp::solve(&problem);
    match solution.status {
        QpStatus::Infeasible { ref rows } => {
            let membership = membership_si(flow, spec, bspec);
            Err(SafetyError::BackupInfeasible {
                in_invariant_set: membership.inside,
                margin: membership.margin,
                rows: rows.clone(),
            })
        }
        _ => solved(solution),
    }
}

/// [`backup_controller_with_flow`] with the flow integrated internally (one
/// integration per call, shared by all rows).
#[allow(clippy::too_many_arguments)]
pub fn backup_controller(
    x: &DVector<f64>,
    t: f64,
    k_d: &DVector<f64>,
    model: &dyn ControlAffine,
    spec: &dyn SafetySpec,
    bspec: &dyn BackupSpec,
    gains: &SafetyGains,
    bounds: &InputBox,
) -> Result<QpSolution, SafetyError> {
    let field = DynBackupField { model, bspec };
    let flow = integrate_backup_flow(&field, x, t, gains.horizon, gains.grid_count, FLOW_SUBSTEPS)?;
    backup_controller_with_flow(&flow, k_d, model, spec, bspec, gains, bounds)
}

/// Input-to-state safe variant: robust rows, each relaxed by a quadratically
/// penalized slack, which keeps the program feasible by construction.
#[allow(clippy::too_many_arguments)]
pub fn issf_backup_controller_with_flow(
    flow: &BackupFlow,
    k_d: &DVector<f64>,
    model: &dyn ControlAffine,
    spec: &dyn SafetySpec,
    bspec: &dyn BackupSpec,
    gains: &SafetyGains,
    bounds: &InputBox,
    penalties: (f64, f64),
) -> Result<QpSolution, SafetyError> {
    gains.validate()?;
    let (p_rows, p_backup) = penalties;
    assert!(p_rows > 0.0 && p_backup > 0.0, "penalties must be positive");
    let rows = assemble_backup_rows(flow, model, spec, bspec, gains, true)?;
    let n = rows.len();
    let rows = rows.into_iter().enumerate().map(|(i, row)| {
        let penalty = if i + 1 == n { p_backup } else { p_rows };
        row.with_slack(penalty)
    });
    let problem = tracking_problem(k_d, gains, bounds)?.with_rows(rows);
    solved(qp::solve(&problem))
}

/// [`issf_backup_controller_with_flow`] with the flow integrated internally.
#[allow(clippy::too_many_arguments)]
pub fn issf_backup_controller(
    x: &DVector<f64>,
    t: f64,
    k_d: &DVector<f64>,
    model: &dyn ControlAffine,
    spec: &dyn SafetySpec,
    bspec: &dyn BackupSpec,
    gains: &SafetyGains,
    bounds: &InputBox,
    penalties: (f64, f64),
) -> Result<QpSolution, SafetyError> {
    let field = DynBackupField { model, bspec };
    let flow = integrate_backup_flow(&field, x, t, gains.horizon, gains.grid_count, FLOW_SUBSTEPS)?;
    issf_backup_controller_with_flow(&flow, k_d, model, spec, bspec, gains, bounds, penalties)
}

/// Membership in the implicit invariant set: the flow stays in the safe set
/// on `[0, T]` and lands in the backup set at `T`. The margin is the worst
/// barrier value over both conditions.
pub fn membership_si(
    flow: &BackupFlow,
    spec: &dyn SafetySpec,
    bspec: &dyn BackupSpec,
) -> SetMembership {
    let bars = sample_flow_barriers(flow, spec, bspec);
    let margin = bars.min_h().min(bars.hb_value);
    SetMembership {
        inside: margin >= 0.0,
        margin,
    }
}

/// Membership in the disturbance-robust neighborhood: thresholds shift to
/// `−B/(4σγ)` and `−B/(4σ_b γ_b)` for a squared disturbance bound `B`.
pub fn membership_sd(
    flow: &BackupFlow,
    spec: &dyn SafetySpec,
    bspec: &dyn BackupSpec,
    gains: &SafetyGains,
    disturbance_bound: f64,
) -> SetMembership {
    assert!(
        gains.sigma > 0.0 && gains.sigma_b > 0.0,
        "robust membership requires positive robustness weights"
    );
    assert!(disturbance_bound >= 0.0);
    let bars = sample_flow_barriers(flow, spec, bspec);
    let thr_h = -disturbance_bound / (4.0 * gains.sigma * gains.gamma);
    let thr_hb = -disturbance_bound / (4.0 * gains.sigma_b * gains.gamma_b);
    let margin = (bars.min_h() - thr_h).min(bars.hb_value - thr_hb);
    SetMembership {
        inside: margin >= 0.0,
        margin,
    }
}

/// Object-safe backup field used by the convenience controllers.
struct DynBackupField<'a> {
    model: &'a dyn ControlAffine,
    bspec: &'a dyn BackupSpec,
}

impl VectorField for DynBackupField<'_> {
    fn dim(&self) -> usize {
        self.model.state_dim()
    }

    fn eval(&self, x: &DVector<f64>, t: f64) -> DVector<f64> {
        self.model.drift(x) + self.model.input_matrix(x) * self.bspec.k_b(x, t)
    }

    fn jacobian(&self, x: &DVector<f64>, t: f64) -> DMatrix<f64> {
        self.bspec.backup_jacobian(x, t)
    }
}

/// Integrates the backup flow for `(x, t)` under the given gains; shared by
/// the simulation harness so logging and control see the same flow.
pub fn backup_flow_for(
    x: &DVector<f64>,
    t: f64,
    model: &dyn ControlAffine,
    bspec: &dyn BackupSpec,
    gains: &SafetyGains,
) -> Result<BackupFlow, FlowError> {
    let field = DynBackupField { model, bspec };
    integrate_backup_flow(&field, x, t, gains.horizon, gains.grid_count, FLOW_SUBSTEPS)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::unicycle::{
        desired_controller, DesiredParams, InputBounds, ObstacleAvoidance, ObstacleTrack, State3,
        TurnAwayBackup, UnicycleModel,
    };
    use approx::assert_abs_diff_eq;

    fn suite(delta: f64) -> (UnicycleModel, ObstacleAvoidance, TurnAwayBackup, SafetyGains) {
        let track = ObstacleTrack::Static { xi: 2.0, eta: -0.25 };
        let model = UnicycleModel;
        let spec = ObstacleAvoidance {
            track,
            delta,
            r_o: 0.75,
        };
        let bspec = TurnAwayBackup {
            track,
            bounds: InputBounds::default(),
            epsilon: 0.01,
        };
        let gains = SafetyGains {
            delta_heading: delta,
            ..SafetyGains::default()
        };
        (model, spec, bspec, gains)
    }

    fn input_box() -> InputBox {
        let b = InputBounds::default();
        InputBox {
            lb: b.lower(),
            ub: b.upper(),
        }
    }

    #[test]
    fn far_state_returns_desired_input() {
        let (model, spec, _, gains) = suite(0.5);
        // Far behind the obstacle, heading away: the barrier row is inactive.
        let x = State3::new(-50.0, 0.0, std::f64::consts::PI).to_vector();
        let k_d = desired_controller(&State3::from_vector(&x), &DesiredParams::default());
        let sol = cbf_qp_controller(
            &x,
            0.0,
            &k_d.to_vector(),
            &model,
            &spec,
            &gains,
            &InputBox::unbounded(2),
        )
        .unwrap();
        assert!((sol.u[0] - k_d.v).abs() <= 1e-9);
        assert!((sol.u[1] - k_d.omega).abs() <= 1e-9);
    }

    #[test]
    fn cbf_row_is_certified_at_nominal_start() {
        let (model, spec, _, gains) = suite(0.5);
        let x = State3::origin().to_vector();
        let k_d = DVector::from_vec(vec![0.2, 0.0]);
        let sol = cbf_qp_controller(
            &x,
            0.0,
            &k_d,
            &model,
            &spec,
            &gains,
            &InputBox::unbounded(2),
        )
        .unwrap();
        assert!(sol.u.iter().all(|v| v.is_finite()));
        let prob = {
            let mut p = tracking_problem(&k_d, &gains, &InputBox::unbounded(2)).unwrap();
            let h = spec.h(&x, 0.0);
            let grad = spec.grad_h(&x, 0.0);
            let a = model.input_matrix(&x).transpose() * &grad;
            let b = -gains.gamma * h - spec.dh_dt(&x, 0.0);
            p.push_row(ConstraintRow::new(a, b, "h"));
            p
        };
        assert!(qp::kkt_residual(&prob, &sol) <= 1e-8);
    }

    #[test]
    fn vacuous_zero_row_returns_desired() {
        struct FlatSafe;
        impl SafetySpec for FlatSafe {
            fn h(&self, _x: &DVector<f64>, _t: f64) -> f64 {
                1.0
            }
            fn grad_h(&self, _x: &DVector<f64>, _t: f64) -> DVector<f64> {
                DVector::zeros(3)
            }
            fn dh_dt(&self, _x: &DVector<f64>, _t: f64) -> f64 {
                0.0
            }
        }
        let model = UnicycleModel;
        let gains = SafetyGains::default();
        let k_d = DVector::from_vec(vec![0.15, 0.1]);
        let sol = cbf_qp_controller(
            &State3::origin().to_vector(),
            0.0,
            &k_d,
            &model,
            &FlatSafe,
            &gains,
            &input_box(),
        )
        .unwrap();
        assert!((sol.u[0] - 0.15).abs() <= 1e-12);
        assert!((sol.u[1] - 0.1).abs() <= 1e-12);
    }

    #[test]
    fn first_backup_row_equals_plain_cbf_row() {
        let (model, spec, bspec, gains) = suite(0.0);
        let x = State3::new(0.3, 0.2, 0.4).to_vector();
        let flow = backup_flow_for(&x, 0.0, &model, &bspec, &gains).unwrap();
        let rows = assemble_backup_rows(&flow, &model, &spec, &bspec, &gains, false).unwrap();

        let h = spec.h(&x, 0.0);
        let grad = spec.grad_h(&x, 0.0);
        let a = model.input_matrix(&x).transpose() * &grad;
        let b = -gains.gamma * h - grad.dot(&model.drift(&x)) - spec.dh_dt(&x, 0.0);
        assert!((&rows[0].a - &a).amax() <= 1e-12);
        assert_abs_diff_eq!(rows[0].b, b, epsilon = 1e-12);
        assert_eq!(rows.len(), gains.grid_count + 2);
        assert_eq!(rows.last().unwrap().label, "hb");
    }

    #[test]
    fn robust_rows_shift_by_sigma_grad_norms() {
        let (model, spec, bspec, gains) = suite(0.0);
        let x = State3::new(0.5, -0.1, 0.2).to_vector();
        let flow = backup_flow_for(&x, 0.0, &model, &bspec, &gains).unwrap();
        let plain = assemble_backup_rows(&flow, &model, &spec, &bspec, &gains, false).unwrap();
        let robust = assemble_backup_rows(&flow, &model, &spec, &bspec, &gains, true).unwrap();
        let bars = sample_flow_barriers(&flow, &spec, &bspec);
        for i in 0..plain.len() - 1 {
            let shift = gains.sigma * bars.h_flow_grads[i].norm_squared();
            assert_abs_diff_eq!(robust[i].b - plain[i].b, shift, epsilon = 1e-12);
            assert!((&robust[i].a - &plain[i].a).amax() == 0.0);
        }
        let shift_b = gains.sigma_b * bars.hb_flow_grad.norm_squared();
        let n = plain.len() - 1;
        assert_abs_diff_eq!(robust[n].b - plain[n].b, shift_b, epsilon = 1e-12);

        // Tightening is monotone in sigma.
        let mut more = gains.clone();
        more.sigma = 0.3;
        more.sigma_b = 0.3;
        let tighter = assemble_backup_rows(&flow, &model, &spec, &bspec, &more, true).unwrap();
        for i in 0..robust.len() {
            assert!(tighter[i].b >= robust[i].b - 1e-15);
        }
    }

    #[test]
    fn backup_rows_hold_at_backup_policy_input() {
        let (model, spec, bspec, gains) = suite(0.0);
        let x = State3::origin().to_vector();
        let flow = backup_flow_for(&x, 0.0, &model, &bspec, &gains).unwrap();
        let rows = assemble_backup_rows(&flow, &model, &spec, &bspec, &gains, false).unwrap();
        let u_b = bspec.k_b(&x, 0.0);
        for row in &rows {
            let violation = row.a.dot(&u_b) - row.b;
            assert!(
                violation >= -1e-6,
                "row {} violated by {violation}",
                row.label
            );
        }
    }

    #[test]
    fn backup_controller_stays_in_box_and_optimal() {
        let (model, spec, bspec, gains) = suite(0.0);
        let x = State3::origin().to_vector();
        let k_d = DVector::from_vec(vec![0.2, 0.0]);
        let sol =
            backup_controller(&x, 0.0, &k_d, &model, &spec, &bspec, &gains, &input_box()).unwrap();
        assert!(sol.is_optimal());
        assert!(sol.u[0] >= 0.1 - 1e-9 && sol.u[0] <= 0.2 + 1e-9);
        assert!(sol.u[1].abs() <= 0.3 + 1e-9);
    }

    #[test]
    fn deep_interior_state_passes_desired_through() {
        let (model, spec, bspec, gains) = suite(0.0);
        // Far behind the obstacle heading away: all rows inactive.
        let x = State3::new(8.0, 0.0, 0.0).to_vector();
        let k_d = DVector::from_vec(vec![0.17, 0.05]);
        let sol =
            backup_controller(&x, 0.0, &k_d, &model, &spec, &bspec, &gains, &input_box()).unwrap();
        assert!((sol.u[0] - 0.17).abs() <= 1e-9);
        assert!((sol.u[1] - 0.05).abs() <= 1e-9);
        assert!(sol.active_set.is_empty());
    }

    #[test]
    fn issf_with_zero_sigma_matches_backup_controller() {
        let (model, spec, bspec, mut gains) = suite(0.0);
        gains.sigma = 0.0;
        gains.sigma_b = 0.0;
        let x = State3::new(0.8, 0.1, 0.1).to_vector();
        let k_d = DVector::from_vec(vec![0.2, 0.0]);
        let flow = backup_flow_for(&x, 0.0, &model, &bspec, &gains).unwrap();
        let plain = backup_controller_with_flow(
            &flow, &k_d, &model, &spec, &bspec, &gains, &input_box(),
        )
        .unwrap();
        let relaxed = issf_backup_controller_with_flow(
            &flow,
            &k_d,
            &model,
            &spec,
            &bspec,
            &gains,
            &input_box(),
            (1e18, 1e18),
        )
        .unwrap();
        assert!(relaxed.max_slack() <= 1e-8);
        assert!((&plain.u - &relaxed.u).amax() <= 1e-8);
    }

    #[test]
    fn issf_is_feasible_even_when_rows_conflict_with_box() {
        struct Hostile;
        impl SafetySpec for Hostile {
            fn h(&self, _x: &DVector<f64>, _t: f64) -> f64 {
                -100.0
            }
            fn grad_h(&self, _x: &DVector<f64>, _t: f64) -> DVector<f64> {
                DVector::from_vec(vec![1.0, 0.0, 0.0])
            }
            fn dh_dt(&self, _x: &DVector<f64>, _t: f64) -> f64 {
                0.0
            }
        }
        let (model, _, bspec, gains) = suite(0.0);
        let x = State3::origin().to_vector();
        let k_d = DVector::from_vec(vec![0.2, 0.0]);
        let sol = issf_backup_controller(
            &x,
            0.0,
            &k_d,
            &model,
            &Hostile,
            &bspec,
            &gains,
            &input_box(),
            (1e18, 1e18),
        )
        .unwrap();
        assert!(sol.is_optimal());
        assert!(sol.max_slack() > 0.0);
    }

    #[test]
    fn membership_si_basics() {
        let (model, spec, bspec, gains) = suite(0.0);

        // Inside the obstacle: h(x) < 0 fails at the first node.
        let x_bad = State3::new(1.6, -0.25, 0.0).to_vector();
        let flow = backup_flow_for(&x_bad, 0.0, &model, &bspec, &gains).unwrap();
        let m = membership_si(&flow, &spec, &bspec);
        assert!(!m.inside);

        // Far behind the obstacle heading away: inside, and the safe-set part
        // of the margin is the current barrier value.
        let x_far = State3::new(6.0, 0.0, 0.0).to_vector();
        let flow = backup_flow_for(&x_far, 0.0, &model, &bspec, &gains).unwrap();
        let m = membership_si(&flow, &spec, &bspec);
        assert!(m.inside);
        let bars = sample_flow_barriers(&flow, &spec, &bspec);
        let h_now = spec.h(&x_far, 0.0);
        assert!((bars.min_h() - h_now).abs() <= 1e-9);
        assert!(m.margin > 0.0);
    }

    #[test]
    fn membership_si_agrees_with_refined_grid() {
        let (model, spec, bspec, gains) = suite(0.0);
        let mut fine = gains.clone();
        fine.grid_count = 400;
        for state in [
            State3::origin(),
            State3::new(1.0, 0.3, -0.4),
            State3::new(1.1, -0.2, 0.3),
            State3::new(-0.5, -0.5, 0.8),
        ] {
            let x = state.to_vector();
            let coarse_flow = backup_flow_for(&x, 0.0, &model, &bspec, &gains).unwrap();
            let fine_flow = backup_flow_for(&x, 0.0, &model, &bspec, &fine).unwrap();
            let a = membership_si(&coarse_flow, &spec, &bspec);
            let b = membership_si(&fine_flow, &spec, &bspec);
            assert_eq!(a.inside, b.inside, "state {state:?}");
        }
    }

    #[test]
    fn membership_sd_threshold_arithmetic() {
        let (model, spec, bspec, gains) = suite(0.0);
        let x = State3::origin().to_vector();
        let flow = backup_flow_for(&x, 0.0, &model, &bspec, &gains).unwrap();

        // B = 0 reduces to the plain membership.
        let plain = membership_si(&flow, &spec, &bspec);
        let robust = membership_sd(&flow, &spec, &bspec, &gains, 0.0);
        assert_eq!(plain.inside, robust.inside);
        assert_abs_diff_eq!(plain.margin, robust.margin, epsilon = 1e-15);

        // Threshold arithmetic: B = 0.01, sigma = 0.1, gamma = 1 -> -0.025.
        let bars = sample_flow_barriers(&flow, &spec, &bspec);
        let shifted = membership_sd(&flow, &spec, &bspec, &gains, 0.01);
        let expected = (bars.min_h() + 0.025).min(bars.hb_value + 0.025);
        assert_abs_diff_eq!(shifted.margin, expected, epsilon = 1e-12);

        // Any state inside the plain set stays inside the relaxed one.
        if plain.inside {
            assert!(shifted.inside);
        }
    }

    #[test]
    fn controller_is_locally_continuous_away_from_pivots() {
        let (model, spec, bspec, gains) = suite(0.0);
        let k_d = DVector::from_vec(vec![0.2, 0.0]);
        let states = [
            State3::new(0.4, 0.1, 0.2),
            State3::new(1.0, 0.5, -0.3),
            State3::new(-0.3, -0.4, 0.6),
        ];
        for s in states {
            let x = s.to_vector();
            let sol = backup_controller(&x, 0.0, &k_d, &model, &spec, &bspec, &gains, &input_box())
                .unwrap();
            let mut xp = x.clone();
            xp[0] += 1e-4;
            let sol_p =
                backup_controller(&xp, 0.0, &k_d, &model, &spec, &bspec, &gains, &input_box())
                    .unwrap();
            if sol.active_set == sol_p.active_set {
                let du = (&sol.u - &sol_p.u).norm();
                assert!(du <= 10.0 * 1e-4, "du = {du}");
            }
        }
    }
}

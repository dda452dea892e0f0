//! Dense convex quadratic programming for controller-rate problems:
//!
//! ```text
//!     minimize    ½ uᵀP u + qᵀu  (+ Σ pᵢ δᵢ² over slack-relaxed rows)
//!     subject to  aᵢᵀu ≥ bᵢ − δᵢ,   δᵢ ≥ 0,
//!                 lb ≤ u ≤ ub.
//! ```
//!
//! Slack-relaxed rows are lifted into extra decision variables. Internally a
//! slack with penalty `p` is rescaled by `1/√p` so the lifted Hessian stays
//! well conditioned even for penalties around `1e18`; the scaling only shows
//! up as a tiny coefficient in the corresponding constraint row.
//!
//! The solver is an active-set method that starts from the unconstrained
//! minimizer and adds the most violated constraint per iteration (ties broken
//! on the lowest row index), taking combined primal/dual steps and dropping
//! blocking constraints as needed. The working-set factorization is rebuilt
//! from scratch at every pivot; problems here are tiny, so the O(n³) cost is
//! irrelevant next to determinism and exact active-set reporting.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Constraint activity tolerance (absolute).
pub const ACTIVITY_TOL: f64 = 1e-10;

/// Relative curvature threshold below which a candidate constraint is treated
/// as linearly dependent on the working set.
const CURVATURE_TOL: f64 = 1e-24;

/// Dual direction entries below this are not considered blocking.
const DUAL_DIR_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Error)]
pub enum QpError {
    #[error("cost matrix is not symmetric (max asymmetry {max_asym})")]
    NotSymmetric { max_asym: f64 },
    #[error("cost matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("box bounds inverted at component {index}")]
    InvalidBounds { index: usize },
    #[error("non-finite data in {what}")]
    NonFinite { what: String },
    #[error("dimension mismatch in {what}")]
    Dimension { what: String },
}

/// One affine inequality `aᵀu ≥ b`, optionally relaxed by a quadratically
/// penalized slack (`aᵀu ≥ b − δ`, cost `p·δ²`, `δ ≥ 0`).
#[derive(Debug, Clone)]
pub struct ConstraintRow {
    pub a: DVector<f64>,
    pub b: f64,
    pub slack_penalty: Option<f64>,
    pub label: String,
}

impl ConstraintRow {
    pub fn new(a: DVector<f64>, b: f64, label: impl Into<String>) -> Self {
        ConstraintRow {
            a,
            b,
            slack_penalty: None,
            label: label.into(),
        }
    }

    pub fn with_slack(mut self, penalty: f64) -> Self {
        assert!(penalty > 0.0, "slack penalty must be positive");
        self.slack_penalty = Some(penalty);
        self
    }

    /// A zero row is vacuous iff `b ≤ 0`; with `b > 0` and no slack it is
    /// infeasible as stated.
    fn is_zero(&self) -> bool {
        self.a.iter().all(|v| *v == 0.0)
    }
}

#[derive(Debug, Clone)]
pub struct QpProblem {
    p: DMatrix<f64>,
    q: DVector<f64>,
    lb: DVector<f64>,
    ub: DVector<f64>,
    rows: Vec<ConstraintRow>,
}

impl QpProblem {
    /// Validates symmetry (to 1e-12), positive definiteness (via Cholesky)
    /// and bound ordering. Infinite bounds mark unconstrained components.
    pub fn new(
        p: DMatrix<f64>,
        q: DVector<f64>,
        lb: DVector<f64>,
        ub: DVector<f64>,
    ) -> Result<Self, QpError> {
        let m = p.nrows();
        if p.ncols() != m || q.len() != m || lb.len() != m || ub.len() != m {
            return Err(QpError::Dimension {
                what: "cost/bounds".into(),
            });
        }
        if !p.iter().all(|v| v.is_finite()) || !q.iter().all(|v| v.is_finite()) {
            return Err(QpError::NonFinite {
                what: "cost".into(),
            });
        }
        let max_asym = (&p - p.transpose()).amax();
        if max_asym > 1e-12 {
            return Err(QpError::NotSymmetric { max_asym });
        }
        if nalgebra::Cholesky::new(p.clone()).is_none() {
            return Err(QpError::NotPositiveDefinite);
        }
        for i in 0..m {
            if lb[i] > ub[i] {
                return Err(QpError::InvalidBounds { index: i });
            }
        }
        Ok(QpProblem {
            p,
            q,
            lb,
            ub,
            rows: Vec::new(),
        })
    }

    pub fn push_row(&mut self, row: ConstraintRow) {
        assert_eq!(row.a.len(), self.num_vars(), "row dimension mismatch");
        assert!(
            row.a.iter().all(|v| v.is_finite()) && row.b.is_finite(),
            "constraint row must be finite"
        );
        self.rows.push(row);
    }

    pub fn with_rows(mut self, rows: impl IntoIterator<Item = ConstraintRow>) -> Self {
        for r in rows {
            self.push_row(r);
        }
        self
    }

    pub fn num_vars(&self) -> usize {
        self.p.nrows()
    }

    pub fn rows(&self) -> &[ConstraintRow] {
        &self.rows
    }

    pub fn cost(&self) -> (&DMatrix<f64>, &DVector<f64>) {
        (&self.p, &self.q)
    }

    pub fn bounds(&self) -> (&DVector<f64>, &DVector<f64>) {
        (&self.lb, &self.ub)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum QpStatus {
    Optimal,
    /// Carries an irreducible set of row labels that conflict with each other
    /// or with the box bounds.
    Infeasible { rows: Vec<String> },
    MaxIterations,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub u: DVector<f64>,
    /// `(label, δ)` for every slack-relaxed row.
    pub slacks: Vec<(String, f64)>,
    pub objective: f64,
    pub status: QpStatus,
    /// Labels of general rows active at the solution.
    pub active_set: Vec<String>,
    /// One multiplier per general row (zero when inactive).
    pub row_duals: Vec<f64>,
    pub lower_duals: DVector<f64>,
    pub upper_duals: DVector<f64>,
    pub iterations: usize,
}

impl QpSolution {
    pub fn max_slack(&self) -> f64 {
        self.slacks.iter().map(|(_, d)| *d).fold(0.0, f64::max)
    }

    pub fn is_optimal(&self) -> bool {
        self.status == QpStatus::Optimal
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum CKind {
    /// General row index (into `QpProblem::rows`).
    Row(usize),
    /// Nonnegativity of the lifted slack for row index.
    SlackBound(usize),
    Lower(usize),
    Upper(usize),
}

struct Cons {
    normal: DVector<f64>,
    rhs: f64,
    kind: CKind,
}

/// Deterministic active-set solve of the (lifted) problem.
pub fn solve(problem: &QpProblem) -> QpSolution {
    let m = problem.num_vars();
    let n_rows = problem.rows.len();

    // Zero rows never enter the lifted system: vacuous ones are dropped and a
    // zero row with b > 0 and no slack is an immediate infeasibility.
    for row in &problem.rows {
        if row.is_zero() && row.b > 0.0 && row.slack_penalty.is_none() {
            return infeasible_solution(problem, vec![row.label.clone()]);
        }
    }

    // Lifted layout: [u; scaled slacks], one slack per relaxed row.
    let slack_rows: Vec<usize> = (0..n_rows)
        .filter(|&i| problem.rows[i].slack_penalty.is_some())
        .collect();
    let n_slack = slack_rows.len();
    let n = m + n_slack;
    let slack_of_row: Vec<Option<usize>> = {
        let mut v = vec![None; n_rows];
        for (j, &i) in slack_rows.iter().enumerate() {
            v[i] = Some(j);
        }
        v
    };
    // δ = c·δ̃ with c = 1/√p keeps the lifted Hessian block at 2·I.
    let scale: Vec<f64> = slack_rows
        .iter()
        .map(|&i| 1.0 / problem.rows[i].slack_penalty.unwrap().sqrt())
        .collect();

    let mut g = DMatrix::<f64>::zeros(n, n);
    g.view_mut((0, 0), (m, m)).copy_from(&problem.p);
    for j in 0..n_slack {
        g[(m + j, m + j)] = 2.0;
    }
    let mut q_l = DVector::<f64>::zeros(n);
    q_l.rows_mut(0, m).copy_from(&problem.q);

    let chol = nalgebra::Cholesky::new(g.clone()).expect("validated at construction");
    let l = chol.l();
    let lt = l.transpose();

    // Constraint list in a fixed order: general rows, slack bounds, box
    // bounds. Selection ties are broken by this index.
    let mut cons: Vec<Cons> = Vec::new();
    for (i, row) in problem.rows.iter().enumerate() {
        if row.is_zero() && row.slack_penalty.is_none() {
            continue; // vacuous (b ≤ 0 was checked above)
        }
        let mut normal = DVector::<f64>::zeros(n);
        normal.rows_mut(0, m).copy_from(&row.a);
        if let Some(j) = slack_of_row[i] {
            normal[m + j] = scale[j];
        }
        cons.push(Cons {
            normal,
            rhs: row.b,
            kind: CKind::Row(i),
        });
    }
    for j in 0..n_slack {
        let mut normal = DVector::<f64>::zeros(n);
        normal[m + j] = 1.0;
        cons.push(Cons {
            normal,
            rhs: 0.0,
            kind: CKind::SlackBound(j),
        });
    }
    for k in 0..m {
        if problem.lb[k].is_finite() {
            let mut normal = DVector::<f64>::zeros(n);
            normal[k] = 1.0;
            cons.push(Cons {
                normal,
                rhs: problem.lb[k],
                kind: CKind::Lower(k),
            });
        }
        if problem.ub[k].is_finite() {
            let mut normal = DVector::<f64>::zeros(n);
            normal[k] = -1.0;
            cons.push(Cons {
                normal,
                rhs: -problem.ub[k],
                kind: CKind::Upper(k),
            });
        }
    }

    // Start at the unconstrained minimizer.
    let mut z = chol.solve(&(-&q_l));
    let mut working: Vec<usize> = Vec::new();
    let mut duals: Vec<f64> = Vec::new();
    let mut pivots = 0usize;
    let max_pivots = 100 * (m + n_rows).max(1);

    let lower_solve = |rhs: &DVector<f64>| -> DVector<f64> {
        l.solve_lower_triangular(rhs)
            .expect("Cholesky factor is nonsingular")
    };
    let upper_solve = |rhs: &DVector<f64>| -> DVector<f64> {
        lt.solve_upper_triangular(rhs)
            .expect("Cholesky factor is nonsingular")
    };

    let status = 'outer: loop {
        // Most violated constraint, lowest index on ties.
        let mut worst = -ACTIVITY_TOL;
        let mut pick: Option<usize> = None;
        for (j, c) in cons.iter().enumerate() {
            if working.contains(&j) {
                continue;
            }
            let v = c.normal.dot(&z) - c.rhs;
            if v < worst {
                worst = v;
                pick = Some(j);
            }
        }
        let Some(p_idx) = pick else {
            break QpStatus::Optimal;
        };

        let mut violation = cons[p_idx].normal.dot(&z) - cons[p_idx].rhs;
        let mut acc_dual = 0.0;

        // Inner loop: take partial (dual) steps dropping blockers until the
        // chosen constraint can be added with a full step.
        loop {
            pivots += 1;
            if pivots > max_pivots {
                break 'outer QpStatus::MaxIterations;
            }

            let w = lower_solve(&cons[p_idx].normal);
            // Project w out of the span of the working set (in L⁻¹ space),
            // with one re-orthogonalization pass.
            let (w_perp, coeffs) = if working.is_empty() {
                (w.clone(), DVector::zeros(0))
            } else {
                let k = working.len();
                let mut b = DMatrix::<f64>::zeros(n, k);
                for (col, &ci) in working.iter().enumerate() {
                    b.set_column(col, &lower_solve(&cons[ci].normal));
                }
                let qr = b.qr();
                let q1 = qr.q();
                let c1 = q1.transpose() * &w;
                let mut w_perp = &w - &q1 * &c1;
                let c2 = q1.transpose() * &w_perp;
                w_perp -= &q1 * &c2;
                let r = qr.r();
                let coeffs = r
                    .solve_upper_triangular(&(c1 + c2))
                    .expect("working set stays linearly independent");
                (w_perp, coeffs)
            };
            let curvature = w_perp.norm_squared();
            let independent = curvature > CURVATURE_TOL * w.norm_squared().max(f64::MIN_POSITIVE);

            // Dual step length: smallest multiplier ratio among blockers.
            let mut t1 = f64::INFINITY;
            let mut drop_at: Option<usize> = None;
            for (k, &ci) in working.iter().enumerate() {
                let r_k = coeffs[k];
                if r_k > DUAL_DIR_TOL {
                    let ratio = duals[k] / r_k;
                    if ratio < t1 - 1e-15 || (ratio < t1 + 1e-15 && drop_at.is_none()) {
                        t1 = ratio;
                        drop_at = Some(k);
                    }
                }
                let _ = ci;
            }

            let t2 = if independent {
                -violation / curvature
            } else {
                f64::INFINITY
            };

            if t1.is_infinite() && t2.is_infinite() {
                // Farkas certificate: the new constraint is a nonpositive
                // combination of the working set.
                let mut labels = Vec::new();
                if let CKind::Row(i) = cons[p_idx].kind {
                    labels.push(problem.rows[i].label.clone());
                }
                for (k, &ci) in working.iter().enumerate() {
                    if coeffs[k] < -ACTIVITY_TOL {
                        if let CKind::Row(i) = cons[ci].kind {
                            labels.push(problem.rows[i].label.clone());
                        }
                    }
                }
                break 'outer QpStatus::Infeasible { rows: labels };
            }

            let t = t1.min(t2);
            if independent {
                let z_dir = upper_solve(&w_perp);
                z += z_dir * t;
                violation = cons[p_idx].normal.dot(&z) - cons[p_idx].rhs;
            }
            for (k, d) in duals.iter_mut().enumerate() {
                *d = (*d - t * coeffs[k]).max(0.0);
            }
            acc_dual += t;

            if t2 <= t1 {
                working.push(p_idx);
                duals.push(acc_dual);
                break;
            }
            let k = drop_at.expect("finite t1 implies a blocker");
            working.remove(k);
            duals.remove(k);
        }
    };

    assemble_solution(problem, &cons, &z, &working, &duals, pivots, status, &slack_rows, &scale)
}

fn infeasible_solution(problem: &QpProblem, rows: Vec<String>) -> QpSolution {
    let m = problem.num_vars();
    QpSolution {
        u: DVector::zeros(m),
        slacks: Vec::new(),
        objective: f64::NAN,
        status: QpStatus::Infeasible { rows },
        active_set: Vec::new(),
        row_duals: vec![0.0; problem.rows.len()],
        lower_duals: DVector::zeros(m),
        upper_duals: DVector::zeros(m),
        iterations: 0,
    }
}

#[allow(clippy::too_many_arguments)]
fn assemble_solution(
    problem: &QpProblem,
    cons: &[Cons],
    z: &DVector<f64>,
    working: &[usize],
    duals: &[f64],
    pivots: usize,
    status: QpStatus,
    slack_rows: &[usize],
    scale: &[f64],
) -> QpSolution {
    let m = problem.num_vars();
    let u = DVector::from_fn(m, |i, _| z[i]);

    let mut slacks = Vec::with_capacity(slack_rows.len());
    for (j, &i) in slack_rows.iter().enumerate() {
        let delta = (scale[j] * z[m + j]).max(0.0);
        slacks.push((problem.rows[i].label.clone(), delta));
    }

    let mut row_duals = vec![0.0; problem.rows.len()];
    let mut lower_duals = DVector::zeros(m);
    let mut upper_duals = DVector::zeros(m);
    let mut active_set = Vec::new();
    for (k, &ci) in working.iter().enumerate() {
        match cons[ci].kind {
            CKind::Row(i) => {
                row_duals[i] = duals[k];
                active_set.push(problem.rows[i].label.clone());
            }
            CKind::Lower(i) => lower_duals[i] = duals[k],
            CKind::Upper(i) => upper_duals[i] = duals[k],
            CKind::SlackBound(_) => {}
        }
    }

    let mut objective = 0.5 * (problem.p.clone() * &u).dot(&u) + problem.q.dot(&u);
    for (j, &i) in slack_rows.iter().enumerate() {
        let delta = slacks[j].1;
        objective += problem.rows[i].slack_penalty.unwrap() * delta * delta;
    }
    if !matches!(status, QpStatus::Optimal) {
        objective = f64::NAN;
    }

    QpSolution {
        u,
        slacks,
        objective,
        status,
        active_set,
        row_duals,
        lower_duals,
        upper_duals,
        iterations: pivots,
    }
}

/// Maximum of the scaled stationarity, primal feasibility, dual feasibility
/// and complementarity violations of a solution. Each component is normalized
/// by the magnitude of the terms entering it, so the certificate stays
/// meaningful next to slack penalties around 1e18.
pub fn kkt_residual(problem: &QpProblem, sol: &QpSolution) -> f64 {
    assert!(
        sol.is_optimal(),
        "KKT residual is defined for optimal solutions"
    );
    let m = problem.num_vars();
    let u = &sol.u;
    let mut worst: f64 = 0.0;

    // Stationarity in u: P u + q − Σ λᵢ aᵢ − μ_lo + μ_hi = 0.
    let mut grad = &problem.p * u + &problem.q;
    let mut scale = 1.0 + grad.amax();
    for (i, row) in problem.rows.iter().enumerate() {
        let lam = sol.row_duals[i];
        if lam != 0.0 {
            grad -= &row.a * lam;
            scale += lam * row.a.amax();
        }
    }
    grad -= &sol.lower_duals;
    grad += &sol.upper_duals;
    scale += sol.lower_duals.amax() + sol.upper_duals.amax();
    worst = worst.max(grad.amax() / scale);

    // Slack stationarity: 2 p δ = λ whenever δ > 0 (slack bound inactive).
    let mut slack_of: Vec<f64> = vec![0.0; problem.rows.len()];
    for (label, delta) in &sol.slacks {
        if let Some(i) = problem.rows.iter().position(|r| &r.label == label) {
            slack_of[i] = *delta;
        }
    }
    for (i, row) in problem.rows.iter().enumerate() {
        if let Some(p) = row.slack_penalty {
            let delta = slack_of[i];
            if delta > 1e-12 {
                let lhs = 2.0 * p * delta;
                let lam = sol.row_duals[i];
                worst = worst.max((lhs - lam).abs() / (1.0 + lhs.abs() + lam.abs()));
            }
        }
    }

    // Primal feasibility.
    for (i, row) in problem.rows.iter().enumerate() {
        let resid = row.b - row.a.dot(u) - slack_of[i];
        worst = worst.max(resid.max(0.0) / (1.0 + row.b.abs()));
    }
    for k in 0..m {
        if problem.lb[k].is_finite() {
            worst = worst.max((problem.lb[k] - u[k]).max(0.0));
        }
        if problem.ub[k].is_finite() {
            worst = worst.max((u[k] - problem.ub[k]).max(0.0));
        }
    }
    for (_, delta) in &sol.slacks {
        worst = worst.max(-delta.max(f64::NEG_INFINITY).min(0.0));
    }

    // Dual feasibility and complementarity.
    for (i, row) in problem.rows.iter().enumerate() {
        let lam = sol.row_duals[i];
        worst = worst.max(-lam.min(0.0));
        let activity = row.a.dot(u) + slack_of[i] - row.b;
        worst = worst.max((lam * activity).abs() / ((1.0 + lam.abs()) * (1.0 + row.b.abs())));
    }
    for k in 0..m {
        let lo = sol.lower_duals[k];
        let hi = sol.upper_duals[k];
        worst = worst.max(-lo.min(0.0)).max(-hi.min(0.0));
        if problem.lb[k].is_finite() {
            worst = worst.max((lo * (u[k] - problem.lb[k])).abs() / (1.0 + lo.abs()));
        }
        if problem.ub[k].is_finite() {
            worst = worst.max((hi * (problem.ub[k] - u[k])).abs() / (1.0 + hi.abs()));
        }
    }

    worst
}

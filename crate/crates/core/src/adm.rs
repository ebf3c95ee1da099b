//! Alternating-direction augmented Lagrangian drivers.
//!
//! Three problem shapes share the same iteration pattern: an x-update
//! (projection or prox over the loss variables), an optional y-update over
//! secondary losses, a QP weight update over the target set, and multiplier
//! ascent steps. Iterations stop once the squared primal residuals or the
//! relative weight change fall under tolerance; runs against a capital or
//! risk budget additionally require the recomputed constraint to hold
//! within 1e-6 before declaring convergence.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::prox;
use crate::qp::{self, solve_qp, QpStatus};
use crate::risk::{self, BaselMeasure, RiskMeasure, RiskParams};
use crate::scenario::{LossVector, Partition, ScenarioPanel, WeightSet};

const FEAS_TOL: f64 = 1e-6;

/// Penalty weights, step lengths, and termination tolerances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
pub struct AdmParams {
    pub sigma1: f64,
    pub sigma2: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Threshold on the summed squared primal residuals.
    pub tol_feas: f64,
    /// Threshold on the relative weight change.
    pub tol_u: f64,
    pub max_iter: usize,
}

impl Default for AdmParams {
    fn default() -> Self {
        Self {
            sigma1: 1e-3,
            sigma2: 1e-3,
            beta1: 0.1,
            beta2: 0.1,
            tol_feas: 1e-8,
            tol_u: 1e-4,
            max_iter: 2000,
        }
    }
}

impl AdmParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("sigma1", self.sigma1),
            ("sigma2", self.sigma2),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("tol_feas", self.tol_feas),
            ("tol_u", self.tol_u),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParameter(format!("{name} = {v} must be positive")));
            }
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidParameter("max_iter must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-iteration residuals.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ResidualRecord {
    pub x_sq: f64,
    pub y_sq: f64,
    pub u_rel_change: f64,
}

/// Iterates and multipliers, plus the subgradient selections the last
/// updates certified (used by the KKT diagnostics).
#[derive(Debug, Clone)]
pub struct AdmState {
    pub x: DVector<f64>,
    pub y: DVector<f64>,
    pub u: DVector<f64>,
    pub lambda: DVector<f64>,
    pub pi: DVector<f64>,
    pub iterations: usize,
    pub residual_history: Vec<ResidualRecord>,
    /// `sigma2 (w - y)`, the selected subgradient of rho at y.
    pub g_selected: DVector<f64>,
    /// `sigma1 (v - x) = eta * h`, the scaled selected subgradient of the
    /// Basel measure at x.
    pub eta_h_selected: DVector<f64>,
    /// Multiplier of the capital constraint recovered from the x-update.
    pub eta: f64,
}

impl AdmState {
    fn fresh(n: usize, np: usize, u: DVector<f64>) -> Self {
        Self {
            x: DVector::zeros(n),
            y: DVector::zeros(np),
            u,
            lambda: DVector::zeros(n),
            pi: DVector::zeros(np),
            iterations: 0,
            residual_history: Vec::new(),
            g_selected: DVector::zeros(np),
            eta_h_selected: DVector::zeros(n),
            eta: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    MaxIter,
}

/// First-order residual summary.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct KktSummary {
    /// `||x + R u||`
    pub primal_x: f64,
    /// `||y + Y u||` (absent for single-block problems)
    pub primal_y: Option<f64>,
    /// `|eta (rho_B(x) - C0)|`
    pub complementarity: f64,
    /// Norm of the tangent-cone projection of the stationarity vector.
    pub stationarity: f64,
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub weights: DVector<f64>,
    /// Objective value: the risk for the risk-minimization problems, the
    /// expected return for the return-maximization problem.
    pub objective: f64,
    /// Risk of the reported weights under the objective measure.
    pub risk_value: f64,
    /// Capital or risk-budget constraint value at the reported weights.
    pub constraint_value: Option<f64>,
    pub residual_x_sq: f64,
    pub residual_y_sq: Option<f64>,
    pub u_rel_change: f64,
    pub kkt: KktSummary,
    pub iterations: usize,
    pub status: SolveStatus,
    pub wall_time: Duration,
    pub residual_history: Vec<ResidualRecord>,
    /// Smallest constraint value seen along the trajectory; diagnostic for
    /// unattainable budgets.
    pub min_observed_constraint: Option<f64>,
}

fn scalar_rho_ok(rho: RiskMeasure) -> Result<()> {
    match rho {
        RiskMeasure::Variance | RiskMeasure::Var | RiskMeasure::Cvar => Ok(()),
        _ => Err(Error::InvalidParameter(
            "objective risk must be variance, var, or cvar here".into(),
        )),
    }
}

fn prox_scalar(rho: RiskMeasure, w: &DVector<f64>, sigma: f64, params: &RiskParams) -> DVector<f64> {
    match rho {
        RiskMeasure::Variance => prox::prox_variance(w, sigma),
        RiskMeasure::Var => prox::prox_var(w, sigma, params.alpha),
        RiskMeasure::Cvar => prox::prox_cvar(w, sigma, params.alpha),
        _ => unreachable!("scalar prox on a Basel measure"),
    }
}

/// Feasible starting weights: equal weights, projected onto the target set
/// when the plain average misses the return floor.
fn initial_weights(set: &WeightSet) -> Result<DVector<f64>> {
    let d = set.mu.len();
    let equal = DVector::from_element(d, 1.0 / d as f64);
    let meets_target = match set.r0 {
        Some(r0) => set.mu.dot(&equal) >= r0,
        None => true,
    };
    if meets_target {
        return Ok(equal);
    }
    let q = DMatrix::identity(d, d) * 2.0;
    let c = equal.map(|v| -2.0 * v);
    let sol = solve_qp(&qp::u_update_problem(&q, &c, set))?;
    match sol.status {
        QpStatus::Optimal => Ok(sol.z),
        _ => Err(Error::Infeasible("could not project starting weights".into())),
    }
}

fn solve_weight_qp(h: &DMatrix<f64>, b: &DVector<f64>, set: &WeightSet) -> Result<DVector<f64>> {
    let sol = solve_qp(&qp::u_update_problem(h, b, set))?;
    match sol.status {
        QpStatus::Optimal => Ok(sol.z),
        QpStatus::Infeasible => Err(Error::Infeasible(format!(
            "weight update infeasible (violation {:.3e})",
            sol.violation
        ))),
        QpStatus::MaxIter => Err(Error::Solver("weight update did not converge".into())),
    }
}

/// Minimize `rho(y(u))` over the target set subject to the Basel capital
/// cap `rho_B(x(u)) <= c0`, where `x(u)` stacks panel losses and `y(u)`
/// stacks secondary-matrix losses.
#[allow(clippy::too_many_arguments)]
pub fn solve_mean_rho_basel(
    panel: &ScenarioPanel,
    y_mat: &DMatrix<f64>,
    rho: RiskMeasure,
    basel: BaselMeasure,
    params: &RiskParams,
    c0: f64,
    set: &WeightSet,
    adm: &AdmParams,
) -> Result<SolveReport> {
    scalar_rho_ok(rho)?;
    params.validate()?;
    adm.validate()?;
    if !c0.is_finite() {
        return Err(Error::InvalidParameter("capital cap must be finite".into()));
    }
    if set.is_infeasible() {
        return Err(Error::Infeasible(
            "target return exceeds the largest expected asset return".into(),
        ));
    }
    let d = panel.d();
    if y_mat.ncols() != d || set.mu.len() != d {
        return Err(Error::DimensionMismatch("panel, secondary matrix, and mu".into()));
    }
    let start = Instant::now();
    let r_mat = panel.stacked();
    let part = panel.partition();
    let np = y_mat.nrows();

    let hessian = r_mat.transpose() * &r_mat * adm.sigma1 + y_mat.transpose() * y_mat * adm.sigma2;
    let mut state = AdmState::fresh(part.n(), np, initial_weights(set)?);
    state.y = -(y_mat * &state.u);

    let mut status = SolveStatus::MaxIter;
    let mut min_constraint = f64::INFINITY;
    let mut last = ResidualRecord { x_sq: f64::INFINITY, y_sq: f64::INFINITY, u_rel_change: f64::INFINITY };

    for iter in 0..adm.max_iter {
        let v = -(&r_mat * &state.u + &state.lambda / adm.sigma1);
        let solve = prox::project_basel(&v, &part, params, c0, basel)?;
        state.x = solve.x;
        state.eta = 0.5 * adm.sigma1 * solve.capital_dual;
        state.eta_h_selected = (&v - &state.x) * adm.sigma1;

        let w = -(y_mat * &state.u + &state.pi / adm.sigma2);
        state.y = prox_scalar(rho, &w, adm.sigma2, params);
        state.g_selected = (&w - &state.y) * adm.sigma2;

        let b_e = r_mat.transpose() * (&state.lambda + &state.x * adm.sigma1)
            + y_mat.transpose() * (&state.pi + &state.y * adm.sigma2);
        let u_new = solve_weight_qp(&hessian, &b_e, set)?;

        let rx_vec = &state.x + &r_mat * &u_new;
        let ry_vec = &state.y + y_mat * &u_new;
        state.lambda += &rx_vec * (adm.beta1 * adm.sigma1);
        state.pi += &ry_vec * (adm.beta2 * adm.sigma2);

        last = ResidualRecord {
            x_sq: rx_vec.norm_squared(),
            y_sq: ry_vec.norm_squared(),
            u_rel_change: (&u_new - &state.u).norm() / state.u.norm().max(1.0),
        };
        state.residual_history.push(last);
        state.u = u_new;
        state.iterations = iter + 1;

        let losses = LossVector::new(-(&r_mat * &state.u), part.clone())?;
        let constraint = risk::evaluate_basel(basel, &losses, params)?;
        min_constraint = min_constraint.min(constraint);

        if (last.x_sq + last.y_sq <= adm.tol_feas || last.u_rel_change <= adm.tol_u)
            && constraint <= c0 + FEAS_TOL
        {
            status = SolveStatus::Converged;
            break;
        }
    }

    let secondary_losses = -(y_mat * &state.u);
    let risk_value = scalar_risk(rho, &secondary_losses, params)?;
    let panel_losses = LossVector::new(-(&r_mat * &state.u), part.clone())?;
    let constraint_value = risk::evaluate_basel(basel, &panel_losses, params)?;
    let kkt = kkt_residual(&state, panel, y_mat, params, basel, c0, set)?;

    Ok(SolveReport {
        weights: state.u.clone(),
        objective: risk_value,
        risk_value,
        constraint_value: Some(constraint_value),
        residual_x_sq: last.x_sq,
        residual_y_sq: Some(last.y_sq),
        u_rel_change: last.u_rel_change,
        kkt,
        iterations: state.iterations,
        status,
        wall_time: start.elapsed(),
        residual_history: state.residual_history,
        min_observed_constraint: Some(min_constraint.min(constraint_value)),
    })
}

fn scalar_risk(rho: RiskMeasure, losses: &DVector<f64>, params: &RiskParams) -> Result<f64> {
    match rho {
        RiskMeasure::Variance => risk::variance(losses.as_slice()),
        RiskMeasure::Var => risk::var_at(losses.as_slice(), params.alpha),
        RiskMeasure::Cvar => risk::cvar_at(losses.as_slice(), params.alpha),
        _ => unreachable!(),
    }
}

/// Minimize `rho(x(u))` over the target set; `rho` may be any of the five
/// measures (the Basel measures run through their prox).
pub fn solve_mean_rho(
    panel: &ScenarioPanel,
    rho: RiskMeasure,
    params: &RiskParams,
    set: &WeightSet,
    adm: &AdmParams,
) -> Result<SolveReport> {
    params.validate()?;
    adm.validate()?;
    if set.is_infeasible() {
        return Err(Error::Infeasible(
            "target return exceeds the largest expected asset return".into(),
        ));
    }
    if set.mu.len() != panel.d() {
        return Err(Error::DimensionMismatch("panel and mu".into()));
    }
    let start = Instant::now();
    let r_mat = panel.stacked();
    let part = panel.partition();
    let n = part.n();
    let (sigma, beta) = (adm.sigma1, adm.beta1);

    let hessian = r_mat.transpose() * &r_mat;
    let mut state = AdmState::fresh(n, 0, initial_weights(set)?);

    let mut status = SolveStatus::MaxIter;
    let mut last = ResidualRecord { x_sq: f64::INFINITY, y_sq: 0.0, u_rel_change: f64::INFINITY };

    for iter in 0..adm.max_iter {
        let v = -(&r_mat * &state.u + &state.lambda / sigma);
        state.x = match rho {
            RiskMeasure::Variance | RiskMeasure::Var | RiskMeasure::Cvar => {
                prox_scalar(rho, &v, sigma, params)
            }
            RiskMeasure::Basel25 => prox::prox_basel(&v, &part, params, sigma, BaselMeasure::Basel25)?,
            RiskMeasure::Basel3 => prox::prox_basel(&v, &part, params, sigma, BaselMeasure::Basel3)?,
        };
        state.eta_h_selected = (&v - &state.x) * sigma;

        let b = r_mat.transpose() * (&state.lambda / sigma + &state.x);
        let u_new = solve_weight_qp(&hessian, &b, set)?;

        let rx_vec = &state.x + &r_mat * &u_new;
        state.lambda += &rx_vec * (beta * sigma);
        last = ResidualRecord {
            x_sq: rx_vec.norm_squared(),
            y_sq: 0.0,
            u_rel_change: (&u_new - &state.u).norm() / state.u.norm().max(1.0),
        };
        state.residual_history.push(last);
        state.u = u_new;
        state.iterations = iter + 1;

        if last.x_sq <= adm.tol_feas || last.u_rel_change <= adm.tol_u {
            status = SolveStatus::Converged;
            break;
        }
    }

    let losses = LossVector::new(-(&r_mat * &state.u), part.clone())?;
    let risk_value = risk::evaluate(rho, &losses, params)?;
    let kkt = kkt_single(&state, &r_mat, &part, rho, params, set)?;

    Ok(SolveReport {
        weights: state.u.clone(),
        objective: risk_value,
        risk_value,
        constraint_value: None,
        residual_x_sq: last.x_sq,
        residual_y_sq: None,
        u_rel_change: last.u_rel_change,
        kkt,
        iterations: state.iterations,
        status,
        wall_time: start.elapsed(),
        residual_history: state.residual_history,
        min_observed_constraint: None,
    })
}

/// Maximize the expected return over the simplex subject to the risk budget
/// `rho(x(u)) <= b0`.
pub fn solve_max_return(
    panel: &ScenarioPanel,
    rho: RiskMeasure,
    params: &RiskParams,
    b0: f64,
    set: &WeightSet,
    adm: &AdmParams,
) -> Result<SolveReport> {
    params.validate()?;
    adm.validate()?;
    if !b0.is_finite() {
        return Err(Error::InvalidParameter("risk budget must be finite".into()));
    }
    if set.mu.len() != panel.d() {
        return Err(Error::DimensionMismatch("panel and mu".into()));
    }
    let start = Instant::now();
    let simplex = WeightSet::simplex_only(set.mu.clone());
    let r_mat = panel.stacked();
    let part = panel.partition();
    let (sigma, beta) = (adm.sigma1, adm.beta1);

    let hessian = r_mat.transpose() * &r_mat;
    let mut state = AdmState::fresh(part.n(), 0, initial_weights(&simplex)?);

    let mut status = SolveStatus::MaxIter;
    let mut min_constraint = f64::INFINITY;
    let mut last = ResidualRecord { x_sq: f64::INFINITY, y_sq: 0.0, u_rel_change: f64::INFINITY };

    for iter in 0..adm.max_iter {
        let v = -(&r_mat * &state.u + &state.lambda / sigma);
        state.x = match rho {
            RiskMeasure::Variance => prox::project_variance_ball(&v, b0.max(0.0)),
            RiskMeasure::Var => prox::project_var_ball(&v, params.alpha, b0),
            RiskMeasure::Cvar => prox::project_cvar_ball(&v, params.alpha, b0)?,
            RiskMeasure::Basel25 => {
                prox::project_basel(&v, &part, params, b0, BaselMeasure::Basel25)?.x
            }
            RiskMeasure::Basel3 => {
                prox::project_basel(&v, &part, params, b0, BaselMeasure::Basel3)?.x
            }
        };
        state.eta_h_selected = (&v - &state.x) * sigma;

        let b = r_mat.transpose() * (&state.lambda / sigma + &state.x) - &set.mu / sigma;
        let u_new = solve_weight_qp(&hessian, &b, &simplex)?;

        let rx_vec = &state.x + &r_mat * &u_new;
        state.lambda += &rx_vec * (beta * sigma);
        last = ResidualRecord {
            x_sq: rx_vec.norm_squared(),
            y_sq: 0.0,
            u_rel_change: (&u_new - &state.u).norm() / state.u.norm().max(1.0),
        };
        state.residual_history.push(last);
        state.u = u_new;
        state.iterations = iter + 1;

        let losses = LossVector::new(-(&r_mat * &state.u), part.clone())?;
        let constraint = risk::evaluate(rho, &losses, params)?;
        min_constraint = min_constraint.min(constraint);

        if (last.x_sq <= adm.tol_feas || last.u_rel_change <= adm.tol_u)
            && constraint <= b0 + FEAS_TOL
        {
            status = SolveStatus::Converged;
            break;
        }
    }

    let losses = LossVector::new(-(&r_mat * &state.u), part.clone())?;
    let risk_value = risk::evaluate(rho, &losses, params)?;
    let kkt = kkt_single(&state, &r_mat, &part, rho, params, &simplex)?;

    Ok(SolveReport {
        weights: state.u.clone(),
        objective: set.mu.dot(&state.u),
        risk_value,
        constraint_value: Some(risk_value),
        residual_x_sq: last.x_sq,
        residual_y_sq: None,
        u_rel_change: last.u_rel_change,
        kkt,
        iterations: state.iterations,
        status,
        wall_time: start.elapsed(),
        residual_history: state.residual_history,
        min_observed_constraint: Some(min_constraint.min(risk_value)),
    })
}

/// Distance of a vector to the normal cone of the target set at `u`,
/// computed as the norm of its projection onto the tangent cone (the
/// Moreau complement). Active sets are detected at tolerance 1e-7.
fn tangent_projection_norm(xi: &DVector<f64>, u: &DVector<f64>, set: &WeightSet) -> Result<f64> {
    let d = u.len();
    let act_tol = 1e-7;
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();
    for i in 0..d {
        if u[i] <= act_tol {
            rows.push(vec![(i, -1.0)]); // direction_i >= 0
        }
    }
    if let Some(r0) = set.r0 {
        if set.mu.dot(u) <= r0 + act_tol {
            rows.push((0..d).map(|j| (j, -set.mu[j])).collect());
        }
    }
    let mut a_in = DMatrix::zeros(rows.len(), d);
    for (r, row) in rows.iter().enumerate() {
        for &(col, v) in row {
            a_in[(r, col)] = v;
        }
    }
    let mut a_eq = DMatrix::zeros(1, d);
    for j in 0..d {
        a_eq[(0, j)] = 1.0;
    }
    let problem = qp::QpProblem::new(DMatrix::identity(d, d) * 2.0, xi.map(|v| -2.0 * v))
        .with_eq(a_eq, DVector::zeros(1))
        .with_ineq(a_in, DVector::zeros(rows.len()));
    let sol = solve_qp(&problem)?;
    if sol.status != QpStatus::Optimal {
        return Err(Error::Solver("tangent cone projection failed".into()));
    }
    Ok(sol.z.norm())
}

/// First-order residuals of the capital-constrained problem at a state:
/// primal feasibility of both splits, complementarity of the recovered
/// capital multiplier, and the tangent-cone norm of the stationarity
/// vector built from the subgradients the subproblem solves selected.
pub fn kkt_residual(
    state: &AdmState,
    panel: &ScenarioPanel,
    y_mat: &DMatrix<f64>,
    params: &RiskParams,
    basel: BaselMeasure,
    c0: f64,
    set: &WeightSet,
) -> Result<KktSummary> {
    let r_mat = panel.stacked();
    let part = panel.partition();
    let primal_x = (&state.x + &r_mat * &state.u).norm();
    let primal_y = (&state.y + y_mat * &state.u).norm();
    let basel_x = risk::evaluate_basel(basel, &LossVector::new(state.x.clone(), part)?, params)?;
    let complementarity = (state.eta * (basel_x - c0)).abs();
    let xi = y_mat.transpose() * &state.g_selected + r_mat.transpose() * &state.eta_h_selected;
    let stationarity = tangent_projection_norm(&xi, &state.u, set)?;
    Ok(KktSummary { primal_x, primal_y: Some(primal_y), complementarity, stationarity })
}

/// First-order residuals for the single-split drivers.
fn kkt_single(
    state: &AdmState,
    r_mat: &DMatrix<f64>,
    part: &Partition,
    rho: RiskMeasure,
    params: &RiskParams,
    set: &WeightSet,
) -> Result<KktSummary> {
    let _ = (part, rho, params);
    let primal_x = (&state.x + r_mat * &state.u).norm();
    let xi = r_mat.transpose() * &state.eta_h_selected;
    let stationarity = tangent_projection_norm(&xi, &state.u, set)?;
    Ok(KktSummary { primal_x, primal_y: None, complementarity: 0.0, stationarity })
}

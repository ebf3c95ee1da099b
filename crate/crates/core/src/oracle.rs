//! Independent ground-truth generators: refined grid search for the prox
//! and projection operators, direct convex models for the convex problem
//! variants, exhaustive enumeration for tiny VaR problems, and LP-format
//! MIP export for external solvers.
//!
//! Everything here deliberately avoids the solution formulas used by the
//! production operators: objectives are evaluated through the plain risk
//! measures and minimized by brute force or by a direct model handed to the
//! QP solver.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::prox::cvar_prox_point;
use crate::qp::{solve_qp, QpProblem, QpStatus};
use crate::risk::{self, ceil_alpha_n, BaselMeasure, RiskParams};
use crate::scenario::{LossVector, Partition, ScenarioPanel, WeightSet};

/// Operator selector for the grid oracle.
#[derive(Debug, Clone, Copy)]
pub enum ProxOperator {
    ProxVariance { sigma: f64 },
    ProxVar { sigma: f64, alpha: f64 },
    ProxCvar { sigma: f64, alpha: f64 },
    ProxBasel { sigma: f64, which: BaselMeasure },
    ProjectVarBall { alpha: f64, b0: f64 },
    ProjectCvarBall { alpha: f64, b0: f64 },
    ProjectVarianceBall { b0: f64 },
    ProjectBasel { which: BaselMeasure, c0: f64 },
}

impl ProxOperator {
    fn needs_partition(&self) -> bool {
        matches!(self, Self::ProxBasel { .. } | Self::ProjectBasel { .. })
    }
}

#[derive(Debug, Clone)]
pub struct GridOracleResult {
    pub point: DVector<f64>,
    pub objective: f64,
}

/// Objective of an operator at `y`; `None` when `y` violates a projection
/// constraint.
pub fn prox_objective(
    op: &ProxOperator,
    y: &DVector<f64>,
    anchor: &DVector<f64>,
    part: Option<&Partition>,
    params: &RiskParams,
) -> Result<Option<f64>> {
    let penalty = |scale: f64| scale * 0.5 * (y - anchor).norm_squared();
    let loss = |v: &DVector<f64>| -> Result<LossVector> {
        LossVector::new(v.clone(), part.expect("partition required").clone())
    };
    Ok(match *op {
        ProxOperator::ProxVariance { sigma } => {
            Some(risk::variance(y.as_slice())? + penalty(sigma))
        }
        ProxOperator::ProxVar { sigma, alpha } => {
            Some(risk::var_at(y.as_slice(), alpha)? + penalty(sigma))
        }
        ProxOperator::ProxCvar { sigma, alpha } => {
            Some(risk::cvar_at(y.as_slice(), alpha)? + penalty(sigma))
        }
        ProxOperator::ProxBasel { sigma, which } => {
            Some(risk::evaluate_basel(which, &loss(y)?, params)? + penalty(sigma))
        }
        ProxOperator::ProjectVarBall { alpha, b0 } => {
            (risk::var_at(y.as_slice(), alpha)? <= b0).then(|| penalty(2.0))
        }
        ProxOperator::ProjectCvarBall { alpha, b0 } => {
            (risk::cvar_at(y.as_slice(), alpha)? <= b0).then(|| penalty(2.0))
        }
        ProxOperator::ProjectVarianceBall { b0 } => {
            (risk::variance(y.as_slice())? <= b0).then(|| penalty(2.0))
        }
        ProxOperator::ProjectBasel { which, c0 } => {
            (risk::evaluate_basel(which, &loss(y)?, params)? <= c0).then(|| penalty(2.0))
        }
    })
}

/// Allocation-free objective evaluation for grid points (anchor length is
/// at most 6, so order statistics run over a stack buffer).
struct SmallEval<'a> {
    op: &'a ProxOperator,
    anchor: &'a [f64],
    part: Option<&'a Partition>,
    params: &'a RiskParams,
}

impl SmallEval<'_> {
    fn penalty(&self, y: &[f64], scale: f64) -> f64 {
        let mut acc = 0.0;
        for (a, b) in y.iter().zip(self.anchor) {
            acc += (a - b) * (a - b);
        }
        0.5 * scale * acc
    }

    fn sorted_buf(y: &[f64]) -> ([f64; 8], usize) {
        let mut buf = [0.0f64; 8];
        let n = y.len();
        buf[..n].copy_from_slice(y);
        let slice = &mut buf[..n];
        for i in 1..n {
            let mut j = i;
            while j > 0 && slice[j - 1] > slice[j] {
                slice.swap(j - 1, j);
                j -= 1;
            }
        }
        (buf, n)
    }

    fn var_of(y: &[f64], alpha: f64) -> f64 {
        let (buf, n) = Self::sorted_buf(y);
        buf[ceil_alpha_n(alpha, n) - 1]
    }

    fn cvar_of(y: &[f64], alpha: f64) -> f64 {
        let (buf, n) = Self::sorted_buf(y);
        let nf = n as f64;
        let an = alpha * nf;
        let an = if (an - an.round()).abs() <= 1e-9 * nf { an.round() } else { an };
        let p = ceil_alpha_n(alpha, n);
        let mut tail = 0.0;
        for &v in &buf[p..n] {
            tail += v;
        }
        ((p as f64 - an) * buf[p - 1] + tail) / (nf - an)
    }

    fn variance_of(y: &[f64]) -> f64 {
        let n = y.len() as f64;
        let mean = y.iter().sum::<f64>() / n;
        y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
    }

    fn basel_of(&self, y: &[f64], which: BaselMeasure) -> f64 {
        let part = self.part.expect("partition required");
        let (m1, m2, m) = (part.m1(), part.m2(), part.m());
        match which {
            BaselMeasure::Basel25 => {
                let mut vars = [0.0f64; 8];
                for s in 0..m {
                    vars[s] = Self::var_of(&y[part.range(s)], self.params.alpha);
                }
                let normal_avg = vars[..m1].iter().sum::<f64>() / m1 as f64;
                let stressed_avg = vars[m1..m].iter().sum::<f64>() / m2 as f64;
                vars[0].max(self.params.k * normal_avg)
                    + vars[m1].max(self.params.ell * stressed_avg)
            }
            BaselMeasure::Basel3 => {
                let mut cvars = [0.0f64; 8];
                for (j, s) in (m1..m).enumerate() {
                    cvars[j] = Self::cvar_of(&y[part.range(s)], self.params.alpha3);
                }
                let avg = cvars[..m2].iter().sum::<f64>() / m2 as f64;
                cvars[0].max(self.params.ell * avg)
            }
        }
    }

    /// Same value as [`prox_objective`], minus the allocations.
    fn eval(&self, y: &[f64]) -> Option<f64> {
        match *self.op {
            ProxOperator::ProxVariance { sigma } => {
                Some(Self::variance_of(y) + self.penalty(y, sigma))
            }
            ProxOperator::ProxVar { sigma, alpha } => {
                Some(Self::var_of(y, alpha) + self.penalty(y, sigma))
            }
            ProxOperator::ProxCvar { sigma, alpha } => {
                Some(Self::cvar_of(y, alpha) + self.penalty(y, sigma))
            }
            ProxOperator::ProxBasel { sigma, which } => {
                Some(self.basel_of(y, which) + self.penalty(y, sigma))
            }
            ProxOperator::ProjectVarBall { alpha, b0 } => {
                (Self::var_of(y, alpha) <= b0).then(|| self.penalty(y, 2.0))
            }
            ProxOperator::ProjectCvarBall { alpha, b0 } => {
                (Self::cvar_of(y, alpha) <= b0).then(|| self.penalty(y, 2.0))
            }
            ProxOperator::ProjectVarianceBall { b0 } => {
                (Self::variance_of(y) <= b0).then(|| self.penalty(y, 2.0))
            }
            ProxOperator::ProjectBasel { which, c0 } => {
                (self.basel_of(y, which) <= c0).then(|| self.penalty(y, 2.0))
            }
        }
    }
}

/// Best point of an iteratively refined uniform grid around the anchor.
///
/// The initial box has radius `max(1, ||v||_inf) + 2`; each pass lays a
/// 7-point-per-dimension grid, then re-centers on the incumbent with radius
/// two steps, shrinking resolution by 2/3 per pass until the step falls
/// under 1e-6. The checked operators have isotropic quadratic terms, so the
/// incumbent cell brackets the optimum at every pass.
pub fn prox_grid_oracle(
    op: &ProxOperator,
    anchor: &DVector<f64>,
    part: Option<&Partition>,
    params: &RiskParams,
) -> Result<GridOracleResult> {
    if op.needs_partition() && part.is_none() {
        return Err(Error::InvalidParameter("operator requires a partition".into()));
    }
    if let ProxOperator::ProxCvar { sigma, alpha } = *op {
        if anchor.len() > 6 {
            return cvar_threshold_grid(anchor, sigma, alpha);
        }
    }
    let n = anchor.len();
    if n == 0 {
        return Err(Error::EmptyInput("empty anchor".into()));
    }
    if n > 6 {
        return Err(Error::BudgetExceeded(format!(
            "full grid supports up to 6 dimensions, got {n}"
        )));
    }
    let eval = SmallEval { op, anchor: anchor.as_slice(), part, params };

    let mut center: Vec<f64> = anchor.iter().cloned().collect();
    let mut best: Option<(Vec<f64>, f64)> = None;
    if let Some(obj) = eval.eval(&center) {
        best = Some((center.clone(), obj));
    } else {
        // Projection with an infeasible anchor: walk the anchor down until
        // it enters the set so the first pass has a feasible incumbent.
        let mut shift = 1.0;
        for _ in 0..60 {
            let cand: Vec<f64> = center.iter().map(|v| v - shift).collect();
            if eval.eval(&cand).is_some() {
                center = cand;
                break;
            }
            shift *= 2.0;
        }
    }

    let mut radius = anchor.amax().max(1.0) + 2.0;
    let target = 1e-6;
    let points_per_dim = 7usize;
    let mut y = vec![0.0f64; n];
    loop {
        let step = 2.0 * radius / (points_per_dim - 1) as f64;
        let mut idx = [0usize; 6];
        'grid: loop {
            for i in 0..n {
                y[i] = center[i] - radius + idx[i] as f64 * step;
            }
            if let Some(obj) = eval.eval(&y) {
                if best.as_ref().is_none_or(|(_, b)| obj < *b) {
                    best = Some((y.clone(), obj));
                }
            }
            for i in 0..n {
                idx[i] += 1;
                if idx[i] < points_per_dim {
                    continue 'grid;
                }
                idx[i] = 0;
            }
            break;
        }
        if let Some((p, _)) = &best {
            center.copy_from_slice(p);
        }
        if step <= target {
            break;
        }
        radius = 2.0 * step;
    }
    let (point, _) = best
        .ok_or_else(|| Error::Infeasible("grid oracle found no feasible point".into()))?;
    let point = DVector::from_vec(point);
    let objective = prox_objective(op, &point, anchor, part, params)?
        .expect("incumbent must be feasible");
    Ok(GridOracleResult { point, objective })
}

/// One-dimensional brute force for the CVaR prox: scan the threshold range
/// `[min w - c, max w]` on a refined grid, score the induced point with the
/// plain CVaR measure, and keep the best. Final resolution is below 1e-6.
fn cvar_threshold_grid(w: &DVector<f64>, sigma: f64, alpha: f64) -> Result<GridOracleResult> {
    let n = w.len();
    if n == 0 {
        return Err(Error::EmptyInput("empty anchor".into()));
    }
    if n > 50 {
        return Err(Error::BudgetExceeded(format!(
            "threshold grid supports up to 50 entries, got {n}"
        )));
    }
    let c = 1.0 / (sigma * (1.0 - alpha) * n as f64);
    let lo = w.min() - c;
    let hi = w.max();
    let score = |t: f64| -> Result<(f64, DVector<f64>)> {
        let y = cvar_prox_point(w, t, c);
        let obj = risk::cvar_at(y.as_slice(), alpha)? + sigma * 0.5 * (&y - w).norm_squared();
        Ok((obj, y))
    };
    let mut center = 0.5 * (lo + hi);
    let mut radius = 0.5 * (hi - lo).max(1e-12);
    let mut best_t = center;
    let mut best = f64::INFINITY;
    let points = 1000usize;
    for _ in 0..4 {
        let step = 2.0 * radius / points as f64;
        for i in 0..=points {
            let t = (center - radius + i as f64 * step).clamp(lo, hi);
            let (obj, _) = score(t)?;
            if obj < best {
                best = obj;
                best_t = t;
            }
        }
        center = best_t;
        radius = 2.0 * step;
    }
    let (objective, point) = score(best_t)?;
    Ok(GridOracleResult { point, objective })
}

/// Convex risk selector for the direct reference models.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvexRho {
    Variance,
    Cvar,
}

/// Minimum attainable Basel-III charge over the target set, via the LP that
/// pushes the epigraph budget down as far as the stressed losses allow.
/// Useful for placing an attainable capital cap.
pub fn basel3_floor(panel: &ScenarioPanel, params: &RiskParams, set: &WeightSet) -> Result<f64> {
    params.validate()?;
    if set.is_infeasible() {
        return Err(Error::Infeasible(
            "target return exceeds the largest expected asset return".into(),
        ));
    }
    let d = panel.d();
    let part = panel.partition();
    let (m1, m2) = (part.m1(), part.m2());
    if m2 == 0 {
        return Err(Error::EmptyInput("no stressed blocks".into()));
    }
    let alpha3 = params.alpha3;
    let stressed_sizes: Vec<usize> = (m1..part.m()).map(|s| part.sizes()[s]).collect();
    let stressed_total: usize = stressed_sizes.iter().sum();
    // Variables: u (d), budget (1), t (m2), z (stressed_total).
    let nv = d + 1 + m2 + stressed_total;
    let budget = d;
    let tcap = d + 1;
    let zcap = d + 1 + m2;
    let mut x_off = vec![0usize; m2];
    for j in 1..m2 {
        x_off[j] = x_off[j - 1] + stressed_sizes[j - 1];
    }
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut rhs: Vec<f64> = Vec::new();
    let mut first = vec![(tcap, 1.0), (budget, -1.0)];
    let kap0 = 1.0 / ((1.0 - alpha3) * stressed_sizes[0] as f64);
    for i in 0..stressed_sizes[0] {
        first.push((zcap + i, kap0));
    }
    rows.push(first);
    rhs.push(0.0);
    let mut avg = vec![(budget, -1.0)];
    for (j, &nj) in stressed_sizes.iter().enumerate() {
        avg.push((tcap + j, params.ell / m2 as f64));
        let kap = 1.0 / ((1.0 - alpha3) * nj as f64);
        for i in 0..nj {
            avg.push((zcap + x_off[j] + i, params.ell / m2 as f64 * kap));
        }
    }
    rows.push(avg);
    rhs.push(0.0);
    for (j, s) in (m1..part.m()).enumerate() {
        let block = panel.block(s);
        for i in 0..block.nrows() {
            let mut row: Vec<(usize, f64)> = (0..d).map(|col| (col, -block[(i, col)])).collect();
            row.push((tcap + j, -1.0));
            row.push((zcap + x_off[j] + i, -1.0));
            rows.push(row);
            rhs.push(0.0);
        }
    }
    if let Some(r0) = set.r0 {
        rows.push((0..d).map(|j| (j, -set.mu[j])).collect());
        rhs.push(-r0);
    }
    let mut a_in = DMatrix::zeros(rows.len(), nv);
    let mut b_in = DVector::zeros(rows.len());
    for (r, row) in rows.iter().enumerate() {
        for &(col, v) in row {
            a_in[(r, col)] = v;
        }
        b_in[r] = rhs[r];
    }
    let mut a_eq = DMatrix::zeros(1, nv);
    for j in 0..d {
        a_eq[(0, j)] = 1.0;
    }
    let mut lower = DVector::from_element(nv, f64::NEG_INFINITY);
    for j in 0..d {
        lower[j] = 0.0;
    }
    for i in 0..stressed_total {
        lower[zcap + i] = 0.0;
    }
    let mut c = DVector::zeros(nv);
    c[budget] = 1.0;
    let problem = QpProblem::new(DMatrix::zeros(nv, nv), c)
        .with_eq(a_eq, DVector::from_element(1, 1.0))
        .with_ineq(a_in, b_in)
        .with_bounds(lower, DVector::from_element(nv, f64::INFINITY));
    let sol = solve_qp(&problem)?;
    if sol.status != QpStatus::Optimal {
        return Err(Error::Solver("basel3 floor LP did not converge".into()));
    }
    Ok(sol.z[budget])
}

#[derive(Debug, Clone)]
pub struct ConvexReference {
    pub weights: DVector<f64>,
    /// Risk of the optimal weights, recomputed through the risk measures.
    pub objective: f64,
    /// Sum of the multipliers of the two capital rows (zero when no cap).
    pub capital_dual: f64,
}

/// Direct QP (variance) or LP (CVaR) for the mean-rho problem with an
/// optional Basel-III capital cap, solved to global optimality.
pub fn convex_reference(
    panel: &ScenarioPanel,
    y_mat: &DMatrix<f64>,
    rho: ConvexRho,
    params: &RiskParams,
    c0: Option<f64>,
    set: &WeightSet,
) -> Result<ConvexReference> {
    params.validate()?;
    if set.is_infeasible() {
        return Err(Error::Infeasible(
            "target return exceeds the largest expected asset return".into(),
        ));
    }
    let d = panel.d();
    if y_mat.ncols() != d || set.mu.len() != d {
        return Err(Error::DimensionMismatch("panel, secondary matrix, and mu".into()));
    }
    let np = y_mat.nrows();
    let part = panel.partition();
    let (m1, m2) = (part.m1(), part.m2());
    if c0.is_some() && m2 == 0 {
        return Err(Error::EmptyInput("capital cap requires stressed blocks".into()));
    }

    // Variable layout: u, then the CVaR epigraph for the objective, then the
    // Basel-III epigraph over the stressed panel blocks.
    let rho_vars = match rho {
        ConvexRho::Variance => 0,
        ConvexRho::Cvar => 1 + np,
    };
    let stressed_sizes: Vec<usize> = (m1..part.m()).map(|s| part.sizes()[s]).collect();
    let stressed_total: usize = stressed_sizes.iter().sum();
    let cap_vars = if c0.is_some() { m2 + stressed_total } else { 0 };
    let nv = d + rho_vars + cap_vars;
    let t0 = d;
    let z0 = d + 1;
    let tcap = d + rho_vars;
    let zcap = tcap + m2;

    let mut q = DMatrix::zeros(nv, nv);
    let mut c = DVector::zeros(nv);
    match rho {
        ConvexRho::Variance => {
            let ones = DVector::from_element(np, 1.0);
            let col_sums = y_mat.transpose() * ones;
            let gram = y_mat.transpose() * y_mat;
            let npf = np as f64;
            let quad = gram * (2.0 / npf) - (&col_sums * col_sums.transpose()) * (2.0 / (npf * npf));
            q.view_mut((0, 0), (d, d)).copy_from(&quad);
        }
        ConvexRho::Cvar => {
            let kappa = 1.0 / ((1.0 - params.alpha) * np as f64);
            c[t0] = 1.0;
            for i in 0..np {
                c[z0 + i] = kappa;
            }
        }
    }

    let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut rhs: Vec<f64> = Vec::new();
    if rho == ConvexRho::Cvar {
        // z0_i >= -Y_i u - t0
        for i in 0..np {
            let mut row: Vec<(usize, f64)> = (0..d).map(|j| (j, -y_mat[(i, j)])).collect();
            row.push((t0, -1.0));
            row.push((z0 + i, -1.0));
            rows.push(row);
            rhs.push(0.0);
        }
    }
    if let Some(cap) = c0 {
        let alpha3 = params.alpha3;
        let mut x_off = vec![0usize; m2];
        for j in 1..m2 {
            x_off[j] = x_off[j - 1] + stressed_sizes[j - 1];
        }
        let mut first = vec![(tcap, 1.0)];
        let kap0 = 1.0 / ((1.0 - alpha3) * stressed_sizes[0] as f64);
        for i in 0..stressed_sizes[0] {
            first.push((zcap + i, kap0));
        }
        rows.push(first);
        rhs.push(cap);
        let mut avg = Vec::new();
        for (j, &nj) in stressed_sizes.iter().enumerate() {
            avg.push((tcap + j, params.ell / m2 as f64));
            let kap = 1.0 / ((1.0 - alpha3) * nj as f64);
            for i in 0..nj {
                avg.push((zcap + x_off[j] + i, params.ell / m2 as f64 * kap));
            }
        }
        rows.push(avg);
        rhs.push(cap);
        for (j, s) in (m1..part.m()).enumerate() {
            let block = panel.block(s);
            for i in 0..block.nrows() {
                let mut row: Vec<(usize, f64)> = (0..d).map(|col| (col, -block[(i, col)])).collect();
                row.push((tcap + j, -1.0));
                row.push((zcap + x_off[j] + i, -1.0));
                rows.push(row);
                rhs.push(0.0);
            }
        }
    }
    let mut cap_row_ids = Vec::new();
    if c0.is_some() {
        let base = if rho == ConvexRho::Cvar { np } else { 0 };
        cap_row_ids.push(base);
        cap_row_ids.push(base + 1);
    }
    if let Some(r0) = set.r0 {
        rows.push((0..d).map(|j| (j, -set.mu[j])).collect());
        rhs.push(-r0);
    }

    let mut a_in = DMatrix::zeros(rows.len(), nv);
    let mut b_in = DVector::zeros(rows.len());
    for (r, row) in rows.iter().enumerate() {
        for &(col, v) in row {
            a_in[(r, col)] = v;
        }
        b_in[r] = rhs[r];
    }
    let mut a_eq = DMatrix::zeros(1, nv);
    for j in 0..d {
        a_eq[(0, j)] = 1.0;
    }
    let mut lower = DVector::from_element(nv, f64::NEG_INFINITY);
    for j in 0..d {
        lower[j] = 0.0;
    }
    if rho == ConvexRho::Cvar {
        for i in 0..np {
            lower[z0 + i] = 0.0;
        }
    }
    if c0.is_some() {
        for i in 0..stressed_total {
            lower[zcap + i] = 0.0;
        }
    }

    let problem = QpProblem::new(q, c)
        .with_eq(a_eq, DVector::from_element(1, 1.0))
        .with_ineq(a_in, b_in)
        .with_bounds(lower, DVector::from_element(nv, f64::INFINITY));
    let sol = solve_qp(&problem)?;
    match sol.status {
        QpStatus::Optimal => {}
        QpStatus::Infeasible => {
            return Err(Error::Infeasible(format!(
                "reference model infeasible (violation {:.3e})",
                sol.violation
            )))
        }
        QpStatus::MaxIter => return Err(Error::Solver("reference model did not converge".into())),
    }
    let weights = sol.z.rows(0, d).into_owned();
    let losses = -(y_mat * &weights);
    let objective = match rho {
        ConvexRho::Variance => risk::variance(losses.as_slice())?,
        ConvexRho::Cvar => risk::cvar_at(losses.as_slice(), params.alpha)?,
    };
    let capital_dual = cap_row_ids.iter().map(|&r| sol.in_duals[r]).sum();
    Ok(ConvexReference { weights, objective, capital_dual })
}

#[derive(Debug, Clone)]
pub struct EnumerationResult {
    pub weights: DVector<f64>,
    /// Exact sample VaR of the best enumerated weights.
    pub objective: f64,
    pub lp_count: usize,
}

fn binomial_capped(n: usize, k: usize, cap: usize) -> usize {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
        if acc > cap as u128 {
            return cap + 1;
        }
    }
    acc as usize
}

/// Iterate all size-k index subsets of 0..n in lexicographic order.
fn for_each_subset(n: usize, k: usize, mut f: impl FnMut(&[usize]) -> Result<()>) -> Result<()> {
    if k == 0 {
        return f(&[]);
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        f(&idx)?;
        let mut i = k;
        loop {
            if i == 0 {
                return Ok(());
            }
            i -= 1;
            if idx[i] != i + n - k {
                break;
            }
            if i == 0 {
                return Ok(());
            }
        }
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Exhaustive global optimum of the tiny mean-VaR problem: for every
/// admissible excluded-observation set `S` (`|S| = n' - p'`), minimize the
/// worst retained loss over the target set, then take the best exact VaR
/// across selections. With a Basel-2.5 cap the per-block exclusions are
/// enumerated the same way and the budget rows join each LP.
pub fn mean_var_enumerate(
    y_mat: &DMatrix<f64>,
    alpha: f64,
    set: &WeightSet,
    basel25: Option<(&ScenarioPanel, &RiskParams, f64)>,
    budget: usize,
) -> Result<EnumerationResult> {
    if set.is_infeasible() {
        return Err(Error::Infeasible(
            "target return exceeds the largest expected asset return".into(),
        ));
    }
    let d = y_mat.ncols();
    let np = y_mat.nrows();
    let p = ceil_alpha_n(alpha, np);
    let exclude = np - p;
    let mut combos = binomial_capped(np, exclude, budget);
    if let Some((panel, params, _)) = basel25 {
        for &ns in panel.partition().sizes().iter() {
            let ps = ceil_alpha_n(params.alpha, ns);
            let block_combos = binomial_capped(ns, ns - ps, budget);
            combos = combos.saturating_mul(block_combos);
            if combos > budget {
                break;
            }
        }
    }
    if combos > budget {
        return Err(Error::BudgetExceeded(format!(
            "enumeration needs more than {budget} LP solves"
        )));
    }

    let mut best: Option<(DVector<f64>, f64)> = None;
    let mut lp_count = 0usize;

    let mut solve_selection = |excluded: &[usize], block_excluded: &[Vec<usize>]| -> Result<()> {
        // Variables: u, beta0 [, beta_s (m), gamma1, gamma2].
        let (m, m1, m2) = match basel25 {
            Some((panel, _, _)) => (panel.partition().m(), panel.m1(), panel.m2()),
            None => (0, 0, 0),
        };
        let extra = if basel25.is_some() { m + 2 } else { 0 };
        let nv = d + 1 + extra;
        let beta0 = d;
        let beta_s = d + 1;
        let g1 = d + 1 + m;
        let g2 = g1 + 1;
        let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();
        let mut rhs: Vec<f64> = Vec::new();
        for i in 0..np {
            if excluded.contains(&i) {
                continue;
            }
            let mut row: Vec<(usize, f64)> = (0..d).map(|j| (j, -y_mat[(i, j)])).collect();
            row.push((beta0, -1.0));
            rows.push(row);
            rhs.push(0.0);
        }
        if let Some((panel, params, c0)) = basel25 {
            for s in 0..m {
                let block = panel.block(s);
                for i in 0..block.nrows() {
                    if block_excluded[s].contains(&i) {
                        continue;
                    }
                    let mut row: Vec<(usize, f64)> =
                        (0..d).map(|j| (j, -block[(i, j)])).collect();
                    row.push((beta_s + s, -1.0));
                    rows.push(row);
                    rhs.push(0.0);
                }
            }
            rows.push(vec![(beta_s, 1.0), (g1, -1.0)]);
            rhs.push(0.0);
            let mut avg1: Vec<(usize, f64)> =
                (0..m1).map(|s| (beta_s + s, params.k / m1 as f64)).collect();
            avg1.push((g1, -1.0));
            rows.push(avg1);
            rhs.push(0.0);
            rows.push(vec![(beta_s + m1, 1.0), (g2, -1.0)]);
            rhs.push(0.0);
            let mut avg2: Vec<(usize, f64)> =
                (m1..m).map(|s| (beta_s + s, params.ell / m2 as f64)).collect();
            avg2.push((g2, -1.0));
            rows.push(avg2);
            rhs.push(0.0);
            rows.push(vec![(g1, 1.0), (g2, 1.0)]);
            rhs.push(c0);
        }
        if let Some(r0) = set.r0 {
            rows.push((0..d).map(|j| (j, -set.mu[j])).collect());
            rhs.push(-r0);
        }
        let mut a_in = DMatrix::zeros(rows.len(), nv);
        let mut b_in = DVector::zeros(rows.len());
        for (r, row) in rows.iter().enumerate() {
            for &(col, v) in row {
                a_in[(r, col)] = v;
            }
            b_in[r] = rhs[r];
        }
        let mut a_eq = DMatrix::zeros(1, nv);
        for j in 0..d {
            a_eq[(0, j)] = 1.0;
        }
        let mut c = DVector::zeros(nv);
        c[beta0] = 1.0;
        let mut lower = DVector::from_element(nv, f64::NEG_INFINITY);
        for j in 0..d {
            lower[j] = 0.0;
        }
        let problem = QpProblem::new(DMatrix::zeros(nv, nv), c)
            .with_eq(a_eq, DVector::from_element(1, 1.0))
            .with_ineq(a_in, b_in)
            .with_bounds(lower, DVector::from_element(nv, f64::INFINITY));
        let sol = solve_qp(&problem)?;
        lp_count += 1;
        if sol.status != QpStatus::Optimal {
            return Ok(()); // selection infeasible under the cap
        }
        let u = sol.z.rows(0, d).into_owned();
        let losses = -(y_mat * &u);
        let value = risk::var_at(losses.as_slice(), alpha)?;
        let feasible = match basel25 {
            Some((panel, params, c0)) => {
                let x = -(panel.stacked() * &u);
                risk::basel25(&LossVector::new(x, panel.partition())?, params)? <= c0 + 1e-7
            }
            None => true,
        };
        if feasible && best.as_ref().is_none_or(|(_, b)| value < *b) {
            best = Some((u, value));
        }
        Ok(())
    };

    // Enumerate the objective exclusions crossed with per-block exclusions.
    let mut objective_sets: Vec<Vec<usize>> = Vec::new();
    for_each_subset(np, exclude, |s| {
        objective_sets.push(s.to_vec());
        Ok(())
    })?;
    let block_sets: Vec<Vec<Vec<usize>>> = match basel25 {
        Some((panel, params, _)) => {
            let mut per_block = Vec::new();
            for &ns in panel.partition().sizes().iter() {
                let ps = ceil_alpha_n(params.alpha, ns);
                let mut sets = Vec::new();
                for_each_subset(ns, ns - ps, |s| {
                    sets.push(s.to_vec());
                    Ok(())
                })?;
                per_block.push(sets);
            }
            let mut product: Vec<Vec<Vec<usize>>> = vec![Vec::new()];
            for sets in per_block {
                let mut next = Vec::new();
                for partial in &product {
                    for s in &sets {
                        let mut ext = partial.clone();
                        ext.push(s.clone());
                        next.push(ext);
                    }
                }
                product = next;
            }
            product
        }
        None => vec![Vec::new()],
    };
    for obj_set in &objective_sets {
        for blocks in &block_sets {
            solve_selection(obj_set, blocks)?;
        }
    }

    let (weights, objective) =
        best.ok_or_else(|| Error::Infeasible("no enumerated selection was feasible".into()))?;
    Ok(EnumerationResult { weights, objective, lp_count })
}

/// MIP-shaped model variants of the allocation problems.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MipVariant {
    MeanVarBasel25,
    MeanVarBasel3,
    MeanCvarBasel25,
    MeanVarianceBasel25,
}

impl MipVariant {
    fn label(&self) -> &'static str {
        match self {
            Self::MeanVarBasel25 => "mean-var-basel25",
            Self::MeanVarBasel3 => "mean-var-basel3",
            Self::MeanCvarBasel25 => "mean-cvar-basel25",
            Self::MeanVarianceBasel25 => "mean-variance-basel25",
        }
    }
}

/// How the big-M constant is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EtaMode {
    /// Maximize each distinct observation row's loss over the target set
    /// (one LP per distinct row).
    ExactLp,
    /// The cheap dominating bound: the largest absolute entry across the
    /// observation matrices.
    EntryBound,
}

/// Shape summary of an exported model. `constraints` counts the rows of the
/// constraint section; variable bounds and integrality declarations are not
/// counted as rows.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct MipModel {
    pub binaries: usize,
    pub continuous: usize,
    pub constraints: usize,
    pub eta: f64,
}

fn fmt_coef(v: f64) -> String {
    if v == v.floor() && v.abs() < 1e15 {
        format!("{v}")
    } else {
        format!("{v:.16e}")
    }
}

struct LpWriter {
    rows: Vec<String>,
    row_count: usize,
}

impl LpWriter {
    fn new() -> Self {
        Self { rows: Vec::new(), row_count: 0 }
    }

    fn row(&mut self, terms: &[(String, f64)], op: &str, rhs: f64) {
        self.row_count += 1;
        let mut line = format!(" c{}:", self.row_count);
        for (name, v) in terms {
            if *v >= 0.0 {
                line.push_str(&format!(" + {} {}", fmt_coef(*v), name));
            } else {
                line.push_str(&format!(" - {} {}", fmt_coef(-*v), name));
            }
        }
        line.push_str(&format!(" {op} {}", fmt_coef(rhs)));
        self.rows.push(line);
    }
}

/// Write the selected MIP in LP text format and return its shape. The
/// big-M `eta` bounds the worst retained loss over the target set; the
/// binaries `z` deactivate excluded observations.
pub fn export_mip(
    panel: &ScenarioPanel,
    y_mat: &DMatrix<f64>,
    variant: MipVariant,
    params: &RiskParams,
    c0: f64,
    set: &WeightSet,
    eta_mode: EtaMode,
    path: impl AsRef<Path>,
) -> Result<MipModel> {
    params.validate()?;
    let d = panel.d();
    if y_mat.ncols() != d {
        return Err(Error::DimensionMismatch("secondary matrix column count".into()));
    }
    let part = panel.partition();
    let (m1, m2, m) = (part.m1(), part.m2(), part.m());
    if m1 == 0 || m2 == 0 {
        return Err(Error::EmptyInput("export requires normal and stressed blocks".into()));
    }
    let np = y_mat.nrows();
    let n_total = part.n();
    let eta = compute_eta(panel, y_mat, set, eta_mode)?;

    let u_name = |j: usize| format!("u_{}", j + 1);
    let mut writer = LpWriter::new();
    let mut continuous: Vec<String> = (0..d).map(u_name).collect();
    let mut free_vars: Vec<String> = Vec::new();
    let mut binaries: Vec<String> = Vec::new();

    let alpha = params.alpha;
    let p_prime = ceil_alpha_n(alpha, np);

    // Objective-side VaR binaries over the deduplicated rows.
    let add_objective_var_rows = |writer: &mut LpWriter,
                                      binaries: &mut Vec<String>,
                                      free_vars: &mut Vec<String>,
                                      continuous: &mut Vec<String>| {
        continuous.push("beta_0".into());
        free_vars.push("beta_0".into());
        for i in 0..np {
            binaries.push(format!("zp_{}", i + 1));
        }
        for i in 0..np {
            let mut terms: Vec<(String, f64)> =
                (0..d).map(|j| (u_name(j), -y_mat[(i, j)])).collect();
            terms.push(("beta_0".into(), -1.0));
            terms.push((format!("zp_{}", i + 1), -eta));
            writer.row(&terms, "<=", 0.0);
        }
        let card: Vec<(String, f64)> =
            (0..np).map(|i| (format!("zp_{}", i + 1), 1.0)).collect();
        writer.row(&card, "<=", (np - p_prime) as f64);
    };

    // Basel-2.5 block rows with per-block binaries, budget variables, and
    // the capital cap.
    let add_basel25_rows = |writer: &mut LpWriter,
                                binaries: &mut Vec<String>,
                                free_vars: &mut Vec<String>,
                                continuous: &mut Vec<String>| {
        for s in 0..m {
            continuous.push(format!("beta_{}", s + 1));
            free_vars.push(format!("beta_{}", s + 1));
        }
        continuous.push("gamma_1".into());
        continuous.push("gamma_2".into());
        free_vars.push("gamma_1".into());
        free_vars.push("gamma_2".into());
        for s in 0..m {
            let block = panel.block(s);
            let ns = block.nrows();
            let ps = ceil_alpha_n(alpha, ns);
            for i in 0..ns {
                binaries.push(format!("z_{}_{}", s + 1, i + 1));
            }
            for i in 0..ns {
                let mut terms: Vec<(String, f64)> =
                    (0..d).map(|j| (u_name(j), -block[(i, j)])).collect();
                terms.push((format!("beta_{}", s + 1), -1.0));
                terms.push((format!("z_{}_{}", s + 1, i + 1), -eta));
                writer.row(&terms, "<=", 0.0);
            }
            let card: Vec<(String, f64)> =
                (0..ns).map(|i| (format!("z_{}_{}", s + 1, i + 1), 1.0)).collect();
            writer.row(&card, "<=", (ns - ps) as f64);
        }
        writer.row(&[("beta_1".into(), 1.0), ("gamma_1".into(), -1.0)], "<=", 0.0);
        let mut avg1: Vec<(String, f64)> =
            (0..m1).map(|s| (format!("beta_{}", s + 1), params.k / m1 as f64)).collect();
        avg1.push(("gamma_1".into(), -1.0));
        writer.row(&avg1, "<=", 0.0);
        writer.row(
            &[(format!("beta_{}", m1 + 1), 1.0), ("gamma_2".into(), -1.0)],
            "<=",
            0.0,
        );
        let mut avg2: Vec<(String, f64)> =
            (m1..m).map(|s| (format!("beta_{}", s + 1), params.ell / m2 as f64)).collect();
        avg2.push(("gamma_2".into(), -1.0));
        writer.row(&avg2, "<=", 0.0);
        writer.row(&[("gamma_1".into(), 1.0), ("gamma_2".into(), 1.0)], "<=", c0);
    };

    let mut objective_line = String::from(" obj: beta_0");
    match variant {
        MipVariant::MeanVarBasel25 => {
            add_objective_var_rows(&mut writer, &mut binaries, &mut free_vars, &mut continuous);
            add_basel25_rows(&mut writer, &mut binaries, &mut free_vars, &mut continuous);
        }
        MipVariant::MeanVarBasel3 => {
            add_objective_var_rows(&mut writer, &mut binaries, &mut free_vars, &mut continuous);
            // Basel-III rows: CVaR epigraph over stressed blocks.
            let alpha3 = params.alpha3;
            for (j, s) in (m1..m).enumerate() {
                continuous.push(format!("t_{}", j + 1));
                free_vars.push(format!("t_{}", j + 1));
                let ns = part.sizes()[s];
                for i in 0..ns {
                    continuous.push(format!("r_{}_{}", j + 1, i + 1));
                }
            }
            let n_first = part.sizes()[m1];
            let kap0 = 1.0 / ((1.0 - alpha3) * n_first as f64);
            let mut first: Vec<(String, f64)> = vec![("t_1".into(), 1.0)];
            for i in 0..n_first {
                first.push((format!("r_1_{}", i + 1), kap0));
            }
            writer.row(&first, "<=", c0);
            let mut avg: Vec<(String, f64)> = Vec::new();
            for (j, s) in (m1..m).enumerate() {
                let ns = part.sizes()[s];
                avg.push((format!("t_{}", j + 1), params.ell / m2 as f64));
                let kap = 1.0 / ((1.0 - alpha3) * ns as f64);
                for i in 0..ns {
                    avg.push((format!("r_{}_{}", j + 1, i + 1), params.ell / m2 as f64 * kap));
                }
            }
            writer.row(&avg, "<=", c0);
            for (j, s) in (m1..m).enumerate() {
                let block = panel.block(s);
                for i in 0..block.nrows() {
                    let mut terms: Vec<(String, f64)> =
                        (0..d).map(|col| (u_name(col), -block[(i, col)])).collect();
                    terms.push((format!("t_{}", j + 1), -1.0));
                    terms.push((format!("r_{}_{}", j + 1, i + 1), -1.0));
                    writer.row(&terms, "<=", 0.0);
                }
            }
        }
        MipVariant::MeanCvarBasel25 => {
            let kappa = 1.0 / ((1.0 - alpha) * np as f64);
            continuous.push("t_0".into());
            free_vars.push("t_0".into());
            for i in 0..np {
                continuous.push(format!("r0_{}", i + 1));
            }
            objective_line = String::from(" obj: t_0");
            for i in 0..np {
                objective_line.push_str(&format!(" + {} r0_{}", fmt_coef(kappa), i + 1));
            }
            for i in 0..np {
                let mut terms: Vec<(String, f64)> =
                    (0..d).map(|j| (u_name(j), -y_mat[(i, j)])).collect();
                terms.push(("t_0".into(), -1.0));
                terms.push((format!("r0_{}", i + 1), -1.0));
                writer.row(&terms, "<=", 0.0);
            }
            add_basel25_rows(&mut writer, &mut binaries, &mut free_vars, &mut continuous);
        }
        MipVariant::MeanVarianceBasel25 => {
            // Linking rows expose the secondary losses, their mean, and the
            // deviations carrying the quadratic objective.
            for i in 0..np {
                continuous.push(format!("y_{}", i + 1));
                free_vars.push(format!("y_{}", i + 1));
            }
            continuous.push("ymean".into());
            free_vars.push("ymean".into());
            for i in 0..np {
                continuous.push(format!("dev_{}", i + 1));
                free_vars.push(format!("dev_{}", i + 1));
            }
            objective_line = String::from(" obj: [");
            let coef = 2.0 / np as f64;
            for i in 0..np {
                if i > 0 {
                    objective_line.push_str(" +");
                }
                objective_line.push_str(&format!(" {} dev_{} ^ 2", fmt_coef(coef), i + 1));
            }
            objective_line.push_str(" ] / 2");
            for i in 0..np {
                let mut terms: Vec<(String, f64)> =
                    (0..d).map(|j| (u_name(j), y_mat[(i, j)])).collect();
                terms.push((format!("y_{}", i + 1), 1.0));
                writer.row(&terms, "=", 0.0);
            }
            let mut mean_row: Vec<(String, f64)> = vec![("ymean".into(), np as f64)];
            for i in 0..np {
                mean_row.push((format!("y_{}", i + 1), -1.0));
            }
            writer.row(&mean_row, "=", 0.0);
            for i in 0..np {
                writer.row(
                    &[
                        (format!("dev_{}", i + 1), 1.0),
                        (format!("y_{}", i + 1), -1.0),
                        ("ymean".into(), 1.0),
                    ],
                    "=",
                    0.0,
                );
            }
            add_basel25_rows(&mut writer, &mut binaries, &mut free_vars, &mut continuous);
        }
    }

    // Target set rows.
    let simplex: Vec<(String, f64)> = (0..d).map(|j| (u_name(j), 1.0)).collect();
    writer.row(&simplex, "=", 1.0);
    if let Some(r0) = set.r0 {
        let ret: Vec<(String, f64)> = (0..d).map(|j| (u_name(j), set.mu[j])).collect();
        writer.row(&ret, ">=", r0);
    }

    let mut out = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    writeln!(out, "\\ {} (n = {}, n' = {}, d = {})", variant.label(), n_total, np, d)?;
    writeln!(out, "Minimize")?;
    writeln!(out, "{objective_line}")?;
    writeln!(out, "Subject To")?;
    for row in &writer.rows {
        writeln!(out, "{row}")?;
    }
    writeln!(out, "Bounds")?;
    for name in &free_vars {
        writeln!(out, " {name} free")?;
    }
    writeln!(out, "Binaries")?;
    for chunk in binaries.chunks(16) {
        writeln!(out, " {}", chunk.join(" "))?;
    }
    writeln!(out, "End")?;
    out.flush()?;

    Ok(MipModel {
        binaries: binaries.len(),
        continuous: continuous.len(),
        constraints: writer.row_count,
        eta,
    })
}

/// The big-M constant: either the exact per-row maxima over the target set
/// or the dominating entry bound. Floored at a tiny positive value so the
/// deactivation rows stay meaningful.
fn compute_eta(
    panel: &ScenarioPanel,
    y_mat: &DMatrix<f64>,
    set: &WeightSet,
    mode: EtaMode,
) -> Result<f64> {
    let d = panel.d();
    let eta = match mode {
        EtaMode::EntryBound => {
            let a = y_mat.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
            panel
                .blocks()
                .iter()
                .flat_map(|b| b.iter())
                .fold(a, |acc, v| acc.max(v.abs()))
        }
        EtaMode::ExactLp => {
            let mut seen = std::collections::HashSet::new();
            let mut rows: Vec<Vec<f64>> = Vec::new();
            let mut push_row = |row: Vec<f64>| {
                let key: Vec<u64> = row.iter().map(|v| v.to_bits()).collect();
                if seen.insert(key) {
                    rows.push(row);
                }
            };
            for i in 0..y_mat.nrows() {
                push_row((0..d).map(|j| y_mat[(i, j)]).collect());
            }
            for b in panel.blocks() {
                for i in 0..b.nrows() {
                    push_row((0..d).map(|j| b[(i, j)]).collect());
                }
            }
            let mut best = f64::NEG_INFINITY;
            for row in &rows {
                // max -row'u over the target set = -min row'u. The LP value
                // is only accurate to solver tolerance, so the final bound
                // is inflated past it below.
                let c = DVector::from_vec(row.clone());
                let mut a_eq = DMatrix::zeros(1, d);
                for j in 0..d {
                    a_eq[(0, j)] = 1.0;
                }
                let (a_in, b_in) = match set.r0 {
                    Some(r0) => {
                        let mut a = DMatrix::zeros(1, d);
                        for j in 0..d {
                            a[(0, j)] = -set.mu[j];
                        }
                        (a, DVector::from_element(1, -r0))
                    }
                    None => (DMatrix::zeros(0, d), DVector::zeros(0)),
                };
                let lp = QpProblem::new(DMatrix::zeros(d, d), c)
                    .with_eq(a_eq, DVector::from_element(1, 1.0))
                    .with_ineq(a_in, b_in)
                    .with_bounds(DVector::zeros(d), DVector::from_element(d, f64::INFINITY));
                let sol = solve_qp(&lp)?;
                if sol.status != QpStatus::Optimal {
                    return Err(Error::Infeasible("eta LP infeasible".into()));
                }
                best = best.max(-sol.obj);
            }
            best * (1.0 + 1e-7) + 1e-9
        }
    };
    Ok(eta.max(1e-12))
}

//! Subproblem solvers for the alternating-direction iterations: proximal
//! operators of the risk measures and Euclidean projections onto their
//! level sets.
//!
//! The variance and VaR operators have closed forms; the CVaR operator
//! reduces to a one-dimensional convex minimization; the Basel operators
//! reduce to small structured QPs over the sorted tail entries of each
//! scenario block.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::qp::{solve_qp, QpProblem, QpStatus};
use crate::risk::{self, ceil_alpha_n, sorted_order, BaselMeasure, RiskParams};
use crate::scenario::{LossVector, Partition};

/// `argmin_y variance(y) + (sigma/2) ||y - w||^2` in closed form:
/// `y = (sigma + 2/n)^-1 (sigma w + 2 (1'w / n^2) 1)`.
pub fn prox_variance(w: &DVector<f64>, sigma: f64) -> DVector<f64> {
    assert!(sigma > 0.0, "penalty weight must be positive");
    let n = w.len() as f64;
    let total = w.sum();
    let denom = sigma + 2.0 / n;
    w.map(|wi| (sigma * wi + 2.0 * total / (n * n)) / denom)
}

/// `argmin_y y_(p) + (sigma/2) ||y - w||^2`: the tail entries up to the
/// order statistic collapse onto a common value `gamma_{i*}` found by a
/// downward scan over candidate split points.
pub fn prox_var(w: &DVector<f64>, sigma: f64, alpha: f64) -> DVector<f64> {
    assert!(sigma > 0.0, "penalty weight must be positive");
    let n = w.len();
    assert!(n >= 1);
    let p = ceil_alpha_n(alpha, n);
    let order = sorted_order(w.as_slice());

    // gamma_i = (sigma * sum_{j=i..p} w_(j) - 1) / (sigma * (p - i + 1)),
    // with i running 1-based over the sorted order.
    let mut suffix = vec![0.0; p + 1];
    for i in (0..p).rev() {
        suffix[i] = suffix[i + 1] + w[order[i]];
    }
    let gamma = |i: usize| (sigma * suffix[i - 1] - 1.0) / (sigma * (p - i + 1) as f64);

    let mut split = None;
    for i in (1..=p).rev() {
        let g = gamma(i);
        let below = if i >= 2 { w[order[i - 2]] } else { f64::NEG_INFINITY };
        if below < g && g <= w[order[i - 1]] {
            split = Some((i, g));
            break;
        }
    }
    let (i_star, g_star) = split.expect("prox_var split scan found no valid index");

    let mut y = w.clone();
    for i in i_star..=p {
        y[order[i - 1]] = g_star;
    }
    y
}

/// Objective of the CVaR prox as a function of the threshold, evaluated
/// through prefix sums over the sorted anchor so one call costs O(log n).
struct CvarProxCurve {
    sorted: Vec<f64>,
    prefix: Vec<f64>,
    prefix_sq: Vec<f64>,
    kappa: f64,
    c: f64,
    sigma: f64,
}

impl CvarProxCurve {
    fn new(w: &DVector<f64>, sigma: f64, alpha: f64) -> Self {
        let n = w.len();
        let mut sorted: Vec<f64> = w.iter().cloned().collect();
        sorted.sort_by(f64::total_cmp);
        let mut prefix = vec![0.0; n + 1];
        let mut prefix_sq = vec![0.0; n + 1];
        for (i, v) in sorted.iter().enumerate() {
            prefix[i + 1] = prefix[i] + v;
            prefix_sq[i + 1] = prefix_sq[i] + v * v;
        }
        let kappa = 1.0 / ((1.0 - alpha) * n as f64);
        Self { sorted, prefix, prefix_sq, kappa, c: kappa / sigma, sigma }
    }

    /// phi(t) = t + kappa sum_i (y_i(t) - t)_+ + (sigma/2) ||y(t) - w||^2
    /// where y(t) clips each w_i into (-inf, t] cushioned by c.
    fn phi(&self, t: f64) -> f64 {
        let n = self.sorted.len();
        let a = self.sorted.partition_point(|&v| v <= t + self.c); // first w_i > t + c
        let b = self.sorted.partition_point(|&v| v <= t); // first w_i > t
        let count_a = (n - a) as f64;
        let sum_a = self.prefix[n] - self.prefix[a];
        let count_b = (a - b) as f64;
        let sum_b = self.prefix[a] - self.prefix[b];
        let sumsq_b = self.prefix_sq[a] - self.prefix_sq[b];
        let hinge = sum_a - count_a * (self.c + t);
        let quad = count_a * self.c * self.c + count_b * t * t - 2.0 * t * sum_b + sumsq_b;
        t + self.kappa * hinge + 0.5 * self.sigma * quad
    }
}

/// The inner minimizer y(t): entries above `t + c` drop by `c`, entries in
/// `(t, t + c]` land on `t`, entries at or below `t` stay.
pub fn cvar_prox_point(w: &DVector<f64>, t: f64, c: f64) -> DVector<f64> {
    w.map(|wi| {
        if wi - c > t {
            wi - c
        } else if wi > t {
            t
        } else {
            wi
        }
    })
}

/// Golden-section search on `[a, b]` to bracket width `tol`, followed by a
/// single parabolic refinement. The refinement fits through three widely
/// spaced points of the original interval, so on a quadratic piece the
/// vertex is exact even where function values are flat to the last ulp.
fn golden_min(f: &dyn Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> (f64, f64) {
    const INVPHI: f64 = 0.618_033_988_749_894_9;
    let (a0, b0) = (a, b);
    let mut x1 = b - INVPHI * (b - a);
    let mut x2 = a + INVPHI * (b - a);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    while b - a > tol {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - INVPHI * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + INVPHI * (b - a);
            f2 = f(x2);
        }
    }
    let (mut tm, mut fm) = if f1 <= f2 { (x1, f1) } else { (x2, f2) };
    let (pa, pm, pb) = (
        a0 + 0.25 * (b0 - a0),
        a0 + 0.5 * (b0 - a0),
        a0 + 0.75 * (b0 - a0),
    );
    let (fa, fmid, fb) = (f(pa), f(pm), f(pb));
    let denom = (pm - pa) * (fmid - fb) - (pm - pb) * (fmid - fa);
    if denom.abs() > f64::EPSILON {
        let num = (pm - pa) * (pm - pa) * (fmid - fb) - (pm - pb) * (pm - pb) * (fmid - fa);
        let cand = pm - 0.5 * num / denom;
        if cand.is_finite() && cand > a0 && cand < b0 {
            let fc = f(cand);
            if fc <= fm {
                tm = cand;
                fm = fc;
            }
        }
    }
    (tm, fm)
}

/// `argmin_y cvar(y, alpha) + (sigma/2) ||y - w||^2`. At fixed threshold `t`
/// the inner minimizer is the clipping map `y(t)`; the outer function of `t`
/// is convex and piecewise quadratic with breakpoints `{w_i, w_i - c}`, so
/// the global minimum lies adjacent to the best breakpoint and a bracketed
/// golden-section search finds it.
pub fn prox_cvar(w: &DVector<f64>, sigma: f64, alpha: f64) -> DVector<f64> {
    assert!(sigma > 0.0, "penalty weight must be positive");
    assert!(alpha < 1.0, "cvar prox requires alpha < 1");
    let n = w.len();
    assert!(n >= 1);
    let curve = CvarProxCurve::new(w, sigma, alpha);
    let lo = curve.sorted[0] - curve.c;
    let hi = curve.sorted[n - 1];
    if hi <= lo {
        return cvar_prox_point(w, lo, curve.c);
    }

    let mut points: Vec<f64> = vec![lo, hi];
    for &v in &curve.sorted {
        for cand in [v, v - curve.c] {
            if cand > lo && cand < hi {
                points.push(cand);
            }
        }
    }
    points.sort_by(f64::total_cmp);
    points.dedup();

    let mut best_idx = 0;
    let mut best_val = f64::INFINITY;
    for (i, &t) in points.iter().enumerate() {
        let v = curve.phi(t);
        if v < best_val {
            best_val = v;
            best_idx = i;
        }
    }
    let mut t_star = points[best_idx];
    let mut f_star = best_val;
    let f = |t: f64| curve.phi(t);
    for (a, b) in [
        (points[best_idx.saturating_sub(1)], points[best_idx]),
        (points[best_idx], points[(best_idx + 1).min(points.len() - 1)]),
    ] {
        if b > a {
            let (t, v) = golden_min(&f, a, b, 1e-10);
            if v < f_star {
                t_star = t;
                f_star = v;
            }
        }
    }
    let _ = f_star;
    cvar_prox_point(w, t_star, curve.c)
}

/// Euclidean projection onto `{y : y_(p) <= b0}`: entries ranked at or
/// below `p` that exceed the budget clip to it, everything else stays.
pub fn project_var_ball(w: &DVector<f64>, alpha: f64, b0: f64) -> DVector<f64> {
    let n = w.len();
    assert!(n >= 1);
    let p = ceil_alpha_n(alpha, n);
    let order = sorted_order(w.as_slice());
    let mut y = w.clone();
    for &i in &order[..p] {
        if y[i] > b0 {
            y[i] = b0;
        }
    }
    y
}

/// Euclidean projection onto `{y : variance(y) <= b0}`: the set is a
/// cylinder over a centered ball, so deviations about the preserved mean
/// shrink radially by `theta = min(1, sqrt(b0 / variance(w)))`.
pub fn project_variance_ball(w: &DVector<f64>, b0: f64) -> DVector<f64> {
    assert!(b0 >= 0.0, "variance budget must be nonnegative");
    let n = w.len() as f64;
    let mean = w.sum() / n;
    let var = w.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var <= b0 {
        return w.clone();
    }
    let theta = (b0 / var).sqrt();
    w.map(|wi| mean + theta * (wi - mean))
}

/// Euclidean projection onto `{y : cvar(y, alpha) <= b0}` via the epigraph
/// QP in `(y, t, z)`.
pub fn project_cvar_ball(w: &DVector<f64>, alpha: f64, b0: f64) -> Result<DVector<f64>> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidParameter(format!("alpha = {alpha} not in (0, 1)")));
    }
    if risk::cvar_at(w.as_slice(), alpha)? <= b0 {
        return Ok(w.clone());
    }
    let n = w.len();
    let kappa = 1.0 / ((1.0 - alpha) * n as f64);
    // Variables: y (n), t (1), z (n).
    let nv = 2 * n + 1;
    let mut q = DMatrix::zeros(nv, nv);
    let mut c = DVector::zeros(nv);
    for i in 0..n {
        q[(i, i)] = 2.0;
        c[i] = -2.0 * w[i];
    }
    let mut a_in = DMatrix::zeros(1 + n, nv);
    let mut b_in = DVector::zeros(1 + n);
    a_in[(0, n)] = 1.0;
    for i in 0..n {
        a_in[(0, n + 1 + i)] = kappa;
    }
    b_in[0] = b0;
    for i in 0..n {
        a_in[(1 + i, i)] = 1.0;
        a_in[(1 + i, n)] = -1.0;
        a_in[(1 + i, n + 1 + i)] = -1.0;
    }
    let mut lower = DVector::from_element(nv, f64::NEG_INFINITY);
    for i in 0..n {
        lower[n + 1 + i] = 0.0;
    }
    let p = QpProblem::new(q, c)
        .with_ineq(a_in, b_in)
        .with_bounds(lower, DVector::from_element(nv, f64::INFINITY));
    let sol = solve_qp(&p)?;
    if sol.status != QpStatus::Optimal {
        return Err(Error::Solver("cvar ball projection QP did not converge".into()));
    }
    Ok(sol.z.rows(0, n).into_owned())
}

/// Output of a Basel subproblem: the reassembled point plus the QP-scale
/// multiplier of the capital budget rows.
#[derive(Debug, Clone)]
pub struct BaselSolve {
    pub x: DVector<f64>,
    pub capital_dual: f64,
}

enum BaselMode {
    /// Minimize `||x - v||^2` subject to `rho_B(x) <= c0`.
    Project { c0: f64 },
    /// Minimize `tau + (sigma/2) ||x - v||^2` subject to `rho_B(x) <= tau`.
    Prox { sigma: f64 },
}

/// Euclidean projection onto `{x : basel25(x) <= c0}` via the chain-ordered
/// QP over the sorted tail of each block.
pub fn project_basel25(
    v: &DVector<f64>,
    part: &Partition,
    params: &RiskParams,
    c0: f64,
) -> Result<DVector<f64>> {
    Ok(project_basel25_with_dual(v, part, params, c0)?.x)
}

pub fn project_basel25_with_dual(
    v: &DVector<f64>,
    part: &Partition,
    params: &RiskParams,
    c0: f64,
) -> Result<BaselSolve> {
    let loss = LossVector::new(v.clone(), part.clone())?;
    if risk::basel25(&loss, params)? <= c0 {
        return Ok(BaselSolve { x: v.clone(), capital_dual: 0.0 });
    }
    basel25_subproblem(v, part, params, BaselMode::Project { c0 })
}

/// Prox of a Basel measure: the projection QP with the budget promoted to a
/// decision variable `tau` added to the objective.
pub fn prox_basel(
    v: &DVector<f64>,
    part: &Partition,
    params: &RiskParams,
    sigma: f64,
    which: BaselMeasure,
) -> Result<DVector<f64>> {
    if sigma <= 0.0 {
        return Err(Error::InvalidParameter("penalty weight must be positive".into()));
    }
    match which {
        BaselMeasure::Basel25 => {
            Ok(basel25_subproblem(v, part, params, BaselMode::Prox { sigma })?.x)
        }
        BaselMeasure::Basel3 => {
            Ok(basel3_subproblem(v, part, params, BaselMode::Prox { sigma })?.x)
        }
    }
}

fn basel25_subproblem(
    v: &DVector<f64>,
    part: &Partition,
    params: &RiskParams,
    mode: BaselMode,
) -> Result<BaselSolve> {
    params.validate()?;
    let (m1, m2, m) = (part.m1(), part.m2(), part.m());
    if m1 == 0 || m2 == 0 {
        return Err(Error::EmptyInput(
            "basel25 subproblem requires normal and stressed blocks".into(),
        ));
    }
    let alpha = params.alpha;
    let p_s: Vec<usize> = part.sizes().iter().map(|&n| ceil_alpha_n(alpha, n)).collect();
    let orders: Vec<Vec<usize>> = (0..m)
        .map(|s| sorted_order(&v.as_slice()[part.range(s)]))
        .collect();

    let nz: usize = p_s.iter().sum();
    let mut z_off = vec![0usize; m];
    for s in 1..m {
        z_off[s] = z_off[s - 1] + p_s[s - 1];
    }
    let (g1, g2) = (nz, nz + 1);
    let has_tau = matches!(mode, BaselMode::Prox { .. });
    let nv = nz + 2 + usize::from(has_tau);
    let tau = nz + 2;

    let mut q = DMatrix::zeros(nv, nv);
    let mut c = DVector::zeros(nv);
    let weight = match mode {
        BaselMode::Project { .. } => 2.0,
        BaselMode::Prox { sigma } => sigma,
    };
    for s in 0..m {
        let base = part.range(s).start;
        for i in 0..p_s[s] {
            let idx = z_off[s] + i;
            q[(idx, idx)] = weight;
            c[idx] = -weight * v[base + orders[s][i]];
        }
    }
    if has_tau {
        c[tau] = 1.0;
    }

    let n_chain: usize = p_s.iter().map(|&p| p - 1).sum();
    let mi = n_chain + 5;
    let mut a_in = DMatrix::zeros(mi, nv);
    let mut b_in = DVector::zeros(mi);
    let mut r = 0;
    for s in 0..m {
        for i in 0..p_s[s] - 1 {
            a_in[(r, z_off[s] + i)] = 1.0;
            a_in[(r, z_off[s] + i + 1)] = -1.0;
            r += 1;
        }
    }
    let capital_row = r;
    a_in[(r, g1)] = 1.0;
    a_in[(r, g2)] = 1.0;
    match mode {
        BaselMode::Project { c0 } => b_in[r] = c0,
        BaselMode::Prox { .. } => a_in[(r, tau)] = -1.0,
    }
    r += 1;
    a_in[(r, z_off[0] + p_s[0] - 1)] = 1.0;
    a_in[(r, g1)] = -1.0;
    r += 1;
    for s in 0..m1 {
        a_in[(r, z_off[s] + p_s[s] - 1)] = params.k / m1 as f64;
    }
    a_in[(r, g1)] = -1.0;
    r += 1;
    a_in[(r, z_off[m1] + p_s[m1] - 1)] = 1.0;
    a_in[(r, g2)] = -1.0;
    r += 1;
    for s in m1..m {
        a_in[(r, z_off[s] + p_s[s] - 1)] = params.ell / m2 as f64;
    }
    a_in[(r, g2)] = -1.0;

    let problem = QpProblem::new(q, c).with_ineq(a_in, b_in);
    let sol = solve_qp(&problem)?;
    if sol.status != QpStatus::Optimal {
        return Err(Error::Solver("basel25 subproblem QP did not converge".into()));
    }

    let mut x = v.clone();
    for s in 0..m {
        let base = part.range(s).start;
        for i in 0..p_s[s] {
            x[base + orders[s][i]] = sol.z[z_off[s] + i];
        }
    }
    Ok(BaselSolve { x, capital_dual: sol.in_duals[capital_row] })
}

/// Euclidean projection onto `{x : basel3(x) <= c0}` via the CVaR-epigraph
/// QP over the stressed blocks. Normal blocks pass through untouched.
pub fn project_basel3(
    v: &DVector<f64>,
    part: &Partition,
    params: &RiskParams,
    c0: f64,
) -> Result<DVector<f64>> {
    Ok(project_basel3_with_dual(v, part, params, c0)?.x)
}

pub fn project_basel3_with_dual(
    v: &DVector<f64>,
    part: &Partition,
    params: &RiskParams,
    c0: f64,
) -> Result<BaselSolve> {
    let loss = LossVector::new(v.clone(), part.clone())?;
    if risk::basel3(&loss, params)? <= c0 {
        return Ok(BaselSolve { x: v.clone(), capital_dual: 0.0 });
    }
    basel3_subproblem(v, part, params, BaselMode::Project { c0 })
}

fn basel3_subproblem(
    v: &DVector<f64>,
    part: &Partition,
    params: &RiskParams,
    mode: BaselMode,
) -> Result<BaselSolve> {
    params.validate()?;
    let (m1, m2, m) = (part.m1(), part.m2(), part.m());
    if m2 == 0 {
        return Err(Error::EmptyInput("basel3 subproblem requires a stressed block".into()));
    }
    let alpha = params.alpha3;
    let stressed: Vec<usize> = (m1..m).collect();
    let sizes: Vec<usize> = stressed.iter().map(|&s| part.sizes()[s]).collect();
    let total: usize = sizes.iter().sum();

    // Variables: x (total), t (m2), z (total), then tau in prox mode.
    let mut x_off = vec![0usize; m2];
    for j in 1..m2 {
        x_off[j] = x_off[j - 1] + sizes[j - 1];
    }
    let t_base = total;
    let z_base = total + m2;
    let has_tau = matches!(mode, BaselMode::Prox { .. });
    let nv = 2 * total + m2 + usize::from(has_tau);
    let tau = 2 * total + m2;

    let weight = match mode {
        BaselMode::Project { .. } => 2.0,
        BaselMode::Prox { sigma } => sigma,
    };
    let mut q = DMatrix::zeros(nv, nv);
    let mut c = DVector::zeros(nv);
    for (j, &s) in stressed.iter().enumerate() {
        let base = part.range(s).start;
        for i in 0..sizes[j] {
            let idx = x_off[j] + i;
            q[(idx, idx)] = weight;
            c[idx] = -weight * v[base + i];
        }
    }
    if has_tau {
        c[tau] = 1.0;
    }

    let mi = 2 + total;
    let mut a_in = DMatrix::zeros(mi, nv);
    let mut b_in = DVector::zeros(mi);
    a_in[(0, t_base)] = 1.0;
    let kappa0 = 1.0 / ((1.0 - alpha) * sizes[0] as f64);
    for i in 0..sizes[0] {
        a_in[(0, z_base + i)] = kappa0;
    }
    for (j, &nj) in sizes.iter().enumerate() {
        a_in[(1, t_base + j)] = params.ell / m2 as f64;
        let kap = 1.0 / ((1.0 - alpha) * nj as f64);
        for i in 0..nj {
            a_in[(1, z_base + x_off[j] + i)] = params.ell / m2 as f64 * kap;
        }
    }
    match mode {
        BaselMode::Project { c0 } => {
            b_in[0] = c0;
            b_in[1] = c0;
        }
        BaselMode::Prox { .. } => {
            a_in[(0, tau)] = -1.0;
            a_in[(1, tau)] = -1.0;
        }
    }
    let mut r = 2;
    for j in 0..m2 {
        for i in 0..sizes[j] {
            let idx = x_off[j] + i;
            a_in[(r, idx)] = 1.0;
            a_in[(r, t_base + j)] = -1.0;
            a_in[(r, z_base + idx)] = -1.0;
            r += 1;
        }
    }
    let mut lower = DVector::from_element(nv, f64::NEG_INFINITY);
    for i in 0..total {
        lower[z_base + i] = 0.0;
    }
    let problem = QpProblem::new(q, c)
        .with_ineq(a_in, b_in)
        .with_bounds(lower, DVector::from_element(nv, f64::INFINITY));
    let sol = solve_qp(&problem)?;
    if sol.status != QpStatus::Optimal {
        return Err(Error::Solver("basel3 subproblem QP did not converge".into()));
    }

    let mut x = v.clone();
    for (j, &s) in stressed.iter().enumerate() {
        let base = part.range(s).start;
        for i in 0..sizes[j] {
            x[base + i] = sol.z[x_off[j] + i];
        }
    }
    Ok(BaselSolve { x, capital_dual: sol.in_duals[0] + sol.in_duals[1] })
}

/// Euclidean projection onto the level set of the selected Basel measure.
pub fn project_basel(
    v: &DVector<f64>,
    part: &Partition,
    params: &RiskParams,
    c0: f64,
    which: BaselMeasure,
) -> Result<BaselSolve> {
    match which {
        BaselMeasure::Basel25 => project_basel25_with_dual(v, part, params, c0),
        BaselMeasure::Basel3 => project_basel3_with_dual(v, part, params, c0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn vecv(v: &[f64]) -> DVector<f64> {
        DVector::from_vec(v.to_vec())
    }

    #[test]
    fn prox_variance_fixed_point_and_hand_case() {
        let w = DVector::from_element(4, 3.7);
        let y = prox_variance(&w, 1.3);
        for i in 0..4 {
            assert_abs_diff_eq!(y[i], 3.7, epsilon = 1e-12);
        }

        let y = prox_variance(&vecv(&[0.0, 2.0]), 2.0);
        assert_abs_diff_eq!(y[0], 1.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(y[1], 5.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn prox_variance_matches_gradient_descent() {
        let w = vecv(&[0.3, -1.2, 0.8, 2.5, -0.4]);
        let sigma = 1.0;
        let y = prox_variance(&w, sigma);
        // Independent check: minimize variance(y) + (sigma/2)||y - w||^2 by
        // plain gradient descent.
        let n = w.len() as f64;
        let mut g = w.clone();
        let step = 1.0 / (sigma + 2.0);
        for _ in 0..20_000 {
            let mean = g.sum() / n;
            let grad = g.map(|v| 2.0 * (v - mean) / n) + (&g - &w) * sigma;
            g -= grad * step;
        }
        for i in 0..w.len() {
            assert_abs_diff_eq!(y[i], g[i], epsilon = 1e-8);
        }
    }

    #[test]
    fn prox_var_examples() {
        let y = prox_var(&vecv(&[0.0]), 1.0, 0.5);
        assert_abs_diff_eq!(y[0], -1.0, epsilon = 1e-12);

        let y = prox_var(&vecv(&[0.0, 10.0]), 1.0, 0.6);
        assert_abs_diff_eq!(y[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(y[1], 9.0, epsilon = 1e-12);

        let y = prox_var(&vecv(&[0.0, 10.0]), 100.0, 0.6);
        assert_abs_diff_eq!(y[1], 9.99, epsilon = 1e-12);
    }

    #[test]
    fn prox_var_shrinks_with_larger_sigma() {
        let w = vecv(&[1.4, -0.3, 2.2, 0.9, -1.8, 0.2]);
        let mut last = f64::INFINITY;
        for sigma in [0.2, 0.5, 1.0, 2.0, 5.0, 20.0] {
            let y = prox_var(&w, sigma, 0.7);
            let dist = (&y - &w).norm();
            assert!(dist <= last + 1e-12, "distance grew at sigma {sigma}");
            last = dist;
        }
    }

    #[test]
    fn prox_cvar_scalar_case() {
        // n = 1, alpha = 0.5, sigma = 1: the threshold objective is
        // t + t^2/2 on the bracket, minimized at t = -1.
        let y = prox_cvar(&vecv(&[0.0]), 1.0, 0.5);
        assert_abs_diff_eq!(y[0], -1.0, epsilon = 1e-9);
    }

    #[test]
    fn prox_cvar_penalty_dominance() {
        let w = vecv(&[0.4, -0.2, 1.1, 0.0, 0.6]);
        let sigma = 1e6;
        let alpha = 0.8;
        let c = 1.0 / (sigma * (1.0 - alpha) * w.len() as f64);
        let y = prox_cvar(&w, sigma, alpha);
        assert!((&y - &w).norm() <= c * (w.len() as f64).sqrt() + 1e-12);
    }

    #[test]
    fn project_var_ball_examples() {
        let w = vecv(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        let y = project_var_ball(&w, 0.6, 2.5);
        assert_eq!(y.as_slice(), &[1.0, 2.0, 2.5, 4.0, 5.0]);
        assert!(risk::var_at(y.as_slice(), 0.6).unwrap() <= 2.5);

        let w = vecv(&[0.5, 1.5, -0.2]);
        let y = project_var_ball(&w, 0.6, 2.0);
        assert_eq!(y.as_slice(), w.as_slice());

        let y = project_var_ball(&w, 0.6, -1.0);
        // Budget below the minimum: the p smallest entries all clip.
        assert_eq!(y.as_slice(), &[-1.0, 1.5, -1.0]);
    }

    #[test]
    fn project_variance_ball_examples() {
        let w = vecv(&[-1.0, 1.0]);
        let y = project_variance_ball(&w, 0.25);
        assert_abs_diff_eq!(y[0], -0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(y[1], 0.5, epsilon = 1e-12);

        let w = vecv(&[0.3, 0.1, 0.2]);
        assert_eq!(project_variance_ball(&w, 1.0).as_slice(), w.as_slice());

        let y = project_variance_ball(&w, 0.0);
        for i in 0..3 {
            assert_abs_diff_eq!(y[i], 0.2, epsilon = 1e-12);
        }
    }

    #[test]
    fn project_cvar_ball_examples() {
        let w = vecv(&[0.1, 0.4]);
        let y = project_cvar_ball(&w, 0.5, 1.0).unwrap();
        assert_eq!(y.as_slice(), w.as_slice());

        let y = project_cvar_ball(&vecv(&[3.0]), 0.5, 1.0).unwrap();
        assert_abs_diff_eq!(y[0], 1.0, epsilon = 1e-6);
    }

    #[test]
    fn project_basel25_examples() {
        let params = RiskParams::new(0.99, 1.0, 1.0, 0.98).unwrap();
        let part = Partition::new(vec![2, 2], 1).unwrap();
        let v = vecv(&[0.0, 2.0, 0.0, 2.0]);

        let x = project_basel25(&v, &part, &params, 2.0).unwrap();
        assert_abs_diff_eq!(x[0], 0.0, epsilon = 1e-6);
        assert_abs_diff_eq!(x[1], 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(x[2], 0.0, epsilon = 1e-6);
        assert_abs_diff_eq!(x[3], 1.0, epsilon = 1e-6);

        // Slack budget: the anchor comes back bit-identical.
        let x = project_basel25(&v, &part, &params, 1e9).unwrap();
        assert_eq!(x.as_slice(), v.as_slice());

        let feasible = vecv(&[0.0, 0.5, 0.0, 0.5]);
        let x = project_basel25(&feasible, &part, &params, 2.0).unwrap();
        assert_eq!(x.as_slice(), feasible.as_slice());
    }

    #[test]
    fn project_basel3_examples() {
        let params = RiskParams::new(0.99, 1.0, 1.0, 0.5).unwrap();
        let part = Partition::new(vec![1, 1], 1).unwrap();

        let v = vecv(&[7.0, 3.0]);
        let x = project_basel3(&v, &part, &params, 1.0).unwrap();
        // Normal block untouched; scalar stressed CVaR clips to the budget.
        assert_eq!(x[0].to_bits(), v[0].to_bits());
        assert_abs_diff_eq!(x[1], 1.0, epsilon = 1e-6);

        let feasible = vecv(&[7.0, 0.5]);
        let x = project_basel3(&feasible, &part, &params, 1.0).unwrap();
        assert_eq!(x.as_slice(), feasible.as_slice());
    }

    #[test]
    fn project_basel3_normal_blocks_pass_through() {
        let params = RiskParams::new(0.99, 3.0, 2.0, 0.7).unwrap();
        let part = Partition::new(vec![3, 2, 2], 1).unwrap();
        let v = vecv(&[0.9, -0.4, 0.11, 1.4, 0.3, 2.2, -0.6]);
        let x = project_basel3(&v, &part, &params, 0.25).unwrap();
        for i in 0..3 {
            assert_eq!(x[i].to_bits(), v[i].to_bits());
        }
        let loss = LossVector::new(x, part).unwrap();
        assert!(risk::basel3(&loss, &params).unwrap() <= 0.25 + 1e-7);
    }

    #[test]
    fn prox_basel_scalar_and_limit() {
        let params = RiskParams::new(0.99, 1.0, 1.0, 0.5).unwrap();
        let part = Partition::new(vec![1, 1], 1).unwrap();
        let v = vecv(&[0.0, 5.0]);
        let x = prox_basel(&v, &part, &params, 1.0, BaselMeasure::Basel3).unwrap();
        // Scalar stressed CVaR with ell = 1 reduces to the prox of the
        // identity: x = v - 1.
        assert_abs_diff_eq!(x[1], 4.0, epsilon = 1e-6);

        // Large sigma: the output approaches the anchor at rate
        // (k + ell)/sigma.
        let params = RiskParams::new(0.8, 3.0, 3.0, 0.7).unwrap();
        let part = Partition::new(vec![2, 2], 1).unwrap();
        let v = vecv(&[0.3, -0.2, 0.5, 0.1]);
        for which in [BaselMeasure::Basel25, BaselMeasure::Basel3] {
            let sigma = 1e5;
            let x = prox_basel(&v, &part, &params, sigma, which).unwrap();
            let bound = (params.k + params.ell) / sigma;
            assert!((&x - &v).norm() <= bound + 1e-9, "{which:?}");
        }
    }

    #[test]
    fn prox_basel25_zero_anchor_shifts_tail_entries_only() {
        let params = RiskParams::new(0.6, 2.0, 2.0, 0.7).unwrap();
        let part = Partition::new(vec![2, 2], 1).unwrap();
        let v = DVector::zeros(4);
        let x = prox_basel(&v, &part, &params, 1.0, BaselMeasure::Basel25).unwrap();
        // With a zero anchor every moved tail entry lands strictly below
        // zero and nothing moves up.
        assert!(x.iter().all(|&xi| xi <= 1e-9));
        assert!(x.iter().any(|&xi| xi < -1e-6));
    }

    #[test]
    fn basel_block_locality() {
        // Entries ranked above p_s stay bit-identical through the Lemma-1
        // style projection.
        let params = RiskParams::new(0.6, 2.0, 3.0, 0.7).unwrap();
        let part = Partition::new(vec![4, 3], 1).unwrap();
        let v = vecv(&[0.4, 1.9, -0.3, 2.6, 1.1, -0.9, 3.0]);
        let x = project_basel25(&v, &part, &params, 0.5).unwrap();
        for s in 0..2 {
            let range = part.range(s);
            let block: Vec<f64> = v.as_slice()[range.clone()].to_vec();
            let p = ceil_alpha_n(params.alpha, block.len());
            let order = sorted_order(&block);
            for &i in &order[p..] {
                assert_eq!(x[range.start + i].to_bits(), v[range.start + i].to_bits());
            }
        }
    }
}

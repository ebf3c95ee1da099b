//! Dense convex quadratic programming.
//!
//! Solves
//!
//! ```text
//!     minimize    1/2 z'Qz + c'z
//!     subject to  A_eq z  = b_eq
//!                 A_in z <= b_in
//!                 lower <= z <= upper
//! ```
//!
//! with a primal-dual interior-point method using Mehrotra's
//! predictor-corrector and dense factorizations. Problem sizes here are a
//! few hundred variables and constraints, where the dense path is simplest
//! and robust. LPs run through the same path with a tiny diagonal
//! regularizer on `Q`; the reported objective and the KKT certificate are
//! always evaluated on the unregularized data.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::scenario::WeightSet;

const MAX_ITER: usize = 200;
const TOL: f64 = 1e-9;
const CERT_TOL: f64 = 1e-8;
const STEP_SCALE: f64 = 0.995;

/// A convex QP in standard form. `Q` may be zero (LP mode); bounds may be
/// infinite.
#[derive(Debug, Clone)]
pub struct QpProblem {
    pub q: DMatrix<f64>,
    pub c: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub a_in: DMatrix<f64>,
    pub b_in: DVector<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl QpProblem {
    /// Unconstrained problem with free variables; add constraints with the
    /// `with_*` builders.
    pub fn new(q: DMatrix<f64>, c: DVector<f64>) -> Self {
        let d = c.len();
        Self {
            q,
            c,
            a_eq: DMatrix::zeros(0, d),
            b_eq: DVector::zeros(0),
            a_in: DMatrix::zeros(0, d),
            b_in: DVector::zeros(0),
            lower: DVector::from_element(d, f64::NEG_INFINITY),
            upper: DVector::from_element(d, f64::INFINITY),
        }
    }

    pub fn with_eq(mut self, a_eq: DMatrix<f64>, b_eq: DVector<f64>) -> Self {
        self.a_eq = a_eq;
        self.b_eq = b_eq;
        self
    }

    pub fn with_ineq(mut self, a_in: DMatrix<f64>, b_in: DVector<f64>) -> Self {
        self.a_in = a_in;
        self.b_in = b_in;
        self
    }

    pub fn with_bounds(mut self, lower: DVector<f64>, upper: DVector<f64>) -> Self {
        self.lower = lower;
        self.upper = upper;
        self
    }

    pub fn num_vars(&self) -> usize {
        self.c.len()
    }

    fn validate(&self) -> Result<()> {
        let d = self.c.len();
        if d == 0 {
            return Err(Error::EmptyInput("qp with no variables".into()));
        }
        if self.q.nrows() != d || self.q.ncols() != d {
            return Err(Error::DimensionMismatch("Q must be d x d".into()));
        }
        let scale = 1.0 + self.q.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        for i in 0..d {
            for j in (i + 1)..d {
                if (self.q[(i, j)] - self.q[(j, i)]).abs() > 1e-12 * scale {
                    return Err(Error::InvalidParameter("Q is not symmetric".into()));
                }
            }
        }
        if self.a_eq.ncols() != d || self.a_eq.nrows() != self.b_eq.len() {
            return Err(Error::DimensionMismatch("equality block".into()));
        }
        if self.a_in.ncols() != d || self.a_in.nrows() != self.b_in.len() {
            return Err(Error::DimensionMismatch("inequality block".into()));
        }
        if self.lower.len() != d || self.upper.len() != d {
            return Err(Error::DimensionMismatch("bounds".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIter,
}

/// Scaled KKT residuals of the returned point (scaled by `1 + ||data||_inf`).
#[derive(Debug, Clone, Copy)]
pub struct KktResiduals {
    pub primal: f64,
    pub dual: f64,
    pub gap: f64,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub z: DVector<f64>,
    pub obj: f64,
    /// Multipliers of the equality rows (sign: stationarity reads
    /// `Qz + c + A_eq' y + A_in' lambda = 0`).
    pub eq_duals: DVector<f64>,
    /// Multipliers of the declared inequality rows (nonnegative).
    pub in_duals: DVector<f64>,
    pub status: QpStatus,
    pub iterations: usize,
    pub kkt: KktResiduals,
    /// When `status == Infeasible`: a lower bound on the maximum
    /// constraint violation of any point satisfying the equalities.
    pub violation: f64,
}

/// Inequality rows stored sparsely; chain and epigraph rows carry only a
/// couple of nonzeros and dominate the iteration cost otherwise.
struct SparseRows {
    rows: Vec<Vec<(usize, f64)>>,
    ncols: usize,
}

impl SparseRows {
    fn from_dense_and_bounds(a_in: &DMatrix<f64>, lower: &DVector<f64>, upper: &DVector<f64>) -> (Self, DVector<f64>) {
        let d = a_in.ncols();
        let mut rows = Vec::new();
        let mut rhs = Vec::new();
        for r in 0..a_in.nrows() {
            let mut row = Vec::new();
            for c in 0..d {
                let v = a_in[(r, c)];
                if v != 0.0 {
                    row.push((c, v));
                }
            }
            rows.push(row);
            rhs.push(0.0); // placeholder, b_in copied by caller
        }
        for i in 0..d {
            if upper[i].is_finite() {
                rows.push(vec![(i, 1.0)]);
                rhs.push(upper[i]);
            }
            if lower[i].is_finite() {
                rows.push(vec![(i, -1.0)]);
                rhs.push(-lower[i]);
            }
        }
        let mut h = DVector::zeros(rhs.len());
        for (r, v) in rhs.iter().enumerate() {
            h[r] = *v;
        }
        (Self { rows, ncols: d }, h)
    }

    fn nrows(&self) -> usize {
        self.rows.len()
    }

    /// `G z`
    fn matvec(&self, z: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.rows.len());
        for (r, row) in self.rows.iter().enumerate() {
            out[r] = row.iter().map(|&(c, v)| v * z[c]).sum();
        }
        out
    }

    /// `G' w`
    fn tmatvec(&self, w: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.ncols);
        for (r, row) in self.rows.iter().enumerate() {
            let wr = w[r];
            if wr != 0.0 {
                for &(c, v) in row {
                    out[c] += v * wr;
                }
            }
        }
        out
    }

    /// `m += G' diag(weights) G`
    fn add_weighted_gram(&self, weights: &DVector<f64>, m: &mut DMatrix<f64>) {
        for (r, row) in self.rows.iter().enumerate() {
            let wr = weights[r];
            for &(ci, vi) in row {
                for &(cj, vj) in row {
                    m[(ci, cj)] += wr * vi * vj;
                }
            }
        }
    }

    fn max_abs(&self) -> f64 {
        self.rows
            .iter()
            .flat_map(|row| row.iter().map(|&(_, v)| v.abs()))
            .fold(0.0, f64::max)
    }
}

/// Solve a convex QP/LP and return the primal-dual certificate. `Optimal`
/// implies scaled primal, dual, and complementarity residuals below 1e-8;
/// `Infeasible` carries a violation lower bound above that threshold.
pub fn solve_qp(p: &QpProblem) -> Result<QpSolution> {
    p.validate()?;
    solve_inner(p, true)
}

fn solve_inner(p: &QpProblem, allow_phase1: bool) -> Result<QpSolution> {
    let d = p.num_vars();
    let meq = p.a_eq.nrows();

    // PSD check by attempted factorization, with the diagonal fallback for
    // singular PSD quadratic terms (e.g. Gram matrices with d > n).
    let q_eff = match nalgebra::Cholesky::new(p.q.clone()) {
        Some(_) => p.q.clone(),
        None => {
            let trace_abs: f64 = (0..d).map(|i| p.q[(i, i)].abs()).sum();
            let delta = 1e-10 * (1.0 + trace_abs / d as f64);
            let reg = &p.q + DMatrix::identity(d, d) * delta;
            if nalgebra::Cholesky::new(reg.clone()).is_none() {
                return Err(Error::Solver(
                    "quadratic term is not positive semidefinite within regularization tolerance"
                        .into(),
                ));
            }
            reg
        }
    };

    let (g, mut h) = SparseRows::from_dense_and_bounds(&p.a_in, &p.lower, &p.upper);
    for r in 0..p.b_in.len() {
        h[r] = p.b_in[r];
    }
    let mi = g.nrows();
    let mi_user = p.a_in.nrows();

    let data_inf = [
        p.q.iter().fold(0.0f64, |a, v| a.max(v.abs())),
        p.c.amax_safe(),
        p.a_eq.iter().fold(0.0f64, |a, v| a.max(v.abs())),
        p.b_eq.amax_safe(),
        g.max_abs(),
        h.amax_safe(),
    ]
    .into_iter()
    .fold(0.0, f64::max);
    let scale = 1.0 + data_inf;

    // Equality consistency: the phase-1 relaxation keeps equalities hard, so
    // rule out an inconsistent system first.
    if meq > 0 {
        let aat = &p.a_eq * p.a_eq.transpose() + DMatrix::identity(meq, meq) * (1e-12 * scale);
        if let Some(chol) = nalgebra::Cholesky::new(aat) {
            let y = chol.solve(&p.b_eq);
            let z_ls = p.a_eq.transpose() * y;
            let res = (&p.a_eq * &z_ls - &p.b_eq).amax_safe();
            if res > CERT_TOL * scale {
                return Ok(infeasible_solution(p, res));
            }
        }
    }

    // Pure equality-constrained problem: one saddle solve is exact.
    if mi == 0 {
        return solve_equality_only(p, &q_eff, scale);
    }

    // Starting point: minimizer of the objective plus a unit-scale proximal
    // term subject to the equalities (bounded even in LP mode), slacks
    // shifted into the positive orthant.
    let mut z = {
        let mut k = DMatrix::zeros(d + meq, d + meq);
        k.view_mut((0, 0), (d, d)).copy_from(&q_eff);
        for i in 0..d {
            k[(i, i)] += 1.0;
        }
        if meq > 0 {
            k.view_mut((0, d), (d, meq)).copy_from(&p.a_eq.transpose());
            k.view_mut((d, 0), (meq, d)).copy_from(&p.a_eq);
            for i in 0..meq {
                k[(d + i, d + i)] = -1e-12 * scale;
            }
        }
        let mut rhs = DVector::zeros(d + meq);
        for i in 0..d {
            rhs[i] = -p.c[i];
        }
        for i in 0..meq {
            rhs[d + i] = p.b_eq[i];
        }
        match nalgebra::LU::new(k).solve(&rhs) {
            Some(sol) => sol.rows(0, d).into_owned(),
            None => DVector::zeros(d),
        }
    };
    if z.iter().any(|v| !v.is_finite()) {
        z = DVector::zeros(d);
    }
    let s_raw = &h - g.matvec(&z);
    let shift = (-1.5 * s_raw.min()).max(0.0) + 0.1 * scale.min(10.0);
    let mut s = s_raw.add_scalar(shift);
    let mut lam = DVector::from_element(mi, 1.0);
    let mut y = DVector::zeros(meq);
    // Best iterate by worst scaled residual, as a fallback when the final
    // iterations wobble on degenerate geometry.
    let mut best: Option<(f64, DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>)> = None;

    let mut iterations = 0;
    let mut converged = false;
    let mut reg_bump = 1.0;

    for iter in 0..MAX_ITER {
        iterations = iter + 1;

        let gz = g.matvec(&z);
        let r_d = &q_eff * &z + &p.c + p.a_eq.transpose() * &y + g.tmatvec(&lam);
        let r_p = &p.a_eq * &z - &p.b_eq;
        let r_g = &gz + &s - &h;
        let mu = s.dot(&lam) / mi as f64;

        // Convergence on the unregularized data.
        let rd_orig = (&p.q * &z + &p.c + p.a_eq.transpose() * &y + g.tmatvec(&lam)).amax_safe();
        let primal_res = r_p.amax_safe().max(
            (0..mi).map(|r| (gz[r] - h[r]).max(0.0)).fold(0.0, f64::max),
        );
        let worst = rd_orig.max(primal_res).max(mu);
        if best.as_ref().is_none_or(|(b, ..)| worst < *b) {
            best = Some((worst, z.clone(), y.clone(), lam.clone(), s.clone()));
        }
        if rd_orig <= TOL * scale && primal_res <= TOL * scale && mu <= TOL * scale {
            converged = true;
            break;
        }

        // Normal-equations block M = Q + G' D G with D = lambda / s.
        let dvec = DVector::from_iterator(mi, (0..mi).map(|i| lam[i] / s[i]));
        let mut m = q_eff.clone();
        for i in 0..d {
            m[(i, i)] += 1e-12 * scale * reg_bump;
        }
        g.add_weighted_gram(&dvec, &mut m);
        let mut k = DMatrix::zeros(d + meq, d + meq);
        k.view_mut((0, 0), (d, d)).copy_from(&m);
        if meq > 0 {
            k.view_mut((0, d), (d, meq)).copy_from(&p.a_eq.transpose());
            k.view_mut((d, 0), (meq, d)).copy_from(&p.a_eq);
            for i in 0..meq {
                k[(d + i, d + i)] = -1e-12 * scale * reg_bump;
            }
        }
        let lu = nalgebra::LU::new(k.clone());

        let solve_dir = |r_c: &DVector<f64>| -> Option<(DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>)> {
            // rhs1 = -r_d + G'(r_c / s) - G'(D r_g)
            let mut w = DVector::zeros(mi);
            for i in 0..mi {
                w[i] = r_c[i] / s[i] - dvec[i] * r_g[i];
            }
            let mut rhs = DVector::zeros(d + meq);
            let top = -&r_d + g.tmatvec(&w);
            for i in 0..d {
                rhs[i] = top[i];
            }
            for i in 0..meq {
                rhs[d + i] = -r_p[i];
            }
            let mut sol = lu.solve(&rhs)?;
            // One step of iterative refinement; the late-stage systems are
            // ill conditioned and LU alone loses several digits.
            let resid = &rhs - &k * &sol;
            if let Some(corr) = lu.solve(&resid) {
                sol += corr;
            }
            let dz = sol.rows(0, d).into_owned();
            let dy = sol.rows(d, meq).into_owned();
            let ds = -&r_g - g.matvec(&dz);
            let mut dl = DVector::zeros(mi);
            for i in 0..mi {
                dl[i] = -r_c[i] / s[i] - dvec[i] * ds[i];
            }
            if dz.iter().chain(ds.iter()).chain(dl.iter()).any(|v| !v.is_finite()) {
                return None;
            }
            Some((dz, dy, ds, dl))
        };

        // Predictor.
        let r_c_aff = DVector::from_iterator(mi, (0..mi).map(|i| s[i] * lam[i]));
        let aff = match solve_dir(&r_c_aff) {
            Some(v) => v,
            None => {
                reg_bump *= 100.0;
                continue;
            }
        };
        let (dz_a, _, ds_a, dl_a) = &aff;
        let ap_aff = step_length(&s, ds_a);
        let ad_aff = step_length(&lam, dl_a);
        let mu_aff = (0..mi)
            .map(|i| (s[i] + ap_aff * ds_a[i]) * (lam[i] + ad_aff * dl_a[i]))
            .sum::<f64>()
            / mi as f64;
        let sigma = if mu > 0.0 { (mu_aff / mu).clamp(0.0, 1.0).powi(3) } else { 0.0 };

        // Corrector.
        let r_c = DVector::from_iterator(
            mi,
            (0..mi).map(|i| s[i] * lam[i] + ds_a[i] * dl_a[i] - sigma * mu),
        );
        let (dz, dy, ds, dl) = match solve_dir(&r_c) {
            Some(v) => v,
            None => {
                reg_bump *= 100.0;
                continue;
            }
        };
        let _ = dz_a;

        let ap = STEP_SCALE * step_length(&s, &ds);
        let ad = STEP_SCALE * step_length(&lam, &dl);
        if std::env::var_os("QP_TRACE").is_some() {
            eprintln!(
                "iter {iter:3}: mu {mu:.3e} rd {rd_orig:.3e} rp {primal_res:.3e} ap {ap:.3e} ad {ad:.3e} sigma {sigma:.2e}"
            );
        }
        if ap < 1e-13 && ad < 1e-13 {
            break; // stalled
        }
        z += &dz * ap.min(1.0);
        s += &ds * ap.min(1.0);
        y += &dy * ad.min(1.0);
        lam += &dl * ad.min(1.0);
    }

    if !converged {
        if let Some((_, bz, by, blam, bs)) = best {
            z = bz;
            y = by;
            lam = blam;
            s = bs;
        }
    }
    let kkt = certificate(p, &g, &h, &z, &y, &lam, &s, scale);
    let obj = 0.5 * (&p.q * &z).dot(&z) + p.c.dot(&z);
    if converged || (kkt.primal <= CERT_TOL && kkt.dual <= CERT_TOL && kkt.gap <= CERT_TOL) {
        return Ok(QpSolution {
            obj,
            eq_duals: y,
            in_duals: lam.rows(0, mi_user).into_owned(),
            status: QpStatus::Optimal,
            iterations,
            kkt,
            violation: 0.0,
            z,
        });
    }

    // Not converged: decide between infeasibility and iteration failure by
    // minimizing the worst constraint violation.
    if allow_phase1 {
        let ph = phase1_violation(p)?;
        if ph > CERT_TOL * scale {
            return Ok(infeasible_solution(p, ph));
        }
    }
    Ok(QpSolution {
        obj,
        eq_duals: y,
        in_duals: lam.rows(0, mi_user).into_owned(),
        status: QpStatus::MaxIter,
        iterations,
        kkt,
        violation: 0.0,
        z,
    })
}

fn infeasible_solution(p: &QpProblem, violation: f64) -> QpSolution {
    let d = p.num_vars();
    QpSolution {
        z: DVector::zeros(d),
        obj: f64::INFINITY,
        eq_duals: DVector::zeros(p.a_eq.nrows()),
        in_duals: DVector::zeros(p.a_in.nrows()),
        status: QpStatus::Infeasible,
        iterations: 0,
        kkt: KktResiduals { primal: f64::INFINITY, dual: f64::INFINITY, gap: f64::INFINITY },
        violation,
    }
}

fn solve_equality_only(p: &QpProblem, q_eff: &DMatrix<f64>, scale: f64) -> Result<QpSolution> {
    let d = p.num_vars();
    let meq = p.a_eq.nrows();
    let mut k = DMatrix::zeros(d + meq, d + meq);
    k.view_mut((0, 0), (d, d)).copy_from(q_eff);
    if meq > 0 {
        k.view_mut((0, d), (d, meq)).copy_from(&p.a_eq.transpose());
        k.view_mut((d, 0), (meq, d)).copy_from(&p.a_eq);
        for i in 0..meq {
            k[(d + i, d + i)] = -1e-14 * scale;
        }
    }
    let mut rhs = DVector::zeros(d + meq);
    for i in 0..d {
        rhs[i] = -p.c[i];
    }
    for i in 0..meq {
        rhs[d + i] = p.b_eq[i];
    }
    let sol = nalgebra::LU::new(k)
        .solve(&rhs)
        .ok_or_else(|| Error::Solver("singular KKT system".into()))?;
    let z = sol.rows(0, d).into_owned();
    let y = sol.rows(d, meq).into_owned();
    let primal = (&p.a_eq * &z - &p.b_eq).amax_safe() / scale;
    let dual = (&p.q * &z + &p.c + p.a_eq.transpose() * &y).amax_safe() / scale;
    let obj = 0.5 * (&p.q * &z).dot(&z) + p.c.dot(&z);
    let status = if primal <= CERT_TOL && dual <= CERT_TOL {
        QpStatus::Optimal
    } else {
        QpStatus::MaxIter
    };
    Ok(QpSolution {
        z,
        obj,
        eq_duals: y,
        in_duals: DVector::zeros(0),
        status,
        iterations: 1,
        kkt: KktResiduals { primal, dual, gap: 0.0 },
        violation: 0.0,
    })
}

fn step_length(v: &DVector<f64>, dv: &DVector<f64>) -> f64 {
    let mut alpha: f64 = 1.0;
    for i in 0..v.len() {
        if dv[i] < 0.0 {
            alpha = alpha.min(-v[i] / dv[i]);
        }
    }
    alpha
}

fn certificate(
    p: &QpProblem,
    g: &SparseRows,
    h: &DVector<f64>,
    z: &DVector<f64>,
    y: &DVector<f64>,
    lam: &DVector<f64>,
    s: &DVector<f64>,
    scale: f64,
) -> KktResiduals {
    let gz = g.matvec(z);
    let primal = (&p.a_eq * z - &p.b_eq)
        .amax_safe()
        .max((0..g.nrows()).map(|r| (gz[r] - h[r]).max(0.0)).fold(0.0, f64::max));
    let dual = (&p.q * z + &p.c + p.a_eq.transpose() * y + g.tmatvec(lam)).amax_safe();
    let gap = if g.nrows() > 0 { s.dot(lam) / g.nrows() as f64 } else { 0.0 };
    KktResiduals { primal: primal / scale, dual: dual / scale, gap: gap / scale }
}

/// Minimize the worst inequality/bound violation subject to the equalities.
/// The returned value is a weak-duality lower bound on the achievable
/// violation: the relaxation optimum minus its residual slack. A positive
/// bound certifies infeasibility; a near-zero one proves nothing.
fn phase1_violation(p: &QpProblem) -> Result<f64> {
    let d = p.num_vars();
    let (g, mut h) = SparseRows::from_dense_and_bounds(&p.a_in, &p.lower, &p.upper);
    for r in 0..p.b_in.len() {
        h[r] = p.b_in[r];
    }
    let mi = g.nrows();
    let mut a_in = DMatrix::zeros(mi, d + 1);
    for (r, row) in g.rows.iter().enumerate() {
        for &(c, v) in row {
            a_in[(r, c)] = v;
        }
        a_in[(r, d)] = -1.0;
    }
    let mut a_eq = DMatrix::zeros(p.a_eq.nrows(), d + 1);
    a_eq.view_mut((0, 0), (p.a_eq.nrows(), d)).copy_from(&p.a_eq);
    let mut c = DVector::zeros(d + 1);
    c[d] = 1.0;
    let mut lower = DVector::from_element(d + 1, f64::NEG_INFINITY);
    lower[d] = 0.0;
    let relaxed = QpProblem::new(DMatrix::zeros(d + 1, d + 1), c)
        .with_eq(a_eq, p.b_eq.clone())
        .with_ineq(a_in, h)
        .with_bounds(lower, DVector::from_element(d + 1, f64::INFINITY));
    let rows = relaxed.a_in.nrows() + 1; // +1 for the bound on t
    let sol = solve_inner(&relaxed, false)?;
    match sol.status {
        QpStatus::Optimal => {
            let scale = 1.0 + relaxed.c.amax_safe().max(relaxed.b_in.amax_safe());
            let z_mass = 1.0 + sol.z.iter().map(|v| v.abs()).sum::<f64>();
            let dual_mass = 1.0
                + sol.eq_duals.iter().map(|v| v.abs()).sum::<f64>()
                + sol.in_duals.iter().map(|v| v.abs()).sum::<f64>();
            let slack = (sol.kkt.gap * rows as f64
                + sol.kkt.dual * z_mass
                + sol.kkt.primal * dual_mass)
                * scale;
            Ok((sol.z[d] - slack).max(0.0))
        }
        _ => Ok(0.0), // cannot certify
    }
}

/// Assemble the weight-update QP `min 1/2 u'Hu + b_e'u over U_r`.
pub fn u_update_problem(hessian: &DMatrix<f64>, b_e: &DVector<f64>, set: &WeightSet) -> QpProblem {
    let d = b_e.len();
    let a_eq = DMatrix::from_element(1, d, 1.0);
    let b_eq = DVector::from_element(1, 1.0);
    let (a_in, b_in) = match set.r0 {
        Some(r0) => {
            let mut a = DMatrix::zeros(1, d);
            for i in 0..d {
                a[(0, i)] = -set.mu[i];
            }
            (a, DVector::from_element(1, -r0))
        }
        None => (DMatrix::zeros(0, d), DVector::zeros(0)),
    };
    QpProblem::new(hessian.clone(), b_e.clone())
        .with_eq(a_eq, b_eq)
        .with_ineq(a_in, b_in)
        .with_bounds(DVector::zeros(d), DVector::from_element(d, f64::INFINITY))
}

/// Solve the alternating-direction weight update
/// `min 1/2 u'(s1 R'R + s2 Y'Y)u + b_e'u` over the target set.
pub fn solve_u_update(
    returns: &DMatrix<f64>,
    secondary: &DMatrix<f64>,
    sigma1: f64,
    sigma2: f64,
    b_e: &DVector<f64>,
    set: &WeightSet,
) -> Result<QpSolution> {
    if returns.ncols() != b_e.len() || secondary.ncols() != b_e.len() {
        return Err(Error::DimensionMismatch("u-update matrices vs b_e".into()));
    }
    if set.is_infeasible() {
        return Err(Error::Infeasible(
            "target return exceeds the largest expected asset return".into(),
        ));
    }
    let h = returns.transpose() * returns * sigma1 + secondary.transpose() * secondary * sigma2;
    let sol = solve_qp(&u_update_problem(&h, b_e, set))?;
    match sol.status {
        QpStatus::Optimal => Ok(sol),
        QpStatus::Infeasible => Err(Error::Infeasible(format!(
            "weight update infeasible (violation {:.3e})",
            sol.violation
        ))),
        QpStatus::MaxIter => Err(Error::Solver("weight update did not converge".into())),
    }
}

trait AmaxSafe {
    fn amax_safe(&self) -> f64;
}

impl AmaxSafe for DVector<f64> {
    /// `amax` of a possibly empty vector.
    fn amax_safe(&self) -> f64 {
        self.iter().fold(0.0f64, |a, v| a.max(v.abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn simple_lcg(state: &mut u64) -> f64 {
        *state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*state >> 11) as f64) / (1u64 << 53) as f64
    }

    #[test]
    fn projection_of_feasible_point() {
        // min ||z - (0.3, 0.7)||^2 over the simplex: the anchor is feasible.
        let q = DMatrix::identity(2, 2) * 2.0;
        let c = DVector::from_vec(vec![-0.6, -1.4]);
        let p = QpProblem::new(q, c)
            .with_eq(DMatrix::from_element(1, 2, 1.0), DVector::from_element(1, 1.0))
            .with_bounds(DVector::zeros(2), DVector::from_element(2, f64::INFINITY));
        let sol = solve_qp(&p).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_abs_diff_eq!(sol.z[0], 0.3, epsilon = 1e-7);
        assert_abs_diff_eq!(sol.z[1], 0.7, epsilon = 1e-7);
    }

    #[test]
    fn symmetric_equality_qp() {
        let q = DMatrix::identity(2, 2) * 2.0;
        let p = QpProblem::new(q, DVector::zeros(2))
            .with_eq(DMatrix::from_element(1, 2, 1.0), DVector::from_element(1, 1.0));
        let sol = solve_qp(&p).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_abs_diff_eq!(sol.z[0], 0.5, epsilon = 1e-8);
        assert_abs_diff_eq!(sol.z[1], 0.5, epsilon = 1e-8);
    }

    #[test]
    fn lp_vertex() {
        let p = QpProblem::new(DMatrix::zeros(2, 2), DVector::from_vec(vec![-1.0, 0.0]))
            .with_eq(DMatrix::from_element(1, 2, 1.0), DVector::from_element(1, 1.0))
            .with_bounds(DVector::zeros(2), DVector::from_element(2, f64::INFINITY));
        let sol = solve_qp(&p).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_abs_diff_eq!(sol.z[0], 1.0, epsilon = 1e-7);
        assert_abs_diff_eq!(sol.obj, -1.0, epsilon = 1e-8);
    }

    #[test]
    fn infeasible_bounds_detected() {
        let p = QpProblem::new(DMatrix::identity(1, 1), DVector::zeros(1))
            .with_ineq(DMatrix::from_element(1, 1, 1.0), DVector::from_element(1, -1.0))
            .with_bounds(DVector::zeros(1), DVector::from_element(1, f64::INFINITY));
        let sol = solve_qp(&p).unwrap();
        assert_eq!(sol.status, QpStatus::Infeasible);
        assert!(sol.violation > 0.4, "violation bound {}", sol.violation);
    }

    #[test]
    fn kkt_certificate_on_random_instances() {
        let mut state = 7u64;
        for _ in 0..25 {
            let d = 3 + (simple_lcg(&mut state) * 4.0) as usize;
            let a = DMatrix::from_fn(d, d, |_, _| simple_lcg(&mut state) - 0.5);
            let q = &a * a.transpose();
            let c = DVector::from_fn(d, |_, _| simple_lcg(&mut state) - 0.5);
            let p = QpProblem::new(q.clone(), c.clone())
                .with_eq(DMatrix::from_element(1, d, 1.0), DVector::from_element(1, 1.0))
                .with_bounds(DVector::zeros(d), DVector::from_element(d, f64::INFINITY));
            let sol = solve_qp(&p).unwrap();
            assert_eq!(sol.status, QpStatus::Optimal);
            assert!(sol.kkt.primal <= 1e-8 && sol.kkt.dual <= 1e-8 && sol.kkt.gap <= 1e-8);
        }
    }

    #[test]
    fn relaxing_constraints_never_hurts() {
        let mut state = 99u64;
        for _ in 0..15 {
            let d = 4;
            let a = DMatrix::from_fn(d, d, |_, _| simple_lcg(&mut state) - 0.5);
            let q = &a * a.transpose() + DMatrix::identity(d, d) * 0.1;
            let c = DVector::from_fn(d, |_, _| simple_lcg(&mut state) - 0.5);
            let a_in = DMatrix::from_fn(2, d, |_, _| simple_lcg(&mut state) - 0.5);
            let b_in = DVector::from_fn(2, |_, _| simple_lcg(&mut state) * 0.2 - 0.3);
            let with = solve_qp(
                &QpProblem::new(q.clone(), c.clone()).with_ineq(a_in.clone(), b_in.clone()),
            )
            .unwrap();
            let without = solve_qp(
                &QpProblem::new(q.clone(), c.clone())
                    .with_ineq(a_in.rows(0, 1).into_owned(), b_in.rows(0, 1).into_owned()),
            )
            .unwrap();
            if with.status == QpStatus::Optimal && without.status == QpStatus::Optimal {
                assert!(without.obj <= with.obj + 1e-7 * (1.0 + with.obj.abs()));
            }
        }
    }

    #[test]
    fn deterministic_bits() {
        let q = DMatrix::from_fn(3, 3, |i, j| if i == j { 1.0 + i as f64 } else { 0.25 });
        let c = DVector::from_vec(vec![0.3, -0.2, 0.1]);
        let p = QpProblem::new(q, c)
            .with_eq(DMatrix::from_element(1, 3, 1.0), DVector::from_element(1, 1.0))
            .with_bounds(DVector::zeros(3), DVector::from_element(3, f64::INFINITY));
        let a = solve_qp(&p).unwrap();
        let b = solve_qp(&p).unwrap();
        for i in 0..3 {
            assert_eq!(a.z[i].to_bits(), b.z[i].to_bits());
        }
    }

    #[test]
    fn u_update_infeasible_target() {
        let r = DMatrix::from_fn(3, 2, |i, j| 0.01 * (i as f64 - j as f64));
        let set = WeightSet::with_target(DVector::from_vec(vec![0.02, 0.01]), 0.03);
        let err = solve_u_update(&r, &r, 1e-3, 1e-3, &DVector::zeros(2), &set).unwrap_err();
        assert!(matches!(err, Error::Infeasible(_)));
    }

    #[test]
    fn u_update_symmetric_instance() {
        // Identity quadratic term and zero linear term: the minimum-norm
        // simplex point is the equal-weight vector when it meets the target.
        let d = 4;
        let h = DMatrix::identity(d, d);
        let set = WeightSet::with_target(DVector::from_element(d, 0.01), 0.005);
        let sol = solve_qp(&u_update_problem(&h, &DVector::zeros(d), &set)).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        for i in 0..d {
            assert_abs_diff_eq!(sol.z[i], 0.25, epsilon = 1e-7);
        }
    }

    #[test]
    fn u_update_matches_explicit_assembly_bitwise() {
        let mut state = 5u64;
        let (n, d) = (6, 3);
        let r = DMatrix::from_fn(n, d, |_, _| 0.02 * (simple_lcg(&mut state) - 0.5));
        let y = DMatrix::from_fn(n - 1, d, |_, _| 0.02 * (simple_lcg(&mut state) - 0.5));
        let b_e = DVector::from_fn(d, |_, _| simple_lcg(&mut state) - 0.5);
        let mu = DVector::from_fn(d, |_, _| 0.01 * simple_lcg(&mut state));
        let set = WeightSet::with_target(mu, 0.001);
        let via_update = solve_u_update(&r, &y, 1e-3, 2e-3, &b_e, &set).unwrap();
        let h = r.transpose() * &r * 1e-3 + y.transpose() * &y * 2e-3;
        let direct = solve_qp(&u_update_problem(&h, &b_e, &set)).unwrap();
        for i in 0..d {
            assert_eq!(via_update.z[i].to_bits(), direct.z[i].to_bits());
        }
    }
}

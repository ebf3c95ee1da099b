//! Sample risk measures over scenario loss vectors: variance, VaR, CVaR,
//! and the Basel 2, 2.5 and III capital-charge measures.
//!
//! Every measure operates on realized loss observations. VaR at level
//! `alpha` over `n` observations is the `p`-th smallest loss with
//! `p = ceil(alpha * n)`; CVaR is the matching tail average. The Basel
//! measures combine per-block VaR or CVaR over normal and stressed
//! scenario blocks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenario::LossVector;

/// Confidence levels and regulatory multipliers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskParams {
    /// VaR confidence level for Basel 2/2.5 terms, in (0, 1).
    pub alpha: f64,
    /// Multiplier on the averaged normal-scenario VaR term (>= 0).
    pub k: f64,
    /// Multiplier on the averaged stressed term (>= 0).
    pub ell: f64,
    /// CVaR confidence level for the Basel III terms, in (0, 1).
    pub alpha3: f64,
}

impl RiskParams {
    pub fn new(alpha: f64, k: f64, ell: f64, alpha3: f64) -> Result<Self> {
        let p = Self { alpha, k, ell, alpha3 };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, a) in [("alpha", self.alpha), ("alpha3", self.alpha3)] {
            if !(a > 0.0 && a < 1.0) {
                return Err(Error::InvalidParameter(format!("{name} = {a} not in (0, 1)")));
            }
        }
        for (name, v) in [("k", self.k), ("ell", self.ell)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidParameter(format!("{name} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

impl Default for RiskParams {
    /// The Basel 2.5 settings: alpha = 0.99, k = ell = 3, and the Basel III
    /// confidence level alpha3 = 0.98. Basel III experiments conventionally
    /// raise `ell` to 6.
    fn default() -> Self {
        Self { alpha: 0.99, k: 3.0, ell: 3.0, alpha3: 0.98 }
    }
}

/// Risk-measure selector for drivers and reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskMeasure {
    Variance,
    Var,
    Cvar,
    Basel25,
    Basel3,
}

/// Basel capital-charge selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselMeasure {
    Basel25,
    Basel3,
}

/// `ceil(alpha * n)` computed with a guard for `alpha * n` landing on an
/// integer up to floating-point rounding; an off-by-one here shifts every
/// order statistic downstream.
pub fn ceil_alpha_n(alpha: f64, n: usize) -> usize {
    let p = alpha_n(alpha, n).ceil() as usize;
    p.clamp(1, n)
}

/// `alpha * n` snapped to the nearest integer when within rounding slack.
pub(crate) fn alpha_n(alpha: f64, n: usize) -> f64 {
    let a = alpha * n as f64;
    let r = a.round();
    if (a - r).abs() <= 1e-9 * (n as f64).max(1.0) {
        r
    } else {
        a
    }
}

/// Indices of `x` sorted ascending by value, ties broken by original index.
/// Stable under permutation-equivalent inputs.
pub fn sorted_order(x: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&i, &j| x[i].total_cmp(&x[j]).then(i.cmp(&j)));
    idx
}

/// The `p`-th smallest entry of `x` (1-indexed).
pub fn order_stat(x: &[f64], p: usize) -> Result<f64> {
    if x.is_empty() {
        return Err(Error::EmptyInput("order_stat on empty vector".into()));
    }
    if p == 0 || p > x.len() {
        return Err(Error::InvalidParameter(format!(
            "order statistic {p} out of range 1..={}",
            x.len()
        )));
    }
    let order = sorted_order(x);
    Ok(x[order[p - 1]])
}

/// Sample variance `(1/n) x'x - (1/n^2) (1'x)^2`.
pub fn variance(x: &[f64]) -> Result<f64> {
    if x.is_empty() {
        return Err(Error::EmptyInput("variance of empty vector".into()));
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    Ok(x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidParameter(format!("alpha = {alpha} not in (0, 1)")));
    }
    Ok(())
}

/// Sample VaR: the `ceil(alpha n)`-th smallest loss.
pub fn var_at(x: &[f64], alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    let p = ceil_alpha_n(alpha, x.len().max(1));
    order_stat(x, p)
}

/// Sample CVaR: the weighted average of the losses in the upper alpha tail.
pub fn cvar_at(x: &[f64], alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if x.is_empty() {
        return Err(Error::EmptyInput("cvar of empty vector".into()));
    }
    let n = x.len();
    let nf = n as f64;
    let an = alpha_n(alpha, n);
    let p = ceil_alpha_n(alpha, n);
    let order = sorted_order(x);
    let denom = nf - an;
    let mut tail = 0.0;
    for &i in &order[p..] {
        tail += x[i];
    }
    Ok(((p as f64 - an) * x[order[p - 1]] + tail) / denom)
}

/// Per-block VaR values `x^[s]_(p_s)` with `p_s = ceil(alpha n_s)`.
fn block_vars(x: &LossVector, alpha: f64) -> Vec<f64> {
    (0..x.partition().m())
        .map(|s| {
            let block = x.block(s);
            let p = ceil_alpha_n(alpha, block.len());
            let order = sorted_order(block);
            block[order[p - 1]]
        })
        .collect()
}

/// Basel II charge: the first max-term of the Basel 2.5 measure over the
/// normal blocks only.
pub fn basel2(x: &LossVector, params: &RiskParams) -> Result<f64> {
    params.validate()?;
    let m1 = x.partition().m1();
    if m1 == 0 {
        return Err(Error::EmptyInput("basel2 requires at least one normal block".into()));
    }
    let vars = block_vars(x, params.alpha);
    let avg = vars[..m1].iter().sum::<f64>() / m1 as f64;
    Ok(vars[0].max(params.k * avg))
}

/// Basel 2.5 charge: current and averaged VaR over normal blocks plus the
/// stressed counterpart.
pub fn basel25(x: &LossVector, params: &RiskParams) -> Result<f64> {
    params.validate()?;
    let part = x.partition();
    let (m1, m2) = (part.m1(), part.m2());
    if m1 == 0 {
        return Err(Error::EmptyInput("basel25 requires at least one normal block".into()));
    }
    if m2 == 0 {
        return Err(Error::EmptyInput("basel25 requires at least one stressed block".into()));
    }
    let vars = block_vars(x, params.alpha);
    let normal_avg = vars[..m1].iter().sum::<f64>() / m1 as f64;
    let stressed_avg = vars[m1..].iter().sum::<f64>() / m2 as f64;
    Ok(vars[0].max(params.k * normal_avg) + vars[m1].max(params.ell * stressed_avg))
}

/// Basel III charge: current and averaged CVaR over the stressed blocks;
/// normal blocks do not enter.
pub fn basel3(x: &LossVector, params: &RiskParams) -> Result<f64> {
    params.validate()?;
    let part = x.partition();
    let (m1, m2) = (part.m1(), part.m2());
    if m2 == 0 {
        return Err(Error::EmptyInput("basel3 requires at least one stressed block".into()));
    }
    let cvars: Vec<f64> = (m1..part.m())
        .map(|s| cvar_at(x.block(s), params.alpha3))
        .collect::<Result<_>>()?;
    let avg = cvars.iter().sum::<f64>() / m2 as f64;
    Ok(cvars[0].max(params.ell * avg))
}

/// Evaluate the selected measure on a loss vector. The scalar measures see
/// the stacked losses as one sample; the Basel measures use the partition.
pub fn evaluate(rho: RiskMeasure, x: &LossVector, params: &RiskParams) -> Result<f64> {
    match rho {
        RiskMeasure::Variance => variance(x.values().as_slice()),
        RiskMeasure::Var => var_at(x.values().as_slice(), params.alpha),
        RiskMeasure::Cvar => cvar_at(x.values().as_slice(), params.alpha),
        RiskMeasure::Basel25 => basel25(x, params),
        RiskMeasure::Basel3 => basel3(x, params),
    }
}

/// Evaluate the selected Basel measure.
pub fn evaluate_basel(basel: BaselMeasure, x: &LossVector, params: &RiskParams) -> Result<f64> {
    match basel {
        BaselMeasure::Basel25 => basel25(x, params),
        BaselMeasure::Basel3 => basel3(x, params),
    }
}

/// Gradient of the sample variance.
pub fn variance_gradient(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::EmptyInput("variance gradient of empty vector".into()));
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    Ok(x.iter().map(|v| 2.0 * (v - mean) / n).collect())
}

/// A subgradient of the sample VaR: the indicator of the order statistic
/// selected by the stable sort.
pub fn var_subgradient(x: &[f64], alpha: f64) -> Result<Vec<f64>> {
    check_alpha(alpha)?;
    if x.is_empty() {
        return Err(Error::EmptyInput("var subgradient of empty vector".into()));
    }
    let p = ceil_alpha_n(alpha, x.len());
    let order = sorted_order(x);
    let mut g = vec![0.0; x.len()];
    g[order[p - 1]] = 1.0;
    Ok(g)
}

/// A subgradient of the sample CVaR: the tail weights under the stable-sort
/// selection.
pub fn cvar_subgradient(x: &[f64], alpha: f64) -> Result<Vec<f64>> {
    check_alpha(alpha)?;
    if x.is_empty() {
        return Err(Error::EmptyInput("cvar subgradient of empty vector".into()));
    }
    let n = x.len();
    let nf = n as f64;
    let an = alpha_n(alpha, n);
    let p = ceil_alpha_n(alpha, n);
    let order = sorted_order(x);
    let denom = nf - an;
    let mut g = vec![0.0; n];
    g[order[p - 1]] = (p as f64 - an) / denom;
    for &i in &order[p..] {
        g[i] = 1.0 / denom;
    }
    Ok(g)
}

/// A subgradient of the selected measure with the stable-sort selection;
/// for the Basel measures, ties between the max terms resolve to the
/// averaged term.
pub fn rho_subgradient(rho: RiskMeasure, x: &LossVector, params: &RiskParams) -> Result<Vec<f64>> {
    let values = x.values().as_slice();
    match rho {
        RiskMeasure::Variance => variance_gradient(values),
        RiskMeasure::Var => var_subgradient(values, params.alpha),
        RiskMeasure::Cvar => cvar_subgradient(values, params.alpha),
        RiskMeasure::Basel25 => basel25_subgradient(x, params),
        RiskMeasure::Basel3 => basel3_subgradient(x, params),
    }
}

pub fn basel25_subgradient(x: &LossVector, params: &RiskParams) -> Result<Vec<f64>> {
    basel25(x, params)?;
    let part = x.partition();
    let (m1, m2, m) = (part.m1(), part.m2(), part.m());
    let vars = block_vars(x, params.alpha);
    let mut g = vec![0.0; part.n()];
    let mut add_block_var = |g: &mut Vec<f64>, s: usize, scale: f64| {
        let block = x.block(s);
        let p = ceil_alpha_n(params.alpha, block.len());
        let order = sorted_order(block);
        g[part.range(s).start + order[p - 1]] += scale;
    };
    let normal_avg = vars[..m1].iter().sum::<f64>() / m1 as f64;
    if vars[0] > params.k * normal_avg {
        add_block_var(&mut g, 0, 1.0);
    } else {
        for s in 0..m1 {
            add_block_var(&mut g, s, params.k / m1 as f64);
        }
    }
    let stressed_avg = vars[m1..].iter().sum::<f64>() / m2 as f64;
    if vars[m1] > params.ell * stressed_avg {
        add_block_var(&mut g, m1, 1.0);
    } else {
        for s in m1..m {
            add_block_var(&mut g, s, params.ell / m2 as f64);
        }
    }
    Ok(g)
}

pub fn basel3_subgradient(x: &LossVector, params: &RiskParams) -> Result<Vec<f64>> {
    basel3(x, params)?;
    let part = x.partition();
    let (m1, m2, m) = (part.m1(), part.m2(), part.m());
    let cvars: Vec<f64> = (m1..m)
        .map(|s| cvar_at(x.block(s), params.alpha3))
        .collect::<Result<_>>()?;
    let mut g = vec![0.0; part.n()];
    let mut add_block_cvar = |g: &mut Vec<f64>, s: usize, scale: f64| -> Result<()> {
        let block = x.block(s);
        let sub = cvar_subgradient(block, params.alpha3)?;
        let start = part.range(s).start;
        for (i, v) in sub.iter().enumerate() {
            g[start + i] += scale * v;
        }
        Ok(())
    };
    let avg = cvars.iter().sum::<f64>() / m2 as f64;
    if cvars[0] > params.ell * avg {
        add_block_cvar(&mut g, m1, 1.0)?;
    } else {
        for s in m1..m {
            add_block_cvar(&mut g, s, params.ell / m2 as f64)?;
        }
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::Partition;
    use approx::assert_abs_diff_eq;
    use nalgebra::DVector;
    use proptest::prelude::*;

    fn loss(values: Vec<f64>, sizes: Vec<usize>, m1: usize) -> LossVector {
        LossVector::new(DVector::from_vec(values), Partition::new(sizes, m1).unwrap()).unwrap()
    }

    #[test]
    fn ceil_alpha_n_boundaries() {
        assert_eq!(ceil_alpha_n(0.8, 5), 4); // 0.8 * 5 is exactly 4
        assert_eq!(ceil_alpha_n(0.99, 100), 99);
        assert_eq!(ceil_alpha_n(0.6, 2), 2); // 1.2 -> 2
        assert_eq!(ceil_alpha_n(0.5, 2), 1);
        assert_eq!(ceil_alpha_n(0.99, 5), 5);
        assert_eq!(ceil_alpha_n(0.01, 3), 1);
        // 0.7 * 10 = 7 exactly in decimal, but 0.7 has no exact binary form.
        assert_eq!(ceil_alpha_n(0.7, 10), 7);
        assert_eq!(ceil_alpha_n(0.3, 10), 3);
    }

    #[test]
    fn order_stat_examples() {
        assert_abs_diff_eq!(order_stat(&[5.0, 1.0, 3.0], 2).unwrap(), 3.0);
        assert_abs_diff_eq!(order_stat(&[2.5, 2.5, 2.5], 2).unwrap(), 2.5);
        assert_abs_diff_eq!(order_stat(&[1.0, 2.0], 2).unwrap(), 2.0);
        assert!(order_stat(&[1.0], 2).is_err());
        assert!(order_stat(&[], 1).is_err());
    }

    #[test]
    fn variance_examples() {
        assert_abs_diff_eq!(variance(&[1.0, 2.0, 3.0]).unwrap(), 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(variance(&[4.2, 4.2, 4.2]).unwrap(), 0.0, epsilon = 1e-15);
        let a = 1.75;
        assert_abs_diff_eq!(variance(&[-a, a]).unwrap(), a * a, epsilon = 1e-15);
        assert!(variance(&[]).is_err());
    }

    #[test]
    fn var_examples() {
        assert_abs_diff_eq!(var_at(&[5.0, 1.0, 3.0, 2.0, 4.0], 0.8).unwrap(), 4.0);
        assert_abs_diff_eq!(var_at(&[7.0, 7.0, 7.0], 0.5).unwrap(), 7.0);
        let x: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        assert_abs_diff_eq!(var_at(&x, 0.99).unwrap(), 99.0);
    }

    #[test]
    fn cvar_examples() {
        assert_abs_diff_eq!(cvar_at(&[1.0, 2.0, 3.0, 4.0, 5.0], 0.8).unwrap(), 5.0, epsilon = 1e-12);
        assert_abs_diff_eq!(cvar_at(&[3.3, 3.3], 0.37).unwrap(), 3.3, epsilon = 1e-12);
        assert_abs_diff_eq!(cvar_at(&[-1.0, 4.0], 0.5).unwrap(), 4.0, epsilon = 1e-12);
        assert!(cvar_at(&[1.0], 1.0).is_err());
    }

    #[test]
    fn basel2_examples() {
        let p = RiskParams::new(0.8, 3.0, 3.0, 0.98).unwrap();
        let x = loss(vec![1.0, 2.0, 3.0, 4.0, 5.0], vec![5], 1);
        assert_abs_diff_eq!(basel2(&x, &p).unwrap(), 12.0, epsilon = 1e-12);

        let p1 = RiskParams::new(0.8, 1.0, 1.0, 0.98).unwrap();
        assert_abs_diff_eq!(
            basel2(&x, &p1).unwrap(),
            var_at(x.values().as_slice(), 0.8).unwrap(),
            epsilon = 1e-12
        );

        let zero = loss(vec![0.0; 4], vec![4], 1);
        assert_abs_diff_eq!(basel2(&zero, &p).unwrap(), 0.0);
    }

    #[test]
    fn basel25_examples() {
        let p = RiskParams::new(0.8, 3.0, 3.0, 0.98).unwrap();
        let x = loss(
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 1.0, 2.0, 3.0, 4.0, 5.0],
            vec![5, 5],
            1,
        );
        assert_abs_diff_eq!(basel25(&x, &p).unwrap(), 24.0, epsilon = 1e-12);

        let zero = loss(vec![0.0; 6], vec![3, 3], 1);
        assert_abs_diff_eq!(basel25(&zero, &p).unwrap(), 0.0);

        // k = ell = 1 with single blocks: the max terms coincide with each
        // block's VaR, so the charge is the sum of the block maxima here.
        let p1 = RiskParams::new(0.9, 1.0, 1.0, 0.98).unwrap();
        let x = loss(vec![0.5, 2.0, 1.0, 3.5], vec![2, 2], 1);
        assert_abs_diff_eq!(basel25(&x, &p1).unwrap(), 2.0 + 3.5, epsilon = 1e-12);
    }

    #[test]
    fn basel3_examples() {
        let p = RiskParams::new(0.99, 3.0, 6.0, 0.8).unwrap();
        let x = loss(vec![9.0, 1.0, 2.0, 3.0, 4.0, 5.0], vec![1, 5], 1);
        assert_abs_diff_eq!(basel3(&x, &p).unwrap(), 30.0, epsilon = 1e-12);

        let zero = loss(vec![7.0, 0.0, 0.0], vec![1, 2], 1);
        assert_abs_diff_eq!(basel3(&zero, &p).unwrap(), 0.0);

        let p1 = RiskParams::new(0.99, 3.0, 1.0, 0.8).unwrap();
        let single = loss(vec![1.0, 2.0, 3.0, 4.0, 5.0], vec![5], 0);
        assert_abs_diff_eq!(
            basel3(&single, &p1).unwrap(),
            cvar_at(single.values().as_slice(), 0.8).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn basel_block_requirements() {
        let p = RiskParams::default();
        let no_stressed = loss(vec![1.0, 2.0], vec![2], 1);
        assert!(basel25(&no_stressed, &p).is_err());
        assert!(basel3(&no_stressed, &p).is_err());
        let no_normal = loss(vec![1.0, 2.0], vec![2], 0);
        assert!(basel2(&no_normal, &p).is_err());
        assert!(basel25(&no_normal, &p).is_err());
    }

    /// CVaR via its minimization representation, with the minimizer search
    /// over the sample points themselves.
    fn cvar_dual(x: &[f64], alpha: f64) -> f64 {
        let n = x.len() as f64;
        x.iter()
            .map(|&t| t + x.iter().map(|&v| (v - t).max(0.0)).sum::<f64>() / ((1.0 - alpha) * n))
            .fold(f64::INFINITY, f64::min)
    }

    proptest! {
        #[test]
        fn cvar_matches_dual_representation(
            x in proptest::collection::vec(-100.0f64..100.0, 1..40),
            alpha in 0.01f64..0.99,
        ) {
            let direct = cvar_at(&x, alpha).unwrap();
            let dual = cvar_dual(&x, alpha);
            prop_assert!((direct - dual).abs() <= 1e-10 * (1.0 + direct.abs()));
        }

        #[test]
        fn cvar_dominates_var(
            x in proptest::collection::vec(-50.0f64..50.0, 1..30),
            alpha in 0.01f64..0.99,
        ) {
            prop_assert!(cvar_at(&x, alpha).unwrap() >= var_at(&x, alpha).unwrap() - 1e-12);
        }

        #[test]
        fn var_cvar_monotone(
            x in proptest::collection::vec(-10.0f64..10.0, 1..20),
            bumps in proptest::collection::vec(0.0f64..5.0, 1..20),
            alpha in 0.05f64..0.95,
        ) {
            let y: Vec<f64> = x.iter().zip(bumps.iter().cycle()).map(|(a, b)| a + b).collect();
            prop_assert!(var_at(&x, alpha).unwrap() <= var_at(&y, alpha).unwrap() + 1e-12);
            prop_assert!(cvar_at(&x, alpha).unwrap() <= cvar_at(&y, alpha).unwrap() + 1e-12);
        }

        #[test]
        fn var_cvar_scale_translate(
            x in proptest::collection::vec(-10.0f64..10.0, 1..20),
            c in 0.1f64..5.0,
            b in -3.0f64..3.0,
            alpha in 0.05f64..0.95,
        ) {
            let y: Vec<f64> = x.iter().map(|v| c * v + b).collect();
            let tol = 1e-10;
            prop_assert!((var_at(&y, alpha).unwrap() - (c * var_at(&x, alpha).unwrap() + b)).abs() <= tol);
            prop_assert!((cvar_at(&y, alpha).unwrap() - (c * cvar_at(&x, alpha).unwrap() + b)).abs() <= tol);
        }

        #[test]
        fn basel_monotone(
            x in proptest::collection::vec(-10.0f64..10.0, 6..12),
            bumps in proptest::collection::vec(0.0f64..5.0, 6..12),
        ) {
            let n = x.len();
            let n1 = n / 2;
            let params = RiskParams::new(0.8, 3.0, 3.0, 0.7).unwrap();
            let y: Vec<f64> = x.iter().zip(bumps.iter().cycle()).map(|(a, b)| a + b).collect();
            let lx = loss(x, vec![n1, n - n1], 1);
            let ly = loss(y, vec![n1, n - n1], 1);
            prop_assert!(basel25(&lx, &params).unwrap() <= basel25(&ly, &params).unwrap() + 1e-12);
            prop_assert!(basel3(&lx, &params).unwrap() <= basel3(&ly, &params).unwrap() + 1e-12);
        }

        #[test]
        fn sorted_order_permutation_stable(
            x in proptest::collection::vec(-5.0f64..5.0, 1..15),
            p_seed in 0usize..1000,
        ) {
            // Order statistics agree between a vector and any permutation.
            let n = x.len();
            let mut perm: Vec<usize> = (0..n).collect();
            let mut s = p_seed;
            for i in (1..n).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1);
                perm.swap(i, s % (i + 1));
            }
            let y: Vec<f64> = perm.iter().map(|&i| x[i]).collect();
            for p in 1..=n {
                prop_assert_eq!(
                    order_stat(&x, p).unwrap().to_bits(),
                    order_stat(&y, p).unwrap().to_bits()
                );
            }
        }
    }
}

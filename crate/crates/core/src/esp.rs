//! Tensor-free evaluation primitives.
//!
//! Inner products of off-diagonally projected rank-1 tensors reduce to
//! elementary symmetric polynomials (ESPs) of entrywise products,
//! `<P(v^d), P(a^d)> = d! e_d(v * a)`, and ESPs are computed from power sums by
//! the Newton-Girard recursion. The power sums of every pair of columns are the
//! entries of the Gram caches `G_s^{A,A} = (A^{*s})^T A^{*s}` and
//! `G_s^{A,V} = (A^{*s})^T V^{*s}`, so normal equations for the weight and
//! row updates are assembled without any `n^d`-sized intermediate.

use crate::budget;
use crate::error::{MomError, Result};
use crate::MAX_ORDER;
use nalgebra::{DMatrix, DVector};

/// Entrywise powers `m^{*1}, ..., m^{*d}` by repeated multiplication.
pub fn entrywise_powers(m: &DMatrix<f64>, d: usize) -> Vec<DMatrix<f64>> {
    let mut out: Vec<DMatrix<f64>> = Vec::with_capacity(d);
    for s in 0..d {
        let next = match out.last() {
            None => m.clone(),
            Some(prev) => prev.component_mul(m),
        };
        budget::record(next.len());
        debug_assert_eq!(out.len(), s);
        out.push(next);
    }
    out
}

/// Entrywise powers of a data matrix, `V^{*s}` for `s = 1..=d`.
#[derive(Debug, Clone)]
pub struct DataPowers {
    powers: Vec<DMatrix<f64>>,
}

impl DataPowers {
    pub fn new(v: &DMatrix<f64>, d: usize) -> Self {
        Self {
            powers: entrywise_powers(v, d),
        }
    }

    pub fn order(&self) -> usize {
        self.powers.len()
    }

    /// `V^{*s}` (1-based `s`).
    pub fn power(&self, s: usize) -> &DMatrix<f64> {
        &self.powers[s - 1]
    }

    pub fn nrows(&self) -> usize {
        self.powers.first().map_or(0, DMatrix::nrows)
    }

    pub fn ncols(&self) -> usize {
        self.powers.first().map_or(0, DMatrix::ncols)
    }
}

/// Gram caches `G_s^{A,A}` (r x r) and `G_s^{A,V}` (r x p) for `s = 1..=d`.
#[derive(Debug, Clone, PartialEq)]
pub struct GramCache {
    gaa: Vec<DMatrix<f64>>,
    gav: Vec<DMatrix<f64>>,
}

impl GramCache {
    pub fn order(&self) -> usize {
        self.gaa.len()
    }

    pub fn rank(&self) -> usize {
        self.gaa.first().map_or(0, DMatrix::nrows)
    }

    pub fn samples(&self) -> usize {
        self.gav.first().map_or(0, DMatrix::ncols)
    }

    /// `G_s^{A,A}` (1-based `s`).
    pub fn gaa(&self, s: usize) -> &DMatrix<f64> {
        &self.gaa[s - 1]
    }

    /// `G_s^{A,V}` (1-based `s`).
    pub fn gav(&self, s: usize) -> &DMatrix<f64> {
        &self.gav[s - 1]
    }

    /// Build the caches from precomputed data powers.
    pub fn from_powers(a: &DMatrix<f64>, data: &DataPowers) -> Result<Self> {
        let d = data.order();
        if a.nrows() != data.nrows() {
            return Err(MomError::InvalidArgument(format!(
                "means have {} rows but data has {}",
                a.nrows(),
                data.nrows()
            )));
        }
        let mut gaa = Vec::with_capacity(d);
        let mut gav = Vec::with_capacity(d);
        for (s, a_pow) in entrywise_powers(a, d).into_iter().enumerate() {
            let at = a_pow.transpose();
            gaa.push(&at * &a_pow);
            let g = &at * data.power(s + 1);
            budget::record(g.len());
            gav.push(g);
        }
        Ok(Self { gaa, gav })
    }

    /// Remove the contribution of the given rows of `A` (and matching data rows).
    pub fn deflate(&mut self, a: &DMatrix<f64>, data: &DataPowers, rows: &[usize]) {
        self.rank_update(a, data, rows, -1.0);
    }

    /// Add back the contribution of the given rows of `A`.
    pub fn restore(&mut self, a: &DMatrix<f64>, data: &DataPowers, rows: &[usize]) {
        self.rank_update(a, data, rows, 1.0);
    }

    fn rank_update(&mut self, a: &DMatrix<f64>, data: &DataPowers, rows: &[usize], sign: f64) {
        let r = a.ncols();
        let mut x = vec![0.0; r];
        for &k in rows {
            x.iter_mut().for_each(|xi| *xi = 1.0);
            for s in 1..=self.order() {
                for (j, xj) in x.iter_mut().enumerate() {
                    *xj *= a[(k, j)];
                }
                let gaa = &mut self.gaa[s - 1];
                for j in 0..r {
                    for i in 0..r {
                        gaa[(i, j)] += sign * x[i] * x[j];
                    }
                }
                let vrow = data.power(s).row(k);
                let gav = &mut self.gav[s - 1];
                for (l, &v) in vrow.iter().enumerate() {
                    for i in 0..r {
                        gav[(i, l)] += sign * x[i] * v;
                    }
                }
            }
        }
    }
}

/// Build `G_s^{A,A}` and `G_s^{A,V}` for `s = 1..=d`.
pub fn build_gram_cache(a: &DMatrix<f64>, v: &DMatrix<f64>, d: usize) -> Result<GramCache> {
    if d == 0 {
        return Err(MomError::InvalidArgument("order must be at least 1".into()));
    }
    if a.nrows() != v.nrows() {
        return Err(MomError::InvalidArgument(format!(
            "means have {} rows but data has {}",
            a.nrows(),
            v.nrows()
        )));
    }
    GramCache::from_powers(a, &DataPowers::new(v, d))
}

/// Newton-Girard: elementary symmetric polynomials `e_1..e_d` from power sums `p_1..p_d`.
pub fn esp_from_power_sums(power_sums: &[f64]) -> Vec<f64> {
    let d = power_sums.len();
    let mut e = vec![1.0; d + 1];
    for i in 1..=d {
        let mut acc = 0.0;
        for s in 1..=i {
            let sign = if s % 2 == 1 { 1.0 } else { -1.0 };
            acc += sign * e[i - s] * power_sums[s - 1];
        }
        e[i] = acc / i as f64;
    }
    e.split_off(1)
}

/// Order weights `tau_1..tau_d` of the mixed-order cost.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparams {
    tau: Vec<f64>,
}

impl Hyperparams {
    pub fn new(tau: Vec<f64>) -> Result<Self> {
        let d = tau.len();
        if d < 2 {
            return Err(MomError::InvalidArgument(format!(
                "need tau for at least two orders, got {d}"
            )));
        }
        if d > MAX_ORDER {
            return Err(MomError::UnsupportedOrder(d));
        }
        if tau.iter().any(|t| !t.is_finite() || *t < 0.0) {
            return Err(MomError::InvalidArgument(
                "tau entries must be finite and nonnegative".into(),
            ));
        }
        if tau.iter().filter(|t| **t > 0.0).count() < 2 {
            return Err(MomError::InvalidArgument(
                "at least two orders need a positive tau".into(),
            ));
        }
        Ok(Self { tau })
    }

    /// `tau_i = (n - i)! / n!`, i.e. one over the number of ordered
    /// distinct-index tuples of length `i`; zero when `i > n`.
    pub fn default_for(n: usize, d: usize) -> Result<Self> {
        Self::new(default_tau(n, d))
    }

    pub fn order(&self) -> usize {
        self.tau.len()
    }

    pub fn tau(&self) -> &[f64] {
        &self.tau
    }

    /// Copy with `tau_i` (1-based) set to zero. Skips validation.
    pub fn without(&self, i: usize) -> Self {
        let mut tau = self.tau.clone();
        tau[i - 1] = 0.0;
        Self { tau }
    }
}

pub fn default_tau(n: usize, d: usize) -> Vec<f64> {
    let mut tau = Vec::with_capacity(d);
    let mut acc = 1.0;
    for i in 1..=d {
        if i > n {
            acc = 0.0;
        } else {
            acc /= (n - i + 1) as f64;
        }
        tau.push(acc);
    }
    tau
}

/// `i! * tau_i` for `i = 1..=d`, as running products.
pub fn order_coefficients(tau: &[f64], d: usize) -> Vec<f64> {
    let mut fact = 1.0;
    (1..=d)
        .map(|i| {
            fact *= i as f64;
            fact * tau[i - 1]
        })
        .collect()
}

/// Normal equation `L x = rhs` of a weighted least-squares update.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalEquation {
    pub lhs: DMatrix<f64>,
    pub rhs: DMatrix<f64>,
}

/// Newton-Girard recursion over Gram matrices: `E_i = (1/i) sum_s (-1)^{s-1} E_{i-s} * G_s`.
/// Returns `E_1..E_d` (`E_0` is all ones and not stored).
fn esp_levels(gram: &[DMatrix<f64>], d: usize) -> Vec<DMatrix<f64>> {
    let (rows, cols) = gram[0].shape();
    let mut levels: Vec<DMatrix<f64>> = Vec::with_capacity(d);
    for i in 1..=d {
        let mut e = budget::scratch(rows, cols);
        for s in 1..=i {
            let sign = if s % 2 == 1 { 1.0 } else { -1.0 };
            let g = &gram[s - 1];
            if i == s {
                e.zip_apply(g, |acc, gv| *acc += sign * gv);
            } else {
                let prev = &levels[i - s - 1];
                for ((acc, &pv), &gv) in e.iter_mut().zip(prev.iter()).zip(g.iter()) {
                    *acc += sign * pv * gv;
                }
            }
        }
        e /= i as f64;
        levels.push(e);
    }
    levels
}

/// Weighted sum `sum_i i! tau_i E_i` over the ESP levels of `gram`.
fn weighted_esp(gram: &[DMatrix<f64>], d: usize, tau: &[f64]) -> DMatrix<f64> {
    let coeffs = order_coefficients(tau, d);
    let levels = esp_levels(gram, d);
    let (rows, cols) = gram[0].shape();
    let mut out = budget::scratch(rows, cols);
    for (c, e) in coeffs.iter().zip(&levels) {
        if *c != 0.0 {
            out.zip_apply(e, |acc, ev| *acc += c * ev);
        }
    }
    out
}

fn check_prep_args(cache: &GramCache, pi_rows: usize, d: usize, tau: &[f64]) -> Result<()> {
    if d == 0 || d > cache.order() {
        return Err(MomError::InvalidArgument(format!(
            "order {d} not available in a cache of order {}",
            cache.order()
        )));
    }
    if tau.len() < d {
        return Err(MomError::InvalidArgument(format!(
            "{} tau values supplied for order {d}",
            tau.len()
        )));
    }
    if pi_rows != cache.samples() {
        return Err(MomError::InvalidArgument(format!(
            "scaling has {pi_rows} entries but the cache has {} samples",
            cache.samples()
        )));
    }
    Ok(())
}

/// Assemble the normal equation of the weighted least squares
/// `min_w sum_i tau_i ||P(sum_l pi_l v_l^{(i)} - sum_j w_j a_j^{(i)})||^2`.
///
/// `pi` is p x k; each column gives one right-hand side (k > 1 for blocked solves).
pub fn prep_norm_eqn(
    cache: &GramCache,
    pi: &DMatrix<f64>,
    d: usize,
    tau: &[f64],
) -> Result<NormalEquation> {
    check_prep_args(cache, pi.nrows(), d, tau)?;
    let lhs = weighted_esp(&cache.gaa, d, tau);
    let sav = weighted_esp(&cache.gav, d, tau);
    let rhs = &sav * pi;
    Ok(NormalEquation { lhs, rhs })
}

/// `sum_i i! tau_i w^T E_i^{A,A} w - 2 w^T (sum_i i! tau_i E_i^{A,V}) pi`:
/// the mixed-order cost without its data-only constant.
pub fn implicit_cost_esp(
    cache: &GramCache,
    w: &DVector<f64>,
    pi: &DVector<f64>,
    d: usize,
    tau: &[f64],
) -> Result<f64> {
    let pi_m = DMatrix::from_column_slice(pi.len(), 1, pi.as_slice());
    let ne = prep_norm_eqn(cache, &pi_m, d, tau)?;
    let quad = w.dot(&(&ne.lhs * w));
    let lin = w.dot(&ne.rhs.column(0));
    Ok(quad - 2.0 * lin)
}

//! Componentwise expectations `E_j[g(X)]` of an entrywise function `g`, given
//! fitted weights and means.
//!
//! Row `k` of the result solves the same least-squares problem as a mean row
//! update, with data row `k` replaced by the centered and normalized `g_k` of
//! it. The remaining tensor factors are the other coordinates of the data, so
//! the Gram cache of the means solve is reused unchanged.

use crate::als::{binomial, deflated_system, divide_by_weights, MixtureEstimate, Problem, WEIGHT_GUARD};
use crate::error::{MomError, Result};
use crate::linalg::spd_solve;
use crate::qp::{solve_bounded_qp, DEFAULT_TOL};
use crate::DataMatrix;
use nalgebra::{DMatrix, DVector};
use std::fmt;
use std::sync::Arc;

/// Default entrywise floor on the implied variance `m^2 - a^2`.
pub const DEFAULT_VARIANCE_FLOOR: f64 = 1e-4;

/// A scalar map applied to one coordinate.
#[derive(Clone)]
pub enum ScalarMap {
    Identity,
    Power(i32),
    Log,
    /// `1` where `x > threshold`, else `0`.
    Indicator(f64),
    Custom(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl fmt::Debug for ScalarMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Identity => write!(f, "identity"),
            Self::Power(s) => write!(f, "power:{s}"),
            Self::Log => write!(f, "log"),
            Self::Indicator(t) => write!(f, "indicator:{t}"),
            Self::Custom(_) => write!(f, "custom"),
        }
    }
}

impl ScalarMap {
    /// Parse a named transform: `identity`, `square`, `cube`, `power:<s>`,
    /// `log`, or `indicator:<threshold>`.
    pub fn parse(name: &str) -> Result<Self> {
        let bad = || MomError::InvalidArgument(format!("unknown entrywise function {name:?}"));
        let (head, arg) = match name.split_once(':') {
            Some((h, a)) => (h.trim(), Some(a.trim())),
            None => (name.trim(), None),
        };
        match (head, arg) {
            ("identity", None) => Ok(Self::Identity),
            ("square", None) => Ok(Self::Power(2)),
            ("cube", None) => Ok(Self::Power(3)),
            ("log", None) => Ok(Self::Log),
            ("power", Some(s)) => s.parse().map(Self::Power).map_err(|_| bad()),
            ("indicator", Some(t)) => t.parse().map(Self::Indicator).map_err(|_| bad()),
            _ => Err(bad()),
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        match self {
            Self::Identity => x,
            Self::Power(s) => x.powi(*s),
            Self::Log => x.ln(),
            Self::Indicator(t) => f64::from(u8::from(x > *t)),
            Self::Custom(f) => f(x),
        }
    }
}

/// `g(x) = (g_1(x_1), ..., g_n(x_n))`.
#[derive(Debug, Clone)]
pub struct EntrywiseFunction {
    maps: Vec<ScalarMap>,
}

impl EntrywiseFunction {
    pub fn new(maps: Vec<ScalarMap>) -> Self {
        Self { maps }
    }

    pub fn uniform(map: ScalarMap, n: usize) -> Self {
        Self { maps: vec![map; n] }
    }

    pub fn identity(n: usize) -> Self {
        Self::uniform(ScalarMap::Identity, n)
    }

    pub fn power(s: i32, n: usize) -> Self {
        Self::uniform(ScalarMap::Power(s), n)
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn maps(&self) -> &[ScalarMap] {
        &self.maps
    }

    /// Apply to every column of `v` (n x p).
    pub fn apply(&self, v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if v.nrows() != self.maps.len() {
            return Err(MomError::InvalidArgument(format!(
                "function has {} coordinates but the data has {}",
                self.maps.len(),
                v.nrows()
            )));
        }
        let out = DMatrix::from_fn(v.nrows(), v.ncols(), |k, l| self.maps[k].eval(v[(k, l)]));
        if let Some(k) = (0..out.nrows()).find(|&k| out.row(k).iter().any(|x| !x.is_finite())) {
            return Err(MomError::InvalidArgument(format!(
                "{:?} produced a non-finite value on coordinate {k}",
                self.maps[k]
            )));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RowDiagnostic {
    /// `||L beta - rhs|| / max(||rhs||, 1)` of the row system.
    pub residual: f64,
    /// Number of lower bounds active at the solution (floored solves only).
    pub active_bounds: usize,
}

#[derive(Debug, Clone)]
pub struct GeneralMeansResult {
    /// n x r; column `j` is `E_j[g(X)]` in the units of `g`.
    pub y: DMatrix<f64>,
    pub rows: Vec<RowDiagnostic>,
    pub warnings: Vec<String>,
}

/// Warn when the higher-moment systems may be rank deficient:
/// `r > binom(n - 1, d - 1)`.
pub fn uniqueness_warning(n: usize, r: usize, d: usize) -> Option<String> {
    let bound = binomial(n.saturating_sub(1), d.saturating_sub(1));
    (r as u128 > bound).then(|| {
        format!("rank r = {r} exceeds binom(n-1, d-1) = {bound}; general means may not be unique")
    })
}

struct Prepared {
    weights: DVector<f64>,
    means: DMatrix<f64>,
    transformed: DataMatrix,
    warnings: Vec<String>,
}

fn prepare(g: &EntrywiseFunction, problem: &Problem, estimate: &MixtureEstimate) -> Result<Prepared> {
    let est = problem.data.to_frame(estimate);
    let (n, r) = est.means.shape();
    if n != problem.n() || est.weights.len() != r {
        return Err(MomError::InvalidArgument(format!(
            "estimate is {n}x{r} with {} weights; data has {} coordinates",
            est.weights.len(),
            problem.n()
        )));
    }
    if let Some((index, &value)) = est.weights.iter().enumerate().find(|(_, x)| **x < WEIGHT_GUARD) {
        return Err(MomError::GuardedDivision { index, value });
    }
    let transformed = DataMatrix::preprocess(g.apply(problem.data.raw())?)?;
    let warnings: Vec<String> = uniqueness_warning(n, r, problem.order()).into_iter().collect();
    warnings.iter().for_each(|w| log::warn!("{w}"));
    Ok(Prepared {
        weights: est.weights,
        means: est.means,
        transformed,
        warnings,
    })
}

/// Row `k`'s normal equation with data row `k` replaced by `vg_row`.
fn row_system(
    problem: &Problem,
    cache: &mut crate::GramCache,
    a: &DMatrix<f64>,
    k: usize,
    vg_row: &DMatrix<f64>,
) -> Result<crate::NormalEquation> {
    cache.deflate(a, &problem.powers, &[k]);
    let ne = deflated_system(cache, vg_row, &[0.0], problem.order(), problem.hyper.tau());
    cache.restore(a, &problem.powers, &[k]);
    ne
}

fn relative_residual(ne: &crate::NormalEquation, beta: &DVector<f64>) -> f64 {
    let rhs = ne.rhs.column(0);
    (&ne.lhs * beta - rhs).norm() / rhs.norm().max(1.0)
}

/// `E_j[g(X)]` for every component `j`, given `(w, A)` fitted on `problem`.
pub fn solve_general_mean(
    g: &EntrywiseFunction,
    problem: &Problem,
    estimate: &MixtureEstimate,
) -> Result<GeneralMeansResult> {
    let prep = prepare(g, problem, estimate)?;
    let (n, r) = prep.means.shape();
    let p = problem.p() as f64;
    let mut cache = problem.cache(&prep.means)?;
    let vg = prep.transformed.values();
    let mut y = DMatrix::zeros(n, r);
    let mut rows = Vec::with_capacity(n);
    for k in 0..n {
        let pi = DMatrix::from_fn(vg.ncols(), 1, |l, _| vg[(k, l)] / p);
        let ne = row_system(problem, &mut cache, &prep.means, k, &pi)?;
        let beta = spd_solve(&ne.lhs, &ne.rhs)?;
        let yk = divide_by_weights(&beta, &prep.weights)?;
        rows.push(RowDiagnostic {
            residual: relative_residual(&ne, &beta.column(0).into_owned()),
            active_bounds: 0,
        });
        let (center, scale) = (prep.transformed.center()[k], prep.transformed.scale()[k]);
        for j in 0..r {
            y[(k, j)] = yk[(j, 0)] * scale + center;
        }
    }
    Ok(GeneralMeansResult {
        y,
        rows,
        warnings: prep.warnings,
    })
}

/// Second moments `E_j[X^2]` with the entrywise constraint
/// `m2_jk >= a_jk^2 + floor`, where `a` are the raw-frame means.
pub fn solve_second_moment_floored(
    problem: &Problem,
    estimate: &MixtureEstimate,
    floor: f64,
) -> Result<GeneralMeansResult> {
    if !(floor >= 0.0) {
        return Err(MomError::InvalidArgument(format!("variance floor must be >= 0, got {floor}")));
    }
    let g = EntrywiseFunction::power(2, problem.n());
    let prep = prepare(&g, problem, estimate)?;
    let raw_means = problem.data.means_from_frame(&prep.means);
    let (n, r) = prep.means.shape();
    let p = problem.p() as f64;
    let mut cache = problem.cache(&prep.means)?;
    let vg = prep.transformed.values();
    let mut y = DMatrix::zeros(n, r);
    let mut rows = Vec::with_capacity(n);
    for k in 0..n {
        let pi = DMatrix::from_fn(vg.ncols(), 1, |l, _| vg[(k, l)] / p);
        let ne = row_system(problem, &mut cache, &prep.means, k, &pi)?;
        let (center, scale) = (prep.transformed.center()[k], prep.transformed.scale()[k]);
        // beta_j = w_j (m2_jk - center) / scale.
        let lb = DVector::from_fn(r, |j, _| {
            prep.weights[j] * (raw_means[(k, j)].powi(2) + floor - center) / scale
        });
        let rhs = ne.rhs.column(0).into_owned();
        let beta = solve_bounded_qp(&ne.lhs, &rhs, &lb, DEFAULT_TOL)?;
        let active = (0..r).filter(|&j| beta[j] <= lb[j] + 1e-12 * lb[j].abs().max(1.0)).count();
        rows.push(RowDiagnostic {
            residual: relative_residual(&ne, &beta),
            active_bounds: active,
        });
        for j in 0..r {
            y[(k, j)] = (beta[j] / prep.weights[j] * scale + center).max(raw_means[(k, j)].powi(2) + floor);
        }
    }
    Ok(GeneralMeansResult {
        y,
        rows,
        warnings: prep.warnings,
    })
}

//! Basic alternating least squares for the mixing weights and the mean matrix.
//!
//! Each step minimizes the mixed-order cost exactly over either the weight
//! vector (a simplex-constrained QP) or one row of the mean matrix (a linear
//! least squares in `beta = w * a^k`), using only the Gram caches.

use crate::error::{MomError, Result};
use crate::esp::{implicit_cost_esp, prep_norm_eqn, DataPowers, GramCache, Hyperparams, NormalEquation};
use crate::linalg::spd_solve;
use crate::qp::{solve_simplex_qp, QpProblem, DEFAULT_TOL};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Weights below this value cannot be divided by when recovering a row from `beta`.
pub const WEIGHT_GUARD: f64 = 1e-12;

/// The data matrix together with the centering and scaling applied to it.
#[derive(Debug, Clone)]
pub struct DataMatrix {
    raw: DMatrix<f64>,
    values: DMatrix<f64>,
    center: DVector<f64>,
    scale: DVector<f64>,
    preprocessed: bool,
}

impl DataMatrix {
    /// Center each row to mean zero and scale it to unit (population) variance.
    /// Constant rows are centered and keep scale 1.
    pub fn preprocess(raw: DMatrix<f64>) -> Result<Self> {
        let (n, p) = raw.shape();
        if p < 2 || n == 0 {
            return Err(MomError::InvalidArgument(format!(
                "need at least one coordinate and two samples, got {n}x{p}"
            )));
        }
        if raw.iter().any(|x| !x.is_finite()) {
            return Err(MomError::InvalidArgument("data contains non-finite values".into()));
        }
        let center = raw.column_mean();
        let mut scale = DVector::from_element(n, 1.0);
        let mut values = raw.clone();
        for k in 0..n {
            let mut row = values.row_mut(k);
            row.add_scalar_mut(-center[k]);
            let var = row.iter().map(|x| x * x).sum::<f64>() / p as f64;
            let sd = var.sqrt();
            let magnitude = raw.row(k).amax();
            if sd > 1e-14 * magnitude {
                row /= sd;
                scale[k] = sd;
            } else {
                row.fill(0.0);
            }
        }
        Ok(Self {
            raw,
            values,
            center,
            scale,
            preprocessed: true,
        })
    }

    /// Use `v` as-is (identity frame).
    pub fn without_preprocessing(v: DMatrix<f64>) -> Self {
        let n = v.nrows();
        Self {
            raw: v.clone(),
            values: v,
            center: DVector::zeros(n),
            scale: DVector::from_element(n, 1.0),
            preprocessed: false,
        }
    }

    pub fn raw(&self) -> &DMatrix<f64> {
        &self.raw
    }

    /// Data in the working frame.
    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn center(&self) -> &DVector<f64> {
        &self.center
    }

    pub fn scale(&self) -> &DVector<f64> {
        &self.scale
    }

    pub fn is_preprocessed(&self) -> bool {
        self.preprocessed
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn p(&self) -> usize {
        self.values.ncols()
    }

    /// Map raw-frame means into the working frame.
    pub fn means_to_frame(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(a.nrows(), a.ncols(), |k, j| (a[(k, j)] - self.center[k]) / self.scale[k])
    }

    /// Map working-frame means back to the raw frame.
    pub fn means_from_frame(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(a.nrows(), a.ncols(), |k, j| a[(k, j)] * self.scale[k] + self.center[k])
    }

    pub fn to_frame(&self, est: &MixtureEstimate) -> MixtureEstimate {
        match est.frame {
            Frame::Preprocessed => est.clone(),
            Frame::Raw => MixtureEstimate {
                weights: est.weights.clone(),
                means: self.means_to_frame(&est.means),
                frame: Frame::Preprocessed,
            },
        }
    }

    pub fn from_frame(&self, est: &MixtureEstimate) -> MixtureEstimate {
        match est.frame {
            Frame::Raw => est.clone(),
            Frame::Preprocessed => MixtureEstimate {
                weights: est.weights.clone(),
                means: self.means_from_frame(&est.means),
                frame: Frame::Raw,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Frame {
    Raw,
    Preprocessed,
}

/// Mixing weights on the simplex and the n x r matrix of componentwise means.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureEstimate {
    pub weights: DVector<f64>,
    pub means: DMatrix<f64>,
    pub frame: Frame,
}

impl MixtureEstimate {
    pub fn rank(&self) -> usize {
        self.weights.len()
    }

    pub fn on_simplex(&self, tol: f64) -> bool {
        self.weights.iter().all(|w| *w >= -tol) && (self.weights.sum() - 1.0).abs() <= tol
    }
}

/// Relative l2 changes of the last iteration against `xtol`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvergenceState {
    pub iteration: usize,
    pub weight_change: f64,
    pub mean_change: f64,
    pub xtol: f64,
    pub max_iter: usize,
}

impl ConvergenceState {
    pub fn new(xtol: f64, max_iter: usize) -> Self {
        Self {
            iteration: 0,
            weight_change: f64::INFINITY,
            mean_change: f64::INFINITY,
            xtol,
            max_iter,
        }
    }

    pub fn record(
        &mut self,
        w_old: &DVector<f64>,
        w_new: &DVector<f64>,
        a_old: &DMatrix<f64>,
        a_new: &DMatrix<f64>,
    ) {
        self.iteration += 1;
        self.weight_change = relative_change(w_old.as_slice(), w_new.as_slice());
        self.mean_change = relative_change(a_old.as_slice(), a_new.as_slice());
    }

    pub fn converged(&self) -> bool {
        self.weight_change < self.xtol && self.mean_change < self.xtol
    }

    pub fn exhausted(&self) -> bool {
        self.iteration >= self.max_iter
    }
}

pub fn relative_change(old: &[f64], new: &[f64]) -> f64 {
    let diff: f64 = old.iter().zip(new).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let base: f64 = old.iter().map(|a| a * a).sum::<f64>().sqrt();
    if base > 0.0 {
        diff / base
    } else {
        diff
    }
}

/// Data in the working frame, its entrywise powers, and the order weights.
#[derive(Debug, Clone)]
pub struct Problem {
    pub data: DataMatrix,
    pub powers: DataPowers,
    pub hyper: Hyperparams,
    row_means: DVector<f64>,
}

impl Problem {
    pub fn new(data: DataMatrix, hyper: Hyperparams) -> Self {
        let d = hyper.order();
        let powers = DataPowers::new(data.values(), d);
        let row_means = data.values().column_mean();
        Self {
            data,
            powers,
            hyper,
            row_means,
        }
    }

    /// Preprocess `raw` and use the default order weights (or `tau` when given).
    pub fn from_raw(raw: DMatrix<f64>, d: usize, tau: Option<Vec<f64>>) -> Result<Self> {
        if d < 2 {
            return Err(MomError::InvalidArgument(format!("order d = {d} must be at least 2")));
        }
        if d > crate::MAX_ORDER {
            return Err(MomError::UnsupportedOrder(d));
        }
        let data = DataMatrix::preprocess(raw)?;
        let hyper = match tau {
            Some(t) if t.len() != d => {
                return Err(MomError::InvalidArgument(format!(
                    "{} tau values given for order {d}",
                    t.len()
                )))
            }
            Some(t) => Hyperparams::new(t)?,
            None => Hyperparams::default_for(data.n(), d)?,
        };
        Ok(Self::new(data, hyper))
    }

    pub fn order(&self) -> usize {
        self.hyper.order()
    }

    pub fn n(&self) -> usize {
        self.data.n()
    }

    pub fn p(&self) -> usize {
        self.data.p()
    }

    /// Row means of the working-frame data.
    pub fn row_means(&self) -> &DVector<f64> {
        &self.row_means
    }

    pub fn uniform_pi(&self) -> DVector<f64> {
        DVector::from_element(self.p(), 1.0 / self.p() as f64)
    }

    pub fn cache(&self, a: &DMatrix<f64>) -> Result<GramCache> {
        GramCache::from_powers(a, &self.powers)
    }

    /// Mixed-order cost without its data-only constant, at `pi = 1/p`.
    pub fn cost(&self, cache: &GramCache, w: &DVector<f64>) -> Result<f64> {
        self.cost_with(cache, w, self.hyper.tau())
    }

    pub fn cost_with(&self, cache: &GramCache, w: &DVector<f64>, tau: &[f64]) -> Result<f64> {
        implicit_cost_esp(cache, w, &self.uniform_pi(), self.order(), tau)
    }
}

/// `(2 tau_2, 3 tau_3, ..., d tau_d)`: weights of the order-(d-1) row problem.
pub fn row_tau(tau: &[f64]) -> Vec<f64> {
    tau.iter().enumerate().skip(1).map(|(i, t)| (i + 1) as f64 * t).collect()
}

/// Weight update: minimize the cost over the simplex with floor `q / r`.
pub fn update_weights(cache: &GramCache, d: usize, tau: &[f64], q: f64) -> Result<DVector<f64>> {
    let r = cache.rank();
    if r == 1 {
        return Ok(DVector::from_element(1, 1.0));
    }
    let p = cache.samples();
    let pi = DMatrix::from_element(p, 1, 1.0 / p as f64);
    let ne = prep_norm_eqn(cache, &pi, d, tau)?;
    let problem = QpProblem::from_normal_equation(ne.lhs, ne.rhs.column(0).into_owned(), q)?;
    solve_simplex_qp(&problem, DEFAULT_TOL)
}

/// Solve for `beta` (r x m) of the rows currently deflated out of `cache`:
/// the order-(d-1) normal equation plus the first-order term.
pub(crate) fn deflated_solve(
    cache: &GramCache,
    pi: &DMatrix<f64>,
    mean_entries: &[f64],
    d: usize,
    tau: &[f64],
) -> Result<DMatrix<f64>> {
    let ne = deflated_system(cache, pi, mean_entries, d, tau)?;
    spd_solve(&ne.lhs, &ne.rhs)
}

/// The normal equation behind [`deflated_solve`].
pub(crate) fn deflated_system(
    cache: &GramCache,
    pi: &DMatrix<f64>,
    mean_entries: &[f64],
    d: usize,
    tau: &[f64],
) -> Result<NormalEquation> {
    let r = cache.rank();
    let m = pi.ncols();
    let (mut lhs, mut rhs) = if d >= 2 {
        let ne = prep_norm_eqn(cache, pi, d - 1, &row_tau(tau))?;
        (ne.lhs, ne.rhs)
    } else {
        (DMatrix::zeros(r, r), DMatrix::zeros(r, m))
    };
    lhs.add_scalar_mut(tau[0]);
    for (c, &mean) in mean_entries.iter().enumerate() {
        rhs.column_mut(c).add_scalar_mut(tau[0] * mean);
    }
    Ok(NormalEquation { lhs, rhs })
}

/// Divide each row of `beta` (r x m) by the weights, guarding tiny weights.
pub(crate) fn divide_by_weights(beta: &DMatrix<f64>, w: &DVector<f64>) -> Result<DMatrix<f64>> {
    if let Some((index, &value)) = w.iter().enumerate().find(|(_, x)| **x < WEIGHT_GUARD) {
        return Err(MomError::GuardedDivision { index, value });
    }
    Ok(DMatrix::from_fn(beta.nrows(), beta.ncols(), |j, c| beta[(j, c)] / w[j]))
}

/// Update row `k` of `a` in place and keep `cache` consistent with it.
/// `pi` and `data_mean_entry` define the target of the row problem; the data
/// row deflated from the cache is always row `k` of the problem data.
pub fn solve_row(
    problem: &Problem,
    k: usize,
    cache: &mut GramCache,
    a: &mut DMatrix<f64>,
    w: &DVector<f64>,
    pi: &DVector<f64>,
    data_mean_entry: f64,
    tau: &[f64],
) -> Result<DVector<f64>> {
    if w.iter().any(|x| *x < WEIGHT_GUARD) {
        let (index, &value) = w.iter().enumerate().find(|(_, x)| **x < WEIGHT_GUARD).unwrap();
        return Err(MomError::GuardedDivision { index, value });
    }
    let d = problem.order();
    cache.deflate(a, &problem.powers, &[k]);
    let pi_m = DMatrix::from_column_slice(pi.len(), 1, pi.as_slice());
    let solved = deflated_solve(cache, &pi_m, &[data_mean_entry], d, tau)
        .and_then(|beta| divide_by_weights(&beta, w));
    match solved {
        Ok(row) => {
            for j in 0..a.ncols() {
                a[(k, j)] = row[(j, 0)];
            }
            cache.restore(a, &problem.powers, &[k]);
            Ok(row.column(0).into_owned())
        }
        Err(e) => {
            cache.restore(a, &problem.powers, &[k]);
            Err(e)
        }
    }
}

/// One Gauss-Seidel sweep over all rows of the mean matrix.
pub fn update_means(
    problem: &Problem,
    cache: &mut GramCache,
    a: &mut DMatrix<f64>,
    w: &DVector<f64>,
    tau: &[f64],
) -> Result<()> {
    let p = problem.p() as f64;
    for k in 0..problem.n() {
        let pi = problem.data.values().row(k).transpose() / p;
        solve_row(problem, k, cache, a, w, &pi, problem.row_means()[k], tau)?;
    }
    Ok(())
}

/// Identifiability check for the means and weights: returns a warning when
/// `r > binom(floor((n-1)/2), floor(d/2))`.
pub fn identifiability_warning(n: usize, r: usize, d: usize) -> Option<String> {
    let bound = binomial(n.saturating_sub(1) / 2, d / 2);
    (r as u128 > bound).then(|| {
        format!(
            "rank r = {r} exceeds binom(floor((n-1)/2), floor(d/2)) = {bound} for n = {n}, d = {d}; \
             the means and weights may not be identifiable from moments of order {d}"
        )
    })
}

pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlsOptions {
    pub xtol: f64,
    pub max_iter: usize,
    /// Order weights; defaults to `(n-i)!/n!`.
    pub tau: Option<Vec<f64>>,
    /// Weight floor `q` (each weight is kept at least `q / r`).
    pub weight_floor: f64,
    /// Also stop when the relative cost improvement falls below this value.
    pub cost_rtol: Option<f64>,
    /// Seed for the default initialization.
    pub seed: u64,
}

impl Default for AlsOptions {
    fn default() -> Self {
        Self {
            xtol: 1e-4,
            max_iter: 200,
            tau: None,
            weight_floor: 0.0,
            cost_rtol: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    /// Cost without its data-only constant (may be negative).
    pub cost: f64,
    pub weight_change: f64,
    pub mean_change: f64,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    /// Estimate in the raw data frame.
    pub estimate: MixtureEstimate,
    /// Same estimate in the preprocessed frame.
    pub working: MixtureEstimate,
    pub converged: bool,
    pub iterations: usize,
    pub final_cost: f64,
    pub trace: Vec<TraceEntry>,
    pub warnings: Vec<String>,
}

/// Uniform weights and standard normal means in the working frame.
pub fn default_init(n: usize, r: usize, seed: u64) -> MixtureEstimate {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    MixtureEstimate {
        weights: DVector::from_element(r, 1.0 / r as f64),
        means: DMatrix::from_fn(n, r, |_, _| StandardNormal.sample(&mut rng)),
        frame: Frame::Preprocessed,
    }
}

pub(crate) fn prepare_init(
    problem: &Problem,
    init: Option<&MixtureEstimate>,
    r: usize,
    seed: u64,
) -> Result<MixtureEstimate> {
    let est = match init {
        Some(e) => problem.data.to_frame(e),
        None => default_init(problem.n(), r, seed),
    };
    if est.means.nrows() != problem.n() || est.means.ncols() != est.weights.len() || est.weights.is_empty() {
        return Err(MomError::InvalidArgument(format!(
            "initialization has means {}x{} and {} weights for n = {}",
            est.means.nrows(),
            est.means.ncols(),
            est.weights.len(),
            problem.n()
        )));
    }
    Ok(est)
}

/// Tracks the lowest-cost iterate for non-converged returns.
#[derive(Debug, Clone)]
pub(crate) struct Best {
    cost: f64,
    w: DVector<f64>,
    a: DMatrix<f64>,
}

impl Best {
    pub(crate) fn new(w: &DVector<f64>, a: &DMatrix<f64>) -> Self {
        Self {
            cost: f64::INFINITY,
            w: w.clone(),
            a: a.clone(),
        }
    }

    pub(crate) fn offer(&mut self, cost: f64, w: &DVector<f64>, a: &DMatrix<f64>) {
        if cost < self.cost {
            self.cost = cost;
            self.w = w.clone();
            self.a = a.clone();
        }
    }

    pub(crate) fn take(self) -> (f64, DVector<f64>, DMatrix<f64>) {
        (self.cost, self.w, self.a)
    }
}

pub(crate) fn finish(
    problem: &Problem,
    w: DVector<f64>,
    a: DMatrix<f64>,
    converged: bool,
    iterations: usize,
    final_cost: f64,
    trace: Vec<TraceEntry>,
    mut warnings: Vec<String>,
) -> FitResult {
    if !converged && iterations > 0 {
        warnings.push(format!("did not converge within {iterations} iterations"));
    }
    let working = MixtureEstimate {
        weights: w,
        means: a,
        frame: Frame::Preprocessed,
    };
    FitResult {
        estimate: problem.data.from_frame(&working),
        working,
        converged,
        iterations,
        final_cost,
        trace,
        warnings,
    }
}

/// With no iterations run, report the caller's initialization exactly rather
/// than its round trip through the working frame.
pub(crate) fn keep_initial(mut fit: FitResult, problem: &Problem, init: Option<&MixtureEstimate>) -> FitResult {
    if let (0, Some(init)) = (fit.iterations, init) {
        fit.estimate = problem.data.from_frame(init);
        fit.working = problem.data.to_frame(init);
    }
    fit
}

/// Basic ALS: alternate full row sweeps of the means and weight updates until
/// the relative changes of both drop below `xtol`.
pub fn solve_mean_and_weight(
    raw: &DMatrix<f64>,
    init: Option<&MixtureEstimate>,
    r: usize,
    d: usize,
    options: &AlsOptions,
) -> Result<FitResult> {
    let problem = Problem::from_raw(raw.clone(), d, options.tau.clone())?;
    fit_basic(&problem, init, r, options)
}

/// Basic ALS on an already prepared problem.
pub fn fit_basic(
    problem: &Problem,
    init: Option<&MixtureEstimate>,
    r: usize,
    options: &AlsOptions,
) -> Result<FitResult> {
    let start = prepare_init(problem, init, r, options.seed)?;
    let r = start.rank();
    let d = problem.order();
    let tau = problem.hyper.tau().to_vec();
    let warnings: Vec<String> = identifiability_warning(problem.n(), r, d).into_iter().collect();
    warnings.iter().for_each(|w| log::warn!("{w}"));

    let mut w = start.weights;
    let mut a = start.means;
    let mut state = ConvergenceState::new(options.xtol, options.max_iter);
    let mut trace = Vec::new();
    let mut cache = problem.cache(&a)?;
    let mut cost = problem.cost(&cache, &w)?;
    let mut best = Best::new(&w, &a);
    best.offer(cost, &w, &a);
    let mut converged = false;

    while !state.exhausted() {
        let (w_old, a_old) = (w.clone(), a.clone());
        update_means(problem, &mut cache, &mut a, &w, &tau)?;
        // Fresh caches each iteration keep deflate/restore roundoff from accumulating.
        cache = problem.cache(&a)?;
        w = update_weights(&cache, d, &tau, options.weight_floor)?;
        let new_cost = problem.cost(&cache, &w)?;
        state.record(&w_old, &w, &a_old, &a);
        trace.push(TraceEntry {
            iteration: state.iteration,
            cost: new_cost,
            weight_change: state.weight_change,
            mean_change: state.mean_change,
        });
        best.offer(new_cost, &w, &a);
        let cost_stalled = options
            .cost_rtol
            .is_some_and(|tol| (cost - new_cost) <= tol * new_cost.abs().max(f64::MIN_POSITIVE));
        cost = new_cost;
        if state.converged() || cost_stalled {
            converged = true;
            break;
        }
    }

    let iterations = state.iteration;
    if !converged && iterations > 0 {
        let (best_cost, bw, ba) = best.take();
        return Ok(finish(problem, bw, ba, false, iterations, best_cost, trace, warnings));
    }
    Ok(keep_initial(finish(problem, w, a, converged, iterations, cost, trace, warnings), problem, init))
}

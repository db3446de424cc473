//! The accelerated and safeguarded ALS driver.
//!
//! A warm-up stage runs blocked row sweeps in a random row order, drops one
//! order weight per sweep when that steepens the gradient, clamps updated
//! blocks to the data bounding box, and floors the weights. The main stage runs
//! full row sweeps with Anderson acceleration and unconstrained weight
//! updates.

use crate::als::{
    deflated_solve, divide_by_weights, finish, identifiability_warning, keep_initial, prepare_init, update_means,
    update_weights, AlsOptions, Best, ConvergenceState, FitResult, MixtureEstimate, Problem, TraceEntry,
};
use crate::error::{MomError, Result};
use crate::esp::GramCache;
use crate::gradient::{grad, grad_by_order, partition_coefficients, Gradient, PartitionCoefficients};
use crate::linalg::project_simplex;
use nalgebra::{DMatrix, DVector, SVD};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::VecDeque;

/// Warm-up length, block size and weight floors.
#[derive(Debug, Clone, PartialEq)]
pub struct WarmupSchedule {
    pub warmup_steps: usize,
    pub block_size: usize,
    /// `q` during warm-up; each weight stays above `q / r`.
    pub warmup_floor: f64,
    /// `q` after warm-up.
    pub main_floor: f64,
}

impl Default for WarmupSchedule {
    fn default() -> Self {
        Self {
            warmup_steps: 20,
            block_size: 2,
            warmup_floor: 0.1,
            main_floor: 0.0,
        }
    }
}

impl WarmupSchedule {
    pub fn floor_at(&self, iteration: usize) -> f64 {
        if iteration < self.warmup_steps {
            self.warmup_floor
        } else {
            self.main_floor
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_size == 0 {
            return Err(MomError::InvalidArgument("block size must be positive".into()));
        }
        let ok = |q: f64| (0.0..1.0).contains(&q);
        if !ok(self.warmup_floor) || !ok(self.main_floor) || self.main_floor > self.warmup_floor {
            return Err(MomError::InvalidArgument(format!(
                "weight floors must satisfy 0 <= main ({}) <= warm-up ({}) < 1",
                self.main_floor, self.warmup_floor
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AaConfig {
    pub enabled: bool,
    pub depth: usize,
    /// Minimum cosine between the extrapolation and the negative gradient.
    pub eps_aa: f64,
    pub max_backtracks: usize,
    pub backtrack_factor: f64,
}

impl Default for AaConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            depth: 15,
            eps_aa: 1e-4,
            max_backtracks: 10,
            backtrack_factor: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlsPlusOptions {
    pub base: AlsOptions,
    pub schedule: WarmupSchedule,
    pub aa: AaConfig,
    pub drop_one: bool,
}

impl Default for AlsPlusOptions {
    fn default() -> Self {
        Self {
            base: AlsOptions::default(),
            schedule: WarmupSchedule::default(),
            aa: AaConfig::default(),
            drop_one: true,
        }
    }
}

/// Iterate history for Anderson acceleration: points `(w, vec A)` and their gradients.
#[derive(Debug, Clone)]
pub struct AaState {
    history: VecDeque<(DVector<f64>, DVector<f64>)>,
    depth: usize,
    eps_aa: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AaOutcome {
    /// History was empty: plain sweep, history seeded with the current point.
    Seeded,
    /// Extrapolation accepted with this step fraction.
    Accepted(f64),
    /// Extrapolation not aligned with the descent direction; history cleared.
    Misaligned,
    /// No trial step decreased the cost; history cleared.
    NoDecrease,
}

impl AaState {
    pub fn new(config: &AaConfig) -> Self {
        Self {
            history: VecDeque::new(),
            depth: config.depth.max(1),
            eps_aa: config.eps_aa,
        }
    }

    pub fn len(&self) -> usize {
        self.history.len()
    }

    pub fn is_empty(&self) -> bool {
        self.history.is_empty()
    }

    pub fn clear(&mut self) {
        self.history.clear();
    }

    fn push(&mut self, x: DVector<f64>, g: DVector<f64>) {
        if self.history.back().is_some_and(|(last, _)| *last == x) {
            return;
        }
        self.history.push_back((x, g));
        while self.history.len() > self.depth {
            self.history.pop_front();
        }
    }
}

fn stack(w: &DVector<f64>, a: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(w.len() + a.len(), w.iter().chain(a.iter()).copied())
}

fn unstack(x: &DVector<f64>, n: usize, r: usize) -> (DVector<f64>, DMatrix<f64>) {
    let w = DVector::from_column_slice(&x.as_slice()[..r]);
    let a = DMatrix::from_column_slice(n, r, &x.as_slice()[r..]);
    (w, a)
}

/// Gradient of the full cost at `(w, a)` with the weight part projected onto
/// the simplex tangent space, stacked as one vector.
fn stacked_gradient(
    problem: &Problem,
    cache: &GramCache,
    w: &DVector<f64>,
    a: &DMatrix<f64>,
    coeffs: &PartitionCoefficients,
) -> Result<DVector<f64>> {
    let mut g: Gradient = grad(
        cache,
        &problem.powers,
        a,
        w,
        &problem.uniform_pi(),
        problem.hyper.tau(),
        coeffs,
    )?;
    g.project_weights();
    Ok(g.to_vector())
}

/// One main-stage Anderson step: a full row sweep from `(w, a)`, then an
/// extrapolation over the iterate history followed by a backtracking line
/// search. Returns the next `(w, A)`.
pub fn anderson_step(
    problem: &Problem,
    state: &mut AaState,
    w: &DVector<f64>,
    a: &DMatrix<f64>,
    config: &AaConfig,
    coeffs: &PartitionCoefficients,
) -> Result<(DVector<f64>, DMatrix<f64>, AaOutcome)> {
    let (n, r) = a.shape();
    let tau = problem.hyper.tau();
    let mut cache = problem.cache(a)?;
    let x_t = stack(w, a);
    let seeding = state.is_empty();
    if seeding || state.history.back().is_some_and(|(last, _)| *last != x_t) {
        let g_t = stacked_gradient(problem, &cache, w, a, coeffs)?;
        state.push(x_t.clone(), g_t);
    }

    let mut a_hat = a.clone();
    update_means(problem, &mut cache, &mut a_hat, w, tau)?;
    let w_hat = w.clone();
    if seeding {
        return Ok((w_hat, a_hat, AaOutcome::Seeded));
    }

    let cache_hat = problem.cache(&a_hat)?;
    let g_hat = stacked_gradient(problem, &cache_hat, &w_hat, &a_hat, coeffs)?;
    let x_hat = stack(&w_hat, &a_hat);

    // Difference columns: consecutive history pairs, then (x_hat - x_t).
    let (x_last, g_last) = state.history.back().expect("nonempty history");
    let cols = state.history.len();
    let dim = x_hat.len();
    let mut dx = DMatrix::zeros(dim, cols);
    let mut dg = DMatrix::zeros(dim, cols);
    for (c, pair) in state.history.iter().zip(state.history.iter().skip(1)).enumerate() {
        dx.set_column(c, &(&pair.1 .0 - &pair.0 .0));
        dg.set_column(c, &(&pair.1 .1 - &pair.0 .1));
    }
    dx.set_column(cols - 1, &(&x_hat - x_last));
    dg.set_column(cols - 1, &(&g_hat - g_last));

    let coef = min_norm_lstsq(dg, &g_hat);
    let direction = -(dx * coef);

    let dir_norm = direction.norm();
    let g_norm = g_hat.norm();
    let cosine = if dir_norm > 0.0 && g_norm > 0.0 {
        -direction.dot(&g_hat) / (dir_norm * g_norm)
    } else {
        0.0
    };
    if !(cosine > state.eps_aa) {
        state.clear();
        return Ok((w_hat, a_hat, AaOutcome::Misaligned));
    }

    let base_cost = problem.cost(&cache_hat, &w_hat)?;
    let mut alpha = 1.0;
    for _ in 0..config.max_backtracks {
        let trial = &x_hat + &direction * alpha;
        let (tw, ta) = unstack(&trial, n, r);
        let tw = project_simplex(&tw);
        let tcache = problem.cache(&ta)?;
        let cost = problem.cost(&tcache, &tw)?;
        if cost < base_cost {
            return Ok((tw, ta, AaOutcome::Accepted(alpha)));
        }
        alpha *= config.backtrack_factor;
    }
    state.clear();
    Ok((w_hat, a_hat, AaOutcome::NoDecrease))
}

/// Minimum-norm least squares `argmin_c ||m c - b||` via the SVD.
fn min_norm_lstsq(m: DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let cols = m.ncols();
    let svd = SVD::new(m, true, true);
    let smax = svd.singular_values.max();
    if !(smax > 0.0) {
        return DVector::zeros(cols);
    }
    svd.solve(b, 1e-12 * smax).unwrap_or_else(|_| DVector::zeros(cols))
}

/// Choose the order whose removal most increases the gradient norm.
///
/// `per_order[s - 1]` is the gradient of the single-order cost `f^{(s)}`.
/// Returns the 1-based order to drop for the next sweep, if any removal
/// strictly increases `||sum_s tau_s grad f^{(s)}||`.
pub fn drop_one(per_order: &[Gradient], tau: &[f64]) -> Option<usize> {
    let parts: Vec<DVector<f64>> = per_order
        .iter()
        .zip(tau)
        .map(|(g, &t)| g.to_vector() * t)
        .collect();
    let total = parts.iter().skip(1).fold(parts.first()?.clone(), |acc, v| acc + v);
    let full = total.norm();
    let (best, best_norm) = parts
        .iter()
        .enumerate()
        .map(|(i, v)| (i, (&total - v).norm()))
        .max_by(|a, b| a.1.total_cmp(&b.1))?;
    (best_norm > full).then_some(best + 1)
}

/// Update the rows in `rows` jointly: one shared normal matrix and one
/// right-hand side per row. When `bounds` is given, each new row entry is
/// clamped to `[min_k, max_k]` of its data row.
pub fn update_mean_block(
    problem: &Problem,
    cache: &mut GramCache,
    rows: &[usize],
    w: &DVector<f64>,
    a: &mut DMatrix<f64>,
    tau: &[f64],
    bounds: Option<(&DVector<f64>, &DVector<f64>)>,
) -> Result<()> {
    if rows.is_empty() {
        return Ok(());
    }
    let p = problem.p();
    let values = problem.data.values();
    let pi = DMatrix::from_fn(p, rows.len(), |l, c| values[(rows[c], l)] / p as f64);
    let means: Vec<f64> = rows.iter().map(|&k| problem.row_means()[k]).collect();

    cache.deflate(a, &problem.powers, rows);
    let solved = deflated_solve(cache, &pi, &means, problem.order(), tau)
        .and_then(|beta| divide_by_weights(&beta, w));
    let block = match solved {
        Ok(b) => b,
        Err(e) => {
            cache.restore(a, &problem.powers, rows);
            return Err(e);
        }
    };
    for (c, &k) in rows.iter().enumerate() {
        for j in 0..a.ncols() {
            let mut v = block[(j, c)];
            if let Some((lo, hi)) = bounds {
                v = v.clamp(lo[k], hi[k]);
            }
            a[(k, j)] = v;
        }
    }
    cache.restore(a, &problem.powers, rows);
    Ok(())
}

/// Row-wise minimum and maximum of the working-frame data.
pub fn data_box(problem: &Problem) -> (DVector<f64>, DVector<f64>) {
    let v = problem.data.values();
    let lo = DVector::from_fn(v.nrows(), |k, _| v.row(k).min());
    let hi = DVector::from_fn(v.nrows(), |k, _| v.row(k).max());
    (lo, hi)
}

/// Fit weights and means from raw data with the full accelerated driver.
pub fn fit_als_plus(
    raw: &DMatrix<f64>,
    init: Option<&MixtureEstimate>,
    r: usize,
    d: usize,
    options: &AlsPlusOptions,
) -> Result<FitResult> {
    let problem = Problem::from_raw(raw.clone(), d, options.base.tau.clone())?;
    fit_plus(&problem, init, r, options)
}

/// The accelerated driver on an already prepared problem.
pub fn fit_plus(
    problem: &Problem,
    init: Option<&MixtureEstimate>,
    r: usize,
    options: &AlsPlusOptions,
) -> Result<FitResult> {
    options.schedule.validate()?;
    let base = &options.base;
    let start = prepare_init(problem, init, r, base.seed)?;
    let r = start.rank();
    let d = problem.order();
    let n = problem.n();
    let tau = problem.hyper.tau().to_vec();
    let coeffs = partition_coefficients(d)?;
    let warnings: Vec<String> = identifiability_warning(n, r, d).into_iter().collect();
    warnings.iter().for_each(|w| log::warn!("{w}"));

    let mut rng = ChaCha8Rng::seed_from_u64(base.seed);
    rng.set_stream(1);
    let (lo, hi) = data_box(problem);
    let mut order: Vec<usize> = (0..n).collect();
    let mut aa = AaState::new(&options.aa);

    let mut w = start.weights;
    let mut a = start.means;
    let mut state = ConvergenceState::new(base.xtol, base.max_iter);
    let mut trace = Vec::new();
    let mut cache = problem.cache(&a)?;
    let mut cost = problem.cost(&cache, &w)?;
    let mut best = Best::new(&w, &a);
    let mut converged = false;

    while !state.exhausted() {
        let t = state.iteration;
        let warm = t < options.schedule.warmup_steps;
        let (w_old, a_old) = (w.clone(), a.clone());
        if warm {
            let mut sweep_tau = tau.clone();
            if options.drop_one && r > 0 {
                let per_order =
                    grad_by_order(&cache, &problem.powers, &a, &w, &problem.uniform_pi(), d, &coeffs)?;
                if let Some(i) = drop_one(&per_order, &tau) {
                    sweep_tau[i - 1] = 0.0;
                }
            }
            order.shuffle(&mut rng);
            for block in order.chunks(options.schedule.block_size) {
                update_mean_block(problem, &mut cache, block, &w, &mut a, &sweep_tau, Some((&lo, &hi)))?;
            }
        } else if options.aa.enabled {
            // The weights are re-solved below; only the means carry over.
            let (_, na, _) = anderson_step(problem, &mut aa, &w, &a, &options.aa, &coeffs)?;
            a = na;
        } else {
            update_means(problem, &mut cache, &mut a, &w, &tau)?;
        }
        cache = problem.cache(&a)?;
        w = update_weights(&cache, d, &tau, options.schedule.floor_at(t))?;
        let new_cost = problem.cost(&cache, &w)?;
        state.record(&w_old, &w, &a_old, &a);
        trace.push(TraceEntry {
            iteration: state.iteration,
            cost: new_cost,
            weight_change: state.weight_change,
            mean_change: state.mean_change,
        });
        let main_stage = !warm;
        if main_stage {
            best.offer(new_cost, &w, &a);
            let stalled = base
                .cost_rtol
                .is_some_and(|tol| (cost - new_cost) <= tol * new_cost.abs().max(f64::MIN_POSITIVE));
            let previous_main = t > options.schedule.warmup_steps;
            if state.converged() || (stalled && previous_main) {
                cost = new_cost;
                converged = true;
                break;
            }
        }
        cost = new_cost;
    }

    let iterations = state.iteration;
    if !converged && iterations > options.schedule.warmup_steps {
        let (best_cost, bw, ba) = best.take();
        return Ok(finish(problem, bw, ba, false, iterations, best_cost, trace, warnings));
    }
    Ok(keep_initial(finish(problem, w, a, converged, iterations, cost, trace, warnings), problem, init))
}

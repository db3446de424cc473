//! Active-set solver for the weight-update quadratic program
//! `min_{w in simplex, w >= q/r} ||w - w0||_L^2`, and for the bound-only
//! variant used by the floored second-moment solve.

use crate::error::{MomError, Result};
use crate::linalg::spd_factor;
use nalgebra::{DMatrix, DVector};

pub const DEFAULT_TOL: f64 = 1e-10;

/// `min ||w - target||_L^2` over the simplex with per-coordinate floor `lower_bound / r`.
#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub metric: DMatrix<f64>,
    pub target: DVector<f64>,
    pub lower_bound: f64,
    linear: DVector<f64>,
}

impl QpProblem {
    pub fn new(metric: DMatrix<f64>, target: DVector<f64>, lower_bound: f64) -> Result<Self> {
        let linear = &metric * &target;
        Self::with_linear(metric, target, linear, lower_bound)
    }

    /// Same problem stated through its normal equation `L w0 = rhs`, without
    /// forming `w0` (`L` may be singular). `target` is then a least-squares
    /// surrogate used only for reporting.
    pub fn from_normal_equation(
        metric: DMatrix<f64>,
        rhs: DVector<f64>,
        lower_bound: f64,
    ) -> Result<Self> {
        let target = crate::linalg::spd_solve_vec(&metric, &rhs).unwrap_or_else(|_| rhs.clone());
        Self::with_linear(metric, target, rhs, lower_bound)
    }

    fn with_linear(
        metric: DMatrix<f64>,
        target: DVector<f64>,
        linear: DVector<f64>,
        lower_bound: f64,
    ) -> Result<Self> {
        let r = metric.nrows();
        if r == 0 || metric.ncols() != r || target.len() != r {
            return Err(MomError::InvalidArgument(format!(
                "QP metric {}x{} does not match target of length {}",
                metric.nrows(),
                metric.ncols(),
                target.len()
            )));
        }
        if !(0.0..=1.0).contains(&lower_bound) {
            return Err(MomError::InvalidArgument(format!(
                "weight floor q = {lower_bound} must lie in [0, 1]"
            )));
        }
        Ok(Self {
            metric,
            target,
            lower_bound,
            linear,
        })
    }

    pub fn dim(&self) -> usize {
        self.target.len()
    }

    /// `||w - target||_L^2` up to a constant: `w^T L w - 2 w^T L target`.
    pub fn objective(&self, w: &DVector<f64>) -> f64 {
        w.dot(&(&self.metric * w)) - 2.0 * w.dot(&self.linear)
    }

    /// Stationarity residual of `w` on the constrained set (zero at the optimum).
    pub fn kkt_residual(&self, w: &DVector<f64>) -> f64 {
        let floor = self.lower_bound / self.dim() as f64;
        let g = &self.metric * w - &self.linear;
        let free: Vec<usize> = (0..w.len()).filter(|&i| w[i] > floor + 1e-12).collect();
        let mu = if free.is_empty() {
            g.min()
        } else {
            free.iter().map(|&i| g[i]).sum::<f64>() / free.len() as f64
        };
        (0..w.len())
            .map(|i| {
                if free.contains(&i) {
                    (g[i] - mu).abs()
                } else {
                    (mu - g[i]).max(0.0)
                }
            })
            .fold(0.0, f64::max)
    }
}

/// Solve the simplex QP. The result sums to one exactly (final renormalization).
pub fn solve_simplex_qp(problem: &QpProblem, tol: f64) -> Result<DVector<f64>> {
    if !(tol > 0.0) {
        return Err(MomError::InvalidArgument("tolerance must be positive".into()));
    }
    let r = problem.dim();
    let floor = problem.lower_bound / r as f64;
    let lb = DVector::from_element(r, floor);
    let mut w = active_set(&problem.metric, &problem.linear, &lb, Some(1.0), tol)?;
    let total = w.sum();
    w /= total;
    Ok(w)
}

/// `min 1/2 x^T H x - c^T x` subject to `x >= lb`.
pub fn solve_bounded_qp(
    h: &DMatrix<f64>,
    c: &DVector<f64>,
    lb: &DVector<f64>,
    tol: f64,
) -> Result<DVector<f64>> {
    if h.nrows() != c.len() || lb.len() != c.len() || !h.is_square() {
        return Err(MomError::InvalidArgument("bounded QP shape mismatch".into()));
    }
    active_set(h, c, lb, None, tol)
}

/// Primal active-set method for `min 1/2 x^T H x - c^T x`, `x >= lb`, and
/// optionally `sum x = total`. The equality is eliminated with the null-space
/// basis `{e_i - e_last}` of the free coordinates.
fn active_set(
    h: &DMatrix<f64>,
    c: &DVector<f64>,
    lb: &DVector<f64>,
    total: Option<f64>,
    tol: f64,
) -> Result<DVector<f64>> {
    let r = c.len();
    let scale = h.amax().max(c.amax()).max(1.0);
    let mut at_bound = vec![false; r];
    let mut x = match total {
        Some(t) => {
            let slack = t - lb.sum();
            if slack < -1e-12 {
                return Err(MomError::InvalidArgument(format!(
                    "lower bounds sum to {} > {t}: infeasible",
                    lb.sum()
                )));
            }
            if slack <= 1e-15 * t.abs().max(1.0) {
                return Ok(lb.clone());
            }
            lb.add_scalar(slack / r as f64)
        }
        None => {
            at_bound.iter_mut().for_each(|b| *b = true);
            lb.clone()
        }
    };

    let max_iter = 50 * r + 100;
    for _ in 0..max_iter {
        let free: Vec<usize> = (0..r).filter(|&i| !at_bound[i]).collect();
        let g = h * &x - c;
        let step = newton_step(h, &g, &free, total.is_some())?;
        let step_norm = step.iter().fold(0.0_f64, |m, s| m.max(s.abs()));
        let x_scale = x.amax().max(1.0);

        if step_norm <= 1e-13 * x_scale {
            // Multipliers of the active bounds.
            let mu = match (total.is_some(), free.is_empty()) {
                (true, false) => free.iter().map(|&i| g[i]).sum::<f64>() / free.len() as f64,
                (true, true) => g.min(),
                (false, _) => 0.0,
            };
            let worst = (0..r)
                .filter(|&i| at_bound[i])
                .map(|i| (i, g[i] - mu))
                .min_by(|a, b| a.1.total_cmp(&b.1));
            match worst {
                Some((i, lambda)) if lambda < -tol * scale => at_bound[i] = false,
                _ => return Ok(x),
            }
            continue;
        }

        let mut alpha = 1.0;
        let mut blocking = None;
        for (idx, &i) in free.iter().enumerate() {
            let pi = step[idx];
            if pi < 0.0 {
                let a = (x[i] - lb[i]) / -pi;
                if a < alpha {
                    alpha = a;
                    blocking = Some(i);
                }
            }
        }
        for (idx, &i) in free.iter().enumerate() {
            x[i] += alpha * step[idx];
        }
        if let Some(i) = blocking {
            let drift = x[i] - lb[i];
            x[i] = lb[i];
            at_bound[i] = true;
            if total.is_some() {
                // Keep the equality exact after snapping to the bound.
                let others: Vec<usize> = (0..r).filter(|&k| !at_bound[k]).collect();
                for &k in &others {
                    x[k] += drift / others.len() as f64;
                }
            }
        }
    }
    Err(MomError::Conditioning(format!(
        "active-set QP did not terminate within {max_iter} iterations"
    )))
}

/// Newton step on the free coordinates, restricted to the null space of the
/// equality constraint when `with_sum` is set.
fn newton_step(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    free: &[usize],
    with_sum: bool,
) -> Result<DVector<f64>> {
    let f = free.len();
    if f == 0 || (with_sum && f == 1) {
        return Ok(DVector::zeros(f));
    }
    let hff = DMatrix::from_fn(f, f, |a, b| h[(free[a], free[b])]);
    let gf = DVector::from_fn(f, |a, _| g[free[a]]);
    if !with_sum {
        return Ok(-spd_factor(&hff)?.solve(&gf));
    }
    // Z = [I; -1^T] of size f x (f-1).
    let m = f - 1;
    let z = DMatrix::from_fn(f, m, |a, b| {
        if a == b {
            1.0
        } else if a == m {
            -1.0
        } else {
            0.0
        }
    });
    let reduced = z.transpose() * &hff * &z;
    let rg = z.transpose() * &gf;
    let y = -spd_factor(&reduced)?.solve(&rg);
    Ok(z * y)
}

//! Permutation-matched error metrics and rank scans.

use crate::als::MixtureEstimate;
use crate::error::{MomError, Result};
use crate::general::EntrywiseFunction;
use crate::plus::{fit_plus, AlsPlusOptions};
use crate::Problem;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Per-component sample averages of `g(v)` (identity by default): column `j`
/// averages the samples labelled `j`.
pub fn sample_reference(
    v: &DMatrix<f64>,
    labels: &[usize],
    r: usize,
    g: Option<&EntrywiseFunction>,
) -> Result<DMatrix<f64>> {
    if labels.len() != v.ncols() {
        return Err(MomError::InvalidArgument(format!(
            "{} labels for {} samples",
            labels.len(),
            v.ncols()
        )));
    }
    let transformed;
    let data = match g {
        Some(g) => {
            transformed = g.apply(v)?;
            &transformed
        }
        None => v,
    };
    let mut sums = DMatrix::zeros(v.nrows(), r);
    let mut counts = vec![0usize; r];
    for (l, &j) in labels.iter().enumerate() {
        if j >= r {
            return Err(MomError::InvalidArgument(format!("label {j} out of range for r = {r}")));
        }
        counts[j] += 1;
        let mut col = sums.column_mut(j);
        col += data.column(l);
    }
    if let Some(j) = counts.iter().position(|&c| c == 0) {
        return Err(MomError::Validation(format!("component {j} has no samples")));
    }
    for (j, &c) in counts.iter().enumerate() {
        let mut col = sums.column_mut(j);
        col /= c as f64;
    }
    Ok(sums)
}

/// Empirical label frequencies.
pub fn sample_weights(labels: &[usize], r: usize) -> Result<DVector<f64>> {
    let mut w = DVector::zeros(r);
    for &j in labels {
        if j >= r {
            return Err(MomError::InvalidArgument(format!("label {j} out of range for r = {r}")));
        }
        w[j] += 1.0;
    }
    Ok(w / labels.len().max(1) as f64)
}

/// Minimum-cost perfect matching on a square cost matrix (Hungarian method
/// with potentials, O(r^3)). Returns `assign` with row `i` matched to column
/// `assign[i]`.
pub fn hungarian(cost: &DMatrix<f64>) -> Vec<usize> {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols(), "assignment needs a square cost matrix");
    // 1-based arrays; column 0 is a virtual start.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        if owner[j] > 0 {
            assign[owner[j] - 1] = j - 1;
        }
    }
    assign
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedError {
    pub name: String,
    pub error: f64,
}

/// Relative errors in percent under one matching of estimated to reference
/// components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub weight_error: f64,
    pub mean_error: f64,
    pub moment_errors: Vec<NamedError>,
    /// `permutation[j]` is the estimated component matched to reference `j`.
    pub permutation: Vec<usize>,
}

/// An extra per-component matrix (estimate, reference) scored under the
/// matching found for the means.
pub struct ExtraMoment<'a> {
    pub name: &'a str,
    pub estimate: &'a DMatrix<f64>,
    pub reference: &'a DMatrix<f64>,
}

fn relative_error(est: &DMatrix<f64>, reference: &DMatrix<f64>, perm: &[usize]) -> f64 {
    let num: f64 = perm
        .iter()
        .enumerate()
        .map(|(j, &e)| (est.column(e) - reference.column(j)).norm_squared())
        .sum();
    100.0 * num / reference.norm_squared()
}

/// Match the estimated means to the reference means by minimizing
/// `||A P - A_ref||^2` over permutations, then report
/// `100 ||X P - X_ref||^2 / ||X_ref||^2` for the weights, the means and every
/// extra moment.
pub fn match_and_score(
    estimate: &MixtureEstimate,
    reference_weights: &DVector<f64>,
    reference_means: &DMatrix<f64>,
    extras: &[ExtraMoment<'_>],
) -> Result<ErrorReport> {
    let a = &estimate.means;
    if a.shape() != reference_means.shape() || estimate.weights.len() != reference_weights.len() {
        return Err(MomError::InvalidArgument(format!(
            "estimate {:?} does not match reference {:?}",
            a.shape(),
            reference_means.shape()
        )));
    }
    for x in extras {
        if x.estimate.shape() != a.shape() || x.reference.shape() != a.shape() {
            return Err(MomError::InvalidArgument(format!("moment {:?} has the wrong shape", x.name)));
        }
    }
    let r = a.ncols();
    let cost = DMatrix::from_fn(r, r, |i, j| (a.column(i) - reference_means.column(j)).norm_squared());
    let assign = hungarian(&cost);
    let mut permutation = vec![0; r];
    for (i, &j) in assign.iter().enumerate() {
        permutation[j] = i;
    }
    let w_est = DMatrix::from_column_slice(1, r, estimate.weights.as_slice());
    let w_ref = DMatrix::from_column_slice(1, r, reference_weights.as_slice());
    Ok(ErrorReport {
        weight_error: relative_error(&w_est, &w_ref, &permutation),
        mean_error: relative_error(a, reference_means, &permutation),
        moment_errors: extras
            .iter()
            .map(|x| NamedError {
                name: x.name.to_string(),
                error: relative_error(x.estimate, x.reference, &permutation),
            })
            .collect(),
        permutation,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankScanRow {
    pub r: usize,
    /// Final cost without the data-only constant; may be negative.
    pub cost: f64,
    pub converged: bool,
    pub iterations: usize,
}

pub const DEFAULT_REL_IMPROVE_TOL: f64 = 1e-6;

/// Fit each rank in `ranks`, stopping each fit once the relative cost
/// improvement falls below `rel_tol`. Rank `r` uses seed `options.seed + r`,
/// so the rows do not depend on `jobs`, the number of ranks fitted
/// concurrently.
pub fn rank_scan(
    problem: &Problem,
    ranks: &[usize],
    options: &AlsPlusOptions,
    rel_tol: f64,
    jobs: usize,
) -> Result<Vec<RankScanRow>> {
    if ranks.is_empty() {
        return Err(MomError::InvalidArgument("rank list is empty".into()));
    }
    let fit_rank = |r: usize| -> Result<RankScanRow> {
        let mut opts = options.clone();
        opts.base.cost_rtol = Some(rel_tol);
        opts.base.seed = options.base.seed.wrapping_add(r as u64);
        let fit = fit_plus(problem, None, r, &opts)?;
        Ok(RankScanRow {
            r,
            cost: fit.final_cost,
            converged: fit.converged,
            iterations: fit.iterations,
        })
    };
    let jobs = jobs.clamp(1, ranks.len());
    if jobs == 1 {
        return ranks.iter().map(|&r| fit_rank(r)).collect();
    }
    let mut slots: Vec<Option<Result<RankScanRow>>> = (0..ranks.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..jobs)
            .map(|t| {
                let fit_rank = &fit_rank;
                scope.spawn(move || {
                    (t..ranks.len())
                        .step_by(jobs)
                        .map(|i| (i, fit_rank(ranks[i])))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, row) in h.join().expect("rank scan worker panicked") {
                slots[i] = Some(row);
            }
        }
    });
    slots.into_iter().map(|s| s.expect("every rank fitted")).collect()
}

/// `r,cost` CSV with a header line.
pub fn rank_scan_csv(rows: &[RankScanRow]) -> String {
    let mut out = String::from("r,cost\n");
    for row in rows {
        out.push_str(&format!("{},{:e}\n", row.r, row.cost));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Frame;

    #[test]
    fn hungarian_small() {
        let c = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 3.0, 2.0, 0.0, 5.0, 3.0, 2.0, 2.0]);
        let a = hungarian(&c);
        let total: f64 = a.iter().enumerate().map(|(i, &j)| c[(i, j)]).sum();
        assert_eq!(total, 5.0);
    }

    #[test]
    fn reference_from_labels() {
        let v = DMatrix::from_row_slice(1, 4, &[1.0, 3.0, 10.0, 20.0]);
        let m = sample_reference(&v, &[0, 0, 1, 1], 2, None).unwrap();
        assert_eq!(m.as_slice(), &[2.0, 15.0]);
        assert!(sample_reference(&v, &[0, 0, 0, 0], 2, None).is_err());
        assert_eq!(sample_weights(&[0, 1, 1, 1], 2).unwrap().as_slice(), &[0.25, 0.75]);
    }

    #[test]
    fn permuted_estimate_scores_zero() {
        let reference = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 0.0, 1.0, 0.0]);
        let rw = DVector::from_vec(vec![0.2, 0.3, 0.5]);
        let est = MixtureEstimate {
            weights: DVector::from_vec(vec![0.5, 0.2, 0.3]),
            means: DMatrix::from_row_slice(2, 3, &[3.0, 1.0, 2.0, 0.0, 0.0, 1.0]),
            frame: Frame::Raw,
        };
        let report = match_and_score(&est, &rw, &reference, &[]).unwrap();
        assert_eq!(report.permutation, vec![1, 2, 0]);
        assert_eq!((report.weight_error, report.mean_error), (0.0, 0.0));
    }

    #[test]
    fn csv_has_one_line_per_rank() {
        let rows = vec![
            RankScanRow { r: 3, cost: -1.5, converged: true, iterations: 4 },
            RankScanRow { r: 4, cost: -2.0, converged: false, iterations: 9 },
        ];
        assert_eq!(rank_scan_csv(&rows), "r,cost\n3,-1.5e0\n4,-2e0\n");
    }
}

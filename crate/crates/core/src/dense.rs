//! Explicit moment tensors and projections for small problems.
//!
//! This is the brute-force reference for the implicit kernels and is guarded
//! by an entry budget so it cannot be used on production-sized inputs by
//! accident. Multi-indices are enumerated in lexicographic (row-major) order:
//! the flat offset of `(i_1, ..., i_d)` is `sum_k i_k n^{d-k}`.

use crate::error::{MomError, Result};
use crate::partition::{partitions, Partition};
use nalgebra::{DMatrix, DVector};

/// Default cap on the number of entries a dense tensor may have.
pub const DEFAULT_BUDGET: usize = 10_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    order: usize,
    dim: usize,
    entries: Vec<f64>,
}

fn checked_len(dim: usize, order: usize, budget: usize) -> Result<usize> {
    let mut len: usize = 1;
    for _ in 0..order {
        len = len
            .checked_mul(dim)
            .filter(|l| *l <= budget)
            .ok_or_else(|| {
                MomError::ResourceLimit(format!(
                    "dense tensor of order {order} in dimension {dim} exceeds {budget} entries"
                ))
            })?;
    }
    Ok(len)
}

impl DenseTensor {
    pub fn zeros(dim: usize, order: usize) -> Result<Self> {
        let len = checked_len(dim, order, DEFAULT_BUDGET)?;
        Ok(Self {
            order,
            dim,
            entries: vec![0.0; len],
        })
    }

    pub fn from_entries(dim: usize, order: usize, entries: Vec<f64>) -> Result<Self> {
        let len = checked_len(dim, order, usize::MAX)?;
        if entries.len() != len {
            return Err(MomError::InvalidArgument(format!(
                "expected {len} entries, got {}",
                entries.len()
            )));
        }
        Ok(Self { order, dim, entries })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.entries[self.offset(index)]
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.order);
        index.iter().fold(0, |acc, &i| acc * self.dim + i)
    }

    fn index_of(&self, mut offset: usize, index: &mut [usize]) {
        for slot in index.iter_mut().rev() {
            *slot = offset % self.dim;
            offset /= self.dim;
        }
    }

    /// Sum of `weight * x^{(x)order}` into `self`.
    pub fn add_rank_one(&mut self, weight: f64, x: &[f64]) {
        let mut index = vec![0; self.order];
        for off in 0..self.entries.len() {
            self.index_of(off, &mut index);
            // Sorted factor order keeps permuted entries bitwise equal.
            index.sort_unstable();
            let prod: f64 = index.iter().map(|&i| x[i]).product();
            self.entries[off] += weight * prod;
        }
    }

    /// Largest deviation from invariance under swapping adjacent indices
    /// (adjacent transpositions generate all permutations).
    pub fn symmetry_defect(&self) -> f64 {
        let mut index = vec![0; self.order];
        let mut worst: f64 = 0.0;
        for off in 0..self.entries.len() {
            self.index_of(off, &mut index);
            for k in 1..self.order {
                index.swap(k - 1, k);
                let other = self.entries[self.offset(&index)];
                index.swap(k - 1, k);
                worst = worst.max((self.entries[off] - other).abs());
            }
        }
        worst
    }

    pub fn norm_squared(&self) -> f64 {
        self.entries.iter().map(|x| x * x).sum()
    }

    pub fn sub(&self, other: &Self) -> Self {
        assert_eq!((self.order, self.dim), (other.order, other.dim));
        Self {
            order: self.order,
            dim: self.dim,
            entries: self
                .entries
                .iter()
                .zip(&other.entries)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    pub fn dot(&self, other: &Self) -> f64 {
        assert_eq!((self.order, self.dim), (other.order, other.dim));
        self.entries.iter().zip(&other.entries).map(|(a, b)| a * b).sum()
    }
}

fn distinct(index: &[usize]) -> bool {
    (0..index.len()).all(|i| (i + 1..index.len()).all(|j| index[i] != index[j]))
}

/// `sum_l pi_l v_l^{(x)d}` over the columns of `v`.
pub fn weighted_moment(v: &DMatrix<f64>, pi: &DVector<f64>, d: usize) -> Result<DenseTensor> {
    let mut t = DenseTensor::zeros(v.nrows(), d)?;
    let mut col = vec![0.0; v.nrows()];
    for (l, &weight) in pi.iter().enumerate() {
        col.iter_mut().zip(v.column(l).iter()).for_each(|(c, x)| *c = *x);
        t.add_rank_one(weight, &col);
    }
    Ok(t)
}

/// The d-th sample moment `(1/p) sum_l v_l^{(x)d}`.
pub fn sample_moment(v: &DMatrix<f64>, d: usize) -> Result<DenseTensor> {
    let p = v.ncols();
    let t = weighted_moment(v, &DVector::from_element(p, 1.0 / p as f64), d)?;
    debug_assert!(t.symmetry_defect() == 0.0);
    Ok(t)
}

/// Zero every entry whose multi-index has a repeated coordinate.
pub fn project_offdiag(t: &DenseTensor) -> DenseTensor {
    let mut out = t.clone();
    let mut index = vec![0; t.order];
    for off in 0..t.entries.len() {
        t.index_of(off, &mut index);
        if !distinct(&index) {
            out.entries[off] = 0.0;
        }
    }
    out
}

/// `P_lambda(T)`: an order-`len(lambda)` tensor whose entry at distinct
/// `(i_1, ..., i_l)` is `T[i_1 (lambda_1 times), ..., i_l (lambda_l times)]`.
pub fn project_partition(t: &DenseTensor, lambda: &Partition) -> Result<DenseTensor> {
    if lambda.total() != t.order {
        return Err(MomError::InvalidArgument(format!(
            "partition of {} applied to an order-{} tensor",
            lambda.total(),
            t.order
        )));
    }
    let mut out = DenseTensor::zeros(t.dim, lambda.len())?;
    let mut short = vec![0; lambda.len()];
    let mut long = Vec::with_capacity(t.order);
    for off in 0..out.entries.len() {
        out.index_of(off, &mut short);
        if !distinct(&short) {
            continue;
        }
        long.clear();
        for (&i, &rep) in short.iter().zip(lambda.parts()) {
            long.extend(std::iter::repeat_n(i, rep));
        }
        out.entries[off] = t.get(&long);
    }
    Ok(out)
}

/// `sum_j w_j x_j^{(x)d}` for the columns `x_j` of `a`.
pub fn model_moment(w: &DVector<f64>, a: &DMatrix<f64>, d: usize) -> Result<DenseTensor> {
    let mut t = DenseTensor::zeros(a.nrows(), d)?;
    let mut col = vec![0.0; a.nrows()];
    for (j, &wj) in w.iter().enumerate() {
        col.iter_mut().zip(a.column(j).iter()).for_each(|(c, x)| *c = *x);
        t.add_rank_one(wj, &col);
    }
    Ok(t)
}

/// `sum_i tau_i ||P(sum_l pi_l v_l^{(x)i} - sum_j w_j a_j^{(x)i})||^2`.
pub fn dense_cost_weighted(
    w: &DVector<f64>,
    a: &DMatrix<f64>,
    pi: &DVector<f64>,
    v: &DMatrix<f64>,
    tau: &[f64],
) -> Result<f64> {
    if a.nrows() != v.nrows() || w.len() != a.ncols() || pi.len() != v.ncols() {
        return Err(MomError::InvalidArgument("dense cost shape mismatch".into()));
    }
    let mut total = 0.0;
    for (i, &t) in tau.iter().enumerate() {
        if t == 0.0 {
            continue;
        }
        let data = weighted_moment(v, pi, i + 1)?;
        let model = model_moment(w, a, i + 1)?;
        total += t * project_offdiag(&data.sub(&model)).norm_squared();
    }
    Ok(total)
}

/// `f^{[d]}(w, A; V)` with the sample moments `M^i`, `d = tau.len()`.
pub fn dense_cost(w: &DVector<f64>, a: &DMatrix<f64>, v: &DMatrix<f64>, tau: &[f64]) -> Result<f64> {
    let p = v.ncols();
    dense_cost_weighted(w, a, &DVector::from_element(p, 1.0 / p as f64), v, tau)
}

/// Residual norms of the coupled system: for every `lambda |- i`, `i <= d`,
/// `||P_lambda(M^i) - P(sum_j w_j m_j^{lambda_1} (x) ... (x) m_j^{lambda_l})||`.
///
/// `moments[s - 1]` is the n x r matrix of componentwise s-th moments; at
/// least `d` of them must be supplied (`moments[0]` is the mean matrix).
pub fn coupled_system_residuals(
    w: &DVector<f64>,
    moments: &[DMatrix<f64>],
    v: &DMatrix<f64>,
    d: usize,
) -> Result<Vec<(Partition, f64)>> {
    if moments.len() < d {
        return Err(MomError::InvalidArgument(format!(
            "need {d} componentwise moment matrices, got {}",
            moments.len()
        )));
    }
    let n = v.nrows();
    let mut out = Vec::new();
    for i in 1..=d {
        let sample = sample_moment(v, i)?;
        for lambda in partitions(i) {
            let lhs = project_partition(&sample, &lambda)?;
            let mut model = DenseTensor::zeros(n, lambda.len())?;
            let mut index = vec![0; lambda.len()];
            for off in 0..model.entries.len() {
                model.index_of(off, &mut index);
                if !distinct(&index) {
                    continue;
                }
                model.entries[off] = (0..w.len())
                    .map(|j| {
                        w[j] * index
                            .iter()
                            .zip(lambda.parts())
                            .map(|(&k, &s)| moments[s - 1][(k, j)])
                            .product::<f64>()
                    })
                    .sum();
            }
            out.push((lambda, lhs.sub(&model).norm_squared().sqrt()));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rank_one_second_moment() {
        let v = DMatrix::from_column_slice(2, 1, &[1.0, 2.0]);
        let t = sample_moment(&v, 2).unwrap();
        assert_eq!(t.entries(), &[1.0, 2.0, 2.0, 4.0]);
    }

    #[test]
    fn identity_columns_give_half_identity() {
        let v = DMatrix::<f64>::identity(2, 2);
        let t = sample_moment(&v, 2).unwrap();
        assert_eq!(t.entries(), &[0.5, 0.0, 0.0, 0.5]);
    }

    #[test]
    fn third_moment_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = DMatrix::from_fn(3, 4, |_, _| rng.random_range(-1.0..1.0));
        let t = sample_moment(&v, 3).unwrap();
        assert!(t.symmetry_defect() < 1e-15);
        let mut naive = 0.0;
        for l in 0..4 {
            naive += v[(0, l)] * v[(1, l)] * v[(2, l)];
        }
        assert!((t.get(&[2, 0, 1]) - naive / 4.0).abs() < 1e-15);
    }

    #[test]
    fn budget_guard() {
        let v = DMatrix::zeros(100, 2);
        assert!(matches!(sample_moment(&v, 4), Err(MomError::ResourceLimit(_))));
    }

    #[test]
    fn offdiag_examples() {
        let eye = DenseTensor::from_entries(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(project_offdiag(&eye).entries().iter().all(|x| *x == 0.0));
        let cube = DenseTensor::from_entries(2, 3, vec![1.0; 8]).unwrap();
        assert!(project_offdiag(&cube).entries().iter().all(|x| *x == 0.0));
        let ones = DenseTensor::from_entries(3, 2, vec![1.0; 9]).unwrap();
        let p = project_offdiag(&ones);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(p.get(&[i, j]), if i == j { 0.0 } else { 1.0 });
            }
        }
    }

    #[test]
    fn partition_projection_examples() {
        let v = DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0]);
        let t = sample_moment(&v, 3).unwrap();
        let diag = project_partition(&t, &Partition::new(vec![3]).unwrap()).unwrap();
        assert_eq!(diag.entries(), &[1.0, 8.0, 27.0]);
        let p21 = project_partition(&t, &Partition::new(vec![2, 1]).unwrap()).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 0.0 } else { v[i].powi(2) * v[j] };
                assert_eq!(p21.get(&[i, j]), expect);
            }
        }
        let ones = project_partition(&t, &Partition::ones(3)).unwrap();
        assert_eq!(ones, project_offdiag(&t));
        assert!(project_partition(&t, &Partition::ones(2)).is_err());
    }

    #[test]
    fn exact_fit_has_zero_cost() {
        let v = DMatrix::from_column_slice(3, 1, &[0.5, -1.0, 2.0]);
        let w = DVector::from_element(1, 1.0);
        let cost = dense_cost(&w, &v, &v, &[1.0, 1.0, 1.0]).unwrap();
        assert!(cost.abs() < 1e-24);
    }

    #[test]
    fn zero_weights_cost_is_data_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v = DMatrix::from_fn(3, 5, |_, _| rng.random_range(-1.0..1.0));
        let a = DMatrix::from_fn(3, 2, |_, _| rng.random_range(-1.0..1.0));
        let w = DVector::zeros(2);
        let cost = dense_cost(&w, &a, &v, &[0.0, 0.0, 2.5]).unwrap();
        let expect = 2.5 * project_offdiag(&sample_moment(&v, 3).unwrap()).norm_squared();
        assert!((cost - expect).abs() < 1e-14);
    }

    #[test]
    fn single_point_mass_has_zero_residuals() {
        let a = DMatrix::from_column_slice(3, 1, &[0.3, -1.2, 2.0]);
        let v = DMatrix::from_fn(3, 4, |i, _| a[i]);
        let moments: Vec<DMatrix<f64>> = (1..=3).map(|s| a.map(|x: f64| x.powi(s))).collect();
        let res = coupled_system_residuals(&DVector::from_element(1, 1.0), &moments, &v, 3).unwrap();
        assert_eq!(res.len(), 1 + 2 + 3);
        assert!(res.iter().all(|(_, r)| *r < 1e-13));
    }

    #[test]
    fn first_order_residual_is_mean_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v = DMatrix::from_fn(3, 6, |_, _| rng.random_range(-1.0..1.0));
        let a = DMatrix::from_fn(3, 2, |_, _| rng.random_range(-1.0..1.0));
        let w = DVector::from_vec(vec![0.3, 0.7]);
        let res = coupled_system_residuals(&w, &[a.clone()], &v, 1).unwrap();
        let mean = v.column_mean();
        assert!((res[0].1 - (mean - &a * &w).norm()).abs() < 1e-14);
    }
}

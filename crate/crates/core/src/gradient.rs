//! Implicit cost and gradient through the power-sum expansion of ESPs.
//!
//! Expanding the lower-Hessenberg determinant for `d! e_d` gives
//! `d! e_d = sum_{lambda |- d} N_lambda prod_{s in lambda} p_s`. With
//! `K_lambda = *_{s in lambda} G_s^{A,A}` and `H_lambda = *_{s in lambda} G_s^{A,V}`
//! (entrywise products), the cost is
//! `sum_i tau_i sum_{lambda |- i} N_lambda <w, K_lambda w - 2 H_lambda pi>` up
//! to a constant, and its derivative in `A` needs only `O(pr)` scratch per
//! partition term.

use crate::budget;
use crate::error::{MomError, Result};
use crate::esp::{DataPowers, GramCache};
use crate::partition::Partition;
use crate::MAX_ORDER;
use nalgebra::{DMatrix, DVector};
use std::collections::BTreeMap;

/// `N_lambda` for every `lambda |- i`, `i = 1..=d`.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionCoefficients {
    by_order: Vec<Vec<(Partition, i64)>>,
}

impl PartitionCoefficients {
    pub fn max_order(&self) -> usize {
        self.by_order.len()
    }

    /// Terms of order `i` (1-based), in reverse lexicographic partition order.
    pub fn order(&self, i: usize) -> &[(Partition, i64)] {
        &self.by_order[i - 1]
    }

    pub fn get(&self, lambda: &Partition) -> Option<i64> {
        self.by_order
            .get(lambda.total().checked_sub(1)?)?
            .iter()
            .find(|(l, _)| l == lambda)
            .map(|(_, c)| *c)
    }
}

/// Expand `k! e_k` as a polynomial in power sums with exact integer coefficients.
///
/// Uses the cofactor expansion of the Hessenberg determinant along its first
/// column: `D_k = sum_s (-1)^{s-1} (k-1)!/(k-s)! D_{k-s} p_s` with `D_0 = 1`.
pub fn partition_coefficients(d: usize) -> Result<PartitionCoefficients> {
    if d > MAX_ORDER {
        return Err(MomError::UnsupportedOrder(d));
    }
    let mut polys: Vec<BTreeMap<Vec<usize>, i64>> = vec![BTreeMap::from([(Vec::new(), 1)])];
    for k in 1..=d {
        let mut poly: BTreeMap<Vec<usize>, i64> = BTreeMap::new();
        for s in 1..=k {
            let falling: i64 = ((k - s + 1)..k).map(|x| x as i64).product();
            let sign = if s % 2 == 1 { 1 } else { -1 };
            for (mono, coeff) in &polys[k - s] {
                let mut key = mono.clone();
                key.push(s);
                key.sort_unstable_by(|a, b| b.cmp(a));
                *poly.entry(key).or_insert(0) += sign * falling * coeff;
            }
        }
        poly.retain(|_, c| *c != 0);
        polys.push(poly);
    }
    let by_order = polys
        .into_iter()
        .skip(1)
        .enumerate()
        .map(|(i, poly)| {
            let mut terms: Vec<(Partition, i64)> = poly
                .into_iter()
                .map(|(parts, c)| (Partition::new(parts).expect("nonempty parts"), c))
                .collect();
            terms.sort_by(|a, b| b.0.cmp(&a.0));
            debug_assert_eq!(terms.len(), crate::partition::partitions(i + 1).len());
            terms
        })
        .collect();
    Ok(PartitionCoefficients { by_order })
}

/// Gradient with respect to the weights and the mean matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub w: DVector<f64>,
    pub a: DMatrix<f64>,
}

impl Gradient {
    pub fn zeros(n: usize, r: usize) -> Self {
        Self {
            w: DVector::zeros(r),
            a: DMatrix::zeros(n, r),
        }
    }

    pub fn norm(&self) -> f64 {
        (self.w.norm_squared() + self.a.norm_squared()).sqrt()
    }

    pub fn axpy(&mut self, alpha: f64, other: &Gradient) {
        self.w.axpy(alpha, &other.w, 1.0);
        self.a += &other.a * alpha;
    }

    /// `(w, vec(A))` stacked, `A` column-major.
    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.w.len() + self.a.len(),
            self.w.iter().chain(self.a.iter()).copied(),
        )
    }

    /// Remove the component of the weight gradient along `1` (simplex tangent space).
    pub fn project_weights(&mut self) {
        let mean = self.w.mean();
        self.w.add_scalar_mut(-mean);
    }
}

/// Entrywise product of `mats[i]` over `i != skip` (all ones for an empty product).
fn hadamard_except(mats: &[&DMatrix<f64>], skip: Option<usize>, rows: usize, cols: usize) -> DMatrix<f64> {
    let mut out = budget::scratch(rows, cols);
    out.fill(1.0);
    for (i, m) in mats.iter().enumerate() {
        if Some(i) != skip {
            out.component_mul_assign(m);
        }
    }
    out
}

fn check_shapes(cache: &GramCache, a: &DMatrix<f64>, w: &DVector<f64>, pi: &DVector<f64>, d: usize) -> Result<()> {
    if cache.order() < d || cache.rank() != a.ncols() || w.len() != a.ncols() || pi.len() != cache.samples() {
        return Err(MomError::InvalidArgument(format!(
            "gradient inputs disagree: cache order {} rank {}, means {}x{}, {} weights, {} scalings",
            cache.order(),
            cache.rank(),
            a.nrows(),
            a.ncols(),
            w.len(),
            pi.len()
        )));
    }
    Ok(())
}

/// Cost without its data-only constant, via the partition expansion.
pub fn implicit_cost(
    cache: &GramCache,
    w: &DVector<f64>,
    pi: &DVector<f64>,
    tau: &[f64],
    coeffs: &PartitionCoefficients,
) -> Result<f64> {
    let d = tau.len();
    if coeffs.max_order() < d || cache.order() < d || pi.len() != cache.samples() {
        return Err(MomError::InvalidArgument("implicit cost: order or shape mismatch".into()));
    }
    let (r, p) = (cache.rank(), cache.samples());
    let mut total = 0.0;
    for (i, &t) in tau.iter().enumerate() {
        if t == 0.0 {
            continue;
        }
        let mut order_sum = 0.0;
        for (lambda, n_lambda) in coeffs.order(i + 1) {
            let gaa: Vec<&DMatrix<f64>> = lambda.parts().iter().map(|&s| cache.gaa(s)).collect();
            let gav: Vec<&DMatrix<f64>> = lambda.parts().iter().map(|&s| cache.gav(s)).collect();
            let k = hadamard_except(&gaa, None, r, r);
            let h = hadamard_except(&gav, None, r, p);
            order_sum += *n_lambda as f64 * (w.dot(&(&k * w)) - 2.0 * w.dot(&(&h * pi)));
        }
        total += t * order_sum;
    }
    Ok(total)
}

/// Gradients of the unweighted single-order costs `f^{(i)}`, `i = 1..=d`.
pub fn grad_by_order(
    cache: &GramCache,
    data: &DataPowers,
    a: &DMatrix<f64>,
    w: &DVector<f64>,
    pi: &DVector<f64>,
    d: usize,
    coeffs: &PartitionCoefficients,
) -> Result<Vec<Gradient>> {
    check_shapes(cache, a, w, pi, d)?;
    if data.order() < d || coeffs.max_order() < d {
        return Err(MomError::InvalidArgument("gradient order exceeds data powers".into()));
    }
    let (n, r) = a.shape();
    let p = cache.samples();
    let a_pows = crate::esp::entrywise_powers(a, d);
    let a_pow = |s: usize| -> DMatrix<f64> {
        if s == 0 {
            DMatrix::from_element(n, r, 1.0)
        } else {
            a_pows[s - 1].clone()
        }
    };

    let mut out = Vec::with_capacity(d);
    for i in 1..=d {
        let mut g = Gradient::zeros(n, r);
        for (lambda, n_lambda) in coeffs.order(i) {
            let coef = *n_lambda as f64;
            let parts = lambda.parts();
            let gaa: Vec<&DMatrix<f64>> = parts.iter().map(|&s| cache.gaa(s)).collect();
            let gav: Vec<&DMatrix<f64>> = parts.iter().map(|&s| cache.gav(s)).collect();

            let k = hadamard_except(&gaa, None, r, r);
            let h = hadamard_except(&gav, None, r, p);
            g.w += (&k * w - &h * pi) * (2.0 * coef);
            drop(h);

            // One term per distinct part size, times its multiplicity.
            for (size, mult) in lambda.multiplicities() {
                let idx = parts.iter().position(|&s| s == size).expect("part present");
                let prefactor = 2.0 * coef * (size * mult) as f64;
                let mut left = a_pow(size - 1);
                for j in 0..r {
                    left.column_mut(j).scale_mut(w[j]);
                }

                let k_rest = hadamard_except(&gaa, Some(idx), r, r);
                let mut aw = a_pow(size);
                for j in 0..r {
                    aw.column_mut(j).scale_mut(w[j]);
                }
                let quad = aw * k_rest;

                let mut h_rest = hadamard_except(&gav, Some(idx), r, p);
                for (l, &pl) in pi.iter().enumerate() {
                    h_rest.column_mut(l).scale_mut(pl);
                }
                let lin = data.power(size) * h_rest.transpose();
                budget::record(lin.len());

                g.a += left.component_mul(&(quad - lin)) * prefactor;
            }
        }
        out.push(g);
    }
    Ok(out)
}

/// Gradient of `sum_i tau_i f^{(i)}`.
pub fn grad(
    cache: &GramCache,
    data: &DataPowers,
    a: &DMatrix<f64>,
    w: &DVector<f64>,
    pi: &DVector<f64>,
    tau: &[f64],
    coeffs: &PartitionCoefficients,
) -> Result<Gradient> {
    let per_order = grad_by_order(cache, data, a, w, pi, tau.len(), coeffs)?;
    let mut total = Gradient::zeros(a.nrows(), a.ncols());
    for (g, &t) in per_order.iter().zip(tau) {
        if t != 0.0 {
            total.axpy(t, g);
        }
    }
    Ok(total)
}

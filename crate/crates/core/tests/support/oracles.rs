//! Implicit kernels against the explicit dense-tensor reference.

use super::tolerances::*;
use approx::assert_relative_eq;
use mixmom::als::{fit_basic, solve_row, AlsOptions};
use mixmom::dense::{dense_cost, dense_cost_weighted, project_offdiag, DenseTensor};
use mixmom::esp::{build_gram_cache, esp_from_power_sums, prep_norm_eqn, Hyperparams};
use mixmom::general::{solve_general_mean, EntrywiseFunction};
use mixmom::gradient::{grad, implicit_cost, partition_coefficients};
use mixmom::metrics::hungarian;
use mixmom::Partition;
use mixmom::{DataMatrix, Frame, MixtureEstimate, Problem};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn random_weights(rng: &mut ChaCha8Rng, r: usize) -> DVector<f64> {
    let w = DVector::from_fn(r, |_, _| rng.random_range(0.2..1.0));
    let s = w.sum();
    w / s
}

fn offdiag_rank_one(x: &[f64], d: usize) -> DenseTensor {
    let mut t = DenseTensor::zeros(x.len(), d).unwrap();
    t.add_rank_one(1.0, x);
    project_offdiag(&t)
}

fn factorial(d: usize) -> f64 {
    (1..=d).map(|i| i as f64).product()
}

pub fn masked_inner_product_is_scaled_esp() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for n in 1..=8 {
        for d in 1..=4.min(n) {
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let a: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let lhs = offdiag_rank_one(&v, d).dot(&offdiag_rank_one(&a, d));
            let prod: Vec<f64> = v.iter().zip(&a).map(|(x, y)| x * y).collect();
            let sums: Vec<f64> = (1..=d).map(|s| prod.iter().map(|x| x.powi(s as i32)).sum()).collect();
            let rhs = factorial(d) * esp_from_power_sums(&sums)[d - 1];
            assert_relative_eq!(lhs, rhs, max_relative = ESP_IDENTITY_RTOL, epsilon = ABS_FLOOR);
        }
    }
}

fn identity_problem(v: DMatrix<f64>, tau: Vec<f64>) -> Problem {
    Problem::new(DataMatrix::without_preprocessing(v), Hyperparams::new(tau).unwrap())
}

pub fn implicit_cost_differences_match_dense() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (n, d, r) in [(4, 2, 2), (5, 3, 3), (5, 4, 2), (6, 4, 3)] {
        let v = random_matrix(&mut rng, n, 30);
        let tau: Vec<f64> = (0..d).map(|_| rng.random_range(0.1..1.0)).collect();
        let problem = identity_problem(v.clone(), tau.clone());
        let coeffs = partition_coefficients(d).unwrap();
        let pi = problem.uniform_pi();
        let eval = |w: &DVector<f64>, a: &DMatrix<f64>| {
            let cache = problem.cache(a).unwrap();
            let esp = problem.cost(&cache, w).unwrap();
            let part = implicit_cost(&cache, w, &pi, &tau, &coeffs).unwrap();
            (esp, part, dense_cost(w, a, &v, &tau).unwrap())
        };
        let (w1, a1) = (random_weights(&mut rng, r), random_matrix(&mut rng, n, r));
        let (w2, a2) = (random_weights(&mut rng, r), random_matrix(&mut rng, n, r));
        let (e1, p1, d1) = eval(&w1, &a1);
        let (e2, p2, d2) = eval(&w2, &a2);
        let scale = d1.abs().max(d2.abs());
        assert!(((e1 - e2) - (d1 - d2)).abs() <= COST_DIFFERENCE_RTOL * scale, "esp route, n={n} d={d}");
        assert!(((p1 - p2) - (d1 - d2)).abs() <= COST_DIFFERENCE_RTOL * scale, "partition route, n={n} d={d}");
        assert!((e1 - p1).abs() <= ESP_IDENTITY_RTOL * scale);
    }
}

pub fn weight_normal_equation_matches_dense_gram() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (n, d, r, p) = (5, 4, 3, 12);
    let v = random_matrix(&mut rng, n, p);
    let a = random_matrix(&mut rng, n, r);
    let tau = [0.4, 0.3, 0.2, 0.1];
    let pi = DVector::from_fn(p, |_, _| rng.random_range(0.0..1.0));
    let cache = build_gram_cache(&a, &v, d).unwrap();
    let ne = prep_norm_eqn(&cache, &DMatrix::from_column_slice(p, 1, pi.as_slice()), d, &tau).unwrap();

    let mut lhs = DMatrix::zeros(r, r);
    let mut rhs = DVector::zeros(r);
    for (i, &t) in tau.iter().enumerate() {
        let order = i + 1;
        let comps: Vec<DenseTensor> = (0..r)
            .map(|j| offdiag_rank_one(a.column(j).as_slice(), order))
            .collect();
        let mut data = DenseTensor::zeros(n, order).unwrap();
        for l in 0..p {
            data.add_rank_one(pi[l], v.column(l).as_slice());
        }
        let data = project_offdiag(&data);
        for j in 0..r {
            rhs[j] += t * comps[j].dot(&data);
            for k in 0..r {
                lhs[(j, k)] += t * comps[j].dot(&comps[k]);
            }
        }
    }
    assert_relative_eq!(ne.lhs, lhs, max_relative = ESP_IDENTITY_RTOL, epsilon = ABS_FLOOR);
    assert_relative_eq!(DVector::from(ne.rhs.column(0)), rhs, max_relative = ESP_IDENTITY_RTOL, epsilon = ABS_FLOOR);

    // Its solution minimizes the dense weighted cost.
    let w = ne.lhs.clone().cholesky().unwrap().solve(&DVector::from(ne.rhs.column(0)));
    let base = dense_cost_weighted(&w, &a, &pi, &v, &tau).unwrap();
    for j in 0..r {
        for step in [1e-3, -1e-3] {
            let mut wp = w.clone();
            wp[j] += step;
            assert!(dense_cost_weighted(&wp, &a, &pi, &v, &tau).unwrap() >= base - 1e-12);
        }
    }
}

/// Minimize the dense cost over row `k` of `a` by recovering the quadratic
/// from cost values at the origin, unit vectors and pairwise sums.
fn dense_row_minimizer(w: &DVector<f64>, a: &DMatrix<f64>, v: &DMatrix<f64>, tau: &[f64], k: usize) -> DVector<f64> {
    let r = a.ncols();
    let cost = |x: &DVector<f64>| {
        let mut b = a.clone();
        b.row_mut(k).copy_from(&x.transpose());
        dense_cost(w, &b, v, tau).unwrap()
    };
    let e = |j: usize| DVector::from_fn(r, |i, _| if i == j { 1.0 } else { 0.0 });
    let c0 = cost(&DVector::zeros(r));
    let mut lin = DVector::zeros(r);
    let mut quad = DMatrix::zeros(r, r);
    for j in 0..r {
        let (fp, fm) = (cost(&e(j)), cost(&-e(j)));
        lin[j] = (fp - fm) / 2.0;
        quad[(j, j)] = (fp + fm) / 2.0 - c0;
    }
    for i in 0..r {
        for j in 0..i {
            let fij = cost(&(e(i) + e(j)));
            let q = (fij - c0 - lin[i] - lin[j] - quad[(i, i)] - quad[(j, j)]) / 2.0;
            quad[(i, j)] = q;
            quad[(j, i)] = q;
        }
    }
    -quad.cholesky().unwrap().solve(&lin) / 2.0
}

pub fn row_update_matches_dense_least_squares() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for (n, d, r) in [(4, 2, 2), (5, 3, 3), (6, 4, 3)] {
        let v = random_matrix(&mut rng, n, 25);
        let tau: Vec<f64> = (0..d).map(|_| rng.random_range(0.2..1.0)).collect();
        let problem = identity_problem(v.clone(), tau.clone());
        let w = random_weights(&mut rng, r);
        let a0 = random_matrix(&mut rng, n, r);
        for k in 0..n {
            let expected = dense_row_minimizer(&w, &a0, &v, &tau, k);
            let mut a = a0.clone();
            let mut cache = problem.cache(&a).unwrap();
            let pi = problem.data.values().row(k).transpose() / 25.0;
            let row = solve_row(&problem, k, &mut cache, &mut a, &w, &pi, problem.row_means()[k], &tau).unwrap();
            assert_relative_eq!(row, expected, max_relative = ROW_SOLVE_RTOL, epsilon = ROW_SOLVE_RTOL);
        }
    }
}

pub fn gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    for d in 2..=5 {
        let (n, r, p) = (6, 3, 20);
        let v = random_matrix(&mut rng, n, p);
        let tau: Vec<f64> = (0..d).map(|_| rng.random_range(0.2..1.0)).collect();
        let problem = identity_problem(v.clone(), tau.clone());
        let coeffs = partition_coefficients(d).unwrap();
        let w = random_weights(&mut rng, r);
        let a = random_matrix(&mut rng, n, r);
        let cache = problem.cache(&a).unwrap();
        let g = grad(&cache, &problem.powers, &a, &w, &problem.uniform_pi(), &tau, &coeffs).unwrap();
        let f = |w: &DVector<f64>, a: &DMatrix<f64>| dense_cost(w, a, &v, &tau).unwrap();
        let scale = g.w.amax().max(g.a.amax()).max(1.0);
        for j in 0..r {
            let h = FD_STEP * (1.0 + w[j].abs());
            let (mut wp, mut wm) = (w.clone(), w.clone());
            wp[j] += h;
            wm[j] -= h;
            let fd = (f(&wp, &a) - f(&wm, &a)) / (2.0 * h);
            assert!((fd - g.w[j]).abs() <= GRADIENT_FD_TOL * scale, "d={d} w[{j}]: {fd} vs {}", g.w[j]);
        }
        for k in 0..n {
            for j in 0..r {
                let h = FD_STEP * (1.0 + a[(k, j)].abs());
                let (mut ap, mut am) = (a.clone(), a.clone());
                ap[(k, j)] += h;
                am[(k, j)] -= h;
                let fd = (f(&w, &ap) - f(&w, &am)) / (2.0 * h);
                assert!((fd - g.a[(k, j)]).abs() <= GRADIENT_FD_TOL * scale, "d={d} a[{k},{j}]");
            }
        }
    }
}

pub fn basic_iterations_never_increase_the_dense_cost() {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let (n, r, d, p) = (6, 2, 4, 60);
    let v = random_matrix(&mut rng, n, p);
    let problem = Problem::from_raw(v, d, None).unwrap();
    let tau = problem.hyper.tau().to_vec();
    let values = problem.data.values().clone();
    let mut est = MixtureEstimate {
        weights: random_weights(&mut rng, r),
        means: random_matrix(&mut rng, n, r),
        frame: Frame::Preprocessed,
    };
    let mut last = dense_cost(&est.weights, &est.means, &values, &tau).unwrap();
    let options = AlsOptions { max_iter: 1, xtol: 0.0, ..AlsOptions::default() };
    for _ in 0..15 {
        let fit = fit_basic(&problem, Some(&est), r, &options).unwrap();
        est = fit.working;
        let cost = dense_cost(&est.weights, &est.means, &values, &tau).unwrap();
        assert!(cost <= last + DESCENT_SLACK * last.abs(), "cost rose from {last} to {cost}");
        last = cost;
    }
}

pub fn identity_general_mean_reproduces_planted_means() {
    // Every sample is exactly its component mean, so the true parameters are
    // an exact fixed point of the row solves.
    let (n, r, p) = (6, 3, 300);
    let means = DMatrix::from_row_slice(
        n,
        r,
        &[1.0, -1.0, 0.5, 0.0, 2.0, -0.5, 1.5, 0.3, 0.0, -1.0, 0.7, 1.2, 0.2, -0.4, 0.9, 0.8, 1.1, -1.3],
    );
    let labels: Vec<usize> = (0..p).map(|l| [0, 0, 1, 2, 2][l % 5]).collect();
    let v = DMatrix::from_fn(n, p, |i, l| means[(i, labels[l])]);
    let weights = DVector::from_vec(vec![0.4, 0.2, 0.4]);
    let problem = Problem::from_raw(v, 4, None).unwrap();
    let est = MixtureEstimate {
        weights,
        means: means.clone(),
        frame: Frame::Raw,
    };
    let y = solve_general_mean(&EntrywiseFunction::identity(n), &problem, &est).unwrap().y;
    assert_relative_eq!(y, means, max_relative = FIXED_POINT_TOL, epsilon = FIXED_POINT_TOL);
}

pub fn identity_general_mean_at_a_converged_fit() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let spec = mixmom::zoo::gen_gaussian_protocol(6, 2, 4).unwrap();
    let (v, _) = mixmom::zoo::sample(&spec, 3000, 4).unwrap();
    let problem = Problem::from_raw(v, 4, None).unwrap();
    let options = AlsOptions { xtol: 1e-13, max_iter: 5000, seed: rng.random(), ..AlsOptions::default() };
    let fit = fit_basic(&problem, None, 2, &options).unwrap();
    assert!(fit.converged);
    let y = solve_general_mean(&EntrywiseFunction::identity(6), &problem, &fit.estimate).unwrap().y;
    assert_relative_eq!(y, fit.estimate.means, max_relative = FIXED_POINT_TOL, epsilon = FIXED_POINT_TOL);
}

pub fn coefficient_table_matches_reference_values() {
    let table: &[(&[usize], i64)] = &[
        (&[1], 1),
        (&[1, 1], 1),
        (&[2], -1),
        (&[1, 1, 1], 1),
        (&[2, 1], -3),
        (&[3], 2),
        (&[1, 1, 1, 1], 1),
        (&[2, 1, 1], -6),
        (&[2, 2], 3),
        (&[3, 1], 8),
        (&[4], -6),
        (&[1, 1, 1, 1, 1], 1),
        (&[2, 1, 1, 1], -10),
        (&[3, 1, 1], 20),
        (&[2, 2, 1], 15),
        (&[4, 1], -30),
        (&[3, 2], -20),
        (&[5], 24),
    ];
    let coeffs = partition_coefficients(5).unwrap();
    for (parts, n) in table {
        assert_eq!(coeffs.get(&Partition::new(parts.to_vec()).unwrap()), Some(*n), "{parts:?}");
    }
    let listed: usize = (1..=5).map(|i| coeffs.order(i).len()).sum();
    assert_eq!(listed, table.len());
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

pub fn hungarian_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for r in 1..=5 {
        let perms = permutations(r);
        for _ in 0..200 {
            let cost = DMatrix::from_fn(r, r, |_, _| rng.random_range(0.0..10.0f64).round());
            let total = |p: &[usize]| p.iter().enumerate().map(|(i, &j)| cost[(i, j)]).sum::<f64>();
            let brute = perms.iter().map(|p| total(p)).fold(f64::INFINITY, f64::min);
            let assign = hungarian(&cost);
            assert!((total(&assign) - brute).abs() <= ABS_FLOOR, "r = {r}: {cost}");
        }
    }
}

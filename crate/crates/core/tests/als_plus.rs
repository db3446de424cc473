use approx::assert_relative_eq;
use mixmom::als::{fit_basic, solve_row, update_means, AlsOptions};
use mixmom::gradient::partition_coefficients;
use mixmom::linalg::factorization_count;
use mixmom::metrics::match_and_score;
use mixmom::plus::{anderson_step, data_box, fit_plus, update_mean_block, AaOutcome, AaState};
use mixmom::zoo::{gen_gaussian_protocol, sample};
use mixmom::{AaConfig, AlsPlusOptions, Frame, MixtureEstimate, Problem, WarmupSchedule};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn gaussian_problem(n: usize, r: usize, p: usize, seed: u64) -> (Problem, MixtureEstimate) {
    let spec = gen_gaussian_protocol(n, r, seed).unwrap();
    let (v, _) = sample(&spec, p, seed).unwrap();
    let problem = Problem::from_raw(v, 4, None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = DVector::from_fn(r, |_, _| rng.random_range(0.2..1.0));
    let est = MixtureEstimate {
        weights: &w / w.sum(),
        means: DMatrix::from_fn(n, r, |_, _| rng.random_range(-1.0..1.0)),
        frame: Frame::Preprocessed,
    };
    (problem, est)
}

#[test]
fn single_row_block_equals_row_solve() {
    let (problem, est) = gaussian_problem(8, 3, 500, 1);
    let tau = problem.hyper.tau().to_vec();
    for k in 0..problem.n() {
        let mut blocked = est.means.clone();
        let mut cache = problem.cache(&blocked).unwrap();
        update_mean_block(&problem, &mut cache, &[k], &est.weights, &mut blocked, &tau, None).unwrap();

        let mut single = est.means.clone();
        let mut cache = problem.cache(&single).unwrap();
        let pi = problem.data.values().row(k).transpose() / problem.p() as f64;
        solve_row(&problem, k, &mut cache, &mut single, &est.weights, &pi, problem.row_means()[k], &tau).unwrap();
        assert_relative_eq!(blocked, single, max_relative = 1e-12, epsilon = 1e-12);
    }
}

#[test]
fn deflate_then_restore_is_identity() {
    let (problem, est) = gaussian_problem(7, 3, 200, 2);
    let fresh = problem.cache(&est.means).unwrap();
    let mut cache = fresh.clone();
    cache.deflate(&est.means, &problem.powers, &[1, 4]);
    cache.restore(&est.means, &problem.powers, &[1, 4]);
    for s in 1..=problem.order() {
        assert_relative_eq!(cache.gaa(s), fresh.gaa(s), max_relative = 1e-12, epsilon = 1e-12);
        assert_relative_eq!(cache.gav(s), fresh.gav(s), max_relative = 1e-12, epsilon = 1e-12);
    }
}

#[test]
fn one_factorization_per_block() {
    let (problem, est) = gaussian_problem(12, 3, 300, 3);
    let tau = problem.hyper.tau().to_vec();
    for m in [1, 2, 3, 4, 5] {
        let mut a = est.means.clone();
        let mut cache = problem.cache(&a).unwrap();
        let rows: Vec<usize> = (0..problem.n()).collect();
        let before = factorization_count();
        for block in rows.chunks(m) {
            update_mean_block(&problem, &mut cache, block, &est.weights, &mut a, &tau, None).unwrap();
        }
        assert_eq!(factorization_count() - before, problem.n().div_ceil(m), "m = {m}");
    }
}

#[test]
fn block_updates_respect_the_data_box() {
    let (problem, mut est) = gaussian_problem(9, 3, 400, 4);
    est.means *= 25.0;
    let tau = problem.hyper.tau().to_vec();
    let (lo, hi) = data_box(&problem);
    let mut cache = problem.cache(&est.means).unwrap();
    let rows: Vec<usize> = (0..problem.n()).collect();
    for block in rows.chunks(2) {
        update_mean_block(&problem, &mut cache, block, &est.weights, &mut est.means, &tau, Some((&lo, &hi))).unwrap();
    }
    for k in 0..problem.n() {
        for j in 0..3 {
            assert!(lo[k] <= est.means[(k, j)] && est.means[(k, j)] <= hi[k]);
        }
    }
}

fn plain_sweep(problem: &Problem, w: &DVector<f64>, a: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = a.clone();
    let mut cache = problem.cache(a).unwrap();
    update_means(problem, &mut cache, &mut out, w, problem.hyper.tau()).unwrap();
    out
}

#[test]
fn empty_history_takes_a_plain_sweep() {
    let (problem, est) = gaussian_problem(8, 3, 500, 5);
    let coeffs = partition_coefficients(problem.order()).unwrap();
    let config = AaConfig::default();
    let mut state = AaState::new(&config);
    let (w, a, outcome) = anderson_step(&problem, &mut state, &est.weights, &est.means, &config, &coeffs).unwrap();
    assert_eq!(outcome, AaOutcome::Seeded);
    assert_eq!(state.len(), 1);
    assert_eq!(w, est.weights);
    assert_eq!(a, plain_sweep(&problem, &est.weights, &est.means));
}

#[test]
fn rejected_extrapolation_returns_the_plain_sweep() {
    let (problem, est) = gaussian_problem(8, 3, 2000, 6);
    let coeffs = partition_coefficients(problem.order()).unwrap();
    let config = AaConfig { depth: 4, ..AaConfig::default() };
    let mut state = AaState::new(&config);
    let (mut w, mut a) = (est.weights, est.means);
    let mut rejected = 0;
    for _ in 0..40 {
        let sweep = plain_sweep(&problem, &w, &a);
        let (nw, na, outcome) = anderson_step(&problem, &mut state, &w, &a, &config, &coeffs).unwrap();
        assert!(state.len() <= config.depth);
        match outcome {
            AaOutcome::Accepted(alpha) => assert!(alpha > 0.0 && alpha <= 1.0),
            AaOutcome::Seeded => assert_eq!(na, sweep),
            AaOutcome::Misaligned | AaOutcome::NoDecrease => {
                rejected += 1;
                assert_eq!((&nw, &na), (&w, &sweep));
                assert!(state.is_empty());
            }
        }
        let cache = problem.cache(&na).unwrap();
        w = mixmom::als::update_weights(&cache, problem.order(), problem.hyper.tau(), 0.0).unwrap();
        a = na;
    }
    // The iterate settles at a fixed point, where extrapolation has nothing to offer.
    assert!(rejected > 0);
}

#[test]
fn warmup_keeps_box_and_weight_floor() {
    let (problem, _) = gaussian_problem(10, 4, 1000, 7);
    let (lo, hi) = data_box(&problem);
    for steps in [1, 3, 8, 20] {
        let options = AlsPlusOptions {
            base: AlsOptions { max_iter: steps, seed: 7, ..AlsOptions::default() },
            ..AlsPlusOptions::default()
        };
        let fit = fit_plus(&problem, None, 4, &options).unwrap();
        let est = fit.working;
        let floor = options.schedule.floor_at(steps - 1) / 4.0;
        assert!(est.weights.min() >= floor - 1e-10, "steps {steps}: {}", est.weights);
        assert!((est.weights.sum() - 1.0).abs() < 1e-12);
        for k in 0..problem.n() {
            for j in 0..4 {
                assert!(lo[k] <= est.means[(k, j)] && est.means[(k, j)] <= hi[k]);
            }
        }
    }
}

#[test]
fn floor_schedule_is_non_increasing() {
    let s = WarmupSchedule::default();
    let floors: Vec<f64> = (0..50).map(|t| s.floor_at(t)).collect();
    assert!(floors.windows(2).all(|f| f[1] <= f[0]));
    assert!(floors.iter().all(|&q| q < 1.0));
}

#[test]
fn single_component_matches_basic() {
    let (problem, _) = gaussian_problem(6, 1, 800, 8);
    let options = AlsPlusOptions::default();
    let plus = fit_plus(&problem, None, 1, &options).unwrap();
    let basic = fit_basic(&problem, None, 1, &options.base).unwrap();
    assert_eq!(plus.estimate.weights.as_slice(), &[1.0]);
    assert_relative_eq!(plus.estimate.means, basic.estimate.means, max_relative = 1e-8, epsilon = 1e-10);
}

#[test]
fn planted_point_masses_agree_with_basic() {
    let (n, r, p) = (6, 3, 600);
    let means = DMatrix::from_row_slice(
        n,
        r,
        &[1.0, -1.0, 0.5, 0.0, 2.0, -0.5, 1.5, 0.3, 0.0, -1.0, 0.7, 1.2, 0.2, -0.4, 0.9, 0.8, 1.1, -1.3],
    );
    let v = DMatrix::from_fn(n, p, |i, l| means[(i, [0, 0, 1, 2, 2][l % 5])]);
    let weights = DVector::from_vec(vec![0.4, 0.2, 0.4]);
    let problem = Problem::from_raw(v, 4, None).unwrap();
    let base = AlsOptions { xtol: 1e-12, max_iter: 3000, seed: 1, ..AlsOptions::default() };
    let plus = fit_plus(&problem, None, r, &AlsPlusOptions { base: base.clone(), ..AlsPlusOptions::default() }).unwrap();
    let basic = fit_basic(&problem, None, r, &base).unwrap();
    for fit in [&plus, &basic] {
        let report = match_and_score(&fit.estimate, &weights, &means, &[]).unwrap();
        // Percent of squared relative error; 1e-10 percent is ~1e-6 in norm.
        assert!(report.mean_error < 1e-10 && report.weight_error < 1e-10, "{report:?}");
    }
}

#[test]
fn acceleration_does_not_slow_convergence() {
    const SEEDS: u64 = 20;
    const REQUIRED_SHARE: f64 = 0.7;
    let mut wins = 0;
    for seed in 0..SEEDS {
        let spec = gen_gaussian_protocol(15, 3, seed).unwrap();
        let (v, _) = sample(&spec, 20_000, seed).unwrap();
        let problem = Problem::from_raw(v, 4, None).unwrap();
        let with = AlsPlusOptions { base: AlsOptions { seed, ..AlsOptions::default() }, ..AlsPlusOptions::default() };
        let without = AlsPlusOptions { aa: AaConfig { enabled: false, ..AaConfig::default() }, ..with.clone() };
        let a = fit_plus(&problem, None, 3, &with).unwrap();
        let b = fit_plus(&problem, None, 3, &without).unwrap();
        if a.iterations <= b.iterations {
            wins += 1;
        }
    }
    assert!(wins as f64 >= REQUIRED_SHARE * SEEDS as f64, "accelerated run no slower in {wins}/{SEEDS} seeds");
}

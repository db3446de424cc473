//! Memory and time scaling of the implicit paths.

use super::tolerances::LINEAR_SLACK;
use mixmom::als::{fit_basic, update_means, update_weights, AlsOptions};
use mixmom::budget::{self, Ceiling};
use mixmom::general::{solve_general_mean, solve_second_moment_floored, EntrywiseFunction};
use mixmom::gradient::{grad, partition_coefficients};
use mixmom::plus::fit_plus;
use mixmom::zoo::{gen_gaussian_protocol, sample};
use mixmom::{AlsPlusOptions, Problem};
use std::time::Instant;

const TIMING_REPEATS: usize = 7;

fn problem(n: usize, r: usize, p: usize, seed: u64) -> Problem {
    let spec = gen_gaussian_protocol(n, r, seed).unwrap();
    let (v, _) = sample(&spec, p, seed).unwrap();
    Problem::from_raw(v, 4, None).unwrap()
}

pub fn no_implicit_allocation_reaches_n_to_the_d() {
    let (n, r, p, d): (usize, usize, usize, usize) = (12, 3, 200, 4);
    let limit = (n * p).max(r * p).max(r * r);
    assert!(limit < n.pow(d as u32));
    let problem = problem(n, r, p, 1);
    let _ceiling = Ceiling::install(limit);
    budget::reset_peak();

    let options = AlsPlusOptions {
        base: AlsOptions { max_iter: 40, seed: 1, ..AlsOptions::default() },
        ..AlsPlusOptions::default()
    };
    let fit = fit_plus(&problem, None, r, &options).unwrap();
    fit_basic(&problem, Some(&fit.estimate), r, &AlsOptions { max_iter: 5, ..AlsOptions::default() }).unwrap();
    let cache = problem.cache(&fit.working.means).unwrap();
    let coeffs = partition_coefficients(d).unwrap();
    grad(&cache, &problem.powers, &fit.working.means, &fit.working.weights, &problem.uniform_pi(), problem.hyper.tau(), &coeffs)
        .unwrap();
    solve_general_mean(&EntrywiseFunction::power(3, n), &problem, &fit.estimate).unwrap();
    solve_second_moment_floored(&problem, &fit.estimate, 1e-4).unwrap();

    assert!(budget::peak() > 0);
    assert!(budget::peak() <= limit, "peak allocation {} above {limit}", budget::peak());
}

fn median_sweep_seconds(problem: &Problem, r: usize) -> f64 {
    let start = mixmom::als::default_init(problem.n(), r, 3);
    let d = problem.order();
    let tau = problem.hyper.tau();
    let mut times: Vec<f64> = (0..TIMING_REPEATS)
        .map(|_| {
            let mut a = start.means.clone();
            let t = Instant::now();
            let mut cache = problem.cache(&a).unwrap();
            update_means(problem, &mut cache, &mut a, &start.weights, tau).unwrap();
            let cache = problem.cache(&a).unwrap();
            std::hint::black_box(update_weights(&cache, d, tau, 0.0).unwrap());
            t.elapsed().as_secs_f64()
        })
        .collect();
    times.sort_by(f64::total_cmp);
    times[TIMING_REPEATS / 2]
}

pub fn sweep_time_grows_at_most_linearly_in_n() {
    let (r, p) = (3, 4000);
    let times: Vec<f64> = [10, 20, 40].iter().map(|&n| median_sweep_seconds(&problem(n, r, p, 2), r)).collect();
    let ratio = times[2] / times[0];
    assert!(
        ratio <= 4.0 * LINEAR_SLACK,
        "sweep times {times:?}: quadrupling n multiplied the time by {ratio:.2}"
    );
}


mod io;

use clap::{Args, Parser, Subcommand};
use io::{columns, EstimateFile, GeneralMeansFile};
use mixmom::als::{fit_basic, update_means, update_weights, AlsOptions};
use mixmom::general::{
    solve_general_mean, solve_second_moment_floored, EntrywiseFunction, ScalarMap,
};
use mixmom::gradient::{grad, partition_coefficients};
use mixmom::metrics::{
    match_and_score, rank_scan, rank_scan_csv, sample_reference, sample_weights, ExtraMoment,
    DEFAULT_REL_IMPROVE_TOL,
};
use mixmom::plus::fit_plus;
use mixmom::zoo::{self, MixtureSpec, Protocol};
use mixmom::{AaConfig, AlsPlusOptions, FitResult, MomError, Problem, WarmupSchedule};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

/// Environment variable giving the default number of worker threads.
const THREADS_ENV: &str = "MIXMOM_THREADS";

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Io(String),
    Numerical(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) => 2,
            Self::Io(_) => 3,
            Self::Numerical(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Config(m) => write!(f, "configuration error: {m}"),
            Self::Io(m) => write!(f, "i/o error: {m}"),
            Self::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl From<MomError> for CliError {
    fn from(e: MomError) -> Self {
        match e {
            MomError::InvalidArgument(_) | MomError::Validation(_) | MomError::UnsupportedOrder(_) => {
                Self::Config(e.to_string())
            }
            MomError::ResourceLimit(_) | MomError::Conditioning(_) | MomError::GuardedDivision { .. } => {
                Self::Numerical(e.to_string())
            }
        }
    }
}

#[derive(Parser)]
#[command(name = "mixmom", version, about = "Method-of-moments fitting of conditionally-independent mixtures")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a protocol or a mixture spec.
    Generate(GenerateArgs),
    /// Fit mixing weights and means.
    Fit(FitArgs),
    /// Componentwise expectations E_j[g(X)] given a fitted estimate.
    GeneralMeans(GeneralMeansArgs),
    /// Score an estimate against label-conditional sample statistics.
    Evaluate(EvaluateArgs),
    /// Fit a list of ranks and report the final cost of each.
    RankScan(RankScanArgs),
    /// Time the main kernels on a synthetic problem.
    Bench(BenchArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// gaussian | bernoulli | gamma | heterogeneous | poisson-image | planted
    #[arg(long, conflicts_with = "spec")]
    protocol: Option<String>,
    /// Mixture spec JSON to sample from instead of a protocol.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 15)]
    n: usize,
    #[arg(long, default_value_t = 3)]
    r: usize,
    #[arg(long, default_value_t = 20000)]
    p: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Image side length for poisson-image (n = side^2).
    #[arg(long, default_value_t = 8)]
    side: usize,
    /// Directory receiving data.csv, labels.csv and spec.json.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Clone)]
struct FitParams {
    /// Highest moment order.
    #[arg(long, default_value_t = 4)]
    d: usize,
    /// Order weights tau_1..tau_d (comma separated); default (n-i)!/n!.
    #[arg(long, value_delimiter = ',')]
    tau: Option<Vec<f64>>,
    #[arg(long, default_value_t = 1e-4)]
    xtol: f64,
    #[arg(long, default_value_t = 200)]
    max_iter: usize,
    #[arg(long, default_value_t = 20)]
    warmup_steps: usize,
    #[arg(long, default_value_t = 2)]
    block_size: usize,
    #[arg(long, default_value_t = 15)]
    aa_depth: usize,
    #[arg(long, default_value_t = 1e-4)]
    eps_aa: f64,
    /// Warm-up weight floor q (each weight stays above q / r).
    #[arg(long, default_value_t = 0.1)]
    q_floor: f64,
    #[arg(long)]
    no_aa: bool,
    #[arg(long)]
    no_drop_one: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl FitParams {
    fn options(&self) -> AlsPlusOptions {
        AlsPlusOptions {
            base: AlsOptions {
                xtol: self.xtol,
                max_iter: self.max_iter,
                tau: self.tau.clone(),
                weight_floor: 0.0,
                cost_rtol: None,
                seed: self.seed,
            },
            schedule: WarmupSchedule {
                warmup_steps: self.warmup_steps,
                block_size: self.block_size,
                warmup_floor: self.q_floor,
                main_floor: 0.0,
            },
            aa: AaConfig {
                enabled: !self.no_aa,
                depth: self.aa_depth,
                eps_aa: self.eps_aa,
                ..AaConfig::default()
            },
            drop_one: !self.no_drop_one,
        }
    }

    fn problem(&self, data: &Path) -> Result<Problem, CliError> {
        let raw = io::read_matrix_csv(data)?;
        Ok(Problem::from_raw(raw, self.d, self.tau.clone())?)
    }
}

#[derive(Args)]
struct FitArgs {
    /// Data CSV: n rows (coordinates), p columns (samples), no header.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    r: usize,
    #[command(flatten)]
    params: FitParams,
    /// Starting estimate JSON (raw frame).
    #[arg(long)]
    init: Option<PathBuf>,
    /// Plain alternating least squares without warm-up or acceleration.
    #[arg(long)]
    basic: bool,
    /// Exit with status 4 when the fit does not converge.
    #[arg(long)]
    strict: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GeneralMeansArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    estimate: PathBuf,
    /// Entrywise function for every coordinate: identity, square, cube,
    /// power:<s>, log, indicator:<t>. A comma-separated list gives one per
    /// coordinate.
    #[arg(long, default_value = "square")]
    g: String,
    /// Enforce E_j[X^2] >= mean^2 + floor entrywise (only with --g square).
    #[arg(long, num_args = 0..=1, default_missing_value = "0.0001")]
    floor: Option<f64>,
    #[arg(long, default_value_t = 4)]
    d: usize,
    #[arg(long, value_delimiter = ',')]
    tau: Option<Vec<f64>>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    estimate: PathBuf,
    /// General-means JSON files to score under the same matching.
    #[arg(long)]
    moments: Vec<PathBuf>,
    /// Report JSON; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RankScanArgs {
    #[arg(long)]
    data: PathBuf,
    /// Ranks to fit, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    ranks: Vec<usize>,
    #[arg(long, default_value_t = DEFAULT_REL_IMPROVE_TOL)]
    rel_tol: f64,
    #[command(flatten)]
    params: FitParams,
    /// Ranks fitted concurrently (default: $MIXMOM_THREADS or 1).
    #[arg(long)]
    jobs: Option<usize>,
    /// CSV with columns r,cost.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value = "gaussian")]
    protocol: String,
    #[arg(long, default_value_t = 15)]
    n: usize,
    #[arg(long, default_value_t = 3)]
    r: usize,
    #[arg(long, default_value_t = 20000)]
    p: usize,
    #[arg(long, default_value_t = 4)]
    d: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV with columns phase,seconds,flops; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn protocol_spec(protocol: Protocol, n: usize, r: usize, side: usize, seed: u64) -> Result<MixtureSpec, CliError> {
    let spec = match protocol {
        Protocol::Gaussian => zoo::gen_gaussian_protocol(n, r, seed)?,
        Protocol::Bernoulli => zoo::gen_bernoulli_protocol(n, r, seed)?,
        Protocol::Gamma => zoo::gen_gamma_protocol(n, r, seed)?,
        Protocol::Heterogeneous => zoo::gen_heterogeneous_protocol(r, seed)?,
        Protocol::PoissonImage => {
            let images = zoo::smooth_blob_images(side, r, seed);
            zoo::gen_poisson_image_protocol(&images, seed)?
        }
        Protocol::Planted => zoo::gen_planted_gaussian(n, r, seed)?,
    };
    Ok(spec)
}

fn cmd_generate(args: &GenerateArgs) -> Result<(), CliError> {
    let spec = match (&args.protocol, &args.spec) {
        (Some(name), None) => protocol_spec(name.parse()?, args.n, args.r, args.side, args.seed)?,
        (None, Some(path)) => io::read_json::<MixtureSpec>(path)?,
        _ => return Err(CliError::Config("give exactly one of --protocol or --spec".into())),
    };
    let (v, labels) = zoo::sample(&spec, args.p, args.seed)?;
    std::fs::create_dir_all(&args.out_dir).map_err(|e| CliError::Io(format!("{}: {e}", args.out_dir.display())))?;
    io::write_matrix_csv(&args.out_dir.join("data.csv"), &v)?;
    io::write_labels(&args.out_dir.join("labels.csv"), &labels)?;
    io::write_json(&args.out_dir.join("spec.json"), &spec)
}

fn estimate_file(fit: &FitResult) -> EstimateFile {
    EstimateFile {
        weights: fit.estimate.weights.iter().copied().collect(),
        means: columns(&fit.estimate.means),
        trace: fit.trace.clone(),
        converged: fit.converged,
        iterations: fit.iterations,
        final_cost: Some(fit.final_cost),
        warnings: fit.warnings.clone(),
    }
}

fn cmd_fit(args: &FitArgs) -> Result<(), CliError> {
    let problem = args.params.problem(&args.data)?;
    let init = args
        .init
        .as_ref()
        .map(|p| io::read_json::<EstimateFile>(p)?.estimate())
        .transpose()?;
    if args.r == 0 {
        return Err(CliError::Config("r must be at least 1".into()));
    }
    let options = args.params.options();
    let fit = if args.basic {
        fit_basic(&problem, init.as_ref(), args.r, &options.base)?
    } else {
        fit_plus(&problem, init.as_ref(), args.r, &options)?
    };
    io::write_json(&args.out, &estimate_file(&fit))?;
    if args.strict && !fit.converged && args.params.max_iter > 0 {
        return Err(CliError::Numerical(format!(
            "no convergence within {} iterations",
            fit.iterations
        )));
    }
    Ok(())
}

fn parse_g(text: &str, n: usize) -> Result<EntrywiseFunction, CliError> {
    let names: Vec<&str> = text.split(',').map(str::trim).collect();
    if names.len() == 1 {
        return Ok(EntrywiseFunction::uniform(ScalarMap::parse(names[0])?, n));
    }
    if names.len() != n {
        return Err(CliError::Config(format!("{} functions given for {n} coordinates", names.len())));
    }
    let maps = names.iter().map(|s| ScalarMap::parse(s)).collect::<Result<Vec<_>, _>>()?;
    Ok(EntrywiseFunction::new(maps))
}

fn cmd_general_means(args: &GeneralMeansArgs) -> Result<(), CliError> {
    let raw = io::read_matrix_csv(&args.data)?;
    let problem = Problem::from_raw(raw, args.d, args.tau.clone())?;
    let estimate = io::read_json::<EstimateFile>(&args.estimate)?.estimate()?;
    let result = match args.floor {
        Some(floor) => {
            if args.g.trim() != "square" {
                return Err(CliError::Config("--floor applies only to --g square".into()));
            }
            solve_second_moment_floored(&problem, &estimate, floor)?
        }
        None => solve_general_mean(&parse_g(&args.g, problem.n())?, &problem, &estimate)?,
    };
    let file = GeneralMeansFile {
        g: args.g.clone(),
        values: columns(&result.y),
        residuals: result.rows.iter().map(|r| r.residual).collect(),
        warnings: result.warnings,
    };
    io::write_json(&args.out, &file)
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<(), CliError> {
    let v = io::read_matrix_csv(&args.data)?;
    let labels = io::read_labels(&args.labels)?;
    let estimate = io::read_json::<EstimateFile>(&args.estimate)?.estimate()?;
    let r = estimate.weights.len();
    let ref_w = sample_weights(&labels, r)?;
    let ref_a = sample_reference(&v, &labels, r, None)?;
    let mut extras = Vec::new();
    for path in &args.moments {
        let file: GeneralMeansFile = io::read_json(path)?;
        let g = parse_g(&file.g, v.nrows())?;
        let reference = sample_reference(&v, &labels, r, Some(&g))?;
        let values = io::from_columns(&file.values, "values")?;
        extras.push((file.g, values, reference));
    }
    let extra_refs: Vec<ExtraMoment<'_>> = extras
        .iter()
        .map(|(name, est, reference)| ExtraMoment {
            name,
            estimate: est,
            reference,
        })
        .collect();
    let report = match_and_score(&estimate, &ref_w, &ref_a, &extra_refs)?;
    match &args.out {
        Some(path) => io::write_json(path, &report),
        None => {
            println!("{}", serde_json::to_string_pretty(&report).map_err(|e| CliError::Io(e.to_string()))?);
            Ok(())
        }
    }
}

fn default_jobs() -> Result<usize, CliError> {
    match std::env::var(THREADS_ENV) {
        Ok(s) => s
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&j| j > 0)
            .ok_or_else(|| CliError::Config(format!("{THREADS_ENV}={s:?} is not a positive integer"))),
        Err(_) => Ok(1),
    }
}

fn cmd_rank_scan(args: &RankScanArgs) -> Result<(), CliError> {
    let problem = args.params.problem(&args.data)?;
    if args.ranks.contains(&0) {
        return Err(CliError::Config("ranks must be positive".into()));
    }
    let jobs = match args.jobs {
        Some(0) => return Err(CliError::Config("--jobs must be positive".into())),
        Some(j) => j,
        None => default_jobs()?,
    };
    let rows = rank_scan(&problem, &args.ranks, &args.params.options(), args.rel_tol, jobs)?;
    io::write_text(&args.out, &rank_scan_csv(&rows))
}

fn timed<T>(f: impl FnOnce() -> Result<T, CliError>) -> Result<(T, f64), CliError> {
    let start = Instant::now();
    let out = f()?;
    Ok((out, start.elapsed().as_secs_f64()))
}

fn cmd_bench(args: &BenchArgs) -> Result<(), CliError> {
    let (n, r, p, d) = (args.n, args.r, args.p, args.d);
    let spec = protocol_spec(args.protocol.parse()?, n, r, 8, args.seed)?;
    let (n, r) = (spec.n(), spec.r());
    let (nf, rf, pf, df) = (n as f64, r as f64, p as f64, d as f64);
    let mut rows: Vec<(&str, f64, f64)> = Vec::new();

    let ((v, _), t) = timed(|| Ok(zoo::sample(&spec, p, args.seed)?))?;
    rows.push(("sample", t, f64::NAN));
    let (problem, t) = timed(|| Ok(Problem::from_raw(v, d, None)?))?;
    rows.push(("preprocess", t, 2.0 * df * nf * pf));
    let init = mixmom::als::default_init(n, r, args.seed);
    let (mut cache, t) = timed(|| Ok(problem.cache(&init.means)?))?;
    rows.push(("gram_cache", t, 2.0 * df * nf * rf * (pf + rf)));
    let mut a = init.means.clone();
    let tau = problem.hyper.tau().to_vec();
    let ((), t) = timed(|| Ok(update_means(&problem, &mut cache, &mut a, &init.weights, &tau)?))?;
    rows.push(("mean_sweep", t, nf * (4.0 * df * rf * (pf + rf) + 2.0 * df * df * rf * rf + 2.0 * rf * pf + rf.powi(3))));
    let cache = problem.cache(&a)?;
    let (_, t) = timed(|| Ok(update_weights(&cache, d, &tau, 0.0)?))?;
    rows.push(("weight_update", t, 2.0 * df * df * rf * rf + 2.0 * rf * pf + rf.powi(3)));
    let coeffs = partition_coefficients(d)?;
    let (_, t) = timed(|| {
        Ok(grad(&cache, &problem.powers, &a, &init.weights, &problem.uniform_pi(), &tau, &coeffs)?)
    })?;
    let parts: usize = (1..=d).map(|i| coeffs.order(i).len()).sum();
    rows.push(("gradient", t, parts as f64 * 2.0 * nf * pf * rf));
    let options = AlsPlusOptions::default();
    let (fit, t) = timed(|| Ok(fit_plus(&problem, None, r, &options)?))?;
    rows.push(("full_fit", t, f64::NAN));

    let mut text = String::from("phase,seconds,flops\n");
    for (phase, secs, flops) in rows {
        let flops = if flops.is_nan() { String::new() } else { format!("{flops:.3e}") };
        text.push_str(&format!("{phase},{secs:.6},{flops}\n"));
    }
    text.push_str(&format!("# n={n} r={r} p={p} d={d} iterations={}\n", fit.iterations));
    match &args.out {
        Some(path) => io::write_text(path, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Fit(a) => cmd_fit(a),
        Command::GeneralMeans(a) => cmd_general_means(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::RankScan(a) => cmd_rank_scan(a),
        Command::Bench(a) => cmd_bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mixmom: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use serde_json::json;

use ppls_core::inference::standard_errors;
use ppls_core::io::{fmt_f64, read_matrix, write_matrix, ModelFile, MODEL_FORMAT_VERSION};
use ppls_core::model::sample_dataset;
use ppls_core::objective::projected_stats;
use ppls_core::pipeline::{
    fit_pipeline, rank_select, Criterion, MultiStartConfig, PipelineConfig, RankChoice, RankNoise,
    RankSelectConfig, Transform,
};
use ppls_core::predict::{point_metrics, select_gamma, GAMMA_SYNTH};
use ppls_core::spectral::{conservative_estimate, full_spectrum_estimate, noise_subspace_estimate, NoiseMode};
use ppls_core::study::{
    linspace, parse_range, run_study, synthetic_truth, StudyConfig, StudyKind, HIGH_NOISE, LOW_NOISE,
};
use ppls_core::{FitOptions, NoiseLaw, PplsError, RngStream, SolverKind};

const DEFAULT_SEED: u64 = 42;

#[derive(Parser)]
#[command(name = "ppls", about = "Fixed-noise probabilistic partial least squares", arg_required_else_help = true)]
struct Cli {
    /// Worker threads for multi-start fits and study trials; 1 runs sequentially.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,

    /// Progress messages on stderr.
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model and write a params file.
    Fit(FitArgs),
    /// Predictive means and intervals for new x rows.
    Predict(PredictArgs),
    /// Point metrics and interval coverage against held-out y.
    Evaluate(EvaluateArgs),
    /// Spectral noise-variance estimate for one view.
    NoiseEst(NoiseArgs),
    /// Score a grid of ranks and print the table as CSV.
    RankSelect(RankArgs),
    /// Draw a synthetic data set from the model.
    Simulate(SimulateArgs),
    /// Run a Monte-Carlo study.
    Bench(BenchArgs),
}

#[derive(Args)]
struct SolverArgs {
    #[arg(long, default_value = "manifold")]
    solver: SolverKind,
    #[arg(long, default_value_t = 8)]
    starts: usize,
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    warm_start: bool,
    #[arg(long, default_value_t = 1000)]
    max_iters: usize,
    /// Print one line per solver iteration to stderr.
    #[arg(long)]
    trace: bool,
}

impl SolverArgs {
    fn config(&self, jobs: usize) -> MultiStartConfig {
        MultiStartConfig {
            solver: self.solver,
            starts: self.starts,
            warm_start: self.warm_start,
            opts: FitOptions {
                max_iters: self.max_iters,
                trace: self.trace,
                ..FitOptions::default()
            },
            parallel: jobs > 1,
        }
    }
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    x: PathBuf,
    #[arg(long)]
    y: PathBuf,
    /// Latent rank, or `auto` to select it over --rank-grid.
    #[arg(long, default_value = "auto")]
    rank: String,
    #[arg(long, default_value = "1..8")]
    rank_grid: String,
    #[arg(long, default_value = "bic")]
    criterion: Criterion,
    #[arg(long, default_value = "v2")]
    noise_mode: RankNoise,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long, default_value = "none")]
    gaussianize: Transform,
    /// Comma-separated shrinkage grid for the predictive law.
    #[arg(long)]
    gamma_grid: Option<String>,
    #[arg(long, default_value_t = 5)]
    inner_folds: usize,
    /// Skip the inner cross-validation and store gamma = kappa = 1.
    #[arg(long)]
    no_calibrate: bool,
    /// Append standard errors to the params file.
    #[arg(long)]
    with_se: bool,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    solver: SolverArgs,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    params: PathBuf,
    #[arg(long)]
    x: PathBuf,
    /// Comma-separated miscoverage levels.
    #[arg(long, default_value = "0.05")]
    alpha: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    params: PathBuf,
    #[arg(long)]
    x: PathBuf,
    #[arg(long)]
    y: PathBuf,
    #[arg(long, default_value = "0.05,0.10,0.15,0.20,0.25")]
    alpha: String,
    /// Calibration table CSV.
    #[arg(long)]
    table: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum EstimatorArg {
    Subspace,
    Full,
    Conservative,
}

#[derive(Args)]
struct NoiseArgs {
    #[arg(long)]
    x: PathBuf,
    #[arg(long, default_value = "subspace")]
    mode: EstimatorArg,
    /// Latent rank for the subspace estimator.
    #[arg(long)]
    rank: Option<usize>,
    /// Rank bound for the conservative estimator.
    #[arg(long)]
    r_max: Option<usize>,
    /// Reserved; not implemented.
    #[arg(long)]
    mp_correct: bool,
}

#[derive(Args)]
struct RankArgs {
    #[arg(long)]
    x: PathBuf,
    #[arg(long)]
    y: PathBuf,
    #[arg(long, default_value = "1..8")]
    rank_grid: String,
    /// Comma-separated list; defaults to all criteria.
    #[arg(long, default_value = "bic,cvnll,cvmse,gap")]
    criterion: String,
    #[arg(long, default_value = "v2")]
    noise_mode: RankNoise,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long, default_value = "none")]
    gaussianize: Transform,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    solver: SolverArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum NoiseLevel {
    Low,
    High,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    p: usize,
    #[arg(long)]
    q: usize,
    #[arg(long)]
    r: usize,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value = "low")]
    noise: NoiseLevel,
    #[arg(long)]
    sigma_e2: Option<f64>,
    #[arg(long)]
    sigma_f2: Option<f64>,
    #[arg(long)]
    sigma_h2: Option<f64>,
    /// Comma-separated signal variances; defaults to 2.0 down to 1.2.
    #[arg(long)]
    theta: Option<String>,
    #[arg(long, default_value = "gaussian")]
    noise_law: NoiseLaw,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Directory receiving X.csv, Y.csv and truth.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    study: Option<StudyKind>,
    /// Flat `key = value` file; its keys override the study defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Further `key=value` overrides applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Large-scale dimensions (p = q = 200).
    #[arg(long)]
    full: bool,
    #[arg(long)]
    out: PathBuf,
}

/// Command failures with the exit code they map to.
enum Failure {
    Usage(String),
    Lib(PplsError),
}

impl From<PplsError> for Failure {
    fn from(e: PplsError) -> Self {
        Failure::Lib(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Lib(PplsError::Io(e))
    }
}

type Outcome = Result<(), Failure>;

fn version() -> String {
    format!("{} (ppls-core {}, model format {MODEL_FORMAT_VERSION})", env!("CARGO_PKG_VERSION"), ppls_core::VERSION)
}

fn main() -> ExitCode {
    let cmd = Cli::command().version(&*Box::leak(version().into_boxed_str()));
    let cli = match cmd.try_get_matches().and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}

fn run(cli: Cli) -> Outcome {
    if cli.jobs == 0 {
        return Err(Failure::Usage("--jobs must be at least 1".into()));
    }
    if cli.jobs > 1 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.jobs)
            .build_global()
            .map_err(|e| Failure::Usage(format!("cannot start {} workers: {e}", cli.jobs)))?;
    }
    let log = Log(cli.verbose);
    match cli.command {
        Command::Fit(a) => fit(a, cli.jobs, log),
        Command::Predict(a) => predict(a),
        Command::Evaluate(a) => evaluate(a),
        Command::NoiseEst(a) => noise_est(a),
        Command::RankSelect(a) => rank_table(a, cli.jobs, log),
        Command::Simulate(a) => simulate(a, log),
        Command::Bench(a) => bench(a, cli.jobs, log),
    }
}

#[derive(Clone, Copy)]
struct Log(u8);

impl Log {
    fn info(&self, msg: impl AsRef<str>) {
        if self.0 > 0 {
            eprintln!("{}", msg.as_ref());
        }
    }
}

fn parse_list<T: std::str::FromStr>(v: &str, what: &str) -> Result<Vec<T>, Failure> {
    let out: Result<Vec<T>, _> = v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::parse).collect();
    match out {
        Ok(v) if !v.is_empty() => Ok(v),
        _ => Err(Failure::Usage(format!("cannot parse {what} list {v:?}"))),
    }
}

fn read_pair(x: &Path, y: &Path) -> Result<(DMatrix<f64>, DMatrix<f64>), Failure> {
    let (x, y) = (read_matrix(x)?, read_matrix(y)?);
    if x.nrows() != y.nrows() {
        return Err(PplsError::Dimension(format!("X has {} rows but Y has {}", x.nrows(), y.nrows())).into());
    }
    Ok((x, y))
}

fn rank_config(grid: &str, criteria: Vec<Criterion>, mode: RankNoise, folds: usize, start: MultiStartConfig) -> Result<RankSelectConfig, Failure> {
    let grid = parse_range(grid)?;
    let r_max = *grid.iter().max().ok_or_else(|| Failure::Usage("empty rank grid".into()))?;
    Ok(RankSelectConfig {
        grid,
        r_max,
        criteria,
        mode,
        k_out: folds,
        start,
    })
}

fn fit(a: FitArgs, jobs: usize, log: Log) -> Outcome {
    let (x, y) = read_pair(&a.x, &a.y)?;
    let start = a.solver.config(jobs);
    let rank = if a.rank.eq_ignore_ascii_case("auto") {
        RankChoice::Auto(rank_config(&a.rank_grid, vec![a.criterion], a.noise_mode, a.folds, start.clone())?)
    } else {
        RankChoice::Fixed(
            a.rank
                .parse()
                .map_err(|_| Failure::Usage(format!("--rank expects an integer or auto, got {:?}", a.rank)))?,
        )
    };
    let cfg = PipelineConfig {
        transform: a.gaussianize,
        rank,
        noise_mode: a.noise_mode,
        start: start.clone(),
    };
    let rng = RngStream::new(a.seed, 0);
    log.info(format!("fitting {} x {} / {} rows", x.ncols(), y.ncols(), x.nrows()));
    let fit = fit_pipeline(&x, &y, &cfg, &rng)?;
    let params = fit.params.clone();
    log.info(format!(
        "rank {}, objective {}, {} iterations, converged {}",
        params.r(),
        fmt_f64(fit.report.final_objective()),
        fit.report.iterations,
        fit.report.converged
    ));
    let mut model = ModelFile::bare(params.clone(), x.nrows());
    model.mean_x = fit.moments.mean_x.clone();
    model.mean_y = fit.moments.mean_y.clone();
    model.objective = Some(fit.report.final_objective());
    if !a.no_calibrate {
        let grid = match &a.gamma_grid {
            Some(g) => parse_list(g, "gamma")?,
            None => GAMMA_SYNTH.to_vec(),
        };
        let xt = fit.transform_x.transform(&x)?;
        let yt = fit.transform_y.transform(&y)?;
        let sel = select_gamma(&params, &xt, &yt, &grid, a.inner_folds, &start, &rng.child(2))?;
        log.info(format!("gamma {}, kappa {}", sel.gamma, fmt_f64(sel.kappa)));
        model.gamma = sel.gamma;
        model.kappa = sel.kappa;
    }
    if a.with_se {
        let st = projected_stats(&params.w, &params.c, &fit.moments, params.sigma_e2, params.sigma_f2)?;
        let se = standard_errors(&params, &st, x.nrows());
        for c in se.components.iter().filter_map(|c| c.diagnostic.as_ref()) {
            eprintln!("warning: {c}");
        }
        model.standard_errors = Some(se);
    }
    model.transform_x = fit.transform_x;
    model.transform_y = fit.transform_y;
    model.write(&a.out)?;
    Ok(())
}

fn predict(a: PredictArgs) -> Outcome {
    let model = ModelFile::read(&a.params)?;
    let x = read_matrix(&a.x)?;
    let alphas: Vec<f64> = parse_list(&a.alpha, "alpha")?;
    let ivs = alphas.iter().map(|&al| model.predict(&x, al)).collect::<Result<Vec<_>, _>>()?;
    let mut s = String::from("sample,coord,mean");
    if alphas.len() == 1 {
        s.push_str(",lo,hi");
    } else {
        for al in &alphas {
            let _ = write!(s, ",lo_{al},hi_{al}");
        }
    }
    s.push('\n');
    let mean = &ivs[0].mean;
    for i in 0..mean.nrows() {
        for j in 0..mean.ncols() {
            let _ = write!(s, "{i},{j},{}", fmt_f64(mean[(i, j)]));
            for iv in &ivs {
                let _ = write!(s, ",{},{}", fmt_f64(iv.lo[(i, j)]), fmt_f64(iv.hi[(i, j)]));
            }
            s.push('\n');
        }
    }
    std::fs::write(&a.out, s)?;
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Outcome {
    let model = ModelFile::read(&a.params)?;
    let (x, y) = read_pair(&a.x, &a.y)?;
    if y.ncols() != model.params.q() {
        return Err(PplsError::Dimension(format!("model expects {} y columns, got {}", model.params.q(), y.ncols())).into());
    }
    let alphas: Vec<f64> = parse_list(&a.alpha, "alpha")?;
    let mut table = String::from("alpha,nominal,coverage,ace\n");
    let mut coverage = Vec::new();
    let mut metrics = None;
    for &al in &alphas {
        let iv = model.predict(&x, al)?;
        if metrics.is_none() {
            metrics = Some(point_metrics(&iv.mean, &y)?);
        }
        let cov = ppls_core::predict::coverage(&iv, &y)?;
        let ace = (cov - (1.0 - al)).abs();
        let _ = writeln!(table, "{al},{},{},{}", fmt_f64(1.0 - al), fmt_f64(cov), fmt_f64(ace));
        coverage.push(json!({"alpha": al, "coverage": cov, "ace": ace}));
    }
    std::fs::write(&a.table, table)?;
    let m = metrics.expect("at least one alpha");
    let mean_ace = coverage.iter().map(|c| c["ace"].as_f64().unwrap()).sum::<f64>() / alphas.len() as f64;
    let out = format!(
        "{{\n  \"n\": {},\n  \"mse\": {},\n  \"mae\": {},\n  \"r2\": {},\n  \"mean_ace\": {}\n}}",
        y.nrows(),
        fmt_f64(m.mse),
        fmt_f64(m.mae),
        fmt_f64(m.r2),
        fmt_f64(mean_ace)
    );
    println!("{out}");
    Ok(())
}

fn noise_est(a: NoiseArgs) -> Outcome {
    if a.mp_correct {
        return Err(Failure::Usage("--mp-correct is reserved and not implemented".into()));
    }
    let x = read_matrix(&a.x)?;
    if x.nrows() < 2 {
        return Err(PplsError::Input("need at least two rows".into()).into());
    }
    let (xc, _) = ppls_core::model::center(&x);
    let s = xc.tr_mul(&xc) / x.nrows() as f64;
    let need = |v: Option<usize>, flag: &str| v.ok_or_else(|| Failure::Usage(format!("this mode needs {flag}")));
    let est = match a.mode {
        EstimatorArg::Subspace => noise_subspace_estimate(&s, need(a.rank, "--rank")?)?,
        EstimatorArg::Full => full_spectrum_estimate(&s)?,
        EstimatorArg::Conservative => conservative_estimate(&s, need(a.r_max.or(a.rank), "--r-max")?)?,
    };
    let (mode, r) = match est.mode {
        NoiseMode::Subspace(r) => ("subspace", Some(r)),
        NoiseMode::FullSpectrum => ("full_spectrum", None),
        NoiseMode::Conservative(r) => ("conservative", Some(r)),
    };
    println!(
        "{{\"value\": {}, \"mode\": \"{mode}\", \"r\": {}, \"eigenvalues_used\": [{}, {}]}}",
        fmt_f64(est.value),
        r.map_or("null".into(), |r| r.to_string()),
        est.eigenvalues_used.0,
        est.eigenvalues_used.1
    );
    Ok(())
}

fn rank_table(a: RankArgs, jobs: usize, log: Log) -> Outcome {
    let (x, y) = read_pair(&a.x, &a.y)?;
    let criteria: Vec<Criterion> = parse_list(&a.criterion, "criterion")?;
    let cfg = rank_config(&a.rank_grid, criteria.clone(), a.noise_mode, a.folds, a.solver.config(jobs))?;
    let (xt, _) = ppls_core::pipeline::gaussianize(&x, a.gaussianize)?;
    let (yt, _) = ppls_core::pipeline::gaussianize(&y, a.gaussianize)?;
    let res = rank_select(&xt, &yt, &cfg, &RngStream::new(a.seed, 0))?;
    let mut s = String::from("rank,sigma_e2,sigma_f2");
    for c in &res.criteria {
        let _ = write!(s, ",{}", c.criterion);
    }
    s.push('\n');
    for (k, r) in res.grid.iter().enumerate() {
        let _ = write!(s, "{r},{},{}", fmt_f64(res.noise[k].0), fmt_f64(res.noise[k].1));
        for c in &res.criteria {
            let _ = write!(s, ",{}", fmt_f64(c.scores[k]));
        }
        s.push('\n');
    }
    for (r, e) in &res.failures {
        eprintln!("warning: rank {r} failed: {e}");
    }
    for c in &res.criteria {
        log.info(format!("{} selects r = {}", c.criterion, c.selected));
    }
    match &a.out {
        Some(path) => std::fs::write(path, s)?,
        None => print!("{s}"),
    }
    Ok(())
}

fn simulate(a: SimulateArgs, log: Log) -> Outcome {
    if a.r == 0 {
        return Err(Failure::Usage("--r must be positive".into()));
    }
    let base = match a.noise {
        NoiseLevel::Low => LOW_NOISE,
        NoiseLevel::High => HIGH_NOISE,
    };
    let noise = (
        a.sigma_e2.unwrap_or(base.0),
        a.sigma_f2.unwrap_or(base.1),
        a.sigma_h2.unwrap_or(base.2),
    );
    let theta = match &a.theta {
        Some(t) => nalgebra::DVector::from_vec(parse_list(t, "theta")?),
        None => linspace(2.0, 1.2, a.r),
    };
    if theta.len() != a.r {
        return Err(Failure::Usage(format!("--theta needs {} values", a.r)));
    }
    let mut rng = RngStream::new(a.seed, 0);
    let truth = synthetic_truth(a.p, a.q, &theta, noise, &mut rng)?;
    let (x, y) = sample_dataset(&truth, a.n, &a.noise_law, &mut rng)?;
    std::fs::create_dir_all(&a.out)?;
    write_matrix(&a.out.join("X.csv"), &x, "x")?;
    write_matrix(&a.out.join("Y.csv"), &y, "y")?;
    ModelFile::bare(truth, a.n).write(&a.out.join("truth.json"))?;
    log.info(format!("wrote {} rows to {}", a.n, a.out.display()));
    Ok(())
}

fn bench(a: BenchArgs, jobs: usize, log: Log) -> Outcome {
    let mut text = String::new();
    if let Some(k) = a.study {
        let _ = writeln!(text, "study = {}", k.name());
    }
    if let Some(path) = &a.config {
        text.push_str(&std::fs::read_to_string(path).map_err(|e| PplsError::Input(format!("cannot read {}: {e}", path.display())))?);
    }
    if a.study.is_none() && a.config.is_none() {
        return Err(Failure::Usage("bench needs --study or --config".into()));
    }
    let mut cfg = StudyConfig::parse(&text, a.full)?;
    for kv in &a.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    cfg.parallel |= jobs > 1;
    cfg.validate()?;
    log.info(format!("running {} with {} trials", cfg.kind.name(), cfg.trials));
    let res = run_study(&cfg)?;
    std::fs::create_dir_all(&a.out)?;
    res.write(&a.out)?;
    println!("method,metric,mean,sd,count");
    for g in res.aggregate() {
        println!("{},{},{},{},{}", g.method, g.metric, fmt_f64(g.mean), fmt_f64(g.sd), g.count);
    }
    for (trial, e) in &res.failures {
        eprintln!("warning: trial {trial} failed: {e}");
    }
    Ok(())
}

//! `pag` — distribution-level robustness certification from the command
//! line.
//!
//! Subcommands mirror the library pipeline: `sample-size` and
//! `quantile-index` answer the closed-form questions, `certify` draws a
//! calibration sample and writes a certificate, `evaluate` replays a
//! certificate against held-out data, `montecarlo` stress-tests the two
//! probabilistic laws on the built-in synthetic world, and `synth-world`
//! materializes that world as model and dataset files.
//!
//! Exit codes: `0` success; `1` a guarantee-relevant negative result
//! (a failed evaluation or law check); `2` bad usage or parameters;
//! `3` an external oracle or protocol failure. Progress goes to stderr,
//! data to stdout and the requested files.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pag_core::{
    build_quality_sample, emit_certificate, evaluate_on_test, evaluate_rows, load_certificate,
    load_dataset, load_model, monte_carlo_epsnet_check, monte_carlo_quantile_check,
    quantile_index, save_certificate, save_dataset, save_model, solve_sample_size,
    CertificateParams, Dist1D, ExternalOracleCmd, MlpModel, OracleChoice, OracleConfig,
    OracleKind, PagError, SampleBackend, SampleStore, SyntheticLinearWorld,
    DEFAULT_NOISE_SIGMA,
};

#[derive(Parser)]
#[command(
    name = "pag",
    version,
    about = "Probably-approximately-global robustness certification",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Smallest calibration-sample size meeting the coverage guarantee.
    SampleSize(SampleSizeArgs),
    /// Certified order-statistic index for a one-sided quantile bound.
    QuantileIndex(QuantileIndexArgs),
    /// Draw a calibration sample and emit a robustness certificate.
    Certify(CertifyArgs),
    /// Evaluate a certificate against a held-out test dataset.
    Evaluate(EvaluateArgs),
    /// Monte-Carlo check of the coverage or quantile law.
    Montecarlo(MontecarloArgs),
    /// Write the built-in synthetic world as model and dataset files.
    SynthWorld(SynthWorldArgs),
}

#[derive(Args)]
struct SampleSizeArgs {
    /// Coverage resolution, in (0, 1/2).
    #[arg(long)]
    epsilon: f64,
    /// Failure probability, in (0, 1/2).
    #[arg(long)]
    delta: f64,
    /// VC dimension of the range family (quality ranges have dimension 2).
    #[arg(long, alias = "d", default_value_t = 2)]
    vc_dim: u64,
}

#[derive(Args)]
struct QuantileIndexArgs {
    /// Sample size the order statistic is taken from.
    #[arg(long, alias = "s")]
    sample_size: u64,
    /// Quantile level, in [1/2, 1).
    #[arg(long)]
    p: f64,
    /// Failure probability, in (0, 1/2).
    #[arg(long)]
    delta: f64,
}

/// How robustness radii are produced.
#[derive(Copy, Clone, Debug, PartialEq, ValueEnum)]
enum OracleArg {
    /// Closed form for single-affine-layer models (exact).
    AnalyticLinear,
    /// Exhaustive grid scan of the perturbation box (exact up to the grid).
    ExactGrid,
    /// Projected gradient attack (adversarial upper bound).
    Pgd,
    /// Binary search over certified interval propagation (certified lower
    /// bound). Works for any model; the default.
    CertifiedBinsearch,
    /// An external tool speaking the line protocol; the command line comes
    /// from --oracle-cmd or the PAG_ORACLE_CMD environment variable.
    External,
}

impl OracleArg {
    fn to_choice(self) -> Option<OracleChoice> {
        match self {
            OracleArg::AnalyticLinear => Some(OracleChoice::AnalyticLinear),
            OracleArg::ExactGrid => Some(OracleChoice::ExactGrid),
            OracleArg::Pgd => Some(OracleChoice::Pgd),
            OracleArg::CertifiedBinsearch => Some(OracleChoice::CertifiedBinsearch),
            OracleArg::External => None,
        }
    }
}

#[derive(Args)]
struct BackendArgs {
    /// Model JSON file (required for every oracle except `external`).
    #[arg(long)]
    model: Option<PathBuf>,
    /// Robustness oracle to run.
    #[arg(long, value_enum, default_value_t = OracleArg::CertifiedBinsearch)]
    oracle: OracleArg,
    /// External oracle command line, e.g. "my-tool --flag".
    #[arg(long)]
    oracle_cmd: Option<String>,
    /// Inactivity timeout for the external oracle, in milliseconds.
    #[arg(long, default_value_t = 30_000)]
    oracle_timeout_ms: u64,
    /// Worker threads (default: available parallelism).
    #[arg(long)]
    workers: Option<usize>,
}

/// Owned storage the borrowing `SampleBackend` points into.
enum BackendStorage {
    Model(MlpModel, OracleChoice),
    External(ExternalOracleCmd, u64),
}

impl BackendArgs {
    fn storage(&self) -> Result<BackendStorage, PagError> {
        match self.oracle.to_choice() {
            Some(choice) => {
                let path = self.model.as_ref().ok_or_else(|| {
                    PagError::InconsistentParams(
                        "--model is required unless --oracle external is selected".into(),
                    )
                })?;
                Ok(BackendStorage::Model(load_model(path)?, choice))
            }
            None => {
                let line = self
                    .oracle_cmd
                    .clone()
                    .or_else(|| std::env::var("PAG_ORACLE_CMD").ok())
                    .ok_or_else(|| {
                        PagError::InconsistentParams(
                            "--oracle external needs --oracle-cmd or PAG_ORACLE_CMD".into(),
                        )
                    })?;
                Ok(BackendStorage::External(
                    ExternalOracleCmd::parse(&line)?,
                    self.oracle_timeout_ms,
                ))
            }
        }
    }

    fn workers(&self) -> usize {
        self.workers.unwrap_or_else(|| {
            std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
        })
    }
}

impl BackendStorage {
    fn backend(&self) -> SampleBackend<'_> {
        match self {
            BackendStorage::Model(model, choice) => SampleBackend::Model {
                model,
                choice: *choice,
                cfg: OracleConfig::default(),
            },
            BackendStorage::External(cmd, timeout_ms) => {
                SampleBackend::External { cmd, timeout_ms: *timeout_ms }
            }
        }
    }
}

#[derive(Args)]
struct CertifyArgs {
    #[command(flatten)]
    backend: BackendArgs,
    /// Calibration dataset CSV the sampler perturbs.
    #[arg(long)]
    dataset: PathBuf,
    /// Coverage resolution, in (0, 1/2).
    #[arg(long)]
    epsilon: f64,
    /// Failure probability, in (0, 1/2).
    #[arg(long)]
    delta: f64,
    /// Smallest conditioning mass a confidence level may keep, in (0, 1/2).
    #[arg(long)]
    p_min: f64,
    /// VC dimension of the range family.
    #[arg(long, alias = "d", default_value_t = 2)]
    vc_dim: u64,
    /// RNG seed; runs are reproducible and worker-count independent.
    #[arg(long)]
    seed: u64,
    /// Gaussian perturbation scale applied to dataset rows.
    #[arg(long, default_value_t = DEFAULT_NOISE_SIGMA)]
    noise_sigma: f64,
    /// Sample size (default: the certified minimum for epsilon, delta/2).
    #[arg(long)]
    sample_size: Option<u64>,
    /// Append-only sample CSV; an interrupted run resumes from it.
    #[arg(long)]
    sample: Option<PathBuf>,
    /// Output certificate path.
    #[arg(long)]
    out: PathBuf,
    /// Round map radii down to multiples of this quantum.
    #[arg(long)]
    rho_quantum: Option<f64>,
    /// Also publish a bound adjusted for distribution shift of this
    /// total-variation distance.
    #[arg(long)]
    shift_lambda: Option<f64>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Certificate JSON to evaluate.
    #[arg(long)]
    certificate: PathBuf,
    /// Held-out test dataset CSV (rows are scored as-is, no noise).
    #[arg(long)]
    dataset: PathBuf,
    #[command(flatten)]
    backend: BackendArgs,
    /// Proceed even when the model hash does not match the certificate.
    #[arg(long)]
    allow_hash_mismatch: bool,
    /// Write the full evaluation report as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Write the per-confidence violation table as CSV.
    #[arg(long)]
    per_kappa: Option<PathBuf>,
    /// Write the test points in quality space as CSV.
    #[arg(long)]
    scatter: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, PartialEq, ValueEnum)]
enum LawArg {
    /// Coverage law: certified-size samples hit every ε-mass witness range.
    Epsnet,
    /// Quantile law: the certified order statistic under-estimates the
    /// p-quantile.
    Quantile,
}

#[derive(Copy, Clone, Debug, PartialEq, ValueEnum)]
enum DistArg {
    /// Uniform on [0, 1).
    Uniform,
    /// Two atoms: 0.3 with probability 0.88, 0.7 with probability 0.12.
    PointMass,
}

#[derive(Args)]
struct MontecarloArgs {
    /// Which probabilistic law to check.
    #[arg(long, value_enum)]
    law: LawArg,
    /// Failure probability the law promises, in (0, 1/2).
    #[arg(long)]
    delta: f64,
    /// Number of independent repetitions.
    #[arg(long)]
    trials: u64,
    /// RNG seed (each trial uses its own derived stream).
    #[arg(long)]
    seed: u64,
    /// Coverage resolution (epsnet law only).
    #[arg(long)]
    epsilon: Option<f64>,
    /// Number of witness ranges at the ε contour (epsnet law only).
    #[arg(long, default_value_t = 64)]
    witness_count: usize,
    /// Sample size per trial (quantile law only).
    #[arg(long, alias = "s")]
    sample_size: Option<u64>,
    /// Quantile level (quantile law only).
    #[arg(long)]
    p: Option<f64>,
    /// Sampling distribution (quantile law only).
    #[arg(long, value_enum, default_value_t = DistArg::Uniform)]
    dist: DistArg,
}

#[derive(Args)]
struct SynthWorldArgs {
    /// Number of dataset rows to draw.
    #[arg(long)]
    rows: usize,
    /// RNG seed.
    #[arg(long)]
    seed: u64,
    /// Output dataset CSV path.
    #[arg(long)]
    dataset_out: PathBuf,
    /// Output model JSON path.
    #[arg(long)]
    model_out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            let mut source = std::error::Error::source(&err);
            while let Some(cause) = source {
                eprintln!("  caused by: {cause}");
                source = cause.source();
            }
            ExitCode::from(classify(&err))
        }
    }
}

/// Exit code for a failed run: external-oracle breakage is 3, everything
/// else (bad parameters, malformed files, hash mismatches, I/O) is 2.
fn classify(err: &PagError) -> u8 {
    match err.root_cause() {
        PagError::ProtocolViolation { .. }
        | PagError::ToolCrash { .. }
        | PagError::OracleTimeout { .. } => 3,
        _ => 2,
    }
}

fn run(command: Command) -> Result<ExitCode, PagError> {
    match command {
        Command::SampleSize(args) => run_sample_size(args),
        Command::QuantileIndex(args) => run_quantile_index(args),
        Command::Certify(args) => run_certify(args),
        Command::Evaluate(args) => run_evaluate(args),
        Command::Montecarlo(args) => run_montecarlo(args),
        Command::SynthWorld(args) => run_synth_world(args),
    }
}

fn run_sample_size(args: SampleSizeArgs) -> Result<ExitCode, PagError> {
    let solved = solve_sample_size(args.epsilon, args.delta, args.vc_dim)?;
    println!("sample_size: {}", solved.size);
    println!(
        "slack_at_s: {:.6}",
        pag_core::bounds::sample_size_slack(solved.size, args.epsilon, args.delta, args.vc_dim)
    );
    if solved.size > 1 {
        println!(
            "slack_at_s_minus_1: {:.6}",
            pag_core::bounds::sample_size_slack(
                solved.size - 1,
                args.epsilon,
                args.delta,
                args.vc_dim
            )
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn run_quantile_index(args: QuantileIndexArgs) -> Result<ExitCode, PagError> {
    let index = quantile_index(args.sample_size, args.p, args.delta)?;
    println!("index: {index}");
    println!(
        "strict_upper_bound: {}",
        pag_core::bounds::quantile_index_bound(args.sample_size, args.p, args.delta)
    );
    Ok(ExitCode::SUCCESS)
}

fn kind_name(kind: OracleKind) -> &'static str {
    match kind {
        OracleKind::Exact => "exact",
        OracleKind::CertifiedLower => "certified_lower",
        OracleKind::AdversarialUpper => "adversarial_upper",
    }
}

fn run_certify(args: CertifyArgs) -> Result<ExitCode, PagError> {
    let params =
        CertificateParams::with_vc_dim(args.epsilon, args.delta, args.p_min, args.vc_dim)?;
    let dataset = load_dataset(&args.dataset)?;
    let required = solve_sample_size(params.epsilon, params.delta / 2.0, params.vc_dim)?;
    let size = args.sample_size.unwrap_or(required.size);
    let storage = args.backend.storage()?;
    let backend = storage.backend();
    let workers = args.backend.workers();
    let store = args.sample.as_ref().map(SampleStore::new);

    eprintln!(
        "sampling {size} draws (minimum {}) with oracle {} on {} workers, seed {}",
        required.size,
        backend.describe(),
        workers,
        args.seed
    );
    let sample = build_quality_sample(
        &dataset,
        &backend,
        size as usize,
        args.noise_sigma,
        args.seed,
        workers,
        Some(&params),
        store.as_ref(),
    )?;
    eprintln!("sample complete; assembling certificate");
    let certificate = emit_certificate(&sample, &params, args.rho_quantum, args.shift_lambda)?;
    save_certificate(&certificate, &args.out)?;

    println!("sample_size: {}", certificate.sample_size);
    println!("kappa_max: {}", certificate.kappa_max);
    println!("map_size: {}", certificate.map.len());
    println!("bound: {}", certificate.bound);
    if let Some(shift) = &certificate.shift {
        println!("shift_lambda: {}", shift.lambda);
        println!("shift_adjusted_bound: {}", shift.adjusted_bound);
    }
    println!("union_bound: {}", certificate.union_bound);
    println!("oracle_kind: {}", kind_name(certificate.oracle_kind));
    println!("certificate: {}", args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn run_evaluate(args: EvaluateArgs) -> Result<ExitCode, PagError> {
    let certificate = load_certificate(&args.certificate)?;
    let dataset = load_dataset(&args.dataset)?;
    if dataset.features.is_empty() {
        return Err(PagError::EmptyInput("test dataset"));
    }
    let storage = args.backend.storage()?;
    let backend = storage.backend();
    let workers = args.backend.workers();

    match (&certificate.model_hash, backend.model_hash()) {
        (Some(expected), Some(actual)) if *expected != actual => {
            if args.allow_hash_mismatch {
                eprintln!(
                    "WARNING: model hash {actual} does not match the certificate's {expected}; \
                     results do not speak for the certified model (--allow-hash-mismatch given)"
                );
            } else {
                return Err(PagError::HashMismatch { expected: expected.clone(), actual });
            }
        }
        (Some(_), None) => eprintln!(
            "note: certificate pins a model hash but an external oracle cannot prove one"
        ),
        _ => {}
    }

    eprintln!(
        "scoring {} test rows with oracle {} on {} workers",
        dataset.features.len(),
        backend.describe(),
        workers
    );
    let points = evaluate_rows(&dataset, &backend, workers)?;
    let map = certificate.robustness_map();
    let report = evaluate_on_test(&map, &points, &certificate.params)?;

    if let Some(path) = &args.report {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), &report)?;
    }
    if let Some(path) = &args.per_kappa {
        let mut writer = csv::Writer::from_path(path)?;
        writer.write_record(["kappa", "p_kappa", "num", "den"])?;
        for row in &report.per_kappa {
            let p = row.p_kappa.map(|p| p.to_string()).unwrap_or_default();
            writer.write_record([
                row.kappa.to_string(),
                p,
                row.num.to_string(),
                row.den.to_string(),
            ])?;
        }
        writer.flush()?;
    }
    if let Some(path) = &args.scatter {
        let mut writer = csv::Writer::from_path(path)?;
        writer.write_record(["rho", "kappa"])?;
        for q in &points {
            writer.write_record([q.rho.to_string(), q.kappa.to_string()])?;
        }
        writer.flush()?;
    }

    println!("test_size: {}", report.test_size);
    println!("map_size: {}", report.map_size);
    println!("p_hat: {}", report.p_hat);
    println!("p_hat_max: {}", report.thresholds.p_hat_max);
    println!("n_c: {}", report.n_c);
    println!("n_c_max: {}", report.thresholds.n_c_max);
    println!("good_run: {}", report.good_run);
    Ok(if report.good_run { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

/// One-sided 99% upper confidence bound on a binomial proportion:
/// exact for zero failures, normal approximation otherwise.
fn binomial_upper_99(failures: u64, trials: u64) -> f64 {
    let n = trials as f64;
    if failures == 0 {
        1.0 - 0.01_f64.powf(1.0 / n)
    } else {
        let p = failures as f64 / n;
        (p + 2.3263478740408408 * (p * (1.0 - p) / n).sqrt()).min(1.0)
    }
}

fn run_montecarlo(args: MontecarloArgs) -> Result<ExitCode, PagError> {
    let rate = match args.law {
        LawArg::Epsnet => {
            let epsilon = args.epsilon.ok_or_else(|| {
                PagError::InconsistentParams("--law epsnet requires --epsilon".into())
            })?;
            let world = SyntheticLinearWorld::new();
            let witnesses = world.witness_family(args.witness_count, epsilon)?;
            eprintln!(
                "checking the coverage law over {} trials, {} witness ranges",
                args.trials,
                witnesses.len()
            );
            monte_carlo_epsnet_check(&world, epsilon, args.delta, &witnesses, args.trials, args.seed)?
        }
        LawArg::Quantile => {
            let sample_size = args.sample_size.ok_or_else(|| {
                PagError::InconsistentParams("--law quantile requires --sample-size".into())
            })?;
            let p = args.p.ok_or_else(|| {
                PagError::InconsistentParams("--law quantile requires --p".into())
            })?;
            let dist = match args.dist {
                DistArg::Uniform => Dist1D::Uniform01,
                DistArg::PointMass => Dist1D::discrete(vec![(0.3, 0.88), (0.7, 0.12)])?,
            };
            eprintln!("checking the quantile law over {} trials", args.trials);
            monte_carlo_quantile_check(&dist, sample_size, p, args.delta, args.trials, args.seed)?
        }
    };

    let failures = (rate * args.trials as f64).round() as u64;
    let upper = binomial_upper_99(failures, args.trials);
    let threshold = args.delta
        + 3.0 * (args.delta * (1.0 - args.delta) / args.trials as f64).sqrt();
    let holds = rate <= threshold;
    println!("trials: {}", args.trials);
    println!("failures: {failures}");
    println!("failure_rate: {rate}");
    println!("upper_99: {upper}");
    println!("pass_threshold: {threshold}");
    println!("law_holds: {holds}");
    Ok(if holds { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn run_synth_world(args: SynthWorldArgs) -> Result<ExitCode, PagError> {
    if args.rows == 0 {
        return Err(PagError::ParameterOutOfRange {
            name: "rows",
            value: 0.0,
            requirement: "at least 1",
        });
    }
    let world = SyntheticLinearWorld::new();
    let dataset = world.make_dataset(args.rows, args.seed);
    save_dataset(&dataset, &args.dataset_out)?;
    let model = world.to_mlp_model();
    save_model(&model, &args.model_out)?;

    let ones = dataset.labels.as_ref().map_or(0, |l| l.iter().filter(|v| **v == 1).count());
    println!("rows: {}", args.rows);
    println!("class_1_fraction: {}", ones as f64 / args.rows as f64);
    println!("model_hash: {}", model.content_hash());
    println!("dataset: {}", args.dataset_out.display());
    println!("model: {}", args.model_out.display());
    Ok(ExitCode::SUCCESS)
}

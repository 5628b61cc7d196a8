use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hmtol::hmatrix::{assemble, DEFAULT_EXACT_ERROR_MAX_N};
use hmtol::io::{load_hmatrix, save_hmatrix, save_report};
use hmtol::norm::{estimate_fro_stochastic, exact_fro_norm, induced_one_norm, SamplingConfig, DEFAULT_REL_JSD_TOL};
use hmtol::{generate_points, BuildConfig, ErrorMode, Geometry, Kernel, KernelMatrix, Method, TolerancePolicy};
use hmtol_bench::{parse_list, parse_n_list, read_rows, report_if, run, write_if, BenchError, ExperimentSpec};

/// H-matrix tolerance budgeting experiments.
#[derive(Parser)]
#[command(name = "hmbench", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sweep geometries, kernels, N, epsilon and methods; write one CSV row per build.
    Run(RunArgs),
    /// Improvement factors nnz(BREM)/nnz(MREM) from a results CSV.
    ReportIf {
        /// Results CSV written by `run`.
        #[arg(long)]
        csv: PathBuf,
        /// Output CSV; stdout if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build a single H-matrix and optionally save it and its report.
    Build(BuildArgs),
    /// Compare the sampled Frobenius norm estimate with the exact value.
    Norm {
        #[arg(long, default_value = "surf")]
        geometry: Geometry,
        #[arg(long, default_value = "invpow:2")]
        kernel: Kernel,
        #[arg(long, default_value_t = 1024)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_REL_JSD_TOL)]
        rel_jsd_tol: f64,
    },
    /// Print a summary of a saved H-matrix.
    Inspect { path: PathBuf },
}

#[derive(Args)]
struct RunArgs {
    /// Comma list of cube, surf, edge.
    #[arg(long, default_value = "cube,surf,edge")]
    geometry: String,
    /// Comma list of invpow:p and log.
    #[arg(long, default_value = "invpow:1,invpow:2,invpow:3,log")]
    kernel: String,
    /// Comma list of sizes or a power-of-two range such as 2^9..2^13.
    #[arg(long, default_value = "2^9..2^13")]
    n: String,
    /// Comma list of requested tolerances.
    #[arg(long, default_value = "1e-5")]
    eps: String,
    /// Comma list of BREM, MREM, MREMmax.
    #[arg(long, default_value = "BREM,MREM")]
    methods: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Admissibility parameter: min(diam) <= eta * dist.
    #[arg(long, default_value_t = hmtol::cluster::DEFAULT_ETA)]
    eta: f64,
    #[arg(long, default_value_t = hmtol::cluster::DEFAULT_LEAF_SIZE)]
    leaf_size: usize,
    /// Largest N whose error is measured by an exact sweep; larger N are sampled.
    #[arg(long, default_value_t = DEFAULT_EXACT_ERROR_MAX_N)]
    exact_error_max_n: usize,
    /// Relative JSD at which the Frobenius norm estimate stops sampling.
    #[arg(long, default_value_t = DEFAULT_REL_JSD_TOL)]
    rel_jsd_tol: f64,
    /// Output CSV; stdout if omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BuildArgs {
    #[arg(long, default_value = "cube")]
    geometry: Geometry,
    #[arg(long, default_value = "invpow:1")]
    kernel: Kernel,
    #[arg(long, default_value_t = 4096)]
    n: usize,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    #[arg(long, default_value = "BREM")]
    method: Method,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = hmtol::cluster::DEFAULT_ETA)]
    eta: f64,
    #[arg(long, default_value_t = hmtol::cluster::DEFAULT_LEAF_SIZE)]
    leaf_size: usize,
    #[arg(long, default_value_t = DEFAULT_EXACT_ERROR_MAX_N)]
    exact_error_max_n: usize,
    /// Skip the achieved-error measurement.
    #[arg(long)]
    no_error: bool,
    /// Write the H-matrix in binary form.
    #[arg(long)]
    save: Option<PathBuf>,
    /// Write the build report as JSON; printed to stdout otherwise.
    #[arg(long)]
    report: Option<PathBuf>,
}

fn output(path: &Option<PathBuf>) -> io::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn run_cmd(a: RunArgs) -> Result<ExitCode, BenchError> {
    let spec = ExperimentSpec {
        geometries: parse_list(&a.geometry)?,
        kernels: parse_list(&a.kernel)?,
        ns: parse_n_list(&a.n)?,
        epsilons: parse_list(&a.eps)?,
        methods: parse_list(&a.methods)?,
        seed: a.seed,
        eta: a.eta,
        leaf_size: a.leaf_size,
        exact_error_max_n: a.exact_error_max_n,
        rel_jsd_tol: a.rel_jsd_tol,
    };
    spec.validate()?;
    let (_, summary) = run(&spec, output(&a.out)?)?;
    if summary.flagged > 0 {
        log::error!("{} of {} rows flagged", summary.flagged, summary.rows);
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}

fn build_cmd(a: BuildArgs) -> Result<ExitCode, BenchError> {
    let cloud = generate_points(a.geometry, a.n, a.seed)?;
    let oracle = KernelMatrix::new(&cloud, a.kernel);
    let mut estimate = None;
    let norm = match a.method {
        Method::Brem => None,
        Method::Mrem => {
            let est = estimate_fro_stochastic(
                &oracle,
                &SamplingConfig {
                    seed: a.seed,
                    rel_jsd_tol: DEFAULT_REL_JSD_TOL,
                    ..SamplingConfig::default()
                },
            )?;
            estimate = Some(est);
            Some(est.safe_fro_norm)
        }
        Method::MremMax => Some(induced_one_norm(&oracle)),
    };
    let mut config = BuildConfig::new(TolerancePolicy::new(a.method, a.eps, norm, a.n)?)
        .with_eta(a.eta)
        .with_leaf_size(a.leaf_size);
    config.seed = a.seed;
    config.norm_estimate = estimate;
    if !a.no_error {
        config.error_mode = Some(ErrorMode::auto(a.n, a.exact_error_max_n, a.seed));
    }
    let (h, report) = assemble(&cloud, a.kernel, &config)?;
    if let Some(path) = &a.save {
        save_hmatrix(&h, path)?;
    }
    match &a.report {
        Some(path) => save_report(&report, path)?,
        None => {
            let json = serde_json_string(&report)?;
            println!("{json}");
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn serde_json_string(report: &hmtol::BuildReport) -> Result<String, BenchError> {
    let mut buf = Vec::new();
    hmtol::io::write_report(report, &mut buf)?;
    Ok(String::from_utf8_lossy(&buf).trim_end().to_string())
}

fn norm_cmd(geometry: Geometry, kernel: Kernel, n: usize, seed: u64, rel_jsd_tol: f64) -> Result<ExitCode, BenchError> {
    let cloud = generate_points(geometry, n, seed)?;
    let oracle = KernelMatrix::new(&cloud, kernel);
    let cfg = SamplingConfig {
        seed,
        rel_jsd_tol,
        ..SamplingConfig::default()
    };
    let est = estimate_fro_stochastic(&oracle, &cfg)?;
    let exact = exact_fro_norm(&oracle);
    println!("columns      {} of {n}", est.n_samples);
    println!("converged    {}", est.converged);
    println!("sqrt(mu)     {:.6e}", est.fro_norm());
    println!("rel jsd      {:.3e}", est.rel_jsd());
    println!("safe         {:.6e}", est.safe_fro_norm);
    println!("exact        {:.6e}", exact);
    println!("one norm     {:.6e}", induced_one_norm(&oracle));
    Ok(ExitCode::SUCCESS)
}

fn inspect_cmd(path: PathBuf) -> Result<ExitCode, BenchError> {
    let h = load_hmatrix(&path)?;
    let p = h.partition();
    println!("N            {}", h.dim());
    println!("eta          {}", p.eta());
    println!("blocks       {} ({} admissible)", p.len(), p.admissible_count());
    println!("nnz          {}", h.nnz());
    println!("compression  {:.4}", h.compression());
    println!("fro norm     {:.6e}", h.fro_norm());
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Run(a) => run_cmd(a),
        Command::ReportIf { csv, out } => File::open(&csv)
            .map_err(BenchError::from)
            .and_then(read_rows)
            .and_then(|rows| write_if(&report_if(&rows), output(&out)?))
            .map(|()| ExitCode::SUCCESS),
        Command::Build(a) => build_cmd(a),
        Command::Norm {
            geometry,
            kernel,
            n,
            seed,
            rel_jsd_tol,
        } => norm_cmd(geometry, kernel, n, seed, rel_jsd_tol),
        Command::Inspect { path } => inspect_cmd(path),
    };
    match result {
        Ok(code) => code,
        Err(e @ BenchError::Usage(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(BenchError::Core(e @ (hmtol::Error::InvalidParameter { .. } | hmtol::Error::MissingMatrixNorm(_)))) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

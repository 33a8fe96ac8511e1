use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use cslim::enso::Polarity;
use cslim::experiment::{self, ExperimentConfig, ExperimentKind, ExperimentReport, PlotKind};
use cslim::models::{self, CsVariant, Estimator, PeriodicModel};
use cslim::simulate::{self, PathConfig, RandomStream, TimeSeries};
use cslim::{Error, Matrix};

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_BUDGET: u8 = 4;
const EXIT_OTHER: u8 = 1;

/// Simulate periodic linear stochastic systems and identify them with
/// stationary and cyclostationary linear inverse models.
#[derive(Parser)]
#[command(name = "cslim", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Trials per cell.
    #[arg(long, global = true)]
    trials: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// JSON file overriding configuration fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// 1024 trials and records up to 5000 periods.
    #[arg(long, global = true)]
    full_scale: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write one sample path of a sinusoidal system to path.csv.
    Simulate(SimulateArgs),
    /// Fit inverse models to a recorded path.
    Fit(FitArgs),
    /// Scalar sinusoidal study.
    Oned,
    /// Random stable systems of several dimensions.
    Nd {
        /// Comma-separated dimensions.
        #[arg(long, value_delimiter = ',')]
        dims: Option<Vec<usize>>,
    },
    /// e-model against pointwise model as the interval count grows.
    Convergence,
    /// Monthly-index pipeline: anomaly, models, ensembles, peak statistics.
    Enso(EnsoArgs),
    /// Tidy CSVs from an experiment report.
    Plotdata(PlotArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// State dimension; above 1 a random stable mean system is drawn.
    #[arg(long, default_value_t = 1)]
    dim: usize,
    /// Record length in periods.
    #[arg(long, default_value_t = 100)]
    tf: usize,
    #[arg(long, default_value_t = 0.002)]
    dt: f64,
    #[arg(long, default_value_t = 5)]
    stride: usize,
    #[arg(long, default_value_t = 10)]
    burn_in: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum EstimatorArg {
    Lim,
    Cslim,
    Ecslim,
    Lcslim,
    All,
}

#[derive(Args)]
struct FitArgs {
    /// CSV with columns t,x1..xn at uniform spacing dividing the unit period.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    estimator: EstimatorArg,
    /// Number of intervals M.
    #[arg(long, default_value_t = 10)]
    intervals: usize,
    /// Lag k in samples.
    #[arg(long, default_value_t = 10)]
    lag: usize,
}

#[derive(Args)]
struct EnsoArgs {
    /// `year,month,value` CSV of the monthly index.
    #[arg(long, conflicts_with = "synthetic")]
    data: Option<PathBuf>,
    /// Use the built-in synthetic index instead of a data file.
    #[arg(long)]
    synthetic: bool,
    #[arg(long)]
    members: Option<usize>,
    #[arg(long)]
    years: Option<usize>,
    #[arg(long, value_parser = parse_polarity)]
    polarity: Option<Polarity>,
}

#[derive(Args)]
struct PlotArgs {
    /// report.json written by an experiment.
    #[arg(long)]
    report: PathBuf,
    /// curves, boxes, phases or all.
    #[arg(long, default_value = "all")]
    kind: String,
}

fn parse_polarity(s: &str) -> Result<Polarity, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_)
            | Error::InvalidArgument(_)
            | Error::UnknownKind(_)
            | Error::IndivisibleInterval { .. }
            | Error::LagExceedsRecord { .. }
            | Error::StrideMisaligned { .. }
            | Error::TooFewPhases { .. } => EXIT_CONFIG,
            e if e.is_data_error() => EXIT_DATA,
            _ => EXIT_OTHER,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

type CliResult<T> = Result<T, Failure>;

fn config_failure(message: String) -> Failure {
    Failure {
        code: EXIT_CONFIG,
        message,
    }
}

fn build_config(kind: ExperimentKind, g: &Global) -> CliResult<ExperimentConfig> {
    let mut cfg = ExperimentConfig::defaults(kind);
    if g.full_scale {
        cfg = cfg.full_scale();
    }
    if let Some(path) = &g.config {
        let text = fs::read_to_string(path)
            .map_err(|e| config_failure(format!("cannot read {}: {e}", path.display())))?;
        cfg = cfg.overlay(&text)?;
    }
    if let Some(seed) = g.seed {
        cfg.master_seed = seed;
    }
    if let Some(trials) = g.trials {
        cfg.trials = trials;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text)?;
    Ok(())
}

fn run_report(cfg: &ExperimentConfig, out: &Path) -> CliResult<()> {
    let start = Instant::now();
    let report = experiment::run(cfg)?;
    fs::create_dir_all(out)?;
    write_json(&out.join("report.json"), &report.to_json()?)?;
    let timing = serde_json::json!({ "wall_seconds": start.elapsed().as_secs_f64() });
    write_json(&out.join("timing.json"), &format!("{timing}\n"))?;
    eprintln!(
        "{} trial records, {} of {} fits failed; report in {}",
        report.trials.len(),
        report.failure_count,
        report.attempted,
        out.display()
    );
    if !report.within_budget() {
        return Err(Failure {
            code: EXIT_BUDGET,
            message: format!(
                "failure fraction {:.3} exceeds budget {}",
                report.failure_fraction(),
                report.config.failure_budget
            ),
        });
    }
    Ok(())
}

fn simulate_cmd(args: &SimulateArgs, g: &Global) -> CliResult<()> {
    let mut cfg = build_config(ExperimentKind::Oned, g)?;
    cfg.dims = vec![args.dim];
    let stream = RandomStream::new(cfg.master_seed, 0);
    let p = &cfg.system;
    let (abar, qbar) = if args.dim == 1 {
        (
            Matrix::from_element(1, 1, p.mean_dynamics),
            Matrix::from_element(1, 1, p.mean_diffusion),
        )
    } else {
        simulate::random_stable_system(args.dim, stream.child(0))?
    };
    let spec = simulate::sinusoidal_system(&abar, p.a, &qbar, p.b)?;
    let path_cfg = PathConfig {
        dt: args.dt,
        periods: args.tf,
        x0: vec![0.0; args.dim],
        burn_in_periods: args.burn_in,
        stride: args.stride,
    };
    let path = simulate::sample_path_with(&spec, &path_cfg, stream.child(1))?;
    fs::create_dir_all(&g.out)?;
    path.write_csv(BufWriter::new(File::create(g.out.join("path.csv"))?))?;
    let row_major = |m: &Matrix| m.transpose().as_slice().to_vec();
    let meta = serde_json::json!({
        "version": format!("cslim {}", experiment::VERSION),
        "seed": cfg.master_seed,
        "dim": args.dim,
        "mean_dynamics": row_major(&abar),
        "mean_diffusion": row_major(&qbar),
        "a": p.a,
        "b": p.b,
        "dt": args.dt,
        "stride": args.stride,
        "periods": args.tf,
        "burn_in_periods": args.burn_in,
    });
    write_json(&g.out.join("system.json"), &(serde_json::to_string_pretty(&meta).map_err(Error::from)? + "\n"))
}

fn fit_cmd(args: &FitArgs, g: &Global) -> CliResult<()> {
    let ts = TimeSeries::read_csv(File::open(&args.input)?)?;
    let period = ts.samples_per_period()?;
    let wanted = match args.estimator {
        EstimatorArg::Lim => vec![Estimator::Lim],
        EstimatorArg::Cslim => vec![Estimator::Cslim],
        EstimatorArg::Ecslim => vec![Estimator::Ecslim],
        EstimatorArg::Lcslim => vec![Estimator::Lcslim],
        EstimatorArg::All => Estimator::ALL.to_vec(),
    };
    fs::create_dir_all(&g.out)?;
    for est in wanted {
        let model = match est {
            Estimator::Lim => models::classical_lim(&ts, args.lag)
                .map(|(a, q)| PeriodicModel::constant(Estimator::Lim, &a, &q, period, ts.dt()))?,
            Estimator::Cslim => models::cs_lim(&ts, period, args.intervals, args.lag, CsVariant::Original)?,
            Estimator::Ecslim => models::cs_lim(&ts, period, args.intervals, args.lag, CsVariant::E)?,
            Estimator::Lcslim => models::l_cs_lim(&ts, period)?,
        };
        write_json(&g.out.join(format!("model_{est}.json")), &(model.to_json()? + "\n"))?;
        model.write_csv(BufWriter::new(File::create(g.out.join(format!("model_{est}.csv")))?))?;
        eprintln!("{est}: {} phases, {} flagged", model.phases.len(), model.flagged_count());
    }
    Ok(())
}

fn enso_cmd(args: &EnsoArgs, g: &Global) -> CliResult<()> {
    let mut cfg = build_config(ExperimentKind::Enso, g)?;
    if let Some(d) = &args.data {
        cfg.enso.data = Some(d.to_string_lossy().into_owned());
    }
    if args.synthetic {
        cfg.enso.data = None;
    } else if cfg.enso.data.is_none() {
        return Err(config_failure("pass --data FILE or --synthetic".into()));
    }
    if let Some(m) = args.members {
        cfg.enso.members = m;
    }
    if args.years.is_some() {
        cfg.enso.years = args.years;
    }
    if let Some(p) = args.polarity {
        cfg.enso.polarity = p;
    }
    cfg.validate()?;
    let report = experiment::run_enso(&cfg, &g.out)?;
    for m in &report.models {
        eprintln!(
            "{}: median total peaks {} (observed {}), {} failed members",
            m.estimator,
            m.stats.total.median,
            report.observed_total,
            m.failed_members.len()
        );
    }
    Ok(())
}

fn plot_cmd(args: &PlotArgs, g: &Global) -> CliResult<()> {
    let text = fs::read_to_string(&args.report)?;
    let report = ExperimentReport::from_json(&text)?;
    let kinds = if args.kind == "all" {
        let mut k = vec![PlotKind::Boxes, PlotKind::Phases];
        if report.curves.is_some() {
            k.insert(0, PlotKind::Curves);
        }
        k
    } else {
        vec![args.kind.parse::<PlotKind>()?]
    };
    for k in kinds {
        let path = experiment::emit_plot_data(&report, k, &g.out)?;
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}

fn dispatch(cli: &Cli) -> CliResult<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Simulate(a) => simulate_cmd(a, g),
        Command::Fit(a) => fit_cmd(a, g),
        Command::Oned => run_report(&build_config(ExperimentKind::Oned, g)?, &g.out),
        Command::Nd { dims } => {
            let mut cfg = build_config(ExperimentKind::Nd, g)?;
            if let Some(d) = dims {
                cfg.dims = d.clone();
                cfg.validate()?;
            }
            run_report(&cfg, &g.out)
        }
        Command::Convergence => run_report(&build_config(ExperimentKind::Convergence, g)?, &g.out),
        Command::Enso(a) => enso_cmd(a, g),
        Command::Plotdata(a) => plot_cmd(a, g),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use popproto::engine::{OutputCounts, Protocol};
use popproto::harness::calibration::{self, build_table};
use popproto::harness::fit::{scaling_fit, FitModel, Metric};
use popproto::harness::oracle::{reachability_oracle, OracleReport, Verdict};
use popproto::harness::{output_path, read_csv, run_experiment, write_rows, ExperimentSpec, Format, MSpec, ProtocolKind, Row};
use popproto::leader::{Backup2, Backup2Protocol, Role};
use popproto::majority::{majority_inputs, Backup4, Backup4Protocol, Majority, MajorityParams};
use popproto::phaseclock::ClockParams;

#[derive(Parser)]
#[command(name = "popproto", version, about = "Population protocol simulator and experiment harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write one row per trial.
    Run(RunArgs),
    /// Exhaustively check exactness on a tiny population.
    Oracle(OracleArgs),
    /// Regenerate the phase-clock calibration table.
    Calibrate(CalibrateArgs),
    /// Normalize running times from result files across population sizes.
    Fit(FitArgs),
}

#[derive(clap::Args)]
struct RunArgs {
    /// JSON experiment spec; the flags below are ignored when given.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, required_unless_present = "spec")]
    protocol: Option<ProtocolKind>,
    #[arg(short, long, required_unless_present = "spec")]
    n: Option<usize>,
    #[arg(short, long, default_value_t = 2)]
    s: u32,
    #[arg(short, long)]
    r: Option<u32>,
    #[arg(long)]
    alpha: Option<usize>,
    /// Phases per round, or `calibrate`.
    #[arg(short, long, default_value = "calibrate")]
    m: MSpec,
    #[arg(long, default_value_t = 1)]
    trials: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    budget: Option<u64>,
    #[arg(long, default_value_t = 0)]
    cadence: u64,
    #[arg(short, long)]
    output: Option<PathBuf>,
    #[arg(long, default_value = "csv")]
    format: Format,
    /// Directory for output files when `--output` is absent.
    #[arg(long, env = "POPPROTO_OUT_DIR")]
    out_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum OracleProtocol {
    Backup4,
    Backup2,
    StableMajority,
    ConvergentMajority,
}

#[derive(clap::Args)]
struct OracleArgs {
    #[arg(long)]
    protocol: OracleProtocol,
    #[arg(short, long)]
    n: usize,
    #[arg(long)]
    alpha: Option<usize>,
    #[arg(short, long, default_value_t = 1)]
    m: u32,
    /// Ring rounds; the protocol's own ring size by default.
    #[arg(short, long)]
    r: Option<u32>,
    #[arg(long)]
    counter_max: Option<u16>,
    #[arg(long, default_value_t = popproto::harness::oracle::DEFAULT_LIMIT)]
    limit: usize,
}

#[derive(clap::Args)]
struct CalibrateArgs {
    /// Population sizes, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = [512usize, 1024, 2048, 4096, 8192, 16384])]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = calibration::D1)]
    d1: f64,
    #[arg(long, default_value_t = calibration::SEED)]
    seed: u64,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    NLnN,
    LogS,
    Log5n,
    Ln2,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Convergence,
    Stabilization,
}

#[derive(clap::Args)]
struct FitArgs {
    /// Result files written by `run` (csv or json).
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long, default_value = "n-ln-n")]
    model: ModelArg,
    #[arg(long, default_value = "stabilization")]
    metric: MetricArg,
    #[arg(short, long, default_value_t = 2)]
    s: u32,
    #[arg(long, default_value_t = 1)]
    alpha: usize,
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run(a) => run(a),
        Command::Oracle(a) => oracle(a),
        Command::Calibrate(a) => calibrate(a),
        Command::Fit(a) => fit(a),
    }
}

fn sink(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
            Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?))
        }
        None => Box::new(io::stdout().lock()),
    })
}

fn run(a: RunArgs) -> Result<bool> {
    let spec = match &a.spec {
        Some(path) => {
            let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
            serde_json::from_reader(BufReader::new(f)).with_context(|| format!("parsing {}", path.display()))?
        }
        None => ExperimentSpec {
            protocol: a.protocol.context("--protocol is required")?,
            n: a.n.context("--n is required")?,
            s: a.s,
            r: a.r,
            alpha: a.alpha,
            m: a.m,
            trials: a.trials,
            seed: a.seed,
            budget: a.budget,
            cadence: a.cadence,
            output: a.output.clone(),
            format: a.format,
        },
    };
    let rows = run_experiment(&spec)?;
    let path = output_path(&spec, a.out_dir.as_deref());
    let mut out = sink(path.as_deref())?;
    write_rows(&rows, spec.format, &mut out)?;
    out.flush()?;
    let failed = rows.iter().filter(|r| r.failed()).count();
    if let Some(p) = &path {
        eprintln!("{} rows ({failed} failed) -> {}", rows.len(), p.display());
    }
    Ok(failed == 0)
}

fn all_equal<O: Ord>(v: O) -> impl Fn(&OutputCounts<O>) -> bool {
    move |o| o.len() == 1 && o.contains_key(&v)
}

fn oracle(a: OracleArgs) -> Result<bool> {
    let n = a.n;
    let alpha = a.alpha.unwrap_or(if n % 2 == 0 { 2 } else { 1 });
    let inputs = || majority_inputs(n, alpha).with_context(|| format!("alpha = {alpha} does not fit n = {n}"));
    let report: OracleReport = match a.protocol {
        OracleProtocol::Backup4 => {
            let init: Vec<Backup4> = inputs()?.into_iter().map(Backup4::from_opinion).collect();
            reachability_oracle(&Backup4Protocol, &init, all_equal(1), a.limit)?
        }
        OracleProtocol::Backup2 => {
            let init = vec![Backup2::L; n];
            reachability_oracle(&Backup2Protocol, &init, |o: &OutputCounts<Role>| o.get(&Role::Leader) == Some(&1), a.limit)?
        }
        OracleProtocol::StableMajority | OracleProtocol::ConvergentMajority => {
            let mut params = match a.protocol {
                OracleProtocol::StableMajority => MajorityParams::stable(n, 2, a.m),
                _ => MajorityParams::convergent(n, 2, a.m),
            };
            if let Some(r) = a.r {
                params.clock = ClockParams::new(a.m, r);
            }
            if let Some(c) = a.counter_max {
                params.counter_max = c;
            }
            if a.counter_max.is_none() && matches!(a.protocol, OracleProtocol::ConvergentMajority) {
                bail!("the convergent counter needs --counter-max to fit the oracle");
            }
            let p = Majority::new(params);
            let init: Vec<_> = inputs()?.into_iter().map(|x| p.init(x)).collect();
            reachability_oracle(&p, &init, all_equal(1), a.limit)?
        }
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(report.verdict == Verdict::ExactAndCorrect)
}

fn calibrate(a: CalibrateArgs) -> Result<bool> {
    let table = build_table(&a.sizes, a.d1, a.seed)?;
    let mut out = sink(a.output.as_deref())?;
    serde_json::to_writer_pretty(&mut out, &table)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(true)
}

fn read_rows(path: &Path) -> Result<Vec<Row>> {
    let f = BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
    if path.extension().is_some_and(|e| e == "json") {
        Ok(serde_json::from_reader(f)?)
    } else {
        Ok(read_csv(f)?)
    }
}

fn fit(a: FitArgs) -> Result<bool> {
    let mut rows = Vec::new();
    for p in &a.inputs {
        rows.extend(read_rows(p)?);
    }
    let model = match a.model {
        ModelArg::NLnN => FitModel::NLnN,
        ModelArg::LogS => FitModel::NLnNLogS { s: a.s, alpha: a.alpha },
        ModelArg::Log5n => FitModel::NLnNLog5N { s: a.s },
        ModelArg::Ln2 => FitModel::NLn2NOverLnS { s: a.s },
    };
    let metric = match a.metric {
        MetricArg::Convergence => Metric::Convergence,
        MetricArg::Stabilization => Metric::Stabilization,
    };
    let table = scaling_fit(&rows, model, metric)?;
    println!("{}", serde_json::to_string_pretty(&table)?);
    Ok(true)
}

//! `ppmreg`: shape-matching runs, timing benchmarks, self-checks and
//! persistence dumps from the command line.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ppmreg::bench::{run_bench, BenchGrid};
use ppmreg::config::{preset_names, ExperimentConfig};
use ppmreg::descent::with_workers;
use ppmreg::experiment::run_to_dir;
use ppmreg::geometry::{read_cloud_csv, RngStream};
use ppmreg::objective::RegKind;
use ppmreg::ppm::compute_ppm;
use ppmreg::verify::{run_all, VerifyOptions};
use ppmreg::vr::{vr_persistence_capped, write_diagrams_csv};

#[derive(Parser)]
#[command(
    name = "ppmreg",
    version,
    about = "Principal persistence measures and topological regularization of point clouds"
)]
struct Cli {
    /// Worker threads (0 uses every available core).
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a shape-matching experiment and write its trajectory and frames.
    Run(RunArgs),
    /// Time gradient steps of the regularizers over a grid.
    Bench(BenchArgs),
    /// Run the oracle, metric, transport and gradient self-checks.
    Verify(VerifyArgs),
    /// Dump the PPM of a point cloud as NDJSON.
    Ppm(PpmArgs),
    /// Dump the exact Vietoris-Rips diagrams of a point cloud as CSV.
    Diagram(DiagramArgs),
    /// List the built-in experiment presets.
    Presets,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment configuration file (TOML).
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    config: Option<PathBuf>,
    /// Built-in configuration, see `ppmreg presets`.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    record_every: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = "run-output")]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// Grid file (TOML); without it the grid comes from the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = [128usize, 1024])]
    sizes: Vec<usize>,
    #[arg(long = "s", value_delimiter = ',', default_values_t = [512usize])]
    s_values: Vec<usize>,
    /// Any of ppm-reg, w-ppm-reg, pd-reg.
    #[arg(long, value_delimiter = ',', default_values = ["ppm-reg"])]
    variants: Vec<String>,
    #[arg(long, default_value_t = 3)]
    repetitions: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Report file (CSV).
    #[arg(long, default_value = "bench.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    oracle_cases: usize,
    /// Perturb analytic gradients to check that the suite notices.
    #[arg(long, hide = true)]
    corrupt_gradients: bool,
}

#[derive(Args)]
struct PpmArgs {
    /// Point cloud (CSV, one point per row).
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    header: bool,
    #[arg(long, default_value_t = 1)]
    q: usize,
    #[arg(long = "s", default_value_t = 1000)]
    s: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    replacement: bool,
    /// Output file; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DiagramArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    header: bool,
    #[arg(long, default_value_t = 1)]
    max_dim: usize,
    #[arg(long, default_value_t = ppmreg::vr::DEFAULT_MAX_POINTS)]
    max_points: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Failure classes, mapped to the process exit code.
enum Failure {
    Config(String),
    Suite(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Suite(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Suite(m) | Failure::Runtime(m) => m,
        }
    }
}

/// Library errors from loading inputs are configuration errors.
fn input_error(e: ppmreg::Error) -> Failure {
    match e {
        ppmreg::Error::Config(_) | ppmreg::Error::Io { .. } | ppmreg::Error::Csv(_) => {
            Failure::Config(e.to_string())
        }
        other => Failure::Runtime(other.to_string()),
    }
}

fn runtime_error(e: ppmreg::Error) -> Failure {
    match e {
        ppmreg::Error::Config(_) => Failure::Config(e.to_string()),
        other => Failure::Runtime(other.to_string()),
    }
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>, Failure> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| {
            Failure::Runtime(format!("cannot create {}: {e}", p.display()))
        })?)),
        None => Box::new(BufWriter::new(std::io::stdout().lock())),
    })
}

fn pooled<T: Send>(
    workers: usize,
    f: impl FnOnce() -> Result<T, Failure> + Send,
) -> Result<T, Failure> {
    with_workers(workers, f).map_err(|e| Failure::Config(e.to_string()))?
}

fn cmd_run(args: RunArgs, workers: usize) -> Result<(), Failure> {
    let mut cfg = match (&args.config, &args.preset) {
        (Some(path), _) => ExperimentConfig::load(path).map_err(input_error)?,
        (None, Some(name)) => ExperimentConfig::preset(name).map_err(input_error)?,
        (None, None) => {
            return Err(Failure::Config(
                "either --config or --preset is required".into(),
            ))
        }
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(steps) = args.steps {
        cfg.steps = steps;
    }
    if let Some(k) = args.record_every {
        cfg.record_every = k;
    }
    if workers != 0 {
        cfg.workers = workers;
    }
    cfg.validate().map_err(input_error)?;
    let (files, out) = run_to_dir(&cfg, &args.out).map_err(runtime_error)?;
    let last = out
        .trajectory
        .last()
        .expect("a run has at least one record");
    println!(
        "{} records, {} frames -> {}",
        out.trajectory.records.len(),
        files.frames.len(),
        files.trajectory.display()
    );
    match last.pd_distance {
        Some(pd) => println!(
            "final value {:.6}, dimension-1 diagram distance {:.6}",
            last.value, pd
        ),
        None => println!("final value {:.6}", last.value),
    }
    Ok(())
}

fn cmd_bench(args: BenchArgs, workers: usize) -> Result<(), Failure> {
    let mut grid = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::Config(format!("cannot read {}: {e}", path.display())))?;
            BenchGrid::from_toml_str(&text)
                .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?
        }
        None => {
            let variants = args
                .variants
                .iter()
                .map(|v| match v.as_str() {
                    "ppm-reg" => Ok(RegKind::PpmReg),
                    "w-ppm-reg" => Ok(RegKind::WPpmReg),
                    "pd-reg" => Ok(RegKind::PdReg),
                    other => Err(Failure::Config(format!("unknown variant `{other}`"))),
                })
                .collect::<Result<Vec<_>, _>>()?;
            let mut g = BenchGrid::new(args.sizes.clone(), args.s_values.clone(), variants);
            g.repetitions = args.repetitions;
            g
        }
    };
    if let Some(seed) = args.seed {
        grid.seed = seed;
    }
    grid.validate().map_err(input_error)?;
    let report = pooled(workers, || {
        run_bench(&grid, |row| {
            println!(
                "{:<10} n={:<5} s={:<5} {:.4} ± {:.4} s per {} steps",
                row.variant.name(),
                row.n,
                row.s,
                row.mean_seconds,
                row.std_seconds,
                row.timed_steps
            )
        })
        .map_err(runtime_error)
    })?;
    for note in &report.skipped {
        eprintln!("note: {note}");
    }
    report
        .write_csv(output(Some(&args.out))?)
        .map_err(runtime_error)?;
    Ok(())
}

fn cmd_verify(args: VerifyArgs, workers: usize) -> Result<(), Failure> {
    let opts = VerifyOptions {
        seed: args.seed,
        oracle_cases: args.oracle_cases,
        corrupt_gradients: args.corrupt_gradients,
        ..Default::default()
    };
    let report = pooled(workers, || run_all(&opts).map_err(runtime_error))?;
    for s in &report.suites {
        println!(
            "[{}] {}: {} cases, max error {:.3e} (tolerance {:e})",
            if s.passed { "PASS" } else { "FAIL" },
            s.name,
            s.cases,
            s.max_error,
            s.tolerance
        );
        for d in &s.details {
            println!("    {d}");
        }
    }
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Suite(
            "one or more verification suites failed".into(),
        ))
    }
}

fn cmd_ppm(args: PpmArgs, workers: usize) -> Result<(), Failure> {
    let cloud = read_cloud_csv(&args.input, args.header).map_err(input_error)?;
    let mut rng = RngStream::new(args.seed);
    let measure = pooled(workers, || {
        compute_ppm(&cloud, args.q, args.s, &mut rng, args.replacement).map_err(runtime_error)
    })?;
    measure
        .write_ndjson(output(args.out.as_deref())?)
        .map_err(runtime_error)
}

fn cmd_diagram(args: DiagramArgs, workers: usize) -> Result<(), Failure> {
    let cloud = read_cloud_csv(&args.input, args.header).map_err(input_error)?;
    let result = pooled(workers, || {
        vr_persistence_capped(&cloud, args.max_dim, args.max_points).map_err(runtime_error)
    })?;
    write_diagrams_csv(&result.diagrams, output(args.out.as_deref())?).map_err(runtime_error)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Run(a) => cmd_run(a, cli.workers),
        Command::Bench(a) => cmd_bench(a, cli.workers),
        Command::Verify(a) => cmd_verify(a, cli.workers),
        Command::Ppm(a) => cmd_ppm(a, cli.workers),
        Command::Diagram(a) => cmd_diagram(a, cli.workers),
        Command::Presets => {
            for name in preset_names() {
                println!("{name}");
            }
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

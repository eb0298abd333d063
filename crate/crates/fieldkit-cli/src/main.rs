//! Command-line front end: dataset simulation, field map estimation,
//! and solver benchmarking on top of the fieldkit library.

use clap::{Args, Parser, Subcommand};
use fieldkit::io::{
    cmd_bench, cmd_estimate, cmd_simulate, BenchConfig, BenchMethod, Beta, PrecondKind, RunConfig,
    SimulateConfig, VolumeContainer,
};
use fieldkit::signal_model::{FatModel, FatPeak, Mode};
use fieldkit::Error;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "fieldkit",
    about = "Regularized B0 field map estimation and water-fat separation",
    version
)]
struct Cli {
    /// Worker threads (0 = all cores); the FIELDKIT_THREADS
    /// environment variable overrides this flag.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-echo dataset.
    Simulate(SimulateArgs),
    /// Estimate a field map (and components in water-fat mode).
    Estimate(EstimateArgs),
    /// Compare solver variants on one dataset.
    Bench(BenchArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Output directory for the dataset container.
    #[arg(long)]
    out: PathBuf,
    /// fieldmap or waterfat.
    #[arg(long, default_value = "fieldmap")]
    mode: String,
    /// Volume dimensions nx,ny,nz.
    #[arg(long, default_value = "64,64,40")]
    dims: String,
    #[arg(long, default_value_t = 4)]
    coils: usize,
    /// Echo times in milliseconds, comma separated.
    #[arg(long, default_value = "0,2,10")]
    echoes_ms: String,
    /// Signal-to-noise ratio in dB, or "inf" for noiseless data.
    #[arg(long, default_value = "20")]
    snr: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fat peaks as amp:hz pairs, comma separated (water-fat mode).
    #[arg(long)]
    fat_peaks: Option<String>,
    /// Single-peak fat shift in Hz (water-fat mode).
    #[arg(long, default_value_t = -440.0)]
    fat_hz: f64,
}

#[derive(Args)]
struct EstimateArgs {
    /// Input manifest (file or dataset directory).
    #[arg(long)]
    input: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// fieldmap or waterfat; defaults to the dataset mode.
    #[arg(long)]
    mode: Option<String>,
    /// Regularization weight; accepts "2^-4" notation.
    #[arg(long, default_value = "2^-4")]
    beta: String,
    /// Finite-difference order (1 or 2).
    #[arg(long, default_value_t = 1)]
    order: u8,
    /// Preconditioner: ic, ic0, diag, or none.
    #[arg(long, default_value = "ic")]
    precond: String,
    /// Tolerance scale for the threshold incomplete Cholesky.
    #[arg(long, default_value_t = 1e-3)]
    ict_scale: f64,
    /// Outer iterations.
    #[arg(long, default_value_t = 30)]
    outer: usize,
    /// Inner line-search iterations.
    #[arg(long, default_value_t = 10)]
    inner: usize,
    /// Grid points for the water-fat sweep initializer.
    #[arg(long, default_value_t = 100)]
    sweep_grid: usize,
    /// CG iterations for the PWLS initializer smoothing.
    #[arg(long, default_value_t = 10)]
    pwls_cg: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    estimate: EstimateArgs,
    /// Methods to compare, comma separated.
    #[arg(long, default_value = "qm,ncg,ncg-d,ncg-ic")]
    methods: String,
    /// RMSD threshold (Hz) for the time-to-tolerance measurement.
    #[arg(long, default_value_t = 0.5)]
    rmsd_tol_hz: f64,
    /// Outer iterations for the long-run reference.
    #[arg(long, default_value_t = 60)]
    ref_iters: usize,
    #[arg(long, default_value_t = 800)]
    qm_iters: usize,
    #[arg(long, default_value_t = 200)]
    ncg_iters: usize,
    #[arg(long, default_value_t = 150)]
    ncgd_iters: usize,
    #[arg(long, default_value_t = 30)]
    ic_iters: usize,
}

fn parse_mode(s: &str) -> Result<Mode, Error> {
    match s {
        "fieldmap" => Ok(Mode::Fieldmap),
        "waterfat" => Ok(Mode::Waterfat),
        _ => Err(Error::Config(format!(
            "mode must be 'fieldmap' or 'waterfat', got '{s}'"
        ))),
    }
}

fn parse_dims(s: &str) -> Result<[usize; 3], Error> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(Error::Config(format!("dims must be nx,ny,nz, got '{s}'")));
    }
    let mut out = [0usize; 3];
    for (o, p) in out.iter_mut().zip(&parts) {
        *o = p
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad dimension '{p}'")))?;
        if *o == 0 {
            return Err(Error::Config("dimensions must be positive".into()));
        }
    }
    Ok(out)
}

fn parse_echoes_ms(s: &str) -> Result<Vec<f64>, Error> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map(|ms| ms * 1e-3)
                .map_err(|_| Error::Config(format!("bad echo time '{p}'")))
        })
        .collect()
}

fn parse_snr(s: &str) -> Result<Option<f64>, Error> {
    if s.eq_ignore_ascii_case("inf") {
        return Ok(None);
    }
    s.parse::<f64>()
        .map(Some)
        .map_err(|_| Error::Config(format!("bad snr '{s}'")))
}

fn parse_fat_peaks(s: &str) -> Result<FatModel, Error> {
    let mut peaks = Vec::new();
    for part in s.split(',') {
        let (amp, hz) = part
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("fat peak '{part}' is not amp:hz")))?;
        peaks.push(FatPeak {
            amplitude: amp
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad fat amplitude '{amp}'")))?,
            freq_hz: hz
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad fat shift '{hz}'")))?,
        });
    }
    FatModel::new(peaks)
}

fn resolve_threads(flag: usize) -> usize {
    match std::env::var("FIELDKIT_THREADS") {
        Ok(v) => v.parse().unwrap_or(flag),
        Err(_) => flag,
    }
}

fn estimate_config(args: &EstimateArgs, out: &PathBuf, threads: usize) -> Result<RunConfig, Error> {
    // Mode defaults to whatever the dataset declares.
    let mode = match &args.mode {
        Some(m) => parse_mode(m)?,
        None => VolumeContainer::open(&args.input)?.manifest.mode,
    };
    let cfg = RunConfig {
        mode,
        beta: Beta::parse(&args.beta)?,
        reg_order: args.order,
        preconditioner: PrecondKind::parse(&args.precond)?,
        ict_scale: args.ict_scale,
        outer_iters: args.outer,
        inner_iters: args.inner,
        sweep_grid: args.sweep_grid,
        pwls_cg_iters: args.pwls_cg,
        seed: args.seed,
        threads,
        output_dir: out.to_string_lossy().into_owned(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Error> {
    let threads = resolve_threads(cli.threads);
    if threads > 0 {
        // Ignore the error if a pool already exists (tests).
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    match cli.command {
        Command::Simulate(args) => {
            let mode = parse_mode(&args.mode)?;
            let fat_model = match mode {
                Mode::Fieldmap => None,
                Mode::Waterfat => Some(match &args.fat_peaks {
                    Some(s) => parse_fat_peaks(s)?,
                    None => FatModel::single_peak(args.fat_hz),
                }),
            };
            let cfg = SimulateConfig {
                mode,
                dims: parse_dims(&args.dims)?,
                n_coils: args.coils,
                echo_times_s: parse_echoes_ms(&args.echoes_ms)?,
                snr_db: parse_snr(&args.snr)?,
                seed: args.seed,
                fat_model,
            };
            let path = cmd_simulate(&cfg, &args.out)?;
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::Estimate(args) => {
            let cfg = estimate_config(&args, &args.out, threads)?;
            let out = cmd_estimate(&args.input, &args.out, &cfg)?;
            let last = out.log.rows.last().expect("log has rows");
            println!(
                "wrote {} ({} iterations, final cost {:.6e})",
                out.manifest_path.display(),
                last.iter,
                last.psi
            );
            if let Some(rmse) = last.rmse_hz {
                println!("final rmse vs truth: {rmse:.4} Hz");
            }
            Ok(())
        }
        Command::Bench(args) => {
            let cfg = estimate_config(&args.estimate, &args.estimate.out, threads)?;
            let methods = args
                .methods
                .split(',')
                .map(|s| BenchMethod::parse(s.trim()))
                .collect::<Result<Vec<_>, _>>()?;
            let bench = BenchConfig {
                methods,
                rmsd_tol_hz: args.rmsd_tol_hz,
                ref_iters: args.ref_iters,
                qm_iters: args.qm_iters,
                ncg_iters: args.ncg_iters,
                ncgd_iters: args.ncgd_iters,
                ic_iters: args.ic_iters,
            };
            let rows = cmd_bench(&args.estimate.input, &args.estimate.out, &cfg, &bench)?;
            for r in &rows {
                match (r.iters_to_tol, r.time_to_tol_s) {
                    (Some(it), Some(t)) => println!(
                        "{:8} reached tolerance in {it} iterations ({t:.3} s)",
                        r.method
                    ),
                    _ => println!("{:8} did not reach tolerance", r.method),
                }
            }
            Ok(())
        }
    }
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_)
        | Error::Manifest(_)
        | Error::InvalidArgument(_)
        | Error::ShapeMismatch(_)
        | Error::InvalidMask(_)
        | Error::Io(_) => 2,
        Error::NonFinite(_)
        | Error::Singular(_)
        | Error::FactorizationBreakdown
        | Error::DegenerateBasis => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};
use fa_precoder::channel::write_matrix;
use fa_precoder::config::{load_config, Command, RunConfig};
use fa_precoder::eval::{bench_iteration, run_sweep, PointStatus, SweepResult};
use fa_precoder::precoder::optimize;
use fa_precoder::report::{save, write_bench, write_sweep, write_trace, Provenance};
use fa_precoder::{Error, ErrorKind, Result};

#[derive(Parser)]
#[command(name = "fa-precoder", version, about = "Finite-alphabet MIMO precoder design under statistical CSI")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Spectral efficiency versus SNR for each configured method.
    Sweep(Common),
    /// Design one precoder; writes B as a matrix file plus `<out>.trace.csv`.
    Optimize(Common),
    /// Large-system approximation against the exact ergodic MI.
    Validate(Common),
    /// Seconds per optimizer iteration for each configured case.
    Bench(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output file (stdout for CSV commands when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (default: available cores).
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(0..=i64::MAX as u64))]
    seed: Option<u64>,
    #[arg(long)]
    timeout_secs: Option<f64>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (command, common) = match cli.command {
        Sub::Sweep(c) => (Command::Sweep, c),
        Sub::Optimize(c) => (Command::Optimize, c),
        Sub::Validate(c) => (Command::Validate, c),
        Sub::Bench(c) => (Command::Bench, c),
    };
    match run(command, &common) {
        Ok(None) => ExitCode::SUCCESS,
        Ok(Some(kind)) => ExitCode::from(kind.exit_code() as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.kind().exit_code() as u8)
        }
    }
}

/// `Ok(Some(kind))` when output was written but some points failed.
fn run(command: Command, common: &Common) -> Result<Option<ErrorKind>> {
    let mut cfg = load_config(&common.config)?;
    if cfg.command != command {
        return Err(Error::Config(format!(
            "{} is a '{}' config, not '{command}'",
            common.config.display(),
            cfg.command
        )));
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output = Some(out.clone());
    }
    if let Some(t) = common.timeout_secs {
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::Config(format!("--timeout-secs must be positive, got {t}")));
        }
        cfg.bench.timeout_secs = t;
    }
    if let Some(n) = common.workers {
        if n == 0 {
            return Err(Error::Config("--workers must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot start {n} workers: {e}")))?;
    }
    let deadline = common
        .timeout_secs
        .map(|t| Instant::now() + Duration::from_secs_f64(t));
    let prov = Provenance::now(command, cfg.seed, cfg.timing);
    match command {
        Command::Sweep | Command::Validate => sweep(&cfg, deadline, &prov),
        Command::Optimize => design(&cfg, deadline, &prov).map(|_| None),
        Command::Bench => bench(&cfg, &prov).map(|_| None),
    }
}

fn emit(out: Option<&Path>, f: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<()> {
    match out {
        Some(path) => save(path, |w| f(w)),
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            f(&mut lock).map_err(|e| Error::Io {
                context: PathBuf::from("<stdout>"),
                source: e,
            })
        }
    }
}

fn sweep(cfg: &RunConfig, deadline: Option<Instant>, prov: &Provenance) -> Result<Option<ErrorKind>> {
    let stats = cfg.stats()?;
    let c = cfg.constellation()?;
    let sc = cfg.sweep_config(deadline)?;
    let result = run_sweep(&stats, &c, &sc)?;
    emit(cfg.output.as_deref(), |w| write_sweep(w, &result, prov))?;
    if cfg.command == Command::Validate {
        summarize_gaps(&result);
    }
    let worst = result
        .records
        .iter()
        .filter_map(|r| match r.status {
            PointStatus::Failed { kind, .. } => Some(kind),
            PointStatus::Ok => None,
        })
        .max_by_key(|k| k.exit_code());
    Ok(worst)
}

fn summarize_gaps(result: &SweepResult) {
    let mut worst: Option<(f64, f64)> = None;
    for r in &result.records {
        if let (Some(a), Some(e)) = (r.mi_asy, r.mi_exact) {
            let gap = a - e;
            log::info!("{:>6} dB {:<14} asy {a:.4} exact {e:.4} gap {gap:+.4}", r.snr_db, r.method.to_string());
            if worst.is_none_or(|(g, _)| gap.abs() > g.abs()) {
                worst = Some((gap, r.snr_db));
            }
        }
    }
    if let Some((gap, snr)) = worst {
        log::info!("largest |I_asy - I_exact| = {:.4} bits at {snr} dB", gap.abs());
    }
}

fn design(cfg: &RunConfig, deadline: Option<Instant>, prov: &Provenance) -> Result<()> {
    let out = cfg
        .output
        .as_deref()
        .ok_or_else(|| Error::Config("optimize needs an output path (--out or output = ...)".into()))?;
    let sys = cfg.system.as_ref().expect("validated config has a system section");
    let stats = cfg.stats()?;
    let c = cfg.constellation()?;
    let p = 10f64.powf(sys.snr_db[0] / 10.0);
    let trace = optimize(&stats, &c, p, sys.s, sys.n_s, &cfg.optimizer_config(deadline))?;
    log::info!(
        "best restart {} reached I_asy = {:.6} bits",
        trace.best,
        trace.value().total
    );
    write_matrix(out, &trace.b)?;
    let mut trace_path = out.as_os_str().to_owned();
    trace_path.push(".trace.csv");
    save(Path::new(&trace_path), |w| write_trace(w, &trace, prov))
}

fn bench(cfg: &RunConfig, prov: &Provenance) -> Result<()> {
    let mut records = Vec::with_capacity(cfg.bench.cases.len());
    for case in &cfg.bench.cases {
        let mut opts = cfg.bench_options();
        opts.allow_over_cap = case.expect_timeout;
        let rec = bench_iteration(case.n_t, case.n_s, case.modulation, &opts)?;
        log::info!(
            "N_t = {} N_s = {} {}: {:?} s/iteration",
            case.n_t,
            case.n_s,
            case.modulation,
            rec.seconds_per_iteration
        );
        records.push(rec);
    }
    emit(cfg.output.as_deref(), |w| write_bench(w, &records, prov))
}

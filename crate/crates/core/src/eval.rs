//! Exact ergodic MI, baseline precoders, SNR sweeps and the per-iteration
//! benchmark.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::Rng;
use rayon::prelude::*;

use crate::asymptotic::{AsymptoticMi, FixedPointMethod, FixedPointOptions, Surrogate};
use crate::channel::{rng_stream, sample_channel, ChannelStats};
use crate::constellation::{product_size, search_space_size, Constellation, Modulation};
use crate::error::{Error, ErrorKind, Result};
use crate::linalg::ComplexMatrix;
use crate::mi::{MiEstimate, MiMethod, NoiseBank, SymbolTable};
use crate::precoder::{
    optimize, pair_subchannels, Optimizer, OptimizerConfig, StructuredPrecoder,
};
use crate::tol;

const CHANNEL_STREAM: u64 = 0x6368_616e_0000_0000;

/// How the noise bank is spent on each channel realization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExactMode {
    /// Every transmitted symbol sees every noise sample: `M^{2N_t}·|bank|`
    /// likelihood terms per realization.
    Full,
    /// The bank is shared out across transmitted symbols: `M^{N_t}·|bank|`
    /// terms per realization.
    Stratified,
}

#[derive(Debug, Clone, Copy)]
pub struct ExactOptions {
    pub mode: ExactMode,
    pub deadline: Option<Instant>,
}

impl Default for ExactOptions {
    fn default() -> Self {
        Self {
            mode: ExactMode::Full,
            deadline: None,
        }
    }
}

/// Ergodic `I(d; H B d + n)` averaged over `n_channels` draws of `H`.
pub fn exact_ergodic_mi<R: Rng + ?Sized>(
    stats: &ChannelStats,
    b: &ComplexMatrix,
    c: &Constellation,
    n_channels: usize,
    bank: &NoiseBank,
    rng: &mut R,
) -> Result<MiEstimate> {
    exact_ergodic_mi_with(stats, b, c, n_channels, bank, rng, &ExactOptions::default())
}

/// Channels are drawn sequentially from `rng`, evaluated in parallel and
/// averaged in draw order. The standard error comes from the spread of the
/// per-channel estimates, which carries both channel and noise variability.
pub fn exact_ergodic_mi_with<R: Rng + ?Sized>(
    stats: &ChannelStats,
    b: &ComplexMatrix,
    c: &Constellation,
    n_channels: usize,
    bank: &NoiseBank,
    rng: &mut R,
    opts: &ExactOptions,
) -> Result<MiEstimate> {
    if b.rows() != stats.n_t || !b.is_square() {
        return Err(Error::dim(format!(
            "precoder is {}x{}, expected {n}x{n}",
            b.rows(),
            b.cols(),
            n = stats.n_t
        )));
    }
    if bank.dim() != stats.n_r {
        return Err(Error::dim(format!(
            "noise bank has dimension {}, channel has {} receive antennas",
            bank.dim(),
            stats.n_r
        )));
    }
    if n_channels == 0 {
        return Err(Error::config("n_channels must be >= 1"));
    }
    let table = SymbolTable::new(c, stats.n_t)?;
    let channels: Vec<ComplexMatrix> = (0..n_channels)
        .map(|_| sample_channel(stats, rng).matmul(b))
        .collect::<Result<_>>()?;
    let per: Vec<MiEstimate> = channels
        .par_iter()
        .enumerate()
        .map(|(i, g)| match opts.mode {
            ExactMode::Full => Ok(table.evaluate(g, bank, false, opts.deadline)?.mi),
            ExactMode::Stratified => table.mi_stratified(g, bank, i, opts.deadline),
        })
        .collect::<Result<_>>()?;
    let n = per.len() as f64;
    let mean = per.iter().map(|e| e.value).sum::<f64>() / n;
    let std_error = if per.len() == 1 {
        per[0].std_error
    } else {
        let var = per.iter().map(|e| (e.value - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    };
    Ok(MiEstimate {
        value: mean,
        std_error,
        method: MiMethod::MonteCarlo,
    })
}

/// Water-filling of total power `p` over parallel gains, maximizing
/// `Σ log(1 + g_i p_i)`. Zero gains receive nothing.
pub fn waterfill(gains: &[f64], p: f64) -> Vec<f64> {
    let mut order: Vec<usize> = (0..gains.len()).filter(|&i| gains[i] > 0.0).collect();
    order.sort_by(|&a, &b| gains[b].total_cmp(&gains[a]));
    let mut out = vec![0.0; gains.len()];
    let mut inv_sum = 0.0;
    let mut level = 0.0;
    let mut active = 0;
    for (k, &i) in order.iter().enumerate() {
        let inv = 1.0 / gains[i];
        let mu = (p + inv_sum + inv) / (k + 1) as f64;
        if mu <= inv {
            break;
        }
        inv_sum += inv;
        level = mu;
        active = k + 1;
    }
    for &i in &order[..active] {
        out[i] = (level - 1.0 / gains[i]).max(0.0);
    }
    out
}

/// `B = √(p/N_t) I`.
pub fn baseline_unprecoded(stats: &ChannelStats, p: f64) -> ComplexMatrix {
    ComplexMatrix::identity(stats.n_t).scale((p / stats.n_t as f64).sqrt())
}

/// The unprecoded transmitter written as one full-width stream:
/// equal power and mixer `U_T^H`, so that `U_T Λ_B V_B = √(p/N_t) I`.
pub fn unprecoded_structure(stats: &ChannelStats, p: f64) -> Result<StructuredPrecoder> {
    let n = stats.n_t;
    StructuredPrecoder::new(
        (0..n).collect(),
        n,
        vec![p / n as f64; n],
        vec![stats.u_t.adjoint()],
    )
}

/// Gaussian-input allocation along the transmit eigenvectors:
/// `B = U_T diag(√p_i)` with `p_i` water-filled on `λ_T,i · tr(Λ_R)/N_r`.
pub fn baseline_gaussian_waterfill(stats: &ChannelStats, p: f64) -> ComplexMatrix {
    let alloc = waterfill_allocation(stats, p);
    stats.u_t.scale_cols(&alloc.iter().map(|x| x.sqrt()).collect::<Vec<_>>())
}

pub fn waterfill_allocation(stats: &ChannelStats, p: f64) -> Vec<f64> {
    let scale = stats.trace_r() / stats.n_r as f64;
    let gains: Vec<f64> = stats.lambda_t.iter().map(|l| l * scale).collect();
    waterfill(&gains, p)
}

/// Water-filling as `N_t` width-one streams.
pub fn waterfill_structure(stats: &ChannelStats, p: f64) -> Result<StructuredPrecoder> {
    let n = stats.n_t;
    StructuredPrecoder::new(
        (0..n).collect(),
        1,
        waterfill_allocation(stats, p),
        vec![ComplexMatrix::identity(1); n],
    )
}

/// A precoder design evaluated by [`run_sweep`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Optimized { n_s: usize },
    Unprecoded,
    GaussianWaterfill,
    /// Equal power on the transmit eigenvectors, no mixing.
    Uniform,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Optimized { n_s } => write!(f, "optimized_ns{n_s}"),
            Method::Unprecoded => f.write_str("unprecoded"),
            Method::GaussianWaterfill => f.write_str("gaussian_wf"),
            Method::Uniform => f.write_str("uniform"),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unprecoded" => Ok(Method::Unprecoded),
            "gaussian_wf" => Ok(Method::GaussianWaterfill),
            "uniform" => Ok(Method::Uniform),
            _ => s
                .strip_prefix("optimized_ns")
                .and_then(|n| n.parse().ok())
                .filter(|&n_s| n_s > 0)
                .map(|n_s| Method::Optimized { n_s })
                .ok_or_else(|| {
                    Error::config(format!(
                        "unknown method '{s}' (expected optimized_ns<N>, unprecoded, gaussian_wf or uniform)"
                    ))
                }),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub snr_db: Vec<f64>,
    pub methods: Vec<Method>,
    pub optimizer: OptimizerConfig,
    /// Channel realizations for the exact MI.
    pub n_channels: usize,
    /// Noise samples for the exact MI.
    pub exact_bank: usize,
    /// Noise samples for the reported `I_asy` (a fresh bank, not the one
    /// the optimizer saw).
    pub report_bank: usize,
    pub exact: bool,
    pub exact_mode: ExactMode,
    pub seed: u64,
    pub deadline: Option<Instant>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            snr_db: Vec::new(),
            methods: Vec::new(),
            optimizer: OptimizerConfig::default(),
            n_channels: 200,
            exact_bank: 5000,
            report_bank: 5000,
            exact: true,
            exact_mode: ExactMode::Stratified,
            seed: 0,
            deadline: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PointStatus {
    Ok,
    Failed { kind: ErrorKind, message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRecord {
    pub snr_db: f64,
    pub method: Method,
    pub mi_asy: Option<f64>,
    pub asy_std_error: Option<f64>,
    pub mi_exact: Option<f64>,
    pub exact_std_error: Option<f64>,
    pub iterations: usize,
    pub wall_seconds: f64,
    pub status: PointStatus,
}

impl SweepRecord {
    /// The exact estimate's standard error when present, else the
    /// surrogate's.
    pub fn std_error(&self) -> Option<f64> {
        self.exact_std_error.or(self.asy_std_error)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub snr_db: Vec<f64>,
    pub records: Vec<SweepRecord>,
}

impl SweepResult {
    pub fn get(&self, snr_db: f64, method: Method) -> Option<&SweepRecord> {
        self.records
            .iter()
            .find(|r| r.snr_db == snr_db && r.method == method)
    }
}

/// Designed precoder plus the optimizer iteration count (0 for baselines).
pub fn design(
    stats: &ChannelStats,
    c: &Constellation,
    p: f64,
    method: Method,
    cfg: &OptimizerConfig,
) -> Result<(StructuredPrecoder, usize)> {
    match method {
        Method::Optimized { n_s } => {
            if n_s == 0 || stats.n_t % n_s != 0 {
                return Err(Error::config(format!(
                    "S·N_s must equal N_t: N_s = {n_s}, N_t = {}",
                    stats.n_t
                )));
            }
            let t = optimize(stats, c, p, stats.n_t / n_s, n_s, cfg)?;
            let iters = t.best_restart().records.len() - 1;
            Ok((t.precoder().clone(), iters))
        }
        Method::Unprecoded => Ok((unprecoded_structure(stats, p)?, 0)),
        Method::GaussianWaterfill => Ok((waterfill_structure(stats, p)?, 0)),
        Method::Uniform => Ok((StructuredPrecoder::uniform((0..stats.n_t).collect(), 1, p)?, 0)),
    }
}

/// `I_asy` of a fixed precoder on a fresh bank of `bank_size` samples.
pub fn report_asymptotic(
    stats: &ChannelStats,
    c: &Constellation,
    pre: &StructuredPrecoder,
    bank_size: usize,
    seed: u64,
    deadline: Option<Instant>,
) -> Result<AsymptoticMi> {
    let bank = NoiseBank::generate(pre.width(), bank_size, seed);
    let sur = Surrogate::new(stats, c, pre.width(), &bank)?;
    let opts = FixedPointOptions {
        method: FixedPointMethod::Secant,
        deadline,
        ..FixedPointOptions::default()
    };
    let (st, ev) = sur.solve_with_evaluations(pre, &opts)?;
    Ok(sur.assemble(st.gamma, st.psi, &ev))
}

/// Runs every method at every SNR point. All points share one set of channel
/// realizations and noise banks, so method comparisons use common random
/// numbers. A point that errors is kept with its message.
pub fn run_sweep(stats: &ChannelStats, c: &Constellation, cfg: &SweepConfig) -> Result<SweepResult> {
    if cfg.snr_db.windows(2).any(|w| !(w[1] > w[0])) || cfg.snr_db.iter().any(|x| !x.is_finite()) {
        return Err(Error::config("snr_db grid must be finite and strictly increasing"));
    }
    let exact_possible = product_size(c.cardinality(), stats.n_t, tol::ENUMERATION_CAP).is_ok();
    let exact_bank = (cfg.exact && exact_possible)
        .then(|| NoiseBank::generate(stats.n_r, cfg.exact_bank, cfg.seed));
    let mut records = Vec::new();
    for &snr in &cfg.snr_db {
        for &method in &cfg.methods {
            let started = Instant::now();
            let p = 10f64.powf(snr / 10.0);
            let point = || -> Result<SweepRecord> {
                let mut opt = cfg.optimizer.clone();
                opt.deadline = cfg.deadline;
                let (pre, iterations) = design(stats, c, p, method, &opt)?;
                let asy = report_asymptotic(stats, c, &pre, cfg.report_bank, cfg.seed ^ 0x5eed, cfg.deadline)?;
                let exact = match &exact_bank {
                    Some(bank) => {
                        let b = pre.expand(stats)?;
                        let mut rng = rng_stream(cfg.seed, CHANNEL_STREAM);
                        let opts = ExactOptions {
                            mode: cfg.exact_mode,
                            deadline: cfg.deadline,
                        };
                        Some(exact_ergodic_mi_with(stats, &b, c, cfg.n_channels, bank, &mut rng, &opts)?)
                    }
                    None => None,
                };
                Ok(SweepRecord {
                    snr_db: snr,
                    method,
                    mi_asy: Some(asy.total),
                    asy_std_error: Some(asy.std_error),
                    mi_exact: exact.map(|e| e.value),
                    exact_std_error: exact.map(|e| e.std_error),
                    iterations,
                    wall_seconds: 0.0,
                    status: PointStatus::Ok,
                })
            };
            let mut rec = point().unwrap_or_else(|e| {
                log::warn!("sweep point {snr} dB / {method} failed: {e}");
                SweepRecord {
                    snr_db: snr,
                    method,
                    mi_asy: None,
                    asy_std_error: None,
                    mi_exact: None,
                    exact_std_error: None,
                    iterations: 0,
                    wall_seconds: 0.0,
                    status: PointStatus::Failed {
                        kind: e.kind(),
                        message: e.to_string(),
                    },
                }
            });
            rec.wall_seconds = started.elapsed().as_secs_f64();
            let show = |x: Option<f64>| x.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
            log::info!(
                "{snr} dB {method}: asy {} exact {} ({:.1} s)",
                show(rec.mi_asy),
                show(rec.mi_exact),
                rec.wall_seconds
            );
            records.push(rec);
        }
    }
    Ok(SweepResult {
        snr_db: cfg.snr_db.clone(),
        records,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum BenchStatus {
    Ok,
    /// The time budget ran out before `repeats` iterations finished.
    Exceeded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub n_t: usize,
    pub n_s: usize,
    pub modulation: Modulation,
    /// Median over repeats; `None` when exceeded.
    pub seconds_per_iteration: Option<f64>,
    pub repeats: usize,
    pub search_space: u64,
    pub status: BenchStatus,
}

#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub repeats: usize,
    pub snr_db: f64,
    pub bank_size: usize,
    pub seed: u64,
    pub timeout: Duration,
    /// Run configurations whose per-stream enumeration exceeds the cap,
    /// expecting them to hit the timeout.
    pub allow_over_cap: bool,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            repeats: 3,
            snr_db: 10.0,
            bank_size: 500,
            seed: 0,
            timeout: Duration::from_secs(300),
            allow_over_cap: false,
        }
    }
}

/// Median wall-clock of one optimizer iteration (power step, mixer step,
/// fixed-point refresh, stopping test) on an exponentially correlated
/// `N_t × N_t` channel (`ρ = 0.9`). The initial fixed point is not timed.
pub fn bench_iteration(n_t: usize, n_s: usize, modulation: Modulation, opts: &BenchOptions) -> Result<BenchRecord> {
    if opts.repeats == 0 {
        return Err(Error::config("repeats must be >= 1"));
    }
    if n_s == 0 || n_t % n_s != 0 {
        return Err(Error::config(format!("S·N_s must equal N_t: N_s = {n_s}, N_t = {n_t}")));
    }
    let c = Constellation::new(modulation);
    let m = c.cardinality() as u64;
    let search_space = search_space_size(m, n_s as u64, (n_t / n_s) as u64)?;
    let over_cap = search_space_size(m, n_s as u64, 1)? > tol::ENUMERATION_CAP;
    let exceeded = || BenchRecord {
        n_t,
        n_s,
        modulation,
        seconds_per_iteration: None,
        repeats: opts.repeats,
        search_space,
        status: BenchStatus::Exceeded,
    };
    if over_cap && !opts.allow_over_cap {
        return Err(Error::Capacity(format!(
            "M^(2·N_s) = {m}^{} exceeds the enumeration cap {}",
            2 * n_s,
            tol::ENUMERATION_CAP
        )));
    }
    if over_cap && product_size(c.cardinality(), n_s, tol::ENUMERATION_CAP).is_err() {
        // the symbol table itself cannot be built
        return Ok(exceeded());
    }
    let deadline = Instant::now() + opts.timeout;
    let stats = ChannelStats::exponential(n_t, n_t, 0.9, 0.9)?;
    let bank = NoiseBank::generate(n_s, opts.bank_size, opts.seed);
    let sur = Surrogate::new(&stats, &c, n_s, &bank)?;
    let perm = pair_subchannels(&stats.lambda_t, n_s)?;
    let p = 10f64.powf(opts.snr_db / 10.0);
    let cfg = OptimizerConfig {
        max_iter: usize::MAX,
        deadline: Some(deadline),
        seed: opts.seed,
        ..OptimizerConfig::default()
    };
    let mut rng = rng_stream(opts.seed, 0);
    let init = StructuredPrecoder::random(perm, n_s, p, &mut rng)?;
    let run = || -> Result<Vec<f64>> {
        let mut opt = Optimizer::new(&sur, init, cfg)?;
        let mut times = Vec::with_capacity(opts.repeats);
        for _ in 0..opts.repeats {
            let t0 = Instant::now();
            opt.step()?;
            times.push(t0.elapsed().as_secs_f64());
        }
        Ok(times)
    };
    match run() {
        Ok(mut times) => {
            times.sort_by(f64::total_cmp);
            let mid = times.len() / 2;
            let median = if times.len() % 2 == 1 {
                times[mid]
            } else {
                0.5 * (times[mid - 1] + times[mid])
            };
            Ok(BenchRecord {
                n_t,
                n_s,
                modulation,
                seconds_per_iteration: Some(median.max(f64::MIN_POSITIVE)),
                repeats: opts.repeats,
                search_space,
                status: BenchStatus::Ok,
            })
        }
        Err(Error::Timeout { .. }) => Ok(exceeded()),
        Err(e) => Err(e),
    }
}

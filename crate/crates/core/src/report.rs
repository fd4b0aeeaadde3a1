//! CSV output for sweeps, optimizer traces and benchmarks.
//!
//! Every file starts with `#` provenance lines, then a header row. Floats
//! carry 9 significant digits; missing values are empty fields. With
//! `timing` off, wall-clock columns are written as 0 and the start time is
//! omitted, so two runs with the same seed produce identical bytes.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use csv::{Terminator, WriterBuilder};

use crate::config::{Command, SCHEMA};
use crate::error::{Error, Result};
use crate::eval::{BenchRecord, BenchStatus, PointStatus, SweepResult};
use crate::precoder::{OptimizationTrace, StepOutcome};

pub const SWEEP_HEADER: [&str; 8] = [
    "snr_db",
    "method",
    "mi_asy_bits",
    "mi_exact_bits",
    "std_error",
    "iterations",
    "wall_seconds",
    "status",
];

pub const TRACE_HEADER: [&str; 11] = [
    "restart",
    "iteration",
    "i_asy_bits",
    "std_error",
    "step_power",
    "step_mixer",
    "blend",
    "fp_residual",
    "fp_sweeps",
    "elapsed_seconds",
    "outcome",
];

pub const BENCH_HEADER: [&str; 7] = [
    "n_t",
    "n_s",
    "modulation",
    "seconds_per_iteration",
    "repeats",
    "search_space",
    "status",
];

#[derive(Debug, Clone)]
pub struct Provenance {
    pub command: Command,
    pub seed: u64,
    pub timing: bool,
    /// Seconds since the Unix epoch; written only when `timing` is on.
    pub started_unix: u64,
}

impl Provenance {
    pub fn now(command: Command, seed: u64, timing: bool) -> Self {
        let started_unix = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_secs());
        Self {
            command,
            seed,
            timing,
            started_unix,
        }
    }

    fn write<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "# {} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"))?;
        writeln!(w, "# schema = {SCHEMA}")?;
        writeln!(w, "# command = {}", self.command)?;
        writeln!(w, "# seed = {}", self.seed)?;
        if self.timing {
            writeln!(w, "# started_unix = {}", self.started_unix)?;
        }
        Ok(())
    }
}

/// `%.9g`-style formatting: 9 significant digits, trailing zeros trimmed,
/// exponent form outside `[1e-5, 1e9)`.
pub fn fmt_sig(x: f64) -> String {
    const DIGITS: i32 = 9;
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return if x.is_nan() { "nan".into() } else if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let sci = format!("{:.*e}", (DIGITS - 1) as usize, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < -5 || exp >= DIGITS {
        let m = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (DIGITS - 1 - exp).max(0) as usize;
        trim_zeros(&format!("{x:.decimals$}")).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(fmt_sig).unwrap_or_default()
}

fn csv_writer<W: Write>(w: W) -> csv::Writer<W> {
    WriterBuilder::new()
        .terminator(Terminator::Any(b'\n'))
        .from_writer(w)
}

fn csv_err(e: csv::Error) -> std::io::Error {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => e,
        other => std::io::Error::other(format!("{other:?}")),
    }
}

pub fn write_sweep<W: Write>(mut w: W, result: &SweepResult, prov: &Provenance) -> std::io::Result<()> {
    prov.write(&mut w)?;
    let mut out = csv_writer(w);
    out.write_record(SWEEP_HEADER).map_err(csv_err)?;
    for r in &result.records {
        let status = match &r.status {
            PointStatus::Ok => "ok".to_string(),
            PointStatus::Failed { message, .. } => format!("failed: {message}"),
        };
        let wall = if prov.timing { r.wall_seconds } else { 0.0 };
        out.write_record([
            fmt_sig(r.snr_db),
            r.method.to_string(),
            opt(r.mi_asy),
            opt(r.mi_exact),
            opt(r.std_error()),
            r.iterations.to_string(),
            fmt_sig(wall),
            status,
        ])
        .map_err(csv_err)?;
    }
    out.flush()
}

pub fn write_trace<W: Write>(mut w: W, trace: &OptimizationTrace, prov: &Provenance) -> std::io::Result<()> {
    prov.write(&mut w)?;
    writeln!(w, "# best_restart = {}", trace.best)?;
    let mut out = csv_writer(w);
    out.write_record(TRACE_HEADER).map_err(csv_err)?;
    for rt in &trace.restarts {
        let outcome = match rt.outcome {
            StepOutcome::Continue => "running",
            StepOutcome::Converged => "converged",
            StepOutcome::MaxIterations => "max_iterations",
        };
        for rec in &rt.records {
            let elapsed = if prov.timing { rec.elapsed_seconds } else { 0.0 };
            out.write_record([
                rt.restart.to_string(),
                rec.iteration.to_string(),
                fmt_sig(rec.i_asy),
                fmt_sig(rec.std_error),
                fmt_sig(rec.step_power),
                fmt_sig(rec.step_mixer),
                fmt_sig(rec.blend),
                fmt_sig(rec.fp_residual),
                rec.fp_sweeps.to_string(),
                fmt_sig(elapsed),
                outcome.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    out.flush()
}

/// Bench rows always carry their timings; that is the measurement.
pub fn write_bench<W: Write>(mut w: W, records: &[BenchRecord], prov: &Provenance) -> std::io::Result<()> {
    prov.write(&mut w)?;
    let mut out = csv_writer(w);
    out.write_record(BENCH_HEADER).map_err(csv_err)?;
    for r in records {
        let status = match r.status {
            BenchStatus::Ok => "ok",
            BenchStatus::Exceeded => "exceeded",
        };
        out.write_record([
            r.n_t.to_string(),
            r.n_s.to_string(),
            r.modulation.name().to_string(),
            opt(r.seconds_per_iteration),
            r.repeats.to_string(),
            r.search_space.to_string(),
            status.to_string(),
        ])
        .map_err(csv_err)?;
    }
    out.flush()
}

/// Creates `path` and hands a buffered writer to `f`, tagging I/O errors
/// with the path.
pub fn save(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    f(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{Method, SweepRecord};
    use crate::constellation::Modulation;

    fn prov(timing: bool) -> Provenance {
        Provenance {
            command: Command::Sweep,
            seed: 7,
            timing,
            started_unix: 1_700_000_000,
        }
    }

    fn text(f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> String {
        let mut buf = Vec::new();
        f(&mut buf).unwrap();
        String::from_utf8(buf).unwrap()
    }

    fn data_lines(s: &str) -> Vec<&str> {
        s.lines().filter(|l| !l.starts_with('#')).collect()
    }

    #[test]
    fn significant_digits() {
        assert_eq!(fmt_sig(0.0), "0");
        assert_eq!(fmt_sig(1.0), "1");
        assert_eq!(fmt_sig(-10.0), "-10");
        assert_eq!(fmt_sig(1.0 / 3.0), "0.333333333");
        assert_eq!(fmt_sig(7.999999999), "8");
        assert_eq!(fmt_sig(123456.789012), "123456.789");
        assert_eq!(fmt_sig(1.5e-7), "1.5e-07");
        assert_eq!(fmt_sig(2.0e12), "2e+12");
        assert_eq!(fmt_sig(0.000123456789123), "0.000123456789");
        assert_eq!(fmt_sig(f64::NAN), "nan");
    }

    #[test]
    fn empty_sweep_is_header_only() {
        let r = SweepResult {
            snr_db: vec![],
            records: vec![],
        };
        let s = text(|w| write_sweep(w, &r, &prov(false)));
        assert_eq!(data_lines(&s), vec![SWEEP_HEADER.join(",")]);
        assert!(s.contains("# seed = 7"));
        assert!(!s.contains("started_unix"));
        assert!(!s.contains('\r'));
    }

    #[test]
    fn one_record_two_lines_and_timing_toggle() {
        let r = SweepResult {
            snr_db: vec![5.0],
            records: vec![SweepRecord {
                snr_db: 5.0,
                method: Method::Optimized { n_s: 2 },
                mi_asy: Some(4.25),
                asy_std_error: Some(0.01),
                mi_exact: None,
                exact_std_error: None,
                iterations: 12,
                wall_seconds: 1.5,
                status: PointStatus::Ok,
            }],
        };
        let s = text(|w| write_sweep(w, &r, &prov(false)));
        let lines = data_lines(&s);
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[1], "5,optimized_ns2,4.25,,0.01,12,0,ok");
        let timed = text(|w| write_sweep(w, &r, &prov(true)));
        assert!(timed.contains("# started_unix = 1700000000"));
        assert!(data_lines(&timed)[1].contains(",1.5,"));
    }

    #[test]
    fn failure_messages_are_quoted() {
        let r = SweepResult {
            snr_db: vec![0.0],
            records: vec![SweepRecord {
                snr_db: 0.0,
                method: Method::Unprecoded,
                mi_asy: None,
                asy_std_error: None,
                mi_exact: None,
                exact_std_error: None,
                iterations: 0,
                wall_seconds: 0.0,
                status: PointStatus::Failed {
                    kind: crate::ErrorKind::Other,
                    message: "bad, really".into(),
                },
            }],
        };
        let s = text(|w| write_sweep(w, &r, &prov(false)));
        assert!(s.ends_with("\"failed: bad, really\"\n"), "{s}");
    }

    #[test]
    fn bench_rows() {
        let recs = vec![
            BenchRecord {
                n_t: 4,
                n_s: 2,
                modulation: Modulation::Qpsk,
                seconds_per_iteration: Some(0.125),
                repeats: 3,
                search_space: 512,
                status: BenchStatus::Ok,
            },
            BenchRecord {
                n_t: 4,
                n_s: 4,
                modulation: Modulation::Qam16,
                seconds_per_iteration: None,
                repeats: 3,
                search_space: 4294967296,
                status: BenchStatus::Exceeded,
            },
        ];
        let s = text(|w| write_bench(w, &recs, &prov(false)));
        let lines = data_lines(&s);
        assert_eq!(lines[1], "4,2,qpsk,0.125,3,512,ok");
        assert_eq!(lines[2], "4,4,qam16,,3,4294967296,exceeded");
    }

    #[test]
    fn save_reports_path() {
        let err = save(Path::new("/nonexistent-dir/x.csv"), |_| Ok(())).unwrap_err();
        assert!(err.to_string().contains("/nonexistent-dir/x.csv"));
    }
}

//! Run configuration: a versioned TOML document (`schema = 1`).
//!
//! Parsing is strict. Unknown keys are errors, and every problem found is
//! reported in one [`Error::Config`] whose lines each name the offending key.
//!
//! ```toml
//! schema = 1
//! command = "sweep"          # sweep | optimize | validate | bench
//! seed = 7
//! output = "sweep.csv"
//! timing = true              # false: zero wall-clock columns for byte-stable output
//!
//! [system]
//! n_t = 4
//! n_r = 4
//! modulation = "qpsk"
//! n_s = 2                    # s defaults to n_t / n_s
//! snr_db = [-10, -5, 0, 5, 10, 15]
//!
//! [channel]
//! model = "exponential"      # or "files" with transmit = "...", receive = "..."
//! rho_t = 0.9
//! rho_r = 0.9
//!
//! [optimizer]
//! max_iter = 200
//! epsilon = 1e-4
//! restarts = 3
//!
//! [evaluation]
//! methods = ["optimized_ns2", "unprecoded", "gaussian_wf"]
//! n_channels = 200
//!
//! [bench]
//! repeats = 3
//! [[bench.case]]
//! n_t = 4
//! n_s = 2
//! modulation = "qpsk"
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, Instant};

use toml::{Table, Value};

use crate::asymptotic::FixedPointMethod;
use crate::channel::{load_correlation, make_stats, ChannelStats};
use crate::constellation::{search_space_size, Constellation, Modulation};
use crate::error::{Error, Result};
use crate::eval::{BenchOptions, ExactMode, Method, SweepConfig};
use crate::precoder::OptimizerConfig;
use crate::tol;

pub const SCHEMA: i64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Sweep,
    Optimize,
    Validate,
    Bench,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Sweep => "sweep",
            Command::Optimize => "optimize",
            Command::Validate => "validate",
            Command::Bench => "bench",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sweep" => Ok(Command::Sweep),
            "optimize" => Ok(Command::Optimize),
            "validate" => Ok(Command::Validate),
            "bench" => Ok(Command::Bench),
            _ => Err(Error::config(format!(
                "unknown command '{s}' (expected sweep, optimize, validate or bench)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ChannelSpec {
    Exponential { rho_t: f64, rho_r: f64 },
    /// Correlation matrices in the matrix-file format, relative to the
    /// config's directory.
    Files { transmit: PathBuf, receive: PathBuf },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SystemSettings {
    pub n_t: usize,
    pub n_r: usize,
    pub modulation: Modulation,
    pub s: usize,
    pub n_s: usize,
    /// Total transmit SNR `P` in dB (unit noise variance).
    pub snr_db: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerSettings {
    pub max_iter: usize,
    pub epsilon: f64,
    pub restarts: usize,
    pub bank_size: usize,
    pub armijo_c1: f64,
    pub armijo_shrink: f64,
    pub max_backtracks: usize,
    pub initial_step: f64,
    pub fixed_point_tol: f64,
    pub fixed_point_max_iter: usize,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        let d = OptimizerConfig::default();
        Self {
            max_iter: d.max_iter,
            epsilon: d.epsilon,
            restarts: d.restarts,
            bank_size: d.bank_size,
            armijo_c1: d.armijo_c1,
            armijo_shrink: d.armijo_shrink,
            max_backtracks: d.max_backtracks,
            initial_step: d.initial_step,
            fixed_point_tol: d.fixed_point_tol,
            fixed_point_max_iter: d.fixed_point_max_iter,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationSettings {
    pub methods: Vec<Method>,
    pub n_channels: usize,
    pub exact_bank: usize,
    pub report_bank: usize,
    pub exact: bool,
    pub exact_mode: ExactMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchCase {
    pub n_t: usize,
    pub n_s: usize,
    pub modulation: Modulation,
    /// The case is over the enumeration cap and is expected to time out.
    pub expect_timeout: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchSettings {
    pub repeats: usize,
    pub snr_db: f64,
    pub bank_size: usize,
    pub timeout_secs: f64,
    pub cases: Vec<BenchCase>,
}

impl Default for BenchSettings {
    fn default() -> Self {
        let d = BenchOptions::default();
        Self {
            repeats: d.repeats,
            snr_db: d.snr_db,
            bank_size: d.bank_size,
            timeout_secs: d.timeout.as_secs_f64(),
            cases: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    pub seed: u64,
    pub output: Option<PathBuf>,
    pub timing: bool,
    /// Absent only for `bench`.
    pub system: Option<SystemSettings>,
    pub channel: Option<ChannelSpec>,
    pub optimizer: OptimizerSettings,
    pub evaluation: EvaluationSettings,
    pub bench: BenchSettings,
    /// Directory that relative channel-file paths are resolved against.
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    fn system(&self) -> Result<&SystemSettings> {
        self.system
            .as_ref()
            .ok_or_else(|| Error::config("system: section required for this command"))
    }

    pub fn stats(&self) -> Result<ChannelStats> {
        let sys = self.system()?;
        match self
            .channel
            .as_ref()
            .ok_or_else(|| Error::config("channel: section required for this command"))?
        {
            ChannelSpec::Exponential { rho_t, rho_r } => {
                ChannelStats::exponential(sys.n_t, sys.n_r, *rho_t, *rho_r)
            }
            ChannelSpec::Files { transmit, receive } => {
                let a_t = load_correlation(&self.resolve(transmit))?;
                let a_r = load_correlation(&self.resolve(receive))?;
                if a_t.rows() != sys.n_t || a_r.rows() != sys.n_r {
                    return Err(Error::config(format!(
                        "channel: correlation files are {}×{} and {}×{}, system is n_t = {}, n_r = {}",
                        a_t.rows(),
                        a_t.cols(),
                        a_r.rows(),
                        a_r.cols(),
                        sys.n_t,
                        sys.n_r
                    )));
                }
                make_stats(&a_t, &a_r)
            }
        }
    }

    pub fn constellation(&self) -> Result<Constellation> {
        Ok(Constellation::new(self.system()?.modulation))
    }

    pub fn optimizer_config(&self, deadline: Option<Instant>) -> OptimizerConfig {
        let o = &self.optimizer;
        OptimizerConfig {
            max_iter: o.max_iter,
            epsilon: o.epsilon,
            restarts: o.restarts,
            armijo_c1: o.armijo_c1,
            armijo_shrink: o.armijo_shrink,
            max_backtracks: o.max_backtracks,
            initial_step: o.initial_step,
            seed: self.seed,
            bank_size: o.bank_size,
            fixed_point_method: FixedPointMethod::Secant,
            fixed_point_tol: o.fixed_point_tol,
            fixed_point_max_iter: o.fixed_point_max_iter,
            deadline,
        }
    }

    pub fn sweep_config(&self, deadline: Option<Instant>) -> Result<SweepConfig> {
        let e = &self.evaluation;
        Ok(SweepConfig {
            snr_db: self.system()?.snr_db.clone(),
            methods: e.methods.clone(),
            optimizer: self.optimizer_config(deadline),
            n_channels: e.n_channels,
            exact_bank: e.exact_bank,
            report_bank: e.report_bank,
            exact: e.exact,
            exact_mode: e.exact_mode,
            seed: self.seed,
            deadline,
        })
    }

    pub fn bench_options(&self) -> BenchOptions {
        let b = &self.bench;
        BenchOptions {
            repeats: b.repeats,
            snr_db: b.snr_db,
            bank_size: b.bank_size,
            seed: self.seed,
            timeout: Duration::from_secs_f64(b.timeout_secs),
            allow_over_cap: false,
        }
    }
}

const TOP_KEYS: &[&str] = &[
    "schema",
    "command",
    "seed",
    "output",
    "timing",
    "system",
    "channel",
    "optimizer",
    "evaluation",
    "bench",
];
const SYSTEM_KEYS: &[&str] = &["n_t", "n_r", "modulation", "s", "n_s", "snr_db"];
const CHANNEL_KEYS: &[&str] = &["model", "rho_t", "rho_r", "transmit", "receive"];
const OPTIMIZER_KEYS: &[&str] = &[
    "max_iter",
    "epsilon",
    "restarts",
    "bank_size",
    "armijo_c1",
    "armijo_shrink",
    "max_backtracks",
    "initial_step",
    "fixed_point_tol",
    "fixed_point_max_iter",
];
const EVALUATION_KEYS: &[&str] = &[
    "methods",
    "n_channels",
    "exact_bank",
    "report_bank",
    "exact",
    "exact_mode",
];
const BENCH_KEYS: &[&str] = &["repeats", "snr_db", "bank_size", "timeout_secs", "case"];
const CASE_KEYS: &[&str] = &["n_t", "n_s", "modulation", "expect_timeout"];

/// Typed access to one table, recording every problem under its dotted path.
struct Reader<'t, 'e> {
    table: &'t Table,
    prefix: String,
    errors: &'e mut Vec<String>,
}

impl<'t, 'e> Reader<'t, 'e> {
    fn new(table: &'t Table, prefix: &str, known: &[&str], errors: &'e mut Vec<String>) -> Self {
        let r = Reader {
            table,
            prefix: prefix.to_string(),
            errors,
        };
        for key in table.keys() {
            if !known.contains(&key.as_str()) {
                let at = r.at(key);
                r.errors.push(format!("{at}: unknown key"));
            }
        }
        r
    }

    fn at(&self, key: &str) -> String {
        if self.prefix.is_empty() {
            key.to_string()
        } else {
            format!("{}.{key}", self.prefix)
        }
    }

    fn fail(&mut self, key: &str, msg: impl fmt::Display) {
        let at = self.at(key);
        self.errors.push(format!("{at}: {msg}"));
    }

    fn missing(&mut self, key: &str) {
        self.fail(key, "missing");
    }

    fn int(&mut self, key: &str) -> Option<i64> {
        match self.table.get(key)? {
            Value::Integer(i) => Some(*i),
            other => {
                self.fail(key, format!("expected an integer, found {}", other.type_str()));
                None
            }
        }
    }

    fn count(&mut self, key: &str, min: usize) -> Option<usize> {
        let i = self.int(key)?;
        match usize::try_from(i) {
            Ok(n) if n >= min => Some(n),
            _ => {
                self.fail(key, format!("must be an integer >= {min}, got {i}"));
                None
            }
        }
    }

    fn float(&mut self, key: &str) -> Option<f64> {
        match self.table.get(key)? {
            Value::Integer(i) => Some(*i as f64),
            Value::Float(x) if x.is_finite() => Some(*x),
            Value::Float(x) => {
                self.fail(key, format!("must be finite, got {x}"));
                None
            }
            other => {
                self.fail(key, format!("expected a number, found {}", other.type_str()));
                None
            }
        }
    }

    fn boolean(&mut self, key: &str) -> Option<bool> {
        match self.table.get(key)? {
            Value::Boolean(b) => Some(*b),
            other => {
                self.fail(key, format!("expected a boolean, found {}", other.type_str()));
                None
            }
        }
    }

    fn string(&mut self, key: &str) -> Option<&'t str> {
        match self.table.get(key)? {
            Value::String(s) => Some(s.as_str()),
            other => {
                self.fail(key, format!("expected a string, found {}", other.type_str()));
                None
            }
        }
    }

    fn parsed<T: FromStr<Err = Error>>(&mut self, key: &str) -> Option<T> {
        let s = self.string(key)?;
        match s.parse() {
            Ok(v) => Some(v),
            Err(Error::Config(msg)) => {
                self.fail(key, msg);
                None
            }
            Err(e) => {
                self.fail(key, e);
                None
            }
        }
    }

    fn array(&mut self, key: &str) -> Option<&'t [Value]> {
        match self.table.get(key)? {
            Value::Array(a) => Some(a.as_slice()),
            other => {
                self.fail(key, format!("expected an array, found {}", other.type_str()));
                None
            }
        }
    }

    fn floats(&mut self, key: &str) -> Option<Vec<f64>> {
        let arr = self.array(key)?;
        let mut out = Vec::with_capacity(arr.len());
        for (i, v) in arr.iter().enumerate() {
            match v {
                Value::Integer(x) => out.push(*x as f64),
                Value::Float(x) if x.is_finite() => out.push(*x),
                _ => {
                    self.fail(key, format!("entry {i} is not a finite number"));
                    return None;
                }
            }
        }
        Some(out)
    }

    fn strings(&mut self, key: &str) -> Option<Vec<&'t str>> {
        let arr = self.array(key)?;
        let mut out = Vec::with_capacity(arr.len());
        for (i, v) in arr.iter().enumerate() {
            match v {
                Value::String(s) => out.push(s.as_str()),
                _ => {
                    self.fail(key, format!("entry {i} is not a string"));
                    return None;
                }
            }
        }
        Some(out)
    }

    fn table(&mut self, key: &str) -> Option<&'t Table> {
        match self.table.get(key)? {
            Value::Table(t) => Some(t),
            other => {
                self.fail(key, format!("expected a table, found {}", other.type_str()));
                None
            }
        }
    }
}

/// Rejects stream widths the optimizer cannot handle for this system.
fn stream_problems(n_t: usize, n_s: usize, m: usize) -> Vec<String> {
    let mut out = Vec::new();
    if n_s == 0 {
        return vec!["N_s must be >= 1".into()];
    }
    if n_t % n_s != 0 {
        out.push(format!(
            "S·N_s must equal N_t: N_s = {n_s} does not divide N_t = {n_t}"
        ));
    }
    if n_s > 1 && n_s % 2 == 1 {
        out.push(format!("N_s = {n_s} must be 1 or even for subchannel pairing"));
    }
    if let Some(msg) = cap_problem(m, n_s) {
        out.push(msg);
    }
    out
}

fn cap_problem(m: usize, n_s: usize) -> Option<String> {
    let over = match search_space_size(m as u64, n_s as u64, 1) {
        Ok(size) => size > tol::ENUMERATION_CAP,
        Err(_) => true,
    };
    over.then(|| {
        let size = (m as f64).powi(2 * n_s as i32);
        format!(
            "enumeration cap exceeded: M^(2·N_s) = {m}^{} = {size:.4e} > {}",
            2 * n_s,
            tol::ENUMERATION_CAP
        )
    })
}

fn toml_error(text: &str, e: toml::de::Error) -> Error {
    let line = e
        .span()
        .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
        .unwrap_or(0);
    Error::Parse {
        line,
        msg: e.message().to_string(),
    }
}

/// Parses a config whose relative file paths resolve against the working
/// directory.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    parse_config_in(text, Path::new("."))
}

/// Reads and parses a config file; relative channel-file paths resolve
/// against the file's directory.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    parse_config_in(&text, base)
}

pub fn parse_config_in(text: &str, base_dir: &Path) -> Result<RunConfig> {
    let doc: Table = text.parse().map_err(|e| toml_error(text, e))?;
    let mut errors = Vec::new();
    let cfg = build(&doc, base_dir, &mut errors);
    match cfg {
        Some(cfg) if errors.is_empty() => Ok(cfg),
        _ => Err(Error::config(errors.join("\n"))),
    }
}

fn build(doc: &Table, base_dir: &Path, errors: &mut Vec<String>) -> Option<RunConfig> {
    let mut top = Reader::new(doc, "", TOP_KEYS, errors);
    match top.int("schema") {
        Some(SCHEMA) => {}
        Some(v) => top.fail("schema", format!("unsupported version {v} (expected {SCHEMA})")),
        None if !doc.contains_key("schema") => top.fail("schema", format!("missing (expected {SCHEMA})")),
        None => {}
    }
    let command = top.parsed::<Command>("command");
    if command.is_none() && !doc.contains_key("command") {
        top.missing("command");
    }
    let seed = match top.int("seed") {
        Some(s) if s >= 0 => s as u64,
        Some(s) => {
            top.fail("seed", format!("must be >= 0, got {s}"));
            0
        }
        None => 0,
    };
    let output = top.string("output").map(PathBuf::from);
    let timing = top.boolean("timing").unwrap_or(true);
    let system_t = top.table("system");
    let channel_t = top.table("channel");
    let optimizer_t = top.table("optimizer");
    let evaluation_t = top.table("evaluation");
    let bench_t = top.table("bench");

    let system = system_t.and_then(|t| read_system(t, command, errors));
    let channel = channel_t.and_then(|t| read_channel(t, base_dir, errors));
    let optimizer = read_optimizer(optimizer_t, errors);
    let evaluation = read_evaluation(evaluation_t, command, system.as_ref(), errors);
    let bench = read_bench(bench_t, command, errors);

    let command = command?;
    if command != Command::Bench {
        if system_t.is_none() {
            errors.push(format!("system: section required for '{command}'"));
        }
        if channel_t.is_none() {
            errors.push(format!("channel: section required for '{command}'"));
        }
    }
    Some(RunConfig {
        command,
        seed,
        output,
        timing,
        system: system.map(|(s, _)| s),
        channel,
        optimizer,
        evaluation: evaluation?,
        bench: bench?,
        base_dir: base_dir.to_path_buf(),
    })
}

/// The system settings plus whether every key parsed cleanly.
fn read_system(t: &Table, command: Option<Command>, errors: &mut Vec<String>) -> Option<(SystemSettings, bool)> {
    let before = errors.len();
    let mut r = Reader::new(t, "system", SYSTEM_KEYS, errors);
    let n_t = r.count("n_t", 1);
    let n_r = r.count("n_r", 1);
    let modulation = r.parsed::<Modulation>("modulation");
    for key in ["n_t", "n_r", "modulation"] {
        if !t.contains_key(key) {
            r.missing(key);
        }
    }
    let n_s = r.count("n_s", 1).unwrap_or(2);
    let s = r.count("s", 1);
    let snr_db = r.floats("snr_db").unwrap_or_default();
    if snr_db.windows(2).any(|w| w[1] <= w[0]) {
        r.fail("snr_db", "must be strictly increasing");
    }
    match command {
        Some(Command::Sweep | Command::Validate) if snr_db.is_empty() => {
            r.fail("snr_db", "must list at least one SNR point");
        }
        Some(Command::Optimize) if snr_db.len() != 1 => {
            r.fail("snr_db", format!("optimize takes exactly one SNR point, got {}", snr_db.len()));
        }
        _ => {}
    }
    let (n_t, n_r, modulation) = (n_t?, n_r?, modulation?);
    if let Some(s) = s.filter(|&s| s * n_s != n_t) {
        r.fail("s", format!("S·N_s must equal N_t: S = {s}, N_s = {n_s}, N_t = {n_t}"));
    }
    let s = s.unwrap_or(n_t / n_s);
    for p in stream_problems(n_t, n_s, modulation.cardinality()) {
        r.fail("n_s", p);
    }
    let clean = r.errors.len() == before;
    Some((
        SystemSettings {
            n_t,
            n_r,
            modulation,
            s,
            n_s,
            snr_db,
        },
        clean,
    ))
}

fn read_channel(t: &Table, base_dir: &Path, errors: &mut Vec<String>) -> Option<ChannelSpec> {
    let mut r = Reader::new(t, "channel", CHANNEL_KEYS, errors);
    let model = r.string("model");
    match model {
        Some("exponential") => {
            for key in ["transmit", "receive"] {
                if t.contains_key(key) {
                    r.fail(key, "only valid with model = \"files\"");
                }
            }
            let mut rho = |key: &str| {
                let v = r.float(key).unwrap_or(0.0);
                if !(0.0..1.0).contains(&v) {
                    r.fail(key, format!("must lie in [0, 1), got {v}"));
                }
                v
            };
            let rho_t = rho("rho_t");
            let rho_r = rho("rho_r");
            Some(ChannelSpec::Exponential { rho_t, rho_r })
        }
        Some("files") => {
            for key in ["rho_t", "rho_r"] {
                if t.contains_key(key) {
                    r.fail(key, "only valid with model = \"exponential\"");
                }
            }
            let mut path = |key: &str| {
                let p = match r.string(key) {
                    Some(p) => PathBuf::from(p),
                    None => {
                        if !t.contains_key(key) {
                            r.missing(key);
                        }
                        return None;
                    }
                };
                let full = if p.is_absolute() { p.clone() } else { base_dir.join(&p) };
                if !full.is_file() {
                    r.fail(key, format!("file not found: {}", full.display()));
                }
                Some(p)
            };
            let transmit = path("transmit");
            let receive = path("receive");
            Some(ChannelSpec::Files {
                transmit: transmit?,
                receive: receive?,
            })
        }
        Some(other) => {
            r.fail("model", format!("unknown model '{other}' (expected exponential or files)"));
            None
        }
        None => {
            if !t.contains_key("model") {
                r.missing("model");
            }
            None
        }
    }
}

fn read_optimizer(t: Option<&Table>, errors: &mut Vec<String>) -> OptimizerSettings {
    let mut o = OptimizerSettings::default();
    let Some(t) = t else { return o };
    let mut r = Reader::new(t, "optimizer", OPTIMIZER_KEYS, errors);
    if let Some(v) = r.count("max_iter", 1) {
        o.max_iter = v;
    }
    if let Some(v) = r.float("epsilon") {
        o.epsilon = v;
    }
    if let Some(v) = r.count("restarts", 1) {
        o.restarts = v;
    }
    if let Some(v) = r.count("bank_size", 1) {
        o.bank_size = v;
    }
    if let Some(v) = r.float("armijo_c1") {
        o.armijo_c1 = v;
    }
    if let Some(v) = r.float("armijo_shrink") {
        o.armijo_shrink = v;
    }
    if let Some(v) = r.count("max_backtracks", 0) {
        o.max_backtracks = v;
    }
    if let Some(v) = r.float("initial_step") {
        o.initial_step = v;
    }
    if let Some(v) = r.float("fixed_point_tol") {
        o.fixed_point_tol = v;
    }
    if let Some(v) = r.count("fixed_point_max_iter", 1) {
        o.fixed_point_max_iter = v;
    }
    let probe = OptimizerConfig {
        max_iter: o.max_iter,
        epsilon: o.epsilon,
        restarts: o.restarts,
        armijo_c1: o.armijo_c1,
        armijo_shrink: o.armijo_shrink,
        max_backtracks: o.max_backtracks,
        initial_step: o.initial_step,
        bank_size: o.bank_size,
        fixed_point_tol: o.fixed_point_tol,
        fixed_point_max_iter: o.fixed_point_max_iter,
        ..OptimizerConfig::default()
    };
    if let Err(Error::Config(msg)) = probe.validate() {
        for m in msg.split("; ") {
            r.errors.push(format!("optimizer: {m}"));
        }
    }
    o
}

fn default_methods(command: Option<Command>, n_s: usize) -> Vec<Method> {
    match command {
        Some(Command::Validate) => vec![Method::Uniform, Method::Optimized { n_s }],
        _ => vec![
            Method::Optimized { n_s },
            Method::Unprecoded,
            Method::GaussianWaterfill,
        ],
    }
}

fn read_evaluation(
    t: Option<&Table>,
    command: Option<Command>,
    system: Option<&(SystemSettings, bool)>,
    errors: &mut Vec<String>,
) -> Option<EvaluationSettings> {
    let d = SweepConfig::default();
    let n_s = system.map_or(2, |(s, _)| s.n_s);
    let mut e = EvaluationSettings {
        methods: default_methods(command, n_s),
        n_channels: d.n_channels,
        exact_bank: d.exact_bank,
        report_bank: d.report_bank,
        exact: d.exact,
        exact_mode: d.exact_mode,
    };
    if let Some(t) = t {
        let mut r = Reader::new(t, "evaluation", EVALUATION_KEYS, errors);
        if let Some(names) = r.strings("methods") {
            let mut methods = Vec::with_capacity(names.len());
            for name in names {
                match name.parse::<Method>() {
                    Ok(m) if methods.contains(&m) => r.fail("methods", format!("'{name}' listed twice")),
                    Ok(m) => methods.push(m),
                    Err(err) => r.fail("methods", err),
                }
            }
            e.methods = methods;
        }
        if let Some(v) = r.count("n_channels", 1) {
            e.n_channels = v;
        }
        if let Some(v) = r.count("exact_bank", 1) {
            e.exact_bank = v;
        }
        if let Some(v) = r.count("report_bank", 1) {
            e.report_bank = v;
        }
        if let Some(v) = r.boolean("exact") {
            e.exact = v;
        }
        match r.string("exact_mode") {
            Some("full") => e.exact_mode = ExactMode::Full,
            Some("stratified") => e.exact_mode = ExactMode::Stratified,
            Some(other) => r.fail("exact_mode", format!("unknown mode '{other}' (expected full or stratified)")),
            None => {}
        }
    }
    if let Some((sys, true)) = system {
        for m in &e.methods {
            if let Method::Optimized { n_s } = *m {
                for p in stream_problems(sys.n_t, n_s, sys.modulation.cardinality()) {
                    errors.push(format!("evaluation.methods: {m}: {p}"));
                }
            }
        }
    }
    Some(e)
}

fn read_bench(t: Option<&Table>, command: Option<Command>, errors: &mut Vec<String>) -> Option<BenchSettings> {
    let mut b = BenchSettings::default();
    if let Some(t) = t {
        let mut r = Reader::new(t, "bench", BENCH_KEYS, errors);
        if let Some(v) = r.count("repeats", 1) {
            b.repeats = v;
        }
        if let Some(v) = r.float("snr_db") {
            b.snr_db = v;
        }
        if let Some(v) = r.count("bank_size", 1) {
            b.bank_size = v;
        }
        if let Some(v) = r.float("timeout_secs") {
            if v > 0.0 {
                b.timeout_secs = v;
            } else {
                r.fail("timeout_secs", format!("must be > 0, got {v}"));
            }
        }
        if let Some(cases) = r.array("case") {
            for (i, v) in cases.iter().enumerate() {
                let prefix = format!("bench.case[{i}]");
                let Value::Table(ct) = v else {
                    r.errors.push(format!("{prefix}: expected a table"));
                    continue;
                };
                if let Some(c) = read_case(ct, &prefix, r.errors) {
                    b.cases.push(c);
                }
            }
        }
    }
    if command == Some(Command::Bench) && b.cases.is_empty() && !errors.iter().any(|e| e.starts_with("bench.case")) {
        errors.push("bench.case: at least one case is required".into());
    }
    Some(b)
}

fn read_case(t: &Table, prefix: &str, errors: &mut Vec<String>) -> Option<BenchCase> {
    let mut r = Reader::new(t, prefix, CASE_KEYS, errors);
    let n_t = r.count("n_t", 1);
    let n_s = r.count("n_s", 1);
    let modulation = r.parsed::<Modulation>("modulation");
    for key in ["n_t", "n_s", "modulation"] {
        if !t.contains_key(key) {
            r.missing(key);
        }
    }
    let expect_timeout = r.boolean("expect_timeout").unwrap_or(false);
    let (n_t, n_s, modulation) = (n_t?, n_s?, modulation?);
    for p in stream_problems(n_t, n_s, modulation.cardinality()) {
        if expect_timeout && p.starts_with("enumeration cap") {
            continue;
        }
        r.fail("n_s", p);
    }
    Some(BenchCase {
        n_t,
        n_s,
        modulation,
        expect_timeout,
    })
}

fn int(v: usize) -> Value {
    Value::Integer(v as i64)
}

/// Canonical TOML for `cfg`; parsing it back yields `cfg` again.
pub fn emit_config(cfg: &RunConfig) -> String {
    let mut doc = Table::new();
    doc.insert("schema".into(), Value::Integer(SCHEMA));
    doc.insert("command".into(), Value::String(cfg.command.name().into()));
    doc.insert("seed".into(), Value::Integer(cfg.seed as i64));
    if let Some(out) = &cfg.output {
        doc.insert("output".into(), Value::String(out.display().to_string()));
    }
    doc.insert("timing".into(), Value::Boolean(cfg.timing));

    if let Some(s) = &cfg.system {
        let mut t = Table::new();
        t.insert("n_t".into(), int(s.n_t));
        t.insert("n_r".into(), int(s.n_r));
        t.insert("modulation".into(), Value::String(s.modulation.name().into()));
        t.insert("s".into(), int(s.s));
        t.insert("n_s".into(), int(s.n_s));
        t.insert(
            "snr_db".into(),
            Value::Array(s.snr_db.iter().map(|&x| Value::Float(x)).collect()),
        );
        doc.insert("system".into(), Value::Table(t));
    }

    if let Some(c) = &cfg.channel {
        let mut t = Table::new();
        match c {
            ChannelSpec::Exponential { rho_t, rho_r } => {
                t.insert("model".into(), Value::String("exponential".into()));
                t.insert("rho_t".into(), Value::Float(*rho_t));
                t.insert("rho_r".into(), Value::Float(*rho_r));
            }
            ChannelSpec::Files { transmit, receive } => {
                t.insert("model".into(), Value::String("files".into()));
                t.insert("transmit".into(), Value::String(transmit.display().to_string()));
                t.insert("receive".into(), Value::String(receive.display().to_string()));
            }
        }
        doc.insert("channel".into(), Value::Table(t));
    }

    let o = &cfg.optimizer;
    let mut t = Table::new();
    t.insert("max_iter".into(), int(o.max_iter));
    t.insert("epsilon".into(), Value::Float(o.epsilon));
    t.insert("restarts".into(), int(o.restarts));
    t.insert("bank_size".into(), int(o.bank_size));
    t.insert("armijo_c1".into(), Value::Float(o.armijo_c1));
    t.insert("armijo_shrink".into(), Value::Float(o.armijo_shrink));
    t.insert("max_backtracks".into(), int(o.max_backtracks));
    t.insert("initial_step".into(), Value::Float(o.initial_step));
    t.insert("fixed_point_tol".into(), Value::Float(o.fixed_point_tol));
    t.insert("fixed_point_max_iter".into(), int(o.fixed_point_max_iter));
    doc.insert("optimizer".into(), Value::Table(t));

    let e = &cfg.evaluation;
    let mut t = Table::new();
    t.insert(
        "methods".into(),
        Value::Array(e.methods.iter().map(|m| Value::String(m.to_string())).collect()),
    );
    t.insert("n_channels".into(), int(e.n_channels));
    t.insert("exact_bank".into(), int(e.exact_bank));
    t.insert("report_bank".into(), int(e.report_bank));
    t.insert("exact".into(), Value::Boolean(e.exact));
    let mode = match e.exact_mode {
        ExactMode::Full => "full",
        ExactMode::Stratified => "stratified",
    };
    t.insert("exact_mode".into(), Value::String(mode.into()));
    doc.insert("evaluation".into(), Value::Table(t));

    let b = &cfg.bench;
    let mut t = Table::new();
    t.insert("repeats".into(), int(b.repeats));
    t.insert("snr_db".into(), Value::Float(b.snr_db));
    t.insert("bank_size".into(), int(b.bank_size));
    t.insert("timeout_secs".into(), Value::Float(b.timeout_secs));
    if !b.cases.is_empty() {
        let cases = b
            .cases
            .iter()
            .map(|c| {
                let mut ct = Table::new();
                ct.insert("n_t".into(), int(c.n_t));
                ct.insert("n_s".into(), int(c.n_s));
                ct.insert("modulation".into(), Value::String(c.modulation.name().into()));
                ct.insert("expect_timeout".into(), Value::Boolean(c.expect_timeout));
                Value::Table(ct)
            })
            .collect();
        t.insert("case".into(), Value::Array(cases));
    }
    doc.insert("bench".into(), Value::Table(t));

    doc.to_string()
}

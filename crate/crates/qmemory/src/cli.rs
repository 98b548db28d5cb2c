//! Command-line front end over the library: model ingestion from JSON run
//! configurations, evaluation and sweep commands, CSV/JSON emission for
//! downstream plotting.
//!
//! Exit codes are 0 on success, 2 on configuration or validation errors and
//! 3 on numerical failures. Emitted files are UTF-8 with LF line endings and
//! every floating-point number is printed with 17 significant digits, so a
//! fixed configuration produces byte-identical outputs across runs.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use serde_json::{Map, Value};

use crate::decoherence::{self, DeltaCurve, GammaCurve, ScalarCurve, TauOutcome};
use crate::discounted::{self, DiscountedError};
use crate::functionals;
use crate::matops::{self, ComplexMatrix, RealMatrix};
use crate::models::{self, FiniteLevelModel, Lindbladian, OqhoModel};
use crate::optimize::{self, ObjectiveKind, OptimizeError, OptimizerSettings, ParamMap};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Crossing searches stop here when the config does not say otherwise.
const DEFAULT_T_CAP: f64 = 50.0;
/// Simpson nodes for the level integral of the bound check.
const DEFAULT_N_EPS: usize = 256;

/// Failures split by exit code: configuration and validation problems exit
/// with 2, numerical ones with 3.
#[derive(Debug)]
enum CliError {
    Config(String),
    Numeric(String),
}

type CliResult<T> = Result<T, CliError>;

fn config_err<T: std::fmt::Display>(msg: T) -> CliError {
    CliError::Config(msg.to_string())
}

fn numeric_err<T: std::fmt::Display>(msg: T) -> CliError {
    CliError::Numeric(msg.to_string())
}

fn optimize_err(e: OptimizeError) -> CliError {
    match &e {
        OptimizeError::ParamShape { .. } | OptimizeError::Model(_) => config_err(e),
        _ => numeric_err(e),
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "qmemory",
    version,
    about = "Quantum memory performance criteria: deviation functionals, \
             decoherence times, discounted averages and coupling optimization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct CommonArgs {
    /// JSON run configuration.
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Directory the result files are written into (created if missing).
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Worker threads for sweeps; outputs keep the input order regardless.
    #[arg(long, value_name = "K", default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Deviation functional on a time grid: CSV trace plus a JSON sidecar.
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
        /// Time grid as start:stop:points, overriding the config grid.
        #[arg(long, value_name = "GRID")]
        grid: Option<String>,
    },
    /// Decoherence times for a list of fidelity levels.
    Decoherence {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated fidelity levels, overriding the config list.
        #[arg(long, value_name = "LIST")]
        eps: Option<String>,
    },
    /// Discounted deviation averages for a list of soft horizons.
    Discounted {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated horizons, overriding the config list.
        #[arg(long, value_name = "LIST")]
        horizon: Option<String>,
        /// Cross-check every closed-form value against direct quadrature.
        #[arg(long)]
        with_oracle: bool,
    },
    /// Optimize energy/coupling parameters per the configured objective.
    Optimize {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Check the discounted deviation against its level-integral bound.
    CheckBound {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated horizons, overriding the config list.
        #[arg(long, value_name = "LIST")]
        horizon: Option<String>,
    },
}

/// Parses the process arguments, runs the selected command and returns the
/// process exit code. Never panics on malformed input.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version arrive here with non-error kinds.
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(CliError::Config(msg)) => {
            eprintln!("configuration error: {msg}");
            EXIT_CONFIG
        }
        Err(CliError::Numeric(msg)) => {
            eprintln!("numerical failure: {msg}");
            EXIT_NUMERIC
        }
    }
}

fn execute(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Evaluate { common, grid } => {
            let (cfg, out) = prepare(&common)?;
            cmd_evaluate(&cfg, grid.as_deref(), common.jobs, &out)
        }
        Command::Decoherence { common, eps } => {
            let (cfg, out) = prepare(&common)?;
            cmd_decoherence(&cfg, eps.as_deref(), common.jobs, &out)
        }
        Command::Discounted { common, horizon, with_oracle } => {
            let (cfg, out) = prepare(&common)?;
            cmd_discounted(&cfg, horizon.as_deref(), with_oracle, common.jobs, &out)
        }
        Command::Optimize { common } => {
            let (cfg, out) = prepare(&common)?;
            cmd_optimize(&cfg, &out)
        }
        Command::CheckBound { common, horizon } => {
            let (cfg, out) = prepare(&common)?;
            cmd_check_bound(&cfg, horizon.as_deref(), common.jobs, &out)
        }
    }
}

fn prepare(common: &CommonArgs) -> CliResult<(RunConfig, PathBuf)> {
    let cfg = load_config(&common.config)?;
    fs::create_dir_all(&common.out).map_err(|e| {
        config_err(format!("cannot create output directory {}: {e}", common.out.display()))
    })?;
    Ok((cfg, common.out.clone()))
}

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

/// One JSON run configuration: exactly one model plus optional command
/// parameters. Unknown top-level keys are rejected so typos surface as
/// configuration errors instead of silently ignored settings.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    /// Kept as raw JSON here: the kind dispatch happens in [`parse_model`]
    /// so that field paths inside the model survive into diagnostics, which
    /// an internally tagged serde enum would swallow.
    model: Value,
    /// Fidelity levels for the decoherence command.
    #[serde(default)]
    epsilon: Vec<f64>,
    /// Soft horizons for the discounted and check-bound commands.
    #[serde(default)]
    horizons: Vec<f64>,
    /// Time grid for the evaluate command.
    #[serde(default)]
    grid: Option<GridConfig>,
    /// Cap for crossing searches (decoherence command).
    #[serde(default)]
    t_cap: Option<f64>,
    /// Level-integral truncation override (check-bound command).
    #[serde(default)]
    eps_max: Option<f64>,
    /// Simpson node count for the level integral (check-bound command).
    #[serde(default)]
    n_eps: Option<usize>,
    #[serde(default)]
    optimizer: Option<OptimizerConfig>,
    #[serde(default)]
    param_map: Option<ParamMapConfig>,
}

/// The model section: a union over the three supported kinds, selected by
/// the `kind` field. Matrices are nested row-major arrays; finite-level
/// data carries an explicit `complex` flag and writes entries as [re, im]
/// pairs when set.
#[derive(Debug)]
enum ModelConfig {
    OqhoPhysical(OqhoPhysicalConfig),
    OqhoRaw(OqhoRawConfig),
    FiniteLevel(FiniteLevelConfig),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct OqhoPhysicalConfig {
    theta: Vec<Vec<f64>>,
    #[serde(rename = "R")]
    energy: Vec<Vec<f64>>,
    #[serde(rename = "M")]
    coupling: Vec<Vec<f64>>,
    #[serde(rename = "F")]
    weight: Vec<Vec<f64>>,
    #[serde(rename = "P")]
    p0: Vec<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct OqhoRawConfig {
    #[serde(rename = "A")]
    drift: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    dispersion: Vec<Vec<f64>>,
    #[serde(rename = "F")]
    weight: Vec<Vec<f64>>,
    #[serde(rename = "P")]
    p0: Vec<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FiniteLevelConfig {
    complex: bool,
    #[serde(rename = "H0")]
    hamiltonian: Vec<Vec<EntryJson>>,
    #[serde(rename = "L")]
    couplings: Vec<Vec<Vec<EntryJson>>>,
    sigma0: Vec<Vec<EntryJson>>,
}

/// Dispatches on the `kind` tag by hand so serde's path tracking reaches
/// into the selected variant; errors then pin the exact entry, for example
/// `model.B[0][1]`.
fn parse_model(raw: &Value) -> CliResult<ModelConfig> {
    let Some(obj) = raw.as_object() else {
        return Err(config_err("config field model: expected an object"));
    };
    let kind = match obj.get("kind") {
        Some(Value::String(s)) => s.as_str(),
        Some(_) => return Err(config_err("config field model.kind: expected a string")),
        None => {
            return Err(config_err(
                "config field model.kind: missing; expected \"oqho-physical\", \"oqho-raw\" or \"finite-level\"",
            ));
        }
    };
    // The tag is not a field of the variant structs.
    let mut body = obj.clone();
    body.remove("kind");
    let body = Value::Object(body);
    match kind {
        "oqho-physical" => deser_model(body).map(ModelConfig::OqhoPhysical),
        "oqho-raw" => deser_model(body).map(ModelConfig::OqhoRaw),
        "finite-level" => deser_model(body).map(ModelConfig::FiniteLevel),
        other => Err(config_err(format!(
            "config field model.kind: unknown kind {other:?}; expected \"oqho-physical\", \"oqho-raw\" or \"finite-level\""
        ))),
    }
}

fn deser_model<T: serde::de::DeserializeOwned>(body: Value) -> CliResult<T> {
    serde_path_to_error::deserialize(body).map_err(|e| {
        let at = e.path().to_string();
        let inner = e.into_inner();
        if at == "." {
            config_err(format!("config field model: {inner}"))
        } else {
            config_err(format!("config field model.{at}: {inner}"))
        }
    })
}

/// A matrix entry: a plain real number or an explicit [re, im] pair. Which
/// form is legal is decided by the model's `complex` flag.
#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum EntryJson {
    Real(f64),
    Pair([f64; 2]),
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridConfig {
    start: f64,
    stop: f64,
    points: usize,
}

impl GridConfig {
    fn linspace(&self) -> Vec<f64> {
        let span = self.stop - self.start;
        (0..self.points)
            .map(|i| self.start + span * i as f64 / (self.points - 1) as f64)
            .collect()
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerConfig {
    objective: String,
    /// Fidelity level (tau-max objective).
    #[serde(default)]
    epsilon: Option<f64>,
    /// Horizon (delta-sup-min and discounted-min objectives).
    #[serde(default)]
    horizon: Option<f64>,
    #[serde(default)]
    p_init: Option<Vec<f64>>,
    #[serde(default)]
    max_iters: Option<usize>,
    #[serde(default)]
    grad_tol: Option<f64>,
    #[serde(default)]
    t_cap: Option<f64>,
    /// Per-parameter [lo, hi] box bounds.
    #[serde(default)]
    bounds: Option<Vec<[f64; 2]>>,
}

/// Direction matrices moving R and M away from the model's base point; the
/// lists must have equal length (one pair per scalar parameter).
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamMapConfig {
    #[serde(rename = "directions_R")]
    directions_r: Vec<Vec<Vec<f64>>>,
    #[serde(rename = "directions_M")]
    directions_m: Vec<Vec<Vec<f64>>>,
}

fn load_config(path: &Path) -> CliResult<RunConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
    let mut de = serde_json::Deserializer::from_str(&text);
    let cfg: RunConfig = match serde_path_to_error::deserialize(&mut de) {
        Ok(cfg) => cfg,
        Err(e) => {
            let at = e.path().to_string();
            let inner = e.into_inner();
            return Err(if at == "." {
                config_err(format!("config: {inner}"))
            } else {
                config_err(format!("config field {at}: {inner}"))
            });
        }
    };
    de.end().map_err(|e| config_err(format!("config: trailing data: {e}")))?;
    Ok(cfg)
}

// ---------------------------------------------------------------------------
// Model assembly
// ---------------------------------------------------------------------------

#[derive(Debug)]
enum BuiltModel {
    Oqho(OqhoModel),
    Finite(FiniteLevelModel, Lindbladian),
}

fn real_matrix(field: &str, rows: &[Vec<f64>]) -> CliResult<RealMatrix> {
    matops::try_real_matrix(rows).map_err(|e| config_err(format!("{field}: {e}")))
}

fn complex_matrix(field: &str, rows: &[Vec<EntryJson>], complex: bool) -> CliResult<ComplexMatrix> {
    let mut pairs: Vec<Vec<(f64, f64)>> = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        let mut out = Vec::with_capacity(row.len());
        for (j, entry) in row.iter().enumerate() {
            out.push(match (entry, complex) {
                (EntryJson::Pair([re, im]), true) => (*re, *im),
                (EntryJson::Real(x), false) => (*x, 0.0),
                (EntryJson::Real(_), true) => {
                    return Err(config_err(format!(
                        "{field}[{i}][{j}]: the complex flag is set, entries must be [re, im] pairs"
                    )));
                }
                (EntryJson::Pair(_), false) => {
                    return Err(config_err(format!(
                        "{field}[{i}][{j}]: the complex flag is off, entries must be plain numbers"
                    )));
                }
            });
        }
        pairs.push(out);
    }
    matops::try_complex_matrix(&pairs).map_err(|e| config_err(format!("{field}: {e}")))
}

fn build_model(raw: &Value) -> CliResult<BuiltModel> {
    match parse_model(raw)? {
        ModelConfig::OqhoPhysical(cfg) => {
            let theta = real_matrix("model.theta", &cfg.theta)?;
            let r = real_matrix("model.R", &cfg.energy)?;
            let m = real_matrix("model.M", &cfg.coupling)?;
            let f = real_matrix("model.F", &cfg.weight)?;
            let p = real_matrix("model.P", &cfg.p0)?;
            let model = models::build_oqho(&theta, &r, &m, &f, &p)
                .map_err(|e| config_err(format!("model: {e}")))?;
            Ok(BuiltModel::Oqho(model))
        }
        ModelConfig::OqhoRaw(cfg) => {
            let a = real_matrix("model.A", &cfg.drift)?;
            let b = real_matrix("model.B", &cfg.dispersion)?;
            let f = real_matrix("model.F", &cfg.weight)?;
            let p = real_matrix("model.P", &cfg.p0)?;
            let model = models::build_oqho_raw(&a, &b, &f, &p)
                .map_err(|e| config_err(format!("model: {e}")))?;
            Ok(BuiltModel::Oqho(model))
        }
        ModelConfig::FiniteLevel(cfg) => {
            let h = complex_matrix("model.H0", &cfg.hamiltonian, cfg.complex)?;
            let mut ls = Vec::with_capacity(cfg.couplings.len());
            for (i, rows) in cfg.couplings.iter().enumerate() {
                ls.push(complex_matrix(&format!("model.L[{i}]"), rows, cfg.complex)?);
            }
            let s = complex_matrix("model.sigma0", &cfg.sigma0, cfg.complex)?;
            let model = models::build_finite_level(&h, &ls, &s)
                .map_err(|e| config_err(format!("model: {e}")))?;
            let lind = models::assemble_lindbladian(&model)
                .map_err(|e| config_err(format!("model: {e}")))?;
            Ok(BuiltModel::Finite(model, lind))
        }
    }
}

/// Either deviation functional as one scalar curve, so the sweep commands
/// are agnostic about the model kind.
enum AnyCurve<'a> {
    Delta(DeltaCurve<'a>),
    Gamma(GammaCurve<'a>),
}

impl<'a> AnyCurve<'a> {
    fn new(model: &'a BuiltModel) -> CliResult<Self> {
        match model {
            BuiltModel::Oqho(m) => Ok(AnyCurve::Delta(DeltaCurve::new(m).map_err(numeric_err)?)),
            BuiltModel::Finite(m, lind) => Ok(AnyCurve::Gamma(GammaCurve::new(m, lind))),
        }
    }
}

impl ScalarCurve for AnyCurve<'_> {
    fn eval(&self, t: f64) -> Result<decoherence::CurvePoint, decoherence::DecoherenceError> {
        match self {
            AnyCurve::Delta(c) => c.eval(t),
            AnyCurve::Gamma(c) => c.eval(t),
        }
    }

    fn scale(&self) -> f64 {
        match self {
            AnyCurve::Delta(c) => c.scale(),
            AnyCurve::Gamma(c) => c.scale(),
        }
    }
}

// ---------------------------------------------------------------------------
// Flag parsing and shared validation
// ---------------------------------------------------------------------------

fn parse_grid_flag(text: &str) -> CliResult<GridConfig> {
    let parts: Vec<&str> = text.split(':').collect();
    if parts.len() != 3 {
        return Err(config_err(format!("--grid must be start:stop:points, got {text:?}")));
    }
    let start: f64 = parts[0]
        .parse()
        .map_err(|_| config_err(format!("--grid start {:?} is not a number", parts[0])))?;
    let stop: f64 = parts[1]
        .parse()
        .map_err(|_| config_err(format!("--grid stop {:?} is not a number", parts[1])))?;
    let points: usize = parts[2]
        .parse()
        .map_err(|_| config_err(format!("--grid points {:?} is not a count", parts[2])))?;
    Ok(GridConfig { start, stop, points })
}

fn resolve_grid(cfg: &RunConfig, flag: Option<&str>) -> CliResult<GridConfig> {
    let grid = match flag {
        Some(text) => parse_grid_flag(text)?,
        None => cfg.grid.ok_or_else(|| {
            config_err("no time grid: pass --grid start:stop:points or set \"grid\" in the config")
        })?,
    };
    if !grid.start.is_finite() || grid.start < 0.0 {
        return Err(config_err(format!(
            "grid start must be finite and nonnegative, got {}",
            grid.start
        )));
    }
    if !grid.stop.is_finite() || grid.stop <= grid.start {
        return Err(config_err(format!(
            "grid stop must be finite and larger than start, got {}",
            grid.stop
        )));
    }
    if grid.points < 2 {
        return Err(config_err(format!("grid needs at least two points, got {}", grid.points)));
    }
    Ok(grid)
}

/// Positive lists shared by the sweep commands: a comma-separated flag wins
/// over the config list; an empty result is a configuration error.
fn resolve_levels(
    flag: Option<&str>,
    from_config: &[f64],
    noun: &str,
    flag_name: &str,
    config_key: &str,
) -> CliResult<Vec<f64>> {
    let list: Vec<f64> = match flag {
        Some(text) => {
            let mut out = Vec::new();
            for part in text.split(',') {
                let part = part.trim();
                out.push(part.parse::<f64>().map_err(|_| {
                    config_err(format!("{flag_name} entry {part:?} is not a number"))
                })?);
            }
            out
        }
        None => from_config.to_vec(),
    };
    if list.is_empty() {
        return Err(config_err(format!(
            "no {noun}: pass {flag_name} or set \"{config_key}\" in the config"
        )));
    }
    for &x in &list {
        if !x.is_finite() || x <= 0.0 {
            return Err(config_err(format!("{noun} must be positive and finite, got {x}")));
        }
    }
    Ok(list)
}

// ---------------------------------------------------------------------------
// Deterministic output formatting
// ---------------------------------------------------------------------------

/// 17 significant digits: enough to reproduce any f64 bit pattern on
/// re-parse, and a fixed width so outputs are byte-stable.
fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn num(x: f64) -> Value {
    serde_json::Number::from_f64(x).map(Value::Number).unwrap_or(Value::Null)
}

fn opt_num(x: Option<f64>) -> Value {
    x.map(num).unwrap_or(Value::Null)
}

fn vec_json(xs: &[f64]) -> Value {
    Value::Array(xs.iter().map(|&x| num(x)).collect())
}

fn matrix_json(m: &RealMatrix) -> Value {
    Value::Array(
        (0..m.nrows())
            .map(|i| Value::Array((0..m.ncols()).map(|j| num(m[(i, j)])).collect()))
            .collect(),
    )
}

fn json_obj(fields: Vec<(&str, Value)>) -> Value {
    let mut map = Map::new();
    for (k, v) in fields {
        map.insert(k.to_string(), v);
    }
    Value::Object(map)
}

/// Renders a JSON document with keys in insertion order, two-space indent
/// and every float printed through [`fmt_f64`]. serde_json's own printer
/// uses shortest-round-trip formatting, which would break the fixed
/// 17-digit output contract.
fn render_json(v: &Value) -> String {
    let mut out = String::new();
    render_value(&mut out, v, 0);
    out.push('\n');
    out
}

fn render_value(out: &mut String, v: &Value, depth: usize) {
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if let Some(u) = n.as_u64() {
                out.push_str(&u.to_string());
            } else if let Some(i) = n.as_i64() {
                out.push_str(&i.to_string());
            } else {
                out.push_str(&fmt_f64(n.as_f64().expect("JSON numbers are u64, i64 or f64")));
            }
        }
        Value::String(s) => {
            out.push_str(&serde_json::to_string(s).expect("strings always serialize"));
        }
        Value::Array(items) => {
            if items.is_empty() {
                out.push_str("[]");
                return;
            }
            // Rows of numbers stay on one line so matrices remain readable.
            if items.iter().all(|v| matches!(v, Value::Number(_) | Value::Null)) {
                out.push('[');
                for (i, item) in items.iter().enumerate() {
                    if i > 0 {
                        out.push_str(", ");
                    }
                    render_value(out, item, depth);
                }
                out.push(']');
                return;
            }
            out.push_str("[\n");
            for (i, item) in items.iter().enumerate() {
                out.push_str(&"  ".repeat(depth + 1));
                render_value(out, item, depth + 1);
                if i + 1 < items.len() {
                    out.push(',');
                }
                out.push('\n');
            }
            out.push_str(&"  ".repeat(depth));
            out.push(']');
        }
        Value::Object(map) => {
            if map.is_empty() {
                out.push_str("{}");
                return;
            }
            out.push_str("{\n");
            for (i, (k, item)) in map.iter().enumerate() {
                out.push_str(&"  ".repeat(depth + 1));
                out.push_str(&serde_json::to_string(k).expect("strings always serialize"));
                out.push_str(": ");
                render_value(out, item, depth + 1);
                if i + 1 < map.len() {
                    out.push(',');
                }
                out.push('\n');
            }
            out.push_str(&"  ".repeat(depth));
            out.push('}');
        }
    }
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text)
        .map_err(|e| numeric_err(format!("cannot write {}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// Worker pool
// ---------------------------------------------------------------------------

/// Maps `worker` over `items` with up to `jobs` threads. Results come back
/// ordered by input index whatever the scheduling, so sweep outputs are
/// deterministic.
fn run_indexed<T, O, F>(items: &[T], jobs: usize, worker: F) -> Vec<CliResult<O>>
where
    T: Sync,
    O: Send,
    F: Fn(usize, &T) -> CliResult<O> + Sync,
{
    let jobs = jobs.max(1).min(items.len().max(1));
    if jobs <= 1 {
        return items.iter().enumerate().map(|(i, item)| worker(i, item)).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<CliResult<O>>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let result = worker(i, &items[i]);
                *slots[i].lock().expect("result slot") = Some(result);
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| slot.into_inner().expect("result slot").expect("every index visited"))
        .collect()
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

fn cmd_evaluate(cfg: &RunConfig, grid_flag: Option<&str>, jobs: usize, out: &Path) -> CliResult<()> {
    let grid = resolve_grid(cfg, grid_flag)?;
    let times = grid.linspace();
    let model = build_model(&cfg.model)?;
    let results = match &model {
        BuiltModel::Oqho(m) => run_indexed(&times, jobs, |_, &t| {
            functionals::delta(m, t).map_err(|e| numeric_err(format!("delta({t}): {e}")))
        }),
        BuiltModel::Finite(m, lind) => run_indexed(&times, jobs, |_, &t| {
            functionals::gamma(m, lind, t).map_err(|e| numeric_err(format!("gamma({t}): {e}")))
        }),
    };
    let mut values = Vec::with_capacity(times.len());
    for r in results {
        values.push(r?);
    }

    let mut csv = String::from("t,value\n");
    for (t, v) in times.iter().zip(&values) {
        csv.push_str(&fmt_f64(*t));
        csv.push(',');
        csv.push_str(&fmt_f64(*v));
        csv.push('\n');
    }
    let csv_path = out.join("trace.csv");
    write_text(&csv_path, &csv)?;

    let sidecar = match &model {
        BuiltModel::Oqho(m) => {
            let (_, d1, d2) = functionals::delta_jet(m, 0.0).map_err(numeric_err)?;
            json_obj(vec![
                ("kind", Value::String("heisenberg-delta".to_string())),
                ("points", Value::from(times.len())),
                ("t_start", num(grid.start)),
                ("t_stop", num(grid.stop)),
                ("stationary", opt_num(functionals::delta_star(m).ok())),
                ("initial_slope", num(d1)),
                ("initial_curvature", num(d2)),
            ])
        }
        BuiltModel::Finite(m, lind) => {
            let (_, d1, d2) = functionals::gamma_jet(m, lind, 0.0).map_err(numeric_err)?;
            json_obj(vec![
                ("kind", Value::String("schrodinger-gamma".to_string())),
                ("points", Value::from(times.len())),
                ("t_start", num(grid.start)),
                ("t_stop", num(grid.stop)),
                ("stationary", num(functionals::gamma_star(m))),
                ("initial_slope", num(d1)),
                ("initial_curvature", num(d2)),
            ])
        }
    };
    let sidecar_path = out.join("evaluate.json");
    write_text(&sidecar_path, &render_json(&sidecar))?;
    println!(
        "evaluate: {} points -> {}, {}",
        times.len(),
        csv_path.display(),
        sidecar_path.display()
    );
    Ok(())
}

fn cmd_decoherence(cfg: &RunConfig, eps_flag: Option<&str>, jobs: usize, out: &Path) -> CliResult<()> {
    let levels = resolve_levels(eps_flag, &cfg.epsilon, "fidelity levels", "--eps", "epsilon")?;
    let t_cap = cfg.t_cap.unwrap_or(DEFAULT_T_CAP);
    if !t_cap.is_finite() || t_cap <= 0.0 {
        return Err(config_err(format!("t_cap must be positive and finite, got {t_cap}")));
    }
    let model = build_model(&cfg.model)?;
    let curve = AnyCurve::new(&model)?;

    let outcomes = run_indexed(&levels, jobs, |_, &eps| -> CliResult<(Value, bool)> {
        let r = decoherence::decoherence_time(&curve, eps, t_cap).map_err(numeric_err)?;
        let tau_hat = decoherence::tau_short_horizon(&curve, eps).ok();
        let tau_gap = match (r.tau.finite(), tau_hat) {
            (Some(tau), Some(hat)) => Some((tau - hat).abs()),
            _ => None,
        };
        let reached = r.tau.finite().is_some();
        let record = json_obj(vec![
            ("epsilon", num(eps)),
            (
                "tau",
                match r.tau {
                    TauOutcome::Reached(t) => num(t),
                    TauOutcome::NeverReached => Value::String("never-reached".to_string()),
                },
            ),
            ("regular", Value::Bool(r.regular)),
            ("derivative_at_tau", opt_num(r.derivative_at_tau)),
            ("tau_prime", opt_num(r.tau_prime)),
            ("tau_double_prime", opt_num(r.tau_double_prime)),
            ("low_confidence_second", Value::Bool(r.low_confidence_second)),
            ("tau_hat", opt_num(tau_hat)),
            ("tau_gap", opt_num(tau_gap)),
            ("bisection_iterations", Value::from(r.bisection_iterations)),
        ]);
        Ok((record, reached))
    });

    let mut records = Vec::with_capacity(levels.len());
    let mut any_reached = false;
    for outcome in outcomes {
        let (record, reached) = outcome?;
        any_reached |= reached;
        records.push(record);
    }
    let doc = json_obj(vec![("t_cap", num(t_cap)), ("records", Value::Array(records))]);
    let path = out.join("decoherence.json");
    write_text(&path, &render_json(&doc))?;
    println!("decoherence: {} levels -> {}", levels.len(), path.display());
    if !any_reached {
        return Err(numeric_err(format!(
            "no fidelity level was reached within t_cap = {t_cap}; records were still written"
        )));
    }
    Ok(())
}

fn cmd_discounted(
    cfg: &RunConfig,
    horizon_flag: Option<&str>,
    with_oracle: bool,
    jobs: usize,
    out: &Path,
) -> CliResult<()> {
    let horizons = resolve_levels(horizon_flag, &cfg.horizons, "horizons", "--horizon", "horizons")?;
    let model = build_model(&cfg.model)?;

    let outcomes = run_indexed(&horizons, jobs, |_, &horizon| -> CliResult<(Value, bool)> {
        let closed = match &model {
            BuiltModel::Oqho(m) => discounted::discounted_delta_ale(m, horizon),
            BuiltModel::Finite(m, lind) => discounted::discounted_gamma_superop(m, lind, horizon),
        };
        match closed {
            Ok(res) => {
                let mut fields = vec![
                    ("horizon", num(horizon)),
                    ("admissible", Value::Bool(true)),
                    ("value", num(res.value)),
                    ("path", Value::String(res.path.as_str().to_string())),
                    ("admissibility_margin", num(res.admissibility_margin)),
                    ("error_estimate", opt_num(res.error_estimate)),
                ];
                if with_oracle {
                    // An unstable drift shrinks the margin below 1/T; widen
                    // the quadrature window accordingly so the tail stays at
                    // the e^-40 level.
                    let t_max = 40.0 / res.admissibility_margin;
                    let oracle = discounted::discounted_quadrature(
                        |t| match &model {
                            BuiltModel::Oqho(m) => Ok(functionals::delta(m, t)?),
                            BuiltModel::Finite(m, lind) => Ok(functionals::gamma(m, lind, t)?),
                        },
                        horizon,
                        Some(t_max),
                        8,
                    )
                    .map_err(numeric_err)?;
                    let denom = res.value.abs().max(oracle.value.abs()).max(1e-30);
                    fields.push(("oracle_value", num(oracle.value)));
                    fields.push(("oracle_error_estimate", opt_num(oracle.error_estimate)));
                    fields.push(("relative_gap", num((oracle.value - res.value).abs() / denom)));
                }
                Ok((json_obj(fields), true))
            }
            Err(DiscountedError::InadmissibleHorizon { max_admissible, .. }) => Ok((
                json_obj(vec![
                    ("horizon", num(horizon)),
                    ("admissible", Value::Bool(false)),
                    ("max_admissible", num(max_admissible)),
                ]),
                false,
            )),
            Err(e) => Err(numeric_err(e)),
        }
    });

    let mut records = Vec::with_capacity(horizons.len());
    let mut any_admissible = false;
    for outcome in outcomes {
        let (record, admissible) = outcome?;
        any_admissible |= admissible;
        records.push(record);
    }
    let doc = json_obj(vec![
        ("with_oracle", Value::Bool(with_oracle)),
        ("records", Value::Array(records)),
    ]);
    let path = out.join("discounted.json");
    write_text(&path, &render_json(&doc))?;
    println!("discounted: {} horizons -> {}", horizons.len(), path.display());
    if !any_admissible {
        return Err(numeric_err(
            "every horizon in the list is inadmissible; records were still written",
        ));
    }
    Ok(())
}

fn trace_csv_header(r: usize) -> String {
    let mut header = String::from("iter");
    for i in 0..r {
        header.push_str(&format!(",p{i}"));
    }
    header.push_str(",value,grad_norm\n");
    header
}

fn trace_csv(r: usize, trace: &[optimize::TracePoint]) -> String {
    let mut csv = trace_csv_header(r);
    for (iter, point) in trace.iter().enumerate() {
        csv.push_str(&iter.to_string());
        for &x in &point.p {
            csv.push(',');
            csv.push_str(&fmt_f64(x));
        }
        csv.push(',');
        csv.push_str(&fmt_f64(point.value));
        csv.push(',');
        csv.push_str(&fmt_f64(point.grad_norm));
        csv.push('\n');
    }
    csv
}

fn report_json(report: &optimize::OptimizationReport, duality_error: Option<&str>) -> Value {
    let duality = match (&report.duality, duality_error) {
        (Some(d), _) => json_obj(vec![
            ("t_star", num(d.t_star)),
            ("grad_norm", num(d.grad_norm)),
            ("hessian_min_eig", num(d.hessian_min_eig)),
            ("stationary_ok", Value::Bool(d.stationary_ok)),
            ("convex_ok", Value::Bool(d.convex_ok)),
            ("degenerate", Value::Bool(d.degenerate)),
        ]),
        (None, Some(msg)) => json_obj(vec![("error", Value::String(msg.to_string()))]),
        (None, None) => Value::Null,
    };
    json_obj(vec![
        ("objective", Value::String(report.objective.as_str().to_string())),
        ("converged", Value::Bool(report.converged)),
        ("used_fallback", Value::Bool(report.used_fallback)),
        ("non_interior", Value::Bool(report.non_interior)),
        ("iterations", Value::from(report.trace.len())),
        ("p_init", vec_json(&report.p_init)),
        ("p_final", vec_json(&report.p_final)),
        ("final_value", opt_num(report.trace.last().map(|t| t.value))),
        ("duality", duality),
    ])
}

fn cmd_optimize(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let opt = cfg
        .optimizer
        .as_ref()
        .ok_or_else(|| config_err("optimize needs an \"optimizer\" section in the config"))?;
    let map_cfg = cfg
        .param_map
        .as_ref()
        .ok_or_else(|| config_err("optimize needs a \"param_map\" section in the config"))?;
    let ModelConfig::OqhoPhysical(phys) = parse_model(&cfg.model)? else {
        return Err(config_err(
            "optimization moves R and M, so the model must have kind \"oqho-physical\"",
        ));
    };

    let theta = real_matrix("model.theta", &phys.theta)?;
    let base_r = real_matrix("model.R", &phys.energy)?;
    let base_m = real_matrix("model.M", &phys.coupling)?;
    let f_weight = real_matrix("model.F", &phys.weight)?;
    let cov_p = real_matrix("model.P", &phys.p0)?;
    let mut dirs_r = Vec::with_capacity(map_cfg.directions_r.len());
    for (i, rows) in map_cfg.directions_r.iter().enumerate() {
        dirs_r.push(real_matrix(&format!("param_map.directions_R[{i}]"), rows)?);
    }
    let mut dirs_m = Vec::with_capacity(map_cfg.directions_m.len());
    for (i, rows) in map_cfg.directions_m.iter().enumerate() {
        dirs_m.push(real_matrix(&format!("param_map.directions_M[{i}]"), rows)?);
    }
    let map = ParamMap::new(
        theta.clone(),
        base_r.clone(),
        base_m.clone(),
        dirs_r.clone(),
        dirs_m.clone(),
        f_weight.clone(),
        cov_p.clone(),
    )
    .map_err(optimize_err)?;

    let objective = match opt.objective.as_str() {
        "tau-max" => ObjectiveKind::TauMax,
        "delta-sup-min" => ObjectiveKind::DeltaSupMin,
        "discounted-min" => ObjectiveKind::DiscountedMin,
        other => {
            return Err(config_err(format!(
                "unknown objective {other:?}: expected \"tau-max\", \"delta-sup-min\" or \"discounted-min\""
            )));
        }
    };
    let p_start = match &opt.p_init {
        Some(p) => {
            if p.len() != map.r() {
                return Err(config_err(format!(
                    "optimizer.p_init has {} entries, the parameter map has {}",
                    p.len(),
                    map.r()
                )));
            }
            p.clone()
        }
        None => vec![0.0; map.r()],
    };
    if p_start.iter().any(|x| !x.is_finite()) {
        return Err(config_err("optimizer.p_init entries must be finite"));
    }

    let mut settings = OptimizerSettings::default();
    if let Some(v) = opt.max_iters {
        if v == 0 {
            return Err(config_err("optimizer.max_iters must be at least 1"));
        }
        settings.max_iters = v;
    }
    if let Some(v) = opt.grad_tol {
        if !v.is_finite() || v <= 0.0 {
            return Err(config_err(format!("optimizer.grad_tol must be positive, got {v}")));
        }
        settings.grad_tol = v;
    }
    if let Some(v) = opt.t_cap {
        if !v.is_finite() || v <= 0.0 {
            return Err(config_err(format!("optimizer.t_cap must be positive, got {v}")));
        }
        settings.t_cap = v;
    }
    if let Some(bs) = &opt.bounds {
        let mut bounds = Vec::with_capacity(bs.len());
        for (i, b) in bs.iter().enumerate() {
            if !b[0].is_finite() || !b[1].is_finite() || b[0] > b[1] {
                return Err(config_err(format!(
                    "optimizer.bounds[{i}] must be a finite [lo, hi] pair with lo <= hi"
                )));
            }
            bounds.push((b[0], b[1]));
        }
        settings.bounds = Some(bounds);
    }

    let run = match objective {
        ObjectiveKind::TauMax => {
            let eps = opt
                .epsilon
                .ok_or_else(|| config_err("objective tau-max needs optimizer.epsilon"))?;
            if !eps.is_finite() || eps <= 0.0 {
                return Err(config_err(format!(
                    "optimizer.epsilon must be positive and finite, got {eps}"
                )));
            }
            optimize::maximize_tau(&map, &p_start, eps, &settings)
        }
        ObjectiveKind::DeltaSupMin => {
            let horizon = opt
                .horizon
                .ok_or_else(|| config_err("objective delta-sup-min needs optimizer.horizon"))?;
            if !horizon.is_finite() || horizon <= 0.0 {
                return Err(config_err(format!(
                    "optimizer.horizon must be positive and finite, got {horizon}"
                )));
            }
            optimize::minimize_delta_sup(&map, &p_start, horizon, &settings)
        }
        ObjectiveKind::DiscountedMin => {
            let horizon = opt
                .horizon
                .ok_or_else(|| config_err("objective discounted-min needs optimizer.horizon"))?;
            if !horizon.is_finite() || horizon <= 0.0 {
                return Err(config_err(format!(
                    "optimizer.horizon must be positive and finite, got {horizon}"
                )));
            }
            optimize::minimize_discounted(&map, &p_start, horizon, &settings)
        }
    };

    let trace_path = out.join("trace.csv");
    let report_path = out.join("report.json");
    let model_path = out.join("optimized_model.json");
    let mut report = match run {
        Err(e) => {
            // A failed run still leaves an audit trail: the empty trace and
            // a report carrying the failure.
            write_text(&trace_path, &trace_csv_header(map.r()))?;
            let doc = json_obj(vec![
                ("objective", Value::String(objective.as_str().to_string())),
                ("error", Value::String(e.to_string())),
            ]);
            write_text(&report_path, &render_json(&doc))?;
            return Err(optimize_err(e));
        }
        Ok(report) => report,
    };

    let mut duality_error = None;
    if objective == ObjectiveKind::TauMax {
        let eps = opt.epsilon.expect("validated above");
        match optimize::verify_duality(&map, &report.p_final, eps, settings.t_cap) {
            Ok(d) => report.duality = Some(d),
            Err(e) => duality_error = Some(e.to_string()),
        }
    }

    write_text(&trace_path, &trace_csv(map.r(), &report.trace))?;
    write_text(&report_path, &render_json(&report_json(&report, duality_error.as_deref())))?;

    // Materialize the optimized model exactly the way ParamMap::build does,
    // so re-loading the emitted config reproduces the final objective.
    let mut r_star = base_r.clone();
    let mut m_star = base_m.clone();
    for (i, &pi) in report.p_final.iter().enumerate() {
        r_star += &dirs_r[i] * pi;
        m_star += &dirs_m[i] * pi;
    }
    let model_doc = json_obj(vec![(
        "model",
        json_obj(vec![
            ("kind", Value::String("oqho-physical".to_string())),
            ("theta", matrix_json(&theta)),
            ("R", matrix_json(&r_star)),
            ("M", matrix_json(&m_star)),
            ("F", matrix_json(&f_weight)),
            ("P", matrix_json(&cov_p)),
        ]),
    )]);
    write_text(&model_path, &render_json(&model_doc))?;
    println!(
        "optimize: {} iterations -> {}, {}, {}",
        report.trace.len(),
        report_path.display(),
        trace_path.display(),
        model_path.display()
    );

    if let Some(msg) = duality_error {
        return Err(numeric_err(format!("duality verification failed: {msg}")));
    }
    if !report.converged {
        return Err(numeric_err(
            "optimizer did not converge within its iteration budget; partial trace emitted",
        ));
    }
    Ok(())
}

fn cmd_check_bound(
    cfg: &RunConfig,
    horizon_flag: Option<&str>,
    jobs: usize,
    out: &Path,
) -> CliResult<()> {
    let horizons = resolve_levels(horizon_flag, &cfg.horizons, "horizons", "--horizon", "horizons")?;
    let n_eps = cfg.n_eps.unwrap_or(DEFAULT_N_EPS);
    if let Some(e) = cfg.eps_max {
        if !e.is_finite() || e <= 0.0 {
            return Err(config_err(format!("eps_max must be positive and finite, got {e}")));
        }
    }
    let model = build_model(&cfg.model)?;
    let curve = AnyCurve::new(&model)?;

    let outcomes = run_indexed(&horizons, jobs, |_, &horizon| -> CliResult<Value> {
        // The closed form doubles as the admissibility probe.
        let closed = match &model {
            BuiltModel::Oqho(m) => discounted::discounted_delta_ale(m, horizon).map(|r| r.value),
            BuiltModel::Finite(m, lind) => {
                discounted::discounted_gamma_superop(m, lind, horizon).map(|r| r.value)
            }
        };
        match closed {
            Err(DiscountedError::InadmissibleHorizon { max_admissible, .. }) => Ok(json_obj(vec![
                ("horizon", num(horizon)),
                ("evaluated", Value::Bool(false)),
                ("max_admissible", num(max_admissible)),
            ])),
            Err(e) => Err(numeric_err(e)),
            Ok(value) => {
                let eps_max = match cfg.eps_max {
                    Some(e) => e,
                    None => discounted::suggest_eps_max(&curve, horizon).map_err(numeric_err)?,
                };
                let check = discounted::check_discount_bound(&curve, horizon, eps_max, n_eps)
                    .map_err(numeric_err)?;
                Ok(json_obj(vec![
                    ("horizon", num(horizon)),
                    ("evaluated", Value::Bool(true)),
                    ("lhs", num(check.lhs)),
                    ("rhs", num(check.rhs)),
                    ("holds", Value::Bool(check.holds)),
                    ("eps_max", num(check.eps_max)),
                    ("n_eps", Value::from(check.n_eps)),
                    ("tail_bound", num(check.tail_bound)),
                    ("discounted_value", num(value)),
                ]))
            }
        }
    });

    let mut records = Vec::with_capacity(horizons.len());
    for outcome in outcomes {
        records.push(outcome?);
    }
    let doc = json_obj(vec![("records", Value::Array(records))]);
    let path = out.join("bound_check.json");
    write_text(&path, &render_json(&doc))?;
    println!("check-bound: {} horizons -> {}", horizons.len(), path.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn write_config(dir: &Path, text: &str) -> PathBuf {
        let path = dir.join("config.json");
        fs::write(&path, text).unwrap();
        path
    }

    fn parse_config(text: &str) -> CliResult<RunConfig> {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(dir.path(), text);
        load_config(&path)
    }

    fn damped_pair_config() -> String {
        let b = fmt_f64(2.0f64.sqrt());
        format!(
            r#"{{
  "model": {{
    "kind": "oqho-raw",
    "A": [[-1.0, 0.0], [0.0, -1.0]],
    "B": [[{b}, 0.0], [0.0, {b}]],
    "F": [[1.0, 0.0], [0.0, 1.0]],
    "P": [[0.5, 0.0], [0.0, 0.5]]
  }}
}}"#
        )
    }

    fn dephasing_config() -> &'static str {
        r#"{
  "model": {
    "kind": "finite-level",
    "complex": true,
    "H0": [[[0.0, 0.0], [0.0, 0.0]], [[0.0, 0.0], [0.0, 0.0]]],
    "L": [
      [[[1.0, 0.0], [0.0, 0.0]], [[0.0, 0.0], [-1.0, 0.0]]],
      [[[0.0, 0.0], [0.0, 0.0]], [[0.0, 0.0], [0.0, 0.0]]]
    ],
    "sigma0": [[[0.5, 0.0], [0.5, 0.0]], [[0.5, 0.0], [0.5, 0.0]]]
  }
}"#
    }

    /// theta canonical, R = 0, M = I, F = I, P = I/2; directions move R
    /// along two symmetric deformations whose decoherence time peaks at the
    /// origin.
    fn symmetric_family_config(objective_block: &str) -> String {
        format!(
            r#"{{
  "model": {{
    "kind": "oqho-physical",
    "theta": [[0.0, 0.5], [-0.5, 0.0]],
    "R": [[0.0, 0.0], [0.0, 0.0]],
    "M": [[1.0, 0.0], [0.0, 1.0]],
    "F": [[1.0, 0.0], [0.0, 1.0]],
    "P": [[0.5, 0.0], [0.0, 0.5]]
  }},
  "param_map": {{
    "directions_R": [
      [[1.0, 0.0], [0.0, -1.0]],
      [[0.0, 1.0], [1.0, 0.0]]
    ],
    "directions_M": [
      [[0.0, 0.0], [0.0, 0.0]],
      [[0.0, 0.0], [0.0, 0.0]]
    ]
  }},
  "optimizer": {objective_block}
}}"#
        )
    }

    #[test]
    fn floats_print_with_17_significant_digits() {
        assert_eq!(fmt_f64(2.1289058344205025), "2.1289058344205025e0");
        assert_eq!(fmt_f64(0.0), "0.0000000000000000e0");
        let x = 0.1 + 0.2;
        let reparsed: f64 = fmt_f64(x).parse().unwrap();
        assert_eq!(reparsed.to_bits(), x.to_bits());
    }

    #[test]
    fn json_rendering_is_ordered_and_inlines_number_rows() {
        let doc = json_obj(vec![
            ("zulu", num(1.0)),
            ("alpha", Value::Array(vec![vec_json(&[1.0, 2.0]), vec_json(&[3.0, 4.0])])),
            ("tag", Value::String("x".to_string())),
        ]);
        let text = render_json(&doc);
        let z = text.find("zulu").unwrap();
        let a = text.find("alpha").unwrap();
        let t = text.find("tag").unwrap();
        assert!(z < a && a < t, "keys must keep insertion order:\n{text}");
        assert!(text.contains("[1.0000000000000000e0, 2.0000000000000000e0]"));
        assert!(text.ends_with("}\n"));
    }

    #[test]
    fn grid_flag_parses_and_rejects_garbage() {
        let g = parse_grid_flag("0:2:201").unwrap();
        assert_eq!((g.start, g.stop, g.points), (0.0, 2.0, 201));
        assert!(matches!(parse_grid_flag("0:2"), Err(CliError::Config(_))));
        assert!(matches!(parse_grid_flag("a:2:9"), Err(CliError::Config(_))));
        assert!(matches!(parse_grid_flag("0:2:many"), Err(CliError::Config(_))));
    }

    #[test]
    fn level_lists_prefer_the_flag_and_reject_empty_or_nonpositive() {
        let from_flag =
            resolve_levels(Some("0.1, 0.2"), &[9.0], "fidelity levels", "--eps", "epsilon")
                .unwrap();
        assert_eq!(from_flag, vec![0.1, 0.2]);
        let from_config =
            resolve_levels(None, &[0.3], "fidelity levels", "--eps", "epsilon").unwrap();
        assert_eq!(from_config, vec![0.3]);
        assert!(matches!(
            resolve_levels(None, &[], "fidelity levels", "--eps", "epsilon"),
            Err(CliError::Config(_))
        ));
        assert!(matches!(
            resolve_levels(Some("0.1,-0.2"), &[], "fidelity levels", "--eps", "epsilon"),
            Err(CliError::Config(_))
        ));
    }

    #[test]
    fn config_errors_name_the_offending_field() {
        let cfg = parse_config(r#"{"model": {"kind": "oqho-raw", "A": [[0.0]]}}"#).unwrap();
        let err = build_model(&cfg.model).unwrap_err();
        let CliError::Config(msg) = err else { panic!("expected a config error") };
        assert!(msg.contains('B'), "missing-field diagnostic should name B: {msg}");

        let cfg = parse_config(
            r#"{"model": {"kind": "oqho-raw", "A": [[-1.0]], "B": [["x"]], "F": [[1.0]], "P": [[1.0]]}}"#,
        )
        .unwrap();
        let err = build_model(&cfg.model).unwrap_err();
        let CliError::Config(msg) = err else { panic!("expected a config error") };
        assert!(msg.contains("model.B[0][0]"), "path diagnostic should pin the entry: {msg}");

        let cfg = parse_config(r#"{"model": {"kind": "mystery"}}"#).unwrap();
        let err = build_model(&cfg.model).unwrap_err();
        let CliError::Config(msg) = err else { panic!("expected a config error") };
        assert!(msg.contains("mystery"), "unknown kinds should be echoed: {msg}");

        let err = parse_config(
            r#"{"model": {"kind": "oqho-raw", "A": [[-1.0]], "B": [[1.0, 0.0]], "F": [[1.0]], "P": [[1.0]]}, "grdi": 3}"#,
        )
        .unwrap_err();
        let CliError::Config(msg) = err else { panic!("expected a config error") };
        assert!(msg.contains("grdi"), "unknown keys should be named: {msg}");
    }

    #[test]
    fn complex_flag_mismatches_are_rejected_with_positions() {
        let plain_entry = r#"{
  "model": {
    "kind": "finite-level",
    "complex": true,
    "H0": [[[0.0, 0.0], 1.0], [[0.0, 0.0], [0.0, 0.0]]],
    "L": [[[[1.0, 0.0], [0.0, 0.0]], [[0.0, 0.0], [-1.0, 0.0]]],
          [[[0.0, 0.0], [0.0, 0.0]], [[0.0, 0.0], [0.0, 0.0]]]],
    "sigma0": [[[0.5, 0.0], [0.5, 0.0]], [[0.5, 0.0], [0.5, 0.0]]]
  }
}"#;
        let cfg = parse_config(plain_entry).unwrap();
        let err = build_model(&cfg.model).unwrap_err();
        let CliError::Config(msg) = err else { panic!("expected a config error") };
        assert!(msg.contains("model.H0[0][1]"), "should pin the entry: {msg}");

        let pair_without_flag = r#"{
  "model": {
    "kind": "finite-level",
    "complex": false,
    "H0": [[0.0, [0.0, 1.0]], [0.0, 0.0]],
    "L": [[[1.0, 0.0], [0.0, -1.0]], [[0.0, 0.0], [0.0, 0.0]]],
    "sigma0": [[0.5, 0.5], [0.5, 0.5]]
  }
}"#;
        let cfg = parse_config(pair_without_flag).unwrap();
        let err = build_model(&cfg.model).unwrap_err();
        let CliError::Config(msg) = err else { panic!("expected a config error") };
        assert!(msg.contains("model.H0[0][1]"), "should pin the entry: {msg}");
    }

    #[test]
    fn finite_level_real_entries_build_when_flag_is_off() {
        let text = r#"{
  "model": {
    "kind": "finite-level",
    "complex": false,
    "H0": [[0.0, 0.0], [0.0, 0.0]],
    "L": [[[1.0, 0.0], [0.0, -1.0]], [[0.0, 0.0], [0.0, 0.0]]],
    "sigma0": [[0.5, 0.5], [0.5, 0.5]]
  }
}"#;
        let cfg = parse_config(text).unwrap();
        let model = build_model(&cfg.model).unwrap();
        assert!(matches!(model, BuiltModel::Finite(_, _)));
    }

    #[test]
    fn worker_pool_keeps_input_order() {
        let items: Vec<usize> = (0..17).collect();
        let serial = run_indexed(&items, 1, |i, &x| Ok::<_, CliError>(i * 100 + x));
        let parallel = run_indexed(&items, 4, |i, &x| Ok::<_, CliError>(i * 100 + x));
        let serial: Vec<usize> = serial.into_iter().map(|r| r.unwrap()).collect();
        let parallel: Vec<usize> = parallel.into_iter().map(|r| r.unwrap()).collect();
        assert_eq!(serial, parallel);
    }

    #[test]
    fn evaluate_damped_pair_writes_trace_and_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = parse_config(&damped_pair_config()).unwrap();
        cmd_evaluate(&cfg, Some("0:2:3"), 1, dir.path()).unwrap();

        let csv = fs::read_to_string(dir.path().join("trace.csv")).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "t,value");
        assert_eq!(lines.len(), 4);
        let at = |line: &str| -> (f64, f64) {
            let mut parts = line.split(',');
            (parts.next().unwrap().parse().unwrap(), parts.next().unwrap().parse().unwrap())
        };
        let (t0, v0) = at(lines[1]);
        assert_eq!((t0, v0), (0.0, 0.0));
        let (t1, v1) = at(lines[2]);
        assert_eq!(t1, 1.0);
        assert_relative_eq!(v1, 2.1289058344205025, max_relative = 1e-12);

        let sidecar: Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("evaluate.json")).unwrap())
                .unwrap();
        assert_eq!(sidecar["kind"], "heisenberg-delta");
        assert_relative_eq!(sidecar["stationary"].as_f64().unwrap(), 1.0, max_relative = 1e-12);
        assert_relative_eq!(sidecar["initial_slope"].as_f64().unwrap(), 4.0, max_relative = 1e-9);
        assert_relative_eq!(
            sidecar["initial_curvature"].as_f64().unwrap(),
            -6.0,
            max_relative = 1e-9
        );
    }

    #[test]
    fn evaluate_zero_model_emits_an_all_zero_column() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = parse_config(
            r#"{
  "model": {
    "kind": "oqho-raw",
    "A": [[0.0, 0.0], [0.0, 0.0]],
    "B": [[0.0, 0.0], [0.0, 0.0]],
    "F": [[1.0, 0.0], [0.0, 1.0]],
    "P": [[0.5, 0.0], [0.0, 0.5]]
  },
  "grid": {"start": 0.0, "stop": 1.0, "points": 5}
}"#,
        )
        .unwrap();
        cmd_evaluate(&cfg, None, 2, dir.path()).unwrap();
        let csv = fs::read_to_string(dir.path().join("trace.csv")).unwrap();
        for line in csv.lines().skip(1) {
            let value: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
            assert_eq!(value, 0.0);
        }
    }

    #[test]
    fn decoherence_dephasing_matches_the_closed_form_inversion() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = parse_config(dephasing_config()).unwrap();
        cmd_decoherence(&cfg, Some("0.18,0.6"), 2, dir.path()).unwrap();
        let doc: Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("decoherence.json")).unwrap())
                .unwrap();
        let records = doc["records"].as_array().unwrap();
        assert_eq!(records.len(), 2);
        // Solves (1 - e^{-2 tau})^2 / 2 = 0.18 with scale 1.
        let expected = -0.5 * (0.4f64).ln();
        assert_relative_eq!(records[0]["tau"].as_f64().unwrap(), expected, max_relative = 1e-8);
        assert_eq!(records[1]["tau"], "never-reached");
        // The dephasing curve starts flat, so no short-horizon approximation.
        assert!(records[0]["tau_hat"].is_null());
    }

    #[test]
    fn decoherence_damped_pair_reports_the_taylor_comparison() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = parse_config(&damped_pair_config()).unwrap();
        cmd_decoherence(&cfg, Some("0.1"), 1, dir.path()).unwrap();
        let doc: Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("decoherence.json")).unwrap())
                .unwrap();
        let rec = &doc["records"][0];
        // tau_hat = tau'(0) eps + tau''(0) eps^2 / 2 with tau'(0) = 1/4 and
        // tau''(0) = 6/64.
        assert_relative_eq!(rec["tau_hat"].as_f64().unwrap(), 0.02546875, max_relative = 1e-12);
        let tau = rec["tau"].as_f64().unwrap();
        let gap = rec["tau_gap"].as_f64().unwrap();
        assert_relative_eq!(gap, (tau - 0.02546875).abs(), max_relative = 1e-9);
        assert_eq!(rec["regular"], Value::Bool(true));
    }

    #[test]
    fn decoherence_exits_numerically_when_nothing_crosses_but_still_writes() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = parse_config(&damped_pair_config()).unwrap();
        let err = cmd_decoherence(&cfg, Some("3.5"), 1, dir.path()).unwrap_err();
        assert!(matches!(err, CliError::Numeric(_)));
        let doc: Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("decoherence.json")).unwrap())
                .unwrap();
        assert_eq!(doc["records"][0]["tau"], "never-reached");
    }

    #[test]
    fn discounted_oracle_gap_stays_small() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = parse_config(&damped_pair_config()).unwrap();
        cmd_discounted(&cfg, Some("0.1"), true, 1, dir.path()).unwrap();
        let doc: Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("discounted.json")).unwrap())
                .unwrap();
        let rec = &doc["records"][0];
        assert_eq!(rec["admissible"], Value::Bool(true));
        assert!(rec["relative_gap"].as_f64().unwrap() <= 1e-6);
    }

    #[test]
    fn discounted_static_model_is_zero_for_every_horizon() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = parse_config(
            r#"{
  "model": {
    "kind": "oqho-raw",
    "A": [[0.0, 0.0], [0.0, 0.0]],
    "B": [[0.0, 0.0], [0.0, 0.0]],
    "F": [[1.0, 0.0], [0.0, 1.0]],
    "P": [[0.5, 0.0], [0.0, 0.5]]
  },
  "horizons": [0.1, 1.0, 10.0]
}"#,
        )
        .unwrap();
        cmd_discounted(&cfg, None, false, 1, dir.path()).unwrap();
        let doc: Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("discounted.json")).unwrap())
                .unwrap();
        for rec in doc["records"].as_array().unwrap() {
            assert!(rec["value"].as_f64().unwrap().abs() < 1e-12);
        }
    }

    fn saddle_config() -> &'static str {
        r#"{
  "model": {
    "kind": "oqho-raw",
    "A": [[2.0, 0.0], [0.0, -2.0]],
    "B": [[0.0, 0.0], [0.0, 0.0]],
    "F": [[1.0, 0.0], [0.0, 1.0]],
    "P": [[0.5, 0.0], [0.0, 0.5]]
  }
}"#
    }

    #[test]
    fn discounted_flags_inadmissible_horizons() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = parse_config(saddle_config()).unwrap();
        // Spectral abscissa 2 caps the admissible horizon at 1/4.
        cmd_discounted(&cfg, Some("0.1,1.0"), false, 1, dir.path()).unwrap();
        let doc: Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("discounted.json")).unwrap())
                .unwrap();
        let records = doc["records"].as_array().unwrap();
        assert_eq!(records[0]["admissible"], Value::Bool(true));
        assert_eq!(records[1]["admissible"], Value::Bool(false));
        let max_t = records[1]["max_admissible"].as_f64().unwrap();
        assert_relative_eq!(max_t, 0.25, max_relative = 1e-6);

        let err = cmd_discounted(&cfg, Some("1.0"), false, 1, dir.path()).unwrap_err();
        assert!(matches!(err, CliError::Numeric(_)));
    }

    #[test]
    fn optimize_zero_directions_is_a_single_iteration_report() {
        let dir = tempfile::tempdir().unwrap();
        let text = r#"{
  "model": {
    "kind": "oqho-physical",
    "theta": [[0.0, 0.5], [-0.5, 0.0]],
    "R": [[0.0, 0.0], [0.0, 0.0]],
    "M": [[1.0, 0.0], [0.0, 1.0]],
    "F": [[1.0, 0.0], [0.0, 1.0]],
    "P": [[0.5, 0.0], [0.0, 0.5]]
  },
  "param_map": {
    "directions_R": [[[0.0, 0.0], [0.0, 0.0]]],
    "directions_M": [[[0.0, 0.0], [0.0, 0.0]]]
  },
  "optimizer": {"objective": "delta-sup-min", "horizon": 1.0}
}"#;
        let cfg = parse_config(text).unwrap();
        cmd_optimize(&cfg, dir.path()).unwrap();
        let report: Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap())
                .unwrap();
        assert_eq!(report["converged"], Value::Bool(true));
        assert_eq!(report["iterations"], Value::from(1u64));
        let trace = fs::read_to_string(dir.path().join("trace.csv")).unwrap();
        assert_eq!(trace.lines().count(), 2, "header plus one row:\n{trace}");
    }

    #[test]
    fn optimize_unknown_objective_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = parse_config(&symmetric_family_config(r#"{"objective": "banana"}"#)).unwrap();
        let err = cmd_optimize(&cfg, dir.path()).unwrap_err();
        let CliError::Config(msg) = err else { panic!("expected a config error") };
        assert!(msg.contains("banana"));
    }

    #[test]
    fn optimize_requires_a_physical_model() {
        let dir = tempfile::tempdir().unwrap();
        let mut text = damped_pair_config();
        text.truncate(text.rfind('}').unwrap());
        text.push_str(
            r#", "param_map": {"directions_R": [[[0.0, 0.0], [0.0, 0.0]]], "directions_M": [[[0.0, 0.0], [0.0, 0.0]]]},
 "optimizer": {"objective": "delta-sup-min", "horizon": 1.0}}"#,
        );
        let cfg = parse_config(&text).unwrap();
        let err = cmd_optimize(&cfg, dir.path()).unwrap_err();
        assert!(matches!(err, CliError::Config(_)));
    }

    #[test]
    fn optimize_tau_max_round_trips_through_the_emitted_model() {
        let dir = tempfile::tempdir().unwrap();
        let objective =
            r#"{"objective": "tau-max", "epsilon": 0.5, "p_init": [0.2, 0.1], "t_cap": 30.0}"#;
        let cfg = parse_config(&symmetric_family_config(objective)).unwrap();
        cmd_optimize(&cfg, dir.path()).unwrap();

        let report: Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap())
                .unwrap();
        assert_eq!(report["converged"], Value::Bool(true));
        assert_eq!(report["duality"]["stationary_ok"], Value::Bool(true));
        assert_eq!(report["duality"]["convex_ok"], Value::Bool(true));
        let final_value = report["final_value"].as_f64().unwrap();

        // Re-load the emitted model and recompute the objective from it.
        let cfg2 = load_config(&dir.path().join("optimized_model.json")).unwrap();
        let BuiltModel::Oqho(model) = build_model(&cfg2.model).unwrap() else {
            panic!("expected an oscillator");
        };
        let curve = DeltaCurve::new(&model).unwrap();
        let recomputed =
            decoherence::decoherence_time(&curve, 0.5, 30.0).unwrap().tau.finite().unwrap();
        assert!(
            (recomputed - final_value).abs() <= 1e-12 * final_value.abs(),
            "round-trip mismatch: {recomputed} vs {final_value}"
        );
    }

    #[test]
    fn optimize_failure_still_emits_the_partial_trace() {
        let dir = tempfile::tempdir().unwrap();
        // The deviation never climbs to 3.5 times the scale, so tau-max has
        // no crossing at the start and the optimizer reports a failure.
        let objective = r#"{"objective": "tau-max", "epsilon": 3.5}"#;
        let cfg = parse_config(&symmetric_family_config(objective)).unwrap();
        let err = cmd_optimize(&cfg, dir.path()).unwrap_err();
        assert!(matches!(err, CliError::Numeric(_)));
        let report: Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap())
                .unwrap();
        assert!(report["error"].as_str().unwrap().contains("no finite decoherence time"));
        let trace = fs::read_to_string(dir.path().join("trace.csv")).unwrap();
        assert_eq!(trace.lines().count(), 1, "header only:\n{trace}");
    }

    #[test]
    fn check_bound_holds_for_the_damped_pair() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = parse_config(&damped_pair_config()).unwrap();
        cmd_check_bound(&cfg, Some("0.05,0.1,0.2"), 2, dir.path()).unwrap();
        let doc: Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("bound_check.json")).unwrap())
                .unwrap();
        let records = doc["records"].as_array().unwrap();
        assert_eq!(records.len(), 3);
        for rec in records {
            assert_eq!(rec["evaluated"], Value::Bool(true));
            assert_eq!(rec["holds"], Value::Bool(true));
            assert!(rec["lhs"].as_f64().unwrap() <= rec["rhs"].as_f64().unwrap() * (1.0 + 1e-6));
        }
    }

    #[test]
    fn check_bound_zero_model_is_trivially_true() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = parse_config(
            r#"{
  "model": {
    "kind": "oqho-raw",
    "A": [[0.0, 0.0], [0.0, 0.0]],
    "B": [[0.0, 0.0], [0.0, 0.0]],
    "F": [[1.0, 0.0], [0.0, 1.0]],
    "P": [[0.5, 0.0], [0.0, 0.5]]
  }
}"#,
        )
        .unwrap();
        cmd_check_bound(&cfg, Some("0.1"), 1, dir.path()).unwrap();
        let doc: Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("bound_check.json")).unwrap())
                .unwrap();
        let rec = &doc["records"][0];
        assert_eq!(rec["lhs"].as_f64().unwrap(), 0.0);
        assert_eq!(rec["rhs"].as_f64().unwrap(), 0.0);
        assert_eq!(rec["holds"], Value::Bool(true));
    }

    #[test]
    fn check_bound_flags_inadmissible_horizons_without_evaluating() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = parse_config(saddle_config()).unwrap();
        cmd_check_bound(&cfg, Some("0.1,1.0"), 1, dir.path()).unwrap();
        let doc: Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("bound_check.json")).unwrap())
                .unwrap();
        let records = doc["records"].as_array().unwrap();
        assert_eq!(records[0]["evaluated"], Value::Bool(true));
        assert_eq!(records[1]["evaluated"], Value::Bool(false));
        assert!(records[1]["max_admissible"].as_f64().unwrap() <= 0.25 + 1e-9);
    }

    #[test]
    fn outputs_are_byte_stable_across_runs_and_job_counts() {
        let cfg = parse_config(&damped_pair_config()).unwrap();
        let mut blobs = Vec::new();
        for jobs in [1, 3] {
            let dir = tempfile::tempdir().unwrap();
            cmd_discounted(&cfg, Some("0.1,0.2,0.3"), true, jobs, dir.path()).unwrap();
            blobs.push(fs::read(dir.path().join("discounted.json")).unwrap());
        }
        assert_eq!(blobs[0], blobs[1], "output must not depend on the worker count");

        let cfg2 = parse_config(&damped_pair_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        cmd_discounted(&cfg2, Some("0.1,0.2,0.3"), true, 2, dir.path()).unwrap();
        assert_eq!(blobs[0], fs::read(dir.path().join("discounted.json")).unwrap());
    }
}

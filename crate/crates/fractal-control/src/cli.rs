//! Command-line experiment driver.
//!
//! Wires the library modules into named, reproducible experiments and emits
//! machine-readable results. Each run resolves its configuration from three
//! layers — built-in defaults, then an optional flat `key=value` config file,
//! then command-line flags — runs one experiment on a dedicated worker pool,
//! and writes two files: the result artifact (CSV or JSON) and a
//! `<out>.manifest.json` sidecar echoing the full configuration, the package
//! version, and the wall time. The manifest is written even when the
//! experiment itself fails, so every invocation leaves a record.
//!
//! Determinism contract: for a fixed configuration and seed the result
//! artifact is byte-identical across reruns and across `--workers` settings.
//! (The manifest is exempt — it records wall time.)
//!
//! Exit codes, mapped by [`run`]: `0` success, `1` numerical failure
//! (blow-ups, coverage failures, I/O), `2` usage errors (bad flags, malformed
//! config files, impossible levels or times).

use std::ffi::OsString;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use clap::{Parser, ValueEnum};
use num::{BigInt, BigRational, One, Zero};

use crate::control::{variation_report, ChannelRule, Constant, VariationBenchmark};
use crate::diffusion::{
    kernel_curve, kernel_min_time, martingale_panel, moment_scaling, singularity_profile,
    MartingalePanel, MomentScaling, StartLaw, WalkConfig,
};
use crate::dirichlet::{
    corner_harmonics, graph_energy, harmonic_extend, kusuoka_cell, kusuoka_density,
    CellMeasureTable, KusuokaDensity, EXACT_LEVEL_LIMIT,
};
use crate::error::{Error, Result};
use crate::gasket::{build_pregasket, PreGasket, Word};
use crate::regulator::{regulator_report, RegulatorConfig};
use crate::rng::{tag, worker_pool};
use crate::stats::{loglog_slope, Estimate};

/// Default approximation level `m`.
pub const DEFAULT_LEVEL: u32 = 6;
/// Default Monte Carlo path count.
pub const DEFAULT_PATHS: u64 = 100_000;
/// Default time horizon.
pub const DEFAULT_HORIZON: f64 = 1.0;
/// Default control price of the tracking example.
pub const DEFAULT_A: f64 = 1.0;
/// Default root seed.
pub const DEFAULT_SEED: u64 = 0;

/// The named experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Experiment {
    /// Vertex/edge/cell counts of every level up to `m` against the closed
    /// forms.
    GeometryAudit,
    /// Exact-rational audit of the harmonic midpoint rule, energy
    /// conservation, and the cell and vertex measures.
    Measures,
    /// On-diagonal transition-density decay at a fixed vertex with the fitted
    /// log-log slope.
    KernelSlope,
    /// Small-window moments of the quadratic variation plus the martingale
    /// identity panel.
    BracketMoments,
    /// How unevenly the quadratic variation spreads its mass across equal
    /// time bins.
    Singularity,
    /// Decay orders of the first- and second-order expansions under spike
    /// perturbations of a benchmark control system.
    VariationOrders,
    /// The distance-tracking example end to end: value slope, closed-loop
    /// run, adjoint audits, and the policy tournament.
    Regulator,
}

impl Experiment {
    /// Kebab-case name, as used on the command line and in file names.
    pub fn name(self) -> &'static str {
        match self {
            Experiment::GeometryAudit => "geometry-audit",
            Experiment::Measures => "measures",
            Experiment::KernelSlope => "kernel-slope",
            Experiment::BracketMoments => "bracket-moments",
            Experiment::Singularity => "singularity",
            Experiment::VariationOrders => "variation-orders",
            Experiment::Regulator => "regulator",
        }
    }

    fn from_name(s: &str) -> Option<Self> {
        [
            Experiment::GeometryAudit,
            Experiment::Measures,
            Experiment::KernelSlope,
            Experiment::BracketMoments,
            Experiment::Singularity,
            Experiment::VariationOrders,
            Experiment::Regulator,
        ]
        .into_iter()
        .find(|e| e.name() == s)
    }

    /// The format used when `--format` is not given: the regulator report is
    /// a nested document, everything else is tabular.
    fn natural_format(self) -> Format {
        match self {
            Experiment::Regulator => Format::Json,
            _ => Format::Csv,
        }
    }
}

/// Result artifact encodings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    pub fn ext(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }

    fn from_name(s: &str) -> Option<Self> {
        match s {
            "csv" => Some(Format::Csv),
            "json" => Some(Format::Json),
            _ => None,
        }
    }
}

/// Reproducible Monte Carlo experiments on level-`m` gasket walks.
#[derive(Debug, Parser)]
#[command(name = "fractal-control", version, about)]
struct Args {
    /// Experiment to run (required here or in the config file).
    #[arg(long, value_enum, value_name = "NAME")]
    experiment: Option<Experiment>,

    /// Flat `key=value` config file; flags given here override its entries.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Approximation level m of the walk [default: 6].
    #[arg(long, value_name = "M")]
    level: Option<u32>,

    /// Monte Carlo path count [default: 100000].
    #[arg(long, value_name = "N")]
    paths: Option<u64>,

    /// Root RNG seed [default: 0].
    #[arg(long, value_name = "SEED")]
    seed: Option<u64>,

    /// Time horizon T [default: 1].
    #[arg(long, value_name = "T")]
    horizon: Option<f64>,

    /// Control price of the tracking example [default: 1].
    #[arg(long, value_name = "A")]
    a: Option<f64>,

    /// Worker threads [default: available parallelism].
    #[arg(long, value_name = "K")]
    workers: Option<usize>,

    /// Output file [default: <experiment>.<extension>].
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,

    /// Output format [default: json for regulator, csv otherwise].
    #[arg(long, value_enum, value_name = "FMT")]
    format: Option<Format>,
}

/// Values read from a config file; same knobs as the flags.
#[derive(Debug, Default)]
struct FileValues {
    experiment: Option<Experiment>,
    level: Option<u32>,
    paths: Option<u64>,
    seed: Option<u64>,
    horizon: Option<f64>,
    a: Option<f64>,
    workers: Option<usize>,
    out: Option<PathBuf>,
    format: Option<Format>,
}

/// A fully resolved run: defaults, then config file, then flags.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub level: u32,
    pub paths: u64,
    pub seed: u64,
    pub horizon: f64,
    pub a: f64,
    pub workers: usize,
    pub out: PathBuf,
    pub format: Format,
}

fn parse_value<T: FromStr>(path: &Path, lineno: usize, key: &str, raw: &str) -> Result<T>
where
    T::Err: Display,
{
    raw.parse().map_err(|e| {
        Error::Config(format!(
            "config file {}: key `{key}` on line {lineno}: invalid value {raw:?}: {e}",
            path.display()
        ))
    })
}

fn parse_config_file(path: &Path) -> Result<FileValues> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("config file {}: {e}", path.display())))?;
    let mut fv = FileValues::default();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let Some((key, value)) = trimmed.split_once('=') else {
            return Err(Error::Config(format!(
                "config file {}: line {lineno} is not `key=value`: {trimmed:?}",
                path.display()
            )));
        };
        let (key, value) = (key.trim(), value.trim());
        match key {
            "experiment" => {
                fv.experiment = Some(Experiment::from_name(value).ok_or_else(|| {
                    Error::Config(format!(
                        "config file {}: key `experiment` on line {lineno}: unknown experiment \
                         {value:?}",
                        path.display()
                    ))
                })?);
            }
            "level" => fv.level = Some(parse_value(path, lineno, key, value)?),
            "paths" => fv.paths = Some(parse_value(path, lineno, key, value)?),
            "seed" => fv.seed = Some(parse_value(path, lineno, key, value)?),
            "horizon" => fv.horizon = Some(parse_value(path, lineno, key, value)?),
            "a" => fv.a = Some(parse_value(path, lineno, key, value)?),
            "workers" => fv.workers = Some(parse_value(path, lineno, key, value)?),
            "out" => fv.out = Some(PathBuf::from(value)),
            "format" => {
                fv.format = Some(Format::from_name(value).ok_or_else(|| {
                    Error::Config(format!(
                        "config file {}: key `format` on line {lineno}: expected `csv` or \
                         `json`, got {value:?}",
                        path.display()
                    ))
                })?);
            }
            other => {
                return Err(Error::Config(format!(
                    "config file {}: unknown key `{other}` on line {lineno}",
                    path.display()
                )));
            }
        }
    }
    Ok(fv)
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map(usize::from).unwrap_or(1)
}

/// Merge the three layers and validate the result.
fn resolve(args: Args) -> Result<ExperimentConfig> {
    let file = match &args.config {
        Some(path) => parse_config_file(path)?,
        None => FileValues::default(),
    };
    let experiment = args.experiment.or(file.experiment).ok_or_else(|| {
        Error::Config(
            "no experiment selected: pass --experiment or set `experiment=` in the config file"
                .into(),
        )
    })?;
    let level = args.level.or(file.level).unwrap_or(DEFAULT_LEVEL);
    let paths = args.paths.or(file.paths).unwrap_or(DEFAULT_PATHS);
    let seed = args.seed.or(file.seed).unwrap_or(DEFAULT_SEED);
    let horizon = args.horizon.or(file.horizon).unwrap_or(DEFAULT_HORIZON);
    let a = args.a.or(file.a).unwrap_or(DEFAULT_A);
    let workers = args.workers.or(file.workers).unwrap_or_else(default_workers);
    let format = args.format.or(file.format).unwrap_or_else(|| experiment.natural_format());
    let out = args
        .out
        .or(file.out)
        .unwrap_or_else(|| PathBuf::from(format!("{}.{}", experiment.name(), format.ext())));

    if level == 0 {
        return Err(Error::Config("level must be at least 1".into()));
    }
    if paths == 0 {
        return Err(Error::Config("paths must be at least 1".into()));
    }
    if !(horizon.is_finite() && horizon > 0.0) {
        return Err(Error::Config(format!("horizon must be positive and finite, got {horizon}")));
    }
    if !(a.is_finite() && a > 0.0) {
        return Err(Error::Config(format!("a must be positive and finite, got {a}")));
    }
    if workers == 0 {
        return Err(Error::Config("workers must be at least 1".into()));
    }
    if experiment == Experiment::Regulator && (horizon - 1.0).abs() > 1e-12 {
        return Err(Error::Config(
            "the tracking example is posed on the unit horizon; leave --horizon at 1".into(),
        ));
    }
    Ok(ExperimentConfig { experiment, level, paths, seed, horizon, a, workers, out, format })
}

/// Parse a full argument vector (including the program name) into a resolved
/// configuration. Command-line syntax errors surface as [`Error::Config`].
pub fn parse_config<I, T>(args: I) -> Result<ExperimentConfig>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let parsed =
        Args::try_parse_from(args).map_err(|e| Error::Config(e.render().to_string()))?;
    resolve(parsed)
}

/// Entry point for the binary: parse, run, and map the outcome to an exit
/// code (`0` success, `1` numerical failure, `2` usage error). Help and
/// version requests print to stdout and exit `0`.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let parsed = match Args::try_parse_from(args) {
        Ok(parsed) => parsed,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let cfg = match resolve(parsed) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    match run_experiment(&cfg) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                2
            } else {
                1
            }
        }
    }
}

/// Sidecar path: `<out>.manifest.json`.
pub fn manifest_path(out: &Path) -> PathBuf {
    PathBuf::from(format!("{}.manifest.json", out.display()))
}

#[derive(serde::Serialize)]
struct Manifest<'a> {
    experiment: &'static str,
    level: u32,
    paths: u64,
    seed: u64,
    horizon: f64,
    a: f64,
    workers: usize,
    format: &'static str,
    out: String,
    package: &'static str,
    version: &'static str,
    status: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    wall_seconds: f64,
}

fn to_json<T: serde::Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)
        .map_err(|e| Error::InvalidArgument(format!("serialization failed: {e}")))?;
    s.push('\n');
    Ok(s)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    Ok(())
}

/// Run one resolved experiment: install the worker pool, produce the
/// artifact, and write the manifest sidecar (always) and the result file
/// (on success).
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<()> {
    let start = Instant::now();
    let pool = worker_pool(cfg.workers);
    let produced = pool.install(|| produce(cfg));
    let wall_seconds = start.elapsed().as_secs_f64();

    let (status, error) = match &produced {
        Ok(_) => ("ok", None),
        Err(e) => ("error", Some(e.to_string())),
    };
    let manifest = Manifest {
        experiment: cfg.experiment.name(),
        level: cfg.level,
        paths: cfg.paths,
        seed: cfg.seed,
        horizon: cfg.horizon,
        a: cfg.a,
        workers: cfg.workers,
        format: cfg.format.ext(),
        out: cfg.out.display().to_string(),
        package: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        status,
        error,
        wall_seconds,
    };
    ensure_parent(&cfg.out)?;
    fs::write(manifest_path(&cfg.out), to_json(&manifest)?)?;

    let body = produced?;
    fs::write(&cfg.out, body)?;
    Ok(())
}

fn build_walk(cfg: &ExperimentConfig) -> (WalkConfig, Result<(PreGasket, KusuokaDensity)>) {
    let wc = WalkConfig {
        level: cfg.level,
        horizon: cfg.horizon,
        start: StartLaw::Uniform,
        seed: cfg.seed,
        paths: cfg.paths,
    };
    let built = build_pregasket(cfg.level).and_then(|g| {
        let d = kusuoka_density(&g)?;
        Ok((g, d))
    });
    (wc, built)
}

fn produce(cfg: &ExperimentConfig) -> Result<String> {
    match cfg.experiment {
        Experiment::GeometryAudit => geometry_audit(cfg),
        Experiment::Measures => measures(cfg),
        Experiment::KernelSlope => kernel_slope(cfg),
        Experiment::BracketMoments => bracket_moments(cfg),
        Experiment::Singularity => singularity(cfg),
        Experiment::VariationOrders => variation_orders(cfg),
        Experiment::Regulator => regulator(cfg),
    }
}

// ---------------------------------------------------------------------------
// geometry-audit

#[derive(serde::Serialize)]
struct GeometryRow {
    level: u32,
    vertices: usize,
    edges: usize,
    cells: usize,
    vertices_expected: u64,
    edges_expected: u64,
    cells_expected: u64,
    matches: bool,
}

#[derive(serde::Serialize)]
struct GeometryAudit {
    rows: Vec<GeometryRow>,
    all_match: bool,
}

fn geometry_audit(cfg: &ExperimentConfig) -> Result<String> {
    let mut rows = Vec::new();
    for level in 1..=cfg.level {
        let g = build_pregasket(level)?;
        let pow: u64 = 3u64.pow(level);
        let vertices_expected = (3 * pow + 3) / 2;
        let edges_expected = 3 * pow;
        let cells_expected = pow;
        let matches = g.vertex_count() as u64 == vertices_expected
            && g.edge_count() as u64 == edges_expected
            && g.cell_count() as u64 == cells_expected;
        rows.push(GeometryRow {
            level,
            vertices: g.vertex_count(),
            edges: g.edge_count(),
            cells: g.cell_count(),
            vertices_expected,
            edges_expected,
            cells_expected,
            matches,
        });
    }
    let audit = GeometryAudit { all_match: rows.iter().all(|r| r.matches), rows };
    match cfg.format {
        Format::Json => to_json(&audit),
        Format::Csv => {
            let mut out = String::from(
                "level,vertices,edges,cells,vertices_expected,edges_expected,cells_expected,\
                 matches\n",
            );
            for r in &audit.rows {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{}\n",
                    r.level,
                    r.vertices,
                    r.edges,
                    r.cells,
                    r.vertices_expected,
                    r.edges_expected,
                    r.cells_expected,
                    r.matches
                ));
            }
            Ok(out)
        }
    }
}

// ---------------------------------------------------------------------------
// measures

#[derive(serde::Serialize)]
struct MeasureRow {
    quantity: String,
    value: String,
    expected: String,
    exact: bool,
}

#[derive(serde::Serialize)]
struct MeasureAudit {
    exact_level: u32,
    rows: Vec<MeasureRow>,
    all_exact: bool,
}

fn frac(r: &BigRational) -> String {
    format!("{}/{}", r.numer(), r.denom())
}

fn rational(numer: i64, denom: i64) -> BigRational {
    BigRational::new(BigInt::from(numer), BigInt::from(denom))
}

/// Exact-rational audit rows: the `1/5 – 2/5` midpoint rule, energy
/// conservation of the corner harmonics under refinement, the level-1 and
/// level-2 cell masses, and the per-vertex mass totals.
fn measures(cfg: &ExperimentConfig) -> Result<String> {
    let exact_level = cfg.level.min(EXACT_LEVEL_LIMIT);
    let mut rows: Vec<MeasureRow> = Vec::new();
    let mut push = |quantity: String, value: &BigRational, expected: &BigRational| {
        rows.push(MeasureRow {
            quantity,
            value: frac(value),
            expected: frac(expected),
            exact: value == expected,
        });
    };

    // The midpoint rule: extending corner values (1, 0, 0) one level puts
    // 2/5, 2/5, 1/5 on the three edge midpoints (sorted descending).
    let h1 = harmonic_extend(&[BigRational::one(), BigRational::zero(), BigRational::zero()], 1)?;
    let g1 = build_pregasket(1)?;
    let vals = h1.values(1)?;
    let mut mids: Vec<BigRational> = (0..g1.vertex_count() as u32)
        .filter(|&v| !g1.is_corner(v))
        .map(|v| vals[v as usize].clone())
        .collect();
    mids.sort();
    mids.reverse();
    for (k, (mid, expected)) in
        mids.iter().zip([rational(2, 5), rational(2, 5), rational(1, 5)]).enumerate()
    {
        push(format!("midpoint_{}", k + 1), mid, &expected);
    }

    // Energy conservation: each corner harmonic keeps graph energy 2 at
    // every refinement depth.
    let two = rational(2, 1);
    let hs = corner_harmonics(exact_level)?;
    for level in 0..=exact_level {
        let g = build_pregasket(level)?;
        for (i, h) in hs.iter().enumerate() {
            let e = graph_energy(&g, h.values(level)?)?;
            push(format!("energy_h{}_level_{level}", i + 1), &e, &two);
        }
    }

    // Cell masses: the three level-1 cells carry 2/3 each; at level 2 the
    // corner cells carry 82/225 and the rest 34/225; totals are 2 at both
    // levels.
    let two_thirds = rational(2, 3);
    for d in 1..=3u8 {
        let w = Word::from_digits(&[d])?;
        push(format!("cell_mass_{w}"), &kusuoka_cell(&w)?, &two_thirds);
    }
    if exact_level >= 2 {
        let mut total = BigRational::zero();
        for d0 in 1..=3u8 {
            for d1 in 1..=3u8 {
                let w = Word::from_digits(&[d0, d1])?;
                let mass = kusuoka_cell(&w)?;
                let expected = if d0 == d1 { rational(82, 225) } else { rational(34, 225) };
                push(format!("cell_mass_{w}"), &mass, &expected);
                total += mass;
            }
        }
        push("cell_mass_total_level_2".into(), &total, &two);
    }

    // Vertex tables at the deepest exact level: the reference masses sum to
    // one and the density-weighted masses to two.
    let table = CellMeasureTable::build(exact_level)?;
    let mut nu_total = BigRational::zero();
    let mut mass_total = BigRational::zero();
    for v in 0..table.vertex_count() as u32 {
        nu_total += table.vertex_nu(v);
        mass_total += table.vertex_nu(v) * table.vertex_rho(v);
    }
    push(format!("vertex_nu_total_level_{exact_level}"), &nu_total, &BigRational::one());
    push(format!("vertex_mass_total_level_{exact_level}"), &mass_total, &two);

    let audit = MeasureAudit { exact_level, all_exact: rows.iter().all(|r| r.exact), rows };
    match cfg.format {
        Format::Json => to_json(&audit),
        Format::Csv => {
            let mut out = String::from("quantity,value,expected,exact\n");
            for r in &audit.rows {
                out.push_str(&format!("{},{},{},{}\n", r.quantity, r.value, r.expected, r.exact));
            }
            Ok(out)
        }
    }
}

// ---------------------------------------------------------------------------
// kernel-slope

#[derive(serde::Serialize)]
struct KernelSlope {
    x: u32,
    times: Vec<f64>,
    p_hat: Vec<Estimate>,
    slope: f64,
}

/// Number of log-spaced sample times for the kernel decay fit.
const KERNEL_TIMES: usize = 8;

fn kernel_slope(cfg: &ExperimentConfig) -> Result<String> {
    let (wc, built) = build_walk(cfg);
    let (g, d) = built?;
    let t_min = kernel_min_time(cfg.level);
    let t_max = 0.1 * cfg.horizon;
    if t_min >= t_max {
        return Err(Error::InvalidArgument(format!(
            "level {} resolves times only above {t_min}, but the decay window ends at {t_max}; \
             raise --level",
            cfg.level
        )));
    }
    let x = (0..g.vertex_count() as u32)
        .find(|&v| !g.is_corner(v))
        .expect("every level >= 1 graph has non-corner vertices");
    let ratio = (t_max / t_min).powf(1.0 / (KERNEL_TIMES as f64 - 1.0));
    let times: Vec<f64> = (0..KERNEL_TIMES).map(|j| t_min * ratio.powi(j as i32)).collect();
    let p_hat = kernel_curve(&g, &d, &wc, x, &times, tag::KERNEL)?;
    if let Some(bad) = p_hat.iter().position(|e| e.value <= 0.0 || e.value.is_nan()) {
        return Err(Error::Coverage(format!(
            "no returns to vertex {x} by time {}; increase --paths (currently {})",
            times[bad], cfg.paths
        )));
    }
    let values: Vec<f64> = p_hat.iter().map(|e| e.value).collect();
    let slope = loglog_slope(&times, &values);
    let report = KernelSlope { x, times, p_hat, slope };
    match cfg.format {
        Format::Json => to_json(&report),
        Format::Csv => {
            let mut out = String::from("t,p_hat,stderr\n");
            for (t, e) in report.times.iter().zip(&report.p_hat) {
                out.push_str(&format!("{t},{},{}\n", e.value, e.stderr));
            }
            out.push_str(&format!("slope,{},\n", report.slope));
            Ok(out)
        }
    }
}

// ---------------------------------------------------------------------------
// bracket-moments

#[derive(serde::Serialize)]
struct BracketMoments {
    scaling: MomentScaling,
    panel: MartingalePanel,
}

/// Dyadic window exponents for the small-window moment fit: widths
/// `horizon * 2^-j`.
const MOMENT_WINDOW_EXPONENTS: std::ops::RangeInclusive<i32> = 2..=7;

fn bracket_moments(cfg: &ExperimentConfig) -> Result<String> {
    let (wc, built) = build_walk(cfg);
    let (g, d) = built?;
    let epsilons: Vec<f64> =
        MOMENT_WINDOW_EXPONENTS.map(|j| cfg.horizon * 0.5f64.powi(j)).collect();
    let scaling = moment_scaling(&g, &d, &wc, &epsilons, tag::MOMENT)?;
    let times: Vec<f64> = [0.25, 0.5, 1.0].iter().map(|f| f * cfg.horizon).collect();
    let panel = martingale_panel(&g, &d, &wc, &times, tag::WALK)?;
    let report = BracketMoments { scaling, panel };
    match cfg.format {
        Format::Json => to_json(&report),
        Format::Csv => {
            let mut out = String::from("series,x,value,stderr\n");
            let s = &report.scaling;
            for (eps, e) in s.epsilons.iter().zip(&s.first) {
                out.push_str(&format!("first_moment,{eps},{},{}\n", e.value, e.stderr));
            }
            for (eps, e) in s.epsilons.iter().zip(&s.second) {
                out.push_str(&format!("second_moment,{eps},{},{}\n", e.value, e.stderr));
            }
            let p = &report.panel;
            for (t, e) in p.times.iter().zip(&p.w_mean) {
                out.push_str(&format!("w_mean,{t},{},{}\n", e.value, e.stderr));
            }
            for (t, e) in p.times.iter().zip(&p.w_square_minus_bracket) {
                out.push_str(&format!(
                    "w_square_minus_bracket,{t},{},{}\n",
                    e.value, e.stderr
                ));
            }
            for (t, e) in p.times.iter().zip(&p.bracket_mean) {
                out.push_str(&format!("bracket_mean,{t},{},{}\n", e.value, e.stderr));
            }
            out.push_str(&format!("slope_first,,{},\n", s.slope_first));
            out.push_str(&format!("slope_second,,{},\n", s.slope_second));
            out.push_str(&format!("ratio_slope,,{},\n", s.ratio_slope));
            Ok(out)
        }
    }
}

// ---------------------------------------------------------------------------
// singularity

fn singularity(cfg: &ExperimentConfig) -> Result<String> {
    let (wc, built) = build_walk(cfg);
    let (g, d) = built?;
    let bins = 5usize.pow(cfg.level.min(3));
    let profile = singularity_profile(&g, &d, &wc, bins, tag::SINGULARITY)?;
    match cfg.format {
        Format::Json => to_json(&profile),
        Format::Csv => {
            let mut out = String::from("series,x,value,stderr\n");
            for (rank, share) in profile.mean_sorted_share.iter().enumerate() {
                out.push_str(&format!("sorted_share,{},{share},\n", rank + 1));
            }
            out.push_str(&format!(
                "top_decile,,{},{}\n",
                profile.top_decile.value, profile.top_decile.stderr
            ));
            Ok(out)
        }
    }
}

// ---------------------------------------------------------------------------
// variation-orders

/// Dyadic spike-width exponents: widths `horizon * 2^-j`, keeping every
/// spike window inside `[0.25 * horizon, 0.5 * horizon)`.
const SPIKE_WIDTH_EXPONENTS: std::ops::RangeInclusive<i32> = 2..=6;

fn variation_orders(cfg: &ExperimentConfig) -> Result<String> {
    let (wc, built) = build_walk(cfg);
    let (g, d) = built?;
    let epsilons: Vec<f64> =
        SPIKE_WIDTH_EXPONENTS.map(|j| cfg.horizon * 0.5f64.powi(j)).collect();
    let spike = Constant(VariationBenchmark::SPIKE_VALUE);
    let report = variation_report(
        &VariationBenchmark,
        &Constant(0.0),
        &spike,
        &spike,
        ChannelRule::Alternate,
        0.25 * cfg.horizon,
        &epsilons,
        2,
        1.0,
        &g,
        &d,
        &wc,
        tag::VARIATION,
        VariationBenchmark::X0,
    )?;
    match cfg.format {
        Format::Json => to_json(&report),
        Format::Csv => {
            let mut out = String::from("series,x,value,stderr\n");
            let series: [(&str, &[Estimate]); 5] = [
                ("state_gap", &report.state_gap),
                ("first_order", &report.first_order),
                ("after_first", &report.after_first),
                ("after_second", &report.after_second),
                ("window_mass", &report.window_bracket_mass),
            ];
            for (name, estimates) in series {
                for (eps, e) in report.epsilons.iter().zip(estimates) {
                    out.push_str(&format!("{name},{eps},{},{}\n", e.value, e.stderr));
                }
            }
            for (eps, corr) in report.epsilons.iter().zip(&report.terminal_correlation) {
                out.push_str(&format!("terminal_correlation,{eps},{corr},\n"));
            }
            out.push_str(&format!("slope_state_gap,,{},\n", report.slope_state_gap));
            out.push_str(&format!("slope_after_first,,{},\n", report.slope_after_first));
            out.push_str(&format!("slope_after_second,,{},\n", report.slope_after_second));
            out.push_str(&format!(
                "slope_state_gap_vs_mass,,{},\n",
                report.slope_state_gap_vs_mass
            ));
            out.push_str(&format!(
                "slope_after_first_vs_mass,,{},\n",
                report.slope_after_first_vs_mass
            ));
            out.push_str(&format!(
                "slope_after_second_vs_mass,,{},\n",
                report.slope_after_second_vs_mass
            ));
            Ok(out)
        }
    }
}

// ---------------------------------------------------------------------------
// regulator

fn regulator(cfg: &ExperimentConfig) -> Result<String> {
    let g = build_pregasket(cfg.level)?;
    let d = kusuoka_density(&g)?;
    let rc = RegulatorConfig::new(cfg.a, cfg.level, cfg.paths, cfg.seed);
    let report = regulator_report(&g, &d, &rc)?;
    match cfg.format {
        Format::Json => to_json(&report),
        Format::Csv => {
            let mut out = String::from("key,value,stderr\n");
            out.push_str(&format!("a,{},\n", report.a));
            out.push_str(&format!("level,{},\n", report.level));
            out.push_str(&format!("paths,{},\n", report.paths));
            out.push_str(&format!("seed,{},\n", report.seed));
            out.push_str(&format!("theta0,{},{}\n", report.theta0.value, report.theta0.stderr));
            out.push_str(&format!("theta0_recursion,{},\n", report.theta0_recursion));
            out.push_str(&format!("J,{},{}\n", report.cost.value, report.cost.stderr));
            for (name, e) in &report.costs {
                out.push_str(&format!("cost.{name},{},{}\n", e.value, e.stderr));
            }
            for (name, e) in &report.gaps {
                out.push_str(&format!("gap.{name},{},{}\n", e.value, e.stderr));
            }
            for (name, ok) in &report.checks {
                out.push_str(&format!("check.{name},{ok},\n"));
            }
            Ok(out)
        }
    }
}

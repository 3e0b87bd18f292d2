//! Command-line front end: flat key=value configuration, subcommand dispatch,
//! and exit-status policy (0 pass, 2 threshold failure, 1 error).

use std::collections::BTreeMap;
use std::path::{Path as FsPath, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::error::{LabError, Result};
use crate::experiments::{run_experiment, ExperimentConfig, ExperimentReport, Golden, SCHEMA_VERSION};
use crate::geometry::{build_geometry, closed_ball, FiniteSet, LatticePoint, Shape};
use crate::interlacements::{restrict, SoupSampler};
use crate::potential::{capacity, CapacityMethod, GreenTable};
use crate::walk::stream_rng;

/// Environment variable holding the default output directory.
pub const OUT_DIR_ENV: &str = "SLT_LAB_OUT_DIR";

/// Configuration keys, in documentation order.
pub const CONFIG_KEYS: &[&str] = &[
    "dim",
    "shape",
    "r",
    "s",
    "u",
    "eps",
    "u_prime",
    "delta",
    "reps",
    "seed",
    "r_big_factor",
    "c4",
    "mc_tol",
    "solver_tol",
    "max_bridge_attempts",
    "workers",
    "out_dir",
    "b_exponent",
];

/// Golden thresholds shipped with the binary, by experiment name.
pub const EMBEDDED_GOLDEN: &[(&str, &str)] = &[
    ("concentration", include_str!("../golden/concentration.json")),
    ("sandwich", include_str!("../golden/sandwich.json")),
    ("one-sided", include_str!("../golden/one-sided.json")),
];

fn version() -> &'static str {
    concat!(env!("CARGO_PKG_VERSION"), " (golden schema ", "1", ")")
}

#[derive(Parser, Debug)]
#[command(name = "slt-lab", version = version(), about = "Soft local times and random interlacements on Z^d")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Describe the set triple A1 ⊂ V ⊂ A2 as JSON.
    Geometry {
        #[arg(long, default_value = "ball")]
        shape: String,
        #[arg(long, default_value_t = 12)]
        r: i32,
        #[arg(long, default_value_t = 4)]
        s: i32,
        #[arg(long, default_value_t = 3)]
        dim: usize,
        /// Include the full point lists.
        #[arg(long)]
        points: bool,
    },
    /// Evaluate the lattice Green function G(0, x).
    Green {
        /// Comma-separated coordinates, e.g. 1,0,0.
        #[arg(long)]
        offset: String,
    },
    /// Capacity of a point list or a closed ball.
    Capacity {
        /// Points separated by ';', coordinates by ','.
        #[arg(long, conflicts_with = "shape")]
        points: Option<String>,
        /// `ball` (closed, of the given radius).
        #[arg(long)]
        shape: Option<String>,
        #[arg(long, default_value_t = 2.0)]
        radius: f64,
        #[arg(long, default_value_t = 3)]
        dim: usize,
        /// `solve` or `mc`.
        #[arg(long, default_value = "solve")]
        method: String,
        #[arg(long, default_value_t = 20_000)]
        walks: u64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Sample the occupied points of a closed ball at level u.
    Simulate {
        #[arg(long, default_value = "ball")]
        shape: String,
        #[arg(long, default_value_t = 3.0)]
        radius: f64,
        #[arg(long, default_value_t = 3)]
        dim: usize,
        #[arg(long, default_value_t = 1.0)]
        u: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 4.0)]
        r_big_factor: f64,
    },
    /// Run a named experiment and write CSV/JSON into the output directory.
    Experiment(ExperimentArgs),
}

#[derive(Args, Debug, Default)]
pub struct ExperimentArgs {
    pub name: String,
    /// key=value file; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Golden threshold file (default: the embedded one, when it applies).
    #[arg(long)]
    pub golden: Option<PathBuf>,
    /// Extra key=value overrides.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub dim: Option<String>,
    #[arg(long)]
    pub shape: Option<String>,
    #[arg(long)]
    pub r: Option<String>,
    #[arg(long)]
    pub s: Option<String>,
    #[arg(long)]
    pub u: Option<String>,
    #[arg(long)]
    pub eps: Option<String>,
    #[arg(long)]
    pub u_prime: Option<String>,
    #[arg(long)]
    pub delta: Option<String>,
    #[arg(long)]
    pub reps: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
    #[arg(long)]
    pub r_big_factor: Option<String>,
    #[arg(long)]
    pub c4: Option<String>,
    #[arg(long)]
    pub workers: Option<String>,
    #[arg(long)]
    pub out_dir: Option<String>,
}

impl ExperimentArgs {
    fn flag_pairs(&self) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| LabError::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        let named = [
            ("dim", &self.dim),
            ("shape", &self.shape),
            ("r", &self.r),
            ("s", &self.s),
            ("u", &self.u),
            ("eps", &self.eps),
            ("u_prime", &self.u_prime),
            ("delta", &self.delta),
            ("reps", &self.reps),
            ("seed", &self.seed),
            ("r_big_factor", &self.r_big_factor),
            ("c4", &self.c4),
            ("workers", &self.workers),
            ("out_dir", &self.out_dir),
        ];
        for (k, v) in named {
            if let Some(v) = v {
                out.push((k.to_string(), v.clone()));
            }
        }
        Ok(out)
    }
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| LabError::Config(format!("line {}: expected key = value, got {line:?}", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn parse_value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| LabError::Config(format!("cannot parse {key} = {v:?}")))
}

/// Applies key/value pairs in order onto `cfg`.
pub fn apply_pairs(cfg: &mut ExperimentConfig, pairs: &[(String, String)]) -> Result<()> {
    for (k, v) in pairs {
        match k.as_str() {
            "dim" => cfg.dim = parse_value(k, v)?,
            "shape" => cfg.shape = v.parse()?,
            "r" => cfg.r = parse_value(k, v)?,
            "s" => cfg.s = parse_value(k, v)?,
            "u" => cfg.u = parse_value(k, v)?,
            "eps" => cfg.eps = parse_value(k, v)?,
            "u_prime" => cfg.u_prime = if v == "none" { None } else { Some(parse_value(k, v)?) },
            "delta" => cfg.delta = parse_value(k, v)?,
            "reps" => cfg.reps = parse_value(k, v)?,
            "seed" => cfg.seed = parse_value(k, v)?,
            "r_big_factor" => cfg.r_big_factor = parse_value(k, v)?,
            "c4" => cfg.c4 = parse_value(k, v)?,
            "mc_tol" => cfg.mc_tol = parse_value(k, v)?,
            "solver_tol" => cfg.solver_tol = parse_value(k, v)?,
            "max_bridge_attempts" => cfg.max_bridge_attempts = parse_value(k, v)?,
            "workers" => cfg.workers = parse_value(k, v)?,
            "out_dir" => cfg.out_dir = PathBuf::from(v),
            "b_exponent" => cfg.b_exponent = if v == "none" { None } else { Some(parse_value(k, v)?) },
            other => {
                return Err(LabError::Config(format!(
                    "unknown configuration key {other:?}; known keys: {}",
                    CONFIG_KEYS.join(", ")
                )))
            }
        }
    }
    Ok(())
}

/// Builds a validated configuration: defaults, then the environment's
/// out_dir, then the file, then the flags.
pub fn parse_config(file: Option<&FsPath>, flags: &[(String, String)]) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    if let Ok(dir) = std::env::var(OUT_DIR_ENV) {
        if !dir.is_empty() {
            cfg.out_dir = PathBuf::from(dir);
        }
    }
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LabError::Config(format!("cannot read {}: {e}", path.display())))?;
        apply_pairs(&mut cfg, &parse_pairs(&text)?)?;
    }
    apply_pairs(&mut cfg, flags)?;
    cfg.validate()?;
    Ok(cfg)
}

/// The configuration as key → canonical string (used to match golden files).
pub fn config_pairs(cfg: &ExperimentConfig) -> BTreeMap<&'static str, String> {
    let shape = match cfg.shape {
        Shape::Ball => "ball",
        Shape::SmoothedCube => "smoothed_cube",
    };
    let opt = |x: Option<f64>| x.map_or("none".to_string(), |v| v.to_string());
    BTreeMap::from([
        ("dim", cfg.dim.to_string()),
        ("shape", shape.to_string()),
        ("r", cfg.r.to_string()),
        ("s", cfg.s.to_string()),
        ("u", cfg.u.to_string()),
        ("eps", cfg.eps.to_string()),
        ("u_prime", opt(cfg.u_prime)),
        ("delta", cfg.delta.to_string()),
        ("reps", cfg.reps.to_string()),
        ("seed", cfg.seed.to_string()),
        ("r_big_factor", cfg.r_big_factor.to_string()),
        ("c4", cfg.c4.to_string()),
        ("mc_tol", cfg.mc_tol.to_string()),
        ("solver_tol", cfg.solver_tol.to_string()),
        ("max_bridge_attempts", cfg.max_bridge_attempts.to_string()),
        ("workers", cfg.workers.to_string()),
        ("out_dir", cfg.out_dir.display().to_string()),
        ("b_exponent", opt(cfg.b_exponent)),
    ])
}

/// The embedded golden file of an experiment, if any.
pub fn embedded_golden(name: &str) -> Result<Option<Golden>> {
    match EMBEDDED_GOLDEN.iter().find(|(n, _)| *n == name) {
        None => Ok(None),
        Some((_, text)) => {
            let g: Golden = serde_json::from_str(text).map_err(|e| LabError::Input(format!("embedded golden {name}: {e}")))?;
            if g.schema_version != SCHEMA_VERSION {
                return Err(LabError::Input(format!("embedded golden {name} has a stale schema version")));
            }
            Ok(Some(g))
        }
    }
}

/// Runs an experiment, applies golden thresholds, and writes its artifacts.
pub fn run_and_write(name: &str, cfg: &ExperimentConfig, golden: Option<&FsPath>) -> Result<(ExperimentReport, PathBuf)> {
    let mut report = run_experiment(name, cfg)?;
    let g = match golden {
        Some(p) => Some(Golden::load(p)?),
        None => embedded_golden(name)?.filter(|g| g.applies_to(cfg)),
    };
    if let Some(g) = g {
        if report.records.is_empty() {
            report.notes.push("golden thresholds skipped for an empty report".into());
        } else {
            g.check(&mut report);
        }
    }
    let (csv, _) = report.write(&cfg.out_dir)?;
    Ok((report, csv))
}

#[derive(Serialize)]
struct ValueJson<'a> {
    value: f64,
    error_bound: f64,
    method: &'a str,
}

fn parse_point(text: &str) -> Result<LatticePoint> {
    let coords = text
        .split(',')
        .map(|c| parse_value::<i32>("coordinate", c.trim()))
        .collect::<Result<Vec<_>>>()?;
    if coords.is_empty() {
        return Err(LabError::Input("empty point".into()));
    }
    Ok(LatticePoint::new(&coords))
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| LabError::Input(e.to_string()))
}

/// Executes a parsed command; returns the text for stdout and the exit code.
pub fn dispatch(cli: Cli) -> Result<(String, i32)> {
    match cli.command {
        Command::Geometry { shape, r, s, dim, points } => {
            let g = build_geometry(shape.parse()?, r, s, dim)?;
            Ok((to_json(&g.summary(points))?, 0))
        }
        Command::Green { offset } => {
            let x = parse_point(&offset)?;
            let g = GreenTable::shared(x.dim())?;
            let value = g.free_green(&x);
            Ok((
                to_json(&ValueJson {
                    value,
                    error_bound: g.accuracy(),
                    method: "quadrature",
                })?,
                0,
            ))
        }
        Command::Capacity {
            points,
            shape,
            radius,
            dim,
            method,
            walks,
            seed,
        } => {
            let set = match (points, shape.as_deref()) {
                (Some(p), _) => {
                    let pts = p
                        .split(';')
                        .filter(|t| !t.trim().is_empty())
                        .map(parse_point)
                        .collect::<Result<Vec<_>>>()?;
                    let d = pts.first().map_or(dim, |p| p.dim());
                    FiniteSet::from_points(d, pts)
                }
                (None, Some("ball")) => closed_ball(dim, radius),
                (None, Some(other)) => return Err(LabError::Usage(format!("unsupported shape {other:?}; use ball or --points"))),
                (None, None) => return Err(LabError::Usage("give --points or --shape".into())),
            };
            let m = match method.as_str() {
                "solve" | "last_exit_solve" => CapacityMethod::LastExitSolve,
                "mc" | "mc_escape" => CapacityMethod::McEscape { walks_per_point: walks as usize },
                other => return Err(LabError::Usage(format!("unknown method {other:?}; use solve or mc"))),
            };
            let g = GreenTable::shared(set.dim())?;
            let (value, err) = capacity(g, &set, m, 10.0, seed)?;
            let name = match m {
                CapacityMethod::LastExitSolve => "last_exit_solve",
                CapacityMethod::McEscape { .. } => "mc_escape",
            };
            Ok((
                to_json(&ValueJson {
                    value,
                    error_bound: err,
                    method: name,
                })?,
                0,
            ))
        }
        Command::Simulate {
            shape,
            radius,
            dim,
            u,
            seed,
            r_big_factor,
        } => {
            if shape != "ball" {
                return Err(LabError::Usage(format!("simulate supports shape=ball, got {shape:?}")));
            }
            let window = closed_ball(dim, radius);
            let sampler = SoupSampler::new(window.clone(), r_big_factor)?;
            let mut rng = stream_rng(seed, 0);
            let soup = sampler.sample(u, &mut rng)?;
            let f = restrict(&soup, u)?;
            #[derive(Serialize)]
            struct Out {
                u: f64,
                seed: u64,
                window: usize,
                trajectories: usize,
                occupied: Vec<LatticePoint>,
            }
            let occupied = (0..window.len()).filter(|&i| f.contains_index(i)).map(|i| window.point(i)).collect();
            Ok((
                to_json(&Out {
                    u,
                    seed,
                    window: window.len(),
                    trajectories: soup.arrivals.len(),
                    occupied,
                })?,
                0,
            ))
        }
        Command::Experiment(args) => {
            let cfg = parse_config(args.config.as_deref(), &args.flag_pairs()?)?;
            let (report, csv) = run_and_write(&args.name, &cfg, args.golden.as_deref())?;
            let mut text = format!("wrote {}\n", csv.display());
            for f in &report.flags {
                text.push_str(&format!("{} {}: {}\n", if f.passed { "PASS" } else { "FAIL" }, f.name, f.detail));
            }
            Ok((text, if report.all_passed() { 0 } else { 2 }))
        }
    }
}

/// Entry point for the binary.
pub fn main_with_args(args: impl IntoIterator<Item = std::ffi::OsString>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok((text, code)) => {
            // A closed pipe (e.g. `| head`) is not an error worth a panic.
            use std::io::Write;
            let mut out = std::io::stdout().lock();
            let nl = if text.ends_with('\n') { "" } else { "\n" };
            let _ = write!(out, "{text}{nl}").and_then(|_| out.flush());
            code
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

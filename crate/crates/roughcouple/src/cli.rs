//! Experiment driver: flat `key = value` configuration, one subcommand per
//! module pipeline and file artifacts (CSV at 17 significant digits, JSON
//! sidecars).
//!
//! Exit status: 0 on success, 1 when `verify` has failing checks or an
//! artifact cannot be written, 2 for a bad configuration or command line and
//! 3 for a numerical failure.

use crate::coupling::{estimate_tail, run_replicas, summary_json, CouplingSetup, SchemeConfig};
use crate::fbm::{FbmSampler, WienerSpec};
use crate::grid::{fmt17, IndexRange, TimeGrid};
use crate::lyapunov::{fit_lyapunov_constant, lyapunov_check, reports_csv, revalidate, H2Constants};
use crate::rde::{davie_solve, solve_hitting_driver, CutoffFunction, VectorFieldPair};
use crate::roughpath::{chen_defect, lift_piecewise_linear, rough_norm, RoughPath};
use crate::verify::{run_all, tail_grid};
use clap::{Parser, Subcommand};
use serde_json::{json, Value};
use std::fmt::Display;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const DEFAULT_SEED: u64 = 20_241_014;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config key `{key}`: {reason}")]
    Config { key: String, reason: String },
    #[error("cannot read or write {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Numerical(String),
    #[error("{failed} of {total} checks failed")]
    ChecksFailed { failed: usize, total: usize },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => 2,
            CliError::Numerical(_) => 3,
            CliError::Io { .. } | CliError::ChecksFailed { .. } => 1,
        }
    }

    /// One-line JSON report for stderr.
    pub fn report(&self, command: &str) -> String {
        json!({ "command": command, "status": self.exit_code(), "error": self.to_string() }).to_string()
    }
}

fn numerical(e: impl Display) -> CliError {
    CliError::Numerical(e.to_string())
}

fn config_err(key: &str, reason: impl Into<String>) -> CliError {
    CliError::Config { key: key.to_string(), reason: reason.into() }
}

#[derive(Debug, Parser)]
#[command(name = "roughcouple", version, about = "Rough-path numerics and coupling experiments for fBm-driven SDEs")]
pub struct Cli {
    /// Flat key=value configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (falls back to ROUGHCOUPLE_OUT, then `out`).
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub replicas: Option<u64>,
    /// Dyadic grid level of the unit window.
    #[arg(long, global = true)]
    pub level: Option<u32>,
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Sample fBm paths on [0, 1].
    SampleFbm,
    /// Lift an fBm sample to a level-2 rough path.
    Lift,
    /// Davie scheme for b = -y, σ = 2 + sin y.
    Solve,
    /// Fit and validate the one-period Lyapunov bound.
    Lyapunov,
    /// Solve the hitting system on one fBm driver.
    Hit,
    /// Run coupling replicas and write their traces.
    Couple,
    /// Estimate the coupling-time tail.
    Rate,
    /// Run the acceptance checks.
    Verify,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::SampleFbm => "sample-fbm",
            Command::Lift => "lift",
            Command::Solve => "solve",
            Command::Lyapunov => "lyapunov",
            Command::Hit => "hit",
            Command::Couple => "couple",
            Command::Rate => "rate",
            Command::Verify => "verify",
        }
    }
}

/// Scheme parameters plus the knobs of the individual pipelines.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub scheme: SchemeConfig,
    pub seed: u64,
    pub replicas: u64,
    pub threads: usize,
    pub out: Option<PathBuf>,
    /// Paths drawn by `sample-fbm`.
    pub samples: usize,
    /// Noise dimension for `sample-fbm` and `lift`.
    pub dim: usize,
    /// Level of the sampled path that `lift` coarsens; defaults to `level + 4`.
    pub sub_level: Option<u32>,
    pub calibration: usize,
    pub validation: usize,
    /// Multiplier of the fBm driver in `hit`.
    pub hit_scale: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scheme: SchemeConfig::default(),
            seed: DEFAULT_SEED,
            replicas: 200,
            threads: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
            out: None,
            samples: 1,
            dim: 1,
            sub_level: None,
            calibration: 100,
            validation: 100,
            hit_scale: 1.0,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, raw: &str) -> Result<T, CliError>
where
    T::Err: Display,
{
    raw.parse::<T>().map_err(|e| config_err(key, format!("cannot parse `{raw}`: {e}")))
}

impl ExperimentConfig {
    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        let mut scheme = match serde_json::to_value(&cfg.scheme) {
            Ok(Value::Object(m)) => m,
            _ => unreachable!("SchemeConfig serializes to an object"),
        };
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, raw)) = line.split_once('=') else {
                return Err(config_err(line, format!("line {} is not `key = value`", lineno + 1)));
            };
            let (key, raw) = (key.trim(), raw.trim());
            match key {
                "seed" => cfg.seed = parse_num(key, raw)?,
                "replicas" => cfg.replicas = parse_num(key, raw)?,
                "threads" => cfg.threads = parse_num(key, raw)?,
                "out" => cfg.out = Some(PathBuf::from(raw)),
                "samples" => cfg.samples = parse_num(key, raw)?,
                "dim" => cfg.dim = parse_num(key, raw)?,
                "sub_level" => cfg.sub_level = Some(parse_num(key, raw)?),
                "calibration" => cfg.calibration = parse_num(key, raw)?,
                "validation" => cfg.validation = parse_num(key, raw)?,
                "hit_scale" => cfg.hit_scale = parse_num(key, raw)?,
                _ => {
                    let Some(slot) = scheme.get_mut(key) else {
                        return Err(config_err(key, "unknown key"));
                    };
                    *slot = scheme_value(key, raw, slot)?;
                }
            }
        }
        cfg.scheme = serde_json::from_value(Value::Object(scheme)).map_err(|e| config_err("scheme", e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err("config", format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Applies the command-line overrides and re-checks the ranges.
    pub fn apply(&mut self, cli: &Cli) -> Result<(), CliError> {
        if let Some(s) = cli.seed {
            self.seed = s;
        }
        if let Some(r) = cli.replicas {
            self.replicas = r;
        }
        if let Some(l) = cli.level {
            self.scheme.level = l;
        }
        if let Some(t) = cli.threads {
            self.threads = t;
        }
        if let Some(o) = &cli.out {
            self.out = Some(o.clone());
        }
        self.check()
    }

    fn check(&self) -> Result<(), CliError> {
        self.scheme.validate().map_err(|e| match e {
            crate::coupling::CouplingError::Config { name, value, reason } => config_err(name, format!("{value}: {reason}")),
            other => config_err("scheme", other.to_string()),
        })?;
        if self.replicas == 0 {
            return Err(config_err("replicas", "must be at least 1"));
        }
        if self.threads == 0 {
            return Err(config_err("threads", "must be at least 1"));
        }
        if self.samples == 0 {
            return Err(config_err("samples", "must be at least 1"));
        }
        if self.dim == 0 {
            return Err(config_err("dim", "must be at least 1"));
        }
        if self.calibration == 0 || self.validation == 0 {
            let key = if self.calibration == 0 { "calibration" } else { "validation" };
            return Err(config_err(key, "must be at least 1"));
        }
        if let Some(s) = self.sub_level {
            if s < self.scheme.level || s > 20 {
                return Err(config_err("sub_level", format!("{s}: must lie in [level, 20]")));
            }
        }
        if self.scheme.level > 16 {
            return Err(config_err("level", format!("{}: must be at most 16", self.scheme.level)));
        }
        if !self.hit_scale.is_finite() {
            return Err(config_err("hit_scale", "must be finite"));
        }
        Ok(())
    }

    fn sub_level(&self) -> u32 {
        self.sub_level.unwrap_or((self.scheme.level + 4).min(20))
    }

    /// Output directory: explicit value, then `ROUGHCOUPLE_OUT`, then `out`.
    pub fn out_dir(&self) -> PathBuf {
        self.out
            .clone()
            .or_else(|| std::env::var_os("ROUGHCOUPLE_OUT").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("out"))
    }
}

/// Parses `raw` with the JSON type of the default in `slot`.
fn scheme_value(key: &str, raw: &str, slot: &Value) -> Result<Value, CliError> {
    Ok(match slot {
        Value::Bool(_) => Value::Bool(parse_num::<bool>(key, raw)?),
        Value::Number(n) if n.is_u64() => json!(parse_num::<u64>(key, raw)?),
        // Only the optional C² constant defaults to null.
        Value::Null | Value::Number(_) if raw.eq_ignore_ascii_case("none") && slot.is_null() => Value::Null,
        Value::Null | Value::Number(_) => {
            let v = parse_num::<f64>(key, raw)?;
            if !v.is_finite() {
                return Err(config_err(key, format!("`{raw}` is not finite")));
            }
            json!(v)
        }
        _ => return Err(config_err(key, "unsupported value type")),
    })
}

struct Artifacts {
    dir: PathBuf,
    written: Vec<PathBuf>,
}

impl Artifacts {
    fn new(dir: PathBuf) -> Result<Self, CliError> {
        std::fs::create_dir_all(&dir).map_err(|source| CliError::Io { path: dir.clone(), source })?;
        Ok(Self { dir, written: Vec::new() })
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<(), CliError> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|source| CliError::Io { path: parent.to_path_buf(), source })?;
        }
        std::fs::write(&path, contents).map_err(|source| CliError::Io { path: path.clone(), source })?;
        self.written.push(path);
        Ok(())
    }

    fn json(&mut self, name: &str, v: &Value) -> Result<(), CliError> {
        self.write(name, &(serde_json::to_string_pretty(v).expect("json values serialize") + "\n"))
    }
}

fn sampler(cfg: &ExperimentConfig, level: u32) -> Result<FbmSampler, CliError> {
    let s = &cfg.scheme;
    FbmSampler::new(s.hurst, WienerSpec::new(cfg.dim, s.past_window, 1.0, level)).map_err(numerical)
}

fn sample_fbm(cfg: &ExperimentConfig, out: &mut Artifacts) -> Result<(), CliError> {
    let mut s = sampler(cfg, cfg.scheme.level)?;
    let mut paths = Vec::with_capacity(cfg.samples);
    let mut meta = Vec::with_capacity(cfg.samples);
    for k in 0..cfg.samples {
        let sc = s.sample(cfg.seed.wrapping_add(k as u64)).map_err(numerical)?;
        meta.push(json!({ "sample": k, "truncation_sd": sc.truncation_sd, "sup_norm": sc.x.sup_norm() }));
        paths.push(sc);
    }
    let mut csv = String::from("t");
    for k in 0..cfg.samples {
        for c in 0..cfg.dim {
            csv.push_str(&format!(",x{k}_{}", c + 1));
        }
    }
    csv.push('\n');
    let grid = TimeGrid::unit(cfg.scheme.level);
    for i in 0..grid.len() {
        csv.push_str(&fmt17(grid.point(i)));
        for p in &paths {
            for v in p.x.value(i) {
                csv.push(',');
                csv.push_str(&fmt17(*v));
            }
        }
        csv.push('\n');
    }
    out.write("fbm.csv", &csv)?;
    let alpha_h = paths[0].alpha_h;
    out.json("fbm.json", &json!({ "hurst": cfg.scheme.hurst, "alpha_h": alpha_h, "seed": cfg.seed, "samples": meta }))
}

fn lift(cfg: &ExperimentConfig, out: &mut Artifacts) -> Result<(), CliError> {
    let sub = cfg.sub_level();
    let x = sampler(cfg, sub)?.sample(cfg.seed).map_err(numerical)?.x;
    let rp = lift_piecewise_linear(&x, cfg.scheme.level).map_err(numerical)?;
    let norm = rough_norm(&rp, cfg.scheme.gamma, IndexRange::new(0, rp.grid().steps())).map_err(numerical)?;
    out.write("lift_path.csv", &rp.path().to_csv())?;
    out.write("lift_area.csv", &rp.area_csv())?;
    out.json(
        "lift.json",
        &json!({ "level": cfg.scheme.level, "sub_level": sub, "dim": cfg.dim, "chen_defect": chen_defect(&rp), "rough_norm": norm, "gamma": cfg.scheme.gamma }),
    )
}

fn scalar_driver(cfg: &ExperimentConfig, seed: u64) -> Result<crate::grid::GridPath, CliError> {
    let mut one = cfg.clone();
    one.dim = 1;
    Ok(sampler(&one, cfg.scheme.level)?.sample(seed).map_err(numerical)?.x)
}

fn solve(cfg: &ExperimentConfig, out: &mut Artifacts) -> Result<(), CliError> {
    let vf = VectorFieldPair::dissipative_sine();
    let x = scalar_driver(cfg, cfg.seed)?;
    let y = davie_solve(&vf, &RoughPath::linear_cells(x.clone()), &[cfg.scheme.y0]).map_err(numerical)?;
    out.write("solve_driver.csv", &x.to_csv())?;
    out.write("solve.csv", &y.to_csv())?;
    out.json("solve.json", &json!({ "y0": cfg.scheme.y0, "y1": y.value(y.len() - 1)[0], "level": cfg.scheme.level }))
}

fn lyapunov(cfg: &ExperimentConfig, out: &mut Artifacts) -> Result<(), CliError> {
    let vf = VectorFieldPair::dissipative_sine();
    let h2 = H2Constants { c1: 0.0, c2: 1.0 };
    let gamma = cfg.scheme.gamma;
    let run = |seeds: &[u64], c: f64| -> Result<Vec<_>, CliError> {
        seeds
            .iter()
            .map(|s| {
                let x = scalar_driver(cfg, *s)?;
                lyapunov_check(&vf, &RoughPath::linear_cells(x), &[0.0], gamma, h2, c).map_err(numerical)
            })
            .collect()
    };
    let cal_seeds: Vec<u64> = (0..cfg.calibration as u64).map(|k| cfg.seed.wrapping_add(k)).collect();
    let val_seeds: Vec<u64> = (0..cfg.validation as u64).map(|k| cfg.seed.wrapping_add(1_000_000 + k)).collect();
    let cal = run(&cal_seeds, 0.0)?;
    let fit = fit_lyapunov_constant(&cal, gamma, h2).map_err(numerical)?;
    let cal = revalidate(&cal, fit.c, h2);
    let val = run(&val_seeds, fit.c)?;
    let held = val.iter().filter(|r| r.holds()).count();
    out.write("lyapunov_calibration.csv", &reports_csv(&cal_seeds, &cal))?;
    out.write("lyapunov_validation.csv", &reports_csv(&val_seeds, &val))?;
    out.json(
        "lyapunov.json",
        &json!({ "gamma": gamma, "mu": fit.mu, "c": fit.c, "envelope_a": fit.envelope_a, "envelope_p": fit.envelope_p, "validation_held": held, "validation_total": val.len() }),
    )
}

fn hit(cfg: &ExperimentConfig, out: &mut Artifacts) -> Result<(), CliError> {
    let s = &cfg.scheme;
    let vf = VectorFieldPair::dissipative_sine();
    let x = scalar_driver(cfg, cfg.seed)?.scale(cfg.hit_scale);
    let grid = TimeGrid::unit(s.level);
    let phi = CutoffFunction::for_k(s.k_bound, 1);
    let sol = solve_hitting_driver(&vf, s.y0, s.y0_tilde, &x.component(0), grid, &phi, s.xi_points, false).map_err(numerical)?;
    out.write("hit.csv", &sol.to_csv())?;
    out.json(
        "hit.json",
        &json!({ "a0": s.y0, "a1": s.y0_tilde, "hit_scale": cfg.hit_scale, "hit_gap": sol.hit_gap(), "state_sup": sol.state_sup(), "drift_sup": sol.drift_sup() }),
    )
}

fn replicas(cfg: &ExperimentConfig) -> Result<(CouplingSetup, Vec<crate::coupling::CouplingTrace>), CliError> {
    let setup = CouplingSetup::new(cfg.scheme.clone(), VectorFieldPair::dissipative_sine()).map_err(numerical)?;
    let traces = run_replicas(&setup, cfg.seed, cfg.replicas, cfg.threads).map_err(numerical)?;
    Ok((setup, traces))
}

fn couple(cfg: &ExperimentConfig, out: &mut Artifacts) -> Result<(), CliError> {
    let (_, traces) = replicas(cfg)?;
    let samples: Vec<_> = traces.iter().map(|t| t.sample()).collect();
    let tail = estimate_tail(&samples, &tail_grid(cfg.scheme.horizon)).ok();
    for t in &traces {
        out.write(&format!("traces/trace_{:05}.csv", t.replica), &t.to_csv())?;
    }
    let mut tau = String::from("replica,tau_inf,censored,trials\n");
    for t in &traces {
        let s = t.sample();
        tau.push_str(&format!("{},{},{},{}\n", t.replica, fmt17(s.time), s.censored, t.trials.len()));
    }
    out.write("coupling_times.csv", &tau)?;
    if let Some(tail) = &tail {
        out.write("tail.csv", &tail.to_csv())?;
    }
    out.write("summary.json", &(summary_json(&cfg.scheme, &traces, tail.as_ref()) + "\n"))
}

fn rate(cfg: &ExperimentConfig, out: &mut Artifacts) -> Result<(), CliError> {
    let (_, traces) = replicas(cfg)?;
    let samples: Vec<_> = traces.iter().map(|t| t.sample()).collect();
    let tail = estimate_tail(&samples, &tail_grid(cfg.scheme.horizon)).map_err(numerical)?;
    out.write("tail.csv", &tail.to_csv())?;
    out.json("rate.json", &json!({ "seed": cfg.seed, "replicas": cfg.replicas, "horizon": cfg.scheme.horizon, "tail": tail }))
}

fn verify(cfg: &ExperimentConfig, out: &mut Artifacts) -> Result<(), CliError> {
    let checks = run_all(cfg.seed, cfg.threads);
    let mut csv = String::from("id,name,passed,seconds\n");
    for c in &checks {
        println!("{}", c.line());
        csv.push_str(&format!("{},{},{},{}\n", c.id, c.name, c.passed, fmt17(c.seconds)));
    }
    out.write("verify.csv", &csv)?;
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{} of {} checks passed", checks.len() - failed, checks.len());
    if failed > 0 {
        return Err(CliError::ChecksFailed { failed, total: checks.len() });
    }
    Ok(())
}

/// Runs one subcommand and returns the artifacts it wrote.
pub fn run_subcommand(command: Command, cfg: &ExperimentConfig) -> Result<Vec<PathBuf>, CliError> {
    let mut out = Artifacts::new(cfg.out_dir())?;
    match command {
        Command::SampleFbm => sample_fbm(cfg, &mut out)?,
        Command::Lift => lift(cfg, &mut out)?,
        Command::Solve => solve(cfg, &mut out)?,
        Command::Lyapunov => lyapunov(cfg, &mut out)?,
        Command::Hit => hit(cfg, &mut out)?,
        Command::Couple => couple(cfg, &mut out)?,
        Command::Rate => rate(cfg, &mut out)?,
        Command::Verify => verify(cfg, &mut out)?,
    }
    Ok(out.written)
}

/// Loads the configuration, applies the flags and runs the subcommand.
/// Returns the exit status.
pub fn main_with(cli: Cli) -> i32 {
    let name = cli.command.name();
    let result = (|| {
        let mut cfg = match &cli.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        cfg.apply(&cli)?;
        run_subcommand(cli.command, &cfg)
    })();
    match result {
        Ok(files) => {
            for f in files {
                eprintln!("wrote {}", f.display());
            }
            0
        }
        Err(e) => {
            eprintln!("{}", e.report(name));
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_scheme_and_experiment_keys() {
        let cfg = ExperimentConfig::parse("# comment\nhurst = 0.45\nlevel=7 # inline\nreplicas = 3\nrecord_increments = true\nc2_constant = 1.0\n").unwrap();
        assert_eq!(cfg.scheme.hurst, 0.45);
        assert_eq!(cfg.scheme.level, 7);
        assert_eq!(cfg.replicas, 3);
        assert!(cfg.scheme.record_increments);
        assert_eq!(cfg.scheme.c2_constant, Some(1.0));
        let none = ExperimentConfig::parse("c2_constant = none").unwrap();
        assert_eq!(none.scheme.c2_constant, None);
    }

    #[test]
    fn bad_keys_are_named() {
        for (text, key) in [
            ("bogus = 1", "bogus"),
            ("hurst = abc", "hurst"),
            ("hurst = 0.6", "hurst"),
            ("level = -1", "level"),
            ("replicas = 0", "replicas"),
            ("xi_points = 1.5", "xi_points"),
            ("no equals sign", "no equals sign"),
        ] {
            match ExperimentConfig::parse(text) {
                Err(CliError::Config { key: k, .. }) => assert_eq!(k, key, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn error_codes() {
        assert_eq!(config_err("x", "y").exit_code(), 2);
        assert_eq!(numerical("boom").exit_code(), 3);
        assert!(numerical("boom").report("hit").contains("\"status\":3"));
    }
}

//! Run configuration, manifests and the commands behind the `nashflow` CLI.
//!
//! Every command writes into one output directory: its CSV artifacts, each
//! starting with a `# run_id:` line, and a `report.json` that embeds the
//! manifest.

use crate::error::{Error, Result};
use crate::fields::VectorField;
use crate::geometry::Sphere;
use crate::identities::{self, IdentityRecord, VerifyConfig};
use crate::operators::Operators;
use crate::spectral::{degree_order, index, n_coeffs, SpectralField, SphericalGrid};
use crate::stochastic::{
    density_diagnostics, picard_solve, propagate, propagate_reconstruct, stokes_decay, NoiseLayout, SolverConfig, TensorChoice,
};
use chrono::{DateTime, Utc};
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const SCHEMA_VERSION: u32 = 1;
/// Environment variable that overrides the configured worker count.
pub const THREADS_ENV: &str = "NASHFLOW_THREADS";

pub const EXIT_PASS: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CHECK_FAILED: i32 = 2;
pub const EXIT_NOT_CONVERGED: i32 = 3;
pub const EXIT_CONFIG: i32 = 4;

/// Per-path mass tolerance of the density diagnostics.
pub const MASS_TOL: f64 = 1e-3;
/// Tolerance on `det J − 1` for a volume-preserving flow.
pub const LIOUVILLE_TOL: f64 = 1e-6;
/// Monte Carlo checks pass within this many standard errors.
pub const Z_LIMIT: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Verify,
    Heat,
    Ns,
    Density,
}

impl Command {
    pub fn as_str(self) -> &'static str {
        match self {
            Command::Verify => "verify",
            Command::Heat => "heat",
            Command::Ns => "ns",
            Command::Density => "density",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorSpec {
    TwoT1,
    /// Constant ambient matrix `D`, used as `Λ D Λ`.
    Custom([[f64; 3]; 3]),
}

impl TensorSpec {
    pub fn to_choice(&self) -> TensorChoice<f64> {
        match self {
            TensorSpec::TwoT1 => TensorChoice::TwoT1,
            TensorSpec::Custom(d) => TensorChoice::Custom(Matrix3::from_fn(|i, j| d[i][j])),
        }
    }
}

/// One real curl coefficient of the initial field.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mode {
    pub l: usize,
    pub m: i64,
    pub amplitude: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// `sphere`, `s2`, `s3`, `ellipsoid` or `all`; flows accept `sphere`/`s2`
    /// only. Unset means `all` for `verify` and `sphere` otherwise.
    pub manifold: Option<String>,
    pub semi_axes: [f64; 3],
    pub l_max: usize,
    pub n_lat: usize,
    pub n_lon: usize,
    pub nu: f64,
    pub dt: f64,
    #[serde(rename = "T", alias = "horizon")]
    pub horizon: f64,
    pub n_paths: usize,
    pub picard_iters: usize,
    /// `0` runs exactly `picard_iters` iterations without a stopping test.
    pub picard_tol: f64,
    pub seed: u64,
    pub tensor_choice: TensorSpec,
    pub output_dir: PathBuf,
    pub threads: Option<usize>,
    pub initial: Vec<Mode>,
    /// Rescale the initial field to kinetic energy `½∫|u|² = 1`.
    pub normalize_energy: bool,
    /// Also write coefficient snapshots every this many steps (`heat`).
    pub record_every: usize,
    pub density_l: usize,
    pub density_paths: usize,
    pub verify: VerifyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            manifold: None,
            semi_axes: [1.0, 1.0, 2.0],
            l_max: 15,
            n_lat: 32,
            n_lon: 64,
            nu: 0.1,
            dt: 1e-3,
            horizon: 0.5,
            n_paths: 20_000,
            picard_iters: 5,
            picard_tol: 1e-2,
            seed: 0,
            tensor_choice: TensorSpec::TwoT1,
            output_dir: PathBuf::from("out"),
            threads: None,
            initial: vec![Mode { l: 2, m: 1, amplitude: 1.0 }],
            normalize_energy: false,
            record_every: 0,
            density_l: 2,
            density_paths: 10_000,
            verify: VerifyConfig::default(),
        }
    }
}

/// Command-line overrides; `None` keeps the configured value.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Ok(toml::from_str(&text)?)
    }

    /// Applies CLI overrides; the thread count resolves flag, then
    /// environment, then config, then serial.
    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(out) = &o.out {
            self.output_dir = out.clone();
        }
        let env = match std::env::var(THREADS_ENV) {
            Ok(v) => Some(v.trim().parse::<usize>().map_err(|_| Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?),
            Err(_) => None,
        };
        self.threads = Some(o.threads.or(env).or(self.threads).unwrap_or(1));
        Ok(())
    }

    pub fn worker_count(&self) -> usize {
        self.threads.unwrap_or(1)
    }

    fn flow_manifold(&self) -> Result<()> {
        match self.manifold.as_deref() {
            None | Some("sphere") | Some("s2") => Ok(()),
            Some(other) => Err(Error::Config(format!("flows run on the sphere only, not {other:?}"))),
        }
    }

    pub fn validate(&self, command: Command) -> Result<()> {
        if self.worker_count() == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        if command == Command::Verify {
            return match self.manifold.as_deref() {
                None | Some("all" | "sphere" | "s2" | "s3") => Ok(()),
                Some("ellipsoid") => crate::geometry::Ellipsoid::ellipsoid(self.semi_axes).map(|_| ()),
                Some(other) => Err(Error::Config(format!("unknown manifold {other:?}"))),
            };
        }
        self.flow_manifold()?;
        if self.l_max == 0 {
            return Err(Error::Config("l_max must be at least 1".into()));
        }
        for mode in &self.initial {
            if mode.l == 0 || mode.l > self.l_max || mode.m.unsigned_abs() as usize > mode.l || !mode.amplitude.is_finite() {
                return Err(Error::Config(format!("initial mode {mode:?} is outside 1 ≤ l ≤ l_max, |m| ≤ l")));
            }
        }
        if command == Command::Density && (self.density_paths == 0 || self.density_l > self.l_max) {
            return Err(Error::Config("density_paths must be positive and density_l ≤ l_max".into()));
        }
        self.solver_config()?.validate()?;
        self.tensor_choice.to_choice().check_divergence_preserving().map_err(|e| Error::Config(e.to_string()))
    }

    pub fn solver_config(&self) -> Result<SolverConfig<f64>> {
        Ok(SolverConfig {
            picard_iters: self.picard_iters,
            picard_tol: self.picard_tol,
            seed: self.seed,
            tensor: self.tensor_choice.to_choice(),
            ..SolverConfig::new(self.nu, self.dt, self.horizon, self.n_paths)
        })
    }

    pub fn grid(&self) -> Result<SphericalGrid<f64>> {
        SphericalGrid::new(self.l_max, self.n_lat, self.n_lon)
    }

    pub fn initial_field(&self) -> SpectralField<f64> {
        let mut f = SpectralField::zeros(self.l_max);
        for mode in &self.initial {
            f.curl[index(mode.l, mode.m)] += mode.amplitude;
        }
        let e: f64 = f.energy();
        if self.normalize_energy && e > 0.0 {
            f.scale(1.0 / e.sqrt());
        }
        f
    }

    /// SHA-256 over the command, the configuration that affects results,
    /// and the seed. Output location and worker count are excluded.
    pub fn run_id(&self, command: Command) -> String {
        let mut physics = self.clone();
        physics.output_dir = PathBuf::new();
        physics.threads = None;
        let mut h = Sha256::new();
        h.update(command.as_str().as_bytes());
        h.update(b"\n");
        h.update(serde_json::to_vec(&physics).expect("config serializes"));
        h.update(b"\n");
        h.update(self.seed.to_le_bytes());
        hex::encode(h.finalize())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub run_id: String,
    pub command: Command,
    pub config: RunConfig,
    pub code_version: String,
    pub seed: u64,
    pub started: DateTime<Utc>,
    pub finished: DateTime<Utc>,
    /// File names inside the output directory, `report.json` included.
    pub artifacts: Vec<String>,
}

/// Result of one command.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub exit_code: i32,
    pub report_path: PathBuf,
    pub summary: String,
    pub failures: Vec<String>,
}

pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Toml(_) | Error::Precondition(_) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

/// Validates, builds the worker pool and runs `command`.
pub fn run(command: Command, cfg: &RunConfig) -> Result<Outcome> {
    cfg.validate(command)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.worker_count())
        .build()
        .map_err(|e| Error::Config(format!("cannot start {} workers: {e}", cfg.worker_count())))?;
    pool.install(|| {
        let mut ctx = Context::new(command, cfg)?;
        let (body, failures, exit) = match command {
            Command::Verify => cmd_verify(&mut ctx)?,
            Command::Heat => cmd_heat(&mut ctx)?,
            Command::Ns => cmd_ns(&mut ctx)?,
            Command::Density => cmd_density(&mut ctx)?,
        };
        ctx.finish(body, failures, exit)
    })
}

struct Context<'a> {
    cfg: &'a RunConfig,
    command: Command,
    run_id: String,
    started: DateTime<Utc>,
    clock: Instant,
    artifacts: Vec<String>,
}

impl<'a> Context<'a> {
    fn new(command: Command, cfg: &'a RunConfig) -> Result<Self> {
        std::fs::create_dir_all(&cfg.output_dir)?;
        Ok(Context { cfg, command, run_id: cfg.run_id(command), started: Utc::now(), clock: Instant::now(), artifacts: Vec::new() })
    }

    fn write(&mut self, name: String, contents: &str) -> Result<()> {
        std::fs::write(self.cfg.output_dir.join(&name), contents)?;
        self.artifacts.push(name);
        Ok(())
    }

    fn finish(mut self, body: serde_json::Value, failures: Vec<String>, mut exit: i32) -> Result<Outcome> {
        if exit == EXIT_PASS && !failures.is_empty() {
            exit = EXIT_CHECK_FAILED;
        }
        self.artifacts.push("report.json".into());
        let manifest = RunManifest {
            schema_version: SCHEMA_VERSION,
            run_id: self.run_id.clone(),
            command: self.command,
            config: self.cfg.clone(),
            code_version: env!("CARGO_PKG_VERSION").into(),
            seed: self.cfg.seed,
            started: self.started,
            finished: Utc::now(),
            artifacts: self.artifacts.clone(),
        };
        let elapsed = self.clock.elapsed().as_secs_f64();
        let report = serde_json::json!({
            "schema_version": SCHEMA_VERSION,
            "run_id": self.run_id,
            "manifest": manifest,
            "exit_code": exit,
            "pass": exit == EXIT_PASS,
            "failures": failures,
            "elapsed_seconds": elapsed,
            "result": body,
        });
        let path = self.cfg.output_dir.join("report.json");
        std::fs::write(&path, serde_json::to_string_pretty(&report)?)?;
        let summary = format!(
            "{} {}: {} in {:.1}s, report {}",
            self.command.as_str(),
            if exit == EXIT_PASS { "passed" } else { "failed" },
            if failures.is_empty() { "all checks passed".to_string() } else { format!("{} failing checks", failures.len()) },
            elapsed,
            path.display()
        );
        Ok(Outcome { exit_code: exit, report_path: path, summary, failures })
    }
}

/// File-name tag for a time, e.g. `0.5000`.
pub fn time_tag(t: f64) -> String {
    format!("{t:.4}")
}

/// Coefficient CSV `l,m,re,im,stderr` in the complex view, preceded by a
/// `# run_id:` line.
pub fn coefficients_csv(run_id: &str, field: &SpectralField<f64>, stderr: Option<&[f64]>) -> String {
    let mut out = format!("# run_id: {run_id}\nl,m,re,im,stderr\n");
    for l in 1..=field.l_max() {
        for m in -(l as i64)..=(l as i64) {
            let (re, im) = SpectralField::complex_coefficient(&field.curl, l, m);
            let se = stderr.map_or(0.0, |s| {
                if m == 0 {
                    s[index(l, 0)]
                } else {
                    let mu = m.abs();
                    ((s[index(l, mu)].powi(2) + s[index(l, -mu)].powi(2)) * 0.5).sqrt()
                }
            });
            let _ = writeln!(out, "{l},{m},{re:e},{im:e},{se:e}");
        }
    }
    out
}

/// One row of a coefficient CSV.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoefficientRow {
    pub l: usize,
    pub m: i64,
    pub re: f64,
    pub im: f64,
    pub stderr: f64,
}

/// Parses a coefficient CSV, returning the run id and the rows.
pub fn read_coefficients_csv(text: &str) -> Result<(String, Vec<CoefficientRow>)> {
    let bad = |line: &str| Error::Config(format!("malformed coefficient row: {line}"));
    let mut run_id = String::new();
    let mut rows = Vec::new();
    for line in text.lines() {
        if let Some(id) = line.strip_prefix("# run_id: ") {
            run_id = id.trim().to_string();
            continue;
        }
        if line.is_empty() || line.starts_with('#') || line.starts_with("l,") {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad(line));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(line));
        rows.push(CoefficientRow {
            l: f[0].parse().map_err(|_| bad(line))?,
            m: f[1].parse().map_err(|_| bad(line))?,
            re: num(f[2])?,
            im: num(f[3])?,
            stderr: num(f[4])?,
        });
    }
    Ok((run_id, rows))
}

fn cmd_verify(ctx: &mut Context) -> Result<(serde_json::Value, Vec<String>, i32)> {
    let cfg = ctx.cfg;
    let vcfg = VerifyConfig { seed: cfg.seed, semi_axes: cfg.semi_axes, ..cfg.verify.clone() };
    let which = cfg.manifold.as_deref().unwrap_or("all");
    let mut records: Vec<IdentityRecord> = Vec::new();
    let mut timings = serde_json::Map::new();
    let mut group = |name: &str, f: &mut dyn FnMut() -> Result<Vec<IdentityRecord>>| -> Result<()> {
        let t = Instant::now();
        records.extend(f()?);
        timings.insert(name.into(), t.elapsed().as_secs_f64().into());
        Ok(())
    };
    if matches!(which, "all" | "sphere" | "s2") {
        group("S2", &mut || Ok(identities::sphere_identities::<3>(&vcfg)))?;
    }
    if matches!(which, "all" | "sphere" | "s3") {
        group("S3", &mut || Ok(identities::sphere_identities::<4>(&vcfg)))?;
    }
    if matches!(which, "all" | "ellipsoid") {
        group("ellipsoid", &mut || identities::ellipsoid_identities(&vcfg))?;
    }
    if matches!(which, "all" | "sphere" | "s2") {
        group("sign_audits", &mut || Ok(identities::sign_audits(&vcfg)))?;
        group("integral", &mut || Ok(identities::integral_identities(&vcfg)))?;
    }
    ctx.write("identities.json".into(), &serde_json::to_string_pretty(&serde_json::json!({ "run_id": ctx.run_id, "records": records }))?)?;
    let failures: Vec<String> = records
        .iter()
        .filter(|r| !r.pass)
        .map(|r| serde_json::to_string(r).expect("record serializes"))
        .collect();
    let body = serde_json::json!({
        "n_identities": records.len(),
        "n_failed": failures.len(),
        "group_seconds": timings,
        "records": records,
    });
    Ok((body, failures, EXIT_PASS))
}

#[derive(Clone, Debug, Serialize)]
pub struct DecayRow {
    pub t: f64,
    pub l: usize,
    pub m: i64,
    pub initial: f64,
    pub estimate: f64,
    pub stderr: f64,
    pub ratio: f64,
    pub ratio_stderr: f64,
    pub analytic: f64,
    /// Decay predicted from the Hodge Laplacian eigenvalue computed by the
    /// operator suite.
    pub operator_prediction: f64,
    pub operator_eigenvalue: f64,
    pub z: f64,
    pub pass: bool,
}

/// `⟨□C_lm, C_lm⟩ / |C_lm|²` at a fixed point, from the operator suite.
fn hodge_eigenvalue(l: usize, m: i64) -> f64 {
    let s2 = Sphere::<f64, 3>::new();
    let ops = Operators::new(&s2);
    let mode = SpectralField::<f64>::mode(l, l, m);
    let x = Vector3::new(0.48, -0.6, 0.64);
    let v = mode.eval(&x);
    ops.hodge_laplacian(&mode, &x).dot(&v) / v.norm_squared()
}

fn record_steps(every: usize, steps: usize) -> Vec<usize> {
    let mut r: Vec<usize> = if every > 0 { (every..steps).step_by(every).collect() } else { Vec::new() };
    r.push(steps);
    r
}

fn cmd_heat(ctx: &mut Context) -> Result<(serde_json::Value, Vec<String>, i32)> {
    let cfg = ctx.cfg;
    let grid = cfg.grid()?;
    let scfg = cfg.solver_config()?;
    let steps = scfg.steps()?;
    let u0 = cfg.initial_field();
    let record = record_steps(cfg.record_every, steps);
    let t = Instant::now();
    let (recs, dropped) = propagate_reconstruct(&grid, &u0, &scfg, &[], 0, &record)?;
    let propagate_seconds = t.elapsed().as_secs_f64();
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (&step, rec) in record.iter().zip(&recs) {
        let time = cfg.dt * step as f64;
        ctx.write(format!("coefficients_t{}.csv", time_tag(time)), &coefficients_csv(&ctx.run_id, &rec.field, Some(&rec.stderr)))?;
        for (i, &c0) in u0.curl.iter().enumerate() {
            if c0 == 0.0 {
                continue;
            }
            let (l, m) = degree_order(i);
            let lambda = (l * (l + 1)) as f64;
            let eig = hodge_eigenvalue(l, m);
            let estimate = rec.field.curl[i];
            let ratio = estimate / c0;
            let ratio_stderr = rec.stderr[i] / c0.abs();
            let analytic = (-cfg.nu * lambda * time).exp();
            let z = if ratio_stderr > 0.0 { (ratio - analytic) / ratio_stderr } else { 0.0 };
            let pass = z.abs() <= Z_LIMIT;
            if !pass {
                failures.push(format!("mode ({l},{m}) at t={time}: ratio {ratio} vs {analytic}, z = {z:.2}"));
            }
            rows.push(DecayRow {
                t: time,
                l,
                m,
                initial: c0,
                estimate,
                stderr: rec.stderr[i],
                ratio,
                ratio_stderr,
                analytic,
                operator_prediction: (-cfg.nu * eig * time).exp(),
                operator_eigenvalue: eig,
                z,
                pass,
            });
        }
    }
    let mut table = format!("# run_id: {}\nt,l,m,ratio,ratio_stderr,analytic,operator_prediction,z\n", ctx.run_id);
    for r in &rows {
        let _ = writeln!(table, "{},{},{},{:e},{:e},{:e},{:e},{:.3}", r.t, r.l, r.m, r.ratio, r.ratio_stderr, r.analytic, r.operator_prediction, r.z);
    }
    ctx.write("decay.csv".into(), &table)?;
    let last = recs.last().expect("horizon is recorded");
    let expected = stokes_decay(&u0, cfg.nu, cfg.horizon);
    let off_mode_z = (0..n_coeffs(cfg.l_max))
        .filter(|&i| u0.curl[i] == 0.0 && last.stderr[i] > 0.0)
        .map(|i| (last.field.curl[i] / last.stderr[i]).abs())
        .fold(0.0, f64::max);
    let body = serde_json::json!({
        "decay": rows,
        "paths": scfg.n_paths.div_ceil(grid.len()) * grid.len(),
        "dropped": dropped,
        "noise_norm": last.noise_norm(),
        "relative_error_vs_stokes": last.field.distance(&expected) / expected.l2_norm().max(f64::MIN_POSITIVE),
        "max_off_mode_z": off_mode_z,
        "propagate_seconds": propagate_seconds,
    });
    Ok((body, failures, EXIT_PASS))
}

#[derive(Clone, Debug, Serialize)]
pub struct ErrorRow {
    pub t: f64,
    pub relative_l2_error: f64,
    pub mc_norm: f64,
    pub reference_norm: f64,
}

fn cmd_ns(ctx: &mut Context) -> Result<(serde_json::Value, Vec<String>, i32)> {
    let cfg = ctx.cfg;
    let grid = cfg.grid()?;
    let scfg = cfg.solver_config()?;
    let steps = scfg.steps()?;
    let u0 = cfg.initial_field();
    let t = Instant::now();
    let picard = picard_solve(&grid, &u0, &scfg)?;
    let picard_seconds = t.elapsed().as_secs_f64();
    let t = Instant::now();
    let reference = grid.reference_ns_trajectory(&u0, cfg.dt, cfg.nu, steps)?;
    let reference_seconds = t.elapsed().as_secs_f64();
    let mut rows = Vec::with_capacity(steps + 1);
    for (n, (mc, r)) in picard.fields.iter().zip(&reference).enumerate() {
        let rn = r.l2_norm();
        let d = mc.distance(r);
        rows.push(ErrorRow { t: cfg.dt * n as f64, relative_l2_error: if rn > 0.0 { d / rn } else { d }, mc_norm: mc.l2_norm(), reference_norm: rn });
    }
    let mut csv = format!("# run_id: {}\nt,relative_l2_error,mc_norm,reference_norm\n", ctx.run_id);
    for r in &rows {
        let _ = writeln!(csv, "{},{:e},{:e},{:e}", r.t, r.relative_l2_error, r.mc_norm, r.reference_norm);
    }
    ctx.write("errors.csv".into(), &csv)?;
    let tag = time_tag(cfg.horizon);
    let mc = picard.fields.last().expect("horizon is recorded");
    let r = reference.last().expect("horizon is recorded");
    ctx.write(format!("coefficients_t{tag}.csv"), &coefficients_csv(&ctx.run_id, mc, Some(&picard.stderr)))?;
    ctx.write(format!("reference_t{tag}.csv"), &coefficients_csv(&ctx.run_id, r, None))?;
    let noise: f64 = picard.stderr.iter().map(|e| e * e).sum::<f64>().sqrt();
    let mut body = serde_json::json!({
        "errors": rows,
        "final_relative_l2_error": rows.last().map(|r| r.relative_l2_error),
        "relative_noise": noise / r.l2_norm().max(f64::MIN_POSITIVE),
        "picard_changes": picard.changes,
        "iterations": picard.iterations,
        "converged": picard.converged,
        "convergence_test": cfg.picard_tol > 0.0,
        "dropped": picard.dropped,
        "picard_seconds": picard_seconds,
        "reference_seconds": reference_seconds,
    });
    // Rigid rotations decay as e^{−2νt} exactly.
    let pure_l1 = u0.curl.iter().enumerate().all(|(i, c)| *c == 0.0 || degree_order(i).0 == 1);
    let mut failures = Vec::new();
    if pure_l1 && u0.l2_norm() > 0.0 {
        let closed = stokes_decay(&u0, cfg.nu, cfg.horizon);
        let spectral_error = r.distance(&closed) / closed.l2_norm();
        // z-scores of the rotation amplitude, i.e. the coefficients present in u_0
        let mc_z = (0..n_coeffs(cfg.l_max))
            .filter(|&i| u0.curl[i] != 0.0 && picard.stderr[i] > 0.0)
            .map(|i| ((mc.curl[i] - closed.curl[i]) / picard.stderr[i]).abs())
            .fold(0.0, f64::max);
        let amplitude = (-2.0 * cfg.nu * cfg.horizon).exp();
        body["rotation"] = serde_json::json!({ "amplitude": amplitude, "spectral_relative_error": spectral_error, "mc_max_z": mc_z });
        if spectral_error > 1e-6 {
            failures.push(format!("spectral rotation decay off by {spectral_error:e}"));
        }
        if mc_z > Z_LIMIT {
            failures.push(format!("Monte Carlo rotation decay off by {mc_z:.2} standard errors"));
        }
    }
    let exit = if cfg.picard_tol > 0.0 && !picard.converged { EXIT_NOT_CONVERGED } else { EXIT_PASS };
    Ok((body, failures, exit))
}

#[derive(Clone, Debug, Serialize)]
pub struct DensityRow {
    pub l: usize,
    pub m: i64,
    pub estimate: f64,
    pub stderr: f64,
    pub expected: f64,
    pub pass: bool,
}

fn cmd_density(ctx: &mut Context) -> Result<(serde_json::Value, Vec<String>, i32)> {
    let cfg = ctx.cfg;
    let grid = cfg.grid()?;
    let scfg = cfg.solver_config()?;
    let mut failures = Vec::new();

    let flows = propagate(&grid, &scfg, &[], NoiseLayout::CommonFlow, 0)?;
    let masses = density_diagnostics(&flows, &grid, 0)?;
    let mass_error = masses.max_mass_error();
    if !(mass_error <= MASS_TOL) {
        failures.push(format!("flow mass deviates from 4π by {mass_error:e}"));
    }
    drop(flows);

    let independent = SolverConfig { n_paths: cfg.density_paths, ..scfg.clone() };
    let ens = propagate(&grid, &independent, &[], NoiseLayout::Independent, 1)?;
    let report = density_diagnostics(&ens, &grid, cfg.density_l)?;
    drop(ens);
    let sqrt_4pi = (4.0 * std::f64::consts::PI).sqrt();
    let mut rows = Vec::new();
    for (i, e) in report.mean_density.iter().enumerate() {
        let (l, m) = degree_order(i);
        let expected = if l == 0 { sqrt_4pi } else { 0.0 };
        let pass = (e.mean - expected).abs() <= Z_LIMIT * e.stderr + 1e-10;
        if !pass {
            failures.push(format!("mean density coefficient ({l},{m}) = {} ± {}", e.mean, e.stderr));
        }
        rows.push(DensityRow { l, m, estimate: e.mean, stderr: e.stderr, expected, pass });
    }
    let mut csv = format!("# run_id: {}\nl,m,estimate,stderr,expected\n", ctx.run_id);
    for r in &rows {
        let _ = writeln!(csv, "{},{},{:e},{:e},{:e}", r.l, r.m, r.estimate, r.stderr, r.expected);
    }
    ctx.write(format!("density_t{}.csv", time_tag(cfg.horizon)), &csv)?;

    // Volume preservation: ν = 0 transport by the initial field, one path per node.
    let u0 = cfg.initial_field();
    let frozen = SolverConfig { nu: 0.0, n_paths: grid.len(), ..scfg.clone() };
    let transport = propagate(&grid, &frozen, &[u0.stream_function()], NoiseLayout::Independent, 2)?;
    let liouville = density_diagnostics(&transport, &grid, 0)?;
    let det_error = liouville.max_det_deviation();
    if !(det_error <= LIOUVILLE_TOL) {
        failures.push(format!("volume-preserving flow has |det J − 1| up to {det_error:e}"));
    }
    let body = serde_json::json!({
        "flow_masses": masses.flow_masses,
        "max_mass_error": mass_error,
        "mean_density": rows,
        "det_range_heat": report.det_range,
        "liouville_max_det_deviation": det_error,
        "dropped": masses.dropped + report.dropped + liouville.dropped,
    });
    Ok((body, failures, EXIT_PASS))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(dir: &Path) -> RunConfig {
        RunConfig {
            l_max: 4,
            n_lat: 8,
            n_lon: 16,
            horizon: 0.05,
            dt: 0.01,
            n_paths: 256,
            density_paths: 256,
            output_dir: dir.to_path_buf(),
            threads: Some(1),
            ..RunConfig::default()
        }
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = RunConfig { tensor_choice: TensorSpec::Custom([[2.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 2.0]]), ..RunConfig::default() };
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(toml::from_str::<RunConfig>(&text).unwrap(), cfg);
        let parsed: RunConfig = toml::from_str("T = 0.2\nnu = 0.05\ntensor_choice = \"two_t1\"\n").unwrap();
        assert_eq!(parsed.horizon, 0.2);
        assert!(toml::from_str::<RunConfig>("bogus = 1\n").is_err());
    }

    #[test]
    fn run_id_ignores_output_location_and_threads() {
        let a = RunConfig::default();
        let b = RunConfig { output_dir: "elsewhere".into(), threads: Some(8), ..a.clone() };
        assert_eq!(a.run_id(Command::Heat), b.run_id(Command::Heat));
        assert_ne!(a.run_id(Command::Heat), a.run_id(Command::Ns));
        assert_ne!(a.run_id(Command::Heat), RunConfig { seed: 1, ..a.clone() }.run_id(Command::Heat));
    }

    #[test]
    fn invalid_configs_map_to_config_exit() {
        let dir = tempfile::tempdir().unwrap();
        for bad in [
            RunConfig { nu: 0.0, ..small(dir.path()) },
            RunConfig { horizon: 0.055, ..small(dir.path()) },
            RunConfig { manifold: Some("ellipsoid".into()), ..small(dir.path()) },
            RunConfig { initial: vec![Mode { l: 9, m: 0, amplitude: 1.0 }], ..small(dir.path()) },
            RunConfig { tensor_choice: TensorSpec::Custom([[1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 3.0]]), ..small(dir.path()) },
        ] {
            let err = run(Command::Heat, &bad).unwrap_err();
            assert_eq!(exit_code_for(&err), EXIT_CONFIG, "{err}");
        }
    }

    #[test]
    fn coefficient_csv_round_trips() {
        let mut f = SpectralField::<f64>::zeros(3);
        f.curl[index(2, 1)] = 0.7;
        f.curl[index(2, -1)] = -0.2;
        f.curl[index(1, 0)] = 1.5;
        let se: Vec<f64> = (0..n_coeffs(3)).map(|i| 0.01 * i as f64).collect();
        let (id, rows) = read_coefficients_csv(&coefficients_csv("abc", &f, Some(&se))).unwrap();
        assert_eq!(id, "abc");
        assert_eq!(rows.len(), 3 + 5 + 7);
        let r = rows.iter().find(|r| r.l == 2 && r.m == 1).unwrap();
        assert!((r.re - 0.7 / 2f64.sqrt()).abs() < 1e-15 && (r.im - 0.2 / 2f64.sqrt()).abs() < 1e-15);
        let r0 = rows.iter().find(|r| r.l == 1 && r.m == 0).unwrap();
        assert_eq!((r0.re, r0.stderr), (1.5, se[index(1, 0)]));
    }

    #[test]
    fn zero_field_ns_has_zero_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig { initial: vec![], picard_iters: 1, ..small(dir.path()) };
        let out = run(Command::Ns, &cfg).unwrap();
        let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.report_path).unwrap()).unwrap();
        assert_eq!(report["result"]["final_relative_l2_error"], 0.0);
        assert_eq!(out.exit_code, EXIT_PASS);
    }

    #[test]
    fn manifest_lists_existing_files_carrying_the_run_id() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(dir.path());
        let out = run(Command::Density, &cfg).unwrap();
        let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out.report_path).unwrap()).unwrap();
        let id = report["run_id"].as_str().unwrap().to_string();
        assert_eq!(id, cfg.run_id(Command::Density));
        for name in report["manifest"]["artifacts"].as_array().unwrap() {
            let text = std::fs::read_to_string(dir.path().join(name.as_str().unwrap())).unwrap();
            assert!(text.contains(&id), "{name} lacks the run id");
        }
        assert_eq!(out.exit_code, EXIT_PASS, "{:?}", out.failures);
    }
}

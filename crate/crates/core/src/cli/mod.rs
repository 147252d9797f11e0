//! Reproducible experiment runner behind the `mflab` binary.
//!
//! Exit codes: 0 success, 2 configuration or input error, 3 numerical
//! failure, 4 failed check.

pub mod config;
pub mod data;
mod output;

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use serde_json::json;

pub use config::ExperimentConfig;
pub use output::{read_trace_csv, TRACE_HEADER};

use crate::analysis::{self, TraceSeries};
use crate::error::Error;
use crate::flow::{self, FlowTrace, StopReason};
use crate::measures::{w2, w2_brute_force, DiscreteMeasure, ParameterPath};
use crate::model::{LossModel, VectorFieldModel};
use crate::objective::{max_relative_error, Problem};

pub const ENV_OUT: &str = "MFLAB_OUT";
pub const GRAD_CHECK_H: f64 = 1e-5;
pub const GRAD_CHECK_TOL: f64 = 1e-6;
pub const W2_SELFTEST_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub enum CliError {
    Config(String),
    Numerical(String),
    Check(String),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io(_) => 1,
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Check(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
            CliError::Check(m) => write!(f, "check failed: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(_) | Error::InvalidMeasure(_) | Error::DimensionMismatch { .. } => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

fn io_err(e: impl std::fmt::Display) -> CliError {
    CliError::Io(e.to_string())
}

/// Flags shared by the config-driven subcommands.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

/// Problem and initial path described by a config.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub problem: Problem,
    pub path0: ParameterPath,
}

const PATH_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

impl Experiment {
    pub fn from_config(config: ExperimentConfig) -> Result<Self, CliError> {
        let d = config.model.d;
        let model = VectorFieldModel::new(config.model.kind, d);
        let data = data::generate(&config.data, d, config.seed)?;
        let loss = LossModel::squared_error(data.radius());
        let problem = Problem::new(model, loss, data, config.flow.lambda, config.flow.steps_per_layer)?;
        let path0 = flow::init_path(
            config.path.layers,
            config.path.particles,
            config.model_m(),
            config.path.init_scale,
            config.path.smoothing,
            config.seed ^ PATH_STREAM,
        )?;
        Ok(Self { config, problem, path0 })
    }

    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self, CliError> {
        let mut config = ExperimentConfig::load(path).map_err(CliError::Config)?;
        if let Some(seed) = overrides.seed {
            config.seed = seed;
        }
        Self::from_config(config)
    }
}

/// `--out`, then `$MFLAB_OUT`, then the config's `io.out_dir`, then `mflab-out`.
pub fn resolve_out_dir(flag: Option<&Path>, config: Option<&ExperimentConfig>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(p) = std::env::var_os(ENV_OUT) {
        return PathBuf::from(p);
    }
    config.and_then(|c| c.io.out_dir.clone()).unwrap_or_else(|| PathBuf::from("mflab-out"))
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: Option<bool>,
    pub value: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub trace: FlowTrace,
    pub report: serde_json::Value,
}

fn manifest(command: &str, config: &ExperimentConfig) -> serde_json::Value {
    json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "seed": config.seed,
        "config": config,
    })
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(io_err)?;
    fs::write(path, text + "\n").map_err(io_err)
}

/// Runs the flow, streams `trace.csv`, writes snapshots, `report.json` and
/// `manifest.json`.
pub fn cmd_run(config_path: &Path, overrides: &Overrides) -> Result<RunSummary, CliError> {
    let exp = Experiment::load(config_path, overrides)?;
    let out_dir = resolve_out_dir(overrides.out.as_deref(), Some(&exp.config));
    fs::create_dir_all(&out_dir).map_err(io_err)?;
    write_json(&out_dir.join("manifest.json"), &manifest("run", &exp.config))?;

    let cfg = exp.config.flow.flow_config(exp.config.io.snapshot_stride);
    let mut writer = output::TraceWriter::create(&out_dir.join("trace.csv"))?;
    let result = flow::run_flow_with(&exp.problem, &exp.path0, &cfg, |rec| writer.push(rec));
    writer.finish()?;
    let trace = result?;

    let snap_dir = out_dir.join("snapshots");
    fs::create_dir_all(&snap_dir).map_err(io_err)?;
    for snap in &trace.snapshots {
        let mut file = fs::File::create(snap_dir.join(format!("snap_{:08}.bin", snap.record))).map_err(io_err)?;
        crate::measures::write_path_snapshot(&snap.path, &mut file).map_err(io_err)?;
    }
    fs::write(out_dir.join("final_path.json"), trace.final_path().to_json()).map_err(io_err)?;

    let report = run_report(&exp, &trace);
    write_json(&out_dir.join("report.json"), &report)?;
    Ok(RunSummary { out_dir, trace, report })
}

fn run_report(exp: &Experiment, trace: &FlowTrace) -> serde_json::Value {
    let lambda = exp.problem.lambda;
    let first = &trace.records[0];
    let mut checks = Vec::new();

    let diss = flow::dissipation_check(trace).ok();
    checks.push(Check {
        name: "dissipation_mismatch",
        passed: diss.map(|d| d.relative_mismatch <= 0.05),
        value: diss.map_or(f64::NAN, |d| d.relative_mismatch),
        threshold: 0.05,
    });
    let max_grad = trace.records.iter().map(|r| r.grad_inf).fold(0.0, f64::max);
    let support_bound = 2.0 * first.support_radius.max(max_grad / lambda);
    let max_support = trace.records.iter().map(|r| r.support_radius).fold(0.0, f64::max);
    checks.push(Check {
        name: "support_radius_bound",
        passed: Some(max_support <= support_bound),
        value: max_support,
        threshold: support_bound,
    });
    let max_dir = trace.records.iter().map(|r| r.dirichlet).fold(f64::NAN, f64::max);
    checks.push(Check {
        name: "dirichlet_energy_bound",
        passed: first.dirichlet.is_finite().then_some(max_dir <= 10.0 * first.dirichlet),
        value: max_dir,
        threshold: 10.0 * first.dirichlet,
    });
    if trace.stop == StopReason::SlopeBelowThreshold {
        checks.push(Check {
            name: "critical_point_residual",
            passed: Some(trace.last().grad_inf < 1e-4),
            value: trace.last().grad_inf,
            threshold: 1e-4,
        });
    }

    let series = TraceSeries::from(trace);
    let an = &exp.config.analysis;
    let fits = analysis::estimate_j_star(&series, an.tail_fraction).and_then(|js| {
        let ls = analysis::ls_fit(&series, js.value, an.gap_floor, an.tail_fraction)?;
        let rate = analysis::rate_fit(&series, js.value, &ls, an.tail_fraction)?;
        let dist = analysis::distance_bound_check(trace, js.value, &ls)?;
        Ok((js, ls, rate, dist))
    });
    let (alpha, c, branch, r2, j_star, extra) = match &fits {
        Ok((js, ls, rate, dist)) => {
            checks.push(Check {
                name: "distance_to_limit_bound",
                passed: Some(dist.violations == 0),
                value: dist.violations as f64,
                threshold: 0.0,
            });
            (
                json!(ls.alpha),
                json!(ls.c),
                json!(rate.branch),
                json!(rate.r2),
                json!(js.value),
                json!({ "ls_fit": ls, "rate_fit": { "fitted_rate": rate.fitted_rate, "predicted_rate": rate.predicted_rate, "c_hat": rate.c_hat }, "j_star_model": js.model, "limit_is_proxy": dist.limit_is_proxy }),
            )
        }
        Err(e) => {
            let null = serde_json::Value::Null;
            (null.clone(), null.clone(), null.clone(), null.clone(), null, json!({ "error": e.to_string() }))
        }
    };
    json!({
        "alpha": alpha,
        "C": c,
        "branch": branch,
        "R2": r2,
        "j_star": j_star,
        "checks": checks,
        "stop_reason": format!("{:?}", trace.stop),
        "steps": trace.steps,
        "dissipation": diss.map(|d| json!({"energy_drop": d.energy_drop, "dissipated": d.dissipated, "relative_mismatch": d.relative_mismatch, "slope_sq_integral": d.slope_sq_integral, "slope_sq_mismatch": d.slope_sq_mismatch})),
        "analysis": extra,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckSummary {
    pub coordinates: usize,
    pub max_rel_error: f64,
}

/// Adjoint gradient against central differences on the config's initial
/// path. `perturb` adds a constant to every adjoint entry (test hook).
pub fn cmd_grad_check(config_path: &Path, overrides: &Overrides, perturb: Option<f64>) -> Result<GradCheckSummary, CliError> {
    let exp = Experiment::load(config_path, overrides)?;
    let summary = grad_check(&exp.problem, &exp.path0, perturb)?;
    if summary.max_rel_error > GRAD_CHECK_TOL {
        return Err(CliError::Check(format!(
            "max relative error {:.3e} exceeds {GRAD_CHECK_TOL:e}",
            summary.max_rel_error
        )));
    }
    Ok(summary)
}

pub fn grad_check(problem: &Problem, path: &ParameterPath, perturb: Option<f64>) -> Result<GradCheckSummary, CliError> {
    let (mut adjoint, _) = problem.wasserstein_gradient(path)?;
    if let Some(delta) = perturb {
        for k in 0..adjoint.layers() {
            for j in 0..adjoint.particles() {
                adjoint.get_mut(k, j).iter_mut().for_each(|g| *g += delta);
            }
        }
    }
    let fd = problem.finite_difference_gradient(path, GRAD_CHECK_H)?;
    Ok(GradCheckSummary { coordinates: adjoint.as_slice().len(), max_rel_error: max_relative_error(&adjoint, &fd) })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelfTestSummary {
    pub instances: usize,
    pub max_abs_diff: f64,
}

/// Random uniform instances with `N ≤ 6`, `m ≤ 5`: exact solver against
/// permutation enumeration.
pub fn cmd_w2_selftest(seed: u64, instances: usize) -> Result<SelfTestSummary, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let n = rng.random_range(1..=6usize);
        let m = rng.random_range(1..=5usize);
        let mut cloud = |shift: f64| {
            let pts: Vec<f64> = (0..n * m).map(|_| rng.sample::<f64, _>(StandardNormal) + shift).collect();
            DiscreteMeasure::uniform_flat(m, pts)
        };
        let a = cloud(0.0)?;
        let b = cloud(0.5)?;
        let (exact, _) = w2(&a, &b)?;
        let brute = w2_brute_force(&a, &b)?;
        worst = worst.max((exact - brute).abs());
    }
    if worst > W2_SELFTEST_TOL {
        return Err(CliError::Check(format!("w2 differs from brute force by {worst:e}")));
    }
    Ok(SelfTestSummary { instances, max_abs_diff: worst })
}

/// Fits `J*`, `(α, C)` and the rate branch on an existing `trace.csv` and
/// writes `report.json` into `out_dir`.
pub fn cmd_rate_fit(trace_csv: &Path, out_dir: &Path, gap_floor: f64, tail_fraction: f64) -> Result<serde_json::Value, CliError> {
    let series = read_trace_csv(trace_csv)?;
    if series.is_empty() {
        return Err(CliError::Config(format!("{} has no records", trace_csv.display())));
    }
    let js = analysis::estimate_j_star(&series, tail_fraction)?;
    let ls = analysis::ls_fit(&series, js.value, gap_floor, tail_fraction)?;
    let rate = analysis::rate_fit(&series, js.value, &ls, tail_fraction)?;
    let report = json!({
        "alpha": ls.alpha,
        "C": ls.c,
        "branch": rate.branch,
        "R2": rate.r2,
        "j_star": js.value,
        "checks": [
            { "name": "r2_above_0.99", "passed": rate.r2 > 0.99, "value": rate.r2, "threshold": 0.99 },
            { "name": "tail_points", "passed": ls.points >= 3, "value": ls.points, "threshold": 3 },
        ],
        "analysis": { "ls_fit": ls, "fitted_rate": rate.fitted_rate, "predicted_rate": rate.predicted_rate, "c_hat": rate.c_hat, "j_star_model": js.model },
    });
    fs::create_dir_all(out_dir).map_err(io_err)?;
    write_json(&out_dir.join("report.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvexitySummary {
    pub geodesics: usize,
    pub max_ratio: f64,
    pub min_lambda_est: f64,
    pub ratios: Vec<f64>,
}

/// Probes `h(τ) = dJ/dτ` along random generalized geodesics whose three
/// anchor paths are drawn like the config's initial path from `draw_seed`.
pub fn convexity_sweep(exp: &Experiment, geodesics: usize, grid_points: usize, draw_seed: u64) -> Result<ConvexitySummary, CliError> {
    let cfg = &exp.config;
    let grid: Vec<f64> = (0..grid_points).map(|i| i as f64 / (grid_points - 1) as f64).collect();
    let draw = |tag: u64| {
        flow::init_path(
            cfg.path.layers,
            cfg.path.particles,
            cfg.model_m(),
            cfg.path.init_scale,
            cfg.path.smoothing,
            draw_seed.wrapping_mul(0x2545_f491_4f6c_dd1d).wrapping_add(tag),
        )
    };
    let mut ratios = Vec::with_capacity(geodesics);
    let mut min_lambda = f64::INFINITY;
    for g in 0..geodesics as u64 {
        let (p0, p1, p2) = (draw(3 * g)?, draw(3 * g + 1)?, draw(3 * g + 2)?);
        let report = analysis::convexity_probe(&exp.problem, &p1, &p2, &p0, &grid)?;
        if let (Some(r), Some(l)) = (report.lip_ratio, report.lambda_est) {
            ratios.push(r);
            min_lambda = min_lambda.min(l);
        }
    }
    let max_ratio = ratios.iter().fold(0.0, |m: f64, r| m.max(*r));
    Ok(ConvexitySummary { geodesics, max_ratio, min_lambda_est: min_lambda, ratios })
}

/// `probe_seed` defaults to the config seed.
pub fn cmd_convexity_probe(
    config_path: &Path,
    overrides: &Overrides,
    geodesics: usize,
    probe_seed: Option<u64>,
) -> Result<ConvexitySummary, CliError> {
    let exp = Experiment::load(config_path, overrides)?;
    let summary = convexity_sweep(&exp, geodesics, 11, probe_seed.unwrap_or(exp.config.seed))?;
    let out_dir = resolve_out_dir(overrides.out.as_deref(), Some(&exp.config));
    fs::create_dir_all(&out_dir).map_err(io_err)?;
    write_json(&out_dir.join("manifest.json"), &manifest("convexity-probe", &exp.config))?;
    write_json(&out_dir.join("convexity.json"), &summary)?;
    if !summary.max_ratio.is_finite() {
        return Err(CliError::Check("non-finite convexity ratio".into()));
    }
    Ok(summary)
}

//! Experiment orchestration: configuration, verification suites, reports.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{
    replica_rng, simulate, DivergedReplica, EngineError, EnsembleResult, EnsembleSnapshot, FddRequest,
    RunConfig, QUANTITIES,
};
use crate::limits::{fast_limit, ou_autocov, slow_limit, LimitError, LimitSpec, OuSampler, OuStart};
use crate::linalg::Matrix;
use crate::mdp::{GtdMatrices, IDENTITY_TOL};
use crate::problem::{GtdVariant, HurwitzReport, ProblemConfig, ProblemError, ProblemSpec};
use crate::schedule::{AssumptionReport, Scale, ScheduleError, StepSchedule};
use crate::stats::{
    autocov_estimate, empirical_cov, frobenius_rel, ks_test_1d, rate_slope, std_normal_cdf, CovEstimate,
    RateFit, Rule, StatsError, TestVerdict, VerdictContext,
};
use crate::trajectory::FddSamples;

/// Exit code when every verdict passes.
pub const EXIT_PASS: i32 = 0;
/// Exit code when at least one verdict fails.
pub const EXIT_VERDICT_FAILURE: i32 = 1;
/// Exit code for malformed or semantically invalid configurations.
pub const EXIT_CONFIG_ERROR: i32 = 2;
/// Exit code when too many replicas diverge.
pub const EXIT_DIVERGENCE: i32 = 3;

/// Relative Frobenius tolerance for ensemble covariances.
pub const COVARIANCE_TOL: f64 = 0.10;
/// Accepted range of the log-log rate slopes.
pub const RATE_SLOPE_RANGE: (f64, f64) = (0.9, 1.1);
/// Minimum coefficient of determination of the rate fits.
pub const RATE_MIN_R2: f64 = 0.98;
/// Checkpoint window used by the rate fits.
pub const RATE_WINDOW: (usize, usize) = (1 << 8, 1 << 14);
/// Autocovariance lags in rescaled time.
pub const FCLT_LAGS: [f64; 3] = [0.25, 0.5, 1.0];
/// Tolerance of engine trajectories against the OU autocovariance.
pub const FCLT_ENGINE_TOL: f64 = 0.15;
/// Tolerance of the exact OU sampler against its own autocovariance.
pub const FCLT_ORACLE_TOL: f64 = 0.05;
/// KS significance level for the marginal checks.
pub const KS_ALPHA: f64 = 0.01;
/// GTD2 and TDC ensemble covariances must agree to this tolerance.
pub const GTD_PAIR_TOL: f64 = 0.08;
/// GTD ensemble covariances must match the slow limit to this tolerance.
pub const GTD_LIMIT_TOL: f64 = 0.12;
/// Agreement required of the GTD2 and TDC limit laws.
pub const GTD_LIMIT_EQUALITY_TOL: f64 = 1e-10;
/// Largest admissible spread (max/median) of the scaled auxiliary gap.
pub const AUX_SPREAD_MAX: f64 = 3.0;
/// Final auxiliary gap relative to the slow rescaled iterate.
pub const AUX_FINAL_RATIO_MAX: f64 = 0.1;

/// Stream offset separating the OU oracle draws from the engine replicas.
const OU_STREAM_OFFSET: u64 = 1 << 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Covariance,
    Rates,
    Fclt,
    CltMarginals,
    GtdCompare,
    Assumptions,
}

impl Suite {
    fn needs_simulation(self) -> bool {
        !matches!(self, Suite::Assumptions)
    }
}

fn default_burn_in_fraction() -> f64 {
    0.5
}

fn default_horizon() -> f64 {
    2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunBlock {
    pub n_iters: usize,
    pub n_replicas: usize,
    pub master_seed: u64,
    /// Defaults to the powers of two below `n_iters`, then `n_iters`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoints: Option<Vec<usize>>,
    /// Start index of the interpolated trajectories as a fraction of `n_iters`.
    #[serde(default = "default_burn_in_fraction")]
    pub burn_in_fraction: f64,
    /// Explicit start index; overrides `burn_in_fraction`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub burn_in: Option<usize>,
    /// Trajectory horizon in rescaled time.
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_offset_x: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_offset_y: Option<Vec<f64>>,
}

impl RunBlock {
    pub fn checkpoints(&self) -> Vec<usize> {
        self.checkpoints.clone().unwrap_or_else(|| {
            let mut cps: Vec<usize> = (1..usize::BITS)
                .map(|k| 1usize << k)
                .take_while(|&c| c < self.n_iters)
                .collect();
            if self.n_iters >= 1 {
                cps.push(self.n_iters);
            }
            cps
        })
    }

    pub fn burn_in(&self) -> usize {
        self.burn_in
            .unwrap_or_else(|| ((self.n_iters as f64) * self.burn_in_fraction).floor() as usize)
            .max(1)
    }

    pub fn run_config(&self) -> RunConfig {
        RunConfig {
            n_iters: self.n_iters,
            master_seed: self.master_seed,
            n_replicas: self.n_replicas,
            checkpoints: self.checkpoints(),
            initial_offset_x: self.initial_offset_x.clone(),
            initial_offset_y: self.initial_offset_y.clone(),
        }
    }

    /// `[T − 1, T − 1 + s₁, …]`: a base time followed by the lagged times.
    pub fn fdd_times(&self) -> Vec<f64> {
        let base = (self.horizon - FCLT_LAGS[FCLT_LAGS.len() - 1]).max(0.0);
        std::iter::once(base).chain(FCLT_LAGS.iter().map(|s| base + s)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemConfig,
    pub schedule: StepSchedule,
    pub run: RunBlock,
    pub suite: Vec<Suite>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path)
            .map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            ExperimentError::Config(m) => ExperimentError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    fn check(&self) -> Result<(), ExperimentError> {
        if self.suite.is_empty() {
            return Err(ExperimentError::Config("suite: at least one suite is required".into()));
        }
        let r = &self.run;
        if !(0.0..1.0).contains(&r.burn_in_fraction) {
            return Err(ExperimentError::Config("run.burn_in_fraction: must lie in [0, 1)".into()));
        }
        if !(r.horizon > 0.0 && r.horizon.is_finite()) {
            return Err(ExperimentError::Config("run.horizon: must be positive".into()));
        }
        if self.suite.iter().any(|s| s.needs_simulation()) {
            r.run_config()
                .validate()
                .map_err(|e| ExperimentError::Config(format!("run: {e}")))?;
        }
        if self.suite.contains(&Suite::Rates) {
            let usable = r
                .checkpoints()
                .iter()
                .filter(|&&c| c >= RATE_WINDOW.0 && c <= RATE_WINDOW.1)
                .count();
            if usable < 4 {
                return Err(ExperimentError::Config(format!(
                    "run.checkpoints: rates needs at least 4 checkpoints in [{}, {}], got {usable}",
                    RATE_WINDOW.0, RATE_WINDOW.1
                )));
            }
        }
        if self.suite.contains(&Suite::GtdCompare)
            && !matches!(self.problem, ProblemConfig::Gtd2 { .. } | ProblemConfig::Tdc { .. })
        {
            return Err(ExperimentError::Config(
                "suite: gtd_compare needs a gtd2 or tdc problem".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0}")]
    Divergence(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

impl ExperimentError {
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Divergence(_) => EXIT_DIVERGENCE,
            _ => EXIT_CONFIG_ERROR,
        }
    }

    fn io(path: &Path, source: io::Error) -> Self {
        ExperimentError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

impl From<ProblemError> for ExperimentError {
    fn from(e: ProblemError) -> Self {
        ExperimentError::Config(format!("problem: {e}"))
    }
}

impl From<ScheduleError> for ExperimentError {
    fn from(e: ScheduleError) -> Self {
        ExperimentError::Config(format!("schedule: {e}"))
    }
}

impl From<LimitError> for ExperimentError {
    fn from(e: LimitError) -> Self {
        ExperimentError::Config(format!("limits: {e}"))
    }
}

impl From<StatsError> for ExperimentError {
    fn from(e: StatsError) -> Self {
        ExperimentError::Config(format!("statistics: {e}"))
    }
}

impl From<EngineError> for ExperimentError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::TooManyDivergences { .. } => ExperimentError::Divergence(e.to_string()),
            EngineError::Problem(p) => p.into(),
            EngineError::Schedule(s) => s.into(),
            other => ExperimentError::Config(format!("run: {other}")),
        }
    }
}

/// Options that override the configuration file.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub allow_invalid_schedule: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitPair {
    pub fast: LimitSpec,
    pub slow: LimitSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtdBlock {
    #[serde(flatten)]
    pub matrices: GtdMatrices,
    /// `max |C − Dᵀ − Aᵀ|`.
    pub identity_gap: f64,
    pub identity_holds: bool,
}

impl GtdBlock {
    fn new(m: &GtdMatrices) -> Self {
        let gap = m
            .c
            .sub(&m.d.transpose())
            .expect("square")
            .max_abs_diff(&m.a.transpose());
        Self {
            matrices: m.clone(),
            identity_gap: gap,
            identity_holds: gap <= IDENTITY_TOL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceRecord {
    pub name: String,
    pub n: usize,
    pub estimate: CovEstimate,
    pub target: Matrix,
    pub relative_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateRecord {
    pub quantity: String,
    pub checkpoints: Vec<usize>,
    pub mean_sq_norms: Vec<f64>,
    pub steps: Vec<f64>,
    pub fit: RateFit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutocovRecord {
    pub path: String,
    pub lag: f64,
    pub estimate: Matrix,
    pub target: Matrix,
    pub relative_error: f64,
}

/// Everything a run produces, serialized as `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub problem: String,
    pub config: ExperimentConfig,
    pub beta_tilde: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hurwitz: Option<HurwitzReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assumptions: Option<AssumptionReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limits: Option<LimitPair>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gtd: Option<GtdBlock>,
    pub covariances: Vec<CovarianceRecord>,
    pub rates: Vec<RateRecord>,
    pub autocovariances: Vec<AutocovRecord>,
    pub diverged: Vec<DivergedReplica>,
    pub verdicts: Vec<TestVerdict>,
    pub all_pass: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aborted: Option<String>,
}

impl Report {
    pub fn verdict(&self, name: &str) -> Option<&TestVerdict> {
        self.verdicts.iter().find(|v| v.name == name)
    }

    pub fn exit_code(&self) -> i32 {
        if self.aborted.is_some() {
            EXIT_CONFIG_ERROR
        } else if self.all_pass {
            EXIT_PASS
        } else {
            EXIT_VERDICT_FAILURE
        }
    }
}

/// Result of [`run_experiment`]: the report and the files written.
#[derive(Debug)]
pub struct Outcome {
    pub report: Report,
    pub out_dir: PathBuf,
    pub exit_code: i32,
}

/// Theory-only output written by [`emit_reference`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceReport {
    pub problem: String,
    pub beta_tilde: f64,
    pub hurwitz: HurwitzReport,
    pub linearization: crate::problem::Linearization,
    pub noise: crate::problem::NoiseCovariances,
    pub fast: LimitSpec,
    pub slow: LimitSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gtd: Option<GtdBlock>,
}

fn resolve_out(cfg: &ExperimentConfig, opts: &RunOptions) -> PathBuf {
    opts.out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn prepare_out(dir: &Path) -> Result<(), ExperimentError> {
    fs::create_dir_all(dir).map_err(|e| ExperimentError::Config(format!("output directory {}: {e}", dir.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ExperimentError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable report");
    text.push('\n');
    fs::write(path, text).map_err(|e| ExperimentError::io(path, e))
}

/// Computes limit laws, β̃ and Hurwitz reports without simulating.
pub fn reference(cfg: &ExperimentConfig) -> Result<ReferenceReport, ExperimentError> {
    let p = ProblemSpec::from_config(&cfg.problem)?;
    let hurwitz = p.require_hurwitz(&cfg.schedule)?;
    Ok(ReferenceReport {
        problem: p.name().to_string(),
        beta_tilde: cfg.schedule.beta_tilde()?,
        hurwitz,
        linearization: p.linearize().clone(),
        noise: p.asymptotic_noise_cov()?,
        fast: fast_limit(&p)?,
        slow: slow_limit(&p, &cfg.schedule)?,
        gtd: p.gtd_matrices().map(GtdBlock::new),
    })
}

/// Writes `limits.json` for the configuration at `config_path`.
pub fn emit_reference(config_path: &Path, out: Option<&Path>) -> Result<PathBuf, ExperimentError> {
    let cfg = ExperimentConfig::load(config_path)?;
    let opts = RunOptions {
        out: out.map(Path::to_path_buf),
        ..RunOptions::default()
    };
    let dir = resolve_out(&cfg, &opts);
    let rep = reference(&cfg)?;
    prepare_out(&dir)?;
    let path = dir.join("limits.json");
    write_json(&path, &rep)?;
    Ok(path)
}

/// Loads a configuration, runs its suites and writes the report files.
pub fn run_experiment(config_path: &Path, opts: &RunOptions) -> Result<Outcome, ExperimentError> {
    let cfg = ExperimentConfig::load(config_path)?;
    run_config(cfg, opts)
}

/// Same as [`run_experiment`] for an already parsed configuration.
pub fn run_config(mut cfg: ExperimentConfig, opts: &RunOptions) -> Result<Outcome, ExperimentError> {
    if let Some(seed) = opts.seed {
        cfg.run.master_seed = seed;
    }
    let out_dir = resolve_out(&cfg, opts);
    // The report must not depend on where it is written.
    cfg.output_dir = None;
    prepare_out(&out_dir)?;
    let started = std::time::Instant::now();
    let (report, data) = execute(&cfg, opts)?;

    write_json(&out_dir.join("report.json"), &report)?;
    let meta = serde_json::json!({
        "generated_unix_seconds": std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        "wall_seconds": started.elapsed().as_secs_f64(),
        "threads": rayon::current_num_threads(),
        "version": env!("CARGO_PKG_VERSION"),
    });
    write_json(&out_dir.join("metadata.json"), &meta)?;
    if let Some(res) = &data.ensemble {
        let path = out_dir.join("snapshots.csv");
        write_snapshots_csv(&path, &res.snapshots)?;
    }
    if !data.fdd_sets.is_empty() {
        write_fdd_csv(&out_dir.join("fdd.csv"), &data.fdd_sets)?;
    }
    let exit_code = report.exit_code();
    Ok(Outcome {
        report,
        out_dir,
        exit_code,
    })
}

/// Bulk data kept for the CSV outputs.
#[derive(Default)]
struct RunData {
    ensemble: Option<EnsembleResult>,
    fdd_sets: Vec<(&'static str, FddSamples)>,
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    problem: &'a ProblemSpec,
    schedule_label: String,
}

impl Ctx<'_> {
    fn at(&self, n: Option<usize>) -> VerdictContext {
        VerdictContext {
            problem: self.problem.name().to_string(),
            schedule: Some(self.schedule_label.clone()),
            n,
        }
    }
}

fn schedule_label(s: &StepSchedule) -> String {
    match s.kind() {
        crate::schedule::ScheduleKind::Polynomial { alpha0, a, beta0, b } => {
            format!("alpha0={alpha0},a={a},beta0={beta0},b={b}")
        }
        crate::schedule::ScheduleKind::Table { alpha, .. } => format!("table(len={})", alpha.len()),
    }
}

fn execute(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<(Report, RunData), ExperimentError> {
    let p = ProblemSpec::from_config(&cfg.problem)?;
    let sched = &cfg.schedule;
    let ctx = Ctx {
        cfg,
        problem: &p,
        schedule_label: schedule_label(sched),
    };
    let beta_tilde = sched.beta_tilde()?;
    let mut report = Report {
        problem: p.name().to_string(),
        config: cfg.clone(),
        beta_tilde,
        hurwitz: None,
        assumptions: None,
        limits: None,
        gtd: p.gtd_matrices().map(GtdBlock::new),
        covariances: Vec::new(),
        rates: Vec::new(),
        autocovariances: Vec::new(),
        diverged: Vec::new(),
        verdicts: Vec::new(),
        all_pass: false,
        aborted: None,
    };
    let mut data = RunData::default();

    let holder = p.holder();
    let assumptions = Some(sched.validate(holder.delta_h, holder.delta_f, holder.delta_g)?);
    let hurwitz = p.hurwitz_report(sched)?;
    report.hurwitz = Some(hurwitz.clone());
    report.assumptions = assumptions.clone();
    if cfg.suite.contains(&Suite::Assumptions) {
        report.verdicts.extend(assumption_verdicts(&ctx, assumptions.as_ref(), &hurwitz));
    }

    let simulate_needed = cfg.suite.iter().any(|s| s.needs_simulation());
    let schedule_ok = assumptions.as_ref().is_none_or(|a| a.pass);
    if simulate_needed && !schedule_ok && !opts.allow_invalid_schedule {
        let failing: Vec<String> = assumptions
            .iter()
            .flat_map(|a| a.failing())
            .map(|c| format!("({}) {}", c.condition, c.reason))
            .collect();
        report.aborted = Some(format!(
            "schedule violates step-size conditions {}; pass --allow-invalid-schedule to simulate anyway",
            failing.join("; ")
        ));
        report.all_pass = false;
        return Ok((report, data));
    }

    if simulate_needed {
        let limits = LimitPair {
            fast: fast_limit(&p)?,
            slow: slow_limit(&p, sched)?,
        };
        let run_cfg = cfg.run.run_config();
        let fdd_req = cfg.suite.contains(&Suite::Fclt).then(|| FddRequest {
            start: cfg.run.burn_in(),
            times: cfg.run.fdd_times(),
        });
        let res = simulate(&p, sched, &run_cfg, fdd_req.as_ref())?;
        report.diverged = res.diverged.clone();
        let last = res.snapshots.last().ok_or_else(|| ExperimentError::Config("run.checkpoints: empty".into()))?;

        for suite in &cfg.suite {
            match suite {
                Suite::Covariance => covariance_suite(&ctx, &limits, &res, &mut report)?,
                Suite::Rates => rates_suite(&ctx, &res, &mut report)?,
                Suite::Fclt => {
                    let fdd = res.fdd.as_ref().expect("FDD requested");
                    fclt_suite(&ctx, &limits, fdd, &mut report, &mut data)?;
                }
                Suite::CltMarginals => marginal_suite(&ctx, &limits.slow, last, &mut report)?,
                Suite::GtdCompare => gtd_suite(&ctx, &limits, last, &run_cfg, &mut report)?,
                Suite::Assumptions => {}
            }
        }
        report.limits = Some(limits);
        data.ensemble = Some(res);
    }
    report.all_pass = report.verdicts.iter().all(|v| v.pass);
    Ok((report, data))
}

fn assumption_verdicts(ctx: &Ctx, a: Option<&AssumptionReport>, h: &HurwitzReport) -> Vec<TestVerdict> {
    let mut out = Vec::new();
    if let Some(a) = a {
        for c in &a.conditions {
            out.push(
                TestVerdict::new(
                    format!("assumptions.condition_{}", c.condition),
                    if c.pass { 1.0 } else { 0.0 },
                    None,
                    Rule::AtLeast { threshold: 1.0 },
                    ctx.at(None),
                )
                .with_detail(c.reason.clone()),
            );
        }
    }
    out.push(
        TestVerdict::new(
            "assumptions.hurwitz_fast",
            h.fast.min_real_part,
            None,
            Rule::Above { threshold: 0.0 },
            ctx.at(None),
        )
        .with_detail("minimum real part of the eigenvalues of B1"),
    );
    out.push(
        TestVerdict::new(
            "assumptions.hurwitz_slow",
            h.slow.min_real_part,
            None,
            Rule::Above { threshold: 0.0 },
            ctx.at(None),
        )
        .with_detail("minimum real part of the eigenvalues of B3 - beta_tilde I/2"),
    );
    out
}

fn norms(m: &Matrix) -> impl Iterator<Item = f64> + '_ {
    (0..m.rows()).map(move |r| m.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    s / n as f64
}

fn covariance_suite(ctx: &Ctx, limits: &LimitPair, res: &EnsembleResult, report: &mut Report) -> Result<(), ExperimentError> {
    let last = res.snapshots.last().expect("checked");
    for (name, samples, target) in [
        ("x_check", &last.x_check, &limits.fast.stationary_cov),
        ("y_check", &last.y_check, &limits.slow.stationary_cov),
        ("z_check", &last.z_check, &limits.slow.stationary_cov),
    ] {
        let est = empirical_cov(samples)?;
        let rel = frobenius_rel(&est.matrix, target);
        report.verdicts.push(TestVerdict::at_most(
            format!("covariance.{name}"),
            rel,
            COVARIANCE_TOL,
            ctx.at(Some(last.n)),
        ));
        report.covariances.push(CovarianceRecord {
            name: name.to_string(),
            n: last.n,
            estimate: est,
            target: target.clone(),
            relative_error: rel,
        });
    }

    // The auxiliary sequence differs from y̌ by √κ B₂B₁⁻¹ x̌, which must
    // vanish at the rate √κ.
    let coupling = {
        let lin = ctx.problem.linearize();
        lin.b2.matmul(&lin.b1.inverse().map_err(|_| ExperimentError::Config("B1 is singular".into()))?)
            .expect("shapes")
    };
    let mut scaled = Vec::new();
    let mut bound_ok = true;
    let mut worst_bound = 0.0f64;
    for s in &res.snapshots {
        let kappa = ctx.cfg.schedule.step_at(s.n - 1)?.kappa;
        let gap = mean((0..s.y_check.rows()).map(|r| {
            s.z_check
                .row(r)
                .iter()
                .zip(s.y_check.row(r))
                .map(|(z, y)| (z - y) * (z - y))
                .sum::<f64>()
                .sqrt()
        }));
        let bound = 2.0 * kappa.sqrt() * coupling.frobenius_norm() * mean(norms(&s.x_check));
        if bound > 0.0 {
            worst_bound = worst_bound.max(gap / bound);
        }
        bound_ok &= gap <= bound || gap == 0.0;
        scaled.push(gap / kappa.sqrt());
    }
    let mut sorted = scaled.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    let max = sorted[sorted.len() - 1];
    let spread = if median > 0.0 { max / median } else if max == 0.0 { 1.0 } else { f64::INFINITY };
    report.verdicts.push(
        TestVerdict::new(
            "auxiliary.scaled_gap_spread",
            spread,
            None,
            Rule::Below { threshold: AUX_SPREAD_MAX },
            ctx.at(None),
        )
        .with_detail("max/median over checkpoints of mean|z_check - y_check| / sqrt(kappa)"),
    );
    let final_ratio = {
        let gap = mean((0..last.y_check.rows()).map(|r| {
            last.z_check
                .row(r)
                .iter()
                .zip(last.y_check.row(r))
                .map(|(z, y)| (z - y) * (z - y))
                .sum::<f64>()
                .sqrt()
        }));
        let y = mean(norms(&last.y_check));
        if y > 0.0 { gap / y } else { 0.0 }
    };
    report.verdicts.push(TestVerdict::new(
        "auxiliary.final_gap_ratio",
        final_ratio,
        None,
        Rule::Below { threshold: AUX_FINAL_RATIO_MAX },
        ctx.at(Some(last.n)),
    ));
    report.verdicts.push(
        TestVerdict::new(
            "auxiliary.gap_bound",
            if bound_ok { worst_bound } else { f64::INFINITY },
            None,
            Rule::AtMost { threshold: 1.0 },
            ctx.at(None),
        )
        .with_detail("largest ratio of mean|z_check - y_check| to 2 sqrt(kappa) |B2 B1^-1| mean|x_check|"),
    );
    Ok(())
}

fn rates_suite(ctx: &Ctx, res: &EnsembleResult, report: &mut Report) -> Result<(), ExperimentError> {
    let window: Vec<&EnsembleSnapshot> = res
        .snapshots
        .iter()
        .filter(|s| s.n >= RATE_WINDOW.0 && s.n <= RATE_WINDOW.1)
        .collect();
    let ns: Vec<usize> = window.iter().map(|s| s.n).collect();
    for (quantity, scale) in [("x_hat", Scale::Alpha), ("y_hat", Scale::Beta)] {
        let m: Vec<f64> = window.iter().map(|s| s.mean_sq_norm(quantity)).collect();
        let steps = ns
            .iter()
            .map(|&n| ctx.cfg.schedule.step(scale, n))
            .collect::<Result<Vec<_>, _>>()?;
        let fit = rate_slope(&ns, &m, &steps)?;
        report.verdicts.push(TestVerdict::within(
            format!("rates.{quantity}.slope"),
            fit.slope,
            RATE_SLOPE_RANGE.0,
            RATE_SLOPE_RANGE.1,
            ctx.at(None),
        ));
        report.verdicts.push(TestVerdict::new(
            format!("rates.{quantity}.r_squared"),
            fit.r_squared,
            None,
            Rule::Above { threshold: RATE_MIN_R2 },
            ctx.at(None),
        ));
        report.rates.push(RateRecord {
            quantity: quantity.to_string(),
            checkpoints: ns.clone(),
            mean_sq_norms: m,
            steps,
            fit,
        });
    }
    Ok(())
}

/// Checks autocovariances `E[U(t₀)U(t₀+s)ᵀ]` of `fdd` against `lim`.
fn autocov_verdicts(
    ctx: &Ctx,
    label: &str,
    fdd: &FddSamples,
    lim: &LimitSpec,
    tol: f64,
    report: &mut Report,
) -> Result<(), ExperimentError> {
    for (k, &lag) in FCLT_LAGS.iter().enumerate() {
        let est = autocov_estimate(fdd, 0, k + 1)?;
        let target = ou_autocov(lim, lag);
        let rel = frobenius_rel(&est, &target);
        report.verdicts.push(TestVerdict::at_most(
            format!("fclt.{label}.lag_{lag}"),
            rel,
            tol,
            ctx.at(None),
        ));
        report.autocovariances.push(AutocovRecord {
            path: label.to_string(),
            lag,
            estimate: est,
            target,
            relative_error: rel,
        });
    }
    Ok(())
}

/// Exact OU paths on the FDD lag grid, one stream per replica.
pub fn ou_ensemble(lim: &LimitSpec, n_replicas: usize, seed: u64, stream_base: u64) -> Result<FddSamples, LimitError> {
    let mut times = vec![0.0];
    times.extend(FCLT_LAGS);
    let sampler = OuSampler::new(lim, &times, OuStart::Stationary)?;
    let rows: Vec<Vec<f64>> = (0..n_replicas)
        .into_par_iter()
        .map(|r| {
            let mut rng = replica_rng(seed, stream_base + r as u64);
            sampler.sample(&mut rng).into_iter().flatten().collect()
        })
        .collect();
    Ok(FddSamples::from_rows(times, lim.dim(), rows))
}

fn fclt_suite(
    ctx: &Ctx,
    limits: &LimitPair,
    fdd: &crate::engine::FddBundle,
    report: &mut Report,
    data: &mut RunData,
) -> Result<(), ExperimentError> {
    autocov_verdicts(ctx, "xbar", &fdd.xbar, &limits.fast, FCLT_ENGINE_TOL, report)?;
    autocov_verdicts(ctx, "ybar", &fdd.ybar, &limits.slow, FCLT_ENGINE_TOL, report)?;
    let n = fdd.ybar.n_replicas();
    let seed = ctx.cfg.run.master_seed;
    let ou_fast = ou_ensemble(&limits.fast, n, seed, OU_STREAM_OFFSET)?;
    let ou_slow = ou_ensemble(&limits.slow, n, seed, 2 * OU_STREAM_OFFSET)?;
    autocov_verdicts(ctx, "ou_fast", &ou_fast, &limits.fast, FCLT_ORACLE_TOL, report)?;
    autocov_verdicts(ctx, "ou_slow", &ou_slow, &limits.slow, FCLT_ORACLE_TOL, report)?;
    data.fdd_sets = vec![
        ("Xbar", fdd.xbar.clone()),
        ("Ybar", fdd.ybar.clone()),
        ("Zbar", fdd.zbar.clone()),
        ("OU_fast", ou_fast),
        ("OU_slow", ou_slow),
    ];
    Ok(())
}

/// Per-coordinate KS tests of `y̌` standardized by the slow stationary variances.
pub fn marginal_verdicts(
    snapshot: &EnsembleSnapshot,
    slow: &LimitSpec,
    ctx: VerdictContext,
) -> Result<Vec<TestVerdict>, StatsError> {
    let y = &snapshot.y_check;
    (0..y.cols())
        .map(|i| {
            let sd = slow.stationary_cov[(i, i)].sqrt();
            let z: Vec<f64> = (0..y.rows()).map(|r| y[(r, i)] / sd).collect();
            ks_test_1d(format!("clt_marginals.y_check_{i}"), &z, std_normal_cdf, ctx.clone())
        })
        .collect()
}

fn marginal_suite(ctx: &Ctx, slow: &LimitSpec, last: &EnsembleSnapshot, report: &mut Report) -> Result<(), ExperimentError> {
    let v = marginal_verdicts(last, slow, ctx.at(Some(last.n)))?;
    debug_assert!(v.iter().all(|v| v.rule == Rule::PValueAbove { alpha: KS_ALPHA }));
    report.verdicts.extend(v);
    Ok(())
}

fn gtd_suite(
    ctx: &Ctx,
    limits: &LimitPair,
    last: &EnsembleSnapshot,
    run_cfg: &RunConfig,
    report: &mut Report,
) -> Result<(), ExperimentError> {
    let (mdp, variant) = match &ctx.cfg.problem {
        ProblemConfig::Gtd2 { mdp } => (mdp.clone(), GtdVariant::Gtd2),
        ProblemConfig::Tdc { mdp } => (mdp.clone(), GtdVariant::Tdc),
        _ => unreachable!("checked at load"),
    };
    let other_variant = match variant {
        GtdVariant::Gtd2 => GtdVariant::Tdc,
        GtdVariant::Tdc => GtdVariant::Gtd2,
    };
    let mdp = mdp.unwrap_or_else(crate::mdp::MdpSpec::benchmark);
    let other = ProblemSpec::gtd(mdp, other_variant)?;
    let sched = &ctx.cfg.schedule;

    let gtd = report.gtd.clone().expect("GTD problem");
    report.verdicts.push(TestVerdict::at_most(
        "gtd_compare.identity",
        gtd.identity_gap,
        IDENTITY_TOL,
        ctx.at(None),
    ));
    let other_slow = slow_limit(&other, sched)?;
    let gap = [
        limits.slow.drift.max_abs_diff(&other_slow.drift),
        limits.slow.diffusion_cov.max_abs_diff(&other_slow.diffusion_cov),
        limits.slow.stationary_cov.max_abs_diff(&other_slow.stationary_cov),
    ]
    .into_iter()
    .fold(0.0, f64::max);
    report.verdicts.push(TestVerdict::at_most(
        "gtd_compare.limit_equality",
        gap,
        GTD_LIMIT_EQUALITY_TOL,
        ctx.at(None),
    ));

    let other_res = simulate(&other, sched, run_cfg, None)?;
    report.diverged.extend(other_res.diverged.iter().cloned());
    let other_last = other_res.snapshots.last().expect("checkpoints");
    let mine = empirical_cov(&last.y_check)?;
    let theirs = empirical_cov(&other_last.y_check)?;
    let target = &limits.slow.stationary_cov;
    let names = |v: GtdVariant| match v {
        GtdVariant::Gtd2 => "gtd2",
        GtdVariant::Tdc => "tdc",
    };
    let (gtd2, tdc) = match variant {
        GtdVariant::Gtd2 => (&mine, &theirs),
        GtdVariant::Tdc => (&theirs, &mine),
    };
    report.verdicts.push(TestVerdict::at_most(
        "gtd_compare.gtd2_vs_tdc",
        frobenius_rel(&gtd2.matrix, &tdc.matrix),
        GTD_PAIR_TOL,
        ctx.at(Some(last.n)),
    ));
    for (v, est) in [(GtdVariant::Gtd2, gtd2), (GtdVariant::Tdc, tdc)] {
        let rel = frobenius_rel(&est.matrix, target);
        report.verdicts.push(TestVerdict::at_most(
            format!("gtd_compare.{}_vs_sigma_y", names(v)),
            rel,
            GTD_LIMIT_TOL,
            ctx.at(Some(last.n)),
        ));
        report.covariances.push(CovarianceRecord {
            name: format!("{}.y_check", names(v)),
            n: last.n,
            estimate: est.clone(),
            target: target.clone(),
            relative_error: rel,
        });
    }
    Ok(())
}

/// `checkpoint_n,replica_id,quantity,coord,value`.
pub fn write_snapshots_csv(path: &Path, snapshots: &[EnsembleSnapshot]) -> Result<(), ExperimentError> {
    let file = fs::File::create(path).map_err(|e| ExperimentError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut line = String::new();
    let io_err = |e| ExperimentError::io(path, e);
    writeln!(w, "checkpoint_n,replica_id,quantity,coord,value").map_err(io_err)?;
    for s in snapshots {
        for (row, &id) in s.replica_ids.iter().enumerate() {
            for q in QUANTITIES {
                let m = s.quantity(q).expect("known quantity");
                for (c, v) in m.row(row).iter().enumerate() {
                    line.clear();
                    let _ = writeln!(line, "{},{},{},{},{}", s.n, id, q, c, v);
                    w.write_all(line.as_bytes()).map_err(io_err)?;
                }
            }
        }
    }
    w.flush().map_err(io_err)
}

/// `path,replica_id,time,coord,value`.
pub fn write_fdd_csv(path: &Path, sets: &[(&str, FddSamples)]) -> Result<(), ExperimentError> {
    let file = fs::File::create(path).map_err(|e| ExperimentError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| ExperimentError::io(path, e);
    let mut line = String::new();
    writeln!(w, "path,replica_id,time,coord,value").map_err(io_err)?;
    for (name, f) in sets {
        for r in 0..f.n_replicas() {
            for (k, t) in f.times().iter().enumerate() {
                for (c, v) in f.value(r, k).iter().enumerate() {
                    line.clear();
                    let _ = writeln!(line, "{name},{r},{t},{c},{v}");
                    w.write_all(line.as_bytes()).map_err(io_err)?;
                }
            }
        }
    }
    w.flush().map_err(io_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_support::linear_2d_config;

    fn config(suite: Vec<Suite>) -> ExperimentConfig {
        ExperimentConfig {
            problem: linear_2d_config(),
            schedule: StepSchedule::polynomial(1.0, 0.6, 1.0, 0.9).unwrap(),
            run: RunBlock {
                n_iters: 512,
                n_replicas: 200,
                master_seed: 1,
                checkpoints: None,
                burn_in_fraction: 0.5,
                burn_in: None,
                horizon: 2.0,
                initial_offset_x: None,
                initial_offset_y: None,
            },
            suite,
            output_dir: None,
        }
    }

    #[test]
    fn default_checkpoints_are_powers_of_two() {
        let c = config(vec![Suite::Rates]);
        assert_eq!(c.run.checkpoints(), vec![2, 4, 8, 16, 32, 64, 128, 256, 512]);
        let mut r = c.run.clone();
        r.n_iters = 20_000;
        let cps = r.checkpoints();
        assert_eq!(cps.last(), Some(&20_000));
        assert!(cps.contains(&16_384));
        assert_eq!(r.burn_in(), 10_000);
        assert_eq!(r.fdd_times(), vec![1.0, 1.25, 1.5, 2.0]);
    }

    #[test]
    fn config_round_trip() {
        let c = config(vec![Suite::Covariance, Suite::Fclt]);
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), c);
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["suite"], serde_json::json!(["covariance", "fclt"]));
        assert_eq!(v["schedule"]["beta0"], 1.0);
    }

    #[test]
    fn config_errors_carry_location() {
        let err = ExperimentConfig::from_json("{\"problem\": {\"kind\": \"shb\"},\n \"bogus\": 1}").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2"), "{msg}");
        assert_eq!(err.exit_code(), EXIT_CONFIG_ERROR);
        let mut c = config(vec![]);
        assert!(ExperimentConfig::from_json(&serde_json::to_string(&c).unwrap()).is_err());
        c.suite = vec![Suite::GtdCompare];
        let err = ExperimentConfig::from_json(&serde_json::to_string(&c).unwrap()).unwrap_err();
        assert!(err.to_string().contains("gtd_compare"));
    }

    #[test]
    fn small_run_produces_all_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let opts = RunOptions {
            out: Some(dir.path().to_path_buf()),
            ..RunOptions::default()
        };
        let mut c = config(vec![Suite::Covariance, Suite::Fclt, Suite::CltMarginals, Suite::Assumptions]);
        c.run.burn_in = Some(100);
        c.run.horizon = 1.5;
        let out = run_config(c, &opts).unwrap();
        for f in ["report.json", "metadata.json", "snapshots.csv", "fdd.csv"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let snap = fs::read_to_string(dir.path().join("snapshots.csv")).unwrap();
        assert!(snap.starts_with("checkpoint_n,replica_id,quantity,coord,value\n2,0,x_hat,0,"));
        let fdd = fs::read_to_string(dir.path().join("fdd.csv")).unwrap();
        assert!(fdd.starts_with("path,replica_id,time,coord,value\nXbar,0,0.5,0,"));
        for p in ["Ybar", "Zbar", "OU_fast", "OU_slow"] {
            assert!(fdd.contains(&format!("\n{p},")));
        }
        assert!(out.report.verdict("covariance.y_check").is_some());
        assert!(out.report.verdict("fclt.ou_slow.lag_1").is_some());
        assert!(out.report.verdict("clt_marginals.y_check_1").is_some());
        assert!(out.report.verdict("assumptions.condition_v").unwrap().pass);
        assert_eq!(out.exit_code, out.report.exit_code());
    }

    #[test]
    fn invalid_schedule_aborts_simulation_but_reports_conditions() {
        let mut c = config(vec![Suite::Covariance, Suite::Assumptions]);
        c.schedule = StepSchedule::polynomial(1.0, 0.9, 1.0, 0.6).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let opts = RunOptions {
            out: Some(dir.path().to_path_buf()),
            ..RunOptions::default()
        };
        let out = run_config(c.clone(), &opts).unwrap();
        assert_eq!(out.exit_code, EXIT_CONFIG_ERROR);
        assert!(out.report.aborted.is_some());
        assert!(out.report.verdicts.iter().any(|v| !v.pass));
        assert!(out.report.covariances.is_empty());
    }

    #[test]
    fn reference_for_averaging() {
        let mut c = config(vec![Suite::Assumptions]);
        c.problem = ProblemConfig::PrAveraging { q: None, sigma_xi: None };
        c.schedule = StepSchedule::polynomial(1.0, 0.6, 1.0, 1.0).unwrap();
        let r = reference(&c).unwrap();
        assert_eq!(r.slow.drift, Matrix::identity(2).scale(0.5));
        assert_eq!(r.beta_tilde, 1.0);
        assert!(r.gtd.is_none());
    }

    #[test]
    fn reference_reports_not_hurwitz() {
        let mut c = config(vec![Suite::Assumptions]);
        c.problem = ProblemConfig::PrAveraging { q: None, sigma_xi: None };
        c.schedule = StepSchedule::polynomial(1.0, 0.6, 0.25, 1.0).unwrap();
        let err = reference(&c).unwrap_err();
        assert!(err.to_string().contains("not Hurwitz"), "{err}");
        assert_eq!(err.exit_code(), EXIT_CONFIG_ERROR);
    }
}

//! Configuration, commands and exports behind the `fragstop` binary.
//!
//! A run is described by a flat TOML file; unknown keys are rejected. Every
//! JSON document carries `schema_version`, every CSV starts with a
//! `# fragstop.v1` comment line.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expfun::{self, SharedSample, StabilityReport};
use crate::fragsim::{self, Ensemble, LineOptions, StoppingLineSpec, TestFunction};
use crate::levy::{DislocationModel, ModelParams};
use crate::pathsim::{self, ZState};
use crate::rng::RngStreamPlan;
use crate::stats::{ratio_estimate, CheckOutcome, Estimate};
use crate::stopsolve::{self, GeneratorPoint, SolverResult, SIGMA};
use crate::SCHEMA_VERSION;

/// Absolute floor added to deterministic-check tolerances (finite
/// differences and quadrature), so closed-form configs pass without
/// statistical slack.
pub const NUMERIC_FLOOR: f64 = 1e-6;

/// Process exit codes.
pub mod exit {
    pub const OK: u8 = 0;
    pub const OTHER: u8 = 1;
    pub const CONFIG: u8 = 2;
    pub const ASSUMPTION: u8 = 3;
    pub const VERIFICATION: u8 = 4;
    pub const RESOURCE_CAP: u8 = 5;
}

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Io(_) => exit::CONFIG,
        Error::Assumption(_) | Error::InvalidModel(_) => exit::ASSUMPTION,
        Error::ResourceCap(_) => exit::RESOURCE_CAP,
        _ => exit::OTHER,
    }
}

fn default_seed() -> u64 {
    1
}
fn default_samples() -> usize {
    crate::expfun::DEFAULT_SAMPLES
}
fn default_paths() -> usize {
    100_000
}
fn default_runs() -> usize {
    10_000
}
fn default_rel_tol() -> f64 {
    crate::expfun::DEFAULT_REL_TOL
}
fn default_laplace_levels() -> Vec<f64> {
    vec![1.5, 2.0]
}
fn default_martingale_times() -> Vec<f64> {
    vec![0.5, 1.0, 2.0]
}
fn default_generator_points() -> Vec<f64> {
    vec![0.2, 0.5, 0.9]
}
fn default_generator_above() -> f64 {
    2.0
}
fn default_sweep_points() -> usize {
    25
}
fn default_many_to_one_time() -> f64 {
    1.0
}
fn default_mass_threshold() -> f64 {
    0.1
}
fn default_dominance() -> Vec<f64> {
    vec![0.8, 1.25]
}
fn default_true() -> bool {
    true
}
fn default_one() -> f64 {
    1.0
}
fn default_dust() -> f64 {
    fragsim::DEFAULT_DUST_FLOOR
}
fn default_horizon() -> f64 {
    fragsim::DEFAULT_HORIZON
}
fn default_block_cap() -> usize {
    fragsim::DEFAULT_BLOCK_CAP
}

/// Which stopping line `simulate` runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LineKind {
    Optimal,
    FixedTime,
    MassBelow,
}

/// Contents of a run configuration file. See the README for every key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// `degenerate`, `binary_uniform`, `binary_point` or `binary_beta`.
    pub family: String,
    pub rate: Option<f64>,
    pub split: Option<f64>,
    pub shape: Option<f64>,
    pub gamma: f64,
    pub theta: f64,
    pub q: f64,
    pub c: f64,
    #[serde(default)]
    pub allow_zero_q: bool,

    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Size of the shared `I∞` sample.
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// Single-particle paths per Monte Carlo check.
    #[serde(default = "default_paths")]
    pub paths: usize,
    /// Fragmentation runs per ensemble.
    #[serde(default = "default_runs")]
    pub runs: usize,
    #[serde(default = "default_rel_tol")]
    pub rel_tol: f64,

    /// First-passage levels, as multiples of `c`.
    #[serde(default = "default_laplace_levels")]
    pub laplace_levels: Vec<f64>,
    #[serde(default = "default_martingale_times")]
    pub martingale_times: Vec<f64>,
    /// Generator points below `b*`, as multiples of `b*`.
    #[serde(default = "default_generator_points")]
    pub generator_points: Vec<f64>,
    /// Generator point above `b*`, as a multiple of `b*`.
    #[serde(default = "default_generator_above")]
    pub generator_above: f64,
    /// Start value for the threshold sweep and optimal-line checks, which
    /// need a start in the continuation region. Default: `c` when
    /// `c ≤ b*/2`, else `b*/4`.
    pub line_c: Option<f64>,
    /// Explicit threshold grid for the sweep check. Default:
    /// `line_c·(1.2, 1.4, …)` with `sweep_points` points.
    pub sweep_grid: Option<Vec<f64>>,
    #[serde(default = "default_sweep_points")]
    pub sweep_points: usize,
    #[serde(default = "default_many_to_one_time")]
    pub many_to_one_time: f64,
    #[serde(default = "default_mass_threshold")]
    pub mass_threshold: f64,
    #[serde(default = "default_dominance")]
    pub dominance_factors: Vec<f64>,
    /// Solve and hold out at `samples` and `4·samples` to check that the
    /// slope-gap tolerance shrinks.
    #[serde(default = "default_true")]
    pub slope_scaling: bool,
    /// Test hook: multiplies the solved `b*` before any check uses it.
    #[serde(default = "default_one")]
    pub b_star_scale: f64,

    #[serde(default)]
    pub literal_theorem_statistic: bool,
    pub line: Option<LineKind>,
    pub line_t: Option<f64>,
    pub line_a: Option<f64>,
    /// Threshold for `line = "optimal"`; solved when absent.
    pub line_b: Option<f64>,
    #[serde(default = "default_dust")]
    pub dust_floor: f64,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default = "default_block_cap")]
    pub block_cap: usize,
    /// `simulate` also writes the first run's tagged-lineage path here.
    pub path_out: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn model(&self) -> Result<DislocationModel> {
        let need = |v: Option<f64>, key: &str| {
            v.ok_or_else(|| Error::Config(format!("family `{}` needs key `{key}`", self.family)))
        };
        let forbid = |v: Option<f64>, key: &str| match v {
            Some(_) => Err(Error::Config(format!("key `{key}` does not apply to family `{}`", self.family))),
            None => Ok(()),
        };
        let m = match self.family.as_str() {
            "degenerate" => {
                forbid(self.rate, "rate")?;
                forbid(self.split, "split")?;
                forbid(self.shape, "shape")?;
                DislocationModel::Degenerate
            }
            "binary_uniform" => {
                forbid(self.split, "split")?;
                forbid(self.shape, "shape")?;
                DislocationModel::BinaryUniform { rate: need(self.rate, "rate")? }
            }
            "binary_point" => {
                forbid(self.shape, "shape")?;
                DislocationModel::BinaryPoint { rate: need(self.rate, "rate")?, split: need(self.split, "split")? }
            }
            "binary_beta" => {
                forbid(self.split, "split")?;
                DislocationModel::BinaryBeta { rate: need(self.rate, "rate")?, shape: need(self.shape, "shape")? }
            }
            other => return Err(Error::Config(format!("unknown family `{other}`"))),
        };
        Ok(m)
    }

    /// Model and parameters, with every violated assumption reported.
    pub fn validated(&self) -> Result<(DislocationModel, ModelParams)> {
        let model = self.model()?;
        let v = crate::levy::check_assumptions(&model, self.gamma, self.theta, self.q, self.c, self.allow_zero_q);
        if !v.is_empty() {
            return Err(Error::Assumption(v));
        }
        if self.samples < 2 || self.paths == 0 || self.runs == 0 {
            return Err(Error::Config("samples must be ≥ 2; paths and runs must be ≥ 1".into()));
        }
        if !(self.rel_tol > 0.0 && self.rel_tol < 1.0) {
            return Err(Error::Config(format!("rel_tol must be in (0, 1), got {}", self.rel_tol)));
        }
        if !(self.b_star_scale > 0.0) {
            return Err(Error::Config("b_star_scale must be positive".into()));
        }
        let params = ModelParams::with_options(&model, self.gamma, self.theta, self.q, self.c, self.allow_zero_q)?;
        Ok((model, params))
    }

    pub fn plan(&self) -> RngStreamPlan {
        RngStreamPlan::new(self.seed)
    }

    pub fn line_options(&self) -> LineOptions {
        LineOptions {
            dust_floor: self.dust_floor,
            horizon: self.horizon,
            block_cap: self.block_cap,
            literal_statistic: self.literal_theorem_statistic,
        }
    }

    pub fn line_c(&self, b_star: f64) -> f64 {
        self.line_c.unwrap_or(if self.c <= 0.5 * b_star { self.c } else { 0.25 * b_star })
    }

    pub fn sweep_grid(&self, line_c: f64) -> Vec<f64> {
        self.sweep_grid
            .clone()
            .unwrap_or_else(|| (0..self.sweep_points).map(|j| line_c * (1.0 + 0.2 * (j + 1) as f64)).collect())
    }

    /// Sets one numeric key by name (used by `sweep`).
    pub fn set_axis(&mut self, axis: &str, value: f64) -> Result<()> {
        match axis {
            "gamma" => self.gamma = value,
            "theta" => self.theta = value,
            "q" => self.q = value,
            "c" => self.c = value,
            "rate" => self.rate = Some(value),
            "split" => self.split = Some(value),
            "shape" => self.shape = Some(value),
            other => return Err(Error::Config(format!("unknown sweep axis `{other}`"))),
        }
        Ok(())
    }
}

/// Command-line overrides applied on top of a config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub samples: Option<usize>,
    pub runs: Option<usize>,
    pub literal_theorem_statistic: bool,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(n) = self.samples {
            cfg.samples = n;
        }
        if let Some(n) = self.runs {
            cfg.runs = n;
        }
        cfg.literal_theorem_statistic |= self.literal_theorem_statistic;
    }
}

/// Runs `f` on a pool of `workers` threads (the global pool when `None`).
pub fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| Error::Config(format!("cannot start {n} workers: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

fn draw_sample(cfg: &RunConfig, model: &DislocationModel, params: &ModelParams) -> Result<SharedSample> {
    SharedSample::draw(params, model, cfg.samples, cfg.rel_tol, &cfg.plan())
}

/// `V*(c)` with the sample's standard error (ratio estimator).
pub fn value_star_estimate(sample: &SharedSample, b_star: f64, c: f64) -> Estimate {
    if c > b_star {
        return Estimate::exact(c);
    }
    let k = sample.order();
    let num: Vec<f64> = sample.draws.iter().map(|i| (c + i).powf(k)).collect();
    let den: Vec<f64> = sample.draws.iter().map(|i| (b_star + i).powf(k)).collect();
    let r = ratio_estimate(&num, &den);
    Estimate { value: b_star * r.value, std_error: b_star * r.std_error, n_samples: r.n_samples }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveOutput {
    pub schema_version: &'static str,
    #[serde(flatten)]
    pub result: SolverResult,
    /// Standard error of `E[(b* + I)^k]` on half and all of the draws.
    pub top_moment_stability: StabilityReport,
}

/// levy → expfun → stopsolve; the generator residual at the configured
/// points is added to the diagnostics.
pub fn cmd_solve(cfg: &RunConfig) -> Result<SolveOutput> {
    let (model, params) = cfg.validated()?;
    let sample = draw_sample(cfg, &model, &params)?;
    let mut result = stopsolve::solve_b_star(&params, &sample)?;
    let b = result.b_star;
    for &x in &cfg.generator_points {
        result.diagnostics.generator.push(stopsolve::generator_check(&params, &model, &sample, b, x * b, false)?);
    }
    result.diagnostics.generator.push(stopsolve::generator_check(
        &params,
        &model,
        &sample,
        b,
        cfg.generator_above * b,
        true,
    )?);
    let top_moment_stability = expfun::variance_stability(&sample, b, sample.order())?;
    if top_moment_stability.unstable {
        log::warn!("standard error of the top-order moment is unstable under doubling the sample");
    }
    Ok(SolveOutput { schema_version: SCHEMA_VERSION, result, top_moment_stability })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub schema_version: &'static str,
    pub seed: u64,
    pub b_star_solved: f64,
    pub b_star_scale: f64,
    /// Threshold every check used.
    pub b_star: f64,
    pub line_c: f64,
    pub checks: Vec<CheckOutcome>,
    /// Literal-statistic payoff next to the optimal-line payoff; reported,
    /// not checked.
    pub literal_statistic_payoff: Option<Estimate>,
    pub passed: bool,
}

/// Two-sided below `b*`, one-sided (`≤ 0`) above it.
pub fn generator_outcome(p: &GeneratorPoint, b: f64, above: bool) -> CheckOutcome {
    let tol = SIGMA * p.std_error + NUMERIC_FLOOR;
    if above {
        CheckOutcome::at_most(
            format!("generator residual of V* at x = {:.3}·b*", p.x / b),
            p.residual,
            0.0,
            p.std_error,
            tol,
        )
    } else {
        CheckOutcome::new(
            format!("generator residual of Ṽ at x = {:.3}·b*", p.x / b),
            p.residual,
            0.0,
            p.std_error,
            tol,
        )
    }
}

/// Runs every verification check and collects the outcomes.
pub fn cmd_verify(cfg: &RunConfig) -> Result<VerifyReport> {
    let (model, params) = cfg.validated()?;
    let plan = cfg.plan();
    let sample = draw_sample(cfg, &model, &params)?;
    let solved = stopsolve::solve_b_star(&params, &sample)?;
    let b = solved.b_star * cfg.b_star_scale;
    let mut checks = Vec::new();

    checks.push(CheckOutcome::new("f(b*) equals κ/γ", solved.f_at_b_star, solved.order, 0.0, 1e-9 * solved.order));

    // Smooth pasting and generator.
    let gaps = stopsolve::pasting_check(&sample, b);
    checks.push(CheckOutcome::new("value gap Ṽ(b*) - b*", gaps.value_gap, 0.0, 0.0, 1e-6 * b));
    checks.push(CheckOutcome::new("slope gap Ṽ'(b*) - 1", gaps.slope_gap, 0.0, 0.0, 0.02));
    if cfg.slope_scaling {
        let sc = stopsolve::slope_gap_scaling(&params, &model, cfg.samples, cfg.rel_tol, &plan)?;
        checks.extend(sc.outcomes());
    }
    for &x in &cfg.generator_points {
        let p = stopsolve::generator_check(&params, &model, &sample, b, x * b, false)?;
        checks.push(generator_outcome(&p, b, false));
    }
    let p = stopsolve::generator_check(&params, &model, &sample, b, cfg.generator_above * b, true)?;
    checks.push(generator_outcome(&p, b, true));

    // First-passage Laplace transform.
    for &lv in &cfg.laplace_levels {
        let l = stopsolve::first_passage_laplace_check(&params, &model, &sample, lv * params.c, cfg.paths, &plan)?;
        checks.push(l.outcome());
    }

    // Martingale and supermartingale.
    let mut times = vec![0.0];
    times.extend(cfg.martingale_times.iter().copied());
    let m = stopsolve::martingale_check(&params, &model, &sample, b, &times, cfg.paths, &plan)?;
    checks.extend(m.constancy_outcomes("e^{-λt}Ṽ(Z_t)"));
    let s = stopsolve::supermartingale_check(&params, &model, &sample, b, &times, cfg.paths, &plan)?;
    checks.extend(s.supermartingale_outcomes("e^{-λt}V*(Z_t)"));

    // Threshold sweep and the optimal line, from a start below b*.
    let line_c = cfg.line_c(b);
    let lp = params.with_c(line_c);
    let sw = stopsolve::threshold_sweep(&lp, &model, &cfg.sweep_grid(line_c), cfg.paths, &plan)?;
    checks.push(sw.brackets(b));

    // Many-to-one.
    for f in [TestFunction::Identity, TestFunction::Square] {
        let r = fragsim::many_to_one_fixed_time(&model, &params, f, cfg.many_to_one_time, cfg.runs, &plan)?;
        checks.extend(r.outcomes());
    }
    let r = fragsim::many_to_one_stopping_line(&model, &params, cfg.mass_threshold, cfg.runs, &plan)?;
    checks.extend(r.outcomes());

    let opts = LineOptions { literal_statistic: false, ..cfg.line_options() };
    let v = value_star_estimate(&sample, b, line_c);
    let ol = fragsim::optimal_line_check(
        &model,
        &lp,
        b,
        v,
        &cfg.dominance_factors,
        &opts,
        cfg.runs,
        &plan,
        cfg.literal_theorem_statistic,
    )?;
    checks.extend(ol.outcomes());

    let passed = checks.iter().all(|c| c.passed);
    Ok(VerifyReport {
        schema_version: SCHEMA_VERSION,
        seed: cfg.seed,
        b_star_solved: solved.b_star,
        b_star_scale: cfg.b_star_scale,
        b_star: b,
        line_c,
        checks,
        literal_statistic_payoff: ol.literal_payoff,
        passed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: f64,
    pub b_star: f64,
    pub value_at_c: f64,
}

/// Solves at every grid value of `axis`, each on its own shared sample
/// drawn with the configured seed.
pub fn cmd_sweep(cfg: &RunConfig, axis: &str, grid: &[f64]) -> Result<Vec<SweepRow>> {
    // Reject an unknown axis even when the grid is empty.
    cfg.clone().set_axis(axis, 0.0)?;
    grid.iter()
        .map(|&v| {
            let mut c = cfg.clone();
            c.set_axis(axis, v)?;
            let (model, params) = c.validated()?;
            let sample = draw_sample(&c, &model, &params)?;
            let r = stopsolve::solve_b_star(&params, &sample)?;
            Ok(SweepRow { value: v, b_star: r.b_star, value_at_c: r.value_at_c })
        })
        .collect()
}

fn monotonicity(xs: &[f64]) -> &'static str {
    let up = xs.windows(2).all(|w| w[1] >= w[0]);
    let down = xs.windows(2).all(|w| w[1] <= w[0]);
    match (up, down) {
        (true, true) => "constant",
        (true, false) => "nondecreasing",
        (false, true) => "nonincreasing",
        _ => "not monotone",
    }
}

/// CSV with header `axis,b_star,value_at_c`, followed by comment lines
/// summarizing the monotonicity of each column.
pub fn write_sweep_csv<W: Write>(mut w: W, axis: &str, rows: &[SweepRow]) -> Result<()> {
    writeln!(w, "# {SCHEMA_VERSION}")?;
    let mut cw = csv::Writer::from_writer(&mut w);
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    cw.write_record([axis, "b_star", "value_at_c"]).map_err(csv_err)?;
    for r in rows {
        cw.write_record([r.value.to_string(), r.b_star.to_string(), r.value_at_c.to_string()]).map_err(csv_err)?;
    }
    cw.flush()?;
    drop(cw);
    if !rows.is_empty() {
        let b: Vec<f64> = rows.iter().map(|r| r.b_star).collect();
        let v: Vec<f64> = rows.iter().map(|r| r.value_at_c).collect();
        writeln!(w, "# b_star {}", monotonicity(&b))?;
        writeln!(w, "# value_at_c {}", monotonicity(&v))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulateSummary {
    pub schema_version: &'static str,
    pub seed: u64,
    pub spec: StoppingLineSpec,
    pub literal_theorem_statistic: bool,
    pub n_runs: usize,
    pub payoff: Estimate,
    /// Single-particle `V*(c)` when the line is the optimal one.
    pub value_star: Option<Estimate>,
    pub unstopped_runs: usize,
    pub dust_frozen: usize,
    pub max_blocks: usize,
}

/// Runs a fragmentation ensemble under the configured line.
pub fn cmd_simulate(cfg: &RunConfig) -> Result<(Ensemble, SimulateSummary)> {
    let (model, params) = cfg.validated()?;
    let plan = cfg.plan();
    let kind = cfg.line.unwrap_or(LineKind::Optimal);
    let missing = |k: &str| Error::Config(format!("line `{kind:?}` needs key `{k}`"));
    let (spec, value_star) = match kind {
        LineKind::FixedTime => (StoppingLineSpec::FixedTime { t: cfg.line_t.ok_or_else(|| missing("line_t"))? }, None),
        LineKind::MassBelow => (StoppingLineSpec::MassBelow { a: cfg.line_a.ok_or_else(|| missing("line_a"))? }, None),
        LineKind::Optimal => {
            let sample = draw_sample(cfg, &model, &params)?;
            let b = match cfg.line_b {
                Some(b) => b,
                None => stopsolve::solve_b_star(&params, &sample)?.b_star * cfg.b_star_scale,
            };
            (StoppingLineSpec::OptimalStatistic { b_star: b }, Some(value_star_estimate(&sample, b, params.c)))
        }
    };
    let e = fragsim::run_ensemble(&model, &params, &spec, &cfg.line_options(), cfg.runs, &plan, "simulate")?;
    let summary = SimulateSummary {
        schema_version: SCHEMA_VERSION,
        seed: cfg.seed,
        spec,
        literal_theorem_statistic: cfg.literal_theorem_statistic,
        n_runs: cfg.runs,
        payoff: e.payoff,
        value_star,
        unstopped_runs: e.unstopped_runs,
        dust_frozen: e.dust_frozen,
        max_blocks: e.max_blocks,
    };
    Ok((e, summary))
}

/// `Z` along the tagged lineage of the ensemble's first run, up to the
/// tagged block's freezing time (or the horizon).
pub fn tagged_path(ensemble: &Ensemble, params: &ModelParams, horizon: f64) -> Result<Vec<ZState>> {
    let run = ensemble.runs.first().ok_or_else(|| Error::Config("no runs to export a path from".into()))?;
    let end = run.tagged_block().and_then(|b| b.frozen_at).unwrap_or(horizon);
    Ok(pathsim::z_path_from_skeleton(params, &fragsim::tagged_skeleton(run, params.theta, end)))
}

/// CSV with header `t,Y,Z,accrued`.
pub fn write_path_csv<W: Write>(mut w: W, states: &[ZState]) -> Result<()> {
    writeln!(w, "# {SCHEMA_VERSION}")?;
    writeln!(w, "t,Y,Z,accrued")?;
    for s in states {
        writeln!(w, "{},{},{},{}", s.t, s.y, s.z, s.accrued)?;
    }
    Ok(())
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map(|s| s + "\n").map_err(|e| Error::Numeric(format!("JSON encoding failed: {e}")))
}

//! Acceptance suite. Each criterion prints its individual checks and then one
//! `[PASS]`/`[FAIL]` line; the test fails if any criterion fails.
//!
//! Lines go straight to the stderr handle rather than through `eprintln!`,
//! so they appear in the log even when the test harness captures output.

use std::io::Write;
use std::path::PathBuf;
use std::process::Command;
use std::time::{Duration, Instant};

use fragstop::expfun::{self, SharedSample};
use fragstop::fragsim::{self, TestFunction};
use fragstop::harness::{self, RunConfig};
use fragstop::levy::{self, DislocationModel, ModelParams};
use fragstop::rng::RngStreamPlan;
use fragstop::stats::CheckOutcome;
use fragstop::stopsolve::{self, SIGMA};
use fragstop::Result;

fn emit(line: &str) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{line}");
}

fn reference_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/reference.toml")
}

fn reference() -> RunConfig {
    RunConfig::load(&reference_path()).expect("reference config")
}

/// Runs one criterion, prints its checks and verdict, returns the verdict.
fn criterion(id: u32, title: &str, limit: Option<Duration>, body: impl FnOnce() -> Result<Vec<CheckOutcome>>) -> bool {
    let start = Instant::now();
    let result = body();
    let elapsed = start.elapsed();
    let mut ok = match &result {
        Ok(checks) => {
            for c in checks {
                emit(&format!("    {}", c.line()));
            }
            !checks.is_empty() && checks.iter().all(|c| c.passed)
        }
        Err(e) => {
            emit(&format!("    error: {e}"));
            false
        }
    };
    let timing = match limit {
        Some(l) => {
            let in_time = elapsed <= l;
            ok &= in_time;
            format!(
                "{:.2} s, limit {:.0} s{}",
                elapsed.as_secs_f64(),
                l.as_secs_f64(),
                if in_time { "" } else { " EXCEEDED" }
            )
        }
        None => format!("{:.2} s", elapsed.as_secs_f64()),
    };
    emit(&format!("[{}] criterion {id}: {title} ({timing})", if ok { "PASS" } else { "FAIL" }));
    ok
}

fn exact(name: impl Into<String>, value: f64, target: f64, tol: f64) -> CheckOutcome {
    CheckOutcome::new(name, value, target, 0.0, tol)
}

struct Solved {
    cfg: RunConfig,
    model: DislocationModel,
    params: ModelParams,
    plan: RngStreamPlan,
    sample: SharedSample,
    b_star: f64,
}

type Suite = fn(&Solved, f64) -> Result<Vec<CheckOutcome>>;

fn solved(cfg: RunConfig) -> Result<Solved> {
    let (model, params) = cfg.validated()?;
    let plan = cfg.plan();
    let sample = SharedSample::draw(&params, &model, cfg.samples, cfg.rel_tol, &plan)?;
    let b_star = stopsolve::solve_b_star(&params, &sample)?.b_star;
    Ok(Solved { cfg, model, params, plan, sample, b_star })
}

fn degenerate_suite() -> Result<Vec<CheckOutcome>> {
    let model = DislocationModel::Degenerate;
    let params = ModelParams::new(&model, 1.0, 1.0, 1.0, 0.5)?;
    let plan = RngStreamPlan::new(1);
    let sample = SharedSample::draw(&params, &model, 256, 1e-6, &plan)?;
    let tol = 1e-8;
    let mut out = vec![exact("κ(λ)", params.kappa, 2.0, tol)];
    let worst = sample.draws.iter().map(|i| (i - 1.0).abs()).fold(0.0, f64::max);
    out.push(exact("max |I∞ - 1| over draws", worst, 0.0, tol));
    for b in [0.25, 0.5, 1.0, 2.0, 4.0] {
        out.push(exact(format!("f({b})"), expfun::f_of_b(&sample, b), 1.0 + 1.0 / b, tol));
    }
    let b = stopsolve::solve_b_star(&params, &sample)?.b_star;
    out.push(exact("b*", b, 1.0, tol));
    for x in [0.1, 0.5, 0.9, 1.0] {
        let closed = (x + 1.0) * (x + 1.0) / 4.0;
        out.push(exact(format!("Ṽ({x})"), stopsolve::value_tilde(&sample, b, x), closed, tol));
    }
    for x in [0.5, 1.0, 2.0, 3.0] {
        let closed = if x < 1.0 { (x + 1.0) * (x + 1.0) / 4.0 } else { x };
        out.push(exact(format!("V*({x})"), stopsolve::value_star(&sample, b, x), closed, tol));
    }
    for level in [0.75, 1.0, 2.0] {
        let l = stopsolve::first_passage_laplace_check(&params, &model, &sample, level, 1000, &plan)?;
        let closed = ((params.c + 1.0) / (level + 1.0)).powi(2);
        out.push(exact(format!("E[e^(-λτ_b)] by simulation, b = {level}"), l.mc.value, closed, tol));
        out.push(exact(format!("E[e^(-λτ_b)] by moment ratio, b = {level}"), l.analytic.value, closed, tol));
    }
    Ok(out)
}

fn exponent_suite() -> Result<Vec<CheckOutcome>> {
    let tol = 1e-12;
    let grid = [-1.5, -0.9, -0.5, -0.1, 0.0, 0.1, 0.5, 1.0, 2.0, 3.0, 5.0, 10.0];
    let mut out = Vec::new();
    for rate in [1.0, 2.5] {
        let uniform = DislocationModel::BinaryUniform { rate };
        let point = DislocationModel::BinaryPoint { rate, split: 0.5 };
        for &p in &grid {
            if p > uniform.p_lower() {
                out.push(exact(
                    format!("uniform Φ({p}), ρ = {rate}"),
                    levy::phi(&uniform, p)?,
                    rate * p / (p + 2.0),
                    tol,
                ));
            }
            if p > point.p_lower() {
                let closed = rate * (1.0 - 2f64.powf(-p));
                out.push(exact(format!("point Φ({p}), ρ = {rate}"), levy::phi(&point, p)?, closed, tol));
            }
        }
    }
    let params = reference().validated()?.1;
    out.push(exact("κ for the reference config", params.kappa, (1.0 + 17f64.sqrt()) / 2.0, 1e-10));
    Ok(out)
}

fn moment_suite() -> Result<Vec<CheckOutcome>> {
    let cfg = reference();
    let (model, params) = cfg.validated()?;
    let sample = SharedSample::draw(&params, &model, cfg.samples, cfg.rel_tol, &cfg.plan())?;
    let top = (params.kappa / params.gamma).floor() as u32;
    let mut out = Vec::new();
    for n in 1..=top.min(2) {
        let mc = expfun::estimate_moment(&sample, 0.0, f64::from(n))?;
        let exact = expfun::moment_recursion(&params, &model, n)?;
        out.push(CheckOutcome::new(
            format!("E^κ[I∞^{n}], {} draws", sample.len()),
            mc.value,
            exact,
            mc.std_error,
            SIGMA * mc.std_error,
        ));
    }
    Ok(out)
}

fn laplace_suite() -> Result<Vec<CheckOutcome>> {
    let s = solved(reference())?;
    let mut out = Vec::new();
    for factor in [1.5, 2.0] {
        let l = stopsolve::first_passage_laplace_check(
            &s.params,
            &s.model,
            &s.sample,
            factor * s.params.c,
            s.cfg.paths,
            &s.plan,
        )?;
        out.push(exact(format!("paths missing the level b = {}", l.b), l.misses as f64, 0.0, 0.0));
        out.push(l.outcome());
    }
    Ok(out)
}

fn sweep_suite(s: &Solved, b: f64) -> Result<Vec<CheckOutcome>> {
    let line_c = s.cfg.line_c(b);
    let grid = s.cfg.sweep_grid(line_c);
    let sw = stopsolve::threshold_sweep(&s.params.with_c(line_c), &s.model, &grid, s.cfg.paths, &s.plan)?;
    Ok(vec![exact("sweep thresholds", grid.len() as f64, 25.0, 0.0), sw.brackets(b)])
}

fn martingale_suite() -> Result<Vec<CheckOutcome>> {
    let s = solved(reference())?;
    let times = [0.0, 0.5, 1.0, 2.0];
    let m = stopsolve::martingale_check(&s.params, &s.model, &s.sample, s.b_star, &times, s.cfg.paths, &s.plan)?;
    let mut out = m.constancy_outcomes("e^{-λt}Ṽ(Z_t)");
    let v = stopsolve::supermartingale_check(&s.params, &s.model, &s.sample, s.b_star, &times, s.cfg.paths, &s.plan)?;
    out.extend(v.supermartingale_outcomes("e^{-λt}V*(Z_t)"));
    Ok(out)
}

fn pasting_suite(s: &Solved, b: f64) -> Result<Vec<CheckOutcome>> {
    let gaps = stopsolve::pasting_check(&s.sample, b);
    let mut out = vec![
        exact("value gap Ṽ(b*) - b*", gaps.value_gap, 0.0, 1e-6 * b),
        exact("slope gap Ṽ'(b*) - 1", gaps.slope_gap, 0.0, 0.02),
    ];
    out.extend(stopsolve::slope_gap_scaling(&s.params, &s.model, s.cfg.samples, s.cfg.rel_tol, &s.plan)?.outcomes());
    for x in [0.2, 0.5, 0.9] {
        let p = stopsolve::generator_check(&s.params, &s.model, &s.sample, b, x * b, false)?;
        out.push(harness::generator_outcome(&p, b, false));
    }
    for x in [1.25, 2.0] {
        let p = stopsolve::generator_check(&s.params, &s.model, &s.sample, b, x * b, true)?;
        out.push(harness::generator_outcome(&p, b, true));
    }
    Ok(out)
}

fn many_to_one_suite() -> Result<Vec<CheckOutcome>> {
    let cfg = reference();
    let (model, params) = cfg.validated()?;
    let plan = cfg.plan();
    let mut out = Vec::new();
    for f in [TestFunction::Identity, TestFunction::Square] {
        out.extend(fragsim::many_to_one_fixed_time(&model, &params, f, 1.0, cfg.runs, &plan)?.outcomes());
    }
    out.extend(fragsim::many_to_one_stopping_line(&model, &params, 0.1, cfg.runs, &plan)?.outcomes());
    Ok(out)
}

fn optimal_line_suite(s: &Solved, b: f64) -> Result<Vec<CheckOutcome>> {
    let line_c = s.cfg.line_c(b);
    let v = harness::value_star_estimate(&s.sample, b, line_c);
    let opts = fragsim::LineOptions { literal_statistic: false, ..s.cfg.line_options() };
    let check = fragsim::optimal_line_check(
        &s.model,
        &s.params.with_c(line_c),
        b,
        v,
        &[0.8, 1.25],
        &opts,
        s.cfg.runs,
        &s.plan,
        false,
    )?;
    Ok(check.outcomes())
}

/// The corrupted threshold must break each of the three criteria.
fn negative_control() -> Result<Vec<CheckOutcome>> {
    let s = solved(reference())?;
    let b = 1.5 * s.b_star;
    let mut out = Vec::new();
    let groups: [(&str, Suite); 3] = [
        ("threshold sweep", sweep_suite),
        ("pasting and generator", pasting_suite),
        ("optimal line", optimal_line_suite),
    ];
    for (name, suite) in groups {
        let checks = suite(&s, b)?;
        let failed = checks.iter().filter(|c| !c.passed).count();
        for c in checks.iter().filter(|c| !c.passed) {
            emit(&format!("      corrupted: {}", c.line()));
        }
        let mut c =
            CheckOutcome::new(format!("{name} fails with b* × 1.5 (failing checks)"), failed as f64, 1.0, 0.0, 0.0);
        c.passed = failed > 0;
        out.push(c);
    }
    out.extend(determinism()?);
    Ok(out)
}

fn cli(args: &[&str]) -> Vec<u8> {
    let out = Command::new(env!("CARGO_BIN_EXE_fragstop")).args(args).output().expect("run fragstop");
    assert!(out.status.success(), "fragstop {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out.stdout
}

fn determinism() -> Result<Vec<CheckOutcome>> {
    let config = reference_path();
    let config = config.to_str().unwrap();
    let mut out = Vec::new();
    let mut same = |name: &str, a: Vec<u8>, b: Vec<u8>| {
        out.push(exact(
            format!("{name}: byte-identical rerun"),
            f64::from(u8::from(a == b && !a.is_empty())),
            1.0,
            0.0,
        ));
    };

    let solve = ["solve", "--config", config, "--samples", "20000"];
    same("solve", cli(&solve), cli(&solve));
    let one = [&solve[..], &["--workers", "1"]].concat();
    let three = [&solve[..], &["--workers", "3"]].concat();
    same("solve across worker counts", cli(&one), cli(&three));

    let sim = ["simulate", "--config", config, "--runs", "500"];
    same("simulate summary", cli(&sim), cli(&sim));

    let mut cfg = reference();
    cfg.samples = 20_000;
    cfg.paths = 5_000;
    cfg.runs = 500;
    cfg.slope_scaling = false;
    let a = harness::with_workers(Some(1), || harness::cmd_verify(&cfg).and_then(|r| harness::to_json(&r)))??;
    let b = harness::with_workers(Some(2), || harness::cmd_verify(&cfg).and_then(|r| harness::to_json(&r)))??;
    same("verify report across worker counts", a.into_bytes(), b.into_bytes());
    Ok(out)
}

#[test]
fn acceptance() {
    let secs = Duration::from_secs;
    let results = [
        criterion(1, "deterministic oracle suite", Some(secs(1)), degenerate_suite),
        criterion(2, "closed-form exponents and κ", Some(secs(1)), exponent_suite),
        criterion(3, "moment oracle agreement", Some(secs(30)), moment_suite),
        criterion(4, "first-passage Laplace transform", Some(secs(60)), laplace_suite),
        criterion(5, "threshold optimality sweep", Some(secs(120)), || {
            let s = solved(reference())?;
            sweep_suite(&s, s.b_star)
        }),
        criterion(6, "martingale constancy and supermartingale", Some(secs(120)), martingale_suite),
        criterion(7, "smooth pasting and generator", Some(secs(60)), || {
            let s = solved(reference())?;
            pasting_suite(&s, s.b_star)
        }),
        criterion(8, "many-to-one, fixed time and stopping line", Some(secs(120)), many_to_one_suite),
        criterion(9, "optimal stopping line end to end", Some(secs(300)), || {
            let s = solved(reference())?;
            optimal_line_suite(&s, s.b_star)
        }),
        criterion(10, "negative control and determinism", None, negative_control),
    ];
    let passed = results.iter().filter(|&&r| r).count();
    emit(&format!("acceptance: {passed}/{} criteria passed", results.len()));
    assert_eq!(passed, results.len(), "acceptance criteria failed");
}

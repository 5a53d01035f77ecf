//! Optimal threshold `b*`, the value functions `Ṽ` and `V*`, and the checks
//! that certify them.
//!
//! With `k = κ(λ)/γ` and `I∞` drawn under the tilted law,
//!
//! ```text
//! f(b)  = E[(b + I∞)^k] / (b E[(b + I∞)^{k-1}]),      f(b*) = k,
//! Ṽ(c)  = b* E[(c + I∞)^k] / E[(b* + I∞)^k],
//! V*(c) = Ṽ(c) for c ≤ b*, c otherwise.
//! ```
//!
//! Every expectation is an average over one [`SharedSample`], so `f` is
//! monotone samplewise and derivatives of `Ṽ` are noise-free differences.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::expfun::{chunked_sum, SharedSample};
use crate::levy::{DislocationModel, ModelParams};
use crate::pathsim::{self, DEFAULT_PASSAGE_HORIZON};
use crate::rng::RngStreamPlan;
use crate::stats::{ratio_estimate, CheckOutcome, Estimate};

/// Relative bisection tolerance on `b`.
pub const BISECTION_REL_TOL: f64 = 1e-12;
/// Maximum number of bracket doublings (or halvings).
pub const MAX_DOUBLINGS: usize = 60;
/// Relative step of the central differences taken on `Ṽ`.
pub const DIFF_STEP: f64 = 1e-4;
/// Absolute tolerance of the generator's jump-measure quadrature.
pub const GENERATOR_QUAD_TOL: f64 = 1e-9;
/// Batches used to propagate Monte Carlo error through the generator.
pub const GENERATOR_BATCHES: usize = 20;
/// Number of standard errors every statistical check allows.
pub const SIGMA: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SampleMeta {
    pub seed: u64,
    pub n_samples: usize,
    pub rel_tol: f64,
}

/// Residual `(L - λ)V` at one point, with its propagated standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GeneratorPoint {
    pub x: f64,
    pub residual: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostics {
    pub value_gap: f64,
    pub slope_gap: f64,
    pub generator: Vec<GeneratorPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolverResult {
    pub b_star: f64,
    pub kappa: f64,
    /// `κ/γ`.
    pub order: f64,
    /// `V*(c)`.
    pub value_at_c: f64,
    pub f_at_b_star: f64,
    pub sample_meta: SampleMeta,
    pub diagnostics: Diagnostics,
}

/// Solves `f(b) = κ/γ` on the shared sample, bracketing from `params.c`.
pub fn solve_b_star(params: &ModelParams, sample: &SharedSample) -> Result<SolverResult> {
    let b_star = solve_b_star_from(sample, params.c)?;
    let k = sample.order();
    let pasting = pasting_check(sample, b_star);
    Ok(SolverResult {
        b_star,
        kappa: sample.kappa,
        order: k,
        value_at_c: value_star(sample, b_star, params.c),
        f_at_b_star: crate::expfun::f_of_b(sample, b_star),
        sample_meta: SampleMeta { seed: sample.seed, n_samples: sample.len(), rel_tol: sample.rel_tol },
        diagnostics: Diagnostics { value_gap: pasting.value_gap, slope_gap: pasting.slope_gap, generator: Vec::new() },
    })
}

/// Root of `f(b) = κ/γ` with the bracket grown geometrically from `start`.
pub fn solve_b_star_from(sample: &SharedSample, start: f64) -> Result<f64> {
    let k = sample.order();
    if !(k > 1.0) {
        return Err(Error::assumption("kappa>gamma", format!("κ/γ = {k} must exceed 1")));
    }
    if sample.is_empty() {
        return Err(Error::Domain("empty shared sample".into()));
    }
    if !(start > 0.0) {
        return Err(Error::Domain(format!("bracket start must be positive, got {start}")));
    }
    // f is decreasing: f(lo) > k ≥ f(hi).
    let f = |b: f64| crate::expfun::f_of_b(sample, b);
    let (mut lo, mut hi) = (start, start);
    if f(start) > k {
        let mut n = 0;
        while f(hi) > k {
            lo = hi;
            hi *= 2.0;
            n += 1;
            if n > MAX_DOUBLINGS {
                return Err(Error::Bracket(format!("f(b) > κ/γ up to b = {hi}")));
            }
        }
    } else {
        let mut n = 0;
        while f(lo) <= k {
            hi = lo;
            lo *= 0.5;
            n += 1;
            if n > MAX_DOUBLINGS {
                return Err(Error::Bracket(format!("f(b) ≤ κ/γ down to b = {lo}")));
            }
        }
    }
    while hi - lo > BISECTION_REL_TOL * lo {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) > k {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// `Ṽ(c) = b* E[(c + I)^k] / E[(b* + I)^k]` on the shared draws.
pub fn value_tilde(sample: &SharedSample, b_star: f64, c_query: f64) -> f64 {
    if c_query == b_star {
        return b_star;
    }
    let k = sample.order();
    b_star * sample.power_sum(c_query, k) / sample.power_sum(b_star, k)
}

/// `V*(c)`: `Ṽ(c)` in the continuation region `c ≤ b*`, `c` above it.
pub fn value_star(sample: &SharedSample, b_star: f64, c_query: f64) -> f64 {
    if c_query > b_star {
        c_query
    } else {
        value_tilde(sample, b_star, c_query)
    }
}

/// `Ṽ` with its normalizing constant computed once.
#[derive(Debug, Clone)]
pub struct ValueFunction<'a> {
    sample: &'a SharedSample,
    pub b_star: f64,
    order: f64,
    denom: f64,
}

impl<'a> ValueFunction<'a> {
    pub fn new(sample: &'a SharedSample, b_star: f64) -> Self {
        let order = sample.order();
        Self { sample, b_star, order, denom: sample.power_sum(b_star, order) }
    }

    pub fn tilde(&self, x: f64) -> f64 {
        if x == self.b_star {
            return self.b_star;
        }
        self.b_star * self.sample.power_sum(x, self.order) / self.denom
    }

    pub fn star(&self, x: f64) -> f64 {
        if x > self.b_star {
            x
        } else {
            self.tilde(x)
        }
    }

    /// Central-difference `Ṽ'(x)` with step `DIFF_STEP · x`.
    pub fn tilde_slope(&self, x: f64) -> f64 {
        let h = DIFF_STEP * x;
        (self.tilde(x + h) - self.tilde(x - h)) / (2.0 * h)
    }

    /// `Ṽ` restricted to draws `[start, end)` but normalized by the full
    /// sample, so that `Ṽ` is the average of the batch functions.
    fn batch(&self, start: usize, end: usize) -> impl Fn(f64) -> f64 + '_ {
        let draws = &self.sample.draws[start..end];
        let scale = self.b_star * self.sample.len() as f64 / (self.denom * draws.len() as f64);
        move |x| scale * chunked_sum(draws, |i| (x + i).powf(self.order))
    }
}

/// Continuous- and smooth-pasting gaps at `b*`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PastingGaps {
    /// `Ṽ(b*) - b*`.
    pub value_gap: f64,
    /// `Ṽ'(b*) - 1`.
    pub slope_gap: f64,
}

/// Evaluates both pasting conditions on `sample`. Passing a sample other
/// than the one `b*` was solved on gives an out-of-sample check.
pub fn pasting_check(sample: &SharedSample, b_star: f64) -> PastingGaps {
    let v = ValueFunction::new(sample, b_star);
    // Ṽ(b*) through the generic path, not the shortcut for x == b*.
    let at = b_star * sample.power_sum(b_star, sample.order()) / v.denom;
    PastingGaps { value_gap: at - b_star, slope_gap: v.tilde_slope(b_star) - 1.0 }
}

/// `(L - λ)g(x)` with
/// `Lg(x) = (1 + γθx) g'(x) + ∫ (g(e^{-γy}x) - g(x)) m(dy)`.
///
/// `g'` is a central difference with step `DIFF_STEP · x`; the jump integral
/// is an adaptive quadrature over the split law.
pub fn generator_residual<F: Fn(f64) -> f64>(
    params: &ModelParams,
    model: &DislocationModel,
    value_fn: F,
    x: f64,
) -> Result<f64> {
    generator_residual_at(params, model, params.lambda, &value_fn, x)
}

fn generator_residual_at<F: Fn(f64) -> f64>(
    params: &ModelParams,
    model: &DislocationModel,
    lambda: f64,
    value_fn: &F,
    x: f64,
) -> Result<f64> {
    if !(x > 0.0) {
        return Err(Error::Domain(format!("generator needs x > 0, got {x}")));
    }
    let h = DIFF_STEP * x;
    let gx = value_fn(x);
    let slope = (value_fn(x + h) - value_fn(x - h)) / (2.0 * h);
    let g = params.gamma;
    let jumps = model.jump_measure_integral(|u| value_fn(u.powf(g) * x) - gx, GENERATOR_QUAD_TOL)?;
    Ok((1.0 + params.growth() * x) * slope + jumps - lambda * gx)
}

/// Generator residual of `Ṽ` (or `V*` when `star`), with a standard error
/// from `GENERATOR_BATCHES` disjoint batches of the shared sample.
pub fn generator_check(
    params: &ModelParams,
    model: &DislocationModel,
    sample: &SharedSample,
    b_star: f64,
    x: f64,
    star: bool,
) -> Result<GeneratorPoint> {
    let v = ValueFunction::new(sample, b_star);
    let lambda = sample.lambda;
    let full = |y: f64| if star && y > b_star { y } else { v.tilde(y) };
    let residual = generator_residual_at(params, model, lambda, &full, x)?;
    let n = sample.len();
    let batches = GENERATOR_BATCHES.min(n);
    if batches < 2 {
        return Ok(GeneratorPoint { x, residual, std_error: 0.0 });
    }
    let size = n / batches;
    let per_batch: Result<Vec<f64>> = (0..batches)
        .map(|j| {
            let bf = v.batch(j * size, (j + 1) * size);
            let f = |y: f64| if star && y > b_star { y } else { bf(y) };
            generator_residual_at(params, model, lambda, &f, x)
        })
        .collect();
    let e = Estimate::from_samples(&per_batch?);
    Ok(GeneratorPoint { x, residual, std_error: e.std_error })
}

/// Monte Carlo and moment-ratio sides of the first-passage identity
/// `E[e^{-λτ_b}] = E[(c + I)^k] / E[(b + I)^k]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LaplaceCheck {
    pub b: f64,
    pub mc: Estimate,
    pub analytic: Estimate,
    /// Paths that reached the safety horizon (counted as `τ = ∞`).
    pub misses: usize,
}

impl LaplaceCheck {
    pub fn outcome(&self) -> CheckOutcome {
        let se = self.mc.combined_se(&self.analytic);
        CheckOutcome::new(
            format!("first-passage Laplace transform, b = {:.4}", self.b),
            self.mc.value,
            self.analytic.value,
            se,
            SIGMA * se + 1e-12,
        )
    }
}

/// Runs `n_paths` exact first passages of `Z^c` over `b` (discount
/// `sample.lambda`) and the moment ratio on the sample.
pub fn first_passage_laplace_check(
    params: &ModelParams,
    model: &DislocationModel,
    sample: &SharedSample,
    b: f64,
    n_paths: usize,
    plan: &RngStreamPlan,
) -> Result<LaplaceCheck> {
    if !(b >= params.c) {
        return Err(Error::Domain(format!("first-passage check needs b ≥ c, got b = {b}, c = {}", params.c)));
    }
    let lambda = sample.lambda;
    let label = format!("laplace/b={b}");
    let draws: Result<Vec<(f64, bool)>> = (0..n_paths as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = plan.stream(&label, i);
            let fp = pathsim::simulate_z_first_passage(params, model, b, &mut rng)?;
            Ok(if fp.hit { ((-lambda * fp.tau).exp(), true) } else { (0.0, false) })
        })
        .collect();
    let draws = draws?;
    let misses = draws.iter().filter(|d| !d.1).count();
    let vals: Vec<f64> = draws.into_iter().map(|d| d.0).collect();
    let mc = Estimate::from_samples(&vals);
    let k = sample.order();
    let num: Vec<f64> = sample.draws.iter().map(|i| (params.c + i).powf(k)).collect();
    let den: Vec<f64> = sample.draws.iter().map(|i| (b + i).powf(k)).collect();
    let analytic = ratio_estimate(&num, &den);
    Ok(LaplaceCheck { b, mc, analytic, misses })
}

/// `x ↦ E[(x + I)^k]` over a set of draws, tabulated on a log grid with
/// cubic Hermite interpolation of `log g` against `log x` (exact node
/// derivatives).
///
/// Used where `Ṽ` must be evaluated at very many points (martingale checks);
/// queries outside the grid fall back to direct summation.
#[derive(Debug, Clone)]
pub struct MomentTable {
    draws: Vec<f64>,
    order: f64,
    log_x0: f64,
    step: f64,
    log_g: Vec<f64>,
    dlog_g: Vec<f64>,
}

impl MomentTable {
    pub fn new(draws: &[f64], order: f64, x_min: f64, x_max: f64, nodes: usize) -> Self {
        let k = order;
        let log_x0 = x_min.ln();
        let step = (x_max.ln() - log_x0) / (nodes - 1) as f64;
        let n = draws.len() as f64;
        let (log_g, dlog_g) = (0..nodes)
            .into_par_iter()
            .map(|j| {
                let x = (log_x0 + step * j as f64).exp();
                let mut g = 0.0;
                let mut dg = 0.0;
                for &i in draws {
                    let p = (x + i).powf(k - 1.0);
                    dg += p;
                    g += p * (x + i);
                }
                // d log g / d log x = x k E[(x+I)^{k-1}] / E[(x+I)^k].
                ((g / n).ln(), x * k * dg / g)
            })
            .unzip();
        Self { draws: draws.to_vec(), order, log_x0, step, log_g, dlog_g }
    }

    fn interpolate(&self, x: f64) -> Option<f64> {
        if !(x > 0.0) {
            return None;
        }
        let u = (x.ln() - self.log_x0) / self.step;
        let last = (self.log_g.len() - 1) as f64;
        if !(0.0..=last).contains(&u) {
            return None;
        }
        let j = (u.floor() as usize).min(self.log_g.len() - 2);
        let t = u - j as f64;
        let (p0, p1) = (self.log_g[j], self.log_g[j + 1]);
        let (m0, m1) = (self.dlog_g[j] * self.step, self.dlog_g[j + 1] * self.step);
        let t2 = t * t;
        let t3 = t2 * t;
        let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
        let h10 = t3 - 2.0 * t2 + t;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let h11 = t3 - t2;
        Some((h00 * p0 + h10 * m0 + h01 * p1 + h11 * m1).exp())
    }

    /// `E[(x + I)^k]` over the table's draws.
    pub fn get(&self, x: f64) -> f64 {
        self.interpolate(x).unwrap_or_else(|| {
            self.draws.iter().map(|i| (x + i).powf(self.order)).sum::<f64>() / self.draws.len() as f64
        })
    }
}

/// Fast evaluator of `Ṽ`/`V*` for bulk Monte Carlo use, together with the
/// per-batch versions used to propagate the shared sample's error.
pub struct TabulatedValue {
    full: MomentTable,
    batches: Vec<MomentTable>,
    b_star: f64,
    scale: f64,
}

const TABLE_NODES: usize = 2401;

impl TabulatedValue {
    pub fn new(sample: &SharedSample, b_star: f64) -> Self {
        let k = sample.order();
        let lo = 1e-9 * b_star.min(1.0);
        let hi = 1e9 * b_star.max(1.0);
        let full = MomentTable::new(&sample.draws, k, lo, hi, TABLE_NODES);
        let n = sample.len();
        let nb = GENERATOR_BATCHES.min(n);
        let batches = if nb < 2 {
            Vec::new()
        } else {
            let size = n / nb;
            (0..nb).map(|j| MomentTable::new(&sample.draws[j * size..(j + 1) * size], k, lo, hi, TABLE_NODES)).collect()
        };
        // Common normalization: Ṽ is the average of the batch functions.
        let scale = b_star / (sample.power_sum(b_star, k) / n as f64);
        Self { full, batches, b_star, scale }
    }

    pub fn tilde(&self, x: f64) -> f64 {
        self.scale * self.full.get(x)
    }

    pub fn star(&self, x: f64) -> f64 {
        if x > self.b_star {
            x
        } else {
            self.tilde(x)
        }
    }

    fn batch_count(&self) -> usize {
        self.batches.len()
    }

    fn batch_value(&self, j: usize, x: f64, star: bool) -> f64 {
        if star && x > self.b_star {
            x
        } else {
            self.scale * self.batches[j].get(x)
        }
    }
}

/// Means of a discounted value process at a list of times along the same
/// paths, with paired differences between consecutive times.
///
/// Standard errors combine the path noise with the noise of the value
/// function itself (spread of the batch value functions on the same paths).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProcessMeans {
    pub times: Vec<f64>,
    pub means: Vec<Estimate>,
    /// `means[j+1] - means[j]`, estimated from per-path differences.
    pub increments: Vec<Estimate>,
    /// `Ṽ(c)` or `V*(c)`.
    pub reference: f64,
    /// Part of each `means` error that comes from the shared sample,
    /// measured against the reference (same batch function on both sides).
    pub sample_std_errors: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn discounted_means(
    params: &ModelParams,
    lambda: f64,
    model: &DislocationModel,
    times: &[f64],
    n_paths: usize,
    plan: &RngStreamPlan,
    label: &str,
    value: &TabulatedValue,
    star: bool,
) -> ProcessMeans {
    let eval = |x: f64| if star { value.star(x) } else { value.tilde(x) };
    let nb = value.batch_count();
    // Per path: discounted full values, then discounted batch values.
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..n_paths as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = plan.stream(label, i);
            let zs = pathsim::simulate_z_at_times(params, model, times, &mut rng);
            let disc: Vec<f64> = times.iter().map(|&t| (-lambda * t).exp()).collect();
            let full = zs.iter().zip(&disc).map(|(&z, d)| d * eval(z)).collect();
            let mut batch = Vec::with_capacity(nb * times.len());
            for j in 0..nb {
                batch.extend(zs.iter().zip(&disc).map(|(&z, d)| d * value.batch_value(j, z, star)));
            }
            (full, batch)
        })
        .collect();
    let m = times.len();
    let column = |j: usize| rows.iter().map(|r| r.0[j]).collect::<Vec<f64>>();
    let path_means: Vec<Estimate> = (0..m).map(|j| Estimate::from_samples(&column(j))).collect();
    let path_incs: Vec<Estimate> =
        (1..m).map(|j| Estimate::from_samples(&rows.iter().map(|r| r.0[j] - r.0[j - 1]).collect::<Vec<_>>())).collect();
    let reference = eval(params.c);
    let (mut sample_se, mut inc_sample_se) = (vec![0.0; m], vec![0.0; m.saturating_sub(1)]);
    if nb >= 2 {
        let np = rows.len() as f64;
        // bm[j][t]: batch-j path mean at time t.
        let bm: Vec<Vec<f64>> =
            (0..nb).map(|j| (0..m).map(|t| rows.iter().map(|r| r.1[j * m + t]).sum::<f64>() / np).collect()).collect();
        let refs: Vec<f64> = (0..nb).map(|j| value.batch_value(j, params.c, star)).collect();
        for t in 0..m {
            let d: Vec<f64> = (0..nb).map(|j| bm[j][t] - refs[j]).collect();
            sample_se[t] = Estimate::from_samples(&d).std_error;
        }
        for t in 1..m {
            let d: Vec<f64> = (0..nb).map(|j| bm[j][t] - bm[j][t - 1]).collect();
            inc_sample_se[t - 1] = Estimate::from_samples(&d).std_error;
        }
    }
    let widen = |e: &Estimate, s: f64| Estimate { std_error: e.std_error.hypot(s), ..*e };
    ProcessMeans {
        times: times.to_vec(),
        means: path_means.iter().zip(&sample_se).map(|(e, s)| widen(e, *s)).collect(),
        increments: path_incs.iter().zip(&inc_sample_se).map(|(e, s)| widen(e, *s)).collect(),
        reference,
        sample_std_errors: sample_se,
    }
}

fn sorted_times(times: &[f64]) -> Result<Vec<f64>> {
    if times.iter().any(|t| !(*t >= 0.0)) {
        return Err(Error::Domain("times must be non-negative".into()));
    }
    let mut t = times.to_vec();
    t.sort_by(f64::total_cmp);
    Ok(t)
}

/// Means of `e^{-λt} Ṽ(Z^c_t)`; each should equal `Ṽ(c)`.
pub fn martingale_check(
    params: &ModelParams,
    model: &DislocationModel,
    sample: &SharedSample,
    b_star: f64,
    times: &[f64],
    n_paths: usize,
    plan: &RngStreamPlan,
) -> Result<ProcessMeans> {
    let times = sorted_times(times)?;
    let v = TabulatedValue::new(sample, b_star);
    Ok(discounted_means(params, sample.lambda, model, &times, n_paths, plan, "martingale", &v, false))
}

/// Means of `e^{-λt} V*(Z^c_t)`; they should not increase in `t`.
pub fn supermartingale_check(
    params: &ModelParams,
    model: &DislocationModel,
    sample: &SharedSample,
    b_star: f64,
    times: &[f64],
    n_paths: usize,
    plan: &RngStreamPlan,
) -> Result<ProcessMeans> {
    let times = sorted_times(times)?;
    let v = TabulatedValue::new(sample, b_star);
    Ok(discounted_means(params, sample.lambda, model, &times, n_paths, plan, "supermartingale", &v, true))
}

/// Standard error of `Ṽ'(b) - 1 = k/f(b) - 1` on one sample, by the delta
/// method on the ratio estimator of `f(b)`.
pub fn slope_std_error(sample: &SharedSample, b: f64) -> f64 {
    let k = sample.order();
    let num: Vec<f64> = sample.draws.iter().map(|i| (b + i).powf(k)).collect();
    let den: Vec<f64> = sample.draws.iter().map(|i| b * (b + i).powf(k - 1.0)).collect();
    let f = ratio_estimate(&num, &den);
    k * f.std_error / (f.value * f.value)
}

/// Batches used for the robust slope-gap scale.
pub const ROBUST_BATCHES: usize = 100;

/// Outlier-resistant standard error of `Ṽ'(b) - 1` on one sample: the
/// interquartile range of the per-batch slope gaps, converted to a normal
/// scale and divided by `√batches`.
///
/// The top-order powers `(b + I)^k` generally have infinite variance, so the
/// sample variance is dominated by the single largest draw; the quartiles are
/// not.
pub fn robust_slope_scale(sample: &SharedSample, b: f64) -> f64 {
    let k = sample.order();
    let nb = ROBUST_BATCHES.min(sample.len());
    if nb < 4 {
        return 0.0;
    }
    let size = sample.len() / nb;
    let mut gaps: Vec<f64> = (0..nb)
        .map(|j| {
            let d = &sample.draws[j * size..(j + 1) * size];
            let (mut hi, mut lo) = (0.0, 0.0);
            for &i in d {
                let p = (b + i).powf(k - 1.0);
                lo += p;
                hi += p * (b + i);
            }
            k * b * lo / hi - 1.0
        })
        .collect();
    gaps.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let h = p * (nb - 1) as f64;
        let j = h.floor() as usize;
        gaps[j] + (h - j as f64) * (gaps[(j + 1).min(nb - 1)] - gaps[j])
    };
    (q(0.75) - q(0.25)) / 1.349 / (nb as f64).sqrt()
}

/// Out-of-sample slope gap at one sample size: `b*` solved on one sample,
/// `Ṽ'(b*) - 1` read off an independent sample of the same size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HoldoutSlope {
    pub n_samples: usize,
    pub b_star: f64,
    pub gap: f64,
    /// Propagated standard error of `gap` (both samples contribute).
    pub std_error: f64,
    /// Robust scale of the gap on the fitting sample.
    pub robust_scale: f64,
}

/// Holdout slope gaps at `n` and `4n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SlopeScaling {
    pub small: HoldoutSlope,
    pub large: HoldoutSlope,
}

impl SlopeScaling {
    pub fn outcomes(&self) -> Vec<CheckOutcome> {
        let mut out = vec![CheckOutcome::at_most(
            format!("slope-gap tolerance shrinks, n = {} -> {}", self.small.n_samples, self.large.n_samples),
            self.large.robust_scale,
            self.small.robust_scale,
            0.0,
            0.0,
        )];
        for h in [self.small, self.large] {
            out.push(CheckOutcome::new(
                format!("out-of-sample slope gap, n = {}", h.n_samples),
                h.gap,
                0.0,
                h.std_error,
                SIGMA * h.std_error + 1e-8,
            ));
        }
        out
    }
}

pub fn holdout_slope(
    params: &ModelParams,
    model: &DislocationModel,
    n: usize,
    rel_tol: f64,
    plan: &RngStreamPlan,
) -> Result<HoldoutSlope> {
    let p = plan.child(&format!("holdout-slope/n={n}"));
    let fit = SharedSample::draw(params, model, n, rel_tol, &p.child("fit"))?;
    let hold = SharedSample::draw(params, model, n, rel_tol, &p.child("holdout"))?;
    let b = solve_b_star_from(&fit, params.c)?;
    Ok(HoldoutSlope {
        n_samples: n,
        b_star: b,
        gap: pasting_check(&hold, b).slope_gap,
        std_error: slope_std_error(&fit, b).hypot(slope_std_error(&hold, b)),
        robust_scale: robust_slope_scale(&fit, b),
    })
}

pub fn slope_gap_scaling(
    params: &ModelParams,
    model: &DislocationModel,
    n: usize,
    rel_tol: f64,
    plan: &RngStreamPlan,
) -> Result<SlopeScaling> {
    Ok(SlopeScaling {
        small: holdout_slope(params, model, n, rel_tol, plan)?,
        large: holdout_slope(params, model, 4 * n, rel_tol, plan)?,
    })
}

impl ProcessMeans {
    /// Every mean within `SIGMA` standard errors of the reference.
    pub fn constancy_outcomes(&self, what: &str) -> Vec<CheckOutcome> {
        self.times
            .iter()
            .zip(&self.means)
            .map(|(t, m)| {
                CheckOutcome::new(
                    format!("{what} mean at t = {t}"),
                    m.value,
                    self.reference,
                    m.std_error,
                    SIGMA * m.std_error + 1e-8 * self.reference.abs(),
                )
            })
            .collect()
    }

    /// Nonincreasing means (paired increments `≤ SIGMA·se`) and every mean at
    /// most the reference plus `SIGMA·se`.
    pub fn supermartingale_outcomes(&self, what: &str) -> Vec<CheckOutcome> {
        let floor = 1e-8 * self.reference.abs();
        let mut out: Vec<CheckOutcome> = self
            .increments
            .iter()
            .enumerate()
            .map(|(j, d)| {
                CheckOutcome::at_most(
                    format!("{what} increment t = {} -> {}", self.times[j], self.times[j + 1]),
                    d.value,
                    0.0,
                    d.std_error,
                    SIGMA * d.std_error + floor,
                )
            })
            .collect();
        for (t, m) in self.times.iter().zip(&self.means) {
            out.push(CheckOutcome::at_most(
                format!("{what} mean at t = {t} below V*(c)"),
                m.value,
                self.reference,
                m.std_error,
                SIGMA * m.std_error + floor,
            ));
        }
        out
    }
}

/// Payoff `E[e^{-λτ_b} Z_{τ_b}]` of threshold rules over a grid, all from
/// the same paths.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThresholdSweep {
    pub grid: Vec<f64>,
    pub payoffs: Vec<Estimate>,
    /// Index of the largest mean payoff.
    pub argmax: usize,
    /// Paired differences `payoff[argmax] - payoff[j]`.
    pub gaps: Vec<Estimate>,
}

impl ThresholdSweep {
    /// Grid spacing around the argmax.
    pub fn local_step(&self) -> f64 {
        let j = self.argmax;
        let left = if j > 0 { self.grid[j] - self.grid[j - 1] } else { f64::INFINITY };
        let right = if j + 1 < self.grid.len() { self.grid[j + 1] - self.grid[j] } else { f64::INFINITY };
        left.min(right)
    }

    /// The sweep's maximum is interior and within one grid step of `b_star`.
    pub fn brackets(&self, b_star: f64) -> CheckOutcome {
        let interior = self.argmax > 0 && self.argmax + 1 < self.grid.len();
        let step = self.local_step();
        let mut o = CheckOutcome::new(
            "threshold sweep argmax within one grid step of b*",
            self.grid[self.argmax],
            b_star,
            0.0,
            step * (1.0 + 1e-9),
        );
        o.passed &= interior;
        o
    }
}

/// Brute-force payoff sweep over sorted thresholds `grid`.
pub fn threshold_sweep(
    params: &ModelParams,
    model: &DislocationModel,
    grid: &[f64],
    n_paths: usize,
    plan: &RngStreamPlan,
) -> Result<ThresholdSweep> {
    if grid.is_empty() {
        return Err(Error::Domain("empty threshold grid".into()));
    }
    let mut grid = grid.to_vec();
    grid.sort_by(f64::total_cmp);
    let lambda = params.lambda;
    let rows: Result<Vec<Vec<f64>>> = (0..n_paths as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = plan.stream("threshold-sweep", i);
            let fps = pathsim::simulate_z_first_passages(params, model, &grid, DEFAULT_PASSAGE_HORIZON, &mut rng)?;
            Ok(fps.iter().map(|f| if f.hit { (-lambda * f.tau).exp() * f.z_at_tau } else { 0.0 }).collect())
        })
        .collect();
    let rows = rows?;
    let payoffs: Vec<Estimate> =
        (0..grid.len()).map(|j| Estimate::from_samples(&rows.iter().map(|r| r[j]).collect::<Vec<_>>())).collect();
    let argmax = payoffs.iter().enumerate().max_by(|a, b| a.1.value.total_cmp(&b.1.value)).map(|(j, _)| j).unwrap_or(0);
    let gaps = (0..grid.len())
        .map(|j| Estimate::from_samples(&rows.iter().map(|r| r[argmax] - r[j]).collect::<Vec<_>>()))
        .collect();
    Ok(ThresholdSweep { grid, payoffs, argmax, gaps })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn degenerate(q: f64, c: f64) -> (DislocationModel, ModelParams, SharedSample) {
        let m = DislocationModel::Degenerate;
        let p = ModelParams::new(&m, 1.0, 1.0, q, c).unwrap();
        let s = SharedSample::from_draws(&p, &m, vec![1.0; 8]);
        (m, p, s)
    }

    #[test]
    fn degenerate_threshold_is_one_over_q() {
        for q in [0.5, 1.0, 2.0, 100.0] {
            let (_, p, s) = degenerate(q, 1.0);
            let r = solve_b_star(&p, &s).unwrap();
            assert!((r.b_star - 1.0 / q).abs() < 1e-10 / q, "q={q}: {}", r.b_star);
            assert!((r.f_at_b_star - r.order).abs() < 1e-9);
        }
    }

    #[test]
    fn degenerate_threshold_general_growth() {
        let m = DislocationModel::Degenerate;
        let p = ModelParams::new(&m, 2.0, 0.7, 0.3, 1.0).unwrap();
        let i = 1.0 / p.growth();
        let s = SharedSample::from_draws(&p, &m, vec![i; 4]);
        let b = solve_b_star(&p, &s).unwrap().b_star;
        assert!((b - 1.0 / 0.3).abs() < 1e-9);
        // Direct maximization of e^{-λt} Z_t is stationary at Z = 1/(λ - γθ) = 1/q.
        assert!((1.0 / (p.lambda - p.growth()) - b).abs() < 1e-9);
    }

    #[test]
    fn kappa_not_above_gamma_is_rejected() {
        let m = DislocationModel::Degenerate;
        let p = ModelParams::with_options(&m, 1.0, 1.0, 0.0, 1.0, true).unwrap();
        let s = SharedSample::from_draws(&p, &m, vec![1.0]);
        assert!(matches!(solve_b_star(&p, &s), Err(Error::Assumption(_))));
    }

    #[test]
    fn bracket_start_does_not_matter() {
        let (_, _, s) = degenerate(1.0, 1.0);
        let a = solve_b_star_from(&s, 1e-3).unwrap();
        let b = solve_b_star_from(&s, 1e3).unwrap();
        assert!((a - b).abs() < 1e-11);
    }

    #[test]
    fn degenerate_value_functions() {
        let (_, p, s) = degenerate(1.0, 0.3);
        let b = solve_b_star(&p, &s).unwrap().b_star;
        let k = s.order();
        for c in [0.1, 0.3, 0.7, 1.0] {
            let closed = b * ((c + 1.0) / (b + 1.0)).powf(k);
            assert!((value_tilde(&s, b, c) - closed).abs() < 1e-12);
        }
        assert_eq!(value_star(&s, b, 2.0 * b), 2.0 * b);
        assert_eq!(value_star(&s, b, b), b);
        assert_eq!(value_tilde(&s, b, b), b);
    }

    #[test]
    fn degenerate_pasting_and_generator() {
        let (m, p, s) = degenerate(1.0, 0.3);
        let b = solve_b_star(&p, &s).unwrap().b_star;
        let gaps = pasting_check(&s, b);
        assert!(gaps.value_gap.abs() < 1e-8 && gaps.slope_gap.abs() < 1e-8, "{gaps:?}");
        for x in [0.2 * b, 0.5 * b, 0.9 * b] {
            let g = generator_check(&p, &m, &s, b, x, false).unwrap();
            assert!(g.residual.abs() < 1e-6, "{g:?}");
        }
        // f(x) = x: (L - λ)x = 1 + γθx - λx = 1 - qx.
        for x in [0.5, 2.0, 7.0] {
            let r = generator_residual(&p, &m, |y| y, x).unwrap();
            assert!((r - (1.0 - p.q * x)).abs() < 1e-9);
        }
        let above = generator_check(&p, &m, &s, b, 2.0 * b, true).unwrap();
        assert!(above.residual < 0.0);
    }

    #[test]
    fn generator_sees_jumps() {
        // f(x) = x under BinaryPoint(1/2): jump term ρ(2^{-γ} - 1)x.
        let m = DislocationModel::BinaryPoint { rate: 2.0, split: 0.5 };
        let p = ModelParams::new(&m, 1.0, 2.0, 1.0, 1.0).unwrap();
        let x = 1.5;
        let r = generator_residual(&p, &m, |y| y, x).unwrap();
        let exact = 1.0 + p.growth() * x + 2.0 * (0.5 - 1.0) * x - p.lambda * x;
        assert!((r - exact).abs() < 1e-9);
    }

    #[test]
    fn degenerate_laplace_identity() {
        let (m, p, s) = degenerate(1.0, 1.0);
        let plan = RngStreamPlan::new(0);
        for b in [1.0, 1.5, 3.0] {
            let chk = first_passage_laplace_check(&p, &m, &s, b, 16, &plan).unwrap();
            let closed = ((p.c + 1.0) / (b + 1.0)).powf(p.lambda);
            assert!((chk.mc.value - closed).abs() < 1e-12);
            assert!((chk.analytic.value - closed).abs() < 1e-12);
            assert_eq!(chk.mc.std_error, 0.0);
        }
    }

    #[test]
    fn degenerate_martingale_is_constant() {
        let (m, p, s) = degenerate(1.0, 0.3);
        let b = solve_b_star(&p, &s).unwrap().b_star;
        let plan = RngStreamPlan::new(0);
        let mm = martingale_check(&p, &m, &s, b, &[0.0, 0.5, 1.0, 2.0], 4, &plan).unwrap();
        for e in &mm.means {
            assert!((e.value - mm.reference).abs() < 1e-8 * mm.reference);
        }
        // V* is constant until Z reaches b* = 1 (at t = ln(2/1.3)), then decays.
        let sm = supermartingale_check(&p, &m, &s, b, &[0.0, 0.2, 1.0, 2.0], 4, &plan).unwrap();
        assert!((sm.means[1].value - sm.reference).abs() < 1e-8);
        assert!(sm.means[2].value < sm.means[1].value && sm.means[3].value < sm.means[2].value);
    }

    #[test]
    fn table_matches_direct_sum() {
        let m = DislocationModel::BinaryUniform { rate: 1.0 };
        let p = ModelParams::new(&m, 1.0, 1.0, 1.0, 1.0).unwrap();
        let s = SharedSample::draw(&p, &m, 2000, 1e-6, &RngStreamPlan::new(6)).unwrap();
        let b = solve_b_star(&p, &s).unwrap().b_star;
        let t = TabulatedValue::new(&s, b);
        let v = ValueFunction::new(&s, b);
        for x in [1e-7, 0.01, 0.3, b, 1.7, 55.0, 1e5] {
            let rel = (t.tilde(x) / v.tilde(x) - 1.0).abs();
            assert!(rel < 1e-9, "x={x}: rel {rel}");
        }
    }

    #[test]
    fn tilde_is_convex_and_dominates_identity() {
        let m = DislocationModel::BinaryUniform { rate: 1.0 };
        let p = ModelParams::new(&m, 1.0, 1.0, 1.0, 1.0).unwrap();
        let s = SharedSample::draw(&p, &m, 5000, 1e-6, &RngStreamPlan::new(8)).unwrap();
        let b = solve_b_star(&p, &s).unwrap().b_star;
        let v = ValueFunction::new(&s, b);
        let grid: Vec<f64> = (1..=60).map(|j| 0.05 * j as f64 * b).collect();
        let vals: Vec<f64> = grid.iter().map(|&x| v.tilde(x)).collect();
        for w in vals.windows(3) {
            assert!(w[0] - 2.0 * w[1] + w[2] >= -1e-12);
        }
        for (x, y) in grid.iter().zip(&vals) {
            assert!(*y >= *x - 1e-12, "Ṽ({x}) = {y}");
        }
    }
}

//! Tilted moments of the exponential functional `I∞ = ∫_0^∞ e^{γY_s} ds`.
//!
//! All non-integer moments are Monte Carlo averages over one [`SharedSample`]
//! drawn under the Esscher-tilted law `P^{κ(λ)}`. Integer moments have the
//! closed recursion `M_n = n M_{n-1} / (λ - ψ(κ - nγ))`, used as an oracle.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::levy::{self, DislocationModel, ModelParams, TiltedDynamics};
use crate::pathsim;
use crate::rng::RngStreamPlan;
use crate::stats::Estimate;

/// Default number of `I∞` draws per shared sample.
pub const DEFAULT_SAMPLES: usize = 100_000;
/// Default relative truncation tolerance of each `I∞` draw.
pub const DEFAULT_REL_TOL: f64 = 1e-6;

const CHUNK: usize = 4096;
const ORDER_SLACK: f64 = 1e-12;

/// Sum of `f` over `xs` with a fixed chunking, so the floating-point result
/// does not depend on the number of worker threads.
pub(crate) fn chunked_sum<F: Fn(f64) -> f64 + Sync>(xs: &[f64], f: F) -> f64 {
    if xs.len() <= CHUNK {
        return xs.iter().map(|&x| f(x)).sum();
    }
    let partial: Vec<f64> = xs.par_chunks(CHUNK).map(|c| c.iter().map(|&x| f(x)).sum::<f64>()).collect();
    partial.iter().sum()
}

/// Monte Carlo estimate of `E^κ[(a + I∞)^s]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MomentEstimate {
    pub value: f64,
    pub std_error: f64,
    pub n_samples: usize,
    pub order_s: f64,
    pub shift_a: f64,
}

/// Draws of `I∞` under `P^{κ(λ)}`, shared by every evaluation of `f`, `Ṽ`
/// and the moment ratios of one solve.
#[derive(Debug, Clone, Serialize)]
pub struct SharedSample {
    #[serde(skip)]
    pub draws: Vec<f64>,
    pub seed: u64,
    pub rel_tol: f64,
    pub model: DislocationModel,
    pub params: ModelParams,
    /// Discount rate the tilt was built for (normally `params.lambda`).
    pub lambda: f64,
    pub kappa: f64,
}

impl SharedSample {
    /// `n` draws under the tilt `κ(params.lambda)`.
    pub fn draw(
        params: &ModelParams,
        model: &DislocationModel,
        n: usize,
        rel_tol: f64,
        plan: &RngStreamPlan,
    ) -> Result<Self> {
        Self::draw_for_lambda(params, model, params.lambda, n, rel_tol, plan)
    }

    /// `n` draws under the tilt `κ(lambda)` for an arbitrary `lambda > 0`.
    pub fn draw_for_lambda(
        params: &ModelParams,
        model: &DislocationModel,
        lambda: f64,
        n: usize,
        rel_tol: f64,
        plan: &RngStreamPlan,
    ) -> Result<Self> {
        let kappa = if lambda == params.lambda { params.kappa } else { levy::kappa(model, params.theta, lambda)? };
        let tilted = TiltedDynamics::new(model, params.theta, kappa)?;
        let tail_mean = if kappa >= params.gamma {
            integer_moment(model, params.theta, params.gamma, lambda, kappa, 1)?
        } else {
            log::warn!("κ/γ < 1: E[I∞] is infinite, truncated draws get no tail correction");
            0.0
        };
        let draws: Result<Vec<f64>> = (0..n as u64)
            .into_par_iter()
            .map(|i| {
                let mut rng = plan.stream("expfun/i-infty", i);
                pathsim::simulate_i_infty(&tilted, params, &mut rng, rel_tol, tail_mean)
            })
            .collect();
        Ok(Self { draws: draws?, seed: plan.master_seed, rel_tol, model: *model, params: *params, lambda, kappa })
    }

    /// A sample from given draws (used for closed-form fixtures).
    pub fn from_draws(params: &ModelParams, model: &DislocationModel, draws: Vec<f64>) -> Self {
        Self {
            draws,
            seed: 0,
            rel_tol: 0.0,
            model: *model,
            params: *params,
            lambda: params.lambda,
            kappa: params.kappa,
        }
    }

    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    /// `κ/γ`.
    pub fn order(&self) -> f64 {
        self.kappa / self.params.gamma
    }

    /// `Σ_i (x + I_i)^s`.
    pub fn power_sum(&self, x: f64, s: f64) -> f64 {
        chunked_sum(&self.draws, |i| (x + i).powf(s))
    }

    /// `(Σ (x + I)^k, Σ (x + I)^{k-1})` for `k = κ/γ`, sharing the powers.
    pub fn top_power_sums(&self, x: f64) -> (f64, f64) {
        let k1 = self.order() - 1.0;
        let lower = chunked_sum(&self.draws, |i| (x + i).powf(k1));
        let upper = chunked_sum(&self.draws, |i| (x + i) * (x + i).powf(k1));
        (upper, lower)
    }

    /// A sample restricted to draws `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> SharedSample {
        SharedSample { draws: self.draws[start..end].to_vec(), ..self.clone() }
    }
}

/// Monte Carlo `E^κ[(a + I∞)^s]` over the shared draws.
pub fn estimate_moment(sample: &SharedSample, a: f64, s: f64) -> Result<MomentEstimate> {
    let max = sample.order();
    if !(s <= max + ORDER_SLACK) || s.is_nan() {
        return Err(Error::OrderOutOfRange { order: s, max });
    }
    if !(a >= 0.0) {
        return Err(Error::Domain(format!("shift a must be ≥ 0, got {a}")));
    }
    if s == 0.0 {
        return Ok(MomentEstimate { value: 1.0, std_error: 0.0, n_samples: sample.len(), order_s: s, shift_a: a });
    }
    let e = Estimate::from_map(&sample.draws, |i| (a + i).powf(s));
    Ok(MomentEstimate { value: e.value, std_error: e.std_error, n_samples: e.n_samples, order_s: s, shift_a: a })
}

/// `E^{κ}[I∞^n]` by the recursion, for a general discount `lambda` with root
/// `kappa`.
pub fn integer_moment(
    model: &DislocationModel,
    theta: f64,
    gamma: f64,
    lambda: f64,
    kappa: f64,
    n: u32,
) -> Result<f64> {
    let max = (kappa / gamma + ORDER_SLACK).floor();
    if f64::from(n) > max {
        return Err(Error::OrderOutOfRange { order: f64::from(n), max: kappa / gamma });
    }
    let mut m = 1.0;
    for j in 1..=n {
        let arg = (kappa - f64::from(j) * gamma).max(0.0);
        let denom = lambda - levy::psi(model, theta, arg)?;
        if !(denom > 0.0) {
            return Err(Error::Numeric(format!("non-positive recursion denominator {denom} at order {j}")));
        }
        m *= f64::from(j) / denom;
    }
    Ok(m)
}

/// `M_n = E^{κ(λ)}[I∞^n]` for the problem's own `λ = q + θγ`.
pub fn moment_recursion(params: &ModelParams, model: &DislocationModel, n: u32) -> Result<f64> {
    integer_moment(model, params.theta, params.gamma, params.lambda, params.kappa, n)
}

/// `f(b) = E[(b + I)^{κ/γ}] / (b E[(b + I)^{κ/γ - 1}])` on the shared draws.
///
/// For any fixed set of draws this is strictly decreasing in `b` when
/// `κ/γ > 1`, which is what makes the bisection for `b*` well posed.
pub fn f_of_b(sample: &SharedSample, b: f64) -> f64 {
    let (upper, lower) = sample.top_power_sums(b);
    upper / (b * lower)
}

/// Whether the standard error of a moment estimate behaves like `n^{-1/2}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StabilityReport {
    pub std_error_half: f64,
    pub std_error_full: f64,
    /// True when doubling the draws changes the (rescaled) error by more than 25%.
    pub unstable: bool,
}

/// Compares the standard error on the first half of the draws with the one
/// on all of them.
pub fn variance_stability(sample: &SharedSample, a: f64, s: f64) -> Result<StabilityReport> {
    let half = sample.slice(0, sample.len() / 2);
    let h = estimate_moment(&half, a, s)?.std_error;
    let f = estimate_moment(sample, a, s)?.std_error;
    let expected = h / std::f64::consts::SQRT_2;
    let unstable = expected > 0.0 && ((f - expected) / expected).abs() > 0.25;
    Ok(StabilityReport { std_error_half: h, std_error_full: f, unstable })
}

//! Finite binary dislocation measures and the exponents derived from them.
//!
//! A block splits at rate `ρ` into fragments of relative masses `s` and
//! `1 - s`, `s ∈ [1/2, 1)`. The tagged fragment's negative log-mass `ξ` is a
//! compound Poisson subordinator with Laplace exponent
//! `Φ(p) = ρ E[1 - s^{1+p} - (1-s)^{1+p}]`, and the driver `Y = ξ - θt` has
//! exponent `ψ(u) = θu - Φ(u)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Violation};
use crate::quad;

const QUAD_TOL: f64 = 1e-13;

/// Dislocation family. `Degenerate` is `ν ≡ 0` (no fragmentation); it is only
/// meaningful for the single-particle modules, where it makes every quantity
/// deterministic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum DislocationModel {
    Degenerate,
    /// Larger fragment uniform on `[1/2, 1)`.
    BinaryUniform {
        rate: f64,
    },
    /// Larger fragment always `split`.
    BinaryPoint {
        rate: f64,
        split: f64,
    },
    /// Larger fragment `(1 + W) / 2` with `W ~ Beta(shape, 1)`; `shape = 1`
    /// coincides with `BinaryUniform`.
    BinaryBeta {
        rate: f64,
        shape: f64,
    },
}

impl DislocationModel {
    pub fn rate(&self) -> f64 {
        match *self {
            DislocationModel::Degenerate => 0.0,
            DislocationModel::BinaryUniform { rate }
            | DislocationModel::BinaryPoint { rate, .. }
            | DislocationModel::BinaryBeta { rate, .. } => rate,
        }
    }

    pub fn is_degenerate(&self) -> bool {
        matches!(self, DislocationModel::Degenerate)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidModel(m));
        match *self {
            DislocationModel::Degenerate => Ok(()),
            DislocationModel::BinaryUniform { rate } if !(rate > 0.0 && rate.is_finite()) => {
                bad(format!("rate must be positive and finite, got {rate}"))
            }
            DislocationModel::BinaryPoint { rate, .. } | DislocationModel::BinaryBeta { rate, .. }
                if !(rate > 0.0 && rate.is_finite()) =>
            {
                bad(format!("rate must be positive and finite, got {rate}"))
            }
            DislocationModel::BinaryPoint { split, .. } if !(0.5..1.0).contains(&split) => {
                bad(format!("split must lie in [1/2, 1), got {split}"))
            }
            DislocationModel::BinaryBeta { shape, .. } if !(shape > 0.0 && shape.is_finite()) => {
                bad(format!("shape must be positive, got {shape}"))
            }
            _ => Ok(()),
        }
    }

    /// Infimum of the `p` for which `Φ(p)` is defined.
    pub fn p_lower(&self) -> f64 {
        match self {
            DislocationModel::Degenerate | DislocationModel::BinaryPoint { .. } => f64::NEG_INFINITY,
            // ∫ (1-s)^{1+p} ds near s = 1 converges iff p > -2.
            DislocationModel::BinaryUniform { .. } | DislocationModel::BinaryBeta { .. } => -2.0,
        }
    }

    /// Draws the larger fragment's relative mass.
    pub fn sample_split<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            DislocationModel::Degenerate => 1.0,
            DislocationModel::BinaryUniform { .. } => 0.5 + 0.5 * rng.random::<f64>(),
            DislocationModel::BinaryPoint { split, .. } => split,
            DislocationModel::BinaryBeta { shape, .. } => {
                let w = rng.random::<f64>().powf(1.0 / shape);
                // w < 1 up to rounding; keep s strictly below 1.
                (0.5 + 0.5 * w).min(1.0 - f64::EPSILON)
            }
        }
    }

    /// `E[g(s, 1 - s)]` under the split law of the larger fragment `s`.
    ///
    /// Continuous families are integrated in the variable `v = W^shape`, in
    /// which the law is uniform on `(0, 1)`, after the substitution
    /// `v = 1 - w²` that tames the small-fragment endpoint `s → 1`. The small
    /// fragment is computed directly rather than as `1 - s`.
    pub fn split_expectation<G: Fn(f64, f64) -> f64>(&self, g: G, abs_tol: f64) -> Result<f64> {
        match *self {
            DislocationModel::Degenerate => Ok(0.0),
            DislocationModel::BinaryPoint { split, .. } => Ok(g(split, 1.0 - split)),
            DislocationModel::BinaryUniform { .. } => quad::integrate(
                |w| {
                    let small = 0.5 * w * w;
                    2.0 * w * g(1.0 - small, small)
                },
                0.0,
                1.0,
                abs_tol,
            ),
            DislocationModel::BinaryBeta { shape, .. } => {
                let inv = 1.0 / shape;
                quad::integrate(
                    |w| {
                        // 1 - (1 - w²)^{1/shape}, without cancellation.
                        let gap = -((-w * w).ln_1p() * inv).exp_m1();
                        let small = 0.5 * gap;
                        2.0 * w * g(1.0 - small, small)
                    },
                    0.0,
                    1.0,
                    abs_tol,
                )
            }
        }
    }

    /// `∫ h(e^{-y}) m(dy)` for the Lévy measure `m` of the tagged fragment.
    ///
    /// With `y = -log s` and `y = -log(1-s)` handled as separate branches this
    /// is `ρ E[s h(s) + (1-s) h(1-s)]`.
    pub fn jump_measure_integral<H: Fn(f64) -> f64>(&self, h: H, abs_tol: f64) -> Result<f64> {
        let rate = self.rate();
        if rate == 0.0 {
            return Ok(0.0);
        }
        let v = self.split_expectation(|s, small| s * h(s) + small * h(small), abs_tol / rate)?;
        Ok(rate * v)
    }
}

/// Laplace exponent of the tagged fragment, `Φ(p)`.
pub fn phi(model: &DislocationModel, p: f64) -> Result<f64> {
    model.validate()?;
    if !(p > model.p_lower()) || p.is_nan() {
        return Err(Error::Domain(format!("Φ(p) needs p > {}, got {p}", model.p_lower())));
    }
    Ok(match *model {
        DislocationModel::Degenerate => 0.0,
        DislocationModel::BinaryUniform { rate } => rate * p / (p + 2.0),
        DislocationModel::BinaryPoint { rate, split } => {
            rate * (1.0 - split.powf(1.0 + p) - (1.0 - split).powf(1.0 + p))
        }
        DislocationModel::BinaryBeta { rate, .. } => {
            let e = 1.0 + p;
            rate * model.split_expectation(|s, small| 1.0 - s.powf(e) - small.powf(e), QUAD_TOL)?
        }
    })
}

fn entropy(s: f64, t: f64) -> f64 {
    let a = if s > 0.0 { -s * s.ln() } else { 0.0 };
    let b = if t > 0.0 { -t * t.ln() } else { 0.0 };
    a + b
}

/// `Φ'(0+) = ρ E[-s log s - (1-s) log(1-s)]`, the mean jump rate of `ξ`.
pub fn phi_prime0(model: &DislocationModel) -> Result<f64> {
    model.validate()?;
    Ok(match *model {
        DislocationModel::Degenerate => 0.0,
        DislocationModel::BinaryUniform { rate } => 0.5 * rate,
        DislocationModel::BinaryPoint { rate, split } => rate * entropy(split, 1.0 - split),
        DislocationModel::BinaryBeta { rate, .. } => rate * model.split_expectation(entropy, QUAD_TOL)?,
    })
}

/// Laplace exponent of `Y = ξ - θt`: `ψ(u) = θu - Φ(u)`.
pub fn psi(model: &DislocationModel, theta: f64, u: f64) -> Result<f64> {
    Ok(theta * u - phi(model, u)?)
}

/// Absolute tolerance of the `κ` bisection.
pub const KAPPA_TOL: f64 = 1e-12;

/// The root `κ(λ)` of `ψ(u) = λ` on `(0, ∞)`, by bisection on
/// `[0, 2(λ + ρ)/θ]` (valid because `Φ ≤ ρ` for a finite measure; the
/// factor 2 keeps the bracket safe from rounding when `ρ = 0`).
pub fn kappa(model: &DislocationModel, theta: f64, lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::Domain(format!("κ(λ) needs λ ≥ 0, got {lambda}")));
    }
    if !(theta > 0.0) {
        return Err(Error::Bracket(format!("θ must be positive, got {theta}")));
    }
    if lambda == 0.0 {
        return Ok(0.0);
    }
    let mut lo = 0.0;
    let mut hi = 2.0 * (lambda + model.rate()) / theta;
    if psi(model, theta, hi)? < lambda {
        return Err(Error::Bracket(format!("ψ({hi}) < λ = {lambda}; the model violates Φ ≤ ρ")));
    }
    // ψ(0) = 0 < λ; ψ is increasing on [0, ∞) under A2 so the bracket is kept.
    while hi - lo > KAPPA_TOL {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if psi(model, theta, mid)? < lambda {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Problem constants and their derived quantities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub gamma: f64,
    pub theta: f64,
    pub q: f64,
    pub c: f64,
    /// `λ = q + θγ`.
    pub lambda: f64,
    /// `κ(λ)`.
    pub kappa: f64,
    pub p_lower: f64,
}

impl ModelParams {
    pub fn new(model: &DislocationModel, gamma: f64, theta: f64, q: f64, c: f64) -> Result<Self> {
        Self::with_options(model, gamma, theta, q, c, false)
    }

    /// As [`ModelParams::new`]; `allow_zero_q` admits `q = 0`.
    pub fn with_options(
        model: &DislocationModel,
        gamma: f64,
        theta: f64,
        q: f64,
        c: f64,
        allow_zero_q: bool,
    ) -> Result<Self> {
        let violations = check_assumptions(model, gamma, theta, q, c, allow_zero_q);
        if !violations.is_empty() {
            return Err(Error::Assumption(violations));
        }
        let lambda = q + theta * gamma;
        let kappa = kappa(model, theta, lambda)?;
        Ok(Self { gamma, theta, q, c, lambda, kappa, p_lower: model.p_lower() })
    }

    /// Same problem started from a different initial premium.
    pub fn with_c(&self, c: f64) -> Self {
        Self { c, ..*self }
    }

    /// `κ/γ`, the moment order appearing in the value function.
    pub fn order(&self) -> f64 {
        self.kappa / self.gamma
    }

    /// `γθ`, the linear growth rate of `Z` between jumps.
    pub fn growth(&self) -> f64 {
        self.gamma * self.theta
    }
}

/// Every violated assumption for the given constants, in a fixed order.
pub fn check_assumptions(
    model: &DislocationModel,
    gamma: f64,
    theta: f64,
    q: f64,
    c: f64,
    allow_zero_q: bool,
) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |tag: &str, detail: String| out.push(Violation { assumption: tag.into(), detail });
    if let Err(e) = model.validate() {
        push("model", e.to_string());
    }
    if !(gamma > 0.0 && gamma.is_finite()) {
        push("gamma>0", format!("γ = {gamma}"));
    }
    if !(theta > 0.0 && theta.is_finite()) {
        push("theta>0", format!("θ = {theta}"));
    }
    if !(c > 0.0 && c.is_finite()) {
        push("c>0", format!("c = {c}"));
    }
    if allow_zero_q {
        if !(q >= 0.0 && q.is_finite()) {
            push("q>=0", format!("q = {q}"));
        }
    } else if !(q > 0.0 && q.is_finite()) {
        push("q>0", format!("q = {q} (q = 0 requires the explicit override)"));
    }
    if model.validate().is_ok() {
        match phi_prime0(model) {
            Ok(d) if d.is_finite() => {
                if theta.is_finite() && !(theta > d) {
                    push("A2", format!("θ = {theta} must exceed Φ'(0+) = {d}"));
                }
            }
            _ => push("A1", "Φ'(0+) is not finite".into()),
        }
    }
    out
}

/// Law of the driver `Y` under the Esscher tilt with parameter `κ`
/// (`κ = 0` is the original law).
///
/// Jumps have law `e^{-κx} m(dx)` normalized by the rate `ρ - Φ(κ)`; the
/// drift stays `-θ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TiltedDynamics {
    pub model: DislocationModel,
    pub kappa: f64,
    pub theta: f64,
    pub jump_rate: f64,
}

impl TiltedDynamics {
    pub fn untilted(model: &DislocationModel, theta: f64) -> Self {
        Self { model: *model, kappa: 0.0, theta, jump_rate: model.rate() }
    }

    pub fn new(model: &DislocationModel, theta: f64, kappa: f64) -> Result<Self> {
        if !(kappa >= 0.0) {
            return Err(Error::Domain(format!("tilt parameter must be ≥ 0, got {kappa}")));
        }
        let jump_rate = model.rate() - phi(model, kappa)?;
        let dynamics = Self { model: *model, kappa, theta, jump_rate };
        if !model.is_degenerate() && !matches!(model, DislocationModel::BinaryPoint { .. }) {
            let acc = dynamics.acceptance();
            if acc < 0.01 {
                log::warn!("tilted jump sampler acceptance {acc:.4} is below 1%");
            }
        }
        Ok(dynamics)
    }

    /// Expected acceptance of the rejection sampler, `(ρ - Φ(κ))/ρ`.
    pub fn acceptance(&self) -> f64 {
        let r = self.model.rate();
        if r == 0.0 {
            1.0
        } else {
            self.jump_rate / r
        }
    }

    /// Draws one jump of `ξ` (a positive size `-log S*`).
    pub fn sample_jump<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        sample_tagged_jump(&self.model, self.kappa, rng)
    }
}

/// Tilted (`tilt_kappa > 0`) or untilted size-biased fragment jump.
pub fn sample_tagged_jump<R: Rng + ?Sized>(model: &DislocationModel, tilt_kappa: f64, rng: &mut R) -> f64 {
    debug_assert!(!model.is_degenerate(), "the degenerate model has no jumps");
    if let DislocationModel::BinaryPoint { split, .. } = *model {
        // Two atoms, weights s^{1+κ} and (1-s)^{1+κ}: inverse CDF.
        let big = split.powf(1.0 + tilt_kappa);
        let small = (1.0 - split).powf(1.0 + tilt_kappa);
        let u: f64 = rng.random::<f64>() * (big + small);
        return if u < big { -split.ln() } else { -(1.0 - split).ln() };
    }
    loop {
        let s = model.sample_split(rng);
        let picked = if rng.random::<f64>() < s { s } else { 1.0 - s };
        if tilt_kappa == 0.0 || rng.random::<f64>() < picked.powf(tilt_kappa) {
            return -picked.ln();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStreamPlan;

    const UNIFORM: DislocationModel = DislocationModel::BinaryUniform { rate: 1.0 };
    const HALVES: DislocationModel = DislocationModel::BinaryPoint { rate: 2.0, split: 0.5 };

    #[test]
    fn phi_examples() {
        assert!((phi(&UNIFORM, 1.0).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!((phi(&HALVES, 1.0).unwrap() - 1.0).abs() < 1e-15);
        for m in [UNIFORM, HALVES, DislocationModel::BinaryBeta { rate: 1.5, shape: 0.7 }] {
            assert!(phi(&m, 0.0).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn phi_domain_error() {
        assert!(matches!(phi(&UNIFORM, -2.0), Err(Error::Domain(_))));
        assert!(phi(&HALVES, -5.0).is_ok());
    }

    #[test]
    fn beta_with_unit_shape_is_uniform() {
        let beta = DislocationModel::BinaryBeta { rate: 1.0, shape: 1.0 };
        for p in [-1.5, -0.5, 0.3, 1.0, 4.0] {
            let a = phi(&beta, p).unwrap();
            let b = phi(&UNIFORM, p).unwrap();
            assert!((a - b).abs() < 1e-11, "p={p}: {a} vs {b}");
        }
        assert!((phi_prime0(&beta).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn phi_prime_examples() {
        assert!((phi_prime0(&UNIFORM).unwrap() - 0.5).abs() < 1e-15);
        let p = DislocationModel::BinaryPoint { rate: 1.0, split: 0.5 };
        assert!((phi_prime0(&p).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(phi_prime0(&DislocationModel::Degenerate).unwrap(), 0.0);
        // Central difference of the closed form as a cross-check.
        let beta = DislocationModel::BinaryBeta { rate: 2.0, shape: 3.0 };
        let h = 1e-5;
        let fd = (phi(&beta, h).unwrap() - phi(&beta, -h).unwrap()) / (2.0 * h);
        assert!((fd - phi_prime0(&beta).unwrap()).abs() < 1e-8);
    }

    #[test]
    fn phi_via_jump_measure() {
        // Φ(p) = ∫ (1 - e^{-py}) m(dy): a second route through the Lévy measure.
        for m in [UNIFORM, HALVES, DislocationModel::BinaryBeta { rate: 0.8, shape: 2.5 }] {
            for p in [0.5, 1.0, 3.0] {
                let direct = phi(&m, p).unwrap();
                let via_m = m.jump_measure_integral(|u| 1.0 - u.powf(p), 1e-12).unwrap();
                assert!((direct - via_m).abs() < 1e-10, "{m:?} p={p}");
            }
        }
    }

    #[test]
    fn psi_examples() {
        assert!((psi(&DislocationModel::Degenerate, 1.7, 3.0).unwrap() - 5.1).abs() < 1e-15);
        assert!((psi(&UNIFORM, 1.0, 1.0).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(psi(&UNIFORM, 1.0, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn kappa_examples() {
        assert!((kappa(&DislocationModel::Degenerate, 1.0, 2.0).unwrap() - 2.0).abs() < 1e-12);
        let k = kappa(&UNIFORM, 1.0, 2.0).unwrap();
        assert!((k - (1.0 + 17f64.sqrt()) / 2.0).abs() < 1e-10);
        assert!((psi(&UNIFORM, 1.0, k).unwrap() - 2.0).abs() < 1e-10);
        assert_eq!(kappa(&UNIFORM, 1.0, 0.0).unwrap(), 0.0);
        assert!(kappa(&UNIFORM, 1.0, 1e-9).unwrap() < 1e-8);
    }

    #[test]
    fn params_derive_lambda_and_kappa() {
        let p = ModelParams::new(&UNIFORM, 1.0, 1.0, 1.0, 1.0).unwrap();
        assert_eq!(p.lambda, 2.0);
        assert!(p.kappa > p.gamma);
        assert_eq!(p.p_lower, -2.0);
    }

    #[test]
    fn assumption_violations_are_all_listed() {
        let err = ModelParams::new(&HALVES, -1.0, 0.5, 0.0, 1.0).unwrap_err();
        match err {
            Error::Assumption(v) => {
                let tags: Vec<_> = v.iter().map(|x| x.assumption.as_str()).collect();
                assert_eq!(tags, ["gamma>0", "q>0", "A2"]);
            }
            e => panic!("unexpected {e}"),
        }
        assert!(ModelParams::with_options(&HALVES, 1.0, 2.0, 0.0, 1.0, true).is_ok());
    }

    #[test]
    fn invalid_models() {
        assert!(DislocationModel::BinaryPoint { rate: 1.0, split: 1.0 }.validate().is_err());
        assert!(DislocationModel::BinaryPoint { rate: 1.0, split: 0.4 }.validate().is_err());
        assert!(DislocationModel::BinaryUniform { rate: 0.0 }.validate().is_err());
        assert!(DislocationModel::BinaryBeta { rate: 1.0, shape: 0.0 }.validate().is_err());
        assert!(matches!(phi(&DislocationModel::BinaryUniform { rate: -1.0 }, 1.0), Err(Error::InvalidModel(_))));
    }

    #[test]
    fn tilt_rates() {
        let k = (1.0 + 17f64.sqrt()) / 2.0;
        let t = TiltedDynamics::new(&UNIFORM, 1.0, k).unwrap();
        assert!((t.jump_rate - 2.0 / (k + 2.0)).abs() < 1e-12);
        let t0 = TiltedDynamics::new(&UNIFORM, 1.0, 0.0).unwrap();
        assert_eq!(t0, TiltedDynamics::untilted(&UNIFORM, 1.0));
        let d = TiltedDynamics::new(&DislocationModel::Degenerate, 1.0, 2.0).unwrap();
        assert_eq!(d.jump_rate, 0.0);
    }

    #[test]
    fn tilted_rate_matches_jump_density_quadrature() {
        // For BinaryUniform, m(dx) = 2ρ e^{-2x} dx on (0, ∞).
        let rho = 1.3;
        let m = DislocationModel::BinaryUniform { rate: rho };
        for k in [0.5, 1.0, 2.561_552_812_808_83, 4.0] {
            let direct =
                crate::quad::integrate(|x| (-k * x).exp() * 2.0 * rho * (-2.0 * x).exp(), 0.0, 60.0, 1e-13).unwrap();
            let t = TiltedDynamics::new(&m, 1.0, k).unwrap();
            assert!((t.jump_rate - direct).abs() < 1e-10, "κ={k}");
        }
    }

    #[test]
    fn uniform_size_biased_jump_law() {
        // P(x ≤ log 2) = P(the larger fragment is picked) = ∫ s·2 ds = 3/4.
        let plan = RngStreamPlan::new(11);
        let mut rng = plan.stream("levy-jump", 0);
        let n = 200_000;
        let hits: Vec<f64> =
            (0..n).map(|_| if sample_tagged_jump(&UNIFORM, 0.0, &mut rng) <= 2f64.ln() { 1.0 } else { 0.0 }).collect();
        let e = crate::stats::Estimate::from_samples(&hits);
        assert!((e.value - 0.75).abs() < 3.0 * e.std_error, "{e:?}");
    }

    #[test]
    fn tilted_uniform_matches_inverse_cdf_law() {
        // Tilted S* = e^{-x} has density ∝ u^{1+κ} on (0,1), so E[S*] = (2+κ)/(3+κ).
        let k = 1.7;
        let plan = RngStreamPlan::new(5);
        let mut rng = plan.stream("tilt", 0);
        let xs: Vec<f64> = (0..200_000).map(|_| (-sample_tagged_jump(&UNIFORM, k, &mut rng)).exp()).collect();
        let e = crate::stats::Estimate::from_samples(&xs);
        assert!((e.value - (2.0 + k) / (3.0 + k)).abs() < 3.0 * e.std_error, "{e:?}");
    }

    #[test]
    fn point_mass_jumps() {
        let m = DislocationModel::BinaryPoint { rate: 1.0, split: 0.5 };
        let mut rng = RngStreamPlan::new(1).stream("p", 0);
        for k in [0.0, 3.0] {
            for _ in 0..100 {
                assert_eq!(sample_tagged_jump(&m, k, &mut rng), 2f64.ln());
            }
        }
    }
}

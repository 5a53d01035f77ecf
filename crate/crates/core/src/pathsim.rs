//! Exact event-driven simulation of the tagged-fragment driver and of the
//! generalized Ornstein-Uhlenbeck process
//! `Z^c_t = e^{-γY_t} (∫_0^t e^{γY_s} ds + c)`.
//!
//! Between jumps `Y` decreases linearly at rate `θ`, so every within-segment
//! quantity has a closed form:
//! - accrued integral increment `e^{γY_0} (1 - e^{-γθΔ}) / (γθ)`,
//! - `Z` solves `dZ/dt = 1 + γθZ`, i.e. `Z_Δ + 1/(γθ) = (Z_0 + 1/(γθ)) e^{γθΔ}`,
//! - the crossing time of a level `b > Z_0` is `ln((b + 1/(γθ)) / (Z_0 + 1/(γθ))) / (γθ)`.
//!
//! Jumps of size `x` multiply `Z` by `e^{-γx}`, so `Z` only jumps downwards
//! and upward passages are continuous.

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::levy::{sample_tagged_jump, DislocationModel, ModelParams, TiltedDynamics};

/// Default cap on jumps per simulated `I∞` draw.
pub const DEFAULT_STEP_CAP: usize = 10_000_000;

/// Safety horizon for first passages. Under A2 passage is almost surely
/// finite; this only guards against misconfigured models.
pub const DEFAULT_PASSAGE_HORIZON: f64 = 1e6;

fn exp_time<R: Rng + ?Sized>(rate: f64, rng: &mut R) -> f64 {
    if rate <= 0.0 {
        return f64::INFINITY;
    }
    // 1 - U lies in (0, 1], so the log is finite.
    -(1.0 - rng.random::<f64>()).ln() / rate
}

/// Jump times and sizes of `ξ` on `[0, horizon]`; `Y = ξ - θt`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathSkeleton {
    pub jump_times: Vec<f64>,
    pub jump_sizes: Vec<f64>,
    pub theta: f64,
    pub horizon: f64,
}

impl PathSkeleton {
    /// `Y` at time `t` (right-continuous).
    pub fn y_at(&self, t: f64) -> f64 {
        let jumps: f64 =
            self.jump_times.iter().zip(&self.jump_sizes).take_while(|(&s, _)| s <= t).map(|(_, &x)| x).sum();
        jumps - self.theta * t
    }
}

/// State of `Z^c` at an event boundary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ZState {
    pub t: f64,
    pub y: f64,
    pub z: f64,
    /// `∫_0^t e^{γY_s} ds`.
    pub accrued: f64,
}

impl ZState {
    pub fn start(c: f64) -> Self {
        Self { t: 0.0, y: 0.0, z: c, accrued: 0.0 }
    }
}

/// Draws the jump skeleton of `ξ` under `dynamics` up to `horizon`.
pub fn simulate_skeleton<R: Rng + ?Sized>(dynamics: &TiltedDynamics, horizon: f64, rng: &mut R) -> PathSkeleton {
    let mut jump_times = Vec::new();
    let mut jump_sizes = Vec::new();
    let mut t = 0.0;
    loop {
        t += exp_time(dynamics.jump_rate, rng);
        if t > horizon {
            break;
        }
        jump_times.push(t);
        jump_sizes.push(dynamics.sample_jump(rng));
    }
    PathSkeleton { jump_times, jump_sizes, theta: dynamics.theta, horizon }
}

/// Deterministic drift of the state over `dt` with no jump.
fn drift(params: &ModelParams, s: &ZState, dt: f64) -> ZState {
    let g = params.gamma;
    let gt = params.growth();
    let y = s.y - params.theta * dt;
    let accrued = s.accrued + (g * s.y).exp() * (-(-gt * dt).exp_m1()) / gt;
    ZState { t: s.t + dt, y, z: (-g * y).exp() * (accrued + params.c), accrued }
}

fn apply_jump(params: &ModelParams, s: &ZState, x: f64) -> ZState {
    let y = s.y + x;
    ZState { t: s.t, y, z: (-params.gamma * y).exp() * (s.accrued + params.c), accrued: s.accrued }
}

/// Time for `Z` to grow from `z0` to `level` with no jump.
pub fn crossing_time(params: &ModelParams, z0: f64, level: f64) -> f64 {
    if level <= z0 {
        return 0.0;
    }
    let a = 1.0 / params.growth();
    ((level + a) / (z0 + a)).ln() / params.growth()
}

/// `Z` states at every event boundary of a given skeleton: the start, both
/// sides of every jump and the horizon.
pub fn z_path_from_skeleton(params: &ModelParams, skeleton: &PathSkeleton) -> Vec<ZState> {
    let mut out = Vec::with_capacity(2 * skeleton.jump_times.len() + 2);
    let mut s = ZState::start(params.c);
    out.push(s);
    for (&t, &x) in skeleton.jump_times.iter().zip(&skeleton.jump_sizes) {
        if t > s.t {
            s = drift(params, &s, t - s.t);
            out.push(s);
        }
        s = apply_jump(params, &s, x);
        out.push(s);
    }
    if skeleton.horizon > s.t {
        s = drift(params, &s, skeleton.horizon - s.t);
        out.push(s);
    }
    out
}

/// Untilted `Z^c` path on `[0, horizon]`, recorded at event boundaries.
pub fn simulate_z_path<R: Rng + ?Sized>(
    params: &ModelParams,
    model: &DislocationModel,
    horizon: f64,
    rng: &mut R,
) -> Vec<ZState> {
    let dynamics = TiltedDynamics::untilted(model, params.theta);
    let skeleton = simulate_skeleton(&dynamics, horizon, rng);
    z_path_from_skeleton(params, &skeleton)
}

/// Result of a first-passage simulation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FirstPassage {
    pub tau: f64,
    /// False only when the safety horizon was reached first.
    pub hit: bool,
    /// Value of `Z` at `tau`; equals the level exactly on a hit.
    pub z_at_tau: f64,
}

/// Event-driven walker for `Z` under a given law of `Y`.
///
/// The next jump time is drawn in advance, so the walker can be advanced to
/// arbitrary times or levels without discarding randomness.
#[derive(Debug, Clone)]
pub struct ZWalker {
    params: ModelParams,
    dynamics: TiltedDynamics,
    state: ZState,
    next_jump: f64,
    jumps: usize,
}

impl ZWalker {
    pub fn new<R: Rng + ?Sized>(params: &ModelParams, dynamics: &TiltedDynamics, rng: &mut R) -> Self {
        Self {
            params: *params,
            dynamics: *dynamics,
            state: ZState::start(params.c),
            next_jump: exp_time(dynamics.jump_rate, rng),
            jumps: 0,
        }
    }

    pub fn state(&self) -> ZState {
        self.state
    }

    pub fn jumps(&self) -> usize {
        self.jumps
    }

    fn take_jump<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let dt = self.next_jump - self.state.t;
        self.state = drift(&self.params, &self.state, dt);
        let x = self.dynamics.sample_jump(rng);
        self.state = apply_jump(&self.params, &self.state, x);
        self.next_jump = self.state.t + exp_time(self.dynamics.jump_rate, rng);
        self.jumps += 1;
    }

    /// Moves to time `t ≥` current time, processing intermediate jumps.
    pub fn advance_to<R: Rng + ?Sized>(&mut self, t: f64, rng: &mut R) -> ZState {
        while self.next_jump <= t {
            self.take_jump(rng);
        }
        if t > self.state.t {
            self.state = drift(&self.params, &self.state, t - self.state.t);
        }
        self.state
    }

    /// Runs until `Z` first exceeds `level` (or immediately if it already is
    /// at or above it).
    pub fn pass_level<R: Rng + ?Sized>(&mut self, level: f64, horizon: f64, rng: &mut R) -> Result<FirstPassage> {
        if self.state.z >= level {
            return Ok(FirstPassage { tau: self.state.t, hit: true, z_at_tau: self.state.z });
        }
        loop {
            let dt = crossing_time(&self.params, self.state.z, level);
            if !dt.is_finite() {
                return Err(Error::Numeric(format!("crossing time for level {level} is {dt}")));
            }
            let t_cross = self.state.t + dt;
            if t_cross < self.next_jump {
                if t_cross > horizon {
                    self.advance_to(horizon, rng);
                    return Ok(FirstPassage { tau: horizon, hit: false, z_at_tau: self.state.z });
                }
                let mut s = drift(&self.params, &self.state, dt);
                // Skip-free upwards: the passage value is the level itself.
                s.z = level;
                self.state = s;
                return Ok(FirstPassage { tau: t_cross, hit: true, z_at_tau: level });
            }
            if self.next_jump > horizon {
                self.advance_to(horizon, rng);
                return Ok(FirstPassage { tau: horizon, hit: false, z_at_tau: self.state.z });
            }
            self.take_jump(rng);
        }
    }
}

/// First passage of `Z^c` above `b` under the original law.
pub fn simulate_z_first_passage<R: Rng + ?Sized>(
    params: &ModelParams,
    model: &DislocationModel,
    b: f64,
    rng: &mut R,
) -> Result<FirstPassage> {
    let dynamics = TiltedDynamics::untilted(model, params.theta);
    let mut w = ZWalker::new(params, &dynamics, rng);
    w.pass_level(b, DEFAULT_PASSAGE_HORIZON, rng)
}

/// First passages over an increasing list of levels along one path.
///
/// Levels at or below the start give `tau = 0`. Because `Z` sits exactly at
/// each level when it passes it, continuing the same path is valid for the
/// next level.
pub fn simulate_z_first_passages<R: Rng + ?Sized>(
    params: &ModelParams,
    model: &DislocationModel,
    levels: &[f64],
    horizon: f64,
    rng: &mut R,
) -> Result<Vec<FirstPassage>> {
    debug_assert!(levels.windows(2).all(|w| w[0] <= w[1]), "levels must be sorted");
    let dynamics = TiltedDynamics::untilted(model, params.theta);
    let mut w = ZWalker::new(params, &dynamics, rng);
    let mut out = Vec::with_capacity(levels.len());
    for &b in levels {
        if b <= params.c {
            out.push(FirstPassage { tau: 0.0, hit: true, z_at_tau: params.c });
            continue;
        }
        out.push(w.pass_level(b, horizon, rng)?);
    }
    Ok(out)
}

/// `Z^c_t` at each of the given increasing times along one untilted path.
pub fn simulate_z_at_times<R: Rng + ?Sized>(
    params: &ModelParams,
    model: &DislocationModel,
    times: &[f64],
    rng: &mut R,
) -> Vec<f64> {
    let dynamics = TiltedDynamics::untilted(model, params.theta);
    let mut w = ZWalker::new(params, &dynamics, rng);
    times.iter().map(|&t| w.advance_to(t, rng).z).collect()
}

/// One draw of `I∞`, split into the simulated part and the weight of the
/// untruncated remainder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExpFunctionalDraw {
    /// `∫_0^T e^{γY_s} ds` up to the stopping event `T`.
    pub truncated: f64,
    /// `e^{γY_T}`; the remainder is `e^{γY_T}` times an independent copy of `I∞`.
    pub tail_weight: f64,
}

impl ExpFunctionalDraw {
    /// Truncated part plus the remainder replaced by its mean.
    pub fn value(&self, tail_mean: f64) -> f64 {
        self.truncated + self.tail_weight * tail_mean
    }
}

/// Simulates `I∞ = ∫_0^∞ e^{γY_s} ds` under `dynamics` until
/// `e^{γY_T} < rel_tol · ∫_0^T e^{γY_s} ds` at a jump epoch `T`.
pub fn simulate_i_infty_parts<R: Rng + ?Sized>(
    dynamics: &TiltedDynamics,
    params: &ModelParams,
    rng: &mut R,
    rel_tol: f64,
    step_cap: usize,
) -> Result<ExpFunctionalDraw> {
    let g = params.gamma;
    let gt = g * dynamics.theta;
    let mut y = 0.0_f64;
    let mut acc = 0.0_f64;
    if dynamics.jump_rate <= 0.0 {
        return Ok(ExpFunctionalDraw { truncated: 1.0 / gt, tail_weight: 0.0 });
    }
    for _ in 0..step_cap {
        let dt = exp_time(dynamics.jump_rate, rng);
        let w = (g * y).exp();
        acc += w * (-(-gt * dt).exp_m1()) / gt;
        y += dynamics.sample_jump(rng) - dynamics.theta * dt;
        let w = (g * y).exp();
        if w < rel_tol * acc {
            return Ok(ExpFunctionalDraw { truncated: acc, tail_weight: w });
        }
    }
    Err(Error::Assumption(vec![crate::error::Violation {
        assumption: "tilted drift".into(),
        detail: format!("I∞ did not converge within {step_cap} jumps; Y does not drift to -∞"),
    }]))
}

/// `I∞` with the mean-tail correction `e^{γY_T} · tail_mean`.
pub fn simulate_i_infty<R: Rng + ?Sized>(
    tilted: &TiltedDynamics,
    params: &ModelParams,
    rng: &mut R,
    rel_tol: f64,
    tail_mean: f64,
) -> Result<f64> {
    Ok(simulate_i_infty_parts(tilted, params, rng, rel_tol, DEFAULT_STEP_CAP)?.value(tail_mean))
}

/// `ξ_t`, the tagged fragment's negative log-mass at time `t`.
pub fn simulate_xi<R: Rng + ?Sized>(model: &DislocationModel, t: f64, rng: &mut R) -> f64 {
    let mut s = exp_time(model.rate(), rng);
    let mut xi = 0.0;
    while s <= t {
        xi += sample_tagged_jump(model, 0.0, rng);
        s += exp_time(model.rate(), rng);
    }
    xi
}

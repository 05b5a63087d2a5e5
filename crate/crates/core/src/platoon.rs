//! Three-vehicle mixed-autonomy platoon: a leader (index 0), a connected
//! automated vehicle (index 1) and a human-driven vehicle (index 2) that
//! shares its velocity and spacing with the CAV.
//!
//! The HDV follows the full-velocity-difference model with the cosine
//! optimal-velocity function; its acceleration is perturbed by Gaussian
//! noise. The CAV runs a linear feedback law whose HDV terms are fed by the
//! *shared* data, so the release policy feeds back into the dynamics.
//! Positions advance with the exact constant-acceleration update over each
//! step.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Velocity–spacing pair `(v, s)`; the HDV state and the shared data use
/// this layout.
pub type VelocitySpacing = [f64; 2];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LeaderProfile {
    /// Constant speed at `v_star`.
    Constant,
    /// `v_star + amplitude · sin(2πt / period_steps)` through the leader
    /// acceleration.
    Sinusoid { amplitude: f64, period_steps: f64 },
    /// Decelerate at `decel` for `duration_steps` steps from `start_step`,
    /// then hold speed.
    BrakePulse {
        start_step: usize,
        duration_steps: usize,
        decel: f64,
    },
}

impl LeaderProfile {
    pub fn acceleration(&self, t: usize, dt: f64) -> f64 {
        match *self {
            LeaderProfile::Constant => 0.0,
            LeaderProfile::Sinusoid {
                amplitude,
                period_steps,
            } => {
                let w = 2.0 * std::f64::consts::PI / (period_steps * dt);
                amplitude * w * (w * t as f64 * dt).cos()
            }
            LeaderProfile::BrakePulse {
                start_step,
                duration_steps,
                decel,
            } => {
                if t >= start_step && t < start_step + duration_steps {
                    -decel
                } else {
                    0.0
                }
            }
        }
    }
}

/// Feedback gains of the CAV controller. Each pair is `(μ, η)`:
///
/// * `leader`: `μ₁(s₁ − s*) + η₁(v₀ − v₁)`
/// * `own`: `μ₂(v₁ − v*) + η₂(v₀ − v*)`
/// * `hdv`: `μ₃(s̃₂ − s*) + η₃(ṽ₂ − v*)` with the shared HDV data.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Gains {
    pub leader: [f64; 2],
    pub own: [f64; 2],
    pub hdv: [f64; 2],
}

impl Default for Gains {
    fn default() -> Self {
        Self {
            leader: [0.1, 0.0],
            own: [-0.5, 0.5],
            hdv: [-0.2, 0.2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub dt: f64,
    pub s_star: f64,
    pub v_star: f64,
    pub s_st: f64,
    pub s_go: f64,
    pub a_min: f64,
    pub a_max: f64,
    pub v_max: f64,
    pub noise_std_a: f64,
    pub noise_std_s: f64,
    pub gains: Gains,
    pub theta_support: Vec<[f64; 2]>,
    /// Prior over `theta_support`; uniform when absent.
    pub theta_prior: Option<Vec<f64>>,
    /// `(ω₁, ω₂)` on the velocity and spacing errors.
    pub distortion_weights: [f64; 2],
    pub leader_profile: LeaderProfile,
    /// Spacings are clamped to this floor and the step is flagged unsafe.
    pub min_spacing: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            dt: 0.2,
            s_star: 20.0,
            v_star: 15.0,
            s_st: 5.0,
            s_go: 35.0,
            a_min: -5.0,
            a_max: 5.0,
            v_max: 30.0,
            noise_std_a: 1.0,
            noise_std_s: 0.0,
            gains: Gains::default(),
            theta_support: vec![[0.4, 0.5], [0.7, 0.8], [1.0, 1.1], [1.3, 1.4]],
            theta_prior: None,
            distortion_weights: [3.0, 1.0],
            leader_profile: LeaderProfile::Constant,
            min_spacing: 0.1,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dt", self.dt),
            ("v_max", self.v_max),
            ("min_spacing", self.min_spacing),
        ];
        for (field, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::config(field, format!("must be positive, got {v}")));
            }
        }
        if !(self.s_st < self.s_star && self.s_star < self.s_go) {
            return Err(Error::config("s_star", "require s_st < s_star < s_go"));
        }
        if !(self.a_min < 0.0 && self.a_max > 0.0) {
            return Err(Error::config("a_min", "require a_min < 0 < a_max"));
        }
        if !(self.noise_std_a >= 0.0) || !(self.noise_std_s >= 0.0) {
            return Err(Error::config("noise_std_a", "noise standard deviations must be ≥ 0"));
        }
        let [w1, w2] = self.distortion_weights;
        if !(w1 >= w2 && w2 > 0.0) {
            return Err(Error::config("distortion_weights", "require ω₁ ≥ ω₂ > 0"));
        }
        if self.theta_support.is_empty() {
            return Err(Error::config("theta_support", "must list at least one (θ₁, θ₂) pair"));
        }
        if self.theta_support.iter().flatten().any(|x| !(*x > 0.0)) {
            return Err(Error::config("theta_support", "gains must be positive"));
        }
        if let Some(p) = &self.theta_prior {
            if p.len() != self.theta_support.len() {
                return Err(Error::config("theta_prior", "length must match theta_support"));
            }
            let total: f64 = p.iter().sum();
            if p.iter().any(|x| !(*x >= 0.0)) || (total - 1.0).abs() > 1e-9 {
                return Err(Error::config("theta_prior", "must be a probability vector"));
            }
        }
        Ok(())
    }

    pub fn prior(&self) -> Vec<f64> {
        self.theta_prior.clone().unwrap_or_else(|| {
            let k = self.theta_support.len();
            vec![1.0 / k as f64; k]
        })
    }

    pub fn theta_vectors(&self) -> Vec<Vec<f64>> {
        self.theta_support.iter().map(|t| t.to_vec()).collect()
    }

    pub fn clamp_accel(&self, a: f64) -> f64 {
        a.clamp(self.a_min, self.a_max)
    }

    pub fn clamp_speed(&self, v: f64) -> f64 {
        v.clamp(0.0, self.v_max)
    }

    pub fn equilibrium_hdv(&self) -> VelocitySpacing {
        [self.v_star, self.s_star]
    }
}

/// Cosine optimal-velocity function.
pub fn optimal_velocity(s: f64, cfg: &EnvConfig) -> f64 {
    if s <= cfg.s_st {
        0.0
    } else if s >= cfg.s_go {
        cfg.v_max
    } else {
        let phase = std::f64::consts::PI * (s - cfg.s_st) / (cfg.s_go - cfg.s_st);
        0.5 * cfg.v_max * (1.0 - phase.cos())
    }
}

/// `θ₁(V(s) − v) + θ₂(v_pred − v)`, clamped to the acceleration limits.
pub fn fvd_acceleration(theta: &[f64], s: f64, v_self: f64, v_pred: f64, cfg: &EnvConfig) -> f64 {
    cfg.clamp_accel(theta[0] * (optimal_velocity(s, cfg) - v_self) + theta[1] * (v_pred - v_self))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlatoonState {
    /// `[s₁, s₂]`: CAV and HDV spacings to their predecessors.
    pub s: [f64; 2],
    /// `[v₀, v₁, v₂]`.
    pub v: [f64; 3],
    pub t: usize,
}

impl PlatoonState {
    pub fn equilibrium(cfg: &EnvConfig) -> Self {
        Self {
            s: [cfg.s_star; 2],
            v: [cfg.v_star; 3],
            t: 0,
        }
    }

    /// True HDV data `(v₂, s₂)`.
    pub fn hdv(&self) -> VelocitySpacing {
        [self.v[2], self.s[1]]
    }
}

/// CAV acceleration with the HDV terms driven by the shared `(ṽ, s̃)`.
pub fn cav_control(state: &PlatoonState, shared_hdv: VelocitySpacing, cfg: &EnvConfig) -> f64 {
    let g = &cfg.gains;
    let [v0, v1, _] = state.v;
    let u = g.leader[0] * (state.s[0] - cfg.s_star)
        + g.leader[1] * (v0 - v1)
        + g.own[0] * (v1 - cfg.v_star)
        + g.own[1] * (v0 - cfg.v_star)
        + g.hdv[0] * (shared_hdv[1] - cfg.s_star)
        + g.hdv[1] * (shared_hdv[0] - cfg.v_star);
    cfg.clamp_accel(u)
}

/// Exogenous input seen by the HDV: the CAV's velocity and applied
/// acceleration over the step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExogenousInput {
    pub v_pred: f64,
    pub a_pred: f64,
}

/// Outcome of one HDV transition.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HdvStep {
    pub next: VelocitySpacing,
    /// Clamped model acceleration `F_θ`.
    pub model_accel: f64,
    /// Applied acceleration, noise included.
    pub accel: f64,
    pub spacing_clamped: bool,
}

/// HDV transition given the noise draws (standard normal `z_a`, `z_s`).
/// Shared by the environment and the particle filters.
pub fn hdv_transition(
    cfg: &EnvConfig,
    theta: &[f64],
    x: VelocitySpacing,
    w: ExogenousInput,
    z_a: f64,
    z_s: f64,
) -> HdvStep {
    let [v, s] = x;
    let model_accel = fvd_acceleration(theta, s, v, w.v_pred, cfg);
    let accel = cfg.clamp_accel(model_accel + cfg.noise_std_a * z_a);
    let dt = cfg.dt;
    let s_next = s + (w.v_pred - v) * dt + 0.5 * (w.a_pred - accel) * dt * dt + cfg.noise_std_s * z_s * dt;
    let spacing_clamped = s_next < cfg.min_spacing;
    HdvStep {
        next: [cfg.clamp_speed(v + accel * dt), s_next.max(cfg.min_spacing)],
        model_accel,
        accel,
        spacing_clamped,
    }
}

/// Samples an HDV transition.
pub fn sample_hdv_transition<R: Rng + ?Sized>(
    cfg: &EnvConfig,
    theta: &[f64],
    x: VelocitySpacing,
    w: ExogenousInput,
    rng: &mut R,
) -> HdvStep {
    let z_a: f64 = if cfg.noise_std_a > 0.0 { rng.sample(StandardNormal) } else { 0.0 };
    let z_s: f64 = if cfg.noise_std_s > 0.0 { rng.sample(StandardNormal) } else { 0.0 };
    hdv_transition(cfg, theta, x, w, z_a, z_s)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub t: usize,
    pub leader_accel: f64,
    pub cav_accel: f64,
    pub hdv_model_accel: f64,
    pub hdv_accel: f64,
    /// HDV fuel rate over the step (mL/s), from its velocity and model
    /// acceleration.
    pub fuel_rate: f64,
    pub exogenous: ExogenousInput,
    pub safety_event: bool,
}

/// Advances the platoon one step. The CAV sees the shared HDV data; the HDV
/// evolves under `theta_true`.
pub fn step<R: Rng + ?Sized>(
    state: &PlatoonState,
    theta_true: &[f64],
    shared_hdv: VelocitySpacing,
    cfg: &EnvConfig,
    rng: &mut R,
) -> Result<(PlatoonState, StepLog)> {
    let dt = cfg.dt;
    let [v0, v1, v2] = state.v;
    let a0 = cfg.clamp_accel(cfg.leader_profile.acceleration(state.t, dt));
    let u = cav_control(state, shared_hdv, cfg);
    let w = ExogenousInput {
        v_pred: v1,
        a_pred: u,
    };
    let hdv = sample_hdv_transition(cfg, theta_true, state.hdv(), w, rng);

    let s1 = state.s[0] + (v0 - v1) * dt + 0.5 * (a0 - u) * dt * dt;
    let leader_unsafe = s1 < cfg.min_spacing;
    let next = PlatoonState {
        s: [s1.max(cfg.min_spacing), hdv.next[1]],
        v: [cfg.clamp_speed(v0 + a0 * dt), cfg.clamp_speed(v1 + u * dt), hdv.next[0]],
        t: state.t + 1,
    };
    if next.s.iter().chain(&next.v).any(|x| !x.is_finite()) {
        return Err(Error::Simulation("platoon step"));
    }
    let log = StepLog {
        t: state.t,
        leader_accel: a0,
        cav_accel: u,
        hdv_model_accel: hdv.model_accel,
        hdv_accel: hdv.accel,
        fuel_rate: fuel_rate(v2, hdv.model_accel),
        exogenous: w,
        safety_event: leader_unsafe || hdv.spacing_clamped,
    };
    Ok((next, log))
}

/// Fuel consumption rate in mL/s.
pub fn fuel_rate(v: f64, a: f64) -> f64 {
    let r = 0.333 + 0.00108 * v * v + 1.2 * a;
    if r > 0.0 {
        let inertial = if a > 0.0 { 0.054 * a * a * v } else { 0.0 };
        0.444 + 0.090 * r * v + inertial
    } else {
        0.444
    }
}

/// `√(ω₁(v − ṽ)² + ω₂(s − s̃)²)`.
pub fn distortion(x_true: VelocitySpacing, y_shared: VelocitySpacing, cfg: &EnvConfig) -> f64 {
    let [w1, w2] = cfg.distortion_weights;
    let dv = x_true[0] - y_shared[0];
    let ds = x_true[1] - y_shared[1];
    (w1 * dv * dv + w2 * ds * ds).sqrt()
}

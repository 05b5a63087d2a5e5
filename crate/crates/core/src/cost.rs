//! Per-step Lagrangian stage cost and episode summaries.
//!
//! `lagrangian = ρ·mi + system + λ·(distortion − d̂_step)`, where `mi` is the
//! regime-adaptive MI bound at the provider's particle belief, `system` is
//! the HDV fuel rate and `distortion` is the expected weighted distance
//! between the true HDV data and the released sample.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::belief::ParticleBelief;
use crate::error::{Error, Result};
use crate::mixture::{mi_upper_bound, Emission, MiBoundReport};
use crate::platoon::{distortion, fuel_rate, fvd_acceleration, EnvConfig, ExogenousInput, StepLog, VelocitySpacing};

/// How the episode distortion budget `D̂` enters each stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetMode {
    /// `D̂ / T` per step.
    Amortized,
    /// `D̂` per step.
    PerStep,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemCostMode {
    /// Fuel rate of the true HDV over the step.
    Realized,
    /// Belief-weighted fuel rate over the particles.
    ParticleExpected,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostConfig {
    pub rho: f64,
    pub lambda: f64,
    pub d_hat: f64,
    pub horizon: usize,
    pub alpha: f64,
    pub distortion_samples: usize,
    pub budget_mode: BudgetMode,
    pub system_cost: SystemCostMode,
}

impl Default for CostConfig {
    fn default() -> Self {
        Self {
            rho: 80.0,
            lambda: 0.2,
            d_hat: 200.0,
            horizon: 50,
            alpha: 0.5,
            distortion_samples: 64,
            budget_mode: BudgetMode::Amortized,
            system_cost: SystemCostMode::Realized,
        }
    }
}

impl CostConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [("rho", self.rho), ("lambda", self.lambda), ("d_hat", self.d_hat)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(field, format!("must be finite and ≥ 0, got {v}")));
            }
        }
        if self.horizon == 0 {
            return Err(Error::config("horizon", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config("alpha", "must lie in [0, 1]"));
        }
        if self.distortion_samples == 0 {
            return Err(Error::config("distortion_samples", "must be positive"));
        }
        Ok(())
    }

    pub fn d_hat_per_step(&self) -> f64 {
        match self.budget_mode {
            BudgetMode::Amortized => self.d_hat / self.horizon as f64,
            BudgetMode::PerStep => self.d_hat,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageCost {
    pub mi_term: f64,
    pub system_cost_term: f64,
    pub distortion_term: f64,
    pub lagrangian: f64,
    pub rho: f64,
    pub lambda: f64,
    pub d_hat: f64,
    pub d_hat_per_step: f64,
}

impl StageCost {
    pub fn from_terms(mi: f64, system: f64, distortion: f64, cfg: &CostConfig) -> Self {
        let d_step = cfg.d_hat_per_step();
        Self {
            mi_term: mi,
            system_cost_term: system,
            distortion_term: distortion,
            lagrangian: cfg.rho * mi + system + cfg.lambda * (distortion - d_step),
            rho: cfg.rho,
            lambda: cfg.lambda,
            d_hat: cfg.d_hat,
            d_hat_per_step: d_step,
        }
    }
}

/// `E[d(x, Y)]` for `Y` drawn from the emission, by seeded Monte Carlo.
pub fn expected_distortion(
    x_true: VelocitySpacing,
    emission: &Emission,
    env: &EnvConfig,
    n: usize,
    seed: u64,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut y = [0.0; 2];
    let mut total = 0.0;
    let cdf: Vec<f64> = emission
        .parts()
        .iter()
        .scan(0.0, |acc, (w, _)| {
            *acc += w;
            Some(*acc)
        })
        .collect();
    for _ in 0..n {
        let u: f64 = rand::Rng::random(&mut rng);
        let k = cdf.partition_point(|c| *c <= u).min(cdf.len() - 1);
        emission.parts()[k].1.sample_into(&mut rng, &mut y);
        total += distortion(x_true, y, env);
    }
    total / n as f64
}

/// Belief-weighted HDV fuel rate: each particle contributes the fuel of its
/// own model acceleration under the observed CAV velocity.
pub fn particle_expected_fuel(belief: &ParticleBelief, w: ExogenousInput, env: &EnvConfig) -> f64 {
    (0..belief.len())
        .map(|i| {
            let x = belief.state(i);
            let a = fvd_acceleration(belief.theta(i), x[1], x[0], w.v_pred, env);
            belief.weight(i) * fuel_rate(x[0], a)
        })
        .sum()
}

/// Inputs to one stage-cost evaluation.
pub struct StageInputs<'a> {
    pub belief: &'a ParticleBelief,
    /// Policy emission at every particle.
    pub emissions: &'a [Emission],
    /// Policy emission at the true `(θ*, x_t)`.
    pub true_emission: &'a Emission,
    pub x_true: VelocitySpacing,
    pub step: &'a StepLog,
}

pub fn stage_cost(
    inputs: &StageInputs<'_>,
    env: &EnvConfig,
    cfg: &CostConfig,
    seed: u64,
) -> Result<(StageCost, MiBoundReport)> {
    let report = mi_upper_bound(inputs.belief, inputs.emissions, cfg.alpha)?;
    let system = match cfg.system_cost {
        SystemCostMode::Realized => inputs.step.fuel_rate,
        SystemCostMode::ParticleExpected => {
            particle_expected_fuel(inputs.belief, inputs.step.exogenous, env)
        }
    };
    let dist = expected_distortion(
        inputs.x_true,
        inputs.true_emission,
        env,
        cfg.distortion_samples,
        seed,
    );
    Ok((
        StageCost::from_terms(report.mi_upper_regime_adaptive, system, dist, cfg),
        report,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub steps: usize,
    pub lagrangian_total: f64,
    /// Sum of per-step MI bounds; bounds `I(Θ; Y_{1:T}, W_{1:T})` through
    /// the chain rule.
    pub mi_bound_total: f64,
    pub distortion_total: f64,
    pub distortion_mean: f64,
    pub fuel_rate_mean: f64,
    /// Fuel volume in mL: `Σ rate · dt`.
    pub fuel_volume: f64,
    pub d_hat: f64,
    pub distortion_within_budget: bool,
}

pub fn episode_objective(records: &[StageCost], dt: f64) -> Result<EpisodeSummary> {
    if records.is_empty() {
        return Err(Error::InvalidInput("episode has no stage costs".into()));
    }
    let n = records.len() as f64;
    let sum = |f: fn(&StageCost) -> f64| records.iter().map(f).sum::<f64>();
    let distortion_total = sum(|r| r.distortion_term);
    let fuel_total = sum(|r| r.system_cost_term);
    Ok(EpisodeSummary {
        steps: records.len(),
        lagrangian_total: sum(|r| r.lagrangian),
        mi_bound_total: sum(|r| r.mi_term),
        distortion_total,
        distortion_mean: distortion_total / n,
        fuel_rate_mean: fuel_total / n,
        fuel_volume: fuel_total * dt,
        d_hat: records[0].d_hat,
        distortion_within_budget: distortion_total <= records[0].d_hat,
    })
}

//! Bayesian inference attack on the shared data and the usability
//! evaluator built on the same filter.
//!
//! The adversary knows the prior, the dynamics and the policy. Because the
//! provider's belief is a deterministic function of the shared history and
//! the filter seed, the adversary can rebuild the provider's belief encoding
//! and therefore evaluate the exact release density at each of its own
//! particles.

use serde::{Deserialize, Serialize};

use crate::belief::ParticleBelief;
use crate::error::{Error, Result};
use crate::platoon::{EnvConfig, ExogenousInput};
use crate::policy::SharingPolicy;
use crate::rollout::{particle_outputs, propagate_hdv};

#[derive(Clone, Debug, PartialEq)]
pub struct AttackOutcome {
    pub belief: ParticleBelief,
    pub posterior: Vec<f64>,
    pub detection: usize,
    /// Posterior mean of the current state after assimilating `y`.
    pub state_estimate: [f64; 2],
    /// The update degenerated; the belief and posterior were left as they
    /// were before the step.
    pub degenerate: bool,
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax_lowest(p: &[f64]) -> usize {
    let mut best = 0;
    for (k, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = k;
        }
    }
    best
}

/// One attack step: weight by the public release density of `y`, read off
/// the θ-posterior and detection, then resample if needed and propagate.
pub fn attack_step(
    belief: &ParticleBelief,
    y: [f64; 2],
    w: ExogenousInput,
    policy: &SharingPolicy<'_>,
    encoded: &[f64],
    env: &EnvConfig,
    resample_threshold: f64,
) -> Result<AttackOutcome> {
    let outputs = particle_outputs(policy, belief, encoded)?;
    let updated = match belief.update_weights(|i, _, _| outputs[i].log_density(&y)) {
        Ok(b) => b,
        Err(Error::DegenerateUpdate { .. }) => {
            let posterior = belief.theta_marginal();
            return Ok(AttackOutcome {
                state_estimate: usability_estimate(belief).0,
                belief: belief.clone(),
                detection: argmax_lowest(&posterior),
                posterior,
                degenerate: true,
            });
        }
        Err(e) => return Err(e),
    };
    let posterior = updated.theta_marginal();
    let state_estimate = usability_estimate(&updated).0;
    let (resampled, _) = updated.resample_if_degenerate(resample_threshold);
    Ok(AttackOutcome {
        state_estimate,
        belief: propagate_hdv(&resampled, env, w)?,
        detection: argmax_lowest(&posterior),
        posterior,
        degenerate: false,
    })
}

/// Posterior mean and covariance (row-major) of the state, marginalized
/// over θ.
pub fn usability_estimate(belief: &ParticleBelief) -> ([f64; 2], [f64; 4]) {
    let (m, c) = belief.state_moments();
    ([m[0], m[1]], [c[0], c[1], c[2], c[3]])
}

/// Attack metrics for one episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrivacyReport {
    pub posterior_on_truth: Vec<f64>,
    pub correct: Vec<bool>,
    pub final_posterior: Vec<f64>,
    pub misdetection_rate: f64,
}

pub fn privacy_report(posteriors: &[Vec<f64>], detections: &[usize], theta_true: usize) -> Result<PrivacyReport> {
    if posteriors.is_empty() || posteriors.len() != detections.len() {
        return Err(Error::InvalidInput(
            "privacy report needs one posterior and detection per step".into(),
        ));
    }
    let correct: Vec<bool> = detections.iter().map(|d| *d == theta_true).collect();
    let misses = correct.iter().filter(|c| !**c).count();
    Ok(PrivacyReport {
        posterior_on_truth: posteriors.iter().map(|p| p[theta_true]).collect(),
        misdetection_rate: misses as f64 / correct.len() as f64,
        final_posterior: posteriors.last().unwrap().clone(),
        correct,
    })
}

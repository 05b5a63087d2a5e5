//! One provider step shared by training and evaluation: encode the belief,
//! emit per-particle releases, draw the shared data, advance the platoon,
//! price the stage and assimilate the shared data into the belief.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::belief::ParticleBelief;
use crate::cost::{stage_cost, CostConfig, StageCost, StageInputs};
use crate::error::Result;
use crate::gaussian::GaussianComponent;
use crate::mixture::{Emission, MiBoundReport};
use crate::platoon::{sample_hdv_transition, step, EnvConfig, ExogenousInput, PlatoonState, StepLog};
use crate::policy::{FeatureCloud, PolicyOutput, SharingPolicy};

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for stream `index` of `domain`, derived from the master seed by
/// chained SplitMix64 mixing: `h(h(h(master) ^ domain) ^ index)`.
pub fn derive_seed(master: u64, domain: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(master) ^ domain) ^ index)
}

pub mod domain {
    pub const TRAIN_EPISODE: u64 = 1;
    pub const TRAIN_INIT: u64 = 2;
    pub const TRAIN_REPLAY: u64 = 3;
    pub const EVAL_EPISODE: u64 = 4;
    pub const GRADIENT_CHECK: u64 = 5;
    pub const VERIFY: u64 = 6;
}

/// Belief prior over the HDV state: independent Gaussians around the
/// equilibrium.
pub fn state_prior(env: &EnvConfig, std: [f64; 2]) -> Result<GaussianComponent> {
    GaussianComponent::diagonal(env.equilibrium_hdv().to_vec(), &[std[0] * std[0], std[1] * std[1]])
}

/// Propagates every particle through the HDV model under the realized
/// exogenous input.
pub fn propagate_hdv(belief: &ParticleBelief, env: &EnvConfig, w: ExogenousInput) -> Result<ParticleBelief> {
    belief.propagate(&|theta: &[f64], x: &[f64], rng: &mut ChaCha8Rng, next: &mut [f64]| {
        let h = sample_hdv_transition(env, theta, [x[0], x[1]], w, rng);
        next.copy_from_slice(&h.next);
    })
}

/// Policy outputs for every particle of a belief.
pub fn particle_outputs(
    policy: &SharingPolicy<'_>,
    belief: &ParticleBelief,
    encoded: &[f64],
) -> Result<Vec<PolicyOutput>> {
    (0..belief.len())
        .map(|i| {
            let x = belief.state(i);
            policy.output(belief.theta_index(i), [x[0], x[1]], encoded)
        })
        .collect()
}

/// Log-likelihood of `y` under each particle's output, then resampling (if
/// the ESS drops below `threshold · N`) and propagation.
pub fn assimilate(
    belief: &ParticleBelief,
    outputs: &[PolicyOutput],
    y: [f64; 2],
    w: ExogenousInput,
    env: &EnvConfig,
    resample_threshold: f64,
) -> Result<(ParticleBelief, bool)> {
    let updated = belief.update_weights(|i, _, _| outputs[i].log_density(&y))?;
    let (resampled, did) = updated.resample_if_degenerate(resample_threshold);
    Ok((propagate_hdv(&resampled, env, w)?, did))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub n_particles: usize,
    /// Standard deviations of the initial `(v, s)` belief and of the true
    /// initial HDV perturbation around equilibrium.
    pub state_prior_std: [f64; 2],
    pub resample_threshold: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            n_particles: 512,
            state_prior_std: [0.5, 1.0],
            resample_threshold: 0.5,
        }
    }
}

/// Everything produced by one provider step.
pub struct ProviderStep {
    pub cloud: Option<Arc<FeatureCloud>>,
    pub encoded: Vec<f64>,
    pub outputs: Vec<PolicyOutput>,
    pub true_output: PolicyOutput,
    pub x: [f64; 2],
    pub y: [f64; 2],
    pub log: StepLog,
    pub next_state: PlatoonState,
    pub cost: StageCost,
    pub mi: MiBoundReport,
}

/// Acts on the current belief and environment state.
#[allow(clippy::too_many_arguments)]
pub fn provider_act<R: Rng + ?Sized>(
    policy: &SharingPolicy<'_>,
    belief: &ParticleBelief,
    state: &PlatoonState,
    theta_true: usize,
    env: &EnvConfig,
    cost: &CostConfig,
    cost_seed: u64,
    rng: &mut R,
) -> Result<ProviderStep> {
    let (cloud, encoded) = match policy.encode(belief)? {
        Some((c, e)) => (Some(c), e),
        None => (None, Vec::new()),
    };
    let outputs = particle_outputs(policy, belief, &encoded)?;
    let x = state.hdv();
    let true_output = policy.output(theta_true, x, &encoded)?;
    let y = policy.release(&true_output, rng);
    let theta = env.theta_support[theta_true];
    let (next_state, log) = step(state, &theta, y, env, rng)?;

    let emissions: Vec<Emission> = outputs.iter().map(PolicyOutput::emission).collect();
    let true_emission = true_output.emission();
    let inputs = StageInputs {
        belief,
        emissions: &emissions,
        true_emission: &true_emission,
        x_true: x,
        step: &log,
    };
    let (mut stage, mi) = stage_cost(&inputs, env, cost, cost_seed)?;
    if policy.is_true_data() {
        stage = StageCost::from_terms(stage.mi_term, stage.system_cost_term, 0.0, cost);
    }
    Ok(ProviderStep {
        cloud,
        encoded,
        outputs,
        true_output,
        x,
        y,
        log,
        next_state,
        cost: stage,
        mi,
    })
}

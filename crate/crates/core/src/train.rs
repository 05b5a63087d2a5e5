//! Episodic DDPG training of the data-sharing policy on the platoon.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::belief::{FeatureNormalizer, ParticleBelief};
use crate::cost::CostConfig;
use crate::error::{Error, Result};
use crate::platoon::{EnvConfig, PlatoonState};
use crate::policy::{
    check_policy_gradients, DdpgConfig, DdpgLearner, NetworkConfig, PolicyGradientReport, PolicyNetworks,
    PolicySpec, ReplayBuffer, SharingPolicy, Transition,
};
use crate::rollout::{assimilate, derive_seed, domain, provider_act, state_prior, FilterConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub episodes: usize,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub warmup_episodes: usize,
    pub updates_per_step: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub mean_offset_scale: f64,
    /// Size of the belief subsample fed to the encoder.
    pub feature_particles: usize,
    /// Scale used to standardize `(v, s)` at the network inputs.
    pub state_scale: [f64; 2],
    /// Multiplier turning the negated lagrangian into the reward.
    pub reward_scale: f64,
    /// Std of the output-bias jitter, annealed linearly from `start` to
    /// `end` over `explore_episodes`.
    pub explore_std_start: f64,
    pub explore_std_end: f64,
    pub explore_episodes: usize,
    /// Std of the additional per-θ output jitter, as a multiple of the
    /// shared one.
    pub explore_theta_scale: f64,
    pub filter: FilterConfig,
    pub network: NetworkConfig,
    pub ddpg: DdpgConfig,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            episodes: 300,
            batch_size: 64,
            buffer_capacity: 100_000,
            warmup_episodes: 10,
            updates_per_step: 1,
            sigma_min: 0.05,
            sigma_max: 10.0,
            mean_offset_scale: 1.0,
            feature_particles: 64,
            state_scale: [2.0, 4.0],
            reward_scale: 0.1,
            explore_std_start: 0.3,
            explore_std_end: 0.02,
            explore_episodes: 150,
            explore_theta_scale: 1.0,
            filter: FilterConfig::default(),
            network: NetworkConfig::default(),
            ddpg: DdpgConfig::default(),
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        self.ddpg.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("trainer.batch_size", "must be positive"));
        }
        if self.buffer_capacity < self.batch_size {
            return Err(Error::config("trainer.buffer_capacity", "must hold at least one batch"));
        }
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max) {
            return Err(Error::config("trainer.sigma_min", "need 0 < sigma_min < sigma_max"));
        }
        if !(self.explore_theta_scale >= 0.0) {
            return Err(Error::config("trainer.explore_theta_scale", "must be non-negative"));
        }
        if self.feature_particles == 0 {
            return Err(Error::config("trainer.feature_particles", "must be positive"));
        }
        if self.filter.n_particles == 0 {
            return Err(Error::config("trainer.filter.n_particles", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.filter.resample_threshold) {
            return Err(Error::config("trainer.filter.resample_threshold", "must lie in [0, 1]"));
        }
        if self.state_scale.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::config("trainer.state_scale", "must be positive"));
        }
        if self.filter.state_prior_std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::config("trainer.filter.state_prior_std", "must be positive"));
        }
        if self.network.mgf_points == 0 || self.network.encoder_width == 0 {
            return Err(Error::config("trainer.network", "encoder needs points and width"));
        }
        Ok(())
    }

    pub fn explore_std(&self, episode: usize) -> f64 {
        if self.explore_episodes == 0 || episode >= self.explore_episodes {
            return self.explore_std_end;
        }
        let f = episode as f64 / self.explore_episodes as f64;
        self.explore_std_start + f * (self.explore_std_end - self.explore_std_start)
    }

    /// Input conventions for the given environment: `(θ, x)` is standardized
    /// by the support's mean and spread and by `state_scale` around the
    /// equilibrium.
    pub fn policy_spec(&self, env: &EnvConfig) -> PolicySpec {
        let k = env.theta_support.len() as f64;
        let mut center = vec![0.0; 4];
        let mut spread = vec![1.0; 4];
        for c in 0..2 {
            let mean = env.theta_support.iter().map(|t| t[c]).sum::<f64>() / k;
            let var = env.theta_support.iter().map(|t| (t[c] - mean).powi(2)).sum::<f64>() / k;
            center[c] = mean;
            if var > 0.0 {
                spread[c] = var.sqrt();
            }
        }
        let eq = env.equilibrium_hdv();
        center[2] = eq[0];
        center[3] = eq[1];
        spread[2] = self.state_scale[0];
        spread[3] = self.state_scale[1];
        PolicySpec {
            n_thetas: env.theta_support.len(),
            sigma_min: self.sigma_min,
            sigma_max: self.sigma_max,
            mean_offset_scale: self.mean_offset_scale,
            state_center: eq,
            state_scale: self.state_scale,
            joint_normalizer: FeatureNormalizer { center, spread },
            feature_particles: self.feature_particles,
        }
    }

    pub fn init_networks(&self, env: &EnvConfig, seed: u64) -> PolicyNetworks {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, domain::TRAIN_INIT, 0));
        PolicyNetworks::new(self.policy_spec(env), &self.network, &mut rng)
    }
}

/// Per-episode training record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub episode: usize,
    pub theta_index: usize,
    pub steps: usize,
    pub lagrangian: f64,
    pub mi_bound_sum: f64,
    /// Mean HDV fuel rate over the episode (mL/s).
    pub fuel: f64,
    /// Total per-step expected distortion.
    pub distortion: f64,
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub updates: usize,
    pub aborted: bool,
}

pub struct TrainOutcome {
    pub networks: PolicyNetworks,
    pub curve: Vec<CurveRow>,
}

/// Draws an index from a discrete distribution.
pub(crate) fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    probs.len() - 1
}

/// Initial belief and true environment state for an episode.
pub fn episode_start<R: Rng + ?Sized>(
    env: &EnvConfig,
    filter: &FilterConfig,
    n_particles: usize,
    belief_seed: u64,
    rng: &mut R,
) -> Result<(ParticleBelief, PlatoonState)> {
    let prior = state_prior(env, filter.state_prior_std)?;
    let belief = ParticleBelief::init(env.theta_vectors(), &env.prior(), &prior, n_particles, belief_seed)?;
    let mut state = PlatoonState::equilibrium(env);
    let x0 = prior.sample(rng);
    state.v[2] = x0[0];
    state.s[1] = x0[1].max(env.min_spacing);
    Ok((belief, state))
}

/// Trains from `init` for `cfg.episodes` episodes. Episodes whose belief
/// degenerates are cut short and flagged; their transitions so far are kept.
pub fn train(
    env: &EnvConfig,
    cost: &CostConfig,
    cfg: &TrainerConfig,
    init: PolicyNetworks,
    seed: u64,
    mut progress: impl FnMut(&CurveRow),
) -> Result<TrainOutcome> {
    env.validate()?;
    cost.validate()?;
    cfg.validate()?;
    let prior = env.prior();
    let mut learner = DdpgLearner::new(init, cfg.ddpg.clone());
    let mut replay = ReplayBuffer::new(cfg.buffer_capacity);
    let mut replay_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, domain::TRAIN_REPLAY, 0));
    let mut curve = Vec::with_capacity(cfg.episodes);

    for episode in 0..cfg.episodes {
        let ep_seed = derive_seed(seed, domain::TRAIN_EPISODE, episode as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(ep_seed);
        let theta = sample_index(&prior, &mut rng);
        let (mut belief, mut state) =
            episode_start(env, &cfg.filter, cfg.filter.n_particles, rng.random(), &mut rng)?;
        let mut acting = learner.online.clone();
        let explore = cfg.explore_std(episode);
        acting.jitter_actor_heads(explore, &mut rng);
        acting.jitter_theta_heads(explore * cfg.explore_theta_scale, &mut rng);
        let policy = SharingPolicy::Trained(&acting);

        let mut row = CurveRow {
            episode,
            theta_index: theta,
            steps: 0,
            lagrangian: 0.0,
            mi_bound_sum: 0.0,
            fuel: 0.0,
            distortion: 0.0,
            critic_loss: 0.0,
            actor_loss: 0.0,
            updates: 0,
            aborted: false,
        };
        for _ in 0..cost.horizon {
            let cost_seed = rng.random();
            let act = provider_act(&policy, &belief, &state, theta, env, cost, cost_seed, &mut rng)?;
            let next = assimilate(
                &belief,
                &act.outputs,
                act.y,
                act.log.exogenous,
                env,
                cfg.filter.resample_threshold,
            );
            let (next_belief, _) = match next {
                Ok(b) => b,
                Err(Error::DegenerateUpdate { .. }) => {
                    row.aborted = true;
                    break;
                }
                Err(e) => return Err(e),
            };
            row.steps += 1;
            row.lagrangian += act.cost.lagrangian;
            row.mi_bound_sum += act.cost.mi_term;
            row.fuel += act.cost.system_cost_term;
            row.distortion += act.cost.distortion_term;

            let next_cloud = std::sync::Arc::new(acting.feature_cloud(&next_belief)?);
            replay.push(Transition {
                theta,
                x: act.x,
                cloud: act.cloud.expect("trained policy always encodes"),
                action: act.true_output.action(act.x),
                y: act.y,
                reward: -act.cost.lagrangian * cfg.reward_scale,
                next_x: act.next_state.hdv(),
                next_cloud,
                // The horizon is a time limit the critic cannot observe, so
                // targets bootstrap through it.
                terminal: false,
            })?;
            belief = next_belief;
            state = act.next_state;

            if episode >= cfg.warmup_episodes && replay.len() >= cfg.batch_size {
                for _ in 0..cfg.updates_per_step {
                    let batch = replay.sample(cfg.batch_size, &mut replay_rng);
                    let d = learner.update(&batch, false)?;
                    if !d.aborted {
                        row.critic_loss += d.critic_loss;
                        row.actor_loss += d.actor_loss;
                        row.updates += 1;
                    }
                }
            }
        }
        if row.steps > 0 {
            row.fuel /= row.steps as f64;
        }
        if row.updates > 0 {
            row.critic_loss /= row.updates as f64;
            row.actor_loss /= row.updates as f64;
        }
        progress(&row);
        curve.push(row);
    }
    Ok(TrainOutcome {
        networks: learner.online,
        curve,
    })
}

/// Finite-difference gradient checks on `batches` random replay batches.
/// Each batch uses freshly perturbed networks (every actor parameter is
/// jittered so the zero-initialized head contributes) and beliefs drawn from
/// the episode prior with random weights.
pub fn gradient_check(
    env: &EnvConfig,
    cfg: &TrainerConfig,
    batches: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<PolicyGradientReport>> {
    use rand_distr::StandardNormal;
    let spec = cfg.policy_spec(env);
    let prior = state_prior(env, cfg.filter.state_prior_std)?;
    let k = env.theta_support.len();
    (0..batches)
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, domain::GRADIENT_CHECK, b as u64));
            let mut nets = PolicyNetworks::new(spec.clone(), &cfg.network, &mut rng);
            for l in &mut nets.actor.layers {
                for w in l.weights.iter_mut().chain(l.bias.iter_mut()) {
                    *w += 0.1 * rng.sample::<f64, _>(StandardNormal);
                }
            }
            let mut target = nets.clone();
            target.jitter_actor_heads(0.1, &mut rng);
            let cloud = |rng: &mut ChaCha8Rng| -> Result<std::sync::Arc<crate::policy::FeatureCloud>> {
                let belief = ParticleBelief::init(env.theta_vectors(), &env.prior(), &prior, 96, rng.random())?;
                let weights: Vec<f64> = (0..belief.len()).map(|_| rng.random::<f64>() + 0.05).collect();
                let states = (0..belief.len()).map(|i| belief.state(i).to_vec()).collect();
                let belief = ParticleBelief::from_particles(
                    env.theta_vectors(),
                    belief.theta_indices().to_vec(),
                    states,
                    weights,
                    0,
                )?;
                Ok(std::sync::Arc::new(nets.feature_cloud(&belief)?))
            };
            let mut batch = Vec::with_capacity(batch_size);
            for i in 0..batch_size {
                let x = [prior.sample(&mut rng)[0], prior.sample(&mut rng)[1]];
                batch.push(Transition {
                    theta: rng.random_range(0..k),
                    x,
                    cloud: cloud(&mut rng)?,
                    action: [
                        rng.sample::<f64, _>(StandardNormal),
                        rng.sample::<f64, _>(StandardNormal),
                        rng.random_range(0.1..3.0),
                        rng.random_range(0.1..3.0),
                    ],
                    y: x,
                    reward: rng.sample::<f64, _>(StandardNormal),
                    next_x: [x[0] + 0.1, x[1] - 0.1],
                    next_cloud: cloud(&mut rng)?,
                    terminal: i % 7 == 6,
                });
            }
            let refs: Vec<&Transition> = batch.iter().collect();
            check_policy_gradients(&nets, &target, &refs, cfg.ddpg.gamma)
        })
        .collect()
}

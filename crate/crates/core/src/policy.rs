//! Gaussian data-sharing policy: an MGF belief encoder, an actor emitting
//! the mean and diagonal standard deviation of the released data, and a
//! critic for deterministic policy-gradient training.
//!
//! The encoder summarizes the belief through a fixed-size *feature cloud*: a
//! deterministic systematic subsample of the particles, standardized by a
//! fixed affine normalizer. Its input is the cloud's first moment followed
//! by `ln M(vₖ)` at the learned evaluation points `vₖ`. The same cloud is
//! stored in replay transitions, so the encoder sees identical inputs when
//! acting and when learning.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::belief::{FeatureNormalizer, ParticleBelief, MGF_EXPONENT_CAP};
use crate::error::{Error, Result};
use crate::gaussian::GaussianComponent;
use crate::mixture::{log_sum_exp, Emission};
use crate::nn::{check_gradient, sigmoid, softplus, Activation, GradientReport, Mlp, Optimizer, OptimizerKind};

pub const STATE_DIM: usize = 2;
pub const ACTION_DIM: usize = 4;

/// Standardized, equally weighted subsample of a belief's `(θ, x)` vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureCloud {
    pub dim: usize,
    pub z: Vec<f64>,
    pub w: Vec<f64>,
}

impl FeatureCloud {
    /// Systematic subsample at positions `(k + ½)/size` of the cumulative
    /// weights; beliefs no larger than `size` are used whole.
    pub fn from_belief(belief: &ParticleBelief, size: usize, normalizer: &FeatureNormalizer) -> Result<Self> {
        let dim = belief.theta_dim() + belief.state_dim();
        if normalizer.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: normalizer.dim(),
            });
        }
        let mut joint = Vec::with_capacity(dim);
        let mut z = vec![0.0; dim];
        let mut cloud = FeatureCloud {
            dim,
            z: Vec::new(),
            w: Vec::new(),
        };
        let mut push = |i: usize, w: f64, cloud: &mut FeatureCloud| {
            belief.joint(i, &mut joint);
            normalizer.apply(&joint, &mut z);
            cloud.z.extend_from_slice(&z);
            cloud.w.push(w);
        };
        if belief.len() <= size {
            for i in 0..belief.len() {
                push(i, belief.weight(i), &mut cloud);
            }
            return Ok(cloud);
        }
        let mut cumulative = belief.weight(0);
        let mut src = 0;
        for k in 0..size {
            let u = (k as f64 + 0.5) / size as f64;
            while u > cumulative && src + 1 < belief.len() {
                src += 1;
                cumulative += belief.weight(src);
            }
            push(src, 1.0 / size as f64, &mut cloud);
        }
        Ok(cloud)
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.z[i * self.dim..(i + 1) * self.dim]
    }
}

/// Belief encoder: `Dense(ReLU)` over `[z̄, ln M(v₁), …, ln M(v_m)]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MgfEncoder {
    pub dim: usize,
    pub scale: f64,
    /// Row-major `m × dim` evaluation points.
    pub eval_points: Vec<f64>,
    pub dense: Mlp,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderGrads {
    pub dense: Mlp,
    pub eval_points: Vec<f64>,
}

pub struct EncoderTrace {
    /// `∂ ln M(vₖ) / ∂vₖ`, row-major `m × dim`.
    tilted: Vec<f64>,
    dense: crate::nn::Trace,
}

impl EncoderTrace {
    pub fn output(&self) -> &[f64] {
        self.dense.output()
    }
}

impl MgfEncoder {
    pub fn new<R: Rng + ?Sized>(dim: usize, m: usize, width: usize, scale: f64, rng: &mut R) -> Self {
        let eval_points = (0..m * dim)
            .map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self {
            dim,
            scale,
            eval_points,
            dense: Mlp::new(&[dim + m, width], Activation::Relu, Activation::Relu, rng),
        }
    }

    pub fn n_points(&self) -> usize {
        self.eval_points.len() / self.dim
    }

    pub fn output_dim(&self) -> usize {
        self.dense.output_dim()
    }

    pub fn n_params(&self) -> usize {
        self.dense.n_params() + self.eval_points.len()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = self.dense.params();
        p.extend_from_slice(&self.eval_points);
        p
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        let n = self.dense.n_params();
        if flat.len() != self.n_params() {
            return Err(Error::DimensionMismatch {
                expected: self.n_params(),
                got: flat.len(),
            });
        }
        self.dense.set_params(&flat[..n])?;
        self.eval_points.copy_from_slice(&flat[n..]);
        Ok(())
    }

    pub fn zero_grads(&self) -> EncoderGrads {
        EncoderGrads {
            dense: self.dense.zeros_like(),
            eval_points: vec![0.0; self.eval_points.len()],
        }
    }

    /// Encoder input: first moment of the cloud, then `ln M(vₖ)`, plus the
    /// tilted means needed for the gradient.
    fn features(&self, cloud: &FeatureCloud) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim;
        let m = self.n_points();
        let mut input = vec![0.0; d + m];
        for i in 0..cloud.len() {
            for (k, zk) in cloud.point(i).iter().enumerate() {
                input[k] += cloud.w[i] * zk;
            }
        }
        let mut tilted = vec![0.0; m * d];
        let mut args = vec![0.0; cloud.len()];
        let mut free = vec![false; cloud.len()];
        for k in 0..m {
            let v = &self.eval_points[k * d..(k + 1) * d];
            for i in 0..cloud.len() {
                let raw = self.scale * v.iter().zip(cloud.point(i)).map(|(a, b)| a * b).sum::<f64>();
                free[i] = raw.abs() < MGF_EXPONENT_CAP;
                args[i] = cloud.w[i].ln() + raw.clamp(-MGF_EXPONENT_CAP, MGF_EXPONENT_CAP);
            }
            let ln_m = log_sum_exp(args.iter().copied());
            input[d + k] = ln_m;
            for i in 0..cloud.len() {
                if free[i] {
                    let p = (args[i] - ln_m).exp();
                    for (t, zk) in tilted[k * d..(k + 1) * d].iter_mut().zip(cloud.point(i)) {
                        *t += self.scale * p * zk;
                    }
                }
            }
        }
        (input, tilted)
    }

    pub fn forward(&self, cloud: &FeatureCloud) -> Vec<f64> {
        self.dense.forward(&self.features(cloud).0)
    }

    pub fn forward_traced(&self, cloud: &FeatureCloud) -> EncoderTrace {
        let (input, tilted) = self.features(cloud);
        EncoderTrace {
            tilted,
            dense: self.dense.forward_traced(&input),
        }
    }

    pub fn backward(&self, trace: &EncoderTrace, grad_out: &[f64], grads: &mut EncoderGrads) {
        let g_in = self.dense.backward(&trace.dense, grad_out, &mut grads.dense);
        let d = self.dim;
        for k in 0..self.n_points() {
            let g = g_in[d + k];
            if g == 0.0 {
                continue;
            }
            for c in 0..d {
                grads.eval_points[k * d + c] += g * trace.tilted[k * d + c];
            }
        }
    }
}

/// Static description of the policy's input and output conventions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicySpec {
    pub n_thetas: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// Multiplier on the actor's mean-offset head.
    pub mean_offset_scale: f64,
    pub state_center: [f64; 2],
    pub state_scale: [f64; 2],
    pub joint_normalizer: FeatureNormalizer,
    pub feature_particles: usize,
}

/// Mean and diagonal standard deviation of the released `(ṽ, s̃)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyOutput {
    pub mean: [f64; 2],
    pub std: [f64; 2],
}

impl PolicyOutput {
    pub fn emission(&self) -> Emission {
        Emission::gaussian(
            GaussianComponent::diagonal(self.mean.to_vec(), &[self.std[0].powi(2), self.std[1].powi(2)])
                .expect("policy standard deviations are floored above zero"),
        )
    }

    /// Diagonal-Gaussian log-density, without building a component.
    pub fn log_density(&self, y: &[f64]) -> f64 {
        let mut out = 0.0;
        for k in 0..2 {
            let r = (y[k] - self.mean[k]) / self.std[k];
            out -= 0.5 * r * r + self.std[k].ln();
        }
        out - std::f64::consts::LN_2 - std::f64::consts::PI.ln()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 2] {
        let mut y = self.mean;
        for k in 0..2 {
            y[k] += self.std[k] * rng.sample::<f64, _>(StandardNormal);
        }
        y
    }

    /// Action vector seen by the critic: `(μ − x, σ)`.
    pub fn action(&self, x: [f64; 2]) -> [f64; ACTION_DIM] {
        [self.mean[0] - x[0], self.mean[1] - x[1], self.std[0], self.std[1]]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub encoder_width: usize,
    pub mgf_points: usize,
    pub mgf_scale: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            actor_hidden: vec![32, 32],
            critic_hidden: vec![32, 32],
            encoder_width: 16,
            mgf_points: 10,
            mgf_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyNetworks {
    pub spec: PolicySpec,
    pub encoder: MgfEncoder,
    pub actor: Mlp,
    pub critic: Mlp,
    /// Per-θ offsets added to the raw actor output while exploring; empty
    /// otherwise and never saved.
    #[serde(skip)]
    pub theta_offsets: Vec<[f64; ACTION_DIM]>,
}

/// Intermediate values of an actor evaluation.
pub struct ActorTrace {
    trace: crate::nn::Trace,
    /// Raw head values after any exploration offset.
    raw: Vec<f64>,
    pub output: PolicyOutput,
}

impl PolicyNetworks {
    pub fn new<R: Rng + ?Sized>(spec: PolicySpec, cfg: &NetworkConfig, rng: &mut R) -> Self {
        let dim = spec.joint_normalizer.dim();
        let encoder = MgfEncoder::new(dim, cfg.mgf_points, cfg.encoder_width, cfg.mgf_scale, rng);
        let e = encoder.output_dim();
        let mut actor_sizes = vec![spec.n_thetas + STATE_DIM + e];
        actor_sizes.extend(&cfg.actor_hidden);
        actor_sizes.push(ACTION_DIM);
        let mut actor = Mlp::new(&actor_sizes, Activation::Relu, Activation::Identity, rng);
        actor.zero_last_layer();
        let mut critic_sizes = vec![spec.n_thetas + STATE_DIM + e + ACTION_DIM];
        critic_sizes.extend(&cfg.critic_hidden);
        critic_sizes.push(1);
        let critic = Mlp::new(&critic_sizes, Activation::Relu, Activation::Identity, rng);
        Self {
            spec,
            encoder,
            actor,
            critic,
            theta_offsets: Vec::new(),
        }
    }

    pub fn n_params(&self) -> usize {
        self.encoder.n_params() + self.actor.n_params() + self.critic.n_params()
    }

    pub fn is_finite(&self) -> bool {
        self.actor.is_finite()
            && self.critic.is_finite()
            && self.encoder.dense.is_finite()
            && self.encoder.eval_points.iter().all(|p| p.is_finite())
    }

    pub fn feature_cloud(&self, belief: &ParticleBelief) -> Result<FeatureCloud> {
        FeatureCloud::from_belief(belief, self.spec.feature_particles, &self.spec.joint_normalizer)
    }

    pub fn encode(&self, cloud: &FeatureCloud) -> Vec<f64> {
        self.encoder.forward(cloud)
    }

    fn state_input(&self, theta: usize, x: [f64; 2], out: &mut Vec<f64>) {
        out.clear();
        out.extend((0..self.spec.n_thetas).map(|k| if k == theta { 1.0 } else { 0.0 }));
        for k in 0..STATE_DIM {
            out.push((x[k] - self.spec.state_center[k]) / self.spec.state_scale[k]);
        }
    }

    pub fn actor_input(&self, theta: usize, x: [f64; 2], encoded: &[f64]) -> Vec<f64> {
        let mut input = Vec::with_capacity(self.actor.input_dim());
        self.state_input(theta, x, &mut input);
        input.extend_from_slice(encoded);
        input
    }

    fn output_from_raw(&self, x: [f64; 2], raw: &[f64]) -> PolicyOutput {
        let s = &self.spec;
        PolicyOutput {
            mean: [x[0] + s.mean_offset_scale * raw[0], x[1] + s.mean_offset_scale * raw[1]],
            std: [
                softplus(raw[2]).clamp(s.sigma_min, s.sigma_max),
                softplus(raw[3]).clamp(s.sigma_min, s.sigma_max),
            ],
        }
    }

    fn add_theta_offset(&self, theta: usize, raw: &mut [f64]) {
        if let Some(off) = self.theta_offsets.get(theta) {
            for (r, o) in raw.iter_mut().zip(off) {
                *r += o;
            }
        }
    }

    /// Deterministic forward pass of the actor.
    pub fn emit(&self, theta: usize, x: [f64; 2], encoded: &[f64]) -> Result<PolicyOutput> {
        let mut raw = self.actor.forward(&self.actor_input(theta, x, encoded));
        self.add_theta_offset(theta, &mut raw);
        let out = self.output_from_raw(x, &raw);
        if out.mean.iter().chain(&out.std).any(|v| !v.is_finite()) {
            return Err(Error::ModelCorrupt("actor produced a non-finite output".into()));
        }
        Ok(out)
    }

    pub fn actor_traced(&self, theta: usize, x: [f64; 2], encoded: &[f64]) -> ActorTrace {
        let trace = self.actor.forward_traced(&self.actor_input(theta, x, encoded));
        let mut raw = trace.output().to_vec();
        self.add_theta_offset(theta, &mut raw);
        let output = self.output_from_raw(x, &raw);
        ActorTrace { trace, raw, output }
    }

    /// `∂(action)/∂(raw actor output)` applied to an action gradient.
    fn action_grad_to_raw(&self, trace: &ActorTrace, grad_action: &[f64]) -> Vec<f64> {
        let raw = &trace.raw;
        let s = &self.spec;
        let mut g = vec![0.0; ACTION_DIM];
        for k in 0..2 {
            g[k] = grad_action[k] * s.mean_offset_scale;
            let sp = softplus(raw[2 + k]);
            if sp > s.sigma_min && sp < s.sigma_max {
                g[2 + k] = grad_action[2 + k] * sigmoid(raw[2 + k]);
            }
        }
        g
    }

    pub fn critic_input(&self, theta: usize, x: [f64; 2], encoded: &[f64], action: &[f64]) -> Vec<f64> {
        let mut input = Vec::with_capacity(self.critic.input_dim());
        self.state_input(theta, x, &mut input);
        input.extend_from_slice(encoded);
        input.extend_from_slice(action);
        input
    }

    pub fn q_value(&self, theta: usize, x: [f64; 2], encoded: &[f64], action: &[f64]) -> f64 {
        self.critic.forward(&self.critic_input(theta, x, encoded, action))[0]
    }

    /// Adds `N(0, std²)` to the output-layer biases of the actor.
    pub fn jitter_actor_heads<R: Rng + ?Sized>(&mut self, std: f64, rng: &mut R) {
        if std <= 0.0 {
            return;
        }
        for b in &mut self.actor.layers.last_mut().unwrap().bias {
            *b += std * rng.sample::<f64, _>(StandardNormal);
        }
    }

    /// Draws an independent `N(0, std²)` output offset for every θ.
    pub fn jitter_theta_heads<R: Rng + ?Sized>(&mut self, std: f64, rng: &mut R) {
        self.theta_offsets = (0..self.spec.n_thetas)
            .map(|_| std::array::from_fn(|_| std * rng.sample::<f64, _>(StandardNormal)))
            .collect();
    }

    pub fn polyak_from(&mut self, online: &PolicyNetworks, tau: f64) -> Result<()> {
        self.actor.polyak_from(&online.actor, tau)?;
        self.critic.polyak_from(&online.critic, tau)?;
        self.encoder.dense.polyak_from(&online.encoder.dense, tau)?;
        crate::nn::polyak_update(&mut self.encoder.eval_points, &online.encoder.eval_points, tau)
    }
}

/// A releasable data-sharing rule. `TrueData` publishes the state itself;
/// observers model it with an isotropic `σ_min` kernel so that likelihoods
/// and leakage bounds stay finite.
#[derive(Clone, Copy, Debug)]
pub enum SharingPolicy<'a> {
    Trained(&'a PolicyNetworks),
    TrueData { sigma_min: f64 },
}

impl SharingPolicy<'_> {
    /// Feature cloud and encoding of the belief (`None` for `TrueData`).
    pub fn encode(&self, belief: &ParticleBelief) -> Result<Option<(Arc<FeatureCloud>, Vec<f64>)>> {
        match self {
            SharingPolicy::Trained(nets) => {
                let cloud = nets.feature_cloud(belief)?;
                let e = nets.encode(&cloud);
                Ok(Some((Arc::new(cloud), e)))
            }
            SharingPolicy::TrueData { .. } => Ok(None),
        }
    }

    pub fn output(&self, theta: usize, x: [f64; 2], encoded: &[f64]) -> Result<PolicyOutput> {
        match self {
            SharingPolicy::Trained(nets) => nets.emit(theta, x, encoded),
            SharingPolicy::TrueData { sigma_min } => Ok(PolicyOutput {
                mean: x,
                std: [*sigma_min; 2],
            }),
        }
    }

    /// Draws the released data for the given output.
    pub fn release<R: Rng + ?Sized>(&self, out: &PolicyOutput, rng: &mut R) -> [f64; 2] {
        match self {
            SharingPolicy::Trained(_) => out.sample(rng),
            SharingPolicy::TrueData { .. } => out.mean,
        }
    }

    pub fn is_true_data(&self) -> bool {
        matches!(self, SharingPolicy::TrueData { .. })
    }
}

/// One step of experience. The belief enters through its feature cloud so
/// the encoder can be trained from replay.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub theta: usize,
    pub x: [f64; 2],
    pub cloud: Arc<FeatureCloud>,
    pub action: [f64; ACTION_DIM],
    pub y: [f64; 2],
    pub reward: f64,
    pub next_x: [f64; 2],
    pub next_cloud: Arc<FeatureCloud>,
    pub terminal: bool,
}

#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            items: Vec::new(),
            next: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, t: Transition) -> Result<()> {
        if !t.reward.is_finite() {
            return Err(Error::InvalidInput("replay reward must be finite".into()));
        }
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
        Ok(())
    }

    /// Uniform sample with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Vec<&Transition> {
        (0..batch)
            .map(|_| &self.items[rng.random_range(0..self.items.len())])
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DdpgConfig {
    pub gamma: f64,
    pub tau: f64,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub lr_encoder: f64,
    pub optimizer: OptimizerKind,
}

impl Default for DdpgConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            tau: 0.005,
            lr_actor: 1e-3,
            lr_critic: 1e-3,
            lr_encoder: 1e-3,
            optimizer: OptimizerKind::Sgd,
        }
    }
}

impl DdpgConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::config("trainer.ddpg.tau", "must lie in (0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::config("trainer.ddpg.gamma", "must lie in [0, 1]"));
        }
        for (f, v) in [
            ("trainer.ddpg.lr_actor", self.lr_actor),
            ("trainer.ddpg.lr_critic", self.lr_critic),
            ("trainer.ddpg.lr_encoder", self.lr_encoder),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::config(f, "learning rates must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateDiagnostics {
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub aborted: bool,
}

/// Bootstrapped targets `r + γ(1 − done)·Q'(s', μ'(s'))` from the target
/// networks.
pub fn td_targets(target: &PolicyNetworks, batch: &[&Transition], gamma: f64) -> Result<Vec<f64>> {
    batch
        .iter()
        .map(|t| {
            if t.terminal {
                return Ok(t.reward);
            }
            let e = target.encode(&t.next_cloud);
            let a = target.emit(t.theta, t.next_x, &e)?.action(t.next_x);
            Ok(t.reward + gamma * target.q_value(t.theta, t.next_x, &e, &a))
        })
        .collect()
}

/// Mean squared TD error with gradients for the critic and the encoder.
pub fn td_loss_grads(
    nets: &PolicyNetworks,
    batch: &[&Transition],
    targets: &[f64],
) -> (f64, Mlp, EncoderGrads) {
    let mut g_critic = nets.critic.zeros_like();
    let mut g_encoder = nets.encoder.zero_grads();
    let n = batch.len() as f64;
    let state_dim = nets.spec.n_thetas + STATE_DIM;
    let e_dim = nets.encoder.output_dim();
    let mut loss = 0.0;
    for (t, y) in batch.iter().zip(targets) {
        let enc = nets.encoder.forward_traced(&t.cloud);
        let trace = nets
            .critic
            .forward_traced(&nets.critic_input(t.theta, t.x, enc.output(), &t.action));
        let err = trace.output()[0] - y;
        loss += err * err / n;
        let g_in = nets.critic.backward(&trace, &[2.0 * err / n], &mut g_critic);
        nets.encoder
            .backward(&enc, &g_in[state_dim..state_dim + e_dim], &mut g_encoder);
    }
    (loss, g_critic, g_encoder)
}

/// `−mean Q(s, μ(s))` with gradients for the actor only.
pub fn actor_loss_grads(nets: &PolicyNetworks, batch: &[&Transition]) -> (f64, Mlp) {
    let mut g_actor = nets.actor.zeros_like();
    let mut g_critic_unused = nets.critic.zeros_like();
    let n = batch.len() as f64;
    let a_start = nets.spec.n_thetas + STATE_DIM + nets.encoder.output_dim();
    let mut loss = 0.0;
    for t in batch {
        let e = nets.encode(&t.cloud);
        let actor = nets.actor_traced(t.theta, t.x, &e);
        let action = actor.output.action(t.x);
        let trace = nets
            .critic
            .forward_traced(&nets.critic_input(t.theta, t.x, &e, &action));
        loss -= trace.output()[0] / n;
        let g_in = nets.critic.backward(&trace, &[-1.0 / n], &mut g_critic_unused);
        let g_raw = nets.action_grad_to_raw(&actor, &g_in[a_start..a_start + ACTION_DIM]);
        nets.actor.backward(&actor.trace, &g_raw, &mut g_actor);
    }
    (loss, g_actor)
}

/// Online and target networks with their optimizer states.
#[derive(Clone, Debug)]
pub struct DdpgLearner {
    pub online: PolicyNetworks,
    pub target: PolicyNetworks,
    pub cfg: DdpgConfig,
    opt_actor: Optimizer,
    opt_critic: Optimizer,
    opt_encoder: Optimizer,
}

impl DdpgLearner {
    pub fn new(online: PolicyNetworks, cfg: DdpgConfig) -> Self {
        let opt_actor = Optimizer::new(cfg.optimizer, cfg.lr_actor, online.actor.n_params());
        let opt_critic = Optimizer::new(cfg.optimizer, cfg.lr_critic, online.critic.n_params());
        let opt_encoder = Optimizer::new(cfg.optimizer, cfg.lr_encoder, online.encoder.n_params());
        Self {
            target: online.clone(),
            online,
            cfg,
            opt_actor,
            opt_critic,
            opt_encoder,
        }
    }

    /// Critic and encoder step on the TD loss, then (unless `critic_only`)
    /// an actor step on `−Q`, then Polyak averaging of the targets.
    pub fn update(&mut self, batch: &[&Transition], critic_only: bool) -> Result<UpdateDiagnostics> {
        if batch.is_empty() {
            return Err(Error::InvalidInput("empty DDPG batch".into()));
        }
        let targets = td_targets(&self.target, batch, self.cfg.gamma)?;
        let (critic_loss, g_critic, g_encoder) = td_loss_grads(&self.online, batch, &targets);
        let (actor_loss, g_actor) = if critic_only {
            (0.0, self.online.actor.zeros_like())
        } else {
            actor_loss_grads(&self.online, batch)
        };
        if !critic_loss.is_finite() || !actor_loss.is_finite() {
            return Ok(UpdateDiagnostics {
                critic_loss,
                actor_loss,
                aborted: true,
            });
        }

        let mut p = self.online.critic.params();
        self.opt_critic
            .step(&mut p, &g_critic.params(), &self.online.critic.frozen_mask());
        self.online.critic.set_params(&p)?;

        let mut p = self.online.encoder.params();
        let mut g = g_encoder.dense.params();
        g.extend_from_slice(&g_encoder.eval_points);
        let mut mask = self.online.encoder.dense.frozen_mask();
        mask.extend(std::iter::repeat(false).take(self.online.encoder.eval_points.len()));
        self.opt_encoder.step(&mut p, &g, &mask);
        self.online.encoder.set_params(&p)?;

        if !critic_only {
            let mut p = self.online.actor.params();
            self.opt_actor
                .step(&mut p, &g_actor.params(), &self.online.actor.frozen_mask());
            self.online.actor.set_params(&p)?;
        }
        if !self.online.is_finite() {
            return Err(Error::ModelCorrupt("non-finite parameters after update".into()));
        }
        self.target.polyak_from(&self.online, self.cfg.tau)?;
        Ok(UpdateDiagnostics {
            critic_loss,
            actor_loss,
            aborted: false,
        })
    }
}

/// Finite-difference checks of the TD-loss gradient (critic and encoder)
/// and the actor-loss gradient (actor).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyGradientReport {
    pub td: GradientReport,
    pub actor: GradientReport,
}

impl PolicyGradientReport {
    pub fn checked(&self) -> usize {
        self.td.checked + self.actor.checked
    }

    pub fn failed(&self) -> usize {
        self.td.failed.len() + self.actor.failed.len()
    }

    pub fn pass_fraction(&self) -> f64 {
        1.0 - self.failed() as f64 / self.checked().max(1) as f64
    }
}

pub fn check_policy_gradients(
    nets: &PolicyNetworks,
    target: &PolicyNetworks,
    batch: &[&Transition],
    gamma: f64,
) -> Result<PolicyGradientReport> {
    let targets = td_targets(target, batch, gamma)?;
    let (_, g_critic, g_encoder) = td_loss_grads(nets, batch, &targets);
    let n_critic = nets.critic.n_params();
    let mut params = nets.critic.params();
    params.extend(nets.encoder.params());
    let mut analytic = g_critic.params();
    analytic.extend(g_encoder.dense.params());
    analytic.extend(&g_encoder.eval_points);
    let mut skip = nets.critic.frozen_mask();
    skip.extend(nets.encoder.dense.frozen_mask());
    skip.extend(std::iter::repeat(false).take(nets.encoder.eval_points.len()));
    let mut probe = nets.clone();
    let td = check_gradient(&params, &analytic, &skip, |p| {
        probe.critic.set_params(&p[..n_critic]).unwrap();
        probe.encoder.set_params(&p[n_critic..]).unwrap();
        td_loss_grads(&probe, batch, &targets).0
    });

    let (_, g_actor) = actor_loss_grads(nets, batch);
    let mut probe = nets.clone();
    let actor = check_gradient(
        &nets.actor.params(),
        &g_actor.params(),
        &nets.actor.frozen_mask(),
        |p| {
            probe.actor.set_params(p).unwrap();
            actor_loss_grads(&probe, batch).0
        },
    );
    Ok(PolicyGradientReport { td, actor })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn test_spec() -> PolicySpec {
        PolicySpec {
            n_thetas: 3,
            sigma_min: 0.05,
            sigma_max: 10.0,
            mean_offset_scale: 1.0,
            state_center: [15.0, 20.0],
            state_scale: [2.0, 4.0],
            joint_normalizer: FeatureNormalizer {
                center: vec![0.5, 0.5, 15.0, 20.0],
                spread: vec![0.3, 0.3, 2.0, 4.0],
            },
            feature_particles: 16,
        }
    }

    fn random_belief(rng: &mut ChaCha8Rng, n: usize) -> ParticleBelief {
        let thetas: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let states = (0..n)
            .map(|_| {
                vec![
                    15.0 + rng.sample::<f64, _>(StandardNormal),
                    20.0 + 2.0 * rng.sample::<f64, _>(StandardNormal),
                ]
            })
            .collect();
        let weights = (0..n).map(|_| rng.random::<f64>() + 0.1).collect();
        ParticleBelief::from_particles(
            vec![vec![0.2, 0.3], vec![0.5, 0.6], vec![0.8, 0.9]],
            thetas,
            states,
            weights,
            0,
        )
        .unwrap()
    }

    fn random_batch(nets: &PolicyNetworks, rng: &mut ChaCha8Rng, n: usize) -> Vec<Transition> {
        (0..n)
            .map(|k| {
                let b = random_belief(rng, 40);
                let b2 = random_belief(rng, 40);
                let x = [15.0 + rng.random::<f64>(), 20.0 - rng.random::<f64>()];
                Transition {
                    theta: k % 3,
                    x,
                    cloud: Arc::new(nets.feature_cloud(&b).unwrap()),
                    action: [0.3, -0.2, 0.8, 1.1],
                    y: x,
                    reward: rng.sample(StandardNormal),
                    next_x: [x[0] + 0.1, x[1] - 0.1],
                    next_cloud: Arc::new(nets.feature_cloud(&b2).unwrap()),
                    terminal: k % 5 == 4,
                }
            })
            .collect()
    }

    fn jittered_nets(seed: u64) -> PolicyNetworks {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut nets = PolicyNetworks::new(test_spec(), &NetworkConfig::default(), &mut rng);
        for l in &mut nets.actor.layers {
            for w in l.weights.iter_mut().chain(l.bias.iter_mut()) {
                *w += 0.1 * rng.sample::<f64, _>(StandardNormal);
            }
        }
        nets
    }

    #[test]
    fn zero_heads_share_the_true_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let nets = PolicyNetworks::new(test_spec(), &NetworkConfig::default(), &mut rng);
        let b = random_belief(&mut rng, 100);
        let e = nets.encode(&nets.feature_cloud(&b).unwrap());
        let out = nets.emit(1, [14.2, 21.0], &e).unwrap();
        assert_eq!(out.mean, [14.2, 21.0]);
        assert!((out.std[0] - 2f64.ln()).abs() < 1e-15);
        assert_eq!(out, nets.emit(1, [14.2, 21.0], &e).unwrap());
    }

    #[test]
    fn std_is_clamped() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut nets = PolicyNetworks::new(test_spec(), &NetworkConfig::default(), &mut rng);
        let last = nets.actor.layers.last_mut().unwrap();
        last.bias[2] = -50.0;
        last.bias[3] = 50.0;
        let e = vec![0.0; 16];
        let out = nets.emit(0, [15.0, 20.0], &e).unwrap();
        assert_eq!(out.std, [0.05, 10.0]);
        nets.actor.layers.last_mut().unwrap().bias[0] = f64::NAN;
        assert!(matches!(nets.emit(0, [15.0, 20.0], &e), Err(Error::ModelCorrupt(_))));
    }

    #[test]
    fn log_density_matches_component() {
        let out = PolicyOutput {
            mean: [15.0, 20.0],
            std: [0.7, 1.3],
        };
        let y = [14.1, 21.7];
        assert!((out.log_density(&y) - out.emission().log_density(&y)).abs() < 1e-12);
    }

    #[test]
    fn feature_cloud_agrees_with_belief_mgf() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = test_spec();
        let b = random_belief(&mut rng, 10);
        let cloud = FeatureCloud::from_belief(&b, 16, &spec.joint_normalizer).unwrap();
        let enc = MgfEncoder::new(4, 3, 8, 0.7, &mut rng);
        let (input, _) = enc.features(&cloud);
        let points: Vec<Vec<f64>> = enc.eval_points.chunks(4).map(|c| c.to_vec()).collect();
        let f = b.mgf_features(&points, 0.7, &spec.joint_normalizer).unwrap();
        for k in 0..3 {
            assert!((input[4 + k] - f.mgf_values[k].ln()).abs() < 1e-12);
        }
        let mut z = vec![0.0; 4];
        spec.joint_normalizer.apply(&f.first_moment, &mut z);
        for k in 0..4 {
            assert!((input[k] - z[k]).abs() < 1e-12);
        }
        // subsampling keeps equal weights summing to one
        let big = random_belief(&mut rng, 500);
        let cloud = FeatureCloud::from_belief(&big, 16, &spec.joint_normalizer).unwrap();
        assert_eq!(cloud.len(), 16);
        assert!((cloud.w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let nets = jittered_nets(4);
        let mut target = jittered_nets(5);
        target.spec = nets.spec.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let batch = random_batch(&nets, &mut rng, 6);
        let refs: Vec<&Transition> = batch.iter().collect();
        let r = check_policy_gradients(&nets, &target, &refs, 0.99).unwrap();
        assert!(r.pass_fraction() >= 0.99, "{:?} {:?}", r.td.failed.len(), r.actor.failed.len());
        assert!(r.checked() > 4000);
    }

    #[test]
    fn polyak_extremes() {
        let online = jittered_nets(7);
        let mut target = jittered_nets(8);
        let before = target.clone();
        target.polyak_from(&online, 0.0).unwrap();
        assert_eq!(target, before);
        target.polyak_from(&online, 1.0).unwrap();
        assert_eq!(target, online);
    }

    #[test]
    fn critic_regresses_constant_reward() {
        let nets = jittered_nets(9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut batch = random_batch(&nets, &mut rng, 32);
        for t in &mut batch {
            t.reward = 1.0;
            t.terminal = true;
        }
        let refs: Vec<&Transition> = batch.iter().collect();
        let mut learner = DdpgLearner::new(
            nets,
            DdpgConfig {
                lr_critic: 1e-2,
                lr_encoder: 1e-2,
                ..DdpgConfig::default()
            },
        );
        let first = learner.update(&refs, true).unwrap().critic_loss;
        let mut last = first;
        for _ in 0..200 {
            last = learner.update(&refs, true).unwrap().critic_loss;
        }
        assert!(last < 0.1 * first, "{first} → {last}");
    }

    #[test]
    fn replay_buffer_wraps() {
        let nets = jittered_nets(11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let batch = random_batch(&nets, &mut rng, 5);
        let mut buf = ReplayBuffer::new(3);
        for t in &batch {
            buf.push(t.clone()).unwrap();
        }
        assert_eq!(buf.len(), 3);
        assert!(buf.items.contains(&batch[4]) && !buf.items.contains(&batch[1]));
        let mut bad = batch[0].clone();
        bad.reward = f64::NAN;
        assert!(buf.push(bad).is_err());
        assert_eq!(buf.sample(4, &mut rng).len(), 4);
    }
}

//! Particle approximation of the joint posterior over the secret parameter
//! and the provider state.
//!
//! A [`ParticleBelief`] is a value: every operation returns a new belief and
//! leaves the receiver untouched. The belief owns its random stream, so a
//! pipeline of operations started from a fixed seed is bit-reproducible.
//!
//! The filter follows the bootstrap scheme: the proposal is the system
//! dynamics, so a weight update only multiplies in the emission likelihood
//! of the shared data. Any factor common to all particles (such as the
//! transition density of the exogenous input) cancels on normalization and
//! is not represented.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::GaussianComponent;

/// Largest exponent argument admitted in the MGF features.
pub const MGF_EXPONENT_CAP: f64 = 30.0;

const NORMALIZATION_TOL: f64 = 1e-9;

/// Samples the next state of one particle given its parameter vector.
pub trait StateTransition {
    fn sample_next(&self, theta: &[f64], state: &[f64], rng: &mut ChaCha8Rng, next: &mut [f64]);
}

impl<F> StateTransition for F
where
    F: Fn(&[f64], &[f64], &mut ChaCha8Rng, &mut [f64]),
{
    fn sample_next(&self, theta: &[f64], state: &[f64], rng: &mut ChaCha8Rng, next: &mut [f64]) {
        self(theta, state, rng, next)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParticleBelief {
    theta_support: Vec<Vec<f64>>,
    thetas: Vec<usize>,
    states: Vec<f64>,
    state_dim: usize,
    weights: Vec<f64>,
    seed: u64,
    rng: ChaCha8Rng,
}

/// First moment of the particle cloud plus MGF evaluations.
#[derive(Clone, Debug, PartialEq)]
pub struct MgfFeatures {
    pub first_moment: Vec<f64>,
    pub mgf_values: Vec<f64>,
}

/// Affine standardization `z = (p − center) / spread` applied to the joint
/// particle vector `(θ, x)` before MGF evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureNormalizer {
    pub center: Vec<f64>,
    pub spread: Vec<f64>,
}

impl FeatureNormalizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            center: vec![0.0; dim],
            spread: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn apply(&self, raw: &[f64], out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            *o = (raw[k] - self.center[k]) / self.spread[k];
        }
    }
}

impl ParticleBelief {
    /// Allocates particles to parameter values in proportion to `prior`
    /// (largest-remainder rounding), draws states from `state_prior`, and
    /// assigns uniform weights. Particles are grouped by parameter index.
    pub fn init(
        theta_support: Vec<Vec<f64>>,
        prior: &[f64],
        state_prior: &GaussianComponent,
        n_particles: usize,
        seed: u64,
    ) -> Result<Self> {
        let k = theta_support.len();
        if k == 0 {
            return Err(Error::InvalidInput("empty theta support".into()));
        }
        if prior.len() != k {
            return Err(Error::DimensionMismatch {
                expected: k,
                got: prior.len(),
            });
        }
        if prior.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
            return Err(Error::InvalidInput("prior has negative or non-finite mass".into()));
        }
        let total: f64 = prior.iter().sum();
        if (total - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::InvalidInput(format!("prior sums to {total}, not 1")));
        }
        let supported = prior.iter().filter(|p| **p > 0.0).count();
        if n_particles < supported {
            return Err(Error::InvalidInput(format!(
                "{n_particles} particles cannot cover {supported} supported parameter values"
            )));
        }
        let counts = allocate_largest_remainder(prior, n_particles);

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = state_prior.dim();
        let mut thetas = Vec::with_capacity(n_particles);
        let mut states = vec![0.0; n_particles * d];
        for (j, c) in counts.iter().enumerate() {
            thetas.extend(std::iter::repeat(j).take(*c));
        }
        for i in 0..n_particles {
            state_prior.sample_into(&mut rng, &mut states[i * d..(i + 1) * d]);
        }
        Ok(Self {
            theta_support,
            thetas,
            states,
            state_dim: d,
            weights: vec![1.0 / n_particles as f64; n_particles],
            seed,
            rng,
        })
    }

    /// Assembles a belief from explicit particles; weights are normalized.
    pub fn from_particles(
        theta_support: Vec<Vec<f64>>,
        thetas: Vec<usize>,
        states: Vec<Vec<f64>>,
        weights: Vec<f64>,
        seed: u64,
    ) -> Result<Self> {
        let n = thetas.len();
        if n == 0 || states.len() != n || weights.len() != n {
            return Err(Error::InvalidInput(
                "particle arrays must be non-empty and of equal length".into(),
            ));
        }
        let d = states[0].len();
        if d == 0 || states.iter().any(|s| s.len() != d) {
            return Err(Error::InvalidInput("state vectors must share a positive dimension".into()));
        }
        if thetas.iter().any(|t| *t >= theta_support.len()) {
            return Err(Error::InvalidInput("theta index outside support".into()));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidInput("weights must be finite and non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::InvalidInput("weights sum to zero".into()));
        }
        Ok(Self {
            theta_support,
            thetas,
            states: states.into_iter().flatten().collect(),
            state_dim: d,
            weights: weights.iter().map(|w| w / total).collect(),
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn len(&self) -> usize {
        self.thetas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.thetas.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn theta_dim(&self) -> usize {
        self.theta_support[0].len()
    }

    pub fn theta_support(&self) -> &[Vec<f64>] {
        &self.theta_support
    }

    pub fn support_size(&self) -> usize {
        self.theta_support.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }

    pub fn theta_index(&self, i: usize) -> usize {
        self.thetas[i]
    }

    pub fn theta_indices(&self) -> &[usize] {
        &self.thetas
    }

    pub fn theta(&self, i: usize) -> &[f64] {
        &self.theta_support[self.thetas[i]]
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.state_dim..(i + 1) * self.state_dim]
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Reweights by the emission log-likelihood of the shared data at each
    /// particle: `ωᵢ ∝ ωᵢ · exp(ℓᵢ)`. Computed in log space, so only a belief
    /// where no particle has finite likelihood fails.
    pub fn update_weights<F>(&self, log_likelihood: F) -> Result<Self>
    where
        F: Fn(usize, usize, &[f64]) -> f64,
    {
        let n = self.len();
        let mut log_w = Vec::with_capacity(n);
        let mut max_ll = f64::NEG_INFINITY;
        for i in 0..n {
            let ll = log_likelihood(i, self.thetas[i], self.state(i));
            if ll.is_nan() || ll == f64::INFINITY {
                return Err(Error::InvalidInput(format!(
                    "log-likelihood of particle {i} is {ll}"
                )));
            }
            max_ll = max_ll.max(ll);
            log_w.push(if self.weights[i] > 0.0 {
                self.weights[i].ln() + ll
            } else {
                f64::NEG_INFINITY
            });
        }
        let m = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !m.is_finite() {
            return Err(Error::DegenerateUpdate {
                max_log_likelihood: max_ll,
            });
        }
        let mut weights: Vec<f64> = log_w.iter().map(|l| (l - m).exp()).collect();
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        Ok(Self {
            weights,
            ..self.clone()
        })
    }

    /// `1 / Σ ωᵢ²`.
    pub fn effective_sample_size(&self) -> f64 {
        1.0 / self.weights.iter().map(|w| w * w).sum::<f64>()
    }

    /// Systematic resampling: one uniform offset, `N` evenly spaced
    /// positions through the cumulative weights. Each particle's expected
    /// copy count is `N·ωᵢ`. Output weights are uniform.
    pub fn resample(&self) -> Self {
        let n = self.len();
        let mut next = self.clone();
        let offset: f64 = next.rng.random::<f64>() / n as f64;
        let step = 1.0 / n as f64;
        let mut cumulative = self.weights[0];
        let mut src = 0;
        for k in 0..n {
            let u = offset + k as f64 * step;
            while u > cumulative && src + 1 < n {
                src += 1;
                cumulative += self.weights[src];
            }
            next.thetas[k] = self.thetas[src];
            next.states[k * self.state_dim..(k + 1) * self.state_dim]
                .copy_from_slice(self.state(src));
        }
        next.weights.iter_mut().for_each(|w| *w = step);
        next
    }

    /// Resamples when the effective sample size falls below
    /// `threshold_fraction · N`. Returns whether resampling happened.
    pub fn resample_if_degenerate(&self, threshold_fraction: f64) -> (Self, bool) {
        if self.effective_sample_size() < threshold_fraction * self.len() as f64 {
            (self.resample(), true)
        } else {
            (self.clone(), false)
        }
    }

    /// Replaces every state with a draw from the transition; weights and
    /// parameter indices are unchanged.
    pub fn propagate<T: StateTransition + ?Sized>(&self, transition: &T) -> Result<Self> {
        let mut next = self.clone();
        let d = self.state_dim;
        let mut buf = vec![0.0; d];
        for i in 0..self.len() {
            transition.sample_next(self.theta(i), self.state(i), &mut next.rng, &mut buf);
            if buf.iter().any(|v| !v.is_finite()) {
                return Err(Error::Propagation { particle: i });
            }
            next.states[i * d..(i + 1) * d].copy_from_slice(&buf);
        }
        Ok(next)
    }

    /// `q̂(θʲ) = Σ_{i: θᵢ = θʲ} ωᵢ`.
    pub fn theta_marginal(&self) -> Vec<f64> {
        let mut q = vec![0.0; self.support_size()];
        for (t, w) in self.thetas.iter().zip(&self.weights) {
            q[*t] += w;
        }
        q
    }

    /// Weighted mean and covariance (row-major) of the states, marginalized
    /// over the parameter.
    pub fn state_moments(&self) -> (Vec<f64>, Vec<f64>) {
        let d = self.state_dim;
        let mut mean = vec![0.0; d];
        for i in 0..self.len() {
            for (k, m) in mean.iter_mut().enumerate() {
                *m += self.weights[i] * self.state(i)[k];
            }
        }
        let mut cov = vec![0.0; d * d];
        for i in 0..self.len() {
            let s = self.state(i);
            for a in 0..d {
                for b in 0..d {
                    cov[a * d + b] += self.weights[i] * (s[a] - mean[a]) * (s[b] - mean[b]);
                }
            }
        }
        (mean, cov)
    }

    /// The joint vector `(θᵢ, xᵢ)` of particle `i`.
    pub fn joint(&self, i: usize, out: &mut Vec<f64>) {
        out.clear();
        out.extend_from_slice(self.theta(i));
        out.extend_from_slice(self.state(i));
    }

    /// First moment of `(θ, x)` and `M_k = Σᵢ ωᵢ exp(scale · vₖᵀ zᵢ)` with
    /// `zᵢ` the standardized joint vector. The exponent is clamped to
    /// `±MGF_EXPONENT_CAP`.
    pub fn mgf_features(
        &self,
        eval_points: &[Vec<f64>],
        scale: f64,
        normalizer: &FeatureNormalizer,
    ) -> Result<MgfFeatures> {
        let dim = self.theta_dim() + self.state_dim;
        if normalizer.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: normalizer.dim(),
            });
        }
        if let Some(v) = eval_points.iter().find(|v| v.len() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: v.len(),
            });
        }
        let mut first_moment = vec![0.0; dim];
        let mut mgf_values = vec![0.0; eval_points.len()];
        let mut joint = Vec::with_capacity(dim);
        let mut z = vec![0.0; dim];
        for i in 0..self.len() {
            let w = self.weights[i];
            self.joint(i, &mut joint);
            for (m, p) in first_moment.iter_mut().zip(&joint) {
                *m += w * p;
            }
            normalizer.apply(&joint, &mut z);
            for (k, v) in eval_points.iter().enumerate() {
                let arg: f64 = scale * v.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>();
                mgf_values[k] += w * arg.clamp(-MGF_EXPONENT_CAP, MGF_EXPONENT_CAP).exp();
            }
        }
        if mgf_values.iter().any(|m| !m.is_finite() || *m <= 0.0) {
            return Err(Error::Feature("MGF value not finite and positive".into()));
        }
        Ok(MgfFeatures {
            first_moment,
            mgf_values,
        })
    }

    pub fn to_snapshot(&self) -> BeliefSnapshot {
        BeliefSnapshot {
            schema_version: BeliefSnapshot::SCHEMA_VERSION,
            theta_support: self.theta_support.clone(),
            thetas: self.thetas.clone(),
            states: (0..self.len()).map(|i| self.state(i).to_vec()).collect(),
            weights: self.weights.clone(),
            seed: self.seed,
            rng: self.rng.clone(),
        }
    }

    pub fn from_snapshot(snapshot: BeliefSnapshot) -> Result<Self> {
        if snapshot.schema_version != BeliefSnapshot::SCHEMA_VERSION {
            return Err(Error::InvalidInput(format!(
                "unsupported belief schema version {}",
                snapshot.schema_version
            )));
        }
        let weights = snapshot.weights.clone();
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::InvalidInput(format!("snapshot weights sum to {total}")));
        }
        let mut belief = Self::from_particles(
            snapshot.theta_support,
            snapshot.thetas,
            snapshot.states,
            snapshot.weights,
            snapshot.seed,
        )?;
        belief.weights = weights;
        belief.rng = snapshot.rng;
        Ok(belief)
    }
}

/// JSON checkpoint of a belief. `rng` is the full generator state, so a
/// restored belief continues the exact random stream.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BeliefSnapshot {
    pub schema_version: u32,
    pub theta_support: Vec<Vec<f64>>,
    pub thetas: Vec<usize>,
    pub states: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub seed: u64,
    pub rng: ChaCha8Rng,
}

impl BeliefSnapshot {
    pub const SCHEMA_VERSION: u32 = 1;

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Largest-remainder apportionment of `n` items to `shares`; every value
/// with positive share receives at least one item when `n` allows.
pub(crate) fn allocate_largest_remainder(shares: &[f64], n: usize) -> Vec<usize> {
    let quotas: Vec<f64> = shares.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|a, b| {
        let ra = quotas[*a] - quotas[*a].floor();
        let rb = quotas[*b] - quotas[*b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(b))
    });
    for j in order.into_iter().take(n.saturating_sub(assigned)) {
        counts[j] += 1;
    }
    for j in 0..shares.len() {
        if shares[j] > 0.0 && counts[j] == 0 {
            let donor = (0..shares.len()).max_by_key(|k| (counts[*k], usize::MAX - k)).unwrap();
            if counts[donor] > 1 {
                counts[donor] -= 1;
                counts[j] = 1;
            }
        }
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_prior(d: usize) -> GaussianComponent {
        GaussianComponent::diagonal(vec![0.0; d], &vec![1.0; d]).unwrap()
    }

    fn support(k: usize) -> Vec<Vec<f64>> {
        (0..k).map(|j| vec![j as f64]).collect()
    }

    #[test]
    fn init_allocates_evenly() {
        let b = ParticleBelief::init(support(4), &[0.25; 4], &unit_prior(2), 5184, 1).unwrap();
        for j in 0..4 {
            assert_eq!(b.theta_indices().iter().filter(|t| **t == j).count(), 1296);
        }
        assert!(b.weights().iter().all(|w| *w == 1.0 / 5184.0));
        let q = b.theta_marginal();
        assert!(q.iter().all(|x| (x - 0.25).abs() < 1e-12));
    }

    #[test]
    fn init_single_theta_and_determinism() {
        let b = ParticleBelief::init(support(1), &[1.0], &unit_prior(1), 50, 3).unwrap();
        assert!((b.theta_marginal()[0] - 1.0).abs() < 1e-12);
        let a = ParticleBelief::init(support(3), &[0.2, 0.3, 0.5], &unit_prior(2), 100, 9).unwrap();
        let c = ParticleBelief::init(support(3), &[0.2, 0.3, 0.5], &unit_prior(2), 100, 9).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn init_rejects_too_few_particles_and_bad_prior() {
        assert!(ParticleBelief::init(support(4), &[0.25; 4], &unit_prior(1), 3, 0).is_err());
        assert!(ParticleBelief::init(support(2), &[0.7, 0.7], &unit_prior(1), 10, 0).is_err());
        assert!(ParticleBelief::init(support(2), &[1.0], &unit_prior(1), 10, 0).is_err());
    }

    #[test]
    fn largest_remainder_rounding() {
        assert_eq!(allocate_largest_remainder(&[0.2, 0.3, 0.5], 7), vec![1, 2, 4]);
        assert_eq!(allocate_largest_remainder(&[0.01, 0.99], 10), vec![1, 9]);
        assert_eq!(allocate_largest_remainder(&[0.0, 1.0], 3), vec![0, 3]);
    }

    fn two_particle() -> ParticleBelief {
        ParticleBelief::from_particles(
            support(2),
            vec![0, 1],
            vec![vec![0.0], vec![1.0]],
            vec![0.5, 0.5],
            0,
        )
        .unwrap()
    }

    #[test]
    fn update_weights_examples() {
        let b = two_particle();
        let same = b.update_weights(|_, _, _| -1.3).unwrap();
        assert!((same.weight(0) - 0.5).abs() < 1e-15);
        let u = b.update_weights(|i, _, _| if i == 0 { 2f64.ln() } else { 0.0 }).unwrap();
        assert!((u.weight(0) - 2.0 / 3.0).abs() < 1e-12);
        assert!((u.weight(1) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(u.state(1), b.state(1));
    }

    #[test]
    fn update_weights_survives_underflow_and_reports_degeneracy() {
        let b = two_particle();
        let u = b.update_weights(|i, _, _| if i == 0 { -5000.0 } else { -5001.0 }).unwrap();
        assert!((u.weight(0) - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-12);
        match b.update_weights(|_, _, _| f64::NEG_INFINITY) {
            Err(Error::DegenerateUpdate { max_log_likelihood }) => {
                assert_eq!(max_log_likelihood, f64::NEG_INFINITY)
            }
            other => panic!("{other:?}"),
        }
        assert!(b.update_weights(|_, _, _| f64::NAN).is_err());
    }

    #[test]
    fn ess_examples() {
        let b = ParticleBelief::init(support(1), &[1.0], &unit_prior(1), 100, 0).unwrap();
        assert!((b.effective_sample_size() - 100.0).abs() < 1e-9);
        let b = ParticleBelief::from_particles(
            support(1),
            vec![0; 3],
            vec![vec![0.0]; 3],
            vec![0.5, 0.25, 0.25],
            0,
        )
        .unwrap();
        assert!((b.effective_sample_size() - 1.0 / 0.375).abs() < 1e-12);
        let b = ParticleBelief::from_particles(
            support(1),
            vec![0; 4],
            vec![vec![0.0]; 4],
            vec![1.0, 0.0, 0.0, 0.0],
            0,
        )
        .unwrap();
        assert_eq!(b.effective_sample_size(), 1.0);
    }

    #[test]
    fn resample_point_mass_and_determinism() {
        let b = ParticleBelief::from_particles(
            support(2),
            vec![0, 1, 1, 1],
            vec![vec![7.0], vec![1.0], vec![2.0], vec![3.0]],
            vec![1.0, 0.0, 0.0, 0.0],
            5,
        )
        .unwrap();
        let r = b.resample();
        assert!((0..4).all(|i| r.state(i) == [7.0] && r.theta_index(i) == 0));
        assert!(r.weights().iter().all(|w| *w == 0.25));
        assert_eq!(b.resample(), b.resample());
    }

    #[test]
    fn resample_expected_copies() {
        let n = 10;
        let w: Vec<f64> = (1..=n).map(|i| i as f64).collect();
        let total: f64 = w.iter().sum();
        let b = ParticleBelief::from_particles(
            support(2),
            (0..n).map(|i| i % 2).collect(),
            (0..n).map(|i| vec![i as f64]).collect(),
            w.clone(),
            11,
        )
        .unwrap();
        let q0 = b.theta_marginal();
        let trials = 10_000;
        let mut copies = vec![0usize; n];
        let mut cur = b.clone();
        let mut q_mean = vec![0.0; 2];
        for _ in 0..trials {
            let r = cur.resample();
            for i in 0..n {
                copies[r.state(i)[0] as usize] += 1;
            }
            for (m, q) in q_mean.iter_mut().zip(r.theta_marginal()) {
                *m += q / trials as f64;
            }
            // Advance the stream without changing the particles.
            cur.rng = r.rng.clone();
        }
        for i in 0..n {
            let expected = n as f64 * w[i] / total;
            let mean = copies[i] as f64 / trials as f64;
            assert!((mean - expected).abs() < 0.03 * expected.max(1.0), "{i}: {mean} vs {expected}");
        }
        for j in 0..2 {
            assert!((q_mean[j] - q0[j]).abs() < 0.01);
        }
    }

    #[test]
    fn uniform_resample_keeps_one_copy_each() {
        let b = ParticleBelief::init(support(2), &[0.5, 0.5], &unit_prior(1), 200, 4).unwrap();
        let mut cur = b.clone();
        let mut copies = vec![0usize; 200];
        let trials = 10_000;
        for _ in 0..trials {
            let r = cur.resample();
            for i in 0..200 {
                let src = (0..200).find(|k| b.state(*k) == r.state(i)).unwrap();
                copies[src] += 1;
            }
            cur.rng = r.rng.clone();
            if copies.iter().sum::<usize>() > 200 * 200 {
                break;
            }
        }
        let rounds = copies.iter().sum::<usize>() as f64 / 200.0;
        for c in copies {
            let mean = c as f64 / rounds;
            assert!((0.97..=1.03).contains(&mean));
        }
    }

    #[test]
    fn propagate_examples() {
        let b = ParticleBelief::init(support(2), &[0.5, 0.5], &unit_prior(2), 20, 2).unwrap();
        let same = b
            .propagate(&|_: &[f64], s: &[f64], _: &mut ChaCha8Rng, out: &mut [f64]| out.copy_from_slice(s))
            .unwrap();
        for i in 0..20 {
            assert_eq!(same.state(i), b.state(i));
        }
        let doubled = b
            .propagate(&|_: &[f64], s: &[f64], _: &mut ChaCha8Rng, out: &mut [f64]| {
                for (o, x) in out.iter_mut().zip(s) {
                    *o = 2.0 * x;
                }
            })
            .unwrap();
        for i in 0..20 {
            assert_eq!(doubled.state(i)[1], 2.0 * b.state(i)[1]);
            assert_eq!(doubled.weight(i), b.weight(i));
        }
        let bad = b.propagate(&|_: &[f64], _: &[f64], _: &mut ChaCha8Rng, out: &mut [f64]| {
            out.fill(f64::NAN)
        });
        assert!(matches!(bad, Err(Error::Propagation { particle: 0 })));
    }

    #[test]
    fn theta_marginal_examples() {
        let b = ParticleBelief::from_particles(
            support(2),
            vec![0, 0, 1, 1],
            vec![vec![0.0]; 4],
            vec![0.1, 0.3, 0.2, 0.4],
            0,
        )
        .unwrap();
        let q = b.theta_marginal();
        assert!((q[0] - 0.4).abs() < 1e-12 && (q[1] - 0.6).abs() < 1e-12);
        let b = b.update_weights(|_, t, _| if t == 0 { 0.0 } else { f64::NEG_INFINITY }).unwrap();
        assert_eq!(b.theta_marginal(), vec![1.0, 0.0]);
    }

    #[test]
    fn mgf_point_masses() {
        let b = ParticleBelief::from_particles(vec![vec![0.0]], vec![0], vec![vec![0.0, 0.0]], vec![1.0], 0).unwrap();
        let f = b
            .mgf_features(&[vec![0.3, -1.0, 2.0]], 1.0, &FeatureNormalizer::identity(3))
            .unwrap();
        assert_eq!(f.mgf_values, vec![1.0]);
        let b = ParticleBelief::from_particles(vec![vec![0.5]], vec![0], vec![vec![1.0, -2.0]], vec![1.0], 0).unwrap();
        let v = vec![0.4, 0.1, 0.3];
        let f = b.mgf_features(&[v.clone()], 0.7, &FeatureNormalizer::identity(3)).unwrap();
        let expected = (0.7f64 * (0.4 * 0.5 + 0.1 * 1.0 - 0.3 * 2.0)).exp();
        assert!((f.mgf_values[0] - expected).abs() < 1e-14);
        assert_eq!(f.first_moment, vec![0.5, 1.0, -2.0]);
    }

    #[test]
    fn mgf_gaussian_cloud() {
        let b = ParticleBelief::init(vec![vec![0.0]], &[1.0], &unit_prior(1), 10_000, 17).unwrap();
        let f = b.mgf_features(&[vec![0.0, 1.0]], 1.0, &FeatureNormalizer::identity(2)).unwrap();
        // sampling sd of the mean of e^{Z} over 1e4 draws is ≈ 0.022
        assert!((f.mgf_values[0] - 0.5f64.exp()).abs() < 0.07, "{}", f.mgf_values[0]);
    }

    #[test]
    fn mgf_exponent_is_capped() {
        let b = ParticleBelief::from_particles(vec![vec![0.0]], vec![0], vec![vec![1e6]], vec![1.0], 0).unwrap();
        let f = b.mgf_features(&[vec![0.0, 1.0]], 1.0, &FeatureNormalizer::identity(2)).unwrap();
        assert_eq!(f.mgf_values[0], MGF_EXPONENT_CAP.exp());
        assert!(b.mgf_features(&[vec![1.0]], 1.0, &FeatureNormalizer::identity(2)).is_err());
    }

    #[test]
    fn snapshot_round_trip_continues_stream() {
        let b = ParticleBelief::init(support(2), &[0.5, 0.5], &unit_prior(2), 30, 8).unwrap();
        let b = b.resample();
        let json = b.to_snapshot().to_json().unwrap();
        let restored = ParticleBelief::from_snapshot(BeliefSnapshot::from_json(&json).unwrap()).unwrap();
        assert_eq!(restored.resample(), b.resample());
    }
}

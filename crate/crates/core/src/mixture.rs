//! Gaussian mixtures induced by a policy at a particle belief, their
//! closed-form entropy and mutual-information bounds, and Monte-Carlo
//! reference estimators.
//!
//! Each particle emits a finite Gaussian mixture (one part for a pure
//! Gaussian policy). All bounds operate on the flattened list of weighted
//! Gaussian parts; parts with zero weight are dropped since they contribute
//! nothing to any sum.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::belief::ParticleBelief;
use crate::error::{Error, Result};
use crate::gaussian::{chernoff_unchecked, kl_unchecked, GaussianComponent};
use crate::linalg;

const NORMALIZATION_TOL: f64 = 1e-9;
const MC_CHUNK: usize = 1 << 14;
const MC_MAX_DIM: usize = 8;

/// Finite Gaussian mixture emitted at one particle.
#[derive(Clone, Debug, PartialEq)]
pub struct Emission {
    parts: Vec<(f64, GaussianComponent)>,
}

impl Emission {
    pub fn gaussian(g: GaussianComponent) -> Self {
        Self {
            parts: vec![(1.0, g)],
        }
    }

    pub fn mixture(parts: Vec<(f64, GaussianComponent)>) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::InvalidInput("emission mixture has no parts".into()));
        }
        let d = parts[0].1.dim();
        if let Some((_, g)) = parts.iter().find(|(_, g)| g.dim() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: g.dim(),
            });
        }
        check_weights(parts.iter().map(|(w, _)| *w), "emission sub-weights")?;
        Ok(Self { parts })
    }

    pub fn parts(&self) -> &[(f64, GaussianComponent)] {
        &self.parts
    }

    pub fn dim(&self) -> usize {
        self.parts[0].1.dim()
    }

    pub fn log_density(&self, y: &[f64]) -> f64 {
        log_sum_exp(self.parts.iter().map(|(w, g)| w.ln() + g.log_density(y)))
    }
}

/// One particle's contribution to a mixture.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureComponent {
    pub weight: f64,
    pub theta_index: usize,
    pub emission: Emission,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyMixture {
    components: Vec<MixtureComponent>,
    dim: usize,
    support_size: usize,
}

impl PolicyMixture {
    pub fn new(components: Vec<MixtureComponent>, support_size: usize) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::InvalidInput("mixture has no components".into()));
        }
        let dim = components[0].emission.dim();
        if let Some(c) = components.iter().find(|c| c.emission.dim() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: c.emission.dim(),
            });
        }
        if components.iter().any(|c| c.theta_index >= support_size) {
            return Err(Error::InvalidInput("theta index outside support".into()));
        }
        check_weights(components.iter().map(|c| c.weight), "mixture weights")?;
        Ok(Self {
            components,
            dim,
            support_size,
        })
    }

    /// A mixture of plain Gaussians, all attributed to parameter index 0.
    pub fn from_gaussians(parts: Vec<(f64, GaussianComponent)>) -> Result<Self> {
        Self::new(
            parts
                .into_iter()
                .map(|(weight, g)| MixtureComponent {
                    weight,
                    theta_index: 0,
                    emission: Emission::gaussian(g),
                })
                .collect(),
            1,
        )
    }

    pub fn components(&self) -> &[MixtureComponent] {
        &self.components
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn support_size(&self) -> usize {
        self.support_size
    }

    /// Number of weighted Gaussian parts after flattening the emissions.
    pub fn part_count(&self) -> usize {
        self.components.iter().map(|c| c.emission.parts.len()).sum()
    }

    pub fn log_density(&self, y: &[f64]) -> f64 {
        self.flat().log_density(y)
    }

    pub fn density(&self, y: &[f64]) -> f64 {
        self.log_density(y).exp()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let flat = self.flat();
        let mut out = vec![0.0; self.dim];
        let cdf = flat.cdf();
        flat.g[pick(&cdf, rng.random())].sample_into(rng, &mut out);
        out
    }

    fn flat(&self) -> Flat<'_> {
        Flat::build(
            self.dim,
            self.components
                .iter()
                .map(|c| (c.weight, c.theta_index, &c.emission)),
        )
    }
}

fn check_weights(weights: impl Iterator<Item = f64>, what: &str) -> Result<()> {
    let mut total = 0.0;
    for w in weights {
        if !(w >= 0.0) || !w.is_finite() {
            return Err(Error::InvalidInput(format!("{what} must be finite and non-negative")));
        }
        total += w;
    }
    if (total - 1.0).abs() > NORMALIZATION_TOL {
        return Err(Error::InvalidInput(format!("{what} sum to {total}, not 1")));
    }
    Ok(())
}

fn check_emissions(belief: &ParticleBelief, emissions: &[Emission]) -> Result<usize> {
    if emissions.len() != belief.len() {
        return Err(Error::DimensionMismatch {
            expected: belief.len(),
            got: emissions.len(),
        });
    }
    let d = emissions[0].dim();
    if let Some(e) = emissions.iter().find(|e| e.dim() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: e.dim(),
        });
    }
    Ok(d)
}

/// `p(y | h) = Σᵢ ωᵢ pᵢ(y)` over all particles.
pub fn marginal_mixture(belief: &ParticleBelief, emissions: &[Emission]) -> Result<PolicyMixture> {
    check_emissions(belief, emissions)?;
    PolicyMixture::new(
        (0..belief.len())
            .map(|i| MixtureComponent {
                weight: belief.weight(i),
                theta_index: belief.theta_index(i),
                emission: emissions[i].clone(),
            })
            .collect(),
        belief.support_size(),
    )
}

/// `p(y | θ, h) = Σ_{i: θᵢ = θ} (ωᵢ / q̂(θ)) pᵢ(y)`.
pub fn conditional_mixture(
    belief: &ParticleBelief,
    emissions: &[Emission],
    theta_index: usize,
) -> Result<PolicyMixture> {
    check_emissions(belief, emissions)?;
    let q = belief
        .theta_marginal()
        .get(theta_index)
        .copied()
        .ok_or_else(|| Error::InvalidInput(format!("theta index {theta_index} outside support")))?;
    if q <= 0.0 {
        return Err(Error::EmptySupport(theta_index));
    }
    PolicyMixture::new(
        (0..belief.len())
            .filter(|i| belief.theta_index(*i) == theta_index)
            .map(|i| MixtureComponent {
                weight: belief.weight(i) / q,
                theta_index,
                emission: emissions[i].clone(),
            })
            .collect(),
        belief.support_size(),
    )
}

/// Flattened weighted parts of a mixture, borrowed from the emissions.
struct Flat<'a> {
    dim: usize,
    w: Vec<f64>,
    g: Vec<&'a GaussianComponent>,
    theta: Vec<usize>,
}

impl<'a> Flat<'a> {
    fn build(dim: usize, items: impl Iterator<Item = (f64, usize, &'a Emission)>) -> Self {
        let mut flat = Flat {
            dim,
            w: Vec::new(),
            g: Vec::new(),
            theta: Vec::new(),
        };
        for (weight, theta, emission) in items {
            for (sub, g) in &emission.parts {
                let w = weight * sub;
                if w > 0.0 {
                    flat.w.push(w);
                    flat.g.push(g);
                    flat.theta.push(theta);
                }
            }
        }
        flat
    }

    fn len(&self) -> usize {
        self.w.len()
    }

    fn component_entropy(&self) -> f64 {
        self.w.iter().zip(&self.g).map(|(w, g)| w * g.entropy()).sum()
    }

    /// `Σᵢ wᵢ ln Σⱼ wⱼ e^{−D(i, j)}`, each row in log-sum-exp form.
    fn mixing_term<D>(&self, div: D) -> f64
    where
        D: Fn(&GaussianComponent, &GaussianComponent) -> f64 + Sync,
    {
        let n = self.len();
        let log_w: Vec<f64> = self.w.iter().map(|w| w.ln()).collect();
        let rows: Vec<f64> = (0..n)
            .into_par_iter()
            .map_init(
                || vec![0.0; n],
                |buf, i| {
                    for j in 0..n {
                        buf[j] = if i == j {
                            log_w[j]
                        } else {
                            log_w[j] - div(self.g[i], self.g[j])
                        };
                    }
                    log_sum_exp(buf.iter().copied())
                },
            )
            .collect();
        self.w.iter().zip(&rows).map(|(w, r)| w * r).sum()
    }

    fn upper_kl(&self) -> f64 {
        self.component_entropy() - self.mixing_term(kl_unchecked)
    }

    fn lower_chernoff(&self, alpha: f64) -> f64 {
        self.component_entropy() - self.mixing_term(|p, q| chernoff_unchecked(p, q, alpha))
    }

    fn upper_maxent(&self) -> Result<f64> {
        let d = self.dim;
        let mut mean = vec![0.0; d];
        for (w, g) in self.w.iter().zip(&self.g) {
            for (m, x) in mean.iter_mut().zip(g.mean()) {
                *m += w * x;
            }
        }
        let mut cov = vec![0.0; d * d];
        for (w, g) in self.w.iter().zip(&self.g) {
            let mu = g.mean();
            for a in 0..d {
                for b in 0..d {
                    cov[a * d + b] +=
                        w * (g.cov_at(a, b) + (mu[a] - mean[a]) * (mu[b] - mean[b]));
                }
            }
        }
        let l = linalg::cholesky(&cov, d).ok_or_else(|| {
            Error::InvalidInput("global covariance of the mixture is singular".into())
        })?;
        let log_det = linalg::log_det_from_cholesky(&l, d);
        Ok(0.5 * (d as f64 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln() + log_det))
    }

    fn log_density(&self, y: &[f64]) -> f64 {
        log_sum_exp(
            self.w
                .iter()
                .zip(&self.g)
                .map(|(w, g)| w.ln() + g.log_density(y)),
        )
    }

    fn cdf(&self) -> Vec<f64> {
        let mut acc = 0.0;
        let total: f64 = self.w.iter().sum();
        self.w
            .iter()
            .map(|w| {
                acc += w / total;
                acc
            })
            .collect()
    }
}

fn pick(cdf: &[f64], u: f64) -> usize {
    cdf.partition_point(|c| *c <= u).min(cdf.len() - 1)
}

pub(crate) fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidInput(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    Ok(())
}

/// Pairwise-KL upper bound on the mixture's differential entropy.
pub fn entropy_upper_kl(m: &PolicyMixture) -> f64 {
    m.flat().upper_kl()
}

/// Pairwise-Chernoff lower bound on the mixture's differential entropy.
pub fn entropy_lower_chernoff(m: &PolicyMixture, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    Ok(m.flat().lower_chernoff(alpha))
}

/// Entropy of the Gaussian matching the mixture's mean and covariance.
pub fn entropy_upper_maxent(m: &PolicyMixture) -> Result<f64> {
    m.flat().upper_maxent()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActiveBranch {
    KL,
    MaxEntropyGaussian,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiBoundReport {
    pub h_kl_marginal: f64,
    pub h_gauss_marginal: f64,
    /// `Σ_θ q̂(θ) Ĥ_{C_α}(Y | θ)`.
    pub h_chernoff_conditional: f64,
    pub mi_upper_kl: f64,
    /// Regime-adaptive bound clipped below at zero.
    pub mi_upper_regime_adaptive: f64,
    pub mi_upper_regime_adaptive_raw: f64,
    pub active_branch: ActiveBranch,
}

/// Upper bounds on `I(Θ; Y | h)` for the policy emissions at the belief.
pub fn mi_upper_bound(
    belief: &ParticleBelief,
    emissions: &[Emission],
    alpha: f64,
) -> Result<MiBoundReport> {
    check_alpha(alpha)?;
    let d = check_emissions(belief, emissions)?;
    let marginal = Flat::build(
        d,
        (0..belief.len()).map(|i| (belief.weight(i), belief.theta_index(i), &emissions[i])),
    );
    let h_kl_marginal = marginal.upper_kl();
    let h_gauss_marginal = marginal.upper_maxent()?;

    let q = belief.theta_marginal();
    if q.iter().all(|x| *x <= 0.0) {
        return Err(Error::EmptySupport(0));
    }
    let mut h_chernoff_conditional = 0.0;
    for (theta, q_theta) in q.iter().enumerate() {
        if *q_theta <= 0.0 {
            continue;
        }
        let cond = Flat::build(
            d,
            (0..belief.len())
                .filter(|i| belief.theta_index(*i) == theta)
                .map(|i| (belief.weight(i) / q_theta, theta, &emissions[i])),
        );
        h_chernoff_conditional += q_theta * cond.lower_chernoff(alpha);
    }

    let (h_marginal, active_branch) = if h_kl_marginal <= h_gauss_marginal {
        (h_kl_marginal, ActiveBranch::KL)
    } else {
        (h_gauss_marginal, ActiveBranch::MaxEntropyGaussian)
    };
    // With all mass on one parameter value the information is exactly zero,
    // while the entropy bounds of a single mixture still differ.
    let known = q.iter().filter(|x| **x > 0.0).count() == 1;
    let (raw, mi_upper_kl) = if known {
        (0.0, 0.0)
    } else {
        (
            h_marginal - h_chernoff_conditional,
            h_kl_marginal - h_chernoff_conditional,
        )
    };
    Ok(MiBoundReport {
        h_kl_marginal,
        h_gauss_marginal,
        h_chernoff_conditional,
        mi_upper_kl,
        mi_upper_regime_adaptive: raw.max(0.0),
        mi_upper_regime_adaptive_raw: raw,
        active_branch,
    })
}

/// Cluster label per flattened Gaussian part of a mixture.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Clustering {
    labels: Vec<usize>,
    n_clusters: usize,
}

impl Clustering {
    /// Labels must cover `0..n_clusters` with no empty cluster.
    pub fn new(labels: Vec<usize>) -> Result<Self> {
        let n_clusters = labels.iter().max().map_or(0, |m| m + 1);
        for c in 0..n_clusters {
            if !labels.contains(&c) {
                return Err(Error::EmptyCluster(c));
            }
        }
        Ok(Self { labels, n_clusters })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn n_clusters(&self) -> usize {
        self.n_clusters
    }
}

/// Sequential greedy agglomeration: each part joins the first cluster whose
/// members are all within `kappa_bar` in both KL directions, else it opens
/// a new cluster.
pub fn greedy_clustering(m: &PolicyMixture, kappa_bar: f64) -> Clustering {
    let flat = m.flat();
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    let mut labels = vec![0; flat.len()];
    for i in 0..flat.len() {
        let close = |j: &usize| {
            kl_unchecked(flat.g[i], flat.g[*j]).max(kl_unchecked(flat.g[*j], flat.g[i])) <= kappa_bar
        };
        match clusters.iter().position(|c| c.iter().all(close)) {
            Some(c) => {
                clusters[c].push(i);
                labels[i] = c;
            }
            None => {
                labels[i] = clusters.len();
                clusters.push(vec![i]);
            }
        }
    }
    Clustering {
        labels,
        n_clusters: clusters.len(),
    }
}

/// Tightest within-cluster KL and between-cluster Bhattacharyya values
/// satisfied by a clustering.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClusterSeparation {
    pub kappa: f64,
    pub gamma: f64,
    pub n_clusters: usize,
}

impl ClusterSeparation {
    /// `κ + (|G| − 1) e^{−(1 − |1 − 2α|) γ}`.
    pub fn slack(&self, alpha: f64) -> f64 {
        if self.n_clusters <= 1 {
            return self.kappa;
        }
        self.kappa
            + (self.n_clusters - 1) as f64 * (-(1.0 - (1.0 - 2.0 * alpha).abs()) * self.gamma).exp()
    }
}

pub fn cluster_separation(m: &PolicyMixture, clusters: &Clustering) -> Result<ClusterSeparation> {
    let flat = m.flat();
    if clusters.labels.len() != flat.len() {
        return Err(Error::DimensionMismatch {
            expected: flat.len(),
            got: clusters.labels.len(),
        });
    }
    let mut kappa: f64 = 0.0;
    let mut gamma = f64::INFINITY;
    for i in 0..flat.len() {
        for j in 0..flat.len() {
            if i == j {
                continue;
            }
            if clusters.labels[i] == clusters.labels[j] {
                kappa = kappa.max(kl_unchecked(flat.g[i], flat.g[j]));
            } else if i < j {
                gamma = gamma.min(chernoff_unchecked(flat.g[i], flat.g[j], 0.5));
            }
        }
    }
    Ok(ClusterSeparation {
        kappa,
        gamma,
        n_clusters: clusters.n_clusters,
    })
}

/// A conditional mixture with its parameter mass `q̂(θ)`.
#[derive(Clone, Debug)]
pub struct WeightedConditional {
    pub mass: f64,
    pub mixture: PolicyMixture,
    pub clusters: Clustering,
}

/// Certificate on the gap between the KL/Chernoff MI bound and the true MI:
/// the marginal slack plus the `q̂`-weighted conditional slacks.
pub fn tightness_certificate(
    marginal: &PolicyMixture,
    marginal_clusters: &Clustering,
    conditionals: &[WeightedConditional],
    alpha: f64,
) -> Result<f64> {
    check_alpha(alpha)?;
    let mut total = cluster_separation(marginal, marginal_clusters)?.slack(alpha);
    for c in conditionals {
        total += c.mass * cluster_separation(&c.mixture, &c.clusters)?.slack(alpha);
    }
    Ok(total)
}

/// All conditional mixtures of a belief with their greedy clusterings.
pub fn clustered_conditionals(
    belief: &ParticleBelief,
    emissions: &[Emission],
    kappa_bar: f64,
) -> Result<Vec<WeightedConditional>> {
    belief
        .theta_marginal()
        .iter()
        .enumerate()
        .filter(|(_, q)| **q > 0.0)
        .map(|(theta, q)| {
            let mixture = conditional_mixture(belief, emissions, theta)?;
            let clusters = greedy_clustering(&mixture, kappa_bar);
            Ok(WeightedConditional {
                mass: *q,
                mixture,
                clusters,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub estimate: f64,
    pub stderr: f64,
}

#[derive(Clone, Copy)]
struct Moments {
    n: f64,
    mean: f64,
    m2: f64,
}

impl Moments {
    fn merge(self, o: Moments) -> Moments {
        if self.n == 0.0 {
            return o;
        }
        let n = self.n + o.n;
        let delta = o.mean - self.mean;
        Moments {
            n,
            mean: self.mean + delta * o.n / n,
            m2: self.m2 + o.m2 + delta * delta * self.n * o.n / n,
        }
    }

    fn estimate(self) -> McEstimate {
        let var = if self.n > 1.0 { self.m2 / (self.n - 1.0) } else { 0.0 };
        McEstimate {
            estimate: self.mean,
            stderr: (var / self.n).sqrt(),
        }
    }
}

/// Averages `sample_value` over `n` draws, in fixed-size chunks that each own
/// a distinct stream of the seeded generator. Results do not depend on the
/// thread count.
fn chunked_mean<F>(n: usize, seed: u64, sample_value: F) -> McEstimate
where
    F: Fn(&mut ChaCha8Rng) -> f64 + Sync,
{
    let chunks = n.div_ceil(MC_CHUNK);
    let parts: Vec<Moments> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            let len = MC_CHUNK.min(n - c * MC_CHUNK);
            let mut m = Moments {
                n: 0.0,
                mean: 0.0,
                m2: 0.0,
            };
            for _ in 0..len {
                let x = sample_value(&mut rng);
                m.n += 1.0;
                let delta = x - m.mean;
                m.mean += delta / m.n;
                m.m2 += delta * (x - m.mean);
            }
            m
        })
        .collect();
    parts
        .into_iter()
        .fold(
            Moments {
                n: 0.0,
                mean: 0.0,
                m2: 0.0,
            },
            Moments::merge,
        )
        .estimate()
}

fn check_sample_count(n: usize) -> Result<()> {
    if n < 1000 {
        return Err(Error::InvalidInput(format!(
            "Monte-Carlo estimators need at least 1000 samples, got {n}"
        )));
    }
    Ok(())
}

/// `−(1/n) Σ ln p(yₖ)` over draws from the mixture.
pub fn mc_entropy(m: &PolicyMixture, n: usize, seed: u64) -> Result<McEstimate> {
    check_sample_count(n)?;
    check_mc_dim(m.dim)?;
    let flat = m.flat();
    let cdf = flat.cdf();
    Ok(chunked_mean(n, seed, |rng| {
        let mut y = [0.0; MC_MAX_DIM];
        let y = &mut y[..flat.dim];
        flat.g[pick(&cdf, rng.random())].sample_into(rng, y);
        -flat.log_density(y)
    }))
}

fn check_mc_dim(d: usize) -> Result<()> {
    if d > MC_MAX_DIM {
        return Err(Error::InvalidInput(format!(
            "Monte-Carlo estimators support dimension up to {MC_MAX_DIM}, got {d}"
        )));
    }
    Ok(())
}

/// Joint-sample estimate of `I(Θ; Y | h) = E[ln p(y | θ) − ln p(y)]`.
pub fn mc_mutual_information(
    belief: &ParticleBelief,
    emissions: &[Emission],
    n: usize,
    seed: u64,
) -> Result<McEstimate> {
    check_sample_count(n)?;
    let d = check_emissions(belief, emissions)?;
    check_mc_dim(d)?;
    let flat = Flat::build(
        d,
        (0..belief.len()).map(|i| (belief.weight(i), belief.theta_index(i), &emissions[i])),
    );
    let log_q: Vec<f64> = belief.theta_marginal().iter().map(|q| q.ln()).collect();
    let cdf = flat.cdf();
    let log_w: Vec<f64> = flat.w.iter().map(|w| w.ln()).collect();
    Ok(chunked_mean(n, seed, |rng| {
        let mut y = [0.0; MC_MAX_DIM];
        let y = &mut y[..d];
        let c = pick(&cdf, rng.random());
        flat.g[c].sample_into(rng, y);
        let terms: Vec<f64> = (0..flat.len())
            .map(|j| log_w[j] + flat.g[j].log_density(y))
            .collect();
        let marginal = log_sum_exp(terms.iter().copied());
        let theta = flat.theta[c];
        let conditional = log_sum_exp(
            terms
                .iter()
                .zip(&flat.theta)
                .filter(|(_, t)| **t == theta)
                .map(|(v, _)| *v),
        ) - log_q[theta];
        conditional - marginal
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::gaussian_entropy;

    fn n1(mean: f64, var: f64) -> GaussianComponent {
        GaussianComponent::scalar(mean, var).unwrap()
    }

    fn mix(parts: &[(f64, f64, f64)]) -> PolicyMixture {
        PolicyMixture::from_gaussians(parts.iter().map(|(w, m, v)| (*w, n1(*m, *v))).collect())
            .unwrap()
    }

    fn belief_1d(thetas: Vec<usize>, weights: Vec<f64>, k: usize) -> ParticleBelief {
        let n = thetas.len();
        ParticleBelief::from_particles(
            (0..k).map(|j| vec![j as f64]).collect(),
            thetas,
            vec![vec![0.0]; n],
            weights,
            0,
        )
        .unwrap()
    }

    const H_STD: f64 = 1.4189385332046727;

    #[test]
    fn marginal_and_conditional_construction() {
        let b = belief_1d(vec![0, 0, 1, 1], vec![0.1, 0.3, 0.2, 0.4], 2);
        let e: Vec<_> = (0..4).map(|i| Emission::gaussian(n1(i as f64, 1.0))).collect();
        let m = marginal_mixture(&b, &e).unwrap();
        assert_eq!(m.part_count(), 4);
        let c0 = conditional_mixture(&b, &e, 0).unwrap();
        let c1 = conditional_mixture(&b, &e, 1).unwrap();
        let w0: Vec<f64> = c0.components().iter().map(|c| c.weight).collect();
        let w1: Vec<f64> = c1.components().iter().map(|c| c.weight).collect();
        assert!((w0[0] - 0.25).abs() < 1e-12 && (w0[1] - 0.75).abs() < 1e-12);
        assert!((w1[0] - 1.0 / 3.0).abs() < 1e-12 && (w1[1] - 2.0 / 3.0).abs() < 1e-12);
        assert!(marginal_mixture(&b, &e[..3]).is_err());

        let b = belief_1d(vec![0, 1], vec![0.4, 0.6], 3);
        let e: Vec<_> = (0..2).map(|i| Emission::gaussian(n1(i as f64, 1.0))).collect();
        let c = conditional_mixture(&b, &e, 0).unwrap();
        assert_eq!(c.components().len(), 1);
        assert_eq!(c.components()[0].weight, 1.0);
        assert!(matches!(conditional_mixture(&b, &e, 2), Err(Error::EmptySupport(2))));
    }

    #[test]
    fn mixture_density_is_weighted_sum() {
        let b = belief_1d(vec![0, 0, 0], vec![0.2, 0.3, 0.5], 1);
        let e = vec![
            Emission::gaussian(n1(-1.0, 0.5)),
            Emission::gaussian(n1(0.5, 1.0)),
            Emission::gaussian(n1(2.0, 2.0)),
        ];
        let m = marginal_mixture(&b, &e).unwrap();
        let pdf = |y: f64, mu: f64, var: f64| {
            (-(y - mu) * (y - mu) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
        };
        for y in [-2.0, -0.3, 0.0, 1.1, 3.5] {
            let hand = 0.2 * pdf(y, -1.0, 0.5) + 0.3 * pdf(y, 0.5, 1.0) + 0.5 * pdf(y, 2.0, 2.0);
            assert!((m.density(&[y]) - hand).abs() < 1e-14);
        }
    }

    #[test]
    fn kl_bound_examples() {
        assert!((entropy_upper_kl(&mix(&[(1.0, 0.0, 1.0)])) - H_STD).abs() < 1e-14);
        assert!((entropy_upper_kl(&mix(&[(0.5, 0.0, 1.0), (0.5, 0.0, 1.0)])) - H_STD).abs() < 1e-14);
        let m = mix(&[(0.5, 0.0, 1.0), (0.5, 5.0, 1.0)]);
        let mc = mc_entropy(&m, 1_000_000, 3).unwrap();
        let ub = entropy_upper_kl(&m);
        assert!(ub >= mc.estimate - 3.0 * mc.stderr);
        assert!(ub <= mc.estimate + 2f64.ln() + 3.0 * mc.stderr);
    }

    #[test]
    fn chernoff_bound_examples() {
        assert!((entropy_lower_chernoff(&mix(&[(1.0, 2.0, 3.0)]), 0.5).unwrap()
            - gaussian_entropy(&n1(2.0, 3.0)))
        .abs()
            < 1e-14);
        let far = mix(&[(0.5, 0.0, 1.0), (0.5, 100.0, 1.0)]);
        let v = entropy_lower_chernoff(&far, 0.5).unwrap();
        let eps = H_STD + 2f64.ln() - v;
        assert!((0.0..1e-6).contains(&eps), "{eps}");
        assert!(entropy_lower_chernoff(&far, 1.5).is_err());
        let m = mix(&[(0.2, -1.0, 0.4), (0.5, 0.3, 1.5), (0.3, 2.0, 0.7)]);
        let mc = mc_entropy(&m, 200_000, 8).unwrap();
        assert!(entropy_lower_chernoff(&m, 0.5).unwrap() <= mc.estimate + 3.0 * mc.stderr);
    }

    #[test]
    fn far_separation_chernoff_survives_underflow() {
        // off-diagonal divergences far beyond the exp underflow threshold
        let m = mix(&[(0.5, 0.0, 1.0), (0.5, 1e4, 1.0)]);
        let v = entropy_lower_chernoff(&m, 0.5).unwrap();
        assert!((v - (H_STD + 2f64.ln())).abs() < 1e-12);
        assert!((entropy_upper_kl(&m) - (H_STD + 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn maxent_examples() {
        assert!((entropy_upper_maxent(&mix(&[(1.0, 0.0, 1.0)])).unwrap() - H_STD).abs() < 1e-14);
        let a: f64 = 1.7;
        let m = mix(&[(0.5, -a, 1.0), (0.5, a, 1.0)]);
        let hand = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * (1.0 + a * a)).ln();
        assert!((entropy_upper_maxent(&m).unwrap() - hand).abs() < 1e-13);
        // sample covariance of draws from the same mixture
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 1_000_000;
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let y = m.sample(&mut rng)[0];
            s1 += y;
            s2 += y * y;
        }
        let var = s2 / n as f64 - (s1 / n as f64).powi(2);
        assert!((var - (1.0 + a * a)).abs() < 0.02);
        let mc = mc_entropy(&m, 100_000, 1).unwrap();
        assert!(entropy_upper_maxent(&m).unwrap() >= mc.estimate - 3.0 * mc.stderr);
    }

    #[test]
    fn mc_entropy_examples() {
        let e = mc_entropy(&mix(&[(1.0, 0.0, 1.0)]), 1_000_000, 5).unwrap();
        assert!((e.estimate - H_STD).abs() < 0.003);
        let far = mix(&[(0.5, -100.0, 1.0), (0.5, 100.0, 1.0)]);
        let e = mc_entropy(&far, 1_000_000, 5).unwrap();
        assert!((e.estimate - H_STD - 2f64.ln()).abs() < 0.003);
        assert_eq!(e, mc_entropy(&far, 1_000_000, 5).unwrap());
        assert!(mc_entropy(&far, 999, 5).is_err());
    }

    #[test]
    fn mi_bound_indistinguishable_and_single_theta() {
        let b = belief_1d(vec![0, 1, 2, 3], vec![0.25; 4], 4);
        let e: Vec<_> = (0..4).map(|_| Emission::gaussian(n1(1.0, 2.0))).collect();
        let r = mi_upper_bound(&b, &e, 0.5).unwrap();
        assert!(r.mi_upper_kl.abs() < 1e-12);
        assert!(r.mi_upper_regime_adaptive.abs() < 1e-12);
        assert!((r.h_kl_marginal - r.h_gauss_marginal).abs() < 1e-9);

        let b = belief_1d(vec![0, 0, 0], vec![0.2, 0.3, 0.5], 1);
        let e: Vec<_> = (0..3).map(|i| Emission::gaussian(n1(i as f64, 1.0))).collect();
        let r = mi_upper_bound(&b, &e, 0.5).unwrap();
        assert!(r.mi_upper_regime_adaptive < 1e-12);
        assert!(r.mi_upper_regime_adaptive_raw <= r.mi_upper_kl);
    }

    #[test]
    fn mi_bound_binary_theta() {
        let b = belief_1d(vec![0, 1], vec![0.5, 0.5], 2);
        for delta in [0.5, 2.0, 6.0] {
            let e = vec![Emission::gaussian(n1(0.0, 1.0)), Emission::gaussian(n1(delta, 1.0))];
            let r = mi_upper_bound(&b, &e, 0.5).unwrap();
            let mc = mc_mutual_information(&b, &e, 100_000, 2).unwrap();
            assert!(r.mi_upper_regime_adaptive >= mc.estimate - 3.0 * mc.stderr);
            assert!(r.mi_upper_regime_adaptive <= 2f64.ln() + 1e-9);
            assert!(r.mi_upper_regime_adaptive_raw <= r.mi_upper_kl);
        }
    }

    #[test]
    fn mc_mi_examples() {
        let b = belief_1d(vec![0, 1], vec![0.5, 0.5], 2);
        let same = vec![Emission::gaussian(n1(0.0, 1.0)); 2];
        let mc = mc_mutual_information(&b, &same, 10_000, 1).unwrap();
        assert!(mc.estimate.abs() < 1e-12);
        let sharp = vec![Emission::gaussian(n1(0.0, 1e-4)), Emission::gaussian(n1(1.0, 1e-4))];
        let mc = mc_mutual_information(&b, &sharp, 10_000, 1).unwrap();
        assert!((mc.estimate - 2f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn gmm_emissions_flatten() {
        let b = belief_1d(vec![0, 1], vec![0.5, 0.5], 2);
        let e = vec![
            Emission::mixture(vec![(0.5, n1(-1.0, 0.5)), (0.5, n1(1.0, 0.5))]).unwrap(),
            Emission::gaussian(n1(3.0, 1.0)),
        ];
        let m = marginal_mixture(&b, &e).unwrap();
        assert_eq!(m.part_count(), 3);
        let r = mi_upper_bound(&b, &e, 0.5).unwrap();
        let mc = mc_mutual_information(&b, &e, 100_000, 9).unwrap();
        assert!(r.mi_upper_regime_adaptive >= mc.estimate - 3.0 * mc.stderr);
        assert!(Emission::mixture(vec![(0.6, n1(0.0, 1.0))]).is_err());
    }

    #[test]
    fn tightness_examples() {
        let b = belief_1d(vec![0, 1, 0, 1], vec![0.25; 4], 2);
        let e = vec![
            Emission::gaussian(n1(0.0, 1.0)),
            Emission::gaussian(n1(0.05, 1.0)),
            Emission::gaussian(n1(10.0, 1.0)),
            Emission::gaussian(n1(10.02, 1.0)),
        ];
        let m = marginal_mixture(&b, &e).unwrap();
        let g = greedy_clustering(&m, 0.1);
        assert_eq!(g.labels(), &[0, 0, 1, 1]);
        let sep = cluster_separation(&m, &g).unwrap();
        assert!((sep.kappa - 0.5 * 0.05f64.powi(2)).abs() < 1e-12);
        let conds = clustered_conditionals(&b, &e, 0.1).unwrap();
        let cert = tightness_certificate(&m, &g, &conds, 0.5).unwrap();
        let r = mi_upper_bound(&b, &e, 0.5).unwrap();
        let mc = mc_mutual_information(&b, &e, 100_000, 1).unwrap();
        assert!(r.mi_upper_kl - mc.estimate <= cert + 3.0 * mc.stderr);

        let one = Clustering::new(vec![0; 4]).unwrap();
        let sep = cluster_separation(&m, &one).unwrap();
        assert_eq!(sep.slack(0.5), sep.kappa);
        assert!(matches!(Clustering::new(vec![0, 2]), Err(Error::EmptyCluster(1))));
    }
}

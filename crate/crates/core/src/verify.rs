//! Oracle suites: closed forms against quadrature, mixture bounds and the MI
//! bound against Monte Carlo, the tightness certificate on clustered
//! mixtures, and particle-filter consistency against an exact Kalman bank.

use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::belief::ParticleBelief;
use crate::error::{Error, Result};
use crate::gaussian::{bhattacharyya, chernoff_alpha, kl_divergence, GaussianComponent};
use crate::mixture::{
    clustered_conditionals, entropy_lower_chernoff, entropy_upper_kl, entropy_upper_maxent, greedy_clustering,
    marginal_mixture, mc_entropy, mc_mutual_information, mi_upper_bound, tightness_certificate, Emission,
    PolicyMixture,
};
use crate::quadrature::{try_chernoff_by_quadrature, try_entropy_by_quadrature, try_kl_by_quadrature};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    Divergences,
    EntropySandwich,
    MiBound,
    Tightness,
    FilterConsistency,
}

impl Suite {
    pub const ALL: [Suite; 5] = [
        Suite::Divergences,
        Suite::EntropySandwich,
        Suite::MiBound,
        Suite::Tightness,
        Suite::FilterConsistency,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Suite::Divergences => "divergences",
            Suite::EntropySandwich => "entropy-sandwich",
            Suite::MiBound => "mi-bound",
            Suite::Tightness => "tightness",
            Suite::FilterConsistency => "filter-consistency",
        }
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|suite| suite.name() == s)
            .ok_or_else(|| Error::config("suite", format!("unknown suite `{s}`")))
    }
}

/// One checked quantity: passes when `value ≤ limit`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub limit: f64,
    pub passed: bool,
}

impl Check {
    pub fn le(name: impl Into<String>, value: f64, limit: f64) -> Self {
        Self {
            name: name.into(),
            value,
            limit,
            passed: value <= limit,
        }
    }

    pub fn margin(&self) -> f64 {
        self.limit - self.value
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub cases: usize,
    pub violations: usize,
    pub worst_margin: f64,
    pub passed: bool,
    pub elapsed_secs: f64,
    /// Aggregate lines (one per criterion of the suite).
    pub summary: Vec<Check>,
    /// Failing per-case checks, if any.
    pub failures: Vec<Check>,
}

impl SuiteReport {
    fn finish(suite: Suite, start: Instant, cases: &[Check], summary: Vec<Check>) -> Self {
        let failures: Vec<Check> = cases.iter().filter(|c| !c.passed).cloned().collect();
        let worst_margin = cases.iter().map(Check::margin).fold(f64::INFINITY, f64::min);
        Self {
            suite,
            cases: cases.len(),
            violations: failures.len(),
            worst_margin,
            passed: failures.is_empty() && summary.iter().all(|c| c.passed),
            elapsed_secs: start.elapsed().as_secs_f64(),
            summary,
            failures,
        }
    }
}

/// Random Gaussian in dimension 1 or 2 with well-conditioned covariance.
pub fn random_gaussian<R: Rng + ?Sized>(rng: &mut R, d: usize, mean_range: f64) -> GaussianComponent {
    let mean: Vec<f64> = (0..d).map(|_| rng.random_range(-mean_range..mean_range)).collect();
    let vars: Vec<f64> = (0..d).map(|_| rng.random_range(0.25..4.0)).collect();
    if d == 2 {
        let rho: f64 = rng.random_range(-0.8..0.8);
        let c = rho * (vars[0] * vars[1]).sqrt();
        GaussianComponent::from_flat(mean, vec![vars[0], c, c, vars[1]]).expect("SPD by construction")
    } else {
        GaussianComponent::diagonal(mean, &vars).expect("SPD by construction")
    }
}

fn random_weights<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

fn rel_err(closed: f64, oracle: f64) -> f64 {
    (closed - oracle).abs() / oracle.abs().max(1e-300)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceSuite {
    pub pairs: usize,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for DivergenceSuite {
    fn default() -> Self {
        Self {
            pairs: 1000,
            tolerance: 1e-6,
            seed: 1,
        }
    }
}

impl DivergenceSuite {
    /// Entropy, KL, Chernoff-α and Bhattacharyya closed forms against
    /// adaptive quadrature on random pairs, half 1-D and half 2-D.
    pub fn run(&self) -> Result<SuiteReport> {
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut cases = Vec::with_capacity(4 * self.pairs);
        for i in 0..self.pairs {
            let d = 1 + i % 2;
            let p = random_gaussian(&mut rng, d, 2.0);
            let q = random_gaussian(&mut rng, d, 2.0);
            let alpha = rng.random_range(0.1..0.9);
            let tol = self.tolerance;
            cases.push(Check::le(
                format!("entropy#{i}"),
                rel_err(p.entropy(), try_entropy_by_quadrature(&p)?),
                tol,
            ));
            cases.push(Check::le(
                format!("kl#{i}"),
                rel_err(kl_divergence(&p, &q)?, try_kl_by_quadrature(&p, &q)?),
                tol,
            ));
            cases.push(Check::le(
                format!("chernoff#{i}"),
                rel_err(chernoff_alpha(&p, &q, alpha)?, try_chernoff_by_quadrature(&p, &q, alpha)?),
                tol,
            ));
            cases.push(Check::le(
                format!("bhattacharyya#{i}"),
                rel_err(bhattacharyya(&p, &q)?, try_chernoff_by_quadrature(&p, &q, 0.5)?),
                tol,
            ));
        }
        let max = cases.iter().map(|c| c.value).fold(0.0, f64::max);
        let summary = vec![Check::le("max relative error", max, self.tolerance)];
        Ok(SuiteReport::finish(Suite::Divergences, start, &cases, summary))
    }
}

/// Random Gaussian mixture with up to `max_components` parts.
pub fn random_mixture<R: Rng + ?Sized>(rng: &mut R, d: usize, max_components: usize) -> PolicyMixture {
    let n = rng.random_range(1..=max_components);
    let w = random_weights(rng, n);
    let parts = w.into_iter().map(|w| (w, random_gaussian(rng, d, 4.0))).collect();
    PolicyMixture::from_gaussians(parts).expect("valid mixture")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SandwichSuite {
    pub mixtures: usize,
    pub samples: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for SandwichSuite {
    fn default() -> Self {
        Self {
            mixtures: 500,
            samples: 1_000_000,
            alpha: 0.5,
            seed: 2,
        }
    }
}

impl SandwichSuite {
    /// `Ĥ_Cα − 3σ ≤ H_MC ≤ min(Ĥ_KL, Ĥ_G) + 3σ` on random mixtures.
    pub fn run(&self) -> Result<SuiteReport> {
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut cases = Vec::with_capacity(2 * self.mixtures);
        for i in 0..self.mixtures {
            let m = random_mixture(&mut rng, 1 + i % 2, 6);
            let lower = entropy_lower_chernoff(&m, self.alpha)?;
            let upper = entropy_upper_kl(&m).min(entropy_upper_maxent(&m)?);
            let mc = mc_entropy(&m, self.samples, rng.random())?;
            let slack = 3.0 * mc.stderr;
            cases.push(Check::le(format!("lower#{i}"), lower - slack, mc.estimate));
            cases.push(Check::le(format!("upper#{i}"), mc.estimate, upper + slack));
        }
        let violations = cases.iter().filter(|c| !c.passed).count() as f64;
        let summary = vec![Check::le("sandwich violations", violations, 0.0)];
        Ok(SuiteReport::finish(Suite::EntropySandwich, start, &cases, summary))
    }
}

/// Random particle belief over `K ∈ {2, 3, 4}` parameter values with 2-D
/// states, paired with per-particle emissions. Emission means depend on the
/// parameter through a random shift; GMM emissions split each release into
/// two or three offset parts.
pub fn random_mi_instance<R: Rng + ?Sized>(rng: &mut R, gmm: bool) -> (ParticleBelief, Vec<Emission>) {
    let k = rng.random_range(2..=4);
    let n = rng.random_range(k..=12);
    let support: Vec<Vec<f64>> = (0..k).map(|i| vec![i as f64]).collect();
    let shifts: Vec<[f64; 2]> = (0..k)
        .map(|_| [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)])
        .collect();
    let mut thetas: Vec<usize> = (0..n).map(|i| if i < k { i } else { rng.random_range(0..k) }).collect();
    thetas.sort_unstable();
    let states: Vec<Vec<f64>> = (0..n)
        .map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
        .collect();
    let weights = random_weights(rng, n);
    let emissions = (0..n)
        .map(|i| {
            let base = [
                states[i][0] + shifts[thetas[i]][0],
                states[i][1] + shifts[thetas[i]][1],
            ];
            let std = rng.random_range(0.3..2.0);
            let at = |m: [f64; 2], s: f64| GaussianComponent::diagonal(m.to_vec(), &[s * s, s * s]).unwrap();
            if gmm {
                let parts = rng.random_range(2..=3);
                let w = random_weights(rng, parts);
                Emission::mixture(
                    w.into_iter()
                        .map(|w| {
                            let off = [rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)];
                            (w, at([base[0] + off[0], base[1] + off[1]], std))
                        })
                        .collect(),
                )
                .unwrap()
            } else {
                Emission::gaussian(at(base, std))
            }
        })
        .collect();
    let belief = ParticleBelief::from_particles(support, thetas, states, weights, 0).unwrap();
    (belief, emissions)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiSuite {
    pub gaussian_instances: usize,
    pub gmm_instances: usize,
    pub samples: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for MiSuite {
    fn default() -> Self {
        Self {
            gaussian_instances: 200,
            gmm_instances: 100,
            samples: 200_000,
            alpha: 0.5,
            seed: 3,
        }
    }
}

impl MiSuite {
    /// `MI_MC ≤ MI_RA + 3σ` and `MI_RA ≤ MI_KL` on random instances.
    pub fn run(&self) -> Result<SuiteReport> {
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let total = self.gaussian_instances + self.gmm_instances;
        let mut cases = Vec::with_capacity(3 * total);
        for i in 0..total {
            let gmm = i >= self.gaussian_instances;
            let (belief, emissions) = random_mi_instance(&mut rng, gmm);
            let report = mi_upper_bound(&belief, &emissions, self.alpha)?;
            let mc = mc_mutual_information(&belief, &emissions, self.samples, rng.random())?;
            let tag = if gmm { "gmm" } else { "gauss" };
            cases.push(Check::le(
                format!("{tag}-mc-vs-ra#{i}"),
                mc.estimate,
                report.mi_upper_regime_adaptive + 3.0 * mc.stderr,
            ));
            cases.push(Check::le(
                format!("{tag}-ra-vs-kl#{i}"),
                report.mi_upper_regime_adaptive,
                report.mi_upper_kl,
            ));
            cases.push(Check::le(
                format!("{tag}-ra-raw-vs-kl#{i}"),
                report.mi_upper_regime_adaptive_raw,
                report.mi_upper_kl,
            ));
        }
        let violations = cases.iter().filter(|c| !c.passed).count() as f64;
        let summary = vec![Check::le("MI bound violations", violations, 0.0)];
        Ok(SuiteReport::finish(Suite::MiBound, start, &cases, summary))
    }
}

/// Belief whose releases form one tight cluster per parameter value, with
/// cluster centers `separation` apart.
pub fn clustered_instance<R: Rng + ?Sized>(
    rng: &mut R,
    separation: f64,
    spread: f64,
) -> (ParticleBelief, Vec<Emission>) {
    let k = rng.random_range(2..=3);
    let per = rng.random_range(2..=4);
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let support: Vec<Vec<f64>> = (0..k).map(|i| vec![i as f64]).collect();
    let mut thetas = Vec::new();
    let mut states = Vec::new();
    let mut emissions = Vec::new();
    for t in 0..k {
        let c = [
            separation * t as f64 * angle.cos(),
            separation * t as f64 * angle.sin(),
        ];
        for _ in 0..per {
            let m = [
                c[0] + spread * rng.sample::<f64, _>(StandardNormal),
                c[1] + spread * rng.sample::<f64, _>(StandardNormal),
            ];
            let s = 1.0 + 0.05 * rng.random::<f64>();
            thetas.push(t);
            states.push(m.to_vec());
            emissions.push(Emission::gaussian(
                GaussianComponent::diagonal(m.to_vec(), &[s * s, s * s]).unwrap(),
            ));
        }
    }
    let weights = random_weights(rng, thetas.len());
    let belief = ParticleBelief::from_particles(support, thetas, states, weights, 0).unwrap();
    (belief, emissions)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TightnessSuite {
    pub instances: usize,
    pub samples: usize,
    pub alpha: f64,
    pub kappa_bar: f64,
    pub seed: u64,
}

impl Default for TightnessSuite {
    fn default() -> Self {
        Self {
            instances: 50,
            samples: 200_000,
            alpha: 0.5,
            kappa_bar: 0.1,
            seed: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TightnessCase {
    pub bound: f64,
    pub mc: f64,
    pub stderr: f64,
    pub certificate: f64,
}

impl TightnessSuite {
    pub fn case<R: Rng + ?Sized>(&self, rng: &mut R, index: usize) -> Result<TightnessCase> {
        let separation = 4.0 + 8.0 * (index as f64 / self.instances.max(1) as f64);
        let (belief, emissions) = clustered_instance(rng, separation, 0.1);
        let report = mi_upper_bound(&belief, &emissions, self.alpha)?;
        let marginal = marginal_mixture(&belief, &emissions)?;
        let clusters = greedy_clustering(&marginal, self.kappa_bar);
        let conditionals = clustered_conditionals(&belief, &emissions, self.kappa_bar)?;
        let certificate = tightness_certificate(&marginal, &clusters, &conditionals, self.alpha)?;
        let mc = mc_mutual_information(&belief, &emissions, self.samples, rng.random())?;
        Ok(TightnessCase {
            bound: report.mi_upper_kl,
            mc: mc.estimate,
            stderr: mc.stderr,
            certificate,
        })
    }

    /// `bound − MI_MC ≤ certificate + 3σ` for the KL/Chernoff bound.
    pub fn run(&self) -> Result<SuiteReport> {
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut cases = Vec::with_capacity(self.instances);
        for i in 0..self.instances {
            let c = self.case(&mut rng, i)?;
            cases.push(Check::le(
                format!("gap#{i}"),
                c.bound - c.mc,
                c.certificate + 3.0 * c.stderr,
            ));
        }
        let violations = cases.iter().filter(|c| !c.passed).count() as f64;
        let summary = vec![Check::le("certificate violations", violations, 0.0)];
        Ok(SuiteReport::finish(Suite::Tightness, start, &cases, summary))
    }
}

/// Scalar linear-Gaussian model `x' = a·x + √q·w`, `y = x + √r·v` with the
/// parameter `a` drawn from a finite support.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearGaussianToy {
    pub a_values: Vec<f64>,
    pub q: f64,
    pub r: f64,
    pub m0: f64,
    pub p0: f64,
}

impl Default for LinearGaussianToy {
    fn default() -> Self {
        Self {
            a_values: vec![0.0, 0.3, 0.6, 0.9],
            q: 1.0,
            r: 4.0,
            m0: 0.0,
            p0: 1.0,
        }
    }
}

fn normal_log_pdf(y: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((y - mean).powi(2) / var + (2.0 * std::f64::consts::PI * var).ln())
}

impl LinearGaussianToy {
    pub fn simulate<R: Rng + ?Sized>(&self, a_index: usize, steps: usize, rng: &mut R) -> Vec<f64> {
        let a = self.a_values[a_index];
        let mut x = self.m0 + self.p0.sqrt() * rng.sample::<f64, _>(StandardNormal);
        (0..steps)
            .map(|_| {
                let y = x + self.r.sqrt() * rng.sample::<f64, _>(StandardNormal);
                x = a * x + self.q.sqrt() * rng.sample::<f64, _>(StandardNormal);
                y
            })
            .collect()
    }

    /// Exact posterior over the support from one Kalman filter per value.
    pub fn exact_posterior(&self, ys: &[f64]) -> Vec<f64> {
        let log_post: Vec<f64> = self
            .a_values
            .iter()
            .map(|&a| {
                let (mut m, mut p) = (self.m0, self.p0);
                let mut ll = 0.0;
                for &y in ys {
                    let s = p + self.r;
                    ll += normal_log_pdf(y, m, s);
                    let gain = p / s;
                    m += gain * (y - m);
                    p *= 1.0 - gain;
                    m *= a;
                    p = a * a * p + self.q;
                }
                ll
            })
            .collect();
        let max = log_post.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = log_post.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = w.iter().sum();
        w.into_iter().map(|x| x / total).collect()
    }

    /// Particle estimate of the same posterior after assimilating every `y`.
    pub fn particle_posterior(&self, ys: &[f64], n: usize, seed: u64, resample_threshold: f64) -> Result<Vec<f64>> {
        let k = self.a_values.len();
        let support: Vec<Vec<f64>> = self.a_values.iter().map(|a| vec![*a]).collect();
        let prior = GaussianComponent::scalar(self.m0, self.p0)?;
        let mut belief = ParticleBelief::init(support, &vec![1.0 / k as f64; k], &prior, n, seed)?;
        let sq = self.q.sqrt();
        for (t, &y) in ys.iter().enumerate() {
            belief = belief.update_weights(|_, _, x| normal_log_pdf(y, x[0], self.r))?;
            if t + 1 == ys.len() {
                break;
            }
            belief = belief.resample_if_degenerate(resample_threshold).0;
            belief = belief.propagate(&|a: &[f64], x: &[f64], rng: &mut ChaCha8Rng, next: &mut [f64]| {
                next[0] = a[0] * x[0] + sq * rng.sample::<f64, _>(StandardNormal);
            })?;
        }
        Ok(belief.theta_marginal())
    }
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterSuite {
    pub particle_counts: Vec<usize>,
    pub seeds: usize,
    pub steps: usize,
    pub tv_limit: f64,
    pub toy: LinearGaussianToy,
    pub seed: u64,
}

impl Default for FilterSuite {
    fn default() -> Self {
        Self {
            particle_counts: vec![256, 1024, 4096],
            seeds: 20,
            steps: 50,
            tv_limit: 0.05,
            toy: LinearGaussianToy::default(),
            seed: 5,
        }
    }
}

impl FilterSuite {
    /// Mean TV distance to the exact posterior for each particle count.
    pub fn mean_tv(&self) -> Result<Vec<f64>> {
        let k = self.toy.a_values.len();
        let datasets: Vec<Vec<f64>> = (0..self.seeds)
            .map(|s| {
                let mut rng = ChaCha8Rng::seed_from_u64(crate::rollout::derive_seed(self.seed, 0, s as u64));
                self.toy.simulate(s % k, self.steps, &mut rng)
            })
            .collect();
        self.particle_counts
            .iter()
            .map(|&n| {
                let mut total = 0.0;
                for (s, ys) in datasets.iter().enumerate() {
                    let exact = self.toy.exact_posterior(ys);
                    let seed = crate::rollout::derive_seed(self.seed, n as u64, s as u64);
                    let approx = self.toy.particle_posterior(ys, n, seed, 0.5)?;
                    total += total_variation(&exact, &approx);
                }
                Ok(total / self.seeds as f64)
            })
            .collect()
    }

    pub fn run(&self) -> Result<SuiteReport> {
        let start = Instant::now();
        let tv = self.mean_tv()?;
        let mut cases = Vec::new();
        for (i, w) in tv.windows(2).enumerate() {
            cases.push(Check::le(
                format!("TV(N={}) < TV(N={})", self.particle_counts[i + 1], self.particle_counts[i]),
                w[1],
                w[0],
            ));
        }
        let last = *tv.last().unwrap_or(&f64::NAN);
        cases.push(Check::le(
            format!("TV(N={})", self.particle_counts.last().copied().unwrap_or(0)),
            last,
            self.tv_limit,
        ));
        let summary = self
            .particle_counts
            .iter()
            .zip(&tv)
            .map(|(n, v)| Check::le(format!("mean TV at N={n}"), *v, 1.0))
            .collect();
        Ok(SuiteReport::finish(Suite::FilterConsistency, start, &cases, summary))
    }
}

/// Runs a suite with its default sizes, scaling the case count by
/// `case_fraction` and overriding the Monte-Carlo sample count if given.
pub fn run_suite(suite: Suite, samples: Option<usize>, case_fraction: f64, seed: u64) -> Result<SuiteReport> {
    let scale = |n: usize| ((n as f64 * case_fraction).ceil() as usize).max(1);
    match suite {
        Suite::Divergences => {
            let d = DivergenceSuite::default();
            DivergenceSuite {
                pairs: scale(d.pairs),
                seed,
                ..d
            }
            .run()
        }
        Suite::EntropySandwich => {
            let d = SandwichSuite::default();
            SandwichSuite {
                mixtures: scale(d.mixtures),
                samples: samples.unwrap_or(d.samples),
                seed,
                ..d
            }
            .run()
        }
        Suite::MiBound => {
            let d = MiSuite::default();
            MiSuite {
                gaussian_instances: scale(d.gaussian_instances),
                gmm_instances: scale(d.gmm_instances),
                samples: samples.unwrap_or(d.samples),
                seed,
                ..d
            }
            .run()
        }
        Suite::Tightness => {
            let d = TightnessSuite::default();
            TightnessSuite {
                instances: scale(d.instances),
                samples: samples.unwrap_or(d.samples),
                seed,
                ..d
            }
            .run()
        }
        Suite::FilterConsistency => {
            let d = FilterSuite::default();
            FilterSuite {
                seeds: scale(d.seeds),
                seed,
                ..d
            }
            .run()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_parse() {
        for s in Suite::ALL {
            assert_eq!(s.name().parse::<Suite>().unwrap(), s);
        }
        assert!("nope".parse::<Suite>().is_err());
    }

    #[test]
    fn kalman_bank_on_uninformative_data() {
        let toy = LinearGaussianToy::default();
        assert_eq!(toy.exact_posterior(&[]), vec![0.25; 4]);
        // A single observation carries no information about a.
        let p = toy.exact_posterior(&[0.7]);
        assert!(p.iter().all(|x| (x - 0.25).abs() < 1e-12));
    }

    #[test]
    fn kalman_matches_brute_force_two_steps() {
        // y₁, y₂ jointly Gaussian with var p0 + r, a²p0 + q + r and
        // covariance a·p0.
        let toy = LinearGaussianToy::default();
        let ys = [0.3, -1.1];
        let log_joint = |a: f64| {
            let v1 = toy.p0 + toy.r;
            let v2 = a * a * toy.p0 + toy.q + toy.r;
            let c = a * toy.p0;
            let det = v1 * v2 - c * c;
            let quad = (v2 * ys[0] * ys[0] - 2.0 * c * ys[0] * ys[1] + v1 * ys[1] * ys[1]) / det;
            -0.5 * (quad + det.ln())
        };
        let lj: Vec<f64> = toy.a_values.iter().map(|a| log_joint(*a)).collect();
        let m = lj.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = lj.iter().map(|l| (l - m).exp()).collect();
        let s: f64 = w.iter().sum();
        let exact = toy.exact_posterior(&ys);
        for (e, w) in exact.iter().zip(&w) {
            assert!((e - w / s).abs() < 1e-12);
        }
    }

    #[test]
    fn small_suites_pass() {
        let r = run_suite(Suite::Divergences, None, 0.02, 9).unwrap();
        assert!(r.passed, "{r:?}");
        let r = run_suite(Suite::EntropySandwich, Some(20_000), 0.02, 9).unwrap();
        assert!(r.passed, "{r:?}");
        let r = run_suite(Suite::MiBound, Some(20_000), 0.03, 9).unwrap();
        assert!(r.passed, "{r:?}");
        let r = run_suite(Suite::Tightness, Some(20_000), 0.1, 9).unwrap();
        assert!(r.passed, "{r:?}");
    }
}

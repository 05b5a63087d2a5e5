//! Closed-form functionals of Gaussian pairs: differential entropy, KL
//! divergence, Chernoff-α divergence and Bhattacharyya distance.
//!
//! All values are in nats. Determinants come from the Cholesky factor
//! (`2 Σ ln Lᵢᵢ`), and a covariance that fails Cholesky is rejected at
//! construction; nothing here regularizes silently.
//!
//! Chernoff convention: `C_α(p‖q) = −ln ∫ p^α q^{1−α}`, which for Gaussians is
//!
//! ```text
//! C_α = α(1−α)/2 · δᵀ Σ_α⁻¹ δ + ½ ln( |Σ_α| / (|Σ_p|^{1−α} |Σ_q|^α) ),
//! Σ_α = (1−α) Σ_p + α Σ_q,   δ = μ_p − μ_q.
//! ```
//!
//! With this convention `C_0 = C_1 = 0` and `C_{0.5}` is the Bhattacharyya
//! distance.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg;

const LN_2PI_E: f64 = 2.837_877_066_409_345_3; // ln(2πe)
const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// A multivariate normal `N(mean, cov)` with its Cholesky factor cached.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianComponent {
    mean: Vec<f64>,
    cov: Vec<f64>,
    chol: Vec<f64>,
    chol_inv: Vec<f64>,
    precision: Vec<f64>,
    log_det: f64,
    diagonal: bool,
}

impl GaussianComponent {
    /// Builds a component from a mean and a row-major `d×d` covariance.
    pub fn from_flat(mean: Vec<f64>, cov: Vec<f64>) -> Result<Self> {
        let d = mean.len();
        if d == 0 {
            return Err(Error::InvalidInput("dimension must be at least 1".into()));
        }
        if cov.len() != d * d {
            return Err(Error::DimensionMismatch {
                expected: d * d,
                got: cov.len(),
            });
        }
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite mean or covariance".into()));
        }
        let scale = cov.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if linalg::max_asymmetry(&cov, d) > 1e-12 * scale {
            return Err(Error::InvalidInput("covariance is not symmetric".into()));
        }
        let chol = linalg::cholesky(&cov, d)
            .ok_or_else(|| Error::InvalidInput("covariance is not positive definite".into()))?;
        let log_det = linalg::log_det_from_cholesky(&chol, d);
        let chol_inv = linalg::lower_inverse(&chol, d);
        let precision = linalg::precision_from_lower_inverse(&chol_inv, d);
        let diagonal = (0..d).all(|i| (0..d).all(|j| i == j || cov[i * d + j] == 0.0));
        Ok(Self {
            mean,
            cov,
            chol,
            chol_inv,
            precision,
            log_det,
            diagonal,
        })
    }

    pub fn new(mean: Vec<f64>, cov: Vec<Vec<f64>>) -> Result<Self> {
        let d = mean.len();
        if cov.len() != d || cov.iter().any(|row| row.len() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: cov.len(),
            });
        }
        Self::from_flat(mean, cov.into_iter().flatten().collect())
    }

    pub fn diagonal(mean: Vec<f64>, variances: &[f64]) -> Result<Self> {
        let d = mean.len();
        if variances.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: variances.len(),
            });
        }
        let mut cov = vec![0.0; d * d];
        for (i, v) in variances.iter().enumerate() {
            cov[i * d + i] = *v;
        }
        Self::from_flat(mean, cov)
    }

    pub fn scalar(mean: f64, variance: f64) -> Result<Self> {
        Self::from_flat(vec![mean], vec![variance])
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Row-major covariance.
    pub fn cov(&self) -> &[f64] {
        &self.cov
    }

    pub fn cov_at(&self, i: usize, j: usize) -> f64 {
        self.cov[i * self.dim() + j]
    }

    pub fn precision(&self) -> &[f64] {
        &self.precision
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn is_diagonal(&self) -> bool {
        self.diagonal
    }

    pub fn entropy(&self) -> f64 {
        0.5 * (self.dim() as f64 * LN_2PI_E + self.log_det)
    }

    /// Squared Mahalanobis distance of `y` from the mean.
    pub fn mahalanobis_sq(&self, y: &[f64]) -> f64 {
        let d = self.dim();
        let mut acc = 0.0;
        for i in 0..d {
            let mut z = 0.0;
            for k in 0..=i {
                z += self.chol_inv[i * d + k] * (y[k] - self.mean[k]);
            }
            acc += z * z;
        }
        acc
    }

    pub fn log_density(&self, y: &[f64]) -> f64 {
        -0.5 * (self.dim() as f64 * LN_2PI + self.log_det + self.mahalanobis_sq(y))
    }

    /// Writes one draw into `out` (length `dim`).
    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        let d = self.dim();
        let mut z = [0.0f64; 8];
        let mut heap;
        let z: &mut [f64] = if d <= 8 {
            &mut z[..d]
        } else {
            heap = vec![0.0; d];
            &mut heap
        };
        for zi in z.iter_mut() {
            *zi = rng.sample(StandardNormal);
        }
        for i in 0..d {
            let mut acc = self.mean[i];
            for k in 0..=i {
                acc += self.chol[i * d + k] * z[k];
            }
            out[i] = acc;
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.sample_into(rng, &mut out);
        out
    }
}

fn check_pair(p: &GaussianComponent, q: &GaussianComponent) -> Result<()> {
    if p.dim() != q.dim() {
        return Err(Error::DimensionMismatch {
            expected: p.dim(),
            got: q.dim(),
        });
    }
    Ok(())
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidInput(format!("alpha {alpha} outside [0, 1]")));
    }
    Ok(())
}

/// `½ ln((2πe)^d |Σ|)`.
pub fn gaussian_entropy(g: &GaussianComponent) -> f64 {
    g.entropy()
}

/// `KL(p‖q)`.
pub fn kl_divergence(p: &GaussianComponent, q: &GaussianComponent) -> Result<f64> {
    check_pair(p, q)?;
    Ok(kl_unchecked(p, q))
}

pub(crate) fn kl_unchecked(p: &GaussianComponent, q: &GaussianComponent) -> f64 {
    let d = p.dim();
    if p.diagonal && q.diagonal {
        let mut acc = 0.0;
        for i in 0..d {
            let vp = p.cov[i * d + i];
            let vq = q.cov[i * d + i];
            let dm = q.mean[i] - p.mean[i];
            acc += vp / vq + dm * dm / vq - 1.0 + (vq / vp).ln();
        }
        return (0.5 * acc).max(0.0);
    }
    let mut trace = 0.0;
    for i in 0..d {
        for j in 0..d {
            trace += q.precision[i * d + j] * p.cov[j * d + i];
        }
    }
    let mut quad = 0.0;
    for i in 0..d {
        let di = q.mean[i] - p.mean[i];
        for j in 0..d {
            quad += di * q.precision[i * d + j] * (q.mean[j] - p.mean[j]);
        }
    }
    (0.5 * (trace + quad - d as f64 + q.log_det - p.log_det)).max(0.0)
}

/// `C_α(p‖q)`; see the module docs for the convention.
pub fn chernoff_alpha(p: &GaussianComponent, q: &GaussianComponent, alpha: f64) -> Result<f64> {
    check_pair(p, q)?;
    check_alpha(alpha)?;
    Ok(chernoff_unchecked(p, q, alpha))
}

pub(crate) fn chernoff_unchecked(p: &GaussianComponent, q: &GaussianComponent, alpha: f64) -> f64 {
    let d = p.dim();
    let beta = 1.0 - alpha;
    if p.diagonal && q.diagonal {
        let mut quad = 0.0;
        let mut logs = 0.0;
        for i in 0..d {
            let vp = p.cov[i * d + i];
            let vq = q.cov[i * d + i];
            let va = beta * vp + alpha * vq;
            let dm = p.mean[i] - q.mean[i];
            quad += dm * dm / va;
            logs += va.ln() - beta * vp.ln() - alpha * vq.ln();
        }
        return (0.5 * alpha * beta * quad + 0.5 * logs).max(0.0);
    }
    let mut sigma = vec![0.0; d * d];
    for (k, s) in sigma.iter_mut().enumerate() {
        *s = beta * p.cov[k] + alpha * q.cov[k];
    }
    let chol = match linalg::cholesky(&sigma, d) {
        Some(l) => l,
        // A convex combination of SPD matrices is SPD; only reachable on
        // catastrophic rounding.
        None => return f64::INFINITY,
    };
    let log_det_a = linalg::log_det_from_cholesky(&chol, d);
    let mut delta: Vec<f64> = (0..d).map(|i| p.mean[i] - q.mean[i]).collect();
    linalg::forward_substitute(&chol, d, &mut delta);
    let quad: f64 = delta.iter().map(|z| z * z).sum();
    (0.5 * alpha * beta * quad + 0.5 * (log_det_a - beta * p.log_det - alpha * q.log_det)).max(0.0)
}

/// Bhattacharyya distance, `C_{0.5}`.
pub fn bhattacharyya(p: &GaussianComponent, q: &GaussianComponent) -> Result<f64> {
    chernoff_alpha(p, q, 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn n(m: f64, v: f64) -> GaussianComponent {
        GaussianComponent::scalar(m, v).unwrap()
    }

    #[test]
    fn entropy_examples() {
        assert!((gaussian_entropy(&n(0.0, 1.0)) - 1.418_938_533_204_672_7).abs() < 1e-12);
        let g2 = GaussianComponent::diagonal(vec![0.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((gaussian_entropy(&g2) - 2.837_877_066_409_345_3).abs() < 1e-12);
        let h4 = gaussian_entropy(&n(0.0, 4.0));
        assert!((h4 - 2.112_085_713_764_618).abs() < 1e-12);
        let oracle = quadrature::entropy_by_quadrature(&n(0.0, 4.0));
        assert!((h4 - oracle).abs() < 1e-9);
    }

    #[test]
    fn kl_examples() {
        let p = n(0.0, 1.0);
        assert!(kl_divergence(&p, &p).unwrap() < 1e-15);
        assert!((kl_divergence(&p, &n(1.0, 1.0)).unwrap() - 0.5).abs() < 1e-12);
        let v = kl_divergence(&p, &n(0.0, 4.0)).unwrap();
        assert!((v - 0.318_147_180_559_945_3).abs() < 1e-12);
        assert!((v - quadrature::kl_by_quadrature(&p, &n(0.0, 4.0))).abs() < 1e-9);
        assert!((0.5 - quadrature::kl_by_quadrature(&p, &n(1.0, 1.0))).abs() < 1e-9);
    }

    #[test]
    fn chernoff_examples() {
        let p = n(0.0, 1.0);
        let q = n(2.0, 1.0);
        for a in [0.0, 0.2, 0.5, 0.9, 1.0] {
            assert!(chernoff_alpha(&p, &p, a).unwrap() < 1e-15);
        }
        assert!((chernoff_alpha(&p, &q, 0.5).unwrap() - 0.5).abs() < 1e-12);
        assert!((quadrature::chernoff_by_quadrature(&p, &q, 0.5) - 0.5).abs() < 1e-9);
        let r = n(3.0, 7.0);
        assert_eq!(chernoff_alpha(&p, &r, 0.0).unwrap(), 0.0);
        assert_eq!(chernoff_alpha(&p, &r, 1.0).unwrap(), 0.0);
        assert!(chernoff_alpha(&p, &q, 1.5).is_err());
        assert!(chernoff_alpha(&p, &q, -0.1).is_err());
        assert!(chernoff_alpha(&p, &q, f64::NAN).is_err());
    }

    #[test]
    fn bhattacharyya_examples() {
        let p = n(0.0, 1.0);
        assert!(bhattacharyya(&p, &p).unwrap() < 1e-15);
        assert!((bhattacharyya(&p, &n(2.0, 1.0)).unwrap() - 0.5).abs() < 1e-12);
        let v = bhattacharyya(&p, &n(0.0, 9.0)).unwrap();
        assert!((v - 0.5 * (5.0f64 / 3.0).ln()).abs() < 1e-12);
        assert!((v - quadrature::chernoff_by_quadrature(&p, &n(0.0, 9.0), 0.5)).abs() < 1e-9);
    }

    #[test]
    fn monte_carlo_bhattacharyya_crosscheck() {
        // −ln E_p[√(q/p)] estimated by sampling.
        let p = n(0.0, 1.0);
        let q = n(2.0, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = 400_000;
        let mut acc = 0.0;
        for _ in 0..m {
            let y = p.sample(&mut rng);
            acc += (0.5 * (q.log_density(&y) - p.log_density(&y))).exp();
        }
        let est = -(acc / m as f64).ln();
        assert!((est - 0.5).abs() < 0.01, "{est}");
    }

    #[test]
    fn rejects_bad_covariances() {
        assert!(GaussianComponent::scalar(0.0, 0.0).is_err());
        assert!(GaussianComponent::scalar(0.0, -1.0).is_err());
        assert!(GaussianComponent::new(vec![0.0, 0.0], vec![vec![1.0, 0.5], vec![0.4, 1.0]]).is_err());
        assert!(GaussianComponent::new(vec![0.0, 0.0], vec![vec![1.0, 2.0], vec![2.0, 1.0]]).is_err());
        assert!(GaussianComponent::from_flat(vec![], vec![]).is_err());
        let a = n(0.0, 1.0);
        let b = GaussianComponent::diagonal(vec![0.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!(matches!(kl_divergence(&a, &b), Err(Error::DimensionMismatch { .. })));
        assert!(chernoff_alpha(&a, &b, 0.5).is_err());
    }

    #[test]
    fn kl_asymmetry_witness() {
        let p = n(0.0, 1.0);
        let q = n(0.0, 9.0);
        let d = (kl_divergence(&p, &q).unwrap() - kl_divergence(&q, &p).unwrap()).abs();
        assert!(d > 0.1);
    }

    #[test]
    fn diagonal_fast_path_matches_general() {
        let p = GaussianComponent::diagonal(vec![0.3, -1.0], &[0.7, 2.0]).unwrap();
        let q = GaussianComponent::diagonal(vec![1.1, 0.4], &[1.5, 0.4]).unwrap();
        // Same matrices with a tiny off-diagonal force the general path.
        let pg = GaussianComponent::new(vec![0.3, -1.0], vec![vec![0.7, 1e-300], vec![1e-300, 2.0]]).unwrap();
        let qg = GaussianComponent::new(vec![1.1, 0.4], vec![vec![1.5, 1e-300], vec![1e-300, 0.4]]).unwrap();
        assert!(!pg.is_diagonal());
        let a = kl_divergence(&p, &q).unwrap();
        let b = kl_divergence(&pg, &qg).unwrap();
        assert!((a - b).abs() < 1e-12);
        for alpha in [0.1, 0.5, 0.8] {
            let a = chernoff_alpha(&p, &q, alpha).unwrap();
            let b = chernoff_alpha(&pg, &qg, alpha).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn spd(d: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-1.0f64..1.0, d * d).prop_map(move |a| {
            let mut m = vec![0.0; d * d];
            for i in 0..d {
                for j in 0..d {
                    m[i * d + j] = (0..d).map(|k| a[i * d + k] * a[j * d + k]).sum::<f64>();
                }
                m[i * d + i] += 0.2;
            }
            m
        })
    }

    fn pair() -> impl Strategy<Value = (GaussianComponent, GaussianComponent)> {
        (1usize..=3).prop_flat_map(|d| {
            (
                prop::collection::vec(-3.0f64..3.0, d),
                spd(d),
                prop::collection::vec(-3.0f64..3.0, d),
                spd(d),
            )
                .prop_map(|(m1, c1, m2, c2)| {
                    (
                        GaussianComponent::from_flat(m1, c1).unwrap(),
                        GaussianComponent::from_flat(m2, c2).unwrap(),
                    )
                })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn divergences_nonnegative_and_zero_at_identity((p, q) in pair(), alpha in 0.0f64..=1.0) {
            prop_assert!(kl_divergence(&p, &q).unwrap() >= 0.0);
            prop_assert!(chernoff_alpha(&p, &q, alpha).unwrap() >= 0.0);
            prop_assert!(bhattacharyya(&p, &q).unwrap() >= 0.0);
            prop_assert!(kl_divergence(&p, &p).unwrap() < 1e-12);
            prop_assert!(chernoff_alpha(&p, &p, alpha).unwrap() < 1e-12);
            prop_assert!(bhattacharyya(&p, &p).unwrap() < 1e-12);
        }

        #[test]
        fn bhattacharyya_is_chernoff_half((p, q) in pair()) {
            let a = bhattacharyya(&p, &q).unwrap();
            let b = chernoff_alpha(&p, &q, 0.5).unwrap();
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}

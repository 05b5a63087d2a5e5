//! Small dense helpers for symmetric positive-definite matrices stored
//! row-major in flat slices. Dimensions here are tiny (d ≤ 4 in practice),
//! so everything is straight loops without allocation where possible.

/// Lower Cholesky factor of `a` (row-major d×d). `None` if a pivot is not
/// strictly positive or not finite.
pub(crate) fn cholesky(a: &[f64], d: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; d * d];
    cholesky_into(a, d, &mut l).then_some(l)
}

pub(crate) fn cholesky_into(a: &[f64], d: usize, l: &mut [f64]) -> bool {
    for i in 0..d {
        for j in 0..=i {
            let mut sum = a[i * d + j];
            for k in 0..j {
                sum -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if !(sum > 0.0) || !sum.is_finite() {
                    return false;
                }
                l[i * d + i] = sum.sqrt();
            } else {
                l[i * d + j] = sum / l[j * d + j];
            }
        }
        for j in (i + 1)..d {
            l[i * d + j] = 0.0;
        }
    }
    true
}

pub(crate) fn log_det_from_cholesky(l: &[f64], d: usize) -> f64 {
    2.0 * (0..d).map(|i| l[i * d + i].ln()).sum::<f64>()
}

/// Solves `L x = b` in place for lower-triangular `L`.
pub(crate) fn forward_substitute(l: &[f64], d: usize, x: &mut [f64]) {
    for i in 0..d {
        let mut sum = x[i];
        for k in 0..i {
            sum -= l[i * d + k] * x[k];
        }
        x[i] = sum / l[i * d + i];
    }
}

/// Inverse of a lower-triangular factor, itself lower-triangular.
pub(crate) fn lower_inverse(l: &[f64], d: usize) -> Vec<f64> {
    let mut inv = vec![0.0; d * d];
    let mut col = vec![0.0; d];
    for j in 0..d {
        col.iter_mut().for_each(|c| *c = 0.0);
        col[j] = 1.0;
        forward_substitute(l, d, &mut col);
        for i in 0..d {
            inv[i * d + j] = col[i];
        }
    }
    inv
}

/// `A⁻¹ = L⁻ᵀ L⁻¹` from the inverse lower factor.
pub(crate) fn precision_from_lower_inverse(linv: &[f64], d: usize) -> Vec<f64> {
    let mut p = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let mut s = 0.0;
            for k in i.max(j)..d {
                s += linv[k * d + i] * linv[k * d + j];
            }
            p[i * d + j] = s;
        }
    }
    p
}

pub(crate) fn max_asymmetry(a: &[f64], d: usize) -> f64 {
    let mut m: f64 = 0.0;
    for i in 0..d {
        for j in (i + 1)..d {
            m = m.max((a[i * d + j] - a[j * d + i]).abs());
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_reconstructs() {
        let a = [4.0, 2.0, 0.6, 2.0, 5.0, 1.0, 0.6, 1.0, 3.0];
        let l = cholesky(&a, 3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let s: f64 = (0..3).map(|k| l[i * 3 + k] * l[j * 3 + k]).sum();
                assert!((s - a[i * 3 + j]).abs() < 1e-12);
            }
        }
        let p = precision_from_lower_inverse(&lower_inverse(&l, 3), 3);
        for i in 0..3 {
            for j in 0..3 {
                let s: f64 = (0..3).map(|k| a[i * 3 + k] * p[k * 3 + j]).sum();
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((s - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        assert!(cholesky(&[1.0, 2.0, 2.0, 1.0], 2).is_none());
        assert!(cholesky(&[0.0], 1).is_none());
        assert!(cholesky(&[f64::NAN], 1).is_none());
    }
}

//! Adaptive Gauss–Kronrod quadrature and the integration oracles for the
//! Gaussian divergences. The oracles evaluate the defining integrals from
//! log-densities only, so they share no algebra with the closed forms in
//! [`crate::gaussian`]. Supported dimensions are 1 and 2.

use crate::error::{Error, Result};
use crate::gaussian::GaussianComponent;

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
// Gauss weights for XGK[1], XGK[3], XGK[5], XGK[7].
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

const MAX_DEPTH: u32 = 30;
const INITIAL_PIECES: usize = 24;
const BOX_HALF_WIDTH: f64 = 13.0;

/// Kronrod estimate, error estimate and `∫|f|` estimate on `[a, b]`.
fn kronrod<F: FnMut(f64) -> f64>(f: &mut F, a: f64, b: f64) -> (f64, f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut k = WGK[7] * fc;
    let mut g = WG[3] * fc;
    let mut abs = WGK[7] * fc.abs();
    for j in 0..7 {
        let dx = h * XGK[j];
        let (lo, hi) = (f(c - dx), f(c + dx));
        k += WGK[j] * (lo + hi);
        abs += WGK[j] * (lo.abs() + hi.abs());
        if j % 2 == 1 {
            g += WG[j / 2] * (lo + hi);
        }
    }
    (k * h, (k - g).abs() * h, abs * h.abs())
}

fn adapt<F: FnMut(f64) -> f64>(f: &mut F, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
    let (k, err, abs) = kronrod(f, a, b);
    // Below this the error estimate is dominated by rounding.
    let roundoff = 50.0 * f64::EPSILON * abs;
    if err <= tol.max(roundoff) || depth >= MAX_DEPTH {
        return k;
    }
    let m = 0.5 * (a + b);
    adapt(f, a, m, 0.5 * tol, depth + 1) + adapt(f, m, b, 0.5 * tol, depth + 1)
}

/// `∫_a^b f` to absolute tolerance `tol` (adaptive G7–K15 bisection).
pub fn integrate<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, tol: f64) -> f64 {
    let w = (b - a) / INITIAL_PIECES as f64;
    (0..INITIAL_PIECES)
        .map(|i| {
            let lo = a + i as f64 * w;
            adapt(&mut f, lo, lo + w, tol / INITIAL_PIECES as f64, 0)
        })
        .sum()
}

/// Iterated adaptive integral over the rectangle `[x0,x1]×[y0,y1]`.
pub fn integrate_2d<F: FnMut(f64, f64) -> f64>(
    mut f: F,
    (x0, x1): (f64, f64),
    (y0, y1): (f64, f64),
    tol: f64,
) -> f64 {
    let inner_tol = tol / (x1 - x0).max(1.0);
    integrate(
        |x| integrate(|y| f(x, y), y0, y1, inner_tol),
        x0,
        x1,
        tol,
    )
}

fn axis_box(g: &GaussianComponent, i: usize) -> (f64, f64) {
    let s = g.cov_at(i, i).sqrt();
    (g.mean()[i] - BOX_HALF_WIDTH * s, g.mean()[i] + BOX_HALF_WIDTH * s)
}

fn union(a: (f64, f64), b: (f64, f64)) -> (f64, f64) {
    (a.0.min(b.0), a.1.max(b.1))
}

fn integrate_over<F: FnMut(&[f64]) -> f64>(
    dim: usize,
    boxes: &[(f64, f64)],
    tol: f64,
    mut f: F,
) -> Result<f64> {
    match dim {
        1 => Ok(integrate(|x| f(&[x]), boxes[0].0, boxes[0].1, tol)),
        2 => Ok(integrate_2d(|x, y| f(&[x, y]), boxes[0], boxes[1], tol)),
        d => Err(Error::InvalidInput(format!(
            "quadrature oracle supports d ∈ {{1, 2}}, got {d}"
        ))),
    }
}

/// `−∫ p ln p`.
pub fn try_entropy_by_quadrature(p: &GaussianComponent) -> Result<f64> {
    let boxes: Vec<_> = (0..p.dim()).map(|i| axis_box(p, i)).collect();
    integrate_over(p.dim(), &boxes, 1e-11, |y| {
        let lp = p.log_density(y);
        -lp.exp() * lp
    })
}

/// `∫ p ln(p/q)`.
pub fn try_kl_by_quadrature(p: &GaussianComponent, q: &GaussianComponent) -> Result<f64> {
    same_dim(p, q)?;
    let boxes: Vec<_> = (0..p.dim()).map(|i| axis_box(p, i)).collect();
    integrate_over(p.dim(), &boxes, 1e-11, |y| {
        let lp = p.log_density(y);
        lp.exp() * (lp - q.log_density(y))
    })
}

/// `−ln ∫ p^α q^{1−α}`.
pub fn try_chernoff_by_quadrature(
    p: &GaussianComponent,
    q: &GaussianComponent,
    alpha: f64,
) -> Result<f64> {
    same_dim(p, q)?;
    let boxes: Vec<_> = (0..p.dim())
        .map(|i| union(axis_box(p, i), axis_box(q, i)))
        .collect();
    let overlap = integrate_over(p.dim(), &boxes, 1e-12, |y| {
        (alpha * p.log_density(y) + (1.0 - alpha) * q.log_density(y)).exp()
    })?;
    Ok(-overlap.ln())
}

fn same_dim(p: &GaussianComponent, q: &GaussianComponent) -> Result<()> {
    if p.dim() != q.dim() {
        return Err(Error::DimensionMismatch {
            expected: p.dim(),
            got: q.dim(),
        });
    }
    Ok(())
}

pub fn entropy_by_quadrature(p: &GaussianComponent) -> f64 {
    try_entropy_by_quadrature(p).expect("quadrature oracle")
}

pub fn kl_by_quadrature(p: &GaussianComponent, q: &GaussianComponent) -> f64 {
    try_kl_by_quadrature(p, q).expect("quadrature oracle")
}

pub fn chernoff_by_quadrature(p: &GaussianComponent, q: &GaussianComponent, alpha: f64) -> f64 {
    try_chernoff_by_quadrature(p, q, alpha).expect("quadrature oracle")
}

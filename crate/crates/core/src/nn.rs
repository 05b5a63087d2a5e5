//! Small fully connected networks with hand-written backpropagation,
//! first-order optimizers, Polyak averaging and a finite-difference gradient
//! checker.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

/// Dense layer `a = act(W x + b)` with `W` stored row-major (`n_out × n_in`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub n_in: usize,
    pub n_out: usize,
    pub activation: Activation,
    #[serde(default)]
    pub frozen: bool,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(n_in: usize, n_out: usize, activation: Activation) -> Self {
        Self {
            n_in,
            n_out,
            activation,
            frozen: false,
            weights: vec![0.0; n_in * n_out],
            bias: vec![0.0; n_out],
        }
    }

    /// He-scaled Gaussian weights for ReLU layers, Glorot-scaled otherwise;
    /// zero bias.
    pub fn random<R: Rng + ?Sized>(n_in: usize, n_out: usize, activation: Activation, rng: &mut R) -> Self {
        let std = match activation {
            Activation::Relu => (2.0 / n_in as f64).sqrt(),
            _ => (2.0 / (n_in + n_out) as f64).sqrt(),
        };
        let mut layer = Self::zeros(n_in, n_out, activation);
        for w in &mut layer.weights {
            *w = std * rng.sample::<f64, _>(StandardNormal);
        }
        layer
    }

    fn forward_into(&self, x: &[f64], z: &mut Vec<f64>, a: &mut Vec<f64>) {
        z.clear();
        a.clear();
        for o in 0..self.n_out {
            let row = &self.weights[o * self.n_in..(o + 1) * self.n_in];
            let pre = self.bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
            z.push(pre);
            a.push(self.activation.apply(pre));
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

/// Intermediate values of a forward pass needed by [`Mlp::backward`].
#[derive(Clone, Debug, Default)]
pub struct Trace {
    /// `inputs[l]` is the input to layer `l`; the last entry is the output.
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.inputs.last().map(|v| v.as_slice()).unwrap_or(&[])
    }
}

impl Mlp {
    /// Layers of widths `sizes[0] → … → sizes[n]`; hidden layers use
    /// `hidden`, the final layer `output`.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], hidden: Activation, output: Activation, rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output widths");
        let n = sizes.len() - 1;
        Self {
            layers: (0..n)
                .map(|l| {
                    let act = if l + 1 == n { output } else { hidden };
                    Layer::random(sizes[l], sizes[l + 1], act, rng)
                })
                .collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].n_in
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().n_out
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    frozen: l.frozen,
                    ..Layer::zeros(l.n_in, l.n_out, l.activation)
                })
                .collect(),
        }
    }

    pub fn zero_last_layer(&mut self) {
        let last = self.layers.last_mut().unwrap();
        last.weights.fill(0.0);
        last.bias.fill(0.0);
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut cur = x.to_vec();
        let (mut z, mut a) = (Vec::new(), Vec::new());
        for layer in &self.layers {
            layer.forward_into(&cur, &mut z, &mut a);
            std::mem::swap(&mut cur, &mut a);
        }
        cur
    }

    pub fn forward_traced(&self, x: &[f64]) -> Trace {
        let mut trace = Trace {
            inputs: Vec::with_capacity(self.layers.len() + 1),
            pre: Vec::with_capacity(self.layers.len()),
        };
        trace.inputs.push(x.to_vec());
        for layer in &self.layers {
            let (mut z, mut a) = (Vec::new(), Vec::new());
            layer.forward_into(trace.inputs.last().unwrap(), &mut z, &mut a);
            trace.pre.push(z);
            trace.inputs.push(a);
        }
        trace
    }

    /// Accumulates `∂L/∂params` into `grads` (skipping frozen layers) and
    /// returns `∂L/∂input`.
    pub fn backward(&self, trace: &Trace, grad_out: &[f64], grads: &mut Mlp) -> Vec<f64> {
        let mut delta = grad_out.to_vec();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let x = &trace.inputs[l];
            let a = &trace.inputs[l + 1];
            for o in 0..layer.n_out {
                delta[o] *= layer.activation.derivative(trace.pre[l][o], a[o]);
            }
            if !layer.frozen {
                let g = &mut grads.layers[l];
                for o in 0..layer.n_out {
                    if delta[o] == 0.0 {
                        continue;
                    }
                    g.bias[o] += delta[o];
                    let row = &mut g.weights[o * layer.n_in..(o + 1) * layer.n_in];
                    for (gw, xi) in row.iter_mut().zip(x) {
                        *gw += delta[o] * xi;
                    }
                }
            }
            let mut prev = vec![0.0; layer.n_in];
            for o in 0..layer.n_out {
                if delta[o] == 0.0 {
                    continue;
                }
                let row = &layer.weights[o * layer.n_in..(o + 1) * layer.n_in];
                for (p, w) in prev.iter_mut().zip(row) {
                    *p += delta[o] * w;
                }
            }
            delta = prev;
        }
        delta
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::DimensionMismatch {
                expected: self.n_params(),
                got: flat.len(),
            });
        }
        let mut k = 0;
        for l in &mut self.layers {
            for p in l.weights.iter_mut().chain(l.bias.iter_mut()) {
                *p = flat[k];
                k += 1;
            }
        }
        Ok(())
    }

    /// Per-parameter flag marking parameters of frozen layers.
    pub fn frozen_mask(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            out.extend(std::iter::repeat(l.frozen).take(l.weights.len() + l.bias.len()));
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|p| p.is_finite()))
    }

    fn same_shape(&self, other: &Mlp) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.n_in == b.n_in && a.n_out == b.n_out)
    }

    /// `self ← (1 − τ)·self + τ·online`.
    pub fn polyak_from(&mut self, online: &Mlp, tau: f64) -> Result<()> {
        if !self.same_shape(online) {
            return Err(Error::InvalidInput("Polyak update between networks of different shapes".into()));
        }
        for (t, o) in self.layers.iter_mut().zip(&online.layers) {
            polyak_update(&mut t.weights, &o.weights, tau)?;
            polyak_update(&mut t.bias, &o.bias, tau)?;
        }
        Ok(())
    }
}

/// `target ← (1 − τ)·target + τ·online`, elementwise.
pub fn polyak_update(target: &mut [f64], online: &[f64], tau: f64) -> Result<()> {
    if target.len() != online.len() {
        return Err(Error::DimensionMismatch {
            expected: target.len(),
            got: online.len(),
        });
    }
    if tau == 1.0 {
        target.copy_from_slice(online);
    } else if tau != 0.0 {
        for (t, o) in target.iter_mut().zip(online) {
            *t = (1.0 - tau) * *t + tau * o;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerKind {
    Sgd,
    Momentum { beta: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Sgd
    }
}

/// Optimizer state for one flat parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, n_params: usize) -> Self {
        let slots = match kind {
            OptimizerKind::Sgd => 0,
            _ => n_params,
        };
        Self {
            kind,
            lr,
            m: vec![0.0; slots],
            v: vec![0.0; if matches!(kind, OptimizerKind::Adam { .. }) { n_params } else { 0 }],
            t: 0,
        }
    }

    /// Descends along `grad`; entries with `mask[i] == true` are left alone.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], mask: &[bool]) {
        self.t += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for i in 0..params.len() {
                    if !mask[i] {
                        params[i] -= self.lr * grad[i];
                    }
                }
            }
            OptimizerKind::Momentum { beta } => {
                for i in 0..params.len() {
                    if !mask[i] {
                        self.m[i] = beta * self.m[i] + grad[i];
                        params[i] -= self.lr * self.m[i];
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powi(self.t as i32);
                let c2 = 1.0 - beta2.powi(self.t as i32);
                for i in 0..params.len() {
                    if !mask[i] {
                        self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * grad[i];
                        self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * grad[i] * grad[i];
                        params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientReport {
    pub checked: usize,
    /// Indices (into the flat parameter vector) exceeding the tolerance.
    pub failed: Vec<usize>,
    pub max_rel_err: f64,
    pub median_rel_err: f64,
}

impl GradientReport {
    pub fn pass_fraction(&self) -> f64 {
        if self.checked == 0 {
            return 1.0;
        }
        1.0 - self.failed.len() as f64 / self.checked as f64
    }

    /// Fails when fewer than `min_pass_fraction` of the parameters agree.
    pub fn require(&self, min_pass_fraction: f64) -> Result<()> {
        if self.pass_fraction() < min_pass_fraction {
            return Err(Error::GradientCheck {
                failed: self.failed.len(),
                checked: self.checked,
            });
        }
        Ok(())
    }
}

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
/// Gradients below this magnitude are compared absolutely.
pub const FD_ABS_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_ABS_FLOOR)
}

/// Central differences of `loss` around `params`, compared against
/// `analytic` on every index where `skip[i]` is false.
pub fn check_gradient<F>(params: &[f64], analytic: &[f64], skip: &[bool], mut loss: F) -> GradientReport
where
    F: FnMut(&[f64]) -> f64,
{
    let mut p = params.to_vec();
    let mut errors = Vec::new();
    let mut failed = Vec::new();
    for i in 0..params.len() {
        if skip[i] {
            continue;
        }
        p[i] = params[i] + FD_STEP;
        let up = loss(&p);
        p[i] = params[i] - FD_STEP;
        let down = loss(&p);
        p[i] = params[i];
        let numeric = (up - down) / (2.0 * FD_STEP);
        let err = relative_error(analytic[i], numeric);
        if !(err < FD_REL_TOL) {
            failed.push(i);
        }
        errors.push(err);
    }
    let checked = errors.len();
    let max_rel_err = errors.iter().cloned().fold(0.0, f64::max);
    errors.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    GradientReport {
        checked,
        failed,
        max_rel_err,
        median_rel_err: errors.get(checked / 2).copied().unwrap_or(0.0),
    }
}

/// Numerically stable `ln(1 + eˣ)`.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn quadratic_loss(net: &Mlp, x: &[f64], target: &[f64]) -> f64 {
        net.forward(x).iter().zip(target).map(|(o, t)| 0.5 * (o - t).powi(2)).sum()
    }

    fn analytic(net: &Mlp, x: &[f64], target: &[f64]) -> Mlp {
        let trace = net.forward_traced(x);
        let g: Vec<f64> = trace.output().iter().zip(target).map(|(o, t)| o - t).collect();
        let mut grads = net.zeros_like();
        net.backward(&trace, &g, &mut grads);
        grads
    }

    fn check(net: &Mlp, x: &[f64], target: &[f64]) -> GradientReport {
        let grads = analytic(net, x, target);
        let mut probe = net.clone();
        check_gradient(&net.params(), &grads.params(), &net.frozen_mask(), |p| {
            probe.set_params(p).unwrap();
            quadratic_loss(&probe, x, target)
        })
    }

    #[test]
    fn linear_layer_matches_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Mlp::new(&[3, 2], Activation::Identity, Activation::Identity, &mut rng);
        let r = check(&net, &[0.3, -1.2, 0.7], &[1.0, -0.5]);
        assert!(r.failed.is_empty());
        assert!(r.max_rel_err < 1e-8, "{}", r.max_rel_err);
    }

    #[test]
    fn tanh_network_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Mlp::new(&[4, 8, 8, 3], Activation::Tanh, Activation::Identity, &mut rng);
        let x: Vec<f64> = (0..4).map(|_| rng.sample(StandardNormal)).collect();
        let t: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
        let r = check(&net, &x, &t);
        assert!(r.failed.is_empty(), "{r:?}");
    }

    #[test]
    fn relu_network_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Mlp::new(&[5, 16, 16, 2], Activation::Relu, Activation::Identity, &mut rng);
        let x: Vec<f64> = (0..5).map(|_| rng.sample(StandardNormal)).collect();
        let r = check(&net, &x, &[0.5, -0.5]);
        assert!(r.pass_fraction() >= 0.99, "{r:?}");
    }

    #[test]
    fn frozen_layer_gets_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut net = Mlp::new(&[3, 4, 2], Activation::Tanh, Activation::Identity, &mut rng);
        net.layers[0].frozen = true;
        let grads = analytic(&net, &[0.1, 0.2, 0.3], &[1.0, 1.0]);
        assert!(grads.layers[0].weights.iter().chain(&grads.layers[0].bias).all(|g| *g == 0.0));
        assert!(grads.layers[1].weights.iter().any(|g| *g != 0.0));
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1, net.n_params());
        let mut p = net.params();
        opt.step(&mut p, &grads.params(), &net.frozen_mask());
        let before = net.params();
        let n0 = net.layers[0].weights.len() + net.layers[0].bias.len();
        assert_eq!(&p[..n0], &before[..n0]);
    }

    #[test]
    fn first_layer_perturbation_is_continuous() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = Mlp::new(&[3, 8, 2], Activation::Tanh, Activation::Identity, &mut rng);
        let x = [0.2, -0.4, 0.9];
        let base = net.forward(&x);
        for eps in [1e-3, 1e-5, 1e-7] {
            let mut p = net.clone();
            p.layers[0].weights[0] += eps;
            let out = p.forward(&x);
            let change = out.iter().zip(&base).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(change <= 10.0 * eps);
        }
    }

    #[test]
    fn polyak_examples() {
        let mut t = vec![0.0, 2.0];
        polyak_update(&mut t, &[1.0, 4.0], 1.0).unwrap();
        assert_eq!(t, vec![1.0, 4.0]);
        polyak_update(&mut t, &[9.0, 9.0], 0.0).unwrap();
        assert_eq!(t, vec![1.0, 4.0]);
        let mut t = vec![0.0];
        polyak_update(&mut t, &[1.0], 0.1).unwrap();
        assert!((t[0] - 0.1).abs() < 1e-15);
        assert!(polyak_update(&mut t, &[1.0, 2.0], 0.5).is_err());
    }

    #[test]
    fn optimizers_descend_a_quadratic() {
        for kind in [
            OptimizerKind::Sgd,
            OptimizerKind::Momentum { beta: 0.9 },
            OptimizerKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
        ] {
            let mut opt = Optimizer::new(kind, 0.05, 2);
            let mut p = vec![3.0, -2.0];
            for _ in 0..2000 {
                let g = p.clone();
                opt.step(&mut p, &g, &[false, false]);
            }
            assert!(p.iter().all(|x| x.abs() < 1e-3), "{kind:?}: {p:?}");
        }
    }

    #[test]
    fn params_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let net = Mlp::new(&[2, 3, 1], Activation::Relu, Activation::Identity, &mut rng);
        let mut other = net.zeros_like();
        other.set_params(&net.params()).unwrap();
        assert_eq!(other.params(), net.params());
        assert!(other.set_params(&[0.0]).is_err());
        let json = serde_json::to_string(&net).unwrap();
        let back: Mlp = serde_json::from_str(&json).unwrap();
        assert_eq!(back, net);
    }
}

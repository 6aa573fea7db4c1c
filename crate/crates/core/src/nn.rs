//! Multilayer perceptrons with hand-written reverse mode, a tanh-squashed
//! Gaussian head, layer normalisation, Adam, Polyak averaging and a cosine
//! learning-rate schedule.
//!
//! Parameters of a network live in one flat `Vec<f64>`; gradients use the
//! same layout, so the optimiser and the target-network averaging work on
//! plain slices.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Matrix;
use crate::rng::Rng;

pub const LOG_STD_MIN: f64 = -3.0;
pub const LOG_STD_MAX: f64 = 2.0;
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("polyak rate {0} outside [0, 1]")]
    PolyakRate(f64),
}

fn shape<T>(msg: String) -> Result<T, NnError> {
    Err(NnError::Shape(msg))
}

/// Architecture of an [`Mlp`]. Hidden layers are `Linear → [LayerNorm] → ReLU`;
/// the output layer is linear.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    #[serde(default)]
    pub layer_norm: bool,
}

#[derive(Debug, Clone, Copy)]
struct LayerLayout {
    fan_in: usize,
    fan_out: usize,
    w: usize,
    b: usize,
    /// Offsets of layer-norm gain and bias, hidden layers only.
    ln: Option<(usize, usize)>,
    relu: bool,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden: &[usize], output_dim: usize) -> Self {
        MlpSpec { input_dim, hidden: hidden.to_vec(), output_dim, layer_norm: false }
    }

    pub fn with_layer_norm(mut self, on: bool) -> Self {
        self.layer_norm = on;
        self
    }

    fn layout(&self) -> (Vec<LayerLayout>, usize) {
        let mut dims = vec![self.input_dim];
        dims.extend_from_slice(&self.hidden);
        dims.push(self.output_dim);
        let n_layers = dims.len() - 1;
        let mut out = Vec::with_capacity(n_layers);
        let mut off = 0;
        for l in 0..n_layers {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let hidden = l + 1 < n_layers;
            let w = off;
            let b = w + fan_in * fan_out;
            off = b + fan_out;
            let ln = if hidden && self.layer_norm {
                let g = off;
                off += 2 * fan_out;
                Some((g, g + fan_out))
            } else {
                None
            };
            out.push(LayerLayout { fan_in, fan_out, w, b, ln, relu: hidden });
        }
        (out, off)
    }

    pub fn n_params(&self) -> usize {
        self.layout().1
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "MlpDoc", into = "MlpDoc")]
pub struct Mlp {
    spec: MlpSpec,
    params: Vec<f64>,
    layout: Vec<LayerLayout>,
}

impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.params == other.params
    }
}

/// Serialised form of an [`Mlp`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpDoc {
    pub spec: MlpSpec,
    pub params: Vec<f64>,
}

impl TryFrom<MlpDoc> for Mlp {
    type Error = NnError;
    fn try_from(doc: MlpDoc) -> Result<Self, NnError> {
        Mlp::from_params(doc.spec, doc.params)
    }
}

impl From<Mlp> for MlpDoc {
    fn from(m: Mlp) -> Self {
        MlpDoc { spec: m.spec, params: m.params }
    }
}

/// Activations kept by [`Mlp::forward_cached`] for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    /// Input of each layer (`inputs[0]` is the network input).
    inputs: Vec<Matrix>,
    /// Per hidden layer with layer norm: normalised values and `1/σ` per row.
    ln: Vec<Option<(Matrix, Vec<f64>)>>,
    /// Per hidden layer: values entering the ReLU.
    pre_relu: Vec<Option<Matrix>>,
}

impl Mlp {
    /// Uniform fan-in initialisation, `U(−1/√fan_in, 1/√fan_in)` for weights and biases.
    pub fn new(spec: MlpSpec, rng: &mut Rng) -> Self {
        let (layout, n) = spec.layout();
        let mut params = vec![0.0; n];
        for l in &layout {
            let bound = 1.0 / libm::sqrt(l.fan_in as f64);
            for p in &mut params[l.w..l.b + l.fan_out] {
                *p = rng.random_range(-bound..bound);
            }
            if let Some((g, _)) = l.ln {
                params[g..g + l.fan_out].iter_mut().for_each(|x| *x = 1.0);
            }
        }
        Mlp { spec, params, layout }
    }

    pub fn zeros(spec: MlpSpec) -> Self {
        let (layout, n) = spec.layout();
        Mlp { spec, params: vec![0.0; n], layout }
    }

    pub fn from_params(spec: MlpSpec, params: Vec<f64>) -> Result<Self, NnError> {
        let (layout, n) = spec.layout();
        if params.len() != n {
            return shape(format!("expected {n} parameters, got {}", params.len()));
        }
        Ok(Mlp { spec, params, layout })
    }

    /// Zero the output layer's weights and bias.
    pub fn zero_output_layer(&mut self) {
        let l = self.layout[self.layout.len() - 1];
        self.params[l.w..l.b + l.fan_out].iter_mut().for_each(|x| *x = 0.0);
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// Weight matrix (row-major `fan_out × fan_in`) and bias of layer `l`.
    pub fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let ly = self.layout[l];
        (&self.params[ly.w..ly.b], &self.params[ly.b..ly.b + ly.fan_out])
    }

    pub fn layer_mut(&mut self, l: usize) -> (&mut [f64], &mut [f64]) {
        let ly = self.layout[l];
        let (w, rest) = self.params[ly.w..ly.b + ly.fan_out].split_at_mut(ly.b - ly.w);
        (w, rest)
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix, NnError> {
        self.run(x, None)
    }

    pub fn forward_cached(&self, x: &Matrix) -> Result<(Matrix, MlpCache), NnError> {
        let mut cache = MlpCache { inputs: Vec::new(), ln: Vec::new(), pre_relu: Vec::new() };
        let out = self.run(x, Some(&mut cache))?;
        Ok((out, cache))
    }

    fn run(&self, x: &Matrix, mut cache: Option<&mut MlpCache>) -> Result<Matrix, NnError> {
        if x.cols() != self.spec.input_dim {
            return shape(format!("input width {} != {}", x.cols(), self.spec.input_dim));
        }
        let mut h = x.clone();
        for l in &self.layout {
            let mut z = affine(&self.params, l, &h);
            let mut ln_cache = None;
            if let Some((g, b)) = l.ln {
                let gain = &self.params[g..g + l.fan_out];
                let bias = &self.params[b..b + l.fan_out];
                let mut xhat = Matrix::zeros(z.rows(), l.fan_out);
                let mut inv = Vec::with_capacity(z.rows());
                for r in 0..z.rows() {
                    let is = normalise(z.row(r), xhat.row_mut(r), LAYER_NORM_EPS);
                    inv.push(is);
                    for ((o, xh), (ga, be)) in z.row_mut(r).iter_mut().zip(xhat.row(r)).zip(gain.iter().zip(bias)) {
                        *o = xh * ga + be;
                    }
                }
                ln_cache = Some((xhat, inv));
            }
            let mut pre = None;
            if l.relu {
                if cache.is_some() {
                    pre = Some(z.clone());
                }
                z.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
            }
            if let Some(c) = cache.as_deref_mut() {
                c.inputs.push(core::mem::replace(&mut h, Matrix::zeros(0, 0)));
                c.ln.push(ln_cache);
                c.pre_relu.push(pre);
            }
            h = z;
        }
        Ok(h)
    }

    /// Reverse pass: accumulates parameter gradients into `grads` (same
    /// layout as [`Mlp::params`]) and returns the gradient w.r.t. the input.
    pub fn backward(&self, cache: &MlpCache, grad_out: &Matrix, grads: &mut [f64]) -> Result<Matrix, NnError> {
        if grads.len() != self.params.len() {
            return shape(format!("gradient buffer {} != {}", grads.len(), self.params.len()));
        }
        let last = self.layout[self.layout.len() - 1];
        if grad_out.cols() != last.fan_out || grad_out.rows() != cache.inputs[0].rows() {
            return shape(format!("output gradient {}x{}", grad_out.rows(), grad_out.cols()));
        }
        let mut g = grad_out.clone();
        for (i, l) in self.layout.iter().enumerate().rev() {
            if let Some(pre) = &cache.pre_relu[i] {
                for (gv, pv) in g.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                    if *pv <= 0.0 {
                        *gv = 0.0;
                    }
                }
            }
            if let (Some((gi, bi)), Some((xhat, inv))) = (l.ln, &cache.ln[i]) {
                let n = l.fan_out as f64;
                let mut dxhat = vec![0.0; l.fan_out];
                for r in 0..g.rows() {
                    let xr = xhat.row(r);
                    let gr = g.row_mut(r);
                    for j in 0..l.fan_out {
                        grads[gi + j] += gr[j] * xr[j];
                        grads[bi + j] += gr[j];
                        dxhat[j] = gr[j] * self.params[gi + j];
                    }
                    let mean_d: f64 = dxhat.iter().sum::<f64>() / n;
                    let mean_dx: f64 = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / n;
                    for j in 0..l.fan_out {
                        gr[j] = inv[r] * (dxhat[j] - mean_d - xr[j] * mean_dx);
                    }
                }
            }
            let input = &cache.inputs[i];
            // dW = gᵀ x, db = Σ g
            for r in 0..g.rows() {
                let gr = g.row(r);
                let xr = input.row(r);
                for (o, &go) in gr.iter().enumerate() {
                    if go == 0.0 {
                        continue;
                    }
                    grads[l.b + o] += go;
                    let wrow = &mut grads[l.w + o * l.fan_in..l.w + (o + 1) * l.fan_in];
                    for (dw, xv) in wrow.iter_mut().zip(xr) {
                        *dw += go * xv;
                    }
                }
            }
            let mut gin = Matrix::zeros(g.rows(), l.fan_in);
            for r in 0..g.rows() {
                let gr = g.row(r);
                let out = gin.row_mut(r);
                for (o, &go) in gr.iter().enumerate() {
                    if go == 0.0 {
                        continue;
                    }
                    let wrow = &self.params[l.w + o * l.fan_in..l.w + (o + 1) * l.fan_in];
                    for (d, wv) in out.iter_mut().zip(wrow) {
                        *d += go * wv;
                    }
                }
            }
            g = gin;
        }
        Ok(g)
    }
}

fn affine(params: &[f64], l: &LayerLayout, x: &Matrix) -> Matrix {
    let (fi, fo) = (l.fan_in, l.fan_out);
    let w = &params[l.w..l.b];
    let b = &params[l.b..l.b + fo];
    let mut z = Matrix::zeros(x.rows(), fo);
    if fo < 8 {
        for r in 0..x.rows() {
            let xr = x.row(r);
            for (o, zv) in z.row_mut(r).iter_mut().enumerate() {
                *zv = b[o] + dot4(&w[o * fi..(o + 1) * fi], xr);
            }
        }
        return z;
    }
    // Wᵀ so each input contributes a contiguous row update
    let mut wt = vec![0.0; fi * fo];
    for o in 0..fo {
        for i in 0..fi {
            wt[i * fo + o] = w[o * fi + i];
        }
    }
    for r in 0..x.rows() {
        let zr = z.row_mut(r);
        zr.copy_from_slice(b);
        for (i, &xv) in x.row(r).iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            for (zv, wv) in zr.iter_mut().zip(&wt[i * fo..(i + 1) * fo]) {
                *zv += xv * wv;
            }
        }
    }
    z
}

/// Dot product with four interleaved partial sums (fixed order, so results
/// are reproducible).
#[inline]
fn dot4(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let split = a.len() - a.len() % 4;
    for (x, y) in a[..split].chunks_exact(4).zip(b[..split].chunks_exact(4)) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = 0.0;
    for (x, y) in a[split..].iter().zip(&b[split..]) {
        tail += x * y;
    }
    (acc[0] + acc[2]) + (acc[1] + acc[3]) + tail
}

/// Writes `(x − mean)/√(var + eps)` into `out` and returns `1/√(var + eps)`.
fn normalise(x: &[f64], out: &mut [f64], eps: f64) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / libm::sqrt(var + eps);
    for (o, v) in out.iter_mut().zip(x) {
        *o = (v - mean) * inv;
    }
    inv
}

/// `(x − mean)/√(var + eps) · gain + bias` with population statistics over `x`.
pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    normalise(x, &mut out, eps);
    for ((o, g), b) in out.iter_mut().zip(gain).zip(bias) {
        *o = *o * g + b;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub low: f64,
    pub high: f64,
}

impl Bounds {
    pub fn symmetric(h: f64) -> Self {
        Bounds { low: -h, high: h }
    }

    #[inline]
    pub fn center(&self) -> f64 {
        0.5 * (self.low + self.high)
    }

    #[inline]
    pub fn half(&self) -> f64 {
        0.5 * (self.high - self.low)
    }

    #[inline]
    pub fn clip(&self, x: f64) -> f64 {
        x.clamp(self.low, self.high)
    }
}

/// Reparameterised draws from a tanh-squashed Gaussian, kept for the backward pass.
///
/// The head input is `batch × 2·adim`: means first, then raw log-stds.
#[derive(Debug, Clone)]
pub struct SquashedSample {
    pub actions: Matrix,
    pub log_prob: Vec<f64>,
    tanh_u: Matrix,
    sigma_eps: Matrix,
    clamped: Vec<bool>,
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        libm::log1p(libm::exp(x))
    }
}

/// `log(1 − tanh(u)²)` without cancellation for large `|u|`.
#[inline]
pub fn log_one_minus_tanh_sq(u: f64) -> f64 {
    2.0 * (core::f64::consts::LN_2 - u - softplus(-2.0 * u))
}

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

pub fn squashed_sample(head: &Matrix, eps: &Matrix, bounds: &[Bounds]) -> Result<SquashedSample, NnError> {
    let adim = bounds.len();
    if head.cols() != 2 * adim || eps.cols() != adim || eps.rows() != head.rows() {
        return shape(format!("head {}x{}, noise {}x{}", head.rows(), head.cols(), eps.rows(), eps.cols()));
    }
    let n = head.rows();
    let mut actions = Matrix::zeros(n, adim);
    let mut tanh_u = Matrix::zeros(n, adim);
    let mut sigma_eps = Matrix::zeros(n, adim);
    let mut clamped = Vec::with_capacity(n * adim);
    let mut log_prob = vec![0.0; n];
    for r in 0..n {
        let h = head.row(r);
        for j in 0..adim {
            let raw = h[adim + j];
            let ls = raw.clamp(LOG_STD_MIN, LOG_STD_MAX);
            clamped.push(raw != ls);
            let sigma = libm::exp(ls);
            let e = eps[(r, j)];
            let u = h[j] + sigma * e;
            let t = libm::tanh(u);
            let b = bounds[j];
            actions[(r, j)] = b.center() + b.half() * t;
            tanh_u[(r, j)] = t;
            sigma_eps[(r, j)] = sigma * e;
            log_prob[r] += -0.5 * e * e - ls - HALF_LN_2PI - libm::log(b.half()) - log_one_minus_tanh_sq(u);
        }
    }
    Ok(SquashedSample { actions, log_prob, tanh_u, sigma_eps, clamped })
}

impl SquashedSample {
    /// Gradient w.r.t. the head outputs given upstream gradients on the
    /// actions and on the log-probabilities (noise held fixed).
    pub fn backward(&self, d_actions: &Matrix, d_log_prob: &[f64], bounds: &[Bounds]) -> Matrix {
        let adim = bounds.len();
        let n = self.actions.rows();
        let mut g = Matrix::zeros(n, 2 * adim);
        for r in 0..n {
            for j in 0..adim {
                let t = self.tanh_u[(r, j)];
                let se = self.sigma_eps[(r, j)];
                let da_du = bounds[j].half() * (1.0 - t * t);
                let ga = d_actions[(r, j)];
                let gl = d_log_prob[r];
                // ∂logπ/∂m = 2t, ∂logπ/∂ℓ = −1 + 2t·σε
                g[(r, j)] = ga * da_du + gl * 2.0 * t;
                if !self.clamped[r * adim + j] {
                    g[(r, adim + j)] = ga * da_du * se + gl * (-1.0 + 2.0 * t * se);
                }
            }
        }
        g
    }
}

/// Deterministic action `center + half·tanh(mean)`.
pub fn mean_action(head: &Matrix, bounds: &[Bounds]) -> Matrix {
    let adim = bounds.len();
    Matrix::from_fn(head.rows(), adim, |r, j| bounds[j].center() + bounds[j].half() * libm::tanh(head[(r, j)]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: vec![0.0; n_params], v: vec![0.0; n_params] }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<(), NnError> {
        let lr = self.lr;
        self.step_with_lr(params, grads, lr)
    }

    pub fn step_with_lr(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<(), NnError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return shape(format!("adam state {} vs params {} / grads {}", self.m.len(), params.len(), grads.len()));
        }
        self.step += 1;
        let c1 = 1.0 - libm::pow(self.beta1, self.step as f64);
        let c2 = 1.0 - libm::pow(self.beta2, self.step as f64);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= lr * mhat / (libm::sqrt(vhat) + self.eps);
        }
        Ok(())
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.m, &self.v)
    }

    pub fn from_parts(lr: f64, step: u64, m: Vec<f64>, v: Vec<f64>) -> Result<Self, NnError> {
        if m.len() != v.len() {
            return shape(format!("moment lengths {} and {}", m.len(), v.len()));
        }
        Ok(Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step, m, v })
    }
}

/// `target ← (1 − υ)·target + υ·online`.
pub fn polyak_update(target: &mut [f64], online: &[f64], upsilon: f64) -> Result<(), NnError> {
    if !(0.0..=1.0).contains(&upsilon) {
        return Err(NnError::PolyakRate(upsilon));
    }
    if target.len() != online.len() {
        return shape(format!("target {} vs online {}", target.len(), online.len()));
    }
    if upsilon == 1.0 {
        target.copy_from_slice(online);
        return Ok(());
    }
    for (t, o) in target.iter_mut().zip(online) {
        *t = (1.0 - upsilon) * *t + upsilon * o;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Constant,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub kind: ScheduleKind,
    pub base: f64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn constant(base: f64) -> Self {
        LrSchedule { kind: ScheduleKind::Constant, base, total_steps: 1 }
    }

    pub fn cosine(base: f64, total_steps: u64) -> Self {
        LrSchedule { kind: ScheduleKind::Cosine, base, total_steps }
    }

    /// Steps past `total_steps` stay at the final rate.
    pub fn lr_at(&self, step: u64) -> f64 {
        match self.kind {
            ScheduleKind::Constant => self.base,
            ScheduleKind::Cosine => {
                let total = self.total_steps.max(1);
                let frac = step.min(total) as f64 / total as f64;
                self.base * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * frac))
            }
        }
    }
}

/// Central differences of `f` at `x` with step `h`.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut xs = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = xs[i];
            xs[i] = orig + h;
            let up = f(&xs);
            xs[i] = orig - h;
            let down = f(&xs);
            xs[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `max_i |a_i − b_i| / max(|a_i|, |b_i|, floor)`.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

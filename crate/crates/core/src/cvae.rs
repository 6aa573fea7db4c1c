//! Conditional VAE over behavior actions, used to flag out-of-distribution
//! actions by their reconstruction distance.
//!
//! Encoder: `s ⊕ a → hidden → (μ, log σ²)` with a latent twice the action
//! dimension. Decoder: `s ⊕ z → hidden → â`, clipped to the action bounds.
//! Reconstruction feeds the posterior mean to the decoder, so it is a
//! deterministic function of `(s, a)`.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::linalg::Matrix;
use crate::nn::{Adam, Bounds, Mlp, MlpSpec, NnError};
use crate::rng::{normal, Rng};

/// Hard clamp on the encoder's log-variance output.
pub const LOGVAR_MIN: f64 = -8.0;
pub const LOGVAR_MAX: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CvaeConfig {
    pub hidden: usize,
    pub kl_weight: f64,
    pub lr: f64,
}

impl Default for CvaeConfig {
    fn default() -> Self {
        CvaeConfig { hidden: 750, kl_weight: 0.5, lr: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cvae {
    pub state_dim: usize,
    pub bounds: Vec<Bounds>,
    pub latent_dim: usize,
    pub kl_weight: f64,
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub encoder_opt: Adam,
    pub decoder_opt: Adam,
}

#[derive(Debug, Clone)]
pub struct ElboOutput {
    pub loss: f64,
    /// Mean squared reconstruction error (summed over action dimensions).
    pub recon: f64,
    pub kl: f64,
    pub encoder_grads: Vec<f64>,
    pub decoder_grads: Vec<f64>,
}

fn concat(a: &Matrix, b: &Matrix) -> Matrix {
    Matrix::from_fn(a.rows(), a.cols() + b.cols(), |r, j| if j < a.cols() { a[(r, j)] } else { b[(r, j - a.cols())] })
}

fn shape_err(what: &str) -> NnError {
    NnError::Shape(what.into())
}

impl Cvae {
    /// Fresh model; the decoder's output layer starts at zero, so an
    /// untrained model reconstructs every action as the zero action.
    pub fn new(state_dim: usize, bounds: &[Bounds], config: &CvaeConfig, rng: &mut Rng) -> Self {
        let adim = bounds.len();
        let latent_dim = 2 * adim;
        let encoder = Mlp::new(MlpSpec::new(state_dim + adim, &[config.hidden], 2 * latent_dim), rng);
        let mut decoder = Mlp::new(MlpSpec::new(state_dim + latent_dim, &[config.hidden], adim), rng);
        decoder.zero_output_layer();
        let encoder_opt = Adam::new(encoder.n_params(), config.lr);
        let decoder_opt = Adam::new(decoder.n_params(), config.lr);
        Cvae { state_dim, bounds: bounds.to_vec(), latent_dim, kl_weight: config.kl_weight, encoder, decoder, encoder_opt, decoder_opt }
    }

    pub fn action_dim(&self) -> usize {
        self.bounds.len()
    }

    fn check(&self, states: &Matrix, actions: &Matrix) -> Result<(), NnError> {
        if states.cols() != self.state_dim || actions.cols() != self.action_dim() || states.rows() != actions.rows() {
            return Err(shape_err("state/action batch does not match the model"));
        }
        Ok(())
    }

    fn clip(&self, raw: &mut Matrix) -> Vec<bool> {
        let adim = self.action_dim();
        let mut clipped = Vec::with_capacity(raw.rows() * adim);
        for r in 0..raw.rows() {
            for (j, v) in raw.row_mut(r).iter_mut().enumerate() {
                let c = self.bounds[j].clip(*v);
                clipped.push(c != *v);
                *v = c;
            }
        }
        clipped
    }

    /// `f_cvae(s, a)`: decode the posterior mean.
    pub fn reconstruct(&self, states: &Matrix, actions: &Matrix) -> Result<Matrix, NnError> {
        self.check(states, actions)?;
        let enc = self.encoder.forward(&concat(states, actions))?;
        let mu = Matrix::from_fn(enc.rows(), self.latent_dim, |r, j| enc[(r, j)]);
        let mut out = self.decoder.forward(&concat(states, &mu))?;
        self.clip(&mut out);
        Ok(out)
    }

    /// `‖a − f_cvae(s, a)‖₂` per row.
    pub fn distances(&self, states: &Matrix, actions: &Matrix) -> Result<Vec<f64>, NnError> {
        let rec = self.reconstruct(states, actions)?;
        Ok((0..rec.rows())
            .map(|r| rec.row(r).iter().zip(actions.row(r)).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()).map(libm::sqrt)
            .collect())
    }

    /// Batch-mean of `‖a − â‖² + kl_weight·KL(q(z|s,a) ‖ N(0, I))`, with
    /// `z = μ + σ·eps` for the supplied standard-normal `eps`.
    pub fn elbo(&self, states: &Matrix, actions: &Matrix, eps: &Matrix, kl_weight: f64) -> Result<ElboOutput, NnError> {
        self.check(states, actions)?;
        let n = states.rows();
        let l = self.latent_dim;
        if eps.rows() != n || eps.cols() != l {
            return Err(shape_err("latent noise has the wrong shape"));
        }
        let (enc, enc_cache) = self.encoder.forward_cached(&concat(states, actions))?;
        let mut z = Matrix::zeros(n, l);
        let mut sigma = Matrix::zeros(n, l);
        let mut kl = 0.0;
        for r in 0..n {
            for j in 0..l {
                let mu = enc[(r, j)];
                let lv = enc[(r, l + j)].clamp(LOGVAR_MIN, LOGVAR_MAX);
                let s = libm::exp(0.5 * lv);
                sigma[(r, j)] = s;
                z[(r, j)] = mu + s * eps[(r, j)];
                kl += -0.5 * (1.0 + lv - mu * mu - s * s);
            }
        }
        let (mut out, dec_cache) = self.decoder.forward_cached(&concat(states, &z))?;
        let clipped = self.clip(&mut out);
        let inv_n = 1.0 / n as f64;
        let mut recon = 0.0;
        let mut g_out = Matrix::zeros(n, self.action_dim());
        for r in 0..n {
            for j in 0..self.action_dim() {
                let d = out[(r, j)] - actions[(r, j)];
                recon += d * d;
                if !clipped[r * self.action_dim() + j] {
                    g_out[(r, j)] = 2.0 * d * inv_n;
                }
            }
        }
        let mut decoder_grads = vec![0.0; self.decoder.n_params()];
        let g_in = self.decoder.backward(&dec_cache, &g_out, &mut decoder_grads)?;
        let mut g_enc = Matrix::zeros(n, 2 * l);
        for r in 0..n {
            for j in 0..l {
                let gz = g_in[(r, self.state_dim + j)];
                let mu = enc[(r, j)];
                let raw_lv = enc[(r, l + j)];
                let s = sigma[(r, j)];
                g_enc[(r, j)] = gz + kl_weight * mu * inv_n;
                if (LOGVAR_MIN..=LOGVAR_MAX).contains(&raw_lv) {
                    g_enc[(r, l + j)] = gz * 0.5 * s * eps[(r, j)] + kl_weight * 0.5 * (s * s - 1.0) * inv_n;
                }
            }
        }
        let mut encoder_grads = vec![0.0; self.encoder.n_params()];
        self.encoder.backward(&enc_cache, &g_enc, &mut encoder_grads)?;
        let recon = recon * inv_n;
        let kl = kl * inv_n;
        Ok(ElboOutput { loss: recon + kl_weight * kl, recon, kl, encoder_grads, decoder_grads })
    }

    /// One Adam step on the ELBO; returns the loss before the step.
    pub fn train_step(&mut self, states: &Matrix, actions: &Matrix, rng: &mut Rng) -> Result<f64, NnError> {
        let eps = Matrix::from_fn(states.rows(), self.latent_dim, |_, _| normal(rng));
        let out = self.elbo(states, actions, &eps, self.kl_weight)?;
        self.encoder_opt.step(self.encoder.params_mut(), &out.encoder_grads)?;
        self.decoder_opt.step(self.decoder.params_mut(), &out.decoder_grads)?;
        Ok(out.loss)
    }
}

/// Running mean `δ` of reconstruction distances.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct OodThreshold {
    pub delta: f64,
    pub sum: f64,
    pub count: u64,
}

impl OodThreshold {
    pub fn new() -> Self {
        Self::default()
    }

    /// Fold a batch of distances into the cumulative mean.
    pub fn update(&mut self, distances: &[f64]) {
        for &d in distances {
            self.sum += d;
            self.count += 1;
        }
        if self.count > 0 {
            self.delta = self.sum / self.count as f64;
        }
    }

    /// `δ` from a full pass of a frozen model over `(states, actions)`,
    /// evaluated in chunks of `chunk` rows.
    pub fn from_pass(model: &Cvae, states: &Matrix, actions: &Matrix, chunk: usize) -> Result<Self, NnError> {
        let mut t = OodThreshold::new();
        let n = states.rows();
        let chunk = chunk.max(1);
        let mut start = 0;
        while start < n {
            let end = (start + chunk).min(n);
            let s = Matrix::from_fn(end - start, states.cols(), |r, j| states[(start + r, j)]);
            let a = Matrix::from_fn(end - start, actions.cols(), |r, j| actions[(start + r, j)]);
            t.update(&model.distances(&s, &a)?);
            start = end;
        }
        Ok(t)
    }

    /// Inclusive: a distance equal to `δ` counts as OOD.
    #[inline]
    pub fn is_ood_distance(&self, distance: f64) -> bool {
        distance >= self.delta
    }
}

/// Whether each `(s, a)` row is out of distribution under `threshold`.
pub fn is_ood(model: &Cvae, threshold: &OodThreshold, states: &Matrix, actions: &Matrix) -> Result<Vec<bool>, NnError> {
    Ok(model.distances(states, actions)?.into_iter().map(|d| threshold.is_ood_distance(d)).collect())
}

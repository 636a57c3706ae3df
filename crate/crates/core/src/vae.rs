//! VAE memory network for generative replay: ELBO training by manual
//! backprop through the reparameterization, prior sampling, and
//! pseudo-labeling of generated samples with the classifier.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{self, Batch, Gradient, LossValue, ModelParams, PROB_EPS};
use crate::sampling::standard_normals;
use crate::seeds;

/// Encoder/decoder pair. The encoder maps inputs to `(μ, log σ²)` (a linear
/// head of width `2·latent_dim`); the decoder maps latents to sigmoid pixel
/// intensities.
#[derive(Debug, Clone, PartialEq)]
pub struct VaeParams {
    encoder: ModelParams,
    decoder: ModelParams,
    latent_dim: usize,
    learning_rate: f64,
}

/// Generated features with labels assigned by [`pseudo_label`].
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoBatch {
    pub features: Matrix,
    pub labels: Vec<usize>,
}

impl PseudoBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn to_batch(&self) -> Result<Batch> {
        Batch::new(self.features.clone(), self.labels.clone())
    }
}

impl VaeParams {
    pub fn init(
        input_dim: usize,
        hidden_dim: usize,
        latent_dim: usize,
        learning_rate: f64,
        seed: u64,
    ) -> Result<Self> {
        if latent_dim == 0 {
            return Err(Error::InvalidArgument("latent_dim must be positive".into()));
        }
        let encoder = ModelParams::init(
            &[input_dim, hidden_dim, 2 * latent_dim],
            learning_rate,
            0.0,
            seeds::derive(seed, &[1]),
        )?;
        let decoder = ModelParams::init(
            &[latent_dim, hidden_dim, input_dim],
            learning_rate,
            0.0,
            seeds::derive(seed, &[2]),
        )?;
        Self::new(encoder, decoder, latent_dim, learning_rate)
    }

    pub fn new(
        encoder: ModelParams,
        decoder: ModelParams,
        latent_dim: usize,
        learning_rate: f64,
    ) -> Result<Self> {
        if encoder.output_dim() != 2 * latent_dim {
            return Err(Error::shape("VaeParams encoder head", 2 * latent_dim, encoder.output_dim()));
        }
        if decoder.input_dim() != latent_dim {
            return Err(Error::shape("VaeParams decoder input", latent_dim, decoder.input_dim()));
        }
        if decoder.output_dim() != encoder.input_dim() {
            return Err(Error::shape(
                "VaeParams decoder output",
                encoder.input_dim(),
                decoder.output_dim(),
            ));
        }
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be non-negative, got {learning_rate}"
            )));
        }
        Ok(VaeParams {
            encoder,
            decoder,
            latent_dim,
            learning_rate,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn encoder(&self) -> &ModelParams {
        &self.encoder
    }

    pub fn decoder(&self) -> &ModelParams {
        &self.decoder
    }

    /// ELBO (reconstruction BCE + KL to the standard normal) with
    /// reparameterization noise drawn from `seed`.
    pub fn elbo_loss(&self, batch: &Batch, seed: u64) -> Result<LossValue> {
        if batch.is_empty() {
            return Ok(LossValue::empty_batch());
        }
        let pass = self.run(batch.features(), seed)?;
        LossValue::new(pass.loss)
    }

    /// Analytic ELBO gradients for encoder and decoder, with the
    /// reparameterization noise frozen by `seed`.
    pub fn elbo_gradients(&self, batch: &Batch, seed: u64) -> Result<(Gradient, Gradient)> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("vae gradients need a non-empty batch".into()));
        }
        let x = batch.features();
        let pass = self.run(x, seed)?;
        let n = x.rows() as f64;

        // d(recon)/d(decoder pre-sigmoid) = (x_hat - x) / n.
        let mut d_dec = pass.x_hat.clone();
        for (d, &t) in d_dec.data_mut().iter_mut().zip(x.data()) {
            *d = (*d - t) / n;
        }
        let (g_dec, d_z) = nn::backward_raw(&self.decoder, &pass.dec_cache, &d_dec)?;

        // Route dL/dz through the reparameterization and add the KL terms.
        let rows = x.rows();
        let l = self.latent_dim;
        let mut d_enc_out = Matrix::zeros(rows, 2 * l);
        for i in 0..rows {
            let mu = pass.mu.row(i);
            let lv = pass.log_var.row(i);
            let eps = pass.eps.row(i);
            let dz = d_z.row(i);
            let out = d_enc_out.row_mut(i);
            for j in 0..l {
                out[j] = dz[j] + mu[j] / n;
                out[l + j] = dz[j] * 0.5 * (lv[j] / 2.0).exp() * eps[j]
                    - 0.5 * (1.0 - lv[j].exp()) / n;
            }
        }
        let (g_enc, _) = nn::backward_raw(&self.encoder, &pass.enc_cache, &d_enc_out)?;
        Ok((g_enc, g_dec))
    }

    /// One SGD step on the ELBO; returns updated parameters, leaving `self`
    /// untouched.
    pub fn train_step(&self, batch: &Batch, seed: u64) -> Result<VaeParams> {
        let (g_enc, g_dec) = self.elbo_gradients(batch, seed)?;
        let encoder = self.apply(&self.encoder, &g_enc)?;
        let decoder = self.apply(&self.decoder, &g_dec)?;
        VaeParams::new(encoder, decoder, self.latent_dim, self.learning_rate)
    }

    fn apply(&self, params: &ModelParams, grad: &Gradient) -> Result<ModelParams> {
        let values: Vec<f64> = params
            .flat()
            .iter()
            .zip(grad.flat())
            .map(|(v, g)| v - self.learning_rate * g)
            .collect();
        ModelParams::from_flat(
            params.layer_shapes().to_vec(),
            values,
            params.learning_rate(),
            params.dropout_rate(),
        )
    }

    /// Decodes `n` latent draws from the standard-normal prior. Outputs are
    /// clamped to `[0, 1]` and deterministic per seed.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Matrix> {
        if n == 0 {
            return Ok(Matrix::empty(self.input_dim()));
        }
        let mut rng = seeds::rng(seed, &[seeds::tag::VAE_SAMPLE]);
        let z = standard_normals(n, self.latent_dim, &mut rng);
        let dec = nn::forward_raw(&self.decoder, &z, nn::OutputHead::Sigmoid, None)?;
        let mut out = dec.output;
        for v in out.data_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        Ok(out)
    }

    fn run(&self, x: &Matrix, seed: u64) -> Result<VaePass> {
        let enc_cache = nn::forward_raw(&self.encoder, x, nn::OutputHead::Linear, None)?;
        let rows = x.rows();
        let l = self.latent_dim;
        let mut mu = Matrix::zeros(rows, l);
        let mut log_var = Matrix::zeros(rows, l);
        for i in 0..rows {
            let out = enc_cache.output.row(i);
            mu.row_mut(i).copy_from_slice(&out[..l]);
            log_var.row_mut(i).copy_from_slice(&out[l..]);
        }
        let mut rng = seeds::rng(seed, &[seeds::tag::VAE_NOISE]);
        let eps = standard_normals(rows, l, &mut rng);
        let mut z = Matrix::zeros(rows, l);
        for i in 0..rows {
            let (m, v, e) = (mu.row(i), log_var.row(i), eps.row(i));
            let zr = z.row_mut(i);
            for j in 0..l {
                zr[j] = m[j] + (v[j] / 2.0).exp() * e[j];
            }
        }
        let dec_cache = nn::forward_raw(&self.decoder, &z, nn::OutputHead::Sigmoid, None)?;
        let x_hat = dec_cache.output.clone();

        let recon = reconstruction_bce(&x_hat, x);
        let kl = (0..rows)
            .map(|i| kl_divergence(mu.row(i), log_var.row(i)))
            .sum::<f64>()
            / rows as f64;
        let loss = recon + kl;
        if !loss.is_finite() {
            return Err(Error::NonFinite("elbo"));
        }
        Ok(VaePass {
            enc_cache,
            dec_cache,
            mu,
            log_var,
            eps,
            x_hat,
            loss,
        })
    }
}

struct VaePass {
    enc_cache: nn::RawCache,
    dec_cache: nn::RawCache,
    mu: Matrix,
    log_var: Matrix,
    eps: Matrix,
    x_hat: Matrix,
    loss: f64,
}

/// Per-pixel binary cross-entropy summed over pixels, averaged over the
/// batch. Zero rows yield zero.
pub fn reconstruction_bce(x_hat: &Matrix, x: &Matrix) -> f64 {
    debug_assert_eq!(x_hat.rows(), x.rows());
    debug_assert_eq!(x_hat.cols(), x.cols());
    if x.rows() == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for (&p, &t) in x_hat.data().iter().zip(x.data()) {
        total += -t * p.max(PROB_EPS).ln() - (1.0 - t) * (1.0 - p).max(PROB_EPS).ln();
    }
    total / x.rows() as f64
}

/// `KL(N(μ, σ²) ‖ N(0, I)) = −½ Σ (1 + log σ² − μ² − σ²)` for one sample.
pub fn kl_divergence(mu: &[f64], log_var: &[f64]) -> f64 {
    debug_assert_eq!(mu.len(), log_var.len());
    -0.5 * mu
        .iter()
        .zip(log_var)
        .map(|(m, lv)| 1.0 + lv - m * m - lv.exp())
        .sum::<f64>()
}

/// Labels `features` with the classifier's eval-mode argmax; ties break
/// toward the lowest class index.
pub fn pseudo_label(classifier: &ModelParams, features: &Matrix) -> Result<PseudoBatch> {
    let cache = nn::forward_raw(classifier, features, nn::OutputHead::Softmax, None)?;
    let labels = cache
        .output
        .iter_rows()
        .map(|row| {
            let mut best = 0;
            for (c, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect();
    Ok(PseudoBatch {
        features: features.clone(),
        labels,
    })
}

/// Writes one grayscale image as a binary PGM (P5) file.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[f64]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::shape("write_pgm", width * height, pixels.len()));
    }
    let mut out = Vec::with_capacity(pixels.len() + 32);
    write!(out, "P5\n{width} {height}\n255\n")?;
    out.extend(pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    std::fs::write(path, out)?;
    Ok(())
}

//! Twin cross-modal VAE and its loss terms.
//!
//! A [`CadaVae`] couples a visual encoder/decoder pair with an attribute
//! encoder/decoder pair through a shared latent space. Training minimizes
//!
//! ```text
//! L = L_Re + beta * L_KL + gamma * L_CA + delta * L_DA + alpha * L_KD
//! ```
//!
//! where `L_Re` is the within-modality reconstruction error, `L_KL` the KL
//! divergence of both latents to the standard normal, `L_CA` the
//! cross-reconstruction error (attribute decoded from the visual latent and
//! vice versa), `L_DA` the 2-Wasserstein distance between the two diagonal
//! Gaussian latents, and `L_KD` the dark-knowledge distillation term against
//! statistics stored in replay memory. Batch assembly, the analytic
//! gradients, and the optimizer wrapper live in [`step`] (re-exported here).

mod step;

pub use step::{
    loss_and_grads, total_loss, total_loss_with_noise, BatchItem, CadaGradients, CadaOptimizer,
    LossBreakdown,
};

use alloc::vec::Vec;

use rand::Rng;

use crate::nn::{Activation, DenseNet, NnError};
use crate::rng::standard_normal_vec;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

/// Log-variances are clamped to this magnitude before exponentiation so the
/// derived variance can never overflow or reach zero.
pub const LOG_VAR_CLAMP: f64 = 60.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum VaeError {
    #[error("latent dimensions differ: {0} vs {1}")]
    LatentDimMismatch(usize, usize),
    #[error("mean and log_var lengths differ: {0} vs {1}")]
    HeadShape(usize, usize),
    #[error("non-finite latent statistics")]
    NonFiniteLatent,
    #[error("vector lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("encoder output width {got} is not twice the latent dimension {latent}")]
    EncoderHead { latent: usize, got: usize },
    #[error("decoder {side} input width {got} does not match latent dimension {latent}")]
    DecoderInput { side: &'static str, latent: usize, got: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("noise vector count {got} does not match batch size {expected}")]
    NoiseCount { expected: usize, got: usize },
    #[error("invalid loss weights: {0}")]
    InvalidWeights(&'static str),
    #[error(transparent)]
    Nn(#[from] NnError),
}

fn clamp_log_var(v: f64) -> f64 {
    v.clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP)
}

/// Diagonal Gaussian over the latent space: mean and log-variance vectors.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct GaussianLatent {
    mean: Vec<f64>,
    log_var: Vec<f64>,
}

impl GaussianLatent {
    /// Builds a latent, clamping log-variances into `[-LOG_VAR_CLAMP,
    /// LOG_VAR_CLAMP]`.
    pub fn new(mean: Vec<f64>, log_var: Vec<f64>) -> Result<Self, VaeError> {
        if mean.len() != log_var.len() {
            return Err(VaeError::HeadShape(mean.len(), log_var.len()));
        }
        if mean.iter().chain(&log_var).any(|v| !v.is_finite()) {
            return Err(VaeError::NonFiniteLatent);
        }
        let log_var = log_var.into_iter().map(clamp_log_var).collect();
        Ok(Self { mean, log_var })
    }

    /// Splits a `2 * d_z` encoder head output into mean and log-variance.
    pub fn from_head(head: &[f64]) -> Result<Self, VaeError> {
        if head.len() % 2 != 0 {
            return Err(VaeError::HeadShape(head.len() / 2, head.len() - head.len() / 2));
        }
        let d = head.len() / 2;
        Self::new(head[..d].to_vec(), head[d..].to_vec())
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn log_var(&self) -> &[f64] {
        &self.log_var
    }

    /// Per-dimension standard deviation `exp(0.5 * log_var)`.
    pub fn std(&self) -> Vec<f64> {
        self.log_var.iter().map(|&v| libm::exp(0.5 * v)).collect()
    }

    /// Per-dimension variance `exp(log_var)`.
    pub fn var(&self) -> Vec<f64> {
        self.log_var.iter().map(|&v| libm::exp(v)).collect()
    }
}

/// Encoder statistics of one sample, captured at replay-insertion time and
/// never refreshed.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct DarkKnowledge {
    pub visual: GaussianLatent,
    pub attribute: GaussianLatent,
}

impl DarkKnowledge {
    pub fn dim(&self) -> usize {
        self.visual.dim()
    }
}

/// Network dimensions for [`CadaVae::init`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelDims {
    pub feature_dim: usize,
    pub attribute_dim: usize,
    pub latent_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
}

/// The four-network model: visual/attribute encoders and decoders sharing a
/// latent space of dimension `latent_dim`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct CadaVae {
    pub visual_encoder: DenseNet,
    pub attribute_encoder: DenseNet,
    pub visual_decoder: DenseNet,
    pub attribute_decoder: DenseNet,
    latent_dim: usize,
}

impl CadaVae {
    pub fn new(
        visual_encoder: DenseNet,
        attribute_encoder: DenseNet,
        visual_decoder: DenseNet,
        attribute_decoder: DenseNet,
        latent_dim: usize,
    ) -> Result<Self, VaeError> {
        for enc in [&visual_encoder, &attribute_encoder] {
            if enc.output_dim() != 2 * latent_dim {
                return Err(VaeError::EncoderHead { latent: latent_dim, got: enc.output_dim() });
            }
        }
        if visual_decoder.input_dim() != latent_dim {
            return Err(VaeError::DecoderInput {
                side: "visual",
                latent: latent_dim,
                got: visual_decoder.input_dim(),
            });
        }
        if attribute_decoder.input_dim() != latent_dim {
            return Err(VaeError::DecoderInput {
                side: "attribute",
                latent: latent_dim,
                got: attribute_decoder.input_dim(),
            });
        }
        if visual_decoder.output_dim() != visual_encoder.input_dim() {
            return Err(VaeError::LengthMismatch(
                visual_decoder.output_dim(),
                visual_encoder.input_dim(),
            ));
        }
        if attribute_decoder.output_dim() != attribute_encoder.input_dim() {
            return Err(VaeError::LengthMismatch(
                attribute_decoder.output_dim(),
                attribute_encoder.input_dim(),
            ));
        }
        Ok(Self { visual_encoder, attribute_encoder, visual_decoder, attribute_decoder, latent_dim })
    }

    /// Glorot-initialized model. Encoder heads and decoder outputs are
    /// identity; hidden layers are relu.
    pub fn init<R: Rng + ?Sized>(dims: &ModelDims, rng: &mut R) -> Result<Self, VaeError> {
        let chain = |input: usize, hidden: &[usize], output: usize| {
            let mut v = Vec::with_capacity(hidden.len() + 2);
            v.push(input);
            v.extend_from_slice(hidden);
            v.push(output);
            v
        };
        let visual_encoder = DenseNet::glorot_uniform(
            &chain(dims.feature_dim, &dims.encoder_hidden, 2 * dims.latent_dim),
            Activation::Identity,
            rng,
        )?;
        let attribute_encoder = DenseNet::glorot_uniform(
            &chain(dims.attribute_dim, &dims.encoder_hidden, 2 * dims.latent_dim),
            Activation::Identity,
            rng,
        )?;
        let visual_decoder = DenseNet::glorot_uniform(
            &chain(dims.latent_dim, &dims.decoder_hidden, dims.feature_dim),
            Activation::Identity,
            rng,
        )?;
        let attribute_decoder = DenseNet::glorot_uniform(
            &chain(dims.latent_dim, &dims.decoder_hidden, dims.attribute_dim),
            Activation::Identity,
            rng,
        )?;
        Self::new(visual_encoder, attribute_encoder, visual_decoder, attribute_decoder, dims.latent_dim)
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.visual_encoder.input_dim()
    }

    pub fn attribute_dim(&self) -> usize {
        self.attribute_encoder.input_dim()
    }

    pub fn is_finite(&self) -> bool {
        self.visual_encoder.is_finite()
            && self.attribute_encoder.is_finite()
            && self.visual_decoder.is_finite()
            && self.attribute_decoder.is_finite()
    }

    /// Visual latent `(mu, log_var)` for feature vector `x`.
    pub fn encode_visual(&self, x: &[f64]) -> Result<GaussianLatent, VaeError> {
        let (out, _) = self.visual_encoder.forward(x)?;
        GaussianLatent::from_head(&out)
    }

    /// Attribute latent `(mu, log_var)` for attribute vector `a`.
    pub fn encode_attribute(&self, a: &[f64]) -> Result<GaussianLatent, VaeError> {
        let (out, _) = self.attribute_encoder.forward(a)?;
        GaussianLatent::from_head(&out)
    }
}

/// Per-item reparameterization noise: one epsilon vector per encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ReparamNoise {
    pub visual: Vec<f64>,
    pub attribute: Vec<f64>,
}

impl ReparamNoise {
    pub fn draw<R: Rng + ?Sized>(latent_dim: usize, rng: &mut R) -> Self {
        Self {
            visual: standard_normal_vec(rng, latent_dim),
            attribute: standard_normal_vec(rng, latent_dim),
        }
    }

    pub fn draw_batch<R: Rng + ?Sized>(latent_dim: usize, n: usize, rng: &mut R) -> Vec<Self> {
        (0..n).map(|_| Self::draw(latent_dim, rng)).collect()
    }
}

/// `z = mean + exp(0.5 * log_var) * eps` with fresh standard-normal noise.
pub fn reparameterize<R: Rng + ?Sized>(g: &GaussianLatent, rng: &mut R) -> Vec<f64> {
    let eps = standard_normal_vec(rng, g.dim());
    reparameterize_with(g, &eps)
}

/// `z = mean + exp(0.5 * log_var) * eps` for a fixed noise vector.
pub fn reparameterize_with(g: &GaussianLatent, eps: &[f64]) -> Vec<f64> {
    debug_assert_eq!(eps.len(), g.dim());
    g.mean
        .iter()
        .zip(&g.log_var)
        .zip(eps)
        .map(|((&m, &lv), &e)| m + libm::exp(0.5 * lv) * e)
        .collect()
}

/// `-0.5 * sum(1 + log_var - mean^2 - exp(log_var))`, the KL divergence of
/// the latent to the standard normal.
pub fn kl_loss(g: &GaussianLatent) -> f64 {
    let mut acc = 0.0;
    for (&m, &lv) in g.mean.iter().zip(&g.log_var) {
        acc += 1.0 + lv - m * m - libm::exp(lv);
    }
    -0.5 * acc
}

/// Mean absolute error between a target and its reconstruction.
pub fn reconstruction_loss(target: &[f64], reconstruction: &[f64]) -> Result<f64, VaeError> {
    if target.len() != reconstruction.len() {
        return Err(VaeError::LengthMismatch(target.len(), reconstruction.len()));
    }
    let sum: f64 = target
        .iter()
        .zip(reconstruction)
        .map(|(&t, &r)| libm::fabs(t - r))
        .sum();
    Ok(sum / target.len() as f64)
}

fn l1_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| libm::fabs(x - y)).sum()
}

/// 2-Wasserstein distance between diagonal Gaussians:
/// `sqrt(||mu_a - mu_v||_2^2 + ||sigma_a - sigma_v||_2^2)`.
pub fn distribution_alignment_loss(
    gv: &GaussianLatent,
    ga: &GaussianLatent,
) -> Result<f64, VaeError> {
    if gv.dim() != ga.dim() {
        return Err(VaeError::LatentDimMismatch(gv.dim(), ga.dim()));
    }
    let mut acc = 0.0;
    for i in 0..gv.dim() {
        let dm = ga.mean[i] - gv.mean[i];
        let ds = libm::exp(0.5 * ga.log_var[i]) - libm::exp(0.5 * gv.log_var[i]);
        acc += dm * dm + ds * ds;
    }
    Ok(libm::sqrt(acc))
}

/// Dark-knowledge distillation term:
/// `||mu_attr - mu_attr_stored||_1 + ||var_vis - var_vis_stored||_1`.
///
/// Variances are compared in variance space. With `symmetric` the mirrored
/// `||mu_vis - mu_vis_stored||_1 + ||var_attr - var_attr_stored||_1` terms
/// are added as well.
pub fn dark_kd_loss(
    current_attribute: &GaussianLatent,
    current_visual: &GaussianLatent,
    stored: &DarkKnowledge,
    symmetric: bool,
) -> Result<f64, VaeError> {
    if current_attribute.dim() != stored.attribute.dim() {
        return Err(VaeError::LatentDimMismatch(current_attribute.dim(), stored.attribute.dim()));
    }
    if current_visual.dim() != stored.visual.dim() {
        return Err(VaeError::LatentDimMismatch(current_visual.dim(), stored.visual.dim()));
    }
    let mut loss = l1_distance(current_attribute.mean(), stored.attribute.mean())
        + l1_distance(&current_visual.var(), &stored.visual.var());
    if symmetric {
        loss += l1_distance(current_visual.mean(), stored.visual.mean())
            + l1_distance(&current_attribute.var(), &stored.attribute.var());
    }
    Ok(loss)
}

/// Cross-reconstruction loss
/// `||a - D_attr(z_vis)||_1 + ||x - D_vis(z_attr)||_1` with each latent
/// sampled through the reparameterization trick (or taken at the mean when
/// `use_mean`).
pub fn cross_alignment_loss<R: Rng + ?Sized>(
    model: &CadaVae,
    x: &[f64],
    a: &[f64],
    rng: &mut R,
) -> Result<f64, VaeError> {
    let noise = ReparamNoise::draw(model.latent_dim(), rng);
    cross_alignment_loss_with_noise(model, x, a, &noise, false)
}

/// Deterministic [`cross_alignment_loss`] for a fixed noise vector.
pub fn cross_alignment_loss_with_noise(
    model: &CadaVae,
    x: &[f64],
    a: &[f64],
    noise: &ReparamNoise,
    use_mean: bool,
) -> Result<f64, VaeError> {
    let gv = model.encode_visual(x)?;
    let ga = model.encode_attribute(a)?;
    let zv = if use_mean { gv.mean().to_vec() } else { reparameterize_with(&gv, &noise.visual) };
    let za = if use_mean { ga.mean().to_vec() } else { reparameterize_with(&ga, &noise.attribute) };
    let (a_cross, _) = model.attribute_decoder.forward(&zv)?;
    let (x_cross, _) = model.visual_decoder.forward(&za)?;
    Ok(l1_distance(a, &a_cross) + l1_distance(x, &x_cross))
}

/// One loss weight with an optional linear warm-up over optimizer steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightSchedule {
    pub base: f64,
    /// `(start_step, end_step)`: factor 0 before `start`, 1 after `end`.
    pub warmup: Option<(u64, u64)>,
}

impl WeightSchedule {
    pub fn constant(base: f64) -> Self {
        Self { base, warmup: None }
    }

    pub fn warmed(base: f64, start: u64, end: u64) -> Self {
        Self { base, warmup: Some((start, end)) }
    }

    /// Effective weight at `step`; the warm-up factor is clamped to [0, 1]
    /// and non-decreasing in `step`.
    pub fn resolve(&self, step: u64) -> f64 {
        match self.warmup {
            None => self.base,
            Some((start, end)) => {
                let factor = if step <= start {
                    0.0
                } else if step >= end {
                    1.0
                } else {
                    (step - start) as f64 / (end - start) as f64
                };
                self.base * factor
            }
        }
    }

    fn validate(&self, name: &'static str) -> Result<(), VaeError> {
        if !(self.base.is_finite() && self.base >= 0.0) {
            return Err(VaeError::InvalidWeights(name));
        }
        if let Some((start, end)) = self.warmup {
            if end <= start {
                return Err(VaeError::InvalidWeights(name));
            }
        }
        Ok(())
    }
}

/// The four weighting factors of the training loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// KL weight.
    pub beta: WeightSchedule,
    /// Cross-alignment weight.
    pub gamma: WeightSchedule,
    /// Distribution-alignment weight.
    pub delta: WeightSchedule,
    /// Dark-knowledge distillation weight.
    pub alpha: WeightSchedule,
}

impl LossWeights {
    pub fn constant(beta: f64, gamma: f64, delta: f64, alpha: f64) -> Self {
        Self {
            beta: WeightSchedule::constant(beta),
            gamma: WeightSchedule::constant(gamma),
            delta: WeightSchedule::constant(delta),
            alpha: WeightSchedule::constant(alpha),
        }
    }

    pub fn validate(&self) -> Result<(), VaeError> {
        self.beta.validate("beta")?;
        self.gamma.validate("gamma")?;
        self.delta.validate("delta")?;
        self.alpha.validate("alpha")
    }

    pub fn resolve(&self, step: u64) -> ResolvedWeights {
        ResolvedWeights {
            beta: self.beta.resolve(step),
            gamma: self.gamma.resolve(step),
            delta: self.delta.resolve(step),
            alpha: self.alpha.resolve(step),
        }
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::constant(1.0, 1.0, 1.0, 1.0)
    }
}

/// Weights resolved at a concrete optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResolvedWeights {
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    pub alpha: f64,
}

/// Loss weights plus the variant flags of the cross and KD terms.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossConfig {
    pub weights: LossWeights,
    /// Adds the mirrored mean/variance pair to the KD term.
    pub kd_symmetric: bool,
    /// Uses the latent mean instead of a sample on the cross paths.
    pub ca_use_mean: bool,
}

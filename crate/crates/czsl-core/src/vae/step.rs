//! Batch loss assembly, analytic gradients, and the model optimizer.
//!
//! The objective over a batch is
//!
//! ```text
//! L = mean_i(Re_i) + beta * mean_i(KL_i) + gamma * mean_i(CA_i)
//!   + delta * mean_i(DA_i) + alpha * mean_{i in replayed}(KD_i)
//! ```
//!
//! The KD mean runs over replayed items only (those carrying stored dark
//! knowledge) and is zero when there are none or when the resolved alpha is
//! zero. Gradients are exact for this computation graph with the
//! reparameterization noise held fixed; the test suites check every
//! parameter of all four networks against central finite differences.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::nn::{adam_step, AdamParams, AdamState, ForwardCache, NetGradients, NnError};

use super::{
    kl_loss, reconstruction_loss, reparameterize_with, CadaVae, DarkKnowledge, GaussianLatent,
    LossConfig, ReparamNoise, ResolvedWeights, VaeError, LOG_VAR_CLAMP,
};

/// Distribution-alignment gradients are treated as zero below this distance
/// (the metric is non-differentiable at coinciding Gaussians).
const DA_GRAD_EPS: f64 = 1e-12;

/// One training example: a feature/attribute pair plus the stored dark
/// knowledge when the item was drawn from replay memory.
#[derive(Debug, Clone, Copy)]
pub struct BatchItem<'a> {
    pub features: &'a [f64],
    pub attributes: &'a [f64],
    pub dark: Option<&'a DarkKnowledge>,
}

/// Batch-averaged unweighted loss terms plus the weighted total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub reconstruction: f64,
    pub kl: f64,
    pub cross_alignment: f64,
    pub distribution_alignment: f64,
    pub dark_kd: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn zero() -> Self {
        Self {
            reconstruction: 0.0,
            kl: 0.0,
            cross_alignment: 0.0,
            distribution_alignment: 0.0,
            dark_kd: 0.0,
            total: 0.0,
        }
    }

    fn combine(re: f64, kl: f64, ca: f64, da: f64, kd: f64, w: ResolvedWeights) -> Self {
        Self {
            reconstruction: re,
            kl,
            cross_alignment: ca,
            distribution_alignment: da,
            dark_kd: kd,
            total: re + w.beta * kl + w.gamma * ca + w.delta * da + w.alpha * kd,
        }
    }

    /// Mean of `items`, used for phase- and epoch-level reporting.
    pub fn mean_of(items: &[LossBreakdown]) -> Self {
        if items.is_empty() {
            return Self::zero();
        }
        let n = items.len() as f64;
        let mut acc = Self::zero();
        for b in items {
            acc.reconstruction += b.reconstruction;
            acc.kl += b.kl;
            acc.cross_alignment += b.cross_alignment;
            acc.distribution_alignment += b.distribution_alignment;
            acc.dark_kd += b.dark_kd;
            acc.total += b.total;
        }
        acc.reconstruction /= n;
        acc.kl /= n;
        acc.cross_alignment /= n;
        acc.distribution_alignment /= n;
        acc.dark_kd /= n;
        acc.total /= n;
        acc
    }
}

/// Gradients for all four networks of a [`CadaVae`].
#[derive(Debug, Clone)]
pub struct CadaGradients {
    pub visual_encoder: NetGradients,
    pub attribute_encoder: NetGradients,
    pub visual_decoder: NetGradients,
    pub attribute_decoder: NetGradients,
}

impl CadaGradients {
    pub fn zeros_like(model: &CadaVae) -> Self {
        Self {
            visual_encoder: NetGradients::zeros_like(&model.visual_encoder),
            attribute_encoder: NetGradients::zeros_like(&model.attribute_encoder),
            visual_decoder: NetGradients::zeros_like(&model.visual_decoder),
            attribute_decoder: NetGradients::zeros_like(&model.attribute_decoder),
        }
    }
}

/// Adam states for the four networks, stepped in lockstep.
#[derive(Debug, Clone)]
pub struct CadaOptimizer {
    visual_encoder: AdamState,
    attribute_encoder: AdamState,
    visual_decoder: AdamState,
    attribute_decoder: AdamState,
}

impl CadaOptimizer {
    pub fn new(model: &CadaVae, params: AdamParams) -> Self {
        Self {
            visual_encoder: AdamState::new(&model.visual_encoder, params),
            attribute_encoder: AdamState::new(&model.attribute_encoder, params),
            visual_decoder: AdamState::new(&model.visual_decoder, params),
            attribute_decoder: AdamState::new(&model.attribute_decoder, params),
        }
    }

    pub fn step(&mut self, model: &mut CadaVae, grads: &CadaGradients) -> Result<(), NnError> {
        adam_step(&mut model.visual_encoder, &grads.visual_encoder, &mut self.visual_encoder)?;
        adam_step(
            &mut model.attribute_encoder,
            &grads.attribute_encoder,
            &mut self.attribute_encoder,
        )?;
        adam_step(&mut model.visual_decoder, &grads.visual_decoder, &mut self.visual_decoder)?;
        adam_step(
            &mut model.attribute_decoder,
            &grads.attribute_decoder,
            &mut self.attribute_decoder,
        )?;
        Ok(())
    }

    pub fn step_count(&self) -> u64 {
        self.visual_encoder.step_count()
    }
}

/// Everything computed on the forward pass of one item, kept for backward.
struct ItemForward {
    enc_v_cache: ForwardCache,
    enc_a_cache: ForwardCache,
    dec_v_own_cache: ForwardCache,
    dec_a_own_cache: ForwardCache,
    dec_a_cross_cache: ForwardCache,
    dec_v_cross_cache: ForwardCache,
    mu_v: Vec<f64>,
    mu_a: Vec<f64>,
    lv_raw_v: Vec<f64>,
    lv_raw_a: Vec<f64>,
    sigma_v: Vec<f64>,
    sigma_a: Vec<f64>,
    var_v: Vec<f64>,
    var_a: Vec<f64>,
    re: f64,
    kl: f64,
    ca: f64,
    da: f64,
    kd: Option<f64>,
}

fn sign(u: f64) -> f64 {
    if u > 0.0 {
        1.0
    } else if u < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn eval_item(
    model: &CadaVae,
    item: &BatchItem<'_>,
    noise: &ReparamNoise,
    cfg: &LossConfig,
    kd_active: bool,
) -> Result<ItemForward, VaeError> {
    let dz = model.latent_dim();
    let (head_v, enc_v_cache) = model.visual_encoder.forward(item.features)?;
    let (head_a, enc_a_cache) = model.attribute_encoder.forward(item.attributes)?;
    let gv = GaussianLatent::from_head(&head_v)?;
    let ga = GaussianLatent::from_head(&head_a)?;
    let lv_raw_v = head_v[dz..].to_vec();
    let lv_raw_a = head_a[dz..].to_vec();
    let sigma_v = gv.std();
    let sigma_a = ga.std();
    let var_v = gv.var();
    let var_a = ga.var();

    let z_v = reparameterize_with(&gv, &noise.visual);
    let z_a = reparameterize_with(&ga, &noise.attribute);
    let (x_hat, dec_v_own_cache) = model.visual_decoder.forward(&z_v)?;
    let (a_hat, dec_a_own_cache) = model.attribute_decoder.forward(&z_a)?;

    let cross_in_v: &[f64] = if cfg.ca_use_mean { gv.mean() } else { &z_v };
    let cross_in_a: &[f64] = if cfg.ca_use_mean { ga.mean() } else { &z_a };
    let (a_cross, dec_a_cross_cache) = model.attribute_decoder.forward(cross_in_v)?;
    let (x_cross, dec_v_cross_cache) = model.visual_decoder.forward(cross_in_a)?;

    let re = reconstruction_loss(item.features, &x_hat)?
        + reconstruction_loss(item.attributes, &a_hat)?;
    let kl = kl_loss(&gv) + kl_loss(&ga);
    let ca = item
        .attributes
        .iter()
        .zip(&a_cross)
        .map(|(&t, &r)| libm::fabs(t - r))
        .sum::<f64>()
        + item.features.iter().zip(&x_cross).map(|(&t, &r)| libm::fabs(t - r)).sum::<f64>();
    let da = super::distribution_alignment_loss(&gv, &ga)?;
    let kd = match item.dark {
        Some(stored) if kd_active => {
            Some(super::dark_kd_loss(&ga, &gv, stored, cfg.kd_symmetric)?)
        }
        _ => None,
    };

    Ok(ItemForward {
        enc_v_cache,
        enc_a_cache,
        dec_v_own_cache,
        dec_a_own_cache,
        dec_a_cross_cache,
        dec_v_cross_cache,
        mu_v: gv.mean().to_vec(),
        mu_a: ga.mean().to_vec(),
        lv_raw_v,
        lv_raw_a,
        sigma_v,
        sigma_a,
        var_v,
        var_a,
        re,
        kl,
        ca,
        da,
        kd,
    })
}

fn check_batch(
    model: &CadaVae,
    batch: &[BatchItem<'_>],
    noise: &[ReparamNoise],
) -> Result<(), VaeError> {
    if batch.is_empty() {
        return Err(VaeError::EmptyBatch);
    }
    if noise.len() != batch.len() {
        return Err(VaeError::NoiseCount { expected: batch.len(), got: noise.len() });
    }
    for item in batch {
        if let Some(dark) = item.dark {
            if dark.dim() != model.latent_dim() {
                return Err(VaeError::LatentDimMismatch(dark.dim(), model.latent_dim()));
            }
        }
    }
    Ok(())
}

fn breakdown_of(
    evals: &[ItemForward],
    weights: ResolvedWeights,
) -> LossBreakdown {
    let n = evals.len() as f64;
    let re = evals.iter().map(|e| e.re).sum::<f64>() / n;
    let kl = evals.iter().map(|e| e.kl).sum::<f64>() / n;
    let ca = evals.iter().map(|e| e.ca).sum::<f64>() / n;
    let da = evals.iter().map(|e| e.da).sum::<f64>() / n;
    let replayed = evals.iter().filter(|e| e.kd.is_some()).count();
    let kd = if replayed == 0 {
        0.0
    } else {
        evals.iter().filter_map(|e| e.kd).sum::<f64>() / replayed as f64
    };
    LossBreakdown::combine(re, kl, ca, da, kd, weights)
}

/// Total training loss over a batch with fresh reparameterization noise.
pub fn total_loss<R: Rng + ?Sized>(
    model: &CadaVae,
    batch: &[BatchItem<'_>],
    cfg: &LossConfig,
    step: u64,
    rng: &mut R,
) -> Result<(f64, LossBreakdown), VaeError> {
    let noise = ReparamNoise::draw_batch(model.latent_dim(), batch.len(), rng);
    total_loss_with_noise(model, batch, cfg, step, &noise)
}

/// Total training loss over a batch with the noise held fixed.
pub fn total_loss_with_noise(
    model: &CadaVae,
    batch: &[BatchItem<'_>],
    cfg: &LossConfig,
    step: u64,
    noise: &[ReparamNoise],
) -> Result<(f64, LossBreakdown), VaeError> {
    check_batch(model, batch, noise)?;
    let weights = cfg.weights.resolve(step);
    let kd_active = weights.alpha > 0.0;
    let mut evals = Vec::with_capacity(batch.len());
    for (item, eps) in batch.iter().zip(noise) {
        evals.push(eval_item(model, item, eps, cfg, kd_active)?);
    }
    let breakdown = breakdown_of(&evals, weights);
    Ok((breakdown.total, breakdown))
}

/// Loss breakdown plus exact parameter gradients for all four networks,
/// with the reparameterization noise held fixed.
pub fn loss_and_grads(
    model: &CadaVae,
    batch: &[BatchItem<'_>],
    cfg: &LossConfig,
    step: u64,
    noise: &[ReparamNoise],
) -> Result<(LossBreakdown, CadaGradients), VaeError> {
    check_batch(model, batch, noise)?;
    let weights = cfg.weights.resolve(step);
    let kd_active = weights.alpha > 0.0;
    let dz = model.latent_dim();
    let n = batch.len() as f64;

    let mut evals = Vec::with_capacity(batch.len());
    for (item, eps) in batch.iter().zip(noise) {
        evals.push(eval_item(model, item, eps, cfg, kd_active)?);
    }
    let replayed = evals.iter().filter(|e| e.kd.is_some()).count();
    let breakdown = breakdown_of(&evals, weights);

    let w_re = 1.0 / n;
    let w_kl = weights.beta / n;
    let w_ca = weights.gamma / n;
    let w_da = weights.delta / n;
    let w_kd = if replayed == 0 { 0.0 } else { weights.alpha / replayed as f64 };

    let mut grads = CadaGradients::zeros_like(model);
    let d_x = model.feature_dim() as f64;
    let d_a = model.attribute_dim() as f64;

    for ((item, eps), fwd) in batch.iter().zip(noise).zip(&evals) {
        // Within-modality reconstructions (per-dimension mean L1).
        let d_x_hat: Vec<f64> = fwd
            .dec_v_own_cache
            .output()
            .iter()
            .zip(item.features)
            .map(|(&r, &t)| w_re * sign(r - t) / d_x)
            .collect();
        let (g, d_z_v_own) = model.visual_decoder.backward(&fwd.dec_v_own_cache, &d_x_hat)?;
        grads.visual_decoder.accumulate(&g);

        let d_a_hat: Vec<f64> = fwd
            .dec_a_own_cache
            .output()
            .iter()
            .zip(item.attributes)
            .map(|(&r, &t)| w_re * sign(r - t) / d_a)
            .collect();
        let (g, d_z_a_own) = model.attribute_decoder.backward(&fwd.dec_a_own_cache, &d_a_hat)?;
        grads.attribute_decoder.accumulate(&g);

        // Cross reconstructions (plain L1 norms).
        let d_a_cross: Vec<f64> = fwd
            .dec_a_cross_cache
            .output()
            .iter()
            .zip(item.attributes)
            .map(|(&r, &t)| w_ca * sign(r - t))
            .collect();
        let (g, d_cross_in_v) =
            model.attribute_decoder.backward(&fwd.dec_a_cross_cache, &d_a_cross)?;
        grads.attribute_decoder.accumulate(&g);

        let d_x_cross: Vec<f64> = fwd
            .dec_v_cross_cache
            .output()
            .iter()
            .zip(item.features)
            .map(|(&r, &t)| w_ca * sign(r - t))
            .collect();
        let (g, d_cross_in_a) =
            model.visual_decoder.backward(&fwd.dec_v_cross_cache, &d_x_cross)?;
        grads.visual_decoder.accumulate(&g);

        // Collect gradients w.r.t. each latent head (mu, clamped log_var).
        let mut d_mu_v = vec![0.0; dz];
        let mut d_lv_v = vec![0.0; dz];
        let mut d_mu_a = vec![0.0; dz];
        let mut d_lv_a = vec![0.0; dz];

        for j in 0..dz {
            // Sampled-z paths: z = mu + sigma * eps.
            let dz_v = d_z_v_own[j] + if cfg.ca_use_mean { 0.0 } else { d_cross_in_v[j] };
            d_mu_v[j] += dz_v;
            d_lv_v[j] += dz_v * eps.visual[j] * 0.5 * fwd.sigma_v[j];
            if cfg.ca_use_mean {
                d_mu_v[j] += d_cross_in_v[j];
            }
            let dz_a = d_z_a_own[j] + if cfg.ca_use_mean { 0.0 } else { d_cross_in_a[j] };
            d_mu_a[j] += dz_a;
            d_lv_a[j] += dz_a * eps.attribute[j] * 0.5 * fwd.sigma_a[j];
            if cfg.ca_use_mean {
                d_mu_a[j] += d_cross_in_a[j];
            }

            // KL: d/dmu = mu, d/dlog_var = 0.5 (var - 1).
            d_mu_v[j] += w_kl * fwd.mu_v[j];
            d_lv_v[j] += w_kl * 0.5 * (fwd.var_v[j] - 1.0);
            d_mu_a[j] += w_kl * fwd.mu_a[j];
            d_lv_a[j] += w_kl * 0.5 * (fwd.var_a[j] - 1.0);
        }

        // Distribution alignment: d(DA)/dmu_v = (mu_v - mu_a) / DA, and the
        // sigma terms chain through d(sigma)/d(log_var) = sigma / 2.
        if w_da != 0.0 && fwd.da > DA_GRAD_EPS {
            for j in 0..dz {
                let dm = (fwd.mu_v[j] - fwd.mu_a[j]) / fwd.da;
                let ds = (fwd.sigma_v[j] - fwd.sigma_a[j]) / fwd.da;
                d_mu_v[j] += w_da * dm;
                d_lv_v[j] += w_da * ds * 0.5 * fwd.sigma_v[j];
                d_mu_a[j] -= w_da * dm;
                d_lv_a[j] -= w_da * ds * 0.5 * fwd.sigma_a[j];
            }
        }

        // Dark-knowledge distillation against the stored statistics.
        if let (Some(stored), true) = (item.dark, fwd.kd.is_some()) {
            for j in 0..dz {
                d_mu_a[j] += w_kd * sign(fwd.mu_a[j] - stored.attribute.mean()[j]);
                d_lv_v[j] +=
                    w_kd * sign(fwd.var_v[j] - stored.visual.var()[j]) * fwd.var_v[j];
                if cfg.kd_symmetric {
                    d_mu_v[j] += w_kd * sign(fwd.mu_v[j] - stored.visual.mean()[j]);
                    d_lv_a[j] +=
                        w_kd * sign(fwd.var_a[j] - stored.attribute.var()[j]) * fwd.var_a[j];
                }
            }
        }

        // The clamp gates log-var gradients outside its range.
        let mut head_v = Vec::with_capacity(2 * dz);
        head_v.extend_from_slice(&d_mu_v);
        head_v.extend((0..dz).map(|j| {
            if fwd.lv_raw_v[j].abs() <= LOG_VAR_CLAMP {
                d_lv_v[j]
            } else {
                0.0
            }
        }));
        let (g, _) = model.visual_encoder.backward(&fwd.enc_v_cache, &head_v)?;
        grads.visual_encoder.accumulate(&g);

        let mut head_a = Vec::with_capacity(2 * dz);
        head_a.extend_from_slice(&d_mu_a);
        head_a.extend((0..dz).map(|j| {
            if fwd.lv_raw_a[j].abs() <= LOG_VAR_CLAMP {
                d_lv_a[j]
            } else {
                0.0
            }
        }));
        let (g, _) = model.attribute_encoder.backward(&fwd.enc_a_cache, &head_a)?;
        grads.attribute_encoder.accumulate(&g);
    }

    Ok((breakdown, grads))
}

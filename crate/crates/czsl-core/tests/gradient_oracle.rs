//! Central finite differences over every parameter of all four networks,
//! with the reparameterization noise held fixed.
//!
//! Each variant fixes the noise, evaluates the analytic gradient once, then
//! perturbs every weight and bias by +-h and compares. The derivative is
//! accepted when the relative error against the larger magnitude is below
//! 1e-4 or the absolute difference is below the finite-difference noise
//! floor.

use czsl_core::nn::DenseNet;
use czsl_core::rng::{seeded_rng, RngStream};
use czsl_core::vae::{
    loss_and_grads, total_loss_with_noise, BatchItem, CadaVae, DarkKnowledge, LossConfig,
    LossWeights, ModelDims, ReparamNoise, WeightSchedule,
};
use rand::Rng;

const H: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;
const ABS_FLOOR: f64 = 1e-7;

struct Case {
    model: CadaVae,
    features: Vec<Vec<f64>>,
    attributes: Vec<Vec<f64>>,
    dark: Vec<Option<DarkKnowledge>>,
    noise: Vec<ReparamNoise>,
    cfg: LossConfig,
    step: u64,
}

impl Case {
    fn random(seed: u64, cfg: LossConfig, step: u64) -> Self {
        let mut rng = seeded_rng(seed, RngStream::Init);
        let dims = ModelDims {
            feature_dim: 5,
            attribute_dim: 3,
            latent_dim: 2,
            encoder_hidden: vec![4],
            decoder_hidden: vec![4],
        };
        let model = CadaVae::init(&dims, &mut rng).unwrap();
        let batch_len = 1 + (seed as usize % 3);
        let mut features = Vec::new();
        let mut attributes = Vec::new();
        let mut dark = Vec::new();
        // The relu subgradient at exactly 0 makes the loss non-differentiable
        // when a fully dead hidden layer emits an exactly-zero latent mean
        // (zero biases propagate the zero into the decoder kink). Finite
        // differences are only meaningful away from such points, so redraw
        // degenerate items.
        let draw_item = |rng: &mut rand_chacha::ChaCha12Rng| loop {
            let x: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let a: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let alive = |mean: &[f64]| mean.iter().any(|&m| m != 0.0);
            if alive(model.encode_visual(&x).unwrap().mean())
                && alive(model.encode_attribute(&a).unwrap().mean())
            {
                return (x, a);
            }
        };
        for i in 0..batch_len {
            let (x, a) = draw_item(&mut rng);
            // Mix replayed and fresh items; stored statistics come from the
            // encodings of a different random sample.
            if i % 2 == 0 {
                let xs: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
                let as_: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
                dark.push(Some(DarkKnowledge {
                    visual: model.encode_visual(&xs).unwrap(),
                    attribute: model.encode_attribute(&as_).unwrap(),
                }));
            } else {
                dark.push(None);
            }
            features.push(x);
            attributes.push(a);
        }
        let mut noise_rng = seeded_rng(seed, RngStream::Noise);
        let noise = ReparamNoise::draw_batch(2, batch_len, &mut noise_rng);
        Self { model, features, attributes, dark, noise, cfg, step }
    }

    fn batch(&self) -> Vec<BatchItem<'_>> {
        self.features
            .iter()
            .zip(&self.attributes)
            .zip(&self.dark)
            .map(|((x, a), d)| BatchItem { features: x, attributes: a, dark: d.as_ref() })
            .collect()
    }

    fn loss(&self) -> f64 {
        total_loss_with_noise(&self.model, &self.batch(), &self.cfg, self.step, &self.noise)
            .unwrap()
            .0
    }
}

fn assert_close(analytic: f64, fd: f64, what: &str) {
    let denom = analytic.abs().max(fd.abs());
    let diff = (analytic - fd).abs();
    assert!(
        diff <= ABS_FLOOR || diff / denom <= REL_TOL,
        "{what}: analytic {analytic} vs finite difference {fd}"
    );
}

fn net_of(model: &mut CadaVae, which: usize) -> &mut DenseNet {
    match which {
        0 => &mut model.visual_encoder,
        1 => &mut model.attribute_encoder,
        2 => &mut model.visual_decoder,
        _ => &mut model.attribute_decoder,
    }
}

fn check_network(case: &mut Case, which: usize, label: &str) {
    let (_, grads) = loss_and_grads(
        &case.model,
        &case.batch(),
        &case.cfg,
        case.step,
        &case.noise,
    )
    .unwrap();
    let grads = match which {
        0 => grads.visual_encoder,
        1 => grads.attribute_encoder,
        2 => grads.visual_decoder,
        _ => grads.attribute_decoder,
    };
    let layer_count = net_of(&mut case.model, which).layers().len();
    for k in 0..layer_count {
        let weights = net_of(&mut case.model, which).layers()[k].weight.data().len();
        for i in 0..weights {
            let orig = net_of(&mut case.model, which).layers()[k].weight.data()[i];
            net_of(&mut case.model, which).layers_mut()[k].weight.data_mut()[i] = orig + H;
            let up = case.loss();
            net_of(&mut case.model, which).layers_mut()[k].weight.data_mut()[i] = orig - H;
            let down = case.loss();
            net_of(&mut case.model, which).layers_mut()[k].weight.data_mut()[i] = orig;
            assert_close(
                grads.layers[k].weight.data()[i],
                (up - down) / (2.0 * H),
                &format!("{label} layer {k} weight {i}"),
            );
        }
        let biases = net_of(&mut case.model, which).layers()[k].bias.len();
        for i in 0..biases {
            let orig = net_of(&mut case.model, which).layers()[k].bias[i];
            net_of(&mut case.model, which).layers_mut()[k].bias[i] = orig + H;
            let up = case.loss();
            net_of(&mut case.model, which).layers_mut()[k].bias[i] = orig - H;
            let down = case.loss();
            net_of(&mut case.model, which).layers_mut()[k].bias[i] = orig;
            assert_close(
                grads.layers[k].bias[i],
                (up - down) / (2.0 * H),
                &format!("{label} layer {k} bias {i}"),
            );
        }
    }
}

fn check_all_networks(mut case: Case) {
    for (which, label) in [
        (0, "visual encoder"),
        (1, "attribute encoder"),
        (2, "visual decoder"),
        (3, "attribute decoder"),
    ] {
        check_network(&mut case, which, label);
    }
}

#[test]
fn gradients_match_with_all_terms_active() {
    for seed in 0..5 {
        check_all_networks(Case::random(seed, LossConfig::default(), 0));
    }
}

#[test]
fn gradients_match_with_uneven_weights() {
    let cfg = LossConfig {
        weights: LossWeights::constant(0.3, 2.0, 0.7, 1.5),
        ..LossConfig::default()
    };
    for seed in 5..8 {
        check_all_networks(Case::random(seed, cfg, 0));
    }
}

#[test]
fn gradients_match_with_mean_cross_path() {
    let cfg = LossConfig { ca_use_mean: true, ..LossConfig::default() };
    for seed in 8..10 {
        check_all_networks(Case::random(seed, cfg, 0));
    }
}

#[test]
fn gradients_match_with_symmetric_distillation() {
    let cfg = LossConfig { kd_symmetric: true, ..LossConfig::default() };
    for seed in 10..12 {
        check_all_networks(Case::random(seed, cfg, 0));
    }
}

#[test]
fn gradients_match_mid_warmup() {
    let cfg = LossConfig {
        weights: LossWeights {
            beta: WeightSchedule::warmed(1.0, 0, 100),
            gamma: WeightSchedule::warmed(1.0, 0, 100),
            delta: WeightSchedule::constant(1.0),
            alpha: WeightSchedule::warmed(1.0, 10, 100),
        },
        ..LossConfig::default()
    };
    check_all_networks(Case::random(12, cfg, 50));
}

//! Experience replay: a reservoir-sampled memory whose entries carry dark
//! knowledge, plus the short-term buffers used by the task-free strategies.
//!
//! The reservoir keeps a uniform random subset of the stream: every offered
//! item ends up stored with probability `capacity / seen_count`. Accept and
//! replace decisions consume exactly one uniform draw per over-capacity
//! offer, on the dedicated [`RngStream::Reservoir`](crate::rng::RngStream)
//! stream, which is what lets the trace tests replay them independently.

use alloc::vec::Vec;

use rand::Rng;

use crate::vae::{CadaVae, DarkKnowledge, VaeError};

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

/// One stream element: visual features, class label, class attributes, and
/// the task id when the protocol provides one (training only, never read by
/// the task-free strategies).
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: usize,
    pub attributes: Vec<f64>,
    pub task_id: Option<usize>,
}

/// A stored sample plus the encoder statistics captured when it was
/// inserted. The statistics are never refreshed afterwards.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct MemoryEntry {
    pub sample: Sample,
    pub dark: DarkKnowledge,
}

/// Fixed-capacity reservoir over the training stream.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct ReservoirMemory {
    capacity: usize,
    entries: Vec<MemoryEntry>,
    seen_count: u64,
}

impl ReservoirMemory {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, entries: Vec::new(), seen_count: 0 }
    }

    /// Offers an entry to the reservoir. Returns `true` when the entry was
    /// stored (under capacity, or chosen to replace a uniformly random
    /// slot with probability `capacity / seen_count`).
    pub fn insert<R: Rng + ?Sized>(&mut self, entry: MemoryEntry, rng: &mut R) -> bool {
        self.seen_count += 1;
        if self.entries.len() < self.capacity {
            self.entries.push(entry);
            return true;
        }
        if self.capacity == 0 {
            return false;
        }
        let slot = rng.random_range(0..self.seen_count as usize);
        if slot < self.capacity {
            self.entries[slot] = entry;
            true
        } else {
            false
        }
    }

    /// Draws `k` entries: uniformly without replacement when the memory has
    /// at least `k` entries, with replacement otherwise. Returns an empty
    /// batch from an empty memory (no replay available yet).
    pub fn sample_batch<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Vec<MemoryEntry> {
        if self.entries.is_empty() || k == 0 {
            return Vec::new();
        }
        if k > self.entries.len() {
            (0..k)
                .map(|_| self.entries[rng.random_range(0..self.entries.len())].clone())
                .collect()
        } else {
            rand::seq::index::sample(rng, self.entries.len(), k)
                .into_iter()
                .map(|i| self.entries[i].clone())
                .collect()
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() == self.capacity
    }

    /// Total number of stream items offered so far.
    pub fn seen_count(&self) -> u64 {
        self.seen_count
    }

    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    pub fn samples(&self) -> impl Iterator<Item = &Sample> {
        self.entries.iter().map(|e| &e.sample)
    }
}

/// Captures the current encoder statistics of a sample for later
/// distillation.
pub fn capture_dark_knowledge(model: &CadaVae, sample: &Sample) -> Result<DarkKnowledge, VaeError> {
    Ok(DarkKnowledge {
        visual: model.encode_visual(&sample.features)?,
        attribute: model.encode_attribute(&sample.attributes)?,
    })
}

/// Bounded buffer of incoming samples, drained whenever a training phase
/// triggers. Used both as the micro-batch memory and the short-term memory.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct ShortTermMemory {
    capacity: usize,
    buffer: Vec<Sample>,
}

impl ShortTermMemory {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, buffer: Vec::with_capacity(capacity) }
    }

    /// Appends a sample; callers must drain a full buffer before pushing
    /// more.
    pub fn push(&mut self, sample: Sample) {
        debug_assert!(self.buffer.len() < self.capacity);
        self.buffer.push(sample);
    }

    /// Drains the buffer, leaving it empty.
    pub fn take_all(&mut self) -> Vec<Sample> {
        core::mem::take(&mut self.buffer)
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.buffer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffer.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.buffer.len() >= self.capacity
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Matrix;
    use crate::nn::{Activation, DenseNet, Layer};
    use crate::rng::{seeded_rng, RngStream};
    use crate::vae::GaussianLatent;
    use alloc::vec;

    fn entry(tag: usize) -> MemoryEntry {
        MemoryEntry {
            sample: Sample {
                features: vec![tag as f64],
                label: tag,
                attributes: vec![0.0],
                task_id: None,
            },
            dark: DarkKnowledge {
                visual: GaussianLatent::new(vec![0.0], vec![0.0]).unwrap(),
                attribute: GaussianLatent::new(vec![0.0], vec![0.0]).unwrap(),
            },
        }
    }

    fn zero_model() -> CadaVae {
        let net = |input: usize, output: usize| {
            DenseNet::new(vec![Layer {
                weight: Matrix::zeros(output, input),
                bias: vec![0.0; output],
                activation: Activation::Identity,
            }])
            .unwrap()
        };
        CadaVae::new(net(3, 4), net(2, 4), net(2, 3), net(2, 2), 2).unwrap()
    }

    #[test]
    fn under_capacity_keeps_everything() {
        let mut mem = ReservoirMemory::new(4);
        let mut rng = seeded_rng(0, RngStream::Reservoir);
        for i in 0..3 {
            assert!(mem.insert(entry(i), &mut rng));
        }
        assert_eq!(mem.len(), 3);
        assert_eq!(mem.seen_count(), 3);
        let labels: Vec<usize> = mem.entries().iter().map(|e| e.sample.label).collect();
        assert_eq!(labels, vec![0, 1, 2]);
    }

    #[test]
    fn capacity_bound_holds() {
        let mut mem = ReservoirMemory::new(4);
        let mut rng = seeded_rng(1, RngStream::Reservoir);
        for i in 0..10 {
            mem.insert(entry(i), &mut rng);
            assert!(mem.len() <= 4);
        }
        assert_eq!(mem.len(), 4);
        assert_eq!(mem.seen_count(), 10);
    }

    #[test]
    fn reservoir_inclusion_is_uniform() {
        // Small-scale Monte Carlo against the M/l inclusion property; the
        // acceptance suite runs the full-size version.
        let capacity = 20;
        let stream = 100;
        let trials = 2000;
        let mut hits = vec![0u32; stream];
        for t in 0..trials {
            let mut rng = seeded_rng(t as u64, RngStream::Reservoir);
            let mut mem = ReservoirMemory::new(capacity);
            for i in 0..stream {
                mem.insert(entry(i), &mut rng);
            }
            for e in mem.entries() {
                hits[e.sample.label] += 1;
            }
        }
        let expected = capacity as f64 / stream as f64;
        for (i, &h) in hits.iter().enumerate() {
            let freq = h as f64 / trials as f64;
            assert!(
                (freq - expected).abs() < 0.05,
                "item {i} frequency {freq}, expected {expected}"
            );
        }
    }

    #[test]
    fn task_ids_never_influence_the_reservoir() {
        let runs: Vec<Vec<usize>> = [Some(0usize), Some(7), None]
            .iter()
            .map(|&task| {
                let mut rng = seeded_rng(3, RngStream::Reservoir);
                let mut mem = ReservoirMemory::new(5);
                for i in 0..50 {
                    let mut e = entry(i);
                    e.sample.task_id = task;
                    mem.insert(e, &mut rng);
                }
                mem.entries().iter().map(|e| e.sample.label).collect()
            })
            .collect();
        assert_eq!(runs[0], runs[1]);
        assert_eq!(runs[0], runs[2]);
    }

    #[test]
    fn sample_batch_k_zero_and_empty_memory() {
        let mem = ReservoirMemory::new(4);
        let mut rng = seeded_rng(0, RngStream::Replay);
        assert!(mem.sample_batch(3, &mut rng).is_empty());
        let mut mem = ReservoirMemory::new(4);
        mem.insert(entry(0), &mut rng);
        assert!(mem.sample_batch(0, &mut rng).is_empty());
    }

    #[test]
    fn sample_batch_full_draw_is_a_permutation() {
        let mut rng = seeded_rng(5, RngStream::Replay);
        let mut mem = ReservoirMemory::new(6);
        for i in 0..6 {
            mem.insert(entry(i), &mut rng);
        }
        let batch = mem.sample_batch(6, &mut rng);
        let mut labels: Vec<usize> = batch.iter().map(|e| e.sample.label).collect();
        labels.sort_unstable();
        assert_eq!(labels, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn sample_batch_oversized_draws_with_replacement() {
        let mut rng = seeded_rng(6, RngStream::Replay);
        let mut mem = ReservoirMemory::new(2);
        mem.insert(entry(0), &mut rng);
        mem.insert(entry(1), &mut rng);
        let batch = mem.sample_batch(10, &mut rng);
        assert_eq!(batch.len(), 10);
    }

    #[test]
    fn sample_batch_single_draws_are_uniform() {
        let mut rng = seeded_rng(7, RngStream::Replay);
        let mut mem = ReservoirMemory::new(10);
        for i in 0..10 {
            mem.insert(entry(i), &mut rng);
        }
        let mut hits = [0u32; 10];
        let draws = 100_000;
        for _ in 0..draws {
            let batch = mem.sample_batch(1, &mut rng);
            hits[batch[0].sample.label] += 1;
        }
        for (i, &h) in hits.iter().enumerate() {
            let freq = h as f64 / draws as f64;
            assert!((freq - 0.1).abs() < 0.01, "entry {i} frequency {freq}");
        }
    }

    #[test]
    fn dark_knowledge_of_zero_model_is_zero() {
        let model = zero_model();
        let sample = Sample {
            features: vec![1.0, -2.0, 0.5],
            label: 0,
            attributes: vec![0.3, 0.4],
            task_id: None,
        };
        let dark = capture_dark_knowledge(&model, &sample).unwrap();
        assert_eq!(dark.visual.mean(), &[0.0, 0.0]);
        assert_eq!(dark.visual.log_var(), &[0.0, 0.0]);
        assert_eq!(dark.attribute.mean(), &[0.0, 0.0]);
    }

    #[test]
    fn dark_knowledge_equals_fresh_encodings() {
        let mut rng = seeded_rng(8, RngStream::Init);
        let model = CadaVae::init(
            &crate::vae::ModelDims {
                feature_dim: 3,
                attribute_dim: 2,
                latent_dim: 2,
                encoder_hidden: vec![4],
                decoder_hidden: vec![4],
            },
            &mut rng,
        )
        .unwrap();
        let sample = Sample {
            features: vec![0.2, -0.7, 1.1],
            label: 1,
            attributes: vec![0.5, -0.5],
            task_id: None,
        };
        let dark = capture_dark_knowledge(&model, &sample).unwrap();
        assert_eq!(dark.visual, model.encode_visual(&sample.features).unwrap());
        assert_eq!(dark.attribute, model.encode_attribute(&sample.attributes).unwrap());
    }

    #[test]
    fn stored_statistics_go_stale_as_the_model_trains() {
        use crate::nn::AdamParams;
        use crate::vae::{loss_and_grads, BatchItem, CadaOptimizer, LossConfig, ReparamNoise};

        let mut rng = seeded_rng(9, RngStream::Init);
        let mut model = CadaVae::init(
            &crate::vae::ModelDims {
                feature_dim: 3,
                attribute_dim: 2,
                latent_dim: 2,
                encoder_hidden: vec![4],
                decoder_hidden: vec![4],
            },
            &mut rng,
        )
        .unwrap();
        let sample = Sample {
            features: vec![0.2, -0.7, 1.1],
            label: 1,
            attributes: vec![0.5, -0.5],
            task_id: None,
        };
        let stored = capture_dark_knowledge(&model, &sample).unwrap();

        let mut noise_rng = seeded_rng(9, RngStream::Noise);
        let mut opt = CadaOptimizer::new(&model, AdamParams::with_learning_rate(0.05));
        for _ in 0..2 {
            let batch =
                [BatchItem { features: &sample.features, attributes: &sample.attributes, dark: None }];
            let noise = ReparamNoise::draw_batch(2, 1, &mut noise_rng);
            let (_, grads) =
                loss_and_grads(&model, &batch, &LossConfig::default(), 0, &noise).unwrap();
            opt.step(&mut model, &grads).unwrap();
        }
        let fresh = capture_dark_knowledge(&model, &sample).unwrap();
        assert_ne!(stored, fresh);
    }

    #[test]
    fn short_term_memory_fills_and_drains() {
        let mut stm = ShortTermMemory::new(2);
        assert!(!stm.is_full());
        stm.push(entry(0).sample);
        assert!(!stm.is_full());
        stm.push(entry(1).sample);
        assert!(stm.is_full());
        let drained = stm.take_all();
        assert_eq!(drained.len(), 2);
        assert!(stm.is_empty());
        assert_eq!(stm.capacity(), 2);
    }
}

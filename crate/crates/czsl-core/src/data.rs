//! Dataset representation, protocol splitters, and the synthetic generator.
//!
//! A [`ZslDataset`] holds a feature matrix, integer labels in `0..C`, one
//! attribute row per class, the seen/unseen class partition, and train/test
//! index lists. Unseen classes contribute attributes only — they never have
//! training rows. Two splitters derive training protocols from a dataset:
//! [`make_task_splits`] for the task-agnostic setting and
//! [`make_class_block_stream`] for the task-free setting.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::matrix::Matrix;
use crate::replay::Sample;
use crate::rng::{seeded_rng, standard_normal, RngStream};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DataError {
    #[error("feature matrix has {rows} rows but there are {labels} labels")]
    LabelCount { rows: usize, labels: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelRange { label: usize, classes: usize },
    #[error("class {class} has no attribute row (attribute matrix has {rows} rows)")]
    MissingAttribute { class: usize, rows: usize },
    #[error("seen/unseen lists do not partition the class universe")]
    BadClassPartition,
    #[error("unseen class {class} has training samples")]
    UnseenClassHasTrainingSamples { class: usize },
    #[error("seen class {class} has no training samples")]
    SeenClassWithoutTrainingSamples { class: usize },
    #[error("index {index} out of range for {rows} samples")]
    IndexRange { index: usize, rows: usize },
    #[error("train and test indices overlap at {index}")]
    SplitOverlap { index: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("cannot split {classes} trainable classes into {tasks} tasks")]
    BadTaskCount { classes: usize, tasks: usize },
    #[error("task count must be at least 2")]
    TooFewTasks,
    #[error("block size must be at least 1")]
    EmptyBlockSize,
    #[error("dataset has no training samples")]
    EmptyTrainingSet,
    #[error("invalid generator parameter: {0}")]
    BadSynthParameter(&'static str),
}

/// A zero-shot dataset: features, labels, per-class attributes, the
/// seen/unseen partition, and the train/test split.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ZslDataset {
    features: Matrix,
    labels: Vec<usize>,
    attributes: Matrix,
    seen_classes: Vec<usize>,
    unseen_classes: Vec<usize>,
    train_indices: Vec<usize>,
    test_indices: Vec<usize>,
}

impl ZslDataset {
    /// Validates every invariant on construction: label ranges, one
    /// attribute row per class, a clean seen/unseen partition, disjoint
    /// in-range split indices, no training rows for unseen classes, at
    /// least one training row per seen class, and finite values.
    pub fn new(
        features: Matrix,
        labels: Vec<usize>,
        attributes: Matrix,
        seen_classes: Vec<usize>,
        unseen_classes: Vec<usize>,
        train_indices: Vec<usize>,
        test_indices: Vec<usize>,
    ) -> Result<Self, DataError> {
        let rows = features.rows();
        let classes = attributes.rows();
        if labels.len() != rows {
            return Err(DataError::LabelCount { rows, labels: labels.len() });
        }
        for &label in &labels {
            if label >= classes {
                return Err(DataError::MissingAttribute { class: label, rows: classes });
            }
        }
        let mut partition = vec![0u8; classes];
        for &c in &seen_classes {
            if c >= classes {
                return Err(DataError::LabelRange { label: c, classes });
            }
            partition[c] += 1;
        }
        for &c in &unseen_classes {
            if c >= classes {
                return Err(DataError::LabelRange { label: c, classes });
            }
            partition[c] += 1;
        }
        if partition.iter().any(|&count| count != 1) {
            return Err(DataError::BadClassPartition);
        }
        let mut in_train = vec![false; rows];
        for &i in &train_indices {
            if i >= rows {
                return Err(DataError::IndexRange { index: i, rows });
            }
            in_train[i] = true;
        }
        for &i in &test_indices {
            if i >= rows {
                return Err(DataError::IndexRange { index: i, rows });
            }
            if in_train[i] {
                return Err(DataError::SplitOverlap { index: i });
            }
        }
        let mut train_per_class = vec![0usize; classes];
        for &i in &train_indices {
            train_per_class[labels[i]] += 1;
        }
        for &c in &unseen_classes {
            if train_per_class[c] > 0 {
                return Err(DataError::UnseenClassHasTrainingSamples { class: c });
            }
        }
        for &c in &seen_classes {
            if train_per_class[c] == 0 {
                return Err(DataError::SeenClassWithoutTrainingSamples { class: c });
            }
        }
        if !features.is_finite() {
            return Err(DataError::NonFinite(String::from("features")));
        }
        if !attributes.is_finite() {
            return Err(DataError::NonFinite(String::from("attributes")));
        }
        Ok(Self {
            features,
            labels,
            attributes,
            seen_classes,
            unseen_classes,
            train_indices,
            test_indices,
        })
    }

    pub fn num_samples(&self) -> usize {
        self.features.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.attributes.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn attribute_dim(&self) -> usize {
        self.attributes.cols()
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn attributes(&self) -> &Matrix {
        &self.attributes
    }

    pub fn seen_classes(&self) -> &[usize] {
        &self.seen_classes
    }

    pub fn unseen_classes(&self) -> &[usize] {
        &self.unseen_classes
    }

    pub fn train_indices(&self) -> &[usize] {
        &self.train_indices
    }

    pub fn test_indices(&self) -> &[usize] {
        &self.test_indices
    }

    pub fn class_attributes(&self, class: usize) -> &[f64] {
        self.attributes.row(class)
    }

    /// Materializes row `index` as a [`Sample`] (no task id).
    pub fn sample(&self, index: usize) -> Sample {
        let label = self.labels[index];
        Sample {
            features: self.features.row(index).to_vec(),
            label,
            attributes: self.attributes.row(label).to_vec(),
            task_id: None,
        }
    }

    /// All training rows as samples, in index order.
    pub fn train_samples(&self) -> Vec<Sample> {
        self.train_indices.iter().map(|&i| self.sample(i)).collect()
    }

    /// `(class, attribute-vector)` pairs for the given classes.
    pub fn attribute_pairs(&self, classes: &[usize]) -> Vec<(usize, Vec<f64>)> {
        classes.iter().map(|&c| (c, self.attributes.row(c).to_vec())).collect()
    }
}

/// Partition of the trainable classes into `T` ordered groups, with
/// cumulative seen/unseen views. Static unseen classes of the dataset (those
/// with attributes only) belong to every unseen view.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSplit {
    groups: Vec<Vec<usize>>,
    task_train_indices: Vec<Vec<usize>>,
    task_test_indices: Vec<Vec<usize>>,
    static_unseen: Vec<usize>,
}

impl TaskSplit {
    pub fn task_count(&self) -> usize {
        self.groups.len()
    }

    /// Classes introduced by task `t` (0-based).
    pub fn group(&self, t: usize) -> &[usize] {
        &self.groups[t]
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    /// Training-row indices of task `t`.
    pub fn task_train_indices(&self, t: usize) -> &[usize] {
        &self.task_train_indices[t]
    }

    /// Test-row indices of the classes introduced by task `t`.
    pub fn task_test_indices(&self, t: usize) -> &[usize] {
        &self.task_test_indices[t]
    }

    /// Classes seen after training tasks `0..=t`, sorted.
    pub fn seen_up_to(&self, t: usize) -> Vec<usize> {
        let mut classes: Vec<usize> =
            self.groups[..=t].iter().flat_map(|g| g.iter().copied()).collect();
        classes.sort_unstable();
        classes
    }

    /// Classes still unseen after task `t` (later groups plus the dataset's
    /// static unseen classes), sorted.
    pub fn unseen_after(&self, t: usize) -> Vec<usize> {
        let mut classes: Vec<usize> =
            self.groups[t + 1..].iter().flat_map(|g| g.iter().copied()).collect();
        classes.extend_from_slice(&self.static_unseen);
        classes.sort_unstable();
        classes
    }

    /// Task-t training samples (task id attached).
    pub fn task_samples(&self, ds: &ZslDataset, t: usize) -> Vec<Sample> {
        self.task_train_indices[t]
            .iter()
            .map(|&i| {
                let mut s = ds.sample(i);
                s.task_id = Some(t);
                s
            })
            .collect()
    }
}

/// Splits the trainable classes into `task_count` near-equal ordered groups
/// (remainder spread over the first groups), after a seeded shuffle of the
/// class order.
pub fn make_task_splits(
    ds: &ZslDataset,
    task_count: usize,
    seed: u64,
) -> Result<TaskSplit, DataError> {
    if task_count < 2 {
        return Err(DataError::TooFewTasks);
    }
    let mut classes: Vec<usize> = ds.seen_classes().to_vec();
    if task_count > classes.len() {
        return Err(DataError::BadTaskCount { classes: classes.len(), tasks: task_count });
    }
    let mut rng = seeded_rng(seed, RngStream::Shuffle);
    classes.shuffle(&mut rng);

    let base = classes.len() / task_count;
    let remainder = classes.len() % task_count;
    let mut groups = Vec::with_capacity(task_count);
    let mut start = 0;
    for t in 0..task_count {
        let size = base + usize::from(t < remainder);
        groups.push(classes[start..start + size].to_vec());
        start += size;
    }

    let mut class_to_task = vec![usize::MAX; ds.num_classes()];
    for (t, group) in groups.iter().enumerate() {
        for &c in group {
            class_to_task[c] = t;
        }
    }
    let mut task_train_indices = vec![Vec::new(); task_count];
    for &i in ds.train_indices() {
        let t = class_to_task[ds.labels()[i]];
        task_train_indices[t].push(i);
    }
    let mut task_test_indices = vec![Vec::new(); task_count];
    for &i in ds.test_indices() {
        let t = class_to_task[ds.labels()[i]];
        if t != usize::MAX {
            task_test_indices[t].push(i);
        }
    }
    Ok(TaskSplit {
        groups,
        task_train_indices,
        task_test_indices,
        static_unseen: ds.unseen_classes().to_vec(),
    })
}

/// Ordered class-disjoint blocks of training samples. No task ids attached.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassBlockStream {
    blocks: Vec<Vec<Sample>>,
    block_classes: Vec<Vec<usize>>,
}

impl ClassBlockStream {
    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn blocks(&self) -> &[Vec<Sample>] {
        &self.blocks
    }

    pub fn block_classes(&self) -> &[Vec<usize>] {
        &self.block_classes
    }

    /// The full stream, block by block.
    pub fn flatten(&self) -> Vec<Sample> {
        self.blocks.iter().flat_map(|b| b.iter().cloned()).collect()
    }

    pub fn total_samples(&self) -> usize {
        self.blocks.iter().map(Vec::len).sum()
    }
}

/// Groups the seen classes into blocks of `block_class_count` (the last
/// block may be smaller) after a seeded class shuffle; samples are emitted
/// block by block, shuffled within each block.
pub fn make_class_block_stream(
    ds: &ZslDataset,
    block_class_count: usize,
    seed: u64,
) -> Result<ClassBlockStream, DataError> {
    if block_class_count == 0 {
        return Err(DataError::EmptyBlockSize);
    }
    if ds.train_indices().is_empty() {
        return Err(DataError::EmptyTrainingSet);
    }
    let mut rng = seeded_rng(seed, RngStream::Shuffle);
    let mut classes: Vec<usize> = ds.seen_classes().to_vec();
    classes.shuffle(&mut rng);

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes()];
    for &i in ds.train_indices() {
        by_class[ds.labels()[i]].push(i);
    }

    let mut blocks = Vec::new();
    let mut block_classes = Vec::new();
    for chunk in classes.chunks(block_class_count) {
        let mut rows: Vec<usize> =
            chunk.iter().flat_map(|&c| by_class[c].iter().copied()).collect();
        rows.shuffle(&mut rng);
        blocks.push(rows.into_iter().map(|i| ds.sample(i)).collect());
        block_classes.push(chunk.to_vec());
    }
    Ok(ClassBlockStream { blocks, block_classes })
}

/// Parameters of the synthetic generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub unseen_count: usize,
    pub per_class: usize,
    pub feature_dim: usize,
    pub attribute_dim: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

/// Generates a dataset with a linear attribute-to-feature-mean structure:
/// class attributes are standard normal, a random map `P` sends attributes
/// to feature means, and class-`c` features are `P a_c` plus isotropic
/// Gaussian noise. The last `unseen_count` classes receive no training
/// rows; 20% of each seen class (at least one row) is held out for testing.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<ZslDataset, DataError> {
    if cfg.num_classes == 0 || cfg.feature_dim == 0 || cfg.attribute_dim == 0 {
        return Err(DataError::BadSynthParameter("dimensions must be at least 1"));
    }
    if cfg.unseen_count >= cfg.num_classes {
        return Err(DataError::BadSynthParameter("unseen_count must be below num_classes"));
    }
    if cfg.per_class < 2 {
        return Err(DataError::BadSynthParameter("per_class must be at least 2"));
    }
    if !(cfg.noise_sigma.is_finite() && cfg.noise_sigma >= 0.0) {
        return Err(DataError::BadSynthParameter("noise_sigma must be finite and non-negative"));
    }
    let mut rng = seeded_rng(cfg.seed, RngStream::Synth);

    // Map P, row-major, entries N(0, 1/attribute_dim).
    let scale = 1.0 / libm::sqrt(cfg.attribute_dim as f64);
    let mut map = Matrix::zeros(cfg.feature_dim, cfg.attribute_dim);
    for v in map.data_mut() {
        *v = scale * standard_normal(&mut rng);
    }

    let mut attributes = Matrix::zeros(cfg.num_classes, cfg.attribute_dim);
    for c in 0..cfg.num_classes {
        for v in attributes.row_mut(c) {
            *v = standard_normal(&mut rng);
        }
    }

    let seen = cfg.num_classes - cfg.unseen_count;
    let n = cfg.num_classes * cfg.per_class;
    let mut features = Matrix::zeros(n, cfg.feature_dim);
    let mut labels = Vec::with_capacity(n);
    let mut train_indices = Vec::new();
    let mut test_indices = Vec::new();
    let mut row = 0;
    for c in 0..cfg.num_classes {
        let mean = map.matvec(attributes.row(c));
        let class_rows: Vec<usize> = (row..row + cfg.per_class).collect();
        for &r in &class_rows {
            for (j, m) in mean.iter().enumerate() {
                features.set(r, j, m + cfg.noise_sigma * standard_normal(&mut rng));
            }
            labels.push(c);
        }
        if c < seen {
            let held_out = (libm::round(0.2 * cfg.per_class as f64) as usize)
                .clamp(1, cfg.per_class - 1);
            let mut order = class_rows;
            order.shuffle(&mut rng);
            test_indices.extend_from_slice(&order[..held_out]);
            train_indices.extend_from_slice(&order[held_out..]);
        } else {
            test_indices.extend_from_slice(&class_rows);
        }
        row += cfg.per_class;
    }
    train_indices.sort_unstable();
    test_indices.sort_unstable();

    ZslDataset::new(
        features,
        labels,
        attributes,
        (0..seen).collect(),
        (seen..cfg.num_classes).collect(),
        train_indices,
        test_indices,
    )
}

//! Dataset ingestion (IDX binary format and a synthetic shape generator),
//! Dirichlet non-IID partitioning across clients, and labeled/unlabeled
//! splitting.

mod idx;
mod partition;
mod synth;

pub use idx::{load_idx, write_idx};
pub use partition::{partition_dirichlet, ClientShard, Partition, PartitionRecord, ShardManifest};
pub use synth::synth_shapes;

use crate::numkit::Tensor;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic in {path}: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { path: String, expected: u32, found: u32 },
    #[error("truncated file {path}: needed {needed} bytes, had {had}")]
    Truncated { path: String, needed: usize, had: usize },
    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("invalid partition spec: {0}")]
    InvalidSpec(String),
    #[error("partition failed: {0}")]
    PartitionFailed(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Pool of images with class labels; pixels normalized to [0, 1].
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    /// Number of classes.
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Vec<Tensor>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(DataError::CountMismatch {
                images: images.len(),
                labels: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(DataError::Invalid(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Ok(Dataset { images, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// (height, width, channels) of the first image.
    pub fn image_dims(&self) -> Option<(usize, usize, usize)> {
        self.images.first().map(|t| {
            let s = t.shape();
            (s[0], s[1], s[2])
        })
    }
}

/// One simulated client's private data: a small labeled part and the
/// label-stripped remainder.
#[derive(Debug, Clone)]
pub struct PartitionSpec {
    /// Client count K.
    pub clients: usize,
    /// Dirichlet concentration; smaller values give more skewed class mixes.
    pub eta: f64,
    /// Labeled fraction in (0, 1].
    pub gamma: f64,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.clients < 1 {
            return Err(DataError::InvalidSpec("clients must be >= 1".into()));
        }
        if !(self.eta > 0.0) {
            return Err(DataError::InvalidSpec(format!("eta must be > 0, got {}", self.eta)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(DataError::InvalidSpec(format!(
                "gamma must be in (0, 1], got {}",
                self.gamma
            )));
        }
        Ok(())
    }
}

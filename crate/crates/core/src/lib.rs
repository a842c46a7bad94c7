//! Convolutional network engine for silhouette classification: tensors,
//! layers, Adam, augmentation, dataset handling, and the k-fold training
//! loop, with deterministic results for a given seed.

pub mod augment;
pub mod data;
pub mod error;
pub mod layers;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;

pub use augment::{AugmentConfig, GrayImage, RawImage};
pub use data::{Dataset, FoldSplit, LabeledExample, SynthConfig};
pub use error::{Error, Result};
pub use layers::{ForwardCache, Gradients, NetworkConfig, NetworkParams};
pub use optim::{AdamHyper, AdamState};
pub use tensor::{matmul, Shape, Tensor};
pub use train::{Checkpoint, Ensemble, EpochStats, ProbabilityReport, TestReport, TrainConfig};

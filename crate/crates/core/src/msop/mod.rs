//! The MS-SoP network: multi-scale block, second-order pooling block, the
//! layer that composes them and the 3-class classifier.

pub mod blocks;
pub mod checkpoint;
pub mod classifier;
pub mod layer;
pub mod params;

pub use blocks::{channel_covariance, AttentionWeights, Gate, MsBlock, SopBlock};
pub use checkpoint::{Checkpoint, TrainingSnapshot};
pub use classifier::{ClassifierConfig, MsSopClassifier, SampleGrad};
pub use layer::{LayerSpec, MsSopLayer};
pub use params::{Binding, ConvUnit, Initializer, ParamId, ParamSet};

//! Multi-scale second-order pooling (MS-SoP) image classifier with a
//! visual-acuity blur curriculum and a two-stage ROI pipeline.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`], [`graph`] and [`optim`]: a small f64 tensor engine with
//!   reverse-mode differentiation and SGD.
//! * [`msop`]: the multi-scale block, the second-order pooling block, the
//!   layers built from them and the classifier network with checkpoints.
//! * [`curriculum`]: Gaussian blur, the sigma schedule and the training loop.
//! * [`pipeline`]: ROI crops, per-region classification and label aggregation.
//! * [`datasets`]: manifests, the synthetic shape/texture generator and the
//!   texture perturbations.
//! * [`eval`]: classification and detection metrics, patient-grouped folds.
//! * [`experiment`]: the regime ablation used by the CLI.

pub mod curriculum;
pub mod datasets;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod graph;
pub mod label;
pub mod msop;
pub mod optim;
pub mod pipeline;
pub mod plane;
pub mod tensor;

#[cfg(test)]
pub(crate) mod testing;

pub use error::{Error, Result};
pub use graph::{Graph, Padding, Var};
pub use label::Label;
pub use tensor::Tensor;

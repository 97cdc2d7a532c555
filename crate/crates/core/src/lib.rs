//! Lightweight visual place recognition: a dilated Ghost-module backbone
//! (GhostCNN) feeding a trainable VLAD aggregation layer, trained with a
//! weakly supervised triplet loss and evaluated by Recall@N.
//!
//! Module map:
//!
//! - [`tensor`]: dense NCHW tensors, convolution, batch norm and the other
//!   differentiable primitives, each with a paired backward pass, plus the
//!   finite-difference gradient checker and the `GDNV` container format.
//! - [`ghostnet`]: Ghost module, SE block, Ghost bottleneck and the
//!   five-stage backbone with per-stage dilation ("a-b" schemes).
//! - [`netvlad`]: soft-assignment VLAD layer, k-means initialisation and
//!   PCA whitening.
//! - [`training`]: triplet loss, tuple mining, SGD with momentum.
//! - [`retrieval`]: descriptor index, Recall@N, synthetic geotagged data,
//!   manifest and PPM I/O.
//! - [`costmodel`]: analytical MAC/FLOP/parameter accounting.
//! - [`model`]: the assembled backbone + VLAD (+ optional whitening) model.

pub mod costmodel;
pub mod error;
pub mod experiment;
pub mod ghostnet;
pub mod gradsuite;
pub mod model;
pub mod netvlad;
pub mod retrieval;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};

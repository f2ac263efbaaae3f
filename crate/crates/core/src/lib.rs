//! Desk-scale self-supervised learning lab.
//!
//! The central lever studied here is the backbone representation width `D`
//! relative to the projector width `K`: everything else (autodiff, losses,
//! samplers, probes, analysis) exists to train small networks across a
//! `D`/`K` grid and measure what the representation keeps.
//!
//! Layout:
//! - [`tensor`]: dense f64 tensors with reverse-mode autodiff and a
//!   finite-difference gradient oracle
//! - [`model`]: backbone/projector networks with `D` and the projector
//!   widths as first-class configuration
//! - [`losses`]: NT-Xent, VICReg, and cross-entropy
//! - [`data`]: synthetic datasets, view augmentation, samplers, CIFAR-10
//!   binary ingestion
//! - [`training`]: SGD+momentum / AdamW and the pretraining loop
//! - [`evaluation`]: frozen-representation extraction and linear/MLP probes
//! - [`analysis`]: sparsity profiles, binarization, quantization-collision
//!   Monte Carlo, Jacobian norms, gradient-subspace confinement

pub mod analysis;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;

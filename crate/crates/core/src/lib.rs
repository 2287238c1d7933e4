//! Class-conditional synthetic data generation for subject × feature
//! matrices via ICA, and a multimodal multilayer perceptron pre-trained on
//! the synthetic stream.
//!
//! The modules follow the data flow: [`datamodel`] loads matrices and
//! labels, [`ica`] factors them into loadings and sources, [`rvgen`] and
//! [`generator`] resample per-class loadings into labeled synthetic
//! batches, [`mlp`] trains on them, and [`pipeline`] runs the
//! cross-validated comparison against the [`baselines`].

pub mod baselines;
pub mod datamodel;
pub mod error;
pub mod generator;
pub mod ica;
pub mod mlp;
pub mod numerics;
pub mod persist;
pub mod pipeline;
pub mod rvgen;

pub use datamodel::{Label, LabeledDataset, Matrix, MatrixFormat, MultimodalDataset};
pub use error::{Error, Result};
pub use numerics::RngStream;

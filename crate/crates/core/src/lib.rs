//! Implicit feature alignment for semantic segmentation: a pyramid encoder
//! whose multi-level features are decoded at arbitrary continuous
//! coordinates by a shared MLP over nearest latent codes, relative offsets,
//! and sinusoidal position encodings — plus conventional FPN-style
//! baselines, training, and evaluation utilities. Everything runs on a
//! small tape-based reverse-mode autodiff engine; no external ML runtime.

pub mod aligners;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod flops;
pub mod grid;
pub mod head;
pub mod metrics;
pub mod model;
pub mod pnm;
pub mod posenc;
pub mod synth;
pub mod tensor;
pub mod train;

pub use autodiff::{AdError, ParamId, ParamStore, Tape, VarId, IGNORE_LABEL};
pub use config::{AlignerKind, RunConfig};
pub use grid::{FeatureGrid, QueryCoord};
pub use head::{IfaHead, Pyramid};
pub use model::Model;
pub use posenc::{PeMode, PosEncoder};
pub use tensor::{Precision, Tensor};

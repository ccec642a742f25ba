//! Relational-reasoning OOD detection with controllable class separation.
//!
//! A toy relational network is pre-trained on same/different pairs under one
//! of five objectives ([`losses::LossSpec`]). The geometry of its pair-feature
//! space is summarized by the R² index ([`analysis`]), and its encoder is used
//! without fine-tuning to score unseen classes ([`scoring`]). [`experiment`]
//! ties these together into sweeps and reports.

pub mod analysis;
pub mod data;
pub mod datagen;
pub mod error;
pub mod experiment;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod scoring;

pub use data::EmbeddingSet;
pub use error::{Error, Result};
pub use losses::{LossSpec, PairTarget};
pub use model::{Checkpoint, ModelParams, PairBatch, TrainConfig};
pub use numeric::{Matrix, Rng};

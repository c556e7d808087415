//! Post-training quantization of a tiny vision transformer with block-wise
//! evolutionary scale search.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense `f32` kernels with a fixed accumulation order.
//! * [`quant`]: uniform and log2 fake quantization, scale initializers and
//!   bias correction.
//! * [`model`]: the quantization-aware transformer, its per-block scale
//!   vectors and the `EVQM` container format.
//! * [`data`]: the `EVQD` dataset format, synthetic data and batching.
//! * [`losses`]: infoNCE and the comparison losses, plus the batch-averaged
//!   fitness used by the search.
//! * [`search`]: block-wise evolutionary search and the finite-difference
//!   gradient baselines.
//! * [`landscape`]: 2-D loss-landscape probes, roughness and synthetic
//!   egg-carton surfaces.

pub mod data;
pub mod error;
pub mod landscape;
pub mod losses;
pub mod model;
pub mod quant;
pub mod search;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;

//! Lung CT infection segmentation with an attention-gated, multi-scale
//! dilated U-Net, trained per patient split and fused by majority vote.

mod binio;
pub mod config;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod network;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use network::{ModelSpec, ModelState, Variant};
pub use scalar::Scalar;
pub use tensor::{ConvGeometry, Graph, Tensor, Var};

/// Deterministic generator used for every seeded draw.
pub type SeedRng = rand_chacha::ChaCha8Rng;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type ModelState32 = ModelState<f32>;
pub type ModelState64 = ModelState<f64>;

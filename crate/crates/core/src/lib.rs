//! Semantic segmentation toolkit: a small autodiff tensor engine, rotary
//! position encoding, illumination correction, label-noise filtering,
//! metrics, a patch transformer and dataset I/O.

pub mod csec;
pub mod dataio;
pub mod denoise;
pub mod gradcheck;
pub mod kv;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod rng;
pub mod rope;
pub mod segnet;
pub mod tensor;

pub use tensor::{Element, Gradients, Graph, Tensor, TensorError, Var};

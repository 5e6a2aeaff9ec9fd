//! Content-aware feature reassembly (CARAFE++) for dense 4-D tensors.
//!
//! The crate bundles the operator itself ([`carafe`]), the convolution and
//! normalization primitives it is assembled from ([`nn`]), rule-based and
//! learned resampling baselines ([`baselines`]), a finite-difference gradient
//! oracle ([`gradcheck`]), toy training harnesses ([`demo`]) and a binary
//! tensor / PGM file layer ([`io`]).

pub mod baselines;
pub mod carafe;
pub mod demo;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod nn;
pub mod tensor;

pub use baselines::{ResampleKind, ResampleOp};
pub use carafe::{
    carafe_backward, carafe_forward, map_target_to_source, predict_kernels, reassemble, CarafeCache,
    CarafeConfig, CarafeLayer, CarafeParams, Direction, KernelField, Normalizer,
};
pub use error::{Error, Result};
pub use tensor::{DType, Scalar, Shape, Tensor};

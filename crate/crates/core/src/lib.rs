//! Coarse-to-fine multi-exposure fusion and exposure correction on Laplacian
//! pyramids, with the small reverse-mode autodiff engine it trains on.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod correction;
pub mod data;
pub mod error;
pub mod eval;
pub mod fixtures;
pub mod fusion;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod pyramid;
pub mod tensor;
pub mod train;

pub use autodiff::{ParamId, ParamStore, Parameter, Tape, Var};
pub use error::{Error, Result};
pub use model::{count_flops, count_params, BlockOrder, ExposureSequence, FcNet, ModelConfig, SizePreset, Variant};
pub use tensor::{Real, Tensor};

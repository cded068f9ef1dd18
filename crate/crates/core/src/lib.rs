//! Trainable Fisher Vector encoding on top of a small convolutional backbone.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the bottom of this file name the common instantiations.

pub mod backbone;
pub mod bench;
pub mod classifier;
pub mod config;
pub mod data;
pub mod error;
pub mod fisher;
pub mod gmm;
pub mod gradcheck;
pub mod net;
pub mod patches;
pub mod pipeline;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

pub use backbone::Init;
pub use classifier::{Encoder, SvmModel};
pub use config::RunConfig;
pub use data::{Checkpoint, Dataset, SyntheticSpec};
pub use fisher::{FisherParams, FisherVector};
pub use gmm::{EmConfig, GmmModel};
pub use net::{FisherNet, NetConfig};
pub use patches::Rect;
pub use training::{Regime, TrainConfig};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type GmmModel32 = GmmModel<f32>;
pub type GmmModel64 = GmmModel<f64>;
pub type FisherParams32 = FisherParams<f32>;
pub type FisherParams64 = FisherParams<f64>;
pub type FisherNet32 = FisherNet<f32>;
pub type FisherNet64 = FisherNet<f64>;
pub type Dataset32 = Dataset<f32>;
pub type Dataset64 = Dataset<f64>;

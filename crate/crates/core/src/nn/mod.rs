//! Tensor building blocks shared by the codec and the discriminators.

pub mod layers;
pub mod ops;
pub mod params;
pub mod spectral;

pub use params::{ParamStore, TensorData};

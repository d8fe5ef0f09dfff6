//! A desk-scale laboratory for initialization rate and weight decay in
//! small language models: an autodiff engine, a Llama-style decoder,
//! AdamW training, condensation and dominance metrics, and circuit-ensemble
//! norm calculus.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`, default `f64`);
//! the aliases below name the common instantiations.

pub mod analysis;
pub mod config;
pub mod data;
pub mod engine;
pub mod init;
pub mod model;
pub mod optim;
pub mod scalar;
pub mod theory;
pub mod trainer;

pub use scalar::Scalar;

pub type TensorF32 = engine::Tensor<f32>;
pub type TensorF64 = engine::Tensor<f64>;
pub type GraphF32 = engine::Graph<f32>;
pub type GraphF64 = engine::Graph<f64>;
pub type ModelParamsF32 = model::ModelParams<f32>;
pub type ModelParamsF64 = model::ModelParams<f64>;
pub type OptimStateF32 = optim::OptimState<f32>;
pub type OptimStateF64 = optim::OptimState<f64>;

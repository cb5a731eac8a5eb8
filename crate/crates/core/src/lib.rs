//! Bird's-eye-view driving agents trained with PPO in a desk-scale simulator.

pub mod autodiff;
pub mod bev;
pub mod geometry;
pub mod nn;
pub mod policy;
pub mod scalar;
pub mod simworld;

pub use scalar::Scalar;

pub type Tensor32 = autodiff::Tensor<f32>;
pub type Tensor64 = autodiff::Tensor<f64>;
pub type Tape32 = autodiff::Tape<f32>;
pub type Tape64 = autodiff::Tape<f64>;
pub type ParamStore32 = autodiff::ParamStore<f32>;
pub type ParamStore64 = autodiff::ParamStore<f64>;

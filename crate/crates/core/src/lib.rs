pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod graph;
pub mod losses;
pub mod model;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod weights;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
pub type TrainState32 = train::TrainState<f32>;
pub type TrainState64 = train::TrainState<f64>;
pub type CrowdSample32 = data::CrowdSample<f32>;
pub type CrowdSample64 = data::CrowdSample<f64>;
pub type DensityMap32 = model::DensityMap<f32>;
pub type DensityMap64 = model::DensityMap<f64>;

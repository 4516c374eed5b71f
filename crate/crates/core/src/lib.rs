//! Marked spatio-temporal point processes: classical intensity baselines and
//! a transformer encoder-decoder with normalizing-flow heads.

pub mod autodiff;
pub mod benchmark;
pub mod classical;
pub mod events;
pub mod heads;
pub mod linalg;
pub mod neural;
pub mod presets;
pub mod quadrature;
pub mod rng;
pub mod scalar;
pub mod simulate;
pub mod train;

pub use scalar::Scalar;

pub type Tensor64 = autodiff::Tensor<f64>;
pub type Tape64 = autodiff::Tape<f64>;
pub type ParamStore64 = autodiff::ParamStore<f64>;
pub type TemporalModel64 = classical::TemporalModel<f64>;
pub type GmmPairwise64 = classical::GmmPairwise<f64>;
pub type GmmKCluster64 = classical::GmmKCluster<f64>;
pub type SpatialBaseline64 = classical::SpatialBaseline<f64>;
pub type Batch64 = train::Batch<f64>;
pub type TrainOutcome64 = train::TrainOutcome<f64>;

pub type Tensor32 = autodiff::Tensor<f32>;
pub type ParamStore32 = autodiff::ParamStore<f32>;

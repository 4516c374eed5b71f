//! Parametric intensity baselines: Poisson, Hawkes and self-correcting
//! processes, their maximum-likelihood fits, first-moment forecasting and
//! conditional Gaussian-mixture spatial models.

mod baseline;
mod gmm;
mod mle;
mod moment;
mod temporal;

pub use baseline::{baseline_loss, BaselineLoss, BaselineMode, SpatialBaseline};
pub use gmm::{
    gmm_kcluster_fit, gmm_pairwise_fit, GmmFitReport, GmmKCluster, GmmPairwise, PairwiseFitConfig,
};
pub use mle::{fit_mle, FitMeta, FittedModel, MleConfig};
pub use moment::{expected_next_time, sequential_predict};
pub use temporal::{ModelKind, TemporalModel};

use crate::quadrature::QuadError;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClassicalError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("evaluation time {t} precedes the end of history {last}")]
    BeforeHistory { t: f64, last: f64 },
    #[error("zero intensity at observed event {index}")]
    ZeroIntensity { index: usize },
    #[error("need at least {needed} events, have {have}")]
    TooFewEvents { needed: usize, have: usize },
    #[error("defective waiting-time distribution: survival stays at {survival:e}")]
    Defective { survival: f64 },
    #[error("fit diverged: {0}")]
    Divergence(String),
    #[error("singular bandwidth or covariance: {0}")]
    Singular(String),
    #[error("empty cluster after {retries} reseeds")]
    EmptyCluster { retries: usize },
    #[error(transparent)]
    Quadrature(#[from] QuadError),
}

pub type Result<T> = std::result::Result<T, ClassicalError>;

//! Named experiment settings.

use crate::classical::TemporalModel;
use crate::events::{normalize, split_dataset, window_sequences, EventError, NormalizedDataset, SequenceDataset};
use crate::neural::NetConfig;
use crate::rng::{streams, RngState};
use crate::simulate::{default_pinwheel_hawkes, make_pinwheel_dataset, PinwheelConfig, SimError};
use crate::train::TrainConfig;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PresetError {
    #[error(transparent)]
    Simulate(#[from] SimError),
    #[error(transparent)]
    Events(#[from] EventError),
}

/// Data generation, windowing, network and optimizer settings in one place.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preset {
    pub pinwheel: PinwheelConfig,
    pub hawkes: TemporalModel<f64>,
    pub seq_len: usize,
    pub overlap: usize,
    pub fractions: (f64, f64, f64),
    pub net: NetConfig,
    pub train: TrainConfig,
}

impl Preset {
    /// Full-size settings: 15 x 150 pinwheel, windows of 500 with overlap 498.
    pub fn full() -> Self {
        Self {
            pinwheel: PinwheelConfig::default(),
            hawkes: default_pinwheel_hawkes(),
            seq_len: 500,
            overlap: 498,
            fractions: (0.80, 0.14, 0.06),
            net: NetConfig::default(),
            train: TrainConfig::default(),
        }
    }

    /// Small settings that run on one CPU in minutes: 3 x 50 pinwheel,
    /// windows of 60 (57 inputs, 3 outputs), a two-layer two-head network.
    /// Batches of 8 give enough optimizer steps on the 38 training windows;
    /// dropout 0.2 and gradient clipping keep the small run stable.
    pub fn desk() -> Self {
        Self {
            pinwheel: PinwheelConfig { n_clusters: 3, per_cluster: 50, ..PinwheelConfig::default() },
            hawkes: default_pinwheel_hawkes(),
            seq_len: 60,
            overlap: 58,
            fractions: (0.80, 0.14, 0.06),
            net: NetConfig { d_model: 32, n_layers: 2, n_heads: 2, n_in: 57, l_out: 3, dropout: 0.2, ..NetConfig::default() },
            train: TrainConfig { epochs: 200, batch_size: 8, grad_clip: Some(5.0), ..TrainConfig::default() },
        }
    }

    /// Simulates, windows and splits the pinwheel data.
    pub fn dataset(&self, seed: u64) -> Result<SequenceDataset, PresetError> {
        let mut rng = RngState::new(seed, streams::PINWHEEL);
        let events = make_pinwheel_dataset(&self.pinwheel, &self.hawkes, &mut rng)?;
        let windows = window_sequences(&events, self.seq_len, self.overlap, self.net.n_in)?;
        Ok(split_dataset(windows, self.fractions, seed)?)
    }

    pub fn normalized(&self, seed: u64) -> Result<NormalizedDataset, PresetError> {
        Ok(normalize(&self.dataset(seed)?))
    }
}

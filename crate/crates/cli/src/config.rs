//! Run configuration: the optimizer and architecture knobs in a TOML file,
//! with command-line flags applied on top.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use stpp::classical::TemporalModel;
use stpp::neural::{NetConfig, TimeFlow};
use stpp::presets::Preset;
use stpp::simulate::PinwheelConfig;
use stpp::train::{Ablation, TimeSource, TrainConfig};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub sequence_length: usize,
    pub input_length: usize,
    pub output_length: usize,
    /// Events shared by consecutive windows.
    pub overlap: usize,
    /// Train, validation and test fractions.
    pub fractions: [f64; 3],
    pub attention_layers: usize,
    pub attention_heads: usize,
    pub embedding_dim: usize,
    pub dropout_rate: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub time_flow: TimeFlow,
    pub ablation: Ablation,
    pub grad_clip: Option<f64>,
    pub network: NetworkExtras,
    pub schedule: Schedule,
    pub data: DataSource,
    pub paths: Paths,
}

/// Architecture settings without a row in the usual hyper-parameter table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkExtras {
    pub key_dim: usize,
    pub ff_mult: usize,
    pub encoder_causal: bool,
    pub head_hidden: usize,
    pub flow_layers: usize,
    pub flow_hidden: usize,
    pub flow_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    pub lr_factor: f64,
    pub lr_patience: usize,
    pub lr_floor: f64,
    pub time_source: TimeSource,
    pub n_samples: usize,
}

/// Synthetic data generated when no dataset directory is given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSource {
    pub pinwheel: PinwheelConfig,
    pub hawkes: TemporalModel<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for NetworkExtras {
    fn default() -> Self {
        let n = NetConfig::default();
        Self {
            key_dim: n.key_dim,
            ff_mult: n.ff_mult,
            encoder_causal: n.encoder_causal,
            head_hidden: n.head_hidden,
            flow_layers: n.flow_layers,
            flow_hidden: n.flow_hidden,
            flow_scale: n.flow_scale,
        }
    }
}

impl Default for Schedule {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lr_factor: t.lr_factor,
            lr_patience: t.lr_patience,
            lr_floor: t.lr_floor,
            time_source: t.time_source,
            n_samples: t.n_samples,
        }
    }
}

impl Default for DataSource {
    fn default() -> Self {
        let p = Preset::full();
        Self { pinwheel: p.pinwheel, hawkes: p.hawkes }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::from_preset(&Preset::full())
    }
}

impl RunConfig {
    pub fn from_preset(p: &Preset) -> Self {
        Self {
            seed: p.train.seed,
            epochs: p.train.epochs,
            batch_size: p.train.batch_size,
            learning_rate: p.train.lr0,
            sequence_length: p.seq_len,
            input_length: p.net.n_in,
            output_length: p.net.l_out,
            overlap: p.overlap,
            fractions: [p.fractions.0, p.fractions.1, p.fractions.2],
            attention_layers: p.net.n_layers,
            attention_heads: p.net.n_heads,
            embedding_dim: p.net.d_model,
            dropout_rate: p.net.dropout,
            lambda1: 0.1,
            lambda2: 0.1,
            time_flow: p.net.time_flow,
            ablation: p.train.ablation,
            grad_clip: p.train.grad_clip,
            network: NetworkExtras {
                key_dim: p.net.key_dim,
                ff_mult: p.net.ff_mult,
                encoder_causal: p.net.encoder_causal,
                head_hidden: p.net.head_hidden,
                flow_layers: p.net.flow_layers,
                flow_hidden: p.net.flow_hidden,
                flow_scale: p.net.flow_scale,
            },
            schedule: Schedule {
                lr_factor: p.train.lr_factor,
                lr_patience: p.train.lr_patience,
                lr_floor: p.train.lr_floor,
                time_source: p.train.time_source,
                n_samples: p.train.n_samples,
            },
            data: DataSource { pinwheel: p.pinwheel.clone(), hawkes: p.hawkes },
            paths: Paths::default(),
        }
    }

    pub fn preset(name: &str) -> Result<Self, CliError> {
        match name {
            "desk" => Ok(Self::from_preset(&Preset::desk())),
            "full" => Ok(Self::from_preset(&Preset::full())),
            other => Err(CliError::Usage(format!("unknown preset `{other}` (desk, full)"))),
        }
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::Config(vec![format!("{}: {e}", path.display())]))
    }

    /// The file's settings, or the full-size defaults without a file.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self, CliError> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn net(&self, d_space: usize) -> NetConfig {
        NetConfig {
            d_model: self.embedding_dim,
            n_layers: self.attention_layers,
            n_heads: self.attention_heads,
            key_dim: self.network.key_dim,
            ff_mult: self.network.ff_mult,
            dropout: self.dropout_rate,
            d_space,
            n_in: self.input_length,
            l_out: self.output_length,
            encoder_causal: self.network.encoder_causal,
            head_hidden: self.network.head_hidden,
            flow_layers: self.network.flow_layers,
            flow_hidden: self.network.flow_hidden,
            flow_scale: self.network.flow_scale,
            time_flow: self.time_flow,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr0: self.learning_rate,
            lr_factor: self.schedule.lr_factor,
            lr_patience: self.schedule.lr_patience,
            lr_floor: self.schedule.lr_floor,
            seed: self.seed,
            ablation: self.ablation,
            time_source: self.schedule.time_source,
            n_samples: self.schedule.n_samples,
            grad_clip: self.grad_clip,
        }
    }

    pub fn fractions(&self) -> (f64, f64, f64) {
        (self.fractions[0], self.fractions[1], self.fractions[2])
    }

    /// Every problem with the settings, not just the first.
    pub fn validate(&self, d_space: usize) -> Result<(), CliError> {
        let mut errs = Vec::new();
        if self.input_length + self.output_length != self.sequence_length {
            errs.push(format!(
                "input_length ({}) + output_length ({}) must equal sequence_length ({})",
                self.input_length, self.output_length, self.sequence_length
            ));
        }
        if self.overlap >= self.sequence_length {
            errs.push(format!("overlap ({}) must be below sequence_length ({})", self.overlap, self.sequence_length));
        }
        if self.fractions.iter().any(|f| !(*f > 0.0)) || (self.fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            errs.push(format!("fractions must be positive and sum to 1, got {:?}", self.fractions));
        }
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(v >= 0.0 && v.is_finite()) {
                errs.push(format!("{name} must be nonnegative, got {v}"));
            }
        }
        if let Err(e) = self.net(d_space).validate() {
            errs.extend(split_messages(&e.to_string(), "invalid network config: "));
        }
        if let Err(e) = self.train().validate() {
            errs.extend(split_messages(&e.to_string(), "invalid config: "));
        }
        if let Err(e) = self.data.pinwheel.validate() {
            errs.push(e.to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(errs))
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

fn split_messages(msg: &str, prefix: &str) -> Vec<String> {
    msg.trim_start_matches(prefix).split("; ").map(str::to_string).collect()
}

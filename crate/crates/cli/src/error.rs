use serde_json::json;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
    #[error("non-finite output: {0}")]
    NonFinite(String),
    #[error(transparent)]
    Events(#[from] stpp::events::EventError),
    #[error(transparent)]
    Simulate(#[from] stpp::simulate::SimError),
    #[error(transparent)]
    Classical(#[from] stpp::classical::ClassicalError),
    #[error(transparent)]
    Train(#[from] stpp::train::TrainError),
    #[error(transparent)]
    Neural(#[from] stpp::neural::NeuralError),
    #[error(transparent)]
    Autodiff(#[from] stpp::autodiff::AutodiffError),
    #[error(transparent)]
    Preset(#[from] stpp::presets::PresetError),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.display().to_string(), source }
    }

    pub fn format(path: &Path, message: impl ToString) -> Self {
        Self::Format { path: path.display().to_string(), message: message.to_string() }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::Usage(_) => "usage",
            Self::Config(_) => "config",
            Self::Io { .. } => "io",
            Self::Format { .. } => "format",
            Self::NonFinite(_) => "non_finite",
            Self::Events(_) => "events",
            Self::Simulate(_) => "simulate",
            Self::Classical(_) => "classical",
            Self::Train(_) => "train",
            Self::Neural(_) => "neural",
            Self::Autodiff(_) => "autodiff",
            Self::Preset(_) => "data",
        }
    }

    /// Machine-readable form written to stderr.
    pub fn to_json(&self) -> serde_json::Value {
        let mut err = json!({ "kind": self.kind(), "message": self.to_string() });
        if let Self::Config(problems) = self {
            err["problems"] = json!(problems);
        }
        json!({ "error": err })
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

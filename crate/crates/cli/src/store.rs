//! On-disk artifacts: dataset directories, window files, JSON and checkpoints.

use crate::error::{CliError, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use stpp::autodiff::{load_checkpoint, save_checkpoint, ParamStore};
use stpp::events::{EventSequence, NormStats, SequenceDataset, Split};
use stpp::neural::NetConfig;
use stpp::train::Ablation;

pub const DATASET_FORMAT: &str = "stpp-dataset/1";
pub const WINDOWS_FORMAT: &str = "stpp-windows/1";

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let f = File::open(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_reader(BufReader::new(f)).map_err(|e| CliError::format(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::format(path, e))?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

/// Overlapping windows cut from one event stream, before splitting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WindowFile {
    pub format: String,
    pub d: usize,
    pub sequence_length: usize,
    pub overlap: usize,
    pub input_length: usize,
    pub source: String,
    pub windows: Vec<EventSequence>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub d: usize,
    pub input_length: usize,
    pub output_length: usize,
    pub fractions: [f64; 3],
    pub seed: u64,
    pub counts: SplitCounts,
    pub stats: NormStats,
    /// Free-form description of where the windows came from.
    pub source: serde_json::Value,
}

pub fn write_dataset(dir: &Path, ds: &SequenceDataset, fractions: [f64; 3], seed: u64, source: serde_json::Value) -> Result<()> {
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.into(),
        d: ds.d,
        input_length: ds.n_in(),
        output_length: ds.l_out(),
        fractions,
        seed,
        counts: SplitCounts { train: ds.train.len(), val: ds.val.len(), test: ds.test.len() },
        stats: ds.stats.clone(),
        source,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    write_json(&dir.join("train.json"), &ds.train)?;
    write_json(&dir.join("val.json"), &ds.val)?;
    write_json(&dir.join("test.json"), &ds.test)
}

pub fn read_dataset(dir: &Path) -> Result<SequenceDataset> {
    let manifest_path = dir.join("manifest.json");
    let manifest: DatasetManifest = read_json(&manifest_path)?;
    if manifest.format != DATASET_FORMAT {
        return Err(CliError::format(&manifest_path, format!("expected format {DATASET_FORMAT}, got {}", manifest.format)));
    }
    let ds = SequenceDataset {
        train: read_json(&dir.join("train.json"))?,
        val: read_json(&dir.join("val.json"))?,
        test: read_json(&dir.join("test.json"))?,
        stats: manifest.stats,
        d: manifest.d,
    };
    let counts = (ds.train.len(), ds.val.len(), ds.test.len());
    let want = (manifest.counts.train, manifest.counts.val, manifest.counts.test);
    if counts != want {
        return Err(CliError::format(&manifest_path, format!("split sizes {counts:?} differ from the manifest's {want:?}")));
    }
    Ok(ds)
}

/// `train_3`, `val_0`, `test_12`.
pub fn parse_sequence_id(id: &str) -> Result<(Split, usize)> {
    let bad = || CliError::Usage(format!("sequence id `{id}` must look like test_0, val_3 or train_12"));
    let (name, idx) = id.rsplit_once('_').ok_or_else(bad)?;
    let split = match name {
        "train" => Split::Train,
        "val" => Split::Val,
        "test" => Split::Test,
        _ => return Err(bad()),
    };
    Ok((split, idx.parse().map_err(|_| bad())?))
}

/// Everything a checkpoint needs besides its weights to be used on its own.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub net: NetConfig,
    pub stats: NormStats,
    pub data: PathBuf,
    pub ablation: Ablation,
    pub epoch_time: usize,
    pub epoch_space: usize,
    pub seed: u64,
}

pub fn save_ckpt(path: &Path, store: &ParamStore<f64>, meta: &CheckpointMeta) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let meta = serde_json::to_value(meta).map_err(|e| CliError::format(path, e))?;
    let f = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = BufWriter::new(f);
    save_checkpoint(store, &meta, &mut w)?;
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn load_ckpt(path: &Path) -> Result<(ParamStore<f64>, CheckpointMeta)> {
    let f = File::open(path).map_err(|e| CliError::io(path, e))?;
    let (store, meta) = load_checkpoint(BufReader::new(f))?;
    let meta = serde_json::from_value(meta).map_err(|e| CliError::format(path, e))?;
    Ok((store, meta))
}

use super::tensor::Tensor;
use super::{AutodiffError, Result};
use crate::rng::RngState;
use crate::scalar::Scalar;
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub trainable: bool,
}

/// Named learnable arrays, in insertion order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: IndexMap<String, Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: IndexMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(AutodiffError::DuplicateParam(name));
        }
        self.params.insert(name, Param { value, trainable: true });
        Ok(())
    }

    /// Uniform `(-1/√fan_in, 1/√fan_in)` initialization.
    pub fn insert_uniform(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut RngState) -> Result<()> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::lit((2.0 * rng.uniform() - 1.0) * bound)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>> {
        self.params.get(name).map(|p| &p.value).ok_or_else(|| AutodiffError::UnknownParam(name.to_string()))
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        let p = self.params.get_mut(name).ok_or_else(|| AutodiffError::UnknownParam(name.to_string()))?;
        p.trainable = trainable;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }
}

const MAGIC: &[u8; 5] = b"STPP1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Entry {
    shape: Vec<usize>,
    offset: usize,
    #[serde(default = "yes")]
    trainable: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    params: IndexMap<String, Entry>,
    meta: serde_json::Value,
}

/// Writes `STPP1`, a little-endian `u64` header length, the JSON header and
/// the concatenated little-endian `f64` payload.
pub fn save_checkpoint<T: Scalar, W: Write>(store: &ParamStore<T>, meta: &serde_json::Value, mut w: W) -> Result<()> {
    let mut offset = 0;
    let mut entries = IndexMap::new();
    for (name, p) in store.iter() {
        entries.insert(name.clone(), Entry { shape: p.value.shape().to_vec(), offset, trainable: p.trainable });
        offset += p.value.len();
    }
    let header = serde_json::to_vec(&Header { params: entries, meta: meta.clone() })?;
    w.write_all(MAGIC)?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    for (_, p) in store.iter() {
        for v in p.value.data() {
            w.write_all(&v.to_f64_lossy().to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_checkpoint<T: Scalar, R: Read>(mut r: R) -> Result<(ParamStore<T>, serde_json::Value)> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(AutodiffError::Checkpoint("bad magic".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    let mut header = vec![0u8; len];
    r.read_exact(&mut header)?;
    let header: Header = serde_json::from_slice(&header)?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() % 8 != 0 {
        return Err(AutodiffError::Checkpoint("payload is not a whole number of f64 values".into()));
    }
    let values: Vec<f64> = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    let mut store = ParamStore::new();
    for (name, e) in header.params {
        let n: usize = e.shape.iter().product();
        let slice = values
            .get(e.offset..e.offset + n)
            .ok_or_else(|| AutodiffError::Checkpoint(format!("payload too short for `{name}`")))?;
        store.insert(name.clone(), Tensor::from_f64(e.shape, slice)?)?;
        store.set_trainable(&name, e.trainable)?;
    }
    Ok((store, header.meta))
}

//! Checkpoint container: a JSON metadata record followed by named tensors in
//! their native precision.
//!
//! Layout (little-endian): magic `FXCK`, `u32` format version, `u64` metadata
//! length, metadata JSON, then each tensor's raw elements at the offset
//! recorded in the metadata (relative to the end of the metadata).

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};
use crate::training::{FreezeStrategy, LoaderState, Stage, TrainConfig};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"FXCK";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const MOMENT1_PREFIX: &str = "optim.m.";
pub const MOMENT2_PREFIX: &str = "optim.v.";

/// ChaCha generator position. Fields are decimal strings so 128-bit word
/// positions survive JSON.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: String,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        let seed: String = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        Self { seed, stream: rng.get_stream().to_string(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = |what: &str| Error::Checkpoint(format!("bad rng {what} in checkpoint"));
        if self.seed.len() != 64 {
            return Err(bad("seed"));
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad("seed"))?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream.parse().map_err(|_| bad("stream"))?);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad("word position"))?);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub dtype: String,
    pub stage: Stage,
    pub step: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Resolved run configuration, when saved by a run.
    pub run_config: Option<serde_json::Value>,
    pub seed: u64,
    pub rng: RngState,
    pub freeze: FreezeStrategy,
    /// Names of parameters updated by the optimiser.
    pub trainable: Vec<String>,
    pub optimiser_step: u64,
    /// `[dataset][worker]`.
    pub loaders: Vec<Vec<LoaderState>>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub meta: CheckpointMeta,
    /// Parameters by name, plus optimiser moments under `optim.m.` / `optim.v.`.
    pub tensors: BTreeMap<String, Tensor<T>>,
}

fn elem_bytes(dtype: &str) -> Result<usize> {
    match dtype {
        "f32" => Ok(4),
        "f64" => Ok(8),
        d => Err(Error::Checkpoint(format!("unknown dtype `{d}`"))),
    }
}

impl<T: Scalar> Checkpoint<T> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut meta = self.meta.clone();
        meta.format_version = CHECKPOINT_VERSION;
        meta.dtype = T::NAME.into();
        let width = elem_bytes(T::NAME)?;
        let mut offset = 0u64;
        meta.tensors = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry { name: name.clone(), shape: t.shape().to_vec(), offset };
                offset += (t.numel() * width) as u64;
                e
            })
            .collect();
        let json = serde_json::to_vec(&meta)?;
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("partial");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            w.write_all(&CHECKPOINT_MAGIC)?;
            w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
            w.write_all(&(json.len() as u64).to_le_bytes())?;
            w.write_all(&json)?;
            for t in self.tensors.values() {
                for &v in t.as_slice() {
                    let v = v.to_f64_lossless();
                    if width == 4 {
                        w.write_all(&(v as f32).to_le_bytes())?;
                    } else {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
            }
            w.flush()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(path)?.read_to_end(&mut bytes)?;
        let corrupt = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
        if bytes.len() < 16 || bytes[..4] != CHECKPOINT_MAGIC {
            return Err(corrupt("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(corrupt(&format!(
                "format version {version} is not supported (this build reads version {CHECKPOINT_VERSION})"
            )));
        }
        let meta_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let data_start = 16usize.checked_add(meta_len).filter(|&e| e <= bytes.len()).ok_or_else(|| corrupt("truncated metadata"))?;
        let meta: CheckpointMeta =
            serde_json::from_slice(&bytes[16..data_start]).map_err(|e| corrupt(&format!("metadata: {e}")))?;
        if meta.format_version != version {
            return Err(corrupt("metadata version disagrees with header"));
        }
        if meta.dtype != T::NAME {
            return Err(corrupt(&format!("stored as {}, requested {}", meta.dtype, T::NAME)));
        }
        let width = elem_bytes(&meta.dtype)?;
        let data = &bytes[data_start..];
        let mut tensors = BTreeMap::new();
        for e in &meta.tensors {
            let n = numel(&e.shape);
            let start = e.offset as usize;
            let end = start + n * width;
            if end > data.len() {
                return Err(corrupt(&format!("tensor `{}` truncated", e.name)));
            }
            let vals: Vec<T> = data[start..end]
                .chunks_exact(width)
                .map(|c| {
                    if width == 4 {
                        T::lit(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    } else {
                        T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    }
                })
                .collect();
            tensors.insert(e.name.clone(), Tensor::new(e.shape.clone(), vals)?);
        }
        Ok(Self { meta, tensors })
    }

    /// Model parameters (everything outside the optimiser namespace).
    pub fn param_store(&self) -> Result<ParamStore<T>> {
        let mut s = ParamStore::new();
        for (name, t) in &self.tensors {
            if !name.starts_with(MOMENT1_PREFIX) && !name.starts_with(MOMENT2_PREFIX) {
                s.add(name.clone(), t.clone())?;
            }
        }
        Ok(s)
    }
}

//! Binary checkpoint format.
//!
//! Layout (little endian): magic `LVCK1`, `u32` format version, `u64` training
//! step, `u64` metadata length followed by that many bytes of TOML (model
//! config, optional vocabulary, free-form notes), `u32` tensor count, then per
//! tensor `u32` name length, name bytes, `u32` rank, `u64` dims and `f64` data.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ModelError, Result};
use crate::tensor::Tensor;
use crate::text::Vocabulary;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"LVCK1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Guards against absurd allocations from corrupt files.
const MAX_META: u64 = 64 << 20;
const MAX_NAME: u32 = 1 << 12;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub model: Model,
    pub vocab: Option<Vocabulary>,
    pub notes: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    #[serde(default)]
    vocab: Option<String>,
    #[serde(default)]
    notes: BTreeMap<String, String>,
    model: ModelConfig,
}

fn bad(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

impl Checkpoint {
    pub fn new(model: Model, step: u64) -> Self {
        Self {
            step,
            model,
            vocab: None,
            notes: BTreeMap::new(),
        }
    }

    pub fn with_vocab(mut self, vocab: Vocabulary) -> Self {
        self.vocab = Some(vocab);
        self
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let vocab = match &self.vocab {
            Some(v) => {
                let mut buf = Vec::new();
                v.write_to(&mut buf).map_err(|e| bad(e.to_string()))?;
                Some(String::from_utf8(buf).map_err(|e| bad(e.to_string()))?)
            }
            None => None,
        };
        let meta = Meta {
            vocab,
            notes: self.notes.clone(),
            model: self.model.config().clone(),
        };
        let meta = toml::to_string(&meta).map_err(|e| bad(e.to_string()))?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&self.step.to_le_bytes())?;
        w.write_all(&(meta.len() as u64).to_le_bytes())?;
        w.write_all(meta.as_bytes())?;
        let params = self.model.params();
        w.write_all(&(params.len() as u32).to_le_bytes())?;
        for (_, p) in params.iter() {
            w.write_all(&(p.name.len() as u32).to_le_bytes())?;
            w.write_all(p.name.as_bytes())?;
            let shape = p.value.shape();
            w.write_all(&(shape.len() as u32).to_le_bytes())?;
            for &d in shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in p.value.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let step = read_u64(&mut r)?;
        let meta_len = read_u64(&mut r)?;
        if meta_len > MAX_META {
            return Err(bad("metadata too large"));
        }
        let mut meta = vec![0u8; meta_len as usize];
        r.read_exact(&mut meta)?;
        let meta = String::from_utf8(meta).map_err(|e| bad(e.to_string()))?;
        let meta: Meta = toml::from_str(&meta).map_err(|e| bad(e.to_string()))?;
        let vocab = match meta.vocab {
            Some(text) => Some(
                Vocabulary::read_from(text.as_bytes()).map_err(|e| bad(e.to_string()))?,
            ),
            None => None,
        };
        let mut model = Model::zeros(meta.model)?;
        let count = read_u32(&mut r)? as usize;
        if count != model.params().len() {
            return Err(bad(format!(
                "{count} tensors stored, config implies {}",
                model.params().len()
            )));
        }
        let mut seen = vec![false; count];
        for _ in 0..count {
            let name_len = read_u32(&mut r)?;
            if name_len > MAX_NAME {
                return Err(bad("tensor name too long"));
            }
            let mut name = vec![0u8; name_len as usize];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| bad(e.to_string()))?;
            let id = model
                .params()
                .by_name(&name)
                .ok_or_else(|| bad(format!("unexpected tensor {name}")))?;
            if std::mem::replace(&mut seen[id.0], true) {
                return Err(bad(format!("tensor {name} stored twice")));
            }
            let rank = read_u32(&mut r)? as usize;
            let expected = model.params().get(id).value.shape().to_vec();
            if rank != expected.len() {
                return Err(bad(format!("tensor {name} has rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(&mut r)? as usize);
            }
            if shape != expected {
                return Err(bad(format!(
                    "tensor {name} has shape {shape:?}, config implies {expected:?}"
                )));
            }
            let n: usize = shape.iter().product();
            let mut buf = vec![0u8; n * 8];
            r.read_exact(&mut buf)?;
            let data = buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            model.params_mut().get_mut(id).value = Tensor::new(shape, data)?;
        }
        Ok(Self {
            step,
            model,
            vocab,
            notes: meta.notes,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

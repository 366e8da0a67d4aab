//! Self-describing parameter archives.
//!
//! Layout: the 8-byte magic `RFLBARCH`, a little-endian `u32` format version,
//! a little-endian `u64` header length, a JSON header, then every tensor's
//! elements in header order as little-endian values of the header's dtype.
//! The header carries tensor names and shapes plus free-form metadata.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, RefragModel};
use crate::nn::{Module, Tensor};
use crate::optim::{AdamW, AdamWConfig};
use crate::scalar::{dtype_width, read_le, Scalar};
use crate::selector::{PolicyConfig, PolicyNet};
use crate::training::Stage;

const MAGIC: &[u8; 8] = b"RFLBARCH";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    dtype: String,
    meta: Value,
    tensors: Vec<TensorEntry>,
}

/// Named tensors plus JSON metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Archive<T> {
    pub meta: Value,
    pub tensors: Vec<(String, Tensor<T>)>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl<T: Scalar> Archive<T> {
    pub fn new(meta: Value) -> Self {
        Self { meta, tensors: Vec::new() }
    }

    /// Appends every parameter of `module` under `prefix`.
    pub fn push_module<M: Module<T>>(&mut self, prefix: &str, module: &M) {
        for (name, t) in module.named_params(prefix) {
            self.tensors.push((name, t.clone()));
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Overwrites every parameter of `module` from the archive, by name.
    pub fn load_module<M: Module<T>>(&self, prefix: &str, module: &mut M) -> Result<()> {
        for (name, t) in module.named_params_mut(prefix) {
            let src = self.get(&name).ok_or_else(|| corrupt(format!("missing tensor {name}")))?;
            if src.shape != t.shape {
                return Err(corrupt(format!("tensor {name} has shape {:?}, expected {:?}", src.shape, t.shape)));
            }
            t.data.copy_from_slice(&src.data);
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            dtype: T::DTYPE.to_string(),
            meta: self.meta.clone(),
            tensors: self.tensors.iter().map(|(n, t)| TensorEntry { name: n.clone(), shape: t.shape.clone() }).collect(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + header.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            for &x in &t.data {
                x.write_le(&mut out);
            }
        }
        Ok(out)
    }

    /// Parses an archive, converting stored elements to `T`.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(corrupt("not an archive (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(corrupt(format!("unsupported format version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| corrupt("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        let width = dtype_width(&header.dtype).ok_or_else(|| corrupt(format!("unknown dtype {}", header.dtype)))?;
        let mut pos = 20 + hlen;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let raw = bytes.get(pos..pos + n * width).ok_or_else(|| corrupt(format!("truncated tensor {}", e.name)))?;
            let data = raw
                .chunks_exact(width)
                .map(|b| read_le::<T>(&header.dtype, b).ok_or_else(|| corrupt("unreadable element")))
                .collect::<Result<Vec<T>>>()?;
            pos += n * width;
            tensors.push((e.name, Tensor::from_vec(&e.shape, data)));
        }
        if pos != bytes.len() {
            return Err(corrupt("trailing bytes after last tensor"));
        }
        Ok(Self { meta: header.meta, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Checkpoint(format!("checkpoint not found: {}", path.display())),
            _ => Error::Io(e),
        })?;
        Self::from_bytes(&bytes)
    }
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    kind: String,
    stage: Stage,
    step: u64,
    config: ModelConfig,
    vocab: Option<String>,
    train_config: Value,
    optimizer: Option<OptimMeta>,
}

#[derive(Serialize, Deserialize)]
struct OptimMeta {
    config: AdamWConfig,
    steps: u64,
}

/// Model parameters with optimizer state and training provenance.
#[derive(Clone, Debug)]
pub struct ModelCheckpoint<T> {
    pub model: RefragModel<T>,
    pub optimizer: Option<AdamW<T>>,
    pub stage: Stage,
    pub step: u64,
    /// Characters of the vocabulary, in id order.
    pub vocab: Option<String>,
    pub train_config: Value,
}

impl<T: Scalar> ModelCheckpoint<T> {
    pub fn to_archive(&self) -> Result<Archive<T>> {
        let meta = ModelMeta {
            kind: "refrag_model".into(),
            stage: self.stage,
            step: self.step,
            config: self.model.config.clone(),
            vocab: self.vocab.clone(),
            train_config: self.train_config.clone(),
            optimizer: self.optimizer.as_ref().map(|o| OptimMeta { config: o.config.clone(), steps: o.steps }),
        };
        let mut ar = Archive::new(serde_json::to_value(meta)?);
        ar.push_module("", &self.model);
        if let Some(opt) = &self.optimizer {
            let names: Vec<String> = self.model.named_params("").into_iter().map(|(n, _)| n).collect();
            if !opt.m.is_empty() {
                for (name, (m, v)) in names.iter().zip(opt.m.iter().zip(&opt.v)) {
                    ar.tensors.push((format!("optim.m.{name}"), m.clone()));
                    ar.tensors.push((format!("optim.v.{name}"), v.clone()));
                }
            }
        }
        Ok(ar)
    }

    pub fn from_archive(ar: &Archive<T>) -> Result<Self> {
        let meta: ModelMeta = serde_json::from_value(ar.meta.clone())?;
        if meta.kind != "refrag_model" {
            return Err(corrupt(format!("archive holds a {}, not a model", meta.kind)));
        }
        let mut model = RefragModel::new(meta.config)?;
        ar.load_module("", &mut model)?;
        let optimizer = meta.optimizer.map(|o| {
            let mut opt = AdamW::new(o.config);
            opt.steps = o.steps;
            for (name, _) in model.named_params("") {
                if let (Some(m), Some(v)) = (ar.get(&format!("optim.m.{name}")), ar.get(&format!("optim.v.{name}"))) {
                    opt.m.push(m.clone());
                    opt.v.push(v.clone());
                }
            }
            opt
        });
        if let Some(opt) = &optimizer {
            if !opt.m.is_empty() && opt.m.len() != model.named_params("").len() {
                return Err(corrupt("incomplete optimizer state"));
            }
        }
        Ok(Self { model, optimizer, stage: meta.stage, step: meta.step, vocab: meta.vocab, train_config: meta.train_config })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct PolicyMeta {
    kind: String,
    config: PolicyConfig,
    step: u64,
    train_config: Value,
}

/// Selection policy parameters with the configuration that produced them.
#[derive(Clone, Debug)]
pub struct PolicyCheckpoint<T> {
    pub policy: PolicyNet<T>,
    pub config: PolicyConfig,
    pub step: u64,
    pub train_config: Value,
}

impl<T: Scalar> PolicyCheckpoint<T> {
    pub fn to_archive(&self) -> Result<Archive<T>> {
        let meta = PolicyMeta {
            kind: "refrag_policy".into(),
            config: self.config.clone(),
            step: self.step,
            train_config: self.train_config.clone(),
        };
        let mut ar = Archive::new(serde_json::to_value(meta)?);
        ar.push_module("", &self.policy);
        Ok(ar)
    }

    pub fn from_archive(ar: &Archive<T>) -> Result<Self> {
        let meta: PolicyMeta = serde_json::from_value(ar.meta.clone())?;
        if meta.kind != "refrag_policy" {
            return Err(corrupt(format!("archive holds a {}, not a policy", meta.kind)));
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(meta.config.seed);
        let mut policy = PolicyNet::new(&meta.config, &mut rng);
        ar.load_module("", &mut policy)?;
        Ok(Self { policy, config: meta.config, step: meta.step, train_config: meta.train_config })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}

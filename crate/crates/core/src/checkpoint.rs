//! Single-file checkpoints: an 8-byte little-endian header length, a JSON
//! header, then the tensors as concatenated little-endian `f32` arrays.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::error::{Error, IoContext, Result};
use crate::model::{Model, ModelConfig, ParamStore};

pub const FORMAT: &str = "maskground-checkpoint";
pub const VERSION: u32 = 1;
pub const MOMENTUM_PREFIX: &str = "optim.momentum/";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub version: u32,
    pub model: ModelConfig,
    pub vocab: Vec<String>,
    pub step: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<serde_json::Value>,
    pub tensors: Vec<TensorEntry>,
}

/// A model plus optional optimizer state and training metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub step: u64,
    /// Momentum buffers keyed by parameter name.
    pub momentum: ParamStore,
    pub train: Option<serde_json::Value>,
}

impl Checkpoint {
    pub fn from_model(model: Model) -> Self {
        Self {
            model,
            step: 0,
            momentum: ParamStore::new(),
            train: None,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut blob: Vec<u8> = Vec::new();
        let named = self.model.params.iter().map(|(n, t)| (n.to_string(), t)).chain(
            self.momentum
                .iter()
                .map(|(n, t)| (format!("{MOMENTUM_PREFIX}{n}"), t)),
        );
        for (name, t) in named {
            let offset = blob.len() as u64;
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            tensors.push(TensorEntry {
                name,
                dtype: "f32".into(),
                shape: t.shape().to_vec(),
                offset,
                nbytes: blob.len() as u64 - offset,
            });
        }
        let header = Header {
            format: FORMAT.into(),
            version: VERSION,
            model: self.model.config.clone(),
            vocab: self.model.vocab.clone(),
            step: self.step,
            train: self.train.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(8 + json.len() + blob.len());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        if bytes.len() < 8 {
            return Err(bad("file shorter than its length prefix".into()));
        }
        let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
        let body = 8usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad(format!("header length {hlen} exceeds file size {}", bytes.len())))?;
        let header: Header = serde_json::from_slice(&bytes[8..body]).map_err(|e| bad(format!("header: {e}")))?;
        if header.format != FORMAT {
            return Err(bad(format!("unknown format `{}`", header.format)));
        }
        if header.version != VERSION {
            return Err(bad(format!("unsupported version {}", header.version)));
        }
        let blob = &bytes[body..];
        let mut params = ParamStore::new();
        let mut momentum = ParamStore::new();
        for e in &header.tensors {
            if e.dtype != "f32" {
                return Err(bad(format!("tensor `{}` has dtype {}", e.name, e.dtype)));
            }
            let numel: usize = e.shape.iter().product();
            let end = e.offset.checked_add(e.nbytes).unwrap_or(u64::MAX);
            if e.nbytes != numel as u64 * 4 || end > blob.len() as u64 {
                return Err(bad(format!("tensor `{}` has an inconsistent extent", e.name)));
            }
            let raw = &blob[e.offset as usize..end as usize];
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(&e.shape, data);
            match e.name.strip_prefix(MOMENTUM_PREFIX) {
                Some(n) => momentum.insert(n, t),
                None => params.insert(e.name.clone(), t),
            }
        }
        // Check names and shapes against a freshly built model.
        let reference = Model::new(header.model.clone(), header.vocab.clone(), 0)
            .map_err(|e| bad(format!("invalid model in header: {e}")))?;
        for (name, t) in reference.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(bad(format!(
                        "tensor `{name}` has shape {:?}, expected {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                None => return Err(bad(format!("missing tensor `{name}`"))),
            }
        }
        if params.len() != reference.params.len() {
            return Err(bad("unexpected extra tensors".into()));
        }
        // Keep the reference ordering so save/load round-trips byte-exactly.
        let mut ordered = ParamStore::new();
        for name in reference.params.names() {
            ordered.insert(name, params.get(name).expect("checked").clone());
        }
        Ok(Self {
            model: Model {
                config: header.model,
                params: ordered,
                vocab: header.vocab,
            },
            step: header.step,
            momentum,
            train: header.train,
        })
    }

    /// Writes through a temporary file and rename.
    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).at(dir)?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &bytes).at(&tmp)?;
        fs::rename(&tmp, path).at(path)?;
        Ok(model_id(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).at(path)?)
    }
}

/// Hex SHA-256 of checkpoint bytes.
pub fn model_id(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Loads a checkpoint and returns it with its model id.
pub fn load_with_id(path: &Path) -> Result<(Checkpoint, String)> {
    let bytes = fs::read(path).at(path)?;
    let ck = Checkpoint::from_bytes(&bytes)?;
    Ok((ck, model_id(&bytes)))
}

//! Single-file checkpoint container.
//!
//! Layout: 8-byte magic, `u64` LE header length, a JSON header (dtype,
//! config snapshot, tensor index, optional linkage state, free-form
//! metadata), then the raw little-endian tensor payload.

use std::collections::BTreeMap;
use std::path::Path;

use chromalink_autograd::{DType, ParamStore, Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::linkage::LinkageState;

pub const MAGIC: &[u8; 8] = b"CHLINK01";
const LINKAGE_TENSOR: &str = "@linkage.info";

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dtype: String,
    config: Option<PipelineConfig>,
    tensors: Vec<Entry>,
    linkage_block: Option<usize>,
    meta: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub config: Option<PipelineConfig>,
    pub tensors: Vec<(String, Tensor<T>)>,
    pub linkage: Option<LinkageState<T>>,
    pub meta: BTreeMap<String, String>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn from_store(store: &ParamStore<T>, filter: impl Fn(&str) -> bool) -> Self {
        let tensors = store
            .iter()
            .filter(|(_, e)| filter(&e.name))
            .map(|(_, e)| (e.name.clone(), e.tensor.clone()))
            .collect();
        Checkpoint { config: None, tensors, linkage: None, meta: BTreeMap::new() }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies matching tensors into `store`. Every store parameter accepted by
    /// `filter` must be present with the right shape; all offenders are
    /// reported together.
    pub fn restore_into(&self, store: &mut ParamStore<T>, filter: impl Fn(&str) -> bool) -> Result<usize> {
        let mut problems = Vec::new();
        let mut updates = Vec::new();
        for (id, e) in store.iter() {
            if !filter(&e.name) {
                continue;
            }
            match self.get(&e.name) {
                None => problems.push(format!("{}: missing", e.name)),
                Some(t) if t.shape() != e.tensor.shape() => {
                    problems.push(format!("{}: expected {:?}, found {:?}", e.name, e.tensor.shape(), t.shape()))
                }
                Some(t) => updates.push((id, t.clone())),
            }
        }
        if !problems.is_empty() {
            return Err(Error::Checkpoint(format!("{} mismatched tensors: {}", problems.len(), problems.join("; "))));
        }
        let n = updates.len();
        for (id, t) in updates {
            store.set(id, t)?;
        }
        Ok(n)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut all: Vec<(&str, &Tensor<T>)> = self.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let linkage_block = match &self.linkage {
            Some(LinkageState { info: Some(info), last_block }) => {
                all.push((LINKAGE_TENSOR, info));
                *last_block
            }
            _ => None,
        };
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(all.len());
        for (name, t) in all {
            entries.push(Entry { name: name.to_string(), shape: t.shape().to_vec(), offset: payload.len() as u64 });
            for &v in t.data() {
                v.write_le(&mut payload);
            }
        }
        let header = Header {
            dtype: T::DTYPE.name().to_string(),
            config: self.config.clone(),
            tensors: entries,
            linkage_block,
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint container (bad magic)".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = 16usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| {
            bad(format!("header length {hlen} exceeds file size {}", bytes.len()))
        })?;
        let header: Header =
            serde_json::from_slice(&bytes[16..body]).map_err(|e| bad(format!("header: {e}")))?;
        let dtype = match header.dtype.as_str() {
            "f32" => DType::F32,
            "f64" => DType::F64,
            other => return Err(bad(format!("unsupported dtype {other}"))),
        };
        let payload = &bytes[body..];
        let mut tensors = Vec::new();
        let mut linkage = None;
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + n * dtype.size();
            if end > payload.len() {
                return Err(bad(format!("tensor {} truncated at byte {}", e.name, body + payload.len())));
            }
            let raw = &payload[start..end];
            let data: Vec<T> = match dtype {
                DType::F32 => raw.chunks_exact(4).map(|c| T::of(f32::read_le(c) as f64)).collect(),
                DType::F64 => raw.chunks_exact(8).map(|c| T::of(f64::read_le(c))).collect(),
            };
            let t = Tensor::from_vec(&e.shape, data)?;
            if e.name == LINKAGE_TENSOR {
                linkage = Some(LinkageState { info: Some(t), last_block: header.linkage_block });
            } else {
                tensors.push((e.name.clone(), t));
            }
        }
        Ok(Checkpoint { config: header.config, tensors, linkage, meta: header.meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}

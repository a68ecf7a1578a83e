//! `BRST1` checkpoint container.
//!
//! Layout: the 5 magic bytes `BRST1`, a little-endian `u32` header length,
//! a UTF-8 JSON header, then the data section. The header lists every array
//! as `{name, shape, dtype, offset}` where `offset` is the byte position
//! inside the data section and `dtype` is always `"f64le"`. The same
//! container carries optimizer state, with `config`/`vocab` left out.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::params::Component;
use super::{Model, ModelConfig, Vocabulary};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"BRST1";
const FORMAT_VERSION: u32 = 1;
const DTYPE: &str = "f64le";

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config: Option<ModelConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vocab: Option<Vocabulary>,
    tensors: Vec<Entry>,
    #[serde(default)]
    meta: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
}

/// In-memory view of a checkpoint file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub config: Option<ModelConfig>,
    pub vocab: Option<Vocabulary>,
    pub tensors: Vec<(String, Tensor)>,
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn from_model(model: &Model) -> Self {
        Self {
            config: Some(model.config.clone()),
            vocab: Some(model.vocab.clone()),
            tensors: model
                .params
                .iter()
                .map(|(_, n, t)| (n.to_string(), t.clone()))
                .collect(),
            meta: BTreeMap::new(),
        }
    }

    pub fn into_model(self) -> Result<Model> {
        let config = self
            .config
            .ok_or_else(|| Error::Checkpoint("checkpoint has no model config".into()))?;
        let vocab = self
            .vocab
            .ok_or_else(|| Error::Checkpoint("checkpoint has no vocabulary".into()))?;
        let mut store = ParamStore::new();
        for (name, t) in self.tensors {
            store.insert(name, t)?;
        }
        Model::from_parts(config, vocab, store)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            entries.push(Entry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: DTYPE.into(),
                offset,
            });
            offset += 8 * t.numel() as u64;
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            tensors: entries,
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header)
            .map_err(|e| Error::Checkpoint(format!("header encoding: {e}")))?;
        let mut out = Vec::with_capacity(9 + json.len() + offset as usize);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 9 || &bytes[..5] != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("missing BRST1 magic".into()));
        }
        let hlen = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let json = bytes
            .get(9..9 + hlen)
            .ok_or_else(|| Error::Checkpoint("header truncated".into()))?;
        let header: Header = serde_json::from_slice(json)
            .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {}",
                header.format_version
            )));
        }
        let data = &bytes[9 + hlen..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            if e.dtype != DTYPE {
                return Err(Error::Checkpoint(format!("{}: dtype {}", e.name, e.dtype)));
            }
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let raw = data.get(start..start + 8 * n).ok_or_else(|| {
                Error::Checkpoint(format!("{}: data truncated", e.name))
            })?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(e.shape, values)
                .map_err(|err| Error::Checkpoint(format!("{}: {err}", e.name)))?;
            tensors.push((e.name, t));
        }
        Ok(Self {
            config: header.config,
            vocab: header.vocab,
            tensors,
            meta: header.meta,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

impl Model {
    pub fn save(&self, path: &Path) -> Result<()> {
        Checkpoint::from_model(self).write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::read(path)?.into_model()
    }
}

/// What a warm start copied and what it left at fresh initialization.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct WarmStartReport {
    pub copied: Vec<String>,
    pub fresh: Vec<String>,
    /// Source arrays with no counterpart in the target.
    pub unused: Vec<String>,
}

impl WarmStartReport {
    /// Number of distinct adapter modules left at fresh initialization.
    pub fn fresh_adapters(&self) -> usize {
        self.fresh
            .iter()
            .filter(|n| n.ends_with(".weight"))
            .filter(|n| {
                matches!(
                    Component::of(n),
                    Some(Component::EncoderAdapters | Component::DecoderAdapters)
                )
            })
            .count()
    }
}

/// Copies every parameter of `source` whose name also exists in `target`.
///
/// Only adapters may be missing from the source; they keep the target's
/// initialization. Block counts must agree: a stack of distinct blocks has
/// no defined mapping onto a single reused block.
pub fn load_partial_checkpoint(
    target: &Model,
    source: &Checkpoint,
) -> Result<(Model, WarmStartReport)> {
    if let Some(src) = &source.config {
        let tgt = target.config();
        if src.enc_blocks != tgt.enc_blocks || src.dec_blocks != tgt.dec_blocks {
            return Err(Error::Checkpoint(format!(
                "source has {}/{} distinct encoder/decoder blocks, target {}/{}; \
                 no rule maps distinct blocks onto shared ones",
                src.enc_blocks, src.dec_blocks, tgt.enc_blocks, tgt.dec_blocks
            )));
        }
    }
    let mut model = target.clone();
    let mut report = WarmStartReport::default();
    let names: Vec<String> = model.params.iter().map(|(_, n, _)| n.to_string()).collect();
    for name in names {
        let id = model.params.id(&name).expect("name from store");
        match source.tensor(&name) {
            Some(t) => {
                if t.shape() != model.params.get(id).shape() {
                    return Err(Error::Checkpoint(format!(
                        "{name}: source shape {:?}, target {:?}",
                        t.shape(),
                        model.params.get(id).shape()
                    )));
                }
                *model.params.get_mut(id) = t.clone();
                report.copied.push(name);
            }
            None => match Component::of(&name) {
                Some(Component::EncoderAdapters | Component::DecoderAdapters) => {
                    report.fresh.push(name)
                }
                _ => {
                    return Err(Error::Checkpoint(format!(
                        "source checkpoint lacks component {name}"
                    )))
                }
            },
        }
    }
    report.unused = source
        .tensors
        .iter()
        .filter(|(n, _)| model.params.id(n).is_none())
        .map(|(n, _)| n.clone())
        .collect();
    Ok((model, report))
}

//! Versioned checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   "TPPCKPT\0"
//! version      u32       FORMAT_VERSION
//! header_len   u64       byte length of the JSON header
//! header       JSON      {"byte_order","dtype","sections":{..},"tensors":[{name,shape,offset}]}
//! data         f64 LE    tensors back to back; `offset` counts elements
//! ```
//!
//! `sections` holds the JSON documents a model needs besides its weights
//! (config, vocabulary, training history, task head metadata).

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{ArrayD, ArrayViewD, IxDyn};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::model::{EncoderConfig, EncoderModel, EncoderParams, PhaseRecord};
use super::vocab::Vocabulary;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"TPPCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    byte_order: String,
    dtype: String,
    sections: Map<String, Value>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

/// Decoded container contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub sections: Map<String, Value>,
    pub tensors: Vec<(String, ArrayD<f64>)>,
}

impl Container {
    pub fn section<T: serde::de::DeserializeOwned>(&self, key: &str, path: &Path) -> Result<T> {
        let v = self.sections.get(key).ok_or_else(|| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: format!("missing section '{key}'"),
        })?;
        serde_json::from_value(v.clone()).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: format!("section '{key}': {e}"),
        })
    }

    pub fn take_tensor(&mut self, name: &str) -> Option<ArrayD<f64>> {
        let i = self.tensors.iter().position(|(n, _)| n == name)?;
        Some(self.tensors.remove(i).1)
    }
}

pub fn write_container(
    path: &Path,
    sections: Map<String, Value>,
    tensors: &[(String, ArrayViewD<'_, f64>)],
) -> Result<()> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.len();
    }
    let header = serde_json::to_vec(&Header {
        byte_order: "little".into(),
        dtype: "f64".into(),
        sections,
        tensors: entries,
    })?;

    let mut buf = Vec::with_capacity(20 + header.len() + offset * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for (_, t) in tensors {
        for v in t.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("partial");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_container(path: &Path) -> Result<Container> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: String| Error::Checkpoint {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(bad(format!(
            "unsupported format version {version} (this build reads version {FORMAT_VERSION})"
        )));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let data_start = 20usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&bytes[20..data_start])
        .map_err(|e| bad(format!("corrupt header: {e}")))?;
    if header.byte_order != "little" || header.dtype != "f64" {
        return Err(bad(format!(
            "unsupported tensor encoding {}/{}",
            header.byte_order, header.dtype
        )));
    }

    let data = &bytes[data_start..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        let len: usize = e.shape.iter().product();
        let lo = e.offset * 8;
        let hi = lo + len * 8;
        if hi > data.len() {
            return Err(bad(format!("tensor '{}' runs past end of file", e.name)));
        }
        let values: Vec<f64> = data[lo..hi]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&e.shape), values)
            .map_err(|err| bad(format!("tensor '{}': {err}", e.name)))?;
        tensors.push((e.name, arr));
    }
    Ok(Container {
        sections: header.sections,
        tensors,
    })
}

pub(crate) fn encoder_sections(model: &EncoderModel) -> Result<Map<String, Value>> {
    let mut sections = Map::new();
    sections.insert("config".into(), serde_json::to_value(&model.config)?);
    sections.insert(
        "vocabulary".into(),
        serde_json::to_value(&model.vocabulary)?,
    );
    sections.insert(
        "training_history".into(),
        serde_json::to_value(&model.training_history)?,
    );
    Ok(sections)
}

/// Rebuilds an encoder from a container, consuming its encoder tensors.
pub(crate) fn encoder_from_container(c: &mut Container, path: &Path) -> Result<EncoderModel> {
    let config: EncoderConfig = c.section("config", path)?;
    config.validate().map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let vocabulary: Vocabulary = c.section("vocabulary", path)?;
    let training_history: Vec<PhaseRecord> = c.section("training_history", path)?;
    let mut params = EncoderParams::init(&config, vocabulary.size(), 0);
    for (name, mut slot) in params.named_mut() {
        let t = c.take_tensor(&name).ok_or_else(|| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: format!("missing tensor '{name}'"),
        })?;
        if t.shape() != slot.shape() {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                reason: format!(
                    "tensor '{name}' has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                ),
            });
        }
        slot.assign(&t);
    }
    Ok(EncoderModel {
        config,
        vocabulary,
        params,
        training_history,
    })
}

pub fn save_checkpoint(model: &EncoderModel, path: impl AsRef<Path>) -> Result<()> {
    write_container(
        path.as_ref(),
        encoder_sections(model)?,
        &model.params.named(),
    )
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<EncoderModel> {
    let path = path.as_ref();
    let mut c = read_container(path)?;
    encoder_from_container(&mut c, path)
}

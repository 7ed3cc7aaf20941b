// SPDX-License-Identifier: MIT OR Apache-2.0

//! Flat tensor container: 8-byte little-endian header length, a JSON header
//! mapping tensor name to `{dtype, shape, data_offsets}`, then one data region.
//!
//! Half-precision tensors (`F16`, `BF16`) are widened to `f32` when read.
//! Writing always emits `F32`, tensors sorted by name, so a load/save/load
//! cycle is bit-identical.

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::{Map, Value};

use crate::error::{Error, Result};

/// Element type stored in the container.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F16,
    BF16,
}

impl Dtype {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "F32" => Some(Self::F32),
            "F16" => Some(Self::F16),
            "BF16" => Some(Self::BF16),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            Self::F32 => 4,
            Self::F16 | Self::BF16 => 2,
        }
    }
}

/// A dense tensor widened to `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    /// Dtype the tensor had on disk.
    pub source_dtype: Dtype,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!("tensor shape {shape:?} needs {n} values, got {}", data.len())));
        }
        Ok(Self { shape, data, source_dtype: Dtype::F32 })
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// All tensors of one container file plus its optional string metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorFile {
    pub tensors: BTreeMap<String, Tensor>,
    pub metadata: BTreeMap<String, String>,
}

impl TensorFile {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    /// Read and validate a container from disk.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Parse a container held in memory. `path` is only used in messages.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let container_err = |reason: String| Error::Container { path: path.to_path_buf(), reason };
        if bytes.len() < 8 {
            return Err(container_err(format!("file is {} bytes, too short for the header length", bytes.len())));
        }
        let mut len_bytes = [0u8; 8];
        len_bytes.copy_from_slice(&bytes[..8]);
        let header_len = u64::from_le_bytes(len_bytes);
        let header_end = 8u64.checked_add(header_len).filter(|&e| e <= bytes.len() as u64).ok_or_else(|| {
            container_err(format!("header length {header_len} runs past end of file ({} bytes)", bytes.len()))
        })? as usize;
        let header: Value = serde_json::from_slice(&bytes[8..header_end])
            .map_err(|e| container_err(format!("header is not valid JSON: {e}")))?;
        let Value::Object(entries) = header else {
            return Err(container_err("header is not a JSON object".into()));
        };
        let data = &bytes[header_end..];

        let mut metadata = BTreeMap::new();
        let mut specs = Vec::new();
        for (name, spec) in entries {
            if name == "__metadata__" {
                if let Value::Object(m) = spec {
                    for (k, v) in m {
                        if let Value::String(s) = v {
                            metadata.insert(k, s);
                        }
                    }
                }
                continue;
            }
            specs.push(parse_spec(&name, &spec)?);
        }
        // Report the first tensor (in data order) that cannot be read.
        specs.sort_by_key(|s| (s.begin, s.name.clone()));

        let mut tensors = BTreeMap::new();
        for spec in specs {
            let numel: usize = spec.shape.iter().product();
            let expected = numel * spec.dtype.size();
            if spec.end < spec.begin || spec.end - spec.begin != expected {
                return Err(Error::checkpoint(
                    &spec.name,
                    format!("byte range {}..{} does not hold {numel} {:?} values", spec.begin, spec.end, spec.dtype),
                ));
            }
            if spec.end > data.len() {
                return Err(Error::checkpoint(
                    &spec.name,
                    format!("truncated: needs bytes {}..{} but data region has {}", spec.begin, spec.end, data.len()),
                ));
            }
            let raw = &data[spec.begin..spec.end];
            let values = decode(raw, spec.dtype);
            tensors.insert(spec.name, Tensor { shape: spec.shape, data: values, source_dtype: spec.dtype });
        }
        Ok(Self { tensors, metadata })
    }

    /// Serialize as an all-`F32` container.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = Map::new();
        if !self.metadata.is_empty() {
            let m: Map<String, Value> =
                self.metadata.iter().map(|(k, v)| (k.clone(), Value::String(v.clone()))).collect();
            header.insert("__metadata__".into(), Value::Object(m));
        }
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            let end = offset + t.data.len() * 4;
            header.insert(
                name.clone(),
                serde_json::json!({
                    "dtype": "F32",
                    "shape": t.shape,
                    "data_offsets": [offset, end],
                }),
            );
            offset = end;
        }
        let mut header_bytes = serde_json::to_vec(&Value::Object(header)).expect("serializing a JSON map cannot fail");
        while header_bytes.len() % 8 != 0 {
            header_bytes.push(b' ');
        }
        let mut out = Vec::with_capacity(8 + header_bytes.len() + offset);
        out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_bytes);
        for t in self.tensors.values() {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

struct Spec {
    name: String,
    dtype: Dtype,
    shape: Vec<usize>,
    begin: usize,
    end: usize,
}

fn parse_spec(name: &str, spec: &Value) -> Result<Spec> {
    let bad = |reason: &str| Error::checkpoint(name, reason.to_string());
    let dtype_str = spec.get("dtype").and_then(Value::as_str).ok_or_else(|| bad("missing dtype"))?;
    let dtype = Dtype::parse(dtype_str)
        .ok_or_else(|| bad(&format!("unsupported dtype {dtype_str} (expected F32, F16 or BF16)")))?;
    let shape = spec
        .get("shape")
        .and_then(Value::as_array)
        .ok_or_else(|| bad("missing shape"))?
        .iter()
        .map(|v| v.as_u64().map(|x| x as usize).ok_or_else(|| bad("shape entries must be integers")))
        .collect::<Result<Vec<_>>>()?;
    let offsets = spec
        .get("data_offsets")
        .and_then(Value::as_array)
        .filter(|a| a.len() == 2)
        .ok_or_else(|| bad("data_offsets must be [begin, end]"))?;
    let begin = offsets[0].as_u64().ok_or_else(|| bad("bad data offset"))? as usize;
    let end = offsets[1].as_u64().ok_or_else(|| bad("bad data offset"))? as usize;
    Ok(Spec { name: name.to_string(), dtype, shape, begin, end })
}

fn decode(raw: &[u8], dtype: Dtype) -> Vec<f32> {
    match dtype {
        Dtype::F32 => raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect(),
        Dtype::F16 => raw.chunks_exact(2).map(|c| half::f16::from_le_bytes([c[0], c[1]]).to_f32()).collect(),
        Dtype::BF16 => raw.chunks_exact(2).map(|c| half::bf16::from_le_bytes([c[0], c[1]]).to_f32()).collect(),
    }
}

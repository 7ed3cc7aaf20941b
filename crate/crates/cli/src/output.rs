//! Report files: JSON with a metadata header, CSV tables, base64 tensors.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use routelens_core::tensor::Matrix;
use routelens_core::{Error, Result};

/// Header written into every output. `created_unix` is the only field that
/// changes between identical runs.
#[derive(Debug, Clone, Serialize)]
pub struct Metadata {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub config_sha256: String,
    pub seed: u64,
    pub model_sha256: Option<String>,
    pub config: ExperimentConfig,
    pub created_unix: u64,
}

impl Metadata {
    pub fn new(cfg: &ExperimentConfig, model_sha256: Option<String>) -> Self {
        Self {
            tool: "routelens",
            version: env!("CARGO_PKG_VERSION"),
            command: cfg.command.clone(),
            config_sha256: cfg.hash(),
            seed: cfg.seed,
            model_sha256,
            config: cfg.clone(),
            created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        }
    }

    fn csv_header(&self) -> String {
        format!(
            "# {} {} {} config_sha256={} seed={} model_sha256={} created_unix={}\n",
            self.tool,
            self.version,
            self.command,
            self.config_sha256,
            self.seed,
            self.model_sha256.as_deref().unwrap_or("-"),
            self.created_unix
        )
    }
}

/// Little-endian `f32` tensor in base64.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub data: String,
}

impl Tensor {
    pub fn vector(v: &[f32]) -> Self {
        Self::encode(vec![v.len()], v)
    }

    pub fn matrix(m: &Matrix) -> Self {
        Self::encode(vec![m.rows(), m.cols()], m.data())
    }

    fn encode(shape: Vec<usize>, v: &[f32]) -> Self {
        let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
        Self { dtype: "f32".into(), shape, data: STANDARD.encode(bytes) }
    }

    pub fn decode(&self) -> Result<Vec<f32>> {
        if self.dtype != "f32" {
            return Err(Error::Data(format!("unsupported tensor dtype {:?}", self.dtype)));
        }
        let bytes = STANDARD.decode(&self.data).map_err(|e| Error::Data(format!("bad base64 tensor: {e}")))?;
        let n: usize = self.shape.iter().product();
        if bytes.len() != 4 * n {
            return Err(Error::Data(format!("tensor of shape {:?} has {} bytes", self.shape, bytes.len())));
        }
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    }
}

fn io(path: &Path, e: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source: e }
}

pub struct Writer {
    pub dir: PathBuf,
    pub meta: Metadata,
    pub csv: bool,
    pub written: Vec<PathBuf>,
}

#[derive(Serialize)]
struct Document<'a, T: Serialize> {
    metadata: &'a Metadata,
    #[serde(flatten)]
    body: &'a T,
}

impl Writer {
    pub fn new(dir: &Path, meta: Metadata, csv: bool) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        Ok(Self { dir: dir.to_path_buf(), meta, csv, written: Vec::new() })
    }

    pub fn json<T: Serialize>(&mut self, name: &str, body: &T) -> Result<PathBuf> {
        let path = self.dir.join(name);
        let mut text = serde_json::to_string_pretty(&Document { metadata: &self.meta, body })?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| io(&path, e))?;
        self.written.push(path.clone());
        Ok(path)
    }

    /// Write a CSV table when CSV output is enabled.
    pub fn table<R: Serialize>(&mut self, name: &str, rows: &[R]) -> Result<()> {
        if !self.csv {
            return Ok(());
        }
        self.table_always(name, rows)
    }

    pub fn table_always<R: Serialize>(&mut self, name: &str, rows: &[R]) -> Result<()> {
        let path = self.dir.join(name);
        let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
        for r in rows {
            w.serialize(r).map_err(|e| Error::Data(format!("csv {name}: {e}")))?;
        }
        let body = w.into_inner().map_err(|e| Error::Data(format!("csv {name}: {e}")))?;
        let mut out = self.meta.csv_header().into_bytes();
        out.extend(body);
        std::fs::write(&path, out).map_err(|e| io(&path, e))?;
        self.written.push(path);
        Ok(())
    }
}

/// Read a JSON artifact written by an earlier command.
pub fn read_artifact(path: &Path) -> Result<serde_json::Value> {
    let text = std::fs::read_to_string(path).map_err(|e| io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_round_trip() {
        let v = vec![1.0, -0.5, f32::MIN_POSITIVE, 3.25e7];
        let t = Tensor::vector(&v);
        assert_eq!(t.shape, vec![4]);
        assert_eq!(t.decode().unwrap(), v);
        let bad = Tensor { shape: vec![5], ..t };
        assert!(bad.decode().is_err());
    }
}

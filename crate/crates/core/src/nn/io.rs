//! On-disk formats: FNETv1 models, FDSTv1 datasets, and reference-logit files.
//!
//! An FNETv1 file is a single-line JSON manifest (first field `"magic":"FNETv1"`),
//! a newline, then a blob of little-endian `f32` values. Each tensor entry in the
//! manifest records its byte offset and length within the blob.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{AvgPool, BatchNorm, Conv2d, Dense, Layer, Network, NnError, Residual};
use crate::harness::Dataset;
use crate::tensor::{Tensor, TensorError};

pub const MODEL_MAGIC: &str = "FNETv1";
pub const DATASET_MAGIC: &[u8; 6] = b"FDSTv1";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic: expected {expected}, found {found:?}")]
    Magic { expected: &'static str, found: String },
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("blob holds {actual} bytes but the manifest expects {expected}")]
    BlobLength { expected: usize, actual: usize },
    #[error("tensor {name}: {detail}")]
    TensorRange { name: String, detail: String },
    #[error("truncated {what}: expected {expected} bytes, found {actual}")]
    Truncated {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("label {label} at index {index} is not below class count {classes}")]
    Label { index: usize, label: usize, classes: usize },
    #[error(transparent)]
    Network(#[from] NnError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    length: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum BlockEntry {
    Dense {
        tensors: Vec<TensorEntry>,
    },
    Conv2d {
        stride: usize,
        padding: usize,
        tensors: Vec<TensorEntry>,
    },
    BatchNorm {
        eps: f64,
        tensors: Vec<TensorEntry>,
    },
    Relu,
    AvgPool {
        kernel: usize,
    },
    Flatten,
    Residual {
        main: Vec<BlockEntry>,
        shortcut: Vec<BlockEntry>,
    },
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    magic: String,
    input_shape: Vec<usize>,
    class_count: usize,
    blob_length: usize,
    blocks: Vec<BlockEntry>,
}

struct BlobWriter {
    blob: Vec<u8>,
}

impl BlobWriter {
    fn push(&mut self, name: &str, t: &Tensor) -> TensorEntry {
        let offset = self.blob.len();
        for v in t.data() {
            self.blob.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
            length: self.blob.len() - offset,
        }
    }

    fn block(&mut self, layer: &Layer) -> BlockEntry {
        match layer {
            Layer::Dense(d) => BlockEntry::Dense {
                tensors: vec![self.push("weight", &d.weight), self.push("bias", &d.bias)],
            },
            Layer::Conv2d(c) => BlockEntry::Conv2d {
                stride: c.stride,
                padding: c.padding,
                tensors: vec![self.push("weight", &c.weight), self.push("bias", &c.bias)],
            },
            Layer::BatchNorm(bn) => BlockEntry::BatchNorm {
                eps: bn.eps,
                tensors: vec![
                    self.push("gamma", &bn.gamma),
                    self.push("beta", &bn.beta),
                    self.push("running_mean", &bn.running_mean),
                    self.push("running_var", &bn.running_var),
                ],
            },
            Layer::Relu => BlockEntry::Relu,
            Layer::AvgPool(p) => BlockEntry::AvgPool { kernel: p.kernel },
            Layer::Flatten => BlockEntry::Flatten,
            Layer::Residual(r) => BlockEntry::Residual {
                main: r.main.iter().map(|b| self.block(b)).collect(),
                shortcut: r.shortcut.iter().map(|b| self.block(b)).collect(),
            },
        }
    }
}

/// Serializes a network to FNETv1 bytes. Values are narrowed to `f32`.
pub fn encode_model(network: &Network) -> Vec<u8> {
    let mut w = BlobWriter { blob: Vec::new() };
    let blocks = network.blocks.iter().map(|b| w.block(b)).collect();
    let manifest = Manifest {
        magic: MODEL_MAGIC.to_string(),
        input_shape: network.input_shape.clone(),
        class_count: network.class_count,
        blob_length: w.blob.len(),
        blocks,
    };
    let mut out = serde_json::to_vec(&manifest).expect("manifest serializes");
    out.push(b'\n');
    out.extend_from_slice(&w.blob);
    out
}

fn read_tensors(blob: &[u8], entries: &[TensorEntry], names: &[&str]) -> Result<Vec<Tensor>, IoError> {
    if entries.len() != names.len() || entries.iter().zip(names).any(|(e, n)| e.name != *n) {
        return Err(IoError::Manifest(format!(
            "expected tensors {names:?}, found {:?}",
            entries.iter().map(|e| e.name.as_str()).collect::<Vec<_>>()
        )));
    }
    entries
        .iter()
        .map(|e| {
            let count: usize = e.shape.iter().product();
            if e.length != count * 4 {
                return Err(IoError::TensorRange {
                    name: e.name.clone(),
                    detail: format!("shape {:?} needs {} bytes, entry says {}", e.shape, count * 4, e.length),
                });
            }
            let bytes = blob
                .get(e.offset..e.offset + e.length)
                .ok_or_else(|| IoError::TensorRange {
                    name: e.name.clone(),
                    detail: format!(
                        "bytes {}..{} lie outside the {}-byte blob",
                        e.offset,
                        e.offset + e.length,
                        blob.len()
                    ),
                })?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            Ok(Tensor::new(e.shape.clone(), data)?)
        })
        .collect()
}

fn decode_block(blob: &[u8], entry: &BlockEntry) -> Result<Layer, IoError> {
    Ok(match entry {
        BlockEntry::Dense { tensors } => {
            let mut t = read_tensors(blob, tensors, &["weight", "bias"])?.into_iter();
            Layer::Dense(Dense::new(t.next().unwrap(), t.next().unwrap()))
        }
        BlockEntry::Conv2d {
            stride,
            padding,
            tensors,
        } => {
            let mut t = read_tensors(blob, tensors, &["weight", "bias"])?.into_iter();
            Layer::Conv2d(Conv2d {
                weight: t.next().unwrap(),
                bias: t.next().unwrap(),
                stride: *stride,
                padding: *padding,
            })
        }
        BlockEntry::BatchNorm { eps, tensors } => {
            let mut t = read_tensors(blob, tensors, &["gamma", "beta", "running_mean", "running_var"])?.into_iter();
            Layer::BatchNorm(BatchNorm {
                gamma: t.next().unwrap(),
                beta: t.next().unwrap(),
                running_mean: t.next().unwrap(),
                running_var: t.next().unwrap(),
                eps: *eps,
            })
        }
        BlockEntry::Relu => Layer::Relu,
        BlockEntry::AvgPool { kernel } => Layer::AvgPool(AvgPool { kernel: *kernel }),
        BlockEntry::Flatten => Layer::Flatten,
        BlockEntry::Residual { main, shortcut } => Layer::Residual(Residual {
            main: main.iter().map(|b| decode_block(blob, b)).collect::<Result<_, _>>()?,
            shortcut: shortcut
                .iter()
                .map(|b| decode_block(blob, b))
                .collect::<Result<_, _>>()?,
        }),
    })
}

/// Parses FNETv1 bytes and validates the resulting network.
pub fn decode_model(bytes: &[u8]) -> Result<Network, IoError> {
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| IoError::Manifest("no newline terminating the manifest".into()))?;
    let head = &bytes[..split];
    let value: serde_json::Value = serde_json::from_slice(head).map_err(|e| IoError::Manifest(e.to_string()))?;
    let magic = value.get("magic").and_then(|m| m.as_str()).unwrap_or_default();
    if magic != MODEL_MAGIC {
        return Err(IoError::Magic {
            expected: MODEL_MAGIC,
            found: magic.to_string(),
        });
    }
    let manifest: Manifest = serde_json::from_value(value).map_err(|e| IoError::Manifest(e.to_string()))?;
    let blob = &bytes[split + 1..];
    if blob.len() != manifest.blob_length {
        return Err(IoError::BlobLength {
            expected: manifest.blob_length,
            actual: blob.len(),
        });
    }
    let blocks = manifest
        .blocks
        .iter()
        .map(|b| decode_block(blob, b))
        .collect::<Result<_, _>>()?;
    Ok(Network::new(blocks, manifest.input_shape, manifest.class_count)?)
}

fn read_file(path: &Path) -> Result<Vec<u8>, IoError> {
    fs::read(path).map_err(|source| IoError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let io_err = |source| IoError::Io {
        path: path.display().to_string(),
        source,
    };
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err)?;
    tmp.write_all(bytes).map_err(io_err)?;
    tmp.as_file().sync_all().map_err(io_err)?;
    tmp.persist(path).map_err(|e| io_err(e.error))?;
    Ok(())
}

pub fn save_model(network: &Network, path: &Path) -> Result<(), IoError> {
    write_atomic(path, &encode_model(network))
}

pub fn load_model(path: &Path) -> Result<Network, IoError> {
    decode_model(&read_file(path)?)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], IoError> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(IoError::Truncated {
                what: self.what,
                expected: end,
                actual: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, IoError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn f32s(&mut self, count: usize) -> Result<Vec<f64>, IoError> {
        Ok(self
            .take(count * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect())
    }
}

/// Serializes a dataset to FDSTv1 bytes.
pub fn encode_dataset(data: &Dataset) -> Vec<u8> {
    let dims = &data.features.shape()[1..];
    let mut out = Vec::with_capacity(16 + data.features.len() * 4 + data.labels.len() * 2);
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&(data.labels.len() as u32).to_le_bytes());
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for d in dims {
        out.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    out.extend_from_slice(&(data.class_count as u32).to_le_bytes());
    for v in data.features.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    for l in &data.labels {
        out.extend_from_slice(&(*l as u16).to_le_bytes());
    }
    out
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset, IoError> {
    let mut r = Reader {
        bytes,
        pos: 0,
        what: "dataset",
    };
    let magic = r.take(DATASET_MAGIC.len())?;
    if magic != DATASET_MAGIC {
        return Err(IoError::Magic {
            expected: "FDSTv1",
            found: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let count = r.u32()?;
    let ndims = r.u32()?;
    let dims = (0..ndims).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
    let class_count = r.u32()?;
    let width: usize = dims.iter().product();
    let features = r.f32s(count * width)?;
    let label_bytes = r.take(count * 2)?;
    let labels: Vec<usize> = label_bytes
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]) as usize)
        .collect();
    if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= class_count) {
        return Err(IoError::Label {
            index,
            label,
            classes: class_count,
        });
    }
    let mut shape = vec![count];
    shape.extend(dims);
    Ok(Dataset {
        features: Tensor::new(shape, features)?,
        labels,
        class_count,
    })
}

pub fn save_dataset(data: &Dataset, path: &Path) -> Result<(), IoError> {
    write_atomic(path, &encode_dataset(data))
}

pub fn load_dataset(path: &Path) -> Result<Dataset, IoError> {
    decode_dataset(&read_file(path)?)
}

/// Reads a logits file: `u32` batch and class counts, then row-major `f32` values.
pub fn decode_logits(bytes: &[u8]) -> Result<Tensor, IoError> {
    let mut r = Reader {
        bytes,
        pos: 0,
        what: "logits",
    };
    let batch = r.u32()?;
    let classes = r.u32()?;
    let values = r.f32s(batch * classes)?;
    Ok(Tensor::new(vec![batch, classes], values)?)
}

pub fn encode_logits(logits: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + logits.len() * 4);
    out.extend_from_slice(&(logits.shape()[0] as u32).to_le_bytes());
    out.extend_from_slice(&(logits.shape()[1] as u32).to_le_bytes());
    for v in logits.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn load_logits(path: &Path) -> Result<Tensor, IoError> {
    decode_logits(&read_file(path)?)
}

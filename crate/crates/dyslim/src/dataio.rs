//! Bit-exact persistence: the `DYSL` container for trajectory datasets and
//! tensor archives (checkpoints), plus dataset normalization.
//!
//! Container layout: magic `DYSL`, format version (u32 LE), header length
//! (u64 LE), canonical JSON header (key-sorted), raw payload of f64 LE values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"DYSL";
pub const FORMAT_VERSION: u32 = 1;

/// Floor applied to per-dimension standard deviations.
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum DataIoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: bad magic, not a DYSL container")]
    BadMagic { path: PathBuf },
    #[error("{path}: unsupported format version {version} (supported: {FORMAT_VERSION})")]
    UnsupportedVersion { path: PathBuf, version: u32 },
    #[error("{path}: header: {detail}")]
    Header { path: PathBuf, detail: String },
    #[error("{path}: payload length mismatch: header implies {expected} values, file holds {actual}")]
    PayloadLength {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },
    #[error("payload length {actual} does not match header ({expected})")]
    InconsistentDataset { expected: usize, actual: usize },
    #[error("archive: {0}")]
    Archive(String),
}

fn io_err(path: &Path, source: std::io::Error) -> DataIoError {
    DataIoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Per-dimension affine normalization to zero mean, unit variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Population mean/std over all states; std floored at [`STD_FLOOR`].
    pub fn fit(payload: &[f64], dim: usize) -> Self {
        let n = payload.len() / dim;
        let mut mean = vec![0.0; dim];
        for state in payload.chunks_exact(dim) {
            for (m, v) in mean.iter_mut().zip(state) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; dim];
        for state in payload.chunks_exact(dim) {
            for ((s, v), m) in var.iter_mut().zip(state).zip(&mean) {
                let d = v - m;
                *s += d * d;
            }
        }
        let std = var
            .iter()
            .map(|s| (s / n as f64).sqrt().max(STD_FLOOR))
            .collect();
        Self { mean, std }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply_into(&self, state: &[f64], out: &mut [f64]) {
        for i in 0..state.len() {
            out[i] = (state[i] - self.mean[i]) / self.std[i];
        }
    }

    pub fn apply(&self, state: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; state.len()];
        self.apply_into(state, &mut out);
        out
    }

    pub fn invert(&self, state: &[f64]) -> Vec<f64> {
        state
            .iter()
            .enumerate()
            .map(|(i, v)| v * self.std[i] + self.mean[i])
            .collect()
    }
}

/// Dataset metadata, stored as the container header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub system: String,
    pub state_dim: usize,
    pub n_trajectories: usize,
    pub steps_per_trajectory: usize,
    /// Effective sampling interval between recorded states.
    pub dt: f64,
    /// Echo of the generation configuration.
    pub generation: serde_json::Value,
    pub normalizer: Normalizer,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

/// Uniformly time-sampled trajectories, payload layout `[trajectory][time][dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    pub header: DatasetHeader,
    payload: Vec<f64>,
}

impl TrajectoryDataset {
    pub fn new(header: DatasetHeader, payload: Vec<f64>) -> Result<Self, DataIoError> {
        let expected = header.n_trajectories * header.steps_per_trajectory * header.state_dim;
        if payload.len() != expected {
            return Err(DataIoError::InconsistentDataset {
                expected,
                actual: payload.len(),
            });
        }
        Ok(Self { header, payload })
    }

    pub fn payload(&self) -> &[f64] {
        &self.payload
    }

    pub fn state(&self, traj: usize, t: usize) -> &[f64] {
        let d = self.header.state_dim;
        let base = (traj * self.header.steps_per_trajectory + t) * d;
        &self.payload[base..base + d]
    }

    pub fn trajectory(&self, traj: usize) -> &[f64] {
        let len = self.header.steps_per_trajectory * self.header.state_dim;
        &self.payload[traj * len..(traj + 1) * len]
    }
}

/// Canonical (key-sorted) JSON bytes for a serializable value.
pub fn canonical_json<T: Serialize>(value: &T) -> Vec<u8> {
    // serde_json maps are BTreeMaps, so going through Value sorts keys.
    let v = serde_json::to_value(value).expect("header serialization cannot fail");
    serde_json::to_string(&v)
        .expect("JSON string serialization cannot fail")
        .into_bytes()
}

/// SHA-256 hex digest of a value's canonical JSON form.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    hasher.update(canonical_json(value));
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn write_container(path: &Path, header_bytes: &[u8], payload: &[f64]) -> Result<(), DataIoError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let mut inner = || -> std::io::Result<()> {
        w.write_all(&MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        w.write_all(header_bytes)?;
        for v in payload {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()
    };
    inner().map_err(|e| io_err(path, e))
}

struct ContainerReader {
    reader: BufReader<File>,
    header_bytes: Vec<u8>,
}

fn open_container(path: &Path) -> Result<ContainerReader, DataIoError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut reader = BufReader::new(file);
    let mut magic = [0u8; 4];
    reader.read_exact(&mut magic).map_err(|e| io_err(path, e))?;
    if magic != MAGIC {
        return Err(DataIoError::BadMagic {
            path: path.to_path_buf(),
        });
    }
    let mut version = [0u8; 4];
    reader.read_exact(&mut version).map_err(|e| io_err(path, e))?;
    let version = u32::from_le_bytes(version);
    if version > FORMAT_VERSION {
        return Err(DataIoError::UnsupportedVersion {
            path: path.to_path_buf(),
            version,
        });
    }
    let mut len = [0u8; 8];
    reader.read_exact(&mut len).map_err(|e| io_err(path, e))?;
    let header_len = u64::from_le_bytes(len) as usize;
    let mut header_bytes = vec![0u8; header_len];
    reader
        .read_exact(&mut header_bytes)
        .map_err(|e| io_err(path, e))?;
    Ok(ContainerReader {
        reader,
        header_bytes,
    })
}

fn read_payload(path: &Path, mut reader: BufReader<File>) -> Result<Vec<f64>, DataIoError> {
    let mut bytes = Vec::new();
    reader
        .read_to_end(&mut bytes)
        .map_err(|e| io_err(path, e))?;
    if bytes.len() % 8 != 0 {
        return Err(DataIoError::PayloadLength {
            path: path.to_path_buf(),
            expected: bytes.len() / 8 + 1,
            actual: bytes.len() / 8,
        });
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn write_dataset(dataset: &TrajectoryDataset, path: &Path) -> Result<(), DataIoError> {
    write_container(path, &canonical_json(&dataset.header), &dataset.payload)
}

/// Header-only inspection; the payload is not read.
pub fn read_dataset_header(path: &Path) -> Result<DatasetHeader, DataIoError> {
    let container = open_container(path)?;
    serde_json::from_slice(&container.header_bytes).map_err(|e| DataIoError::Header {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

pub fn read_dataset(path: &Path) -> Result<TrajectoryDataset, DataIoError> {
    let container = open_container(path)?;
    let header: DatasetHeader =
        serde_json::from_slice(&container.header_bytes).map_err(|e| DataIoError::Header {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
    let payload = read_payload(path, container.reader)?;
    let expected = header.n_trajectories * header.steps_per_trajectory * header.state_dim;
    if payload.len() != expected {
        return Err(DataIoError::PayloadLength {
            path: path.to_path_buf(),
            expected,
            actual: payload.len(),
        });
    }
    TrajectoryDataset::new(header, payload)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload in f64 units.
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArchiveHeader {
    meta: serde_json::Value,
    manifest: Vec<ManifestEntry>,
}

/// Named-tensor archive; checkpoints are built on this.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorArchive {
    pub meta: serde_json::Value,
    entries: Vec<(String, Tensor)>,
}

impl TensorArchive {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            meta,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: &str, tensor: Tensor) {
        self.entries.push((name.to_string(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    /// Rebuilds a [`ParamStore`] from entries under `prefix/`, in archive order.
    pub fn param_store(&self, prefix: &str) -> Result<ParamStore, DataIoError> {
        let mut store = ParamStore::new();
        for (name, tensor) in &self.entries {
            if let Some(stripped) = name.strip_prefix(prefix).and_then(|s| s.strip_prefix('/')) {
                store
                    .insert(stripped, tensor.clone())
                    .map_err(|e| DataIoError::Archive(e.to_string()))?;
            }
        }
        Ok(store)
    }
}

pub fn write_archive(archive: &TensorArchive, path: &Path) -> Result<(), DataIoError> {
    let mut manifest = Vec::with_capacity(archive.entries.len());
    let mut payload = Vec::new();
    for (name, tensor) in &archive.entries {
        manifest.push(ManifestEntry {
            name: name.clone(),
            shape: tensor.shape().to_vec(),
            offset: payload.len(),
        });
        payload.extend_from_slice(tensor.data());
    }
    let header = ArchiveHeader {
        meta: archive.meta.clone(),
        manifest,
    };
    write_container(path, &canonical_json(&header), &payload)
}

pub fn read_archive(path: &Path) -> Result<TensorArchive, DataIoError> {
    let container = open_container(path)?;
    let header: ArchiveHeader =
        serde_json::from_slice(&container.header_bytes).map_err(|e| DataIoError::Header {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
    let payload = read_payload(path, container.reader)?;
    let mut entries = Vec::with_capacity(header.manifest.len());
    for entry in &header.manifest {
        let len: usize = entry.shape.iter().product();
        if entry.offset + len > payload.len() {
            return Err(DataIoError::PayloadLength {
                path: path.to_path_buf(),
                expected: entry.offset + len,
                actual: payload.len(),
            });
        }
        let data = payload[entry.offset..entry.offset + len].to_vec();
        entries.push((
            entry.name.clone(),
            Tensor::new(entry.shape.clone(), data).unwrap(),
        ));
    }
    Ok(TensorArchive {
        meta: header.meta,
        entries,
    })
}

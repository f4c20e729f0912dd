//! On-disk dataset model: the manifest and raw tensor files.
//!
//! A dataset directory holds one subdirectory per stimulus condition plus a
//! `manifest.json` describing every file in it. Tensors are raw little-endian
//! 32-bit reals with their shapes recorded in the manifest, so any language
//! can load them without a container library.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Manifest layout revision; bumped on any incompatible change.
pub const SCHEMA_VERSION: u32 = 1;
/// Manifest file name inside a dataset directory.
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("manifest schema version {got}, this build reads {SCHEMA_VERSION}")]
    SchemaVersion { got: u32 },
    #[error("{file}: {got} bytes on disk, descriptor needs {want}")]
    ByteLength { file: String, got: u64, want: u64 },
    #[error("{file}: referenced by manifest but missing")]
    MissingFile { file: String },
}

fn io_err(path: &Path, source: std::io::Error) -> ManifestError {
    ManifestError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Where a dataset came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Simulated,
    Ingested,
}

/// One raw tensor file: little-endian f32 values, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorDesc {
    pub name: String,
    /// Path relative to the dataset root.
    pub file: String,
    pub shape: Vec<usize>,
    /// Element encoding; only "f32le" is defined.
    pub dtype: String,
}

impl TensorDesc {
    pub fn f32le(name: &str, file: &str, shape: Vec<usize>) -> Self {
        Self {
            name: name.into(),
            file: file.into(),
            shape,
            dtype: "f32le".into(),
        }
    }

    pub fn byte_len(&self) -> u64 {
        self.shape.iter().product::<usize>() as u64 * 4
    }
}

/// One recorded stimulus condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionEntry {
    pub class_id: u8,
    pub class_label: char,
    pub speed_mm_s: f64,
    /// Condition directory relative to the dataset root.
    pub dir: String,
    pub marker_frames: usize,
    pub audio_samples: usize,
}

/// Dataset description: provenance, generation parameters, and every file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub provenance: Provenance,
    pub seed: u64,
    pub generator_version: String,
    pub frame_rate_hz: usize,
    pub px_per_mm: f64,
    pub conditions: Vec<ConditionEntry>,
    pub tensors: Vec<TensorDesc>,
}

impl Manifest {
    /// Serializes to `manifest.json` under `root`, pretty-printed so diffs
    /// and hashes are stable.
    pub fn save(&self, root: &Path) -> Result<(), ManifestError> {
        let path = root.join(MANIFEST_FILE);
        let mut body = serde_json::to_vec_pretty(self).map_err(|e| ManifestError::Json {
            path: path.clone(),
            source: e,
        })?;
        body.push(b'\n');
        fs::write(&path, body).map_err(|e| io_err(&path, e))
    }

    /// Loads and validates `manifest.json` under `root`: schema version,
    /// file existence, and tensor byte lengths.
    pub fn load(root: &Path) -> Result<Self, ManifestError> {
        let path = root.join(MANIFEST_FILE);
        let body = fs::read(&path).map_err(|e| io_err(&path, e))?;
        let manifest: Manifest =
            serde_json::from_slice(&body).map_err(|e| ManifestError::Json {
                path: path.clone(),
                source: e,
            })?;
        if manifest.schema_version != SCHEMA_VERSION {
            return Err(ManifestError::SchemaVersion {
                got: manifest.schema_version,
            });
        }
        manifest.validate(root)?;
        Ok(manifest)
    }

    /// Checks that every referenced file exists and that tensor files match
    /// their descriptor's byte length exactly.
    pub fn validate(&self, root: &Path) -> Result<(), ManifestError> {
        for t in &self.tensors {
            let path = root.join(&t.file);
            let meta = fs::metadata(&path).map_err(|_| ManifestError::MissingFile {
                file: t.file.clone(),
            })?;
            if meta.len() != t.byte_len() {
                return Err(ManifestError::ByteLength {
                    file: t.file.clone(),
                    got: meta.len(),
                    want: t.byte_len(),
                });
            }
        }
        for c in &self.conditions {
            let audio = format!("{}/audio.wav", c.dir);
            if !root.join(&audio).exists() {
                return Err(ManifestError::MissingFile { file: audio });
            }
        }
        Ok(())
    }
}

/// Writes raw little-endian f32 values.
pub fn write_f32(path: &Path, data: &[f32]) -> Result<(), ManifestError> {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

/// Reads raw little-endian f32 values, insisting on the exact byte length
/// implied by `len`.
pub fn read_f32(path: &Path, len: usize) -> Result<Vec<f32>, ManifestError> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let meta = file.metadata().map_err(|e| io_err(path, e))?;
    if meta.len() != len as u64 * 4 {
        return Err(ManifestError::ByteLength {
            file: path.display().to_string(),
            got: meta.len(),
            want: len as u64 * 4,
        });
    }
    let mut bytes = Vec::with_capacity(len * 4);
    std::io::BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(|e| io_err(path, e))?;
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

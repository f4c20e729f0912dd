use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{ModelParams, Param};
use super::tensor::Tensor;
use super::{LayerSpec, NnError};
use crate::Scalar;

/// Checkpoint document stored as `model.json` beside a `weights/` directory
/// holding one raw little-endian f32 blob per tensor.
#[derive(Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub schema_version: u32,
    pub input_shape: Vec<usize>,
    pub l2_factor: f64,
    pub layers: Vec<LayerSpec>,
    pub weights: Vec<WeightEntry>,
    /// Caller-provided metadata (training config, seed, metrics).
    pub meta: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct WeightEntry {
    pub layer: usize,
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
    pub trainable: bool,
}

const SCHEMA_VERSION: u32 = 1;

fn blob_name(layer: usize, name: &str) -> String {
    format!("weights/l{layer:02}_{}.bin", name.replace('.', "_"))
}

/// Writes `model.json` plus one f32 blob per tensor. Re-running over the same
/// model produces byte-identical files.
pub fn save_checkpoint<F: Scalar>(
    dir: &Path,
    model: &ModelParams<F>,
    meta: serde_json::Value,
) -> Result<(), NnError> {
    fs::create_dir_all(dir.join("weights"))?;
    let mut entries = Vec::new();
    for (layer, group) in model.layer_params().iter().enumerate() {
        for p in group {
            let file = blob_name(layer, &p.name);
            let mut bytes = Vec::with_capacity(p.tensor.len() * 4);
            for &v in p.tensor.data() {
                bytes.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
            }
            fs::File::create(dir.join(&file))?.write_all(&bytes)?;
            entries.push(WeightEntry {
                layer,
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                file,
                trainable: p.trainable,
            });
        }
    }
    let doc = CheckpointMeta {
        schema_version: SCHEMA_VERSION,
        input_shape: model.input_shape().to_vec(),
        l2_factor: model.l2_factor(),
        layers: model.specs().to_vec(),
        weights: entries,
        meta,
    };
    let mut json = serde_json::to_string_pretty(&doc)
        .map_err(|e| NnError::Format(e.to_string()))?;
    json.push('\n');
    fs::write(dir.join("model.json"), json)?;
    Ok(())
}

/// Loads a checkpoint; every blob's byte length must match its declared shape.
pub fn load_checkpoint(dir: &Path) -> Result<(ModelParams<f32>, serde_json::Value), NnError> {
    let doc: CheckpointMeta = serde_json::from_str(&fs::read_to_string(dir.join("model.json"))?)
        .map_err(|e| NnError::Format(format!("model.json: {e}")))?;
    if doc.schema_version != SCHEMA_VERSION {
        return Err(NnError::Format(format!(
            "unsupported checkpoint schema {}",
            doc.schema_version
        )));
    }
    let mut params: Vec<Vec<Param<f32>>> = vec![Vec::new(); doc.layers.len()];
    for entry in &doc.weights {
        if entry.layer >= doc.layers.len() {
            return Err(NnError::Format(format!(
                "weight {} references layer {} of {}",
                entry.name,
                entry.layer,
                doc.layers.len()
            )));
        }
        let want: usize = entry.shape.iter().product::<usize>() * 4;
        let path = dir.join(&entry.file);
        let mut bytes = Vec::new();
        fs::File::open(&path)?.read_to_end(&mut bytes)?;
        if bytes.len() != want {
            return Err(NnError::Format(format!(
                "{}: expected {} bytes for shape {:?}, found {}",
                path.display(),
                want,
                entry.shape,
                bytes.len()
            )));
        }
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params[entry.layer].push(Param {
            name: entry.name.clone(),
            tensor: Tensor::new(entry.shape.clone(), data)?,
            trainable: entry.trainable,
        });
    }
    let model = ModelParams::from_parts(doc.layers, &doc.input_shape, doc.l2_factor, params)?;
    Ok((model, doc.meta))
}

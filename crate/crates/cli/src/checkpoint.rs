//! Checkpoint container: a directory of raw little-endian f32 arrays plus a
//! JSON index carrying names, shapes, dtype, step and the config hash.
//! load(save(c)) is bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use handprint_core::nn::ParamOwner;
use handprint_core::Tensor;

use crate::error::{CliError, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct IndexArray {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    file: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct IndexFile {
    version: u32,
    step: u64,
    config_hash: String,
    arrays: Vec<IndexArray>,
}

/// In-memory checkpoint: named f32 arrays with shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub config_hash: String,
    pub arrays: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl Checkpoint {
    /// Snapshot of a model: trainable parameters plus running buffers
    /// (buffers are stored as rank-1 arrays under their own names).
    pub fn from_model(model: &mut dyn ParamOwner, step: u64, config_hash: &str) -> Self {
        let mut arrays: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::new();
        model.visit_params("", &mut |name: &str, t: &mut Tensor| {
            arrays.push((
                name.to_string(),
                t.shape().to_vec(),
                t.data().iter().map(|&v| v as f32).collect(),
            ));
        });
        model.visit_buffers("buffers", &mut |name: &str, data: &mut Vec<f64>| {
            arrays.push((
                name.to_string(),
                vec![data.len()],
                data.iter().map(|&v| v as f32).collect(),
            ));
        });
        Checkpoint {
            step,
            config_hash: config_hash.to_string(),
            arrays,
        }
    }

    /// Writes parameters and buffers back into a freshly built model of the
    /// same architecture.
    pub fn into_model(&self, model: &mut dyn ParamOwner) -> Result<()> {
        let mut missing: Vec<String> = Vec::new();
        let lookup: std::collections::BTreeMap<&str, &(String, Vec<usize>, Vec<f32>)> =
            self.arrays.iter().map(|a| (a.0.as_str(), a)).collect();
        model.visit_params(
            "",
            &mut |name: &str, t: &mut Tensor| match lookup.get(name) {
                Some((_, shape, data)) if shape == t.shape() => {
                    *t = Tensor::param(shape, data.iter().map(|&v| v as f64).collect());
                }
                Some(_) => missing.push(format!("{name} (shape mismatch)")),
                None => missing.push(name.to_string()),
            },
        );
        model.visit_buffers(
            "buffers",
            &mut |name: &str, data: &mut Vec<f64>| match lookup.get(name) {
                Some((_, shape, values)) if shape[0] == data.len() => {
                    for (d, v) in data.iter_mut().zip(values) {
                        *d = *v as f64;
                    }
                }
                Some(_) => missing.push(format!("{name} (length mismatch)")),
                None => missing.push(name.to_string()),
            },
        );
        if missing.is_empty() {
            Ok(())
        } else {
            Err(CliError::Data(format!(
                "checkpoint missing arrays: {}",
                missing.join(", ")
            )))
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut index = IndexFile {
            version: FORMAT_VERSION,
            step: self.step,
            config_hash: self.config_hash.clone(),
            arrays: Vec::with_capacity(self.arrays.len()),
        };
        for (i, (name, shape, data)) in self.arrays.iter().enumerate() {
            let file = format!("arr_{i:04}.bin");
            let mut f = std::fs::File::create(dir.join(&file))?;
            let mut bytes = Vec::with_capacity(data.len() * 4);
            for &v in data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            f.write_all(&bytes)?;
            index.arrays.push(IndexArray {
                name: name.clone(),
                shape: shape.clone(),
                dtype: "f32".into(),
                file,
            });
        }
        let text = serde_json::to_string_pretty(&index)
            .map_err(|e| CliError::Data(format!("index encode: {e}")))?;
        std::fs::write(dir.join("index.json"), text)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Checkpoint> {
        let index_path = dir.join("index.json");
        let text = std::fs::read_to_string(&index_path)
            .map_err(|e| CliError::Data(format!("cannot open {}: {e}", index_path.display())))?;
        let index: IndexFile = serde_json::from_str(&text).map_err(|e| {
            CliError::Data(format!("corrupted index {}: {e}", index_path.display()))
        })?;
        if index.version != FORMAT_VERSION {
            return Err(CliError::Data(format!(
                "checkpoint format version {} not supported (expected {FORMAT_VERSION})",
                index.version
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        let mut arrays = Vec::with_capacity(index.arrays.len());
        for a in &index.arrays {
            if a.dtype != "f32" {
                return Err(CliError::Data(format!(
                    "array {}: unsupported dtype {}",
                    a.name, a.dtype
                )));
            }
            if !seen.insert(a.name.clone()) {
                return Err(CliError::Data(format!(
                    "array {} listed more than once",
                    a.name
                )));
            }
            let n: usize = a.shape.iter().product();
            let mut f = std::fs::File::open(dir.join(&a.file))
                .map_err(|e| CliError::Data(format!("cannot open array {}: {e}", a.file)))?;
            let mut bytes = Vec::new();
            f.read_to_end(&mut bytes)?;
            if bytes.len() != n * 4 {
                return Err(CliError::Data(format!(
                    "array {}: expected {} bytes, found {}",
                    a.name,
                    n * 4,
                    bytes.len()
                )));
            }
            let data: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            arrays.push((a.name.clone(), a.shape.clone(), data));
        }
        Ok(Checkpoint {
            step: index.step,
            config_hash: index.config_hash,
            arrays,
        })
    }
}

//! On-disk checkpoint container: a human-readable `manifest.json` naming
//! every tensor (shape, dtype, byte offset, length) plus a raw
//! `weights.bin` of little-endian f32 data, contiguous in index order.
//! Loading and re-saving reproduces both files byte for byte.

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Transformer};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: serde_json::Value,
    pub tensors: BTreeMap<String, TensorEntry>,
}

/// An ordered named-tensor set plus an arbitrary JSON config payload.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl Checkpoint {
    pub fn from_named(config: serde_json::Value, named: &[(String, Tensor<f32>)]) -> Self {
        let mut tensors: Vec<(String, Vec<usize>, Vec<f32>)> = named
            .iter()
            .map(|(n, t)| (n.clone(), t.shape().to_vec(), t.to_vec()))
            .collect();
        // Index order is name order; the weight blob follows it.
        tensors.sort_by(|a, b| a.0.cmp(&b.0));
        Checkpoint { config, tensors }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut entries = BTreeMap::new();
        let mut blob: Vec<u8> = Vec::new();
        for (name, shape, data) in &self.tensors {
            let offset = blob.len() as u64;
            for v in data {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            entries.insert(
                name.clone(),
                TensorEntry {
                    shape: shape.clone(),
                    dtype: "f32".to_string(),
                    offset,
                    length: (data.len() * 4) as u64,
                },
            );
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            tensors: entries,
        };
        let mut mf = std::fs::File::create(dir.join("manifest.json"))?;
        mf.write_all(serde_json::to_string_pretty(&manifest)?.as_bytes())?;
        mf.write_all(b"\n")?;
        std::fs::File::create(dir.join("weights.bin"))?.write_all(&blob)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Checkpoint> {
        let manifest: Manifest =
            serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::ArtifactMismatch(format!(
                "checkpoint format {} unsupported",
                manifest.format_version
            )));
        }
        let mut blob = Vec::new();
        std::fs::File::open(dir.join("weights.bin"))?.read_to_end(&mut blob)?;
        // Entries must tile the blob without gaps or overlap.
        let mut spans: Vec<(u64, u64, &String)> = manifest
            .tensors
            .iter()
            .map(|(n, e)| (e.offset, e.length, n))
            .collect();
        spans.sort_unstable();
        let mut cursor = 0u64;
        for (off, len, name) in &spans {
            if *off != cursor {
                return Err(Error::ArtifactMismatch(format!(
                    "tensor {name} at offset {off}, expected {cursor}"
                )));
            }
            cursor = off + len;
        }
        if cursor != blob.len() as u64 {
            return Err(Error::ArtifactMismatch(format!(
                "weights.bin has {} bytes, index covers {cursor}",
                blob.len()
            )));
        }
        let mut tensors = Vec::new();
        for (name, e) in &manifest.tensors {
            if e.dtype != "f32" {
                return Err(Error::ArtifactMismatch(format!(
                    "tensor {name} has dtype {}",
                    e.dtype
                )));
            }
            let numel: usize = e.shape.iter().product();
            if numel * 4 != e.length as usize {
                return Err(Error::ArtifactMismatch(format!(
                    "tensor {name}: shape {:?} disagrees with byte length {}",
                    e.shape, e.length
                )));
            }
            let bytes = &blob[e.offset as usize..(e.offset + e.length) as usize];
            let data: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((name.clone(), e.shape.clone(), data));
        }
        Ok(Checkpoint {
            config: manifest.config,
            tensors,
        })
    }

    pub fn tensor(&self, name: &str) -> Option<(&[usize], &[f32])> {
        self.tensors
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, s, d)| (s.as_slice(), d.as_slice()))
    }

    /// Digest over the config payload; adapters check this against their
    /// base model before running together.
    pub fn config_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_string(&self.config).unwrap().as_bytes());
        let d = h.finalize();
        d.iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub fn save_model(dir: &Path, model: &Transformer<f32>) -> Result<()> {
    let config = serde_json::to_value(&model.cfg)?;
    Checkpoint::from_named(config, &model.named_params()).save(dir)
}

pub fn load_model(dir: &Path) -> Result<Transformer<f32>> {
    let ckpt = Checkpoint::load(dir)?;
    let cfg: ModelConfig = serde_json::from_value(ckpt.config.clone())?;
    let model = Transformer::init(cfg, 0);
    restore_named(&ckpt, &model.named_params())?;
    Ok(model)
}

/// Copies checkpoint tensors into an existing named parameter set.
pub fn restore_named(ckpt: &Checkpoint, named: &[(String, Tensor<f32>)]) -> Result<()> {
    for (name, t) in named {
        let (shape, data) = ckpt.tensor(name).ok_or_else(|| {
            Error::ArtifactMismatch(format!("checkpoint missing tensor {name}"))
        })?;
        if shape != t.shape() {
            return Err(Error::ArtifactMismatch(format!(
                "tensor {name}: checkpoint shape {shape:?} vs model {:?}",
                t.shape()
            )));
        }
        t.data_mut().copy_from_slice(data);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_byte_identical() {
        let dir = std::env::temp_dir().join(format!("ckpt_rt_{}", std::process::id()));
        let cfg = ModelConfig {
            vocab_size: 256,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            n_kv_heads: 1,
            d_ff: 32,
            max_seq_len: 16,
            norm_eps: 1e-5,
            rope_base: 10000.0,
            tie_lm_head: true,
        };
        let model: Transformer<f32> = Transformer::init(cfg, 3);
        save_model(&dir, &model).unwrap();
        let m1 = std::fs::read(dir.join("manifest.json")).unwrap();
        let w1 = std::fs::read(dir.join("weights.bin")).unwrap();

        let loaded = Checkpoint::load(&dir).unwrap();
        loaded.save(&dir).unwrap();
        let m2 = std::fs::read(dir.join("manifest.json")).unwrap();
        let w2 = std::fs::read(dir.join("weights.bin")).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(w1, w2);

        // And the reconstructed model is bit-identical.
        let restored = load_model(&dir).unwrap();
        assert_eq!(
            crate::model::freeze_checksum(&model.named_params()),
            crate::model::freeze_checksum(&restored.named_params())
        );
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn corrupted_offsets_are_rejected() {
        let dir = std::env::temp_dir().join(format!("ckpt_bad_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let ckpt = Checkpoint {
            config: serde_json::json!({}),
            tensors: vec![("a".into(), vec![2], vec![1.0, 2.0])],
        };
        ckpt.save(&dir).unwrap();
        // Shift the offset in the manifest.
        let text = std::fs::read_to_string(dir.join("manifest.json")).unwrap();
        let bad = text.replace("\"offset\": 0", "\"offset\": 4");
        std::fs::write(dir.join("manifest.json"), bad).unwrap();
        assert!(Checkpoint::load(&dir).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}

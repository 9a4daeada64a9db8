//! Weight checkpoint files: a JSON manifest line followed by the binary
//! tensor payload for every parameter (value, then optimizer velocity), in
//! manifest order. Format version `regconv-ckpt-v1`.

use crate::autodiff::ParamSet;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{read_tensor, write_tensor};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const CHECKPOINT_VERSION: &str = "regconv-ckpt-v1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: String,
    pub group_order: usize,
    pub precision: String,
    pub step: u64,
    pub layers: Vec<LayerEntry>,
    /// Free-form run metadata (variant, seeds, config hash, ...).
    #[serde(default)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerEntry {
    pub name: String,
    pub dims: Vec<usize>,
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    params: &ParamSet<T>,
    group_order: usize,
    step: u64,
    extra: serde_json::Map<String, serde_json::Value>,
) -> Result<()> {
    let meta = CheckpointMeta {
        version: CHECKPOINT_VERSION.to_string(),
        group_order,
        precision: T::NAME.to_string(),
        step,
        layers: params
            .iter()
            .map(|e| LayerEntry {
                name: e.name.clone(),
                dims: e.dims.clone(),
            })
            .collect(),
        extra,
    };
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &meta)?;
    w.write_all(b"\n")?;
    for e in params.iter() {
        write_tensor(&mut w, &e.dims, &e.value)?;
        write_tensor(&mut w, &e.dims, &e.velocity)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(ParamSet<T>, CheckpointMeta)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim().is_empty() {
        return Err(Error::Truncated);
    }
    let meta: CheckpointMeta = serde_json::from_str(line.trim())?;
    if meta.version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            expected: CHECKPOINT_VERSION.to_string(),
            found: meta.version.clone(),
        });
    }
    let mut params = ParamSet::new();
    for layer in &meta.layers {
        let (dims, value) = read_block::<_, T>(&mut r, &layer.dims)?;
        let (_, velocity) = read_block::<_, T>(&mut r, &layer.dims)?;
        let id = params.add(&layer.name, dims, value);
        params.entry_mut(id).velocity = velocity;
    }
    Ok((params, meta))
}

fn read_block<R: Read, T: Scalar>(r: &mut R, expect_dims: &[usize]) -> Result<(Vec<usize>, Vec<T>)> {
    let (dims, data) = read_tensor(r)?;
    if dims != expect_dims {
        return Err(Error::ShapeMismatch(format!(
            "checkpoint tensor dims {:?} do not match manifest {:?}",
            dims, expect_dims
        )));
    }
    Ok((dims, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::backbone::{init_params, BackboneConfig, ModelKind};

    #[test]
    fn roundtrip_preserves_values_and_velocity() {
        let cfg = BackboneConfig::tiny(4);
        let mut params = init_params::<f64>(&cfg, ModelKind::Equivariant, 5).unwrap();
        let id = params.id("stem.base").unwrap();
        params.entry_mut(id).velocity[0] = 0.25;

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.ckpt");
        let mut extra = serde_json::Map::new();
        extra.insert("variant".into(), "equi".into());
        save_checkpoint(&path, &params, 4, 42, extra).unwrap();

        let (loaded, meta) = load_checkpoint::<f64>(&path).unwrap();
        assert_eq!(meta.version, CHECKPOINT_VERSION);
        assert_eq!(meta.step, 42);
        assert_eq!(meta.group_order, 4);
        assert_eq!(meta.extra["variant"], "equi");
        assert_eq!(loaded.len(), params.len());
        for (a, b) in loaded.iter().zip(params.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
            assert_eq!(a.velocity, b.velocity);
        }
    }

    #[test]
    fn rejects_version_mismatch() {
        let cfg = BackboneConfig::tiny(4);
        let params = init_params::<f64>(&cfg, ModelKind::Equivariant, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        save_checkpoint(&path, &params, 4, 0, serde_json::Map::new()).unwrap();
        let text = std::fs::read(&path).unwrap();
        let patched = String::from_utf8_lossy(&text).replace("ckpt-v1", "ckpt-v0");
        std::fs::write(&path, patched.as_bytes()).unwrap();
        assert!(matches!(
            load_checkpoint::<f64>(&path),
            Err(Error::VersionMismatch { .. })
        ));
    }
}

//! On-disk parameter checkpoints.
//!
//! A checkpoint is a directory holding `manifest.json` and one blob per
//! parameter array. Blobs are row-major little-endian IEEE-754 `f32`,
//! independent of the in-memory scalar type. The manifest lists every array
//! (name, shape, blob file) in store order plus a free-form `meta` object
//! that each producer fills with what it needs to rebuild the model.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const FORMAT: &str = "kdiag-checkpoint";
pub const VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub kind: String,
    pub meta: serde_json::Value,
    pub arrays: Vec<ArrayEntry>,
}

pub fn save<T: Scalar>(dir: &Path, kind: &str, meta: serde_json::Value, params: &ParamStore<T>) -> Result<()> {
    let blobs = dir.join("arrays");
    fs::create_dir_all(&blobs).map_err(|e| Error::io(&blobs, e))?;
    let mut arrays = Vec::with_capacity(params.len());
    for (i, (name, tensor)) in params.iter().enumerate() {
        let file = format!("arrays/{i:03}.bin");
        let mut bytes = Vec::with_capacity(tensor.len() * 4);
        for &x in tensor.data() {
            bytes.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        }
        let path = dir.join(&file);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        arrays.push(ArrayEntry {
            name: name.to_string(),
            shape: tensor.shape().to_vec(),
            file,
        });
    }
    let manifest = CheckpointManifest {
        format: FORMAT.into(),
        version: VERSION,
        kind: kind.into(),
        meta,
        arrays,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Parse(e.to_string()))?;
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    if manifest.format != FORMAT {
        return Err(Error::Parse(format!("not a checkpoint: format `{}`", manifest.format)));
    }
    if manifest.version != VERSION {
        return Err(Error::Parse(format!(
            "unsupported checkpoint version {}",
            manifest.version
        )));
    }
    Ok(manifest)
}

/// Loads a checkpoint, checking `kind` when given.
pub fn load<T: Scalar>(dir: &Path, kind: Option<&str>) -> Result<(CheckpointManifest, ParamStore<T>)> {
    let manifest = read_manifest(dir)?;
    if let Some(kind) = kind {
        if manifest.kind != kind {
            return Err(Error::Parse(format!(
                "expected a `{kind}` checkpoint, found `{}`",
                manifest.kind
            )));
        }
    }
    let mut params = ParamStore::new();
    for entry in &manifest.arrays {
        let path = dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let n: usize = entry.shape.iter().product();
        if bytes.len() != n * 4 {
            return Err(Error::Parse(format!(
                "{}: expected {} bytes, found {}",
                path.display(),
                n * 4,
                bytes.len()
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| T::lit(f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]]))))
            .collect();
        params.add(entry.name.clone(), Tensor::from_vec(&entry.shape, data)?);
    }
    Ok((manifest, params))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_f32_bits() {
        let dir = std::env::temp_dir().join(format!("kdiag-ckpt-{}", std::process::id()));
        let mut store = ParamStore::<f32>::new();
        store.add("a.weight", Tensor::from_vec(&[2, 2], vec![1.5, -0.25, 3.0e-7, 8.0]).unwrap());
        store.add("a.bias", Tensor::from_vec(&[2], vec![0.0, -1.0]).unwrap());
        save(&dir, "unit", serde_json::json!({"d": 2}), &store).unwrap();
        let (manifest, loaded) = load::<f32>(&dir, Some("unit")).unwrap();
        assert_eq!(loaded, store);
        assert_eq!(manifest.meta["d"], 2);
        assert!(load::<f32>(&dir, Some("other")).is_err());
        let blob = fs::read(dir.join("arrays/001.bin")).unwrap();
        assert_eq!(blob, [0, 0, 0, 0, 0, 0, 0x80, 0xbf]);
        fs::remove_dir_all(&dir).unwrap();
    }
}

//! Checkpoint directory format.
//!
//! A checkpoint is three files:
//!
//! * `manifest.txt` — header `ccl-checkpoint v1 step=<k> params=<n>`, then
//!   one line per parameter: `<name> <d0>x<d1>... <offset> <len>`, offsets in
//!   float units into the blob, in store order;
//! * `params.bin` — all parameter values as little-endian 32-bit floats,
//!   concatenated in manifest order;
//! * `config.toml` — the effective run configuration.
//!
//! Save → load round-trips bit-exactly. Any disagreement between manifest
//! and blob (or a truncated blob) is an integrity error, not a crash.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::DualStreamModel;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::numel_of;

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const BLOB_FILE: &str = "params.bin";
pub const CONFIG_FILE: &str = "config.toml";
const VERSION: &str = "v1";

#[derive(Debug)]
pub struct LoadedCheckpoint {
    pub step: usize,
    pub params: Vec<(String, Vec<usize>, Vec<f32>)>,
    pub config_toml: String,
}

pub fn save_checkpoint<S: Scalar>(
    dir: &Path,
    store: &ParamStore<S>,
    step: usize,
    config_toml: &str,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = format!("ccl-checkpoint {VERSION} step={step} params={}\n", store.len());
    let mut blob: Vec<u8> = Vec::with_capacity(store.total_values() * 4);
    let mut offset = 0usize;
    for (name, tensor) in store.iter() {
        let dims: Vec<String> = tensor.shape().iter().map(|d| d.to_string()).collect();
        let shape = if dims.is_empty() { "scalar".to_string() } else { dims.join("x") };
        manifest.push_str(&format!("{name} {shape} {offset} {}\n", tensor.numel()));
        for v in tensor.data() {
            blob.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        offset += tensor.numel();
    }
    // write-and-rename so a crash never leaves a torn checkpoint behind
    atomic_write(&dir.join(MANIFEST_FILE), manifest.as_bytes())?;
    atomic_write(&dir.join(BLOB_FILE), &blob)?;
    atomic_write(&dir.join(CONFIG_FILE), config_toml.as_bytes())?;
    Ok(())
}

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<LoadedCheckpoint> {
    let manifest = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let mut lines = manifest.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Integrity("empty manifest".to_string()))?;
    let mut step = None;
    let mut count = None;
    let mut fields = header.split_whitespace();
    if fields.next() != Some("ccl-checkpoint") {
        return Err(Error::Integrity(format!("not a checkpoint manifest: {header:?}")));
    }
    match fields.next() {
        Some(VERSION) => {}
        Some(other) => {
            return Err(Error::Integrity(format!("unsupported checkpoint version {other:?}")))
        }
        None => return Err(Error::Integrity("manifest header missing version".to_string())),
    }
    for field in fields {
        if let Some(v) = field.strip_prefix("step=") {
            step = v.parse::<usize>().ok();
        } else if let Some(v) = field.strip_prefix("params=") {
            count = v.parse::<usize>().ok();
        }
    }
    let step = step.ok_or_else(|| Error::Integrity("manifest header missing step".to_string()))?;
    let count =
        count.ok_or_else(|| Error::Integrity("manifest header missing params".to_string()))?;

    let mut blob = Vec::new();
    std::fs::File::open(dir.join(BLOB_FILE))?.read_to_end(&mut blob)?;
    if blob.len() % 4 != 0 {
        return Err(Error::Integrity(format!("blob length {} is not float-aligned", blob.len())));
    }
    let total_floats = blob.len() / 4;

    let mut params = Vec::with_capacity(count);
    let mut expected_offset = 0usize;
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 4 {
            return Err(Error::Integrity(format!("bad manifest line {line:?}")));
        }
        let name = parts[0].to_string();
        let shape: Vec<usize> = if parts[1] == "scalar" {
            vec![]
        } else {
            parts[1]
                .split('x')
                .map(|d| {
                    d.parse::<usize>()
                        .map_err(|_| Error::Integrity(format!("bad shape in line {line:?}")))
                })
                .collect::<Result<_>>()?
        };
        let offset: usize = parts[2]
            .parse()
            .map_err(|_| Error::Integrity(format!("bad offset in line {line:?}")))?;
        let len: usize = parts[3]
            .parse()
            .map_err(|_| Error::Integrity(format!("bad length in line {line:?}")))?;
        if numel_of(&shape) != len {
            return Err(Error::Integrity(format!("shape/length mismatch in line {line:?}")));
        }
        if offset != expected_offset {
            return Err(Error::Integrity(format!(
                "non-contiguous manifest at {name}: offset {offset}, expected {expected_offset}"
            )));
        }
        if offset + len > total_floats {
            return Err(Error::Integrity(format!(
                "blob truncated: {name} needs floats up to {}, blob has {total_floats}",
                offset + len
            )));
        }
        let mut data = Vec::with_capacity(len);
        for i in 0..len {
            let base = (offset + i) * 4;
            data.push(f32::from_le_bytes([
                blob[base],
                blob[base + 1],
                blob[base + 2],
                blob[base + 3],
            ]));
        }
        params.push((name, shape, data));
        expected_offset += len;
    }
    if params.len() != count {
        return Err(Error::Integrity(format!(
            "manifest lists {} parameters, header declares {count}",
            params.len()
        )));
    }
    if expected_offset != total_floats {
        return Err(Error::Integrity(format!(
            "blob holds {total_floats} floats, manifest accounts for {expected_offset}"
        )));
    }
    let config_toml = std::fs::read_to_string(dir.join(CONFIG_FILE))?;
    Ok(LoadedCheckpoint { step, params, config_toml })
}

/// Copy loaded parameters into a freshly built model. Names and shapes must
/// match the store exactly, in order.
pub fn load_into_model<S: Scalar>(
    model: &mut DualStreamModel<S>,
    loaded: &LoadedCheckpoint,
) -> Result<()> {
    if loaded.params.len() != model.store.len() {
        return Err(Error::Integrity(format!(
            "checkpoint has {} parameters, model expects {}",
            loaded.params.len(),
            model.store.len()
        )));
    }
    for ((name, shape, data), id) in loaded.params.iter().zip(model.store.ids()) {
        if model.store.name(id) != name || model.store.get(id).shape() != shape.as_slice() {
            return Err(Error::Integrity(format!(
                "checkpoint parameter {name} does not match model parameter {}",
                model.store.name(id)
            )));
        }
        let dst = model.store.get_mut(id).data_mut();
        for (d, &v) in dst.iter_mut().zip(data.iter()) {
            *d = S::from_f64(v as f64);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let model = DualStreamModel::<f32>::init(ModelConfig::tiny(), 4).unwrap();
        let d1 = dir.path().join("a");
        save_checkpoint(&d1, &model.store, 12, "config = true\n").unwrap();
        let loaded = load_checkpoint(&d1).unwrap();
        assert_eq!(loaded.step, 12);

        let mut model2 = DualStreamModel::<f32>::init(ModelConfig::tiny(), 999).unwrap();
        load_into_model(&mut model2, &loaded).unwrap();
        let d2 = dir.path().join("b");
        save_checkpoint(&d2, &model2.store, 12, "config = true\n").unwrap();

        let b1 = std::fs::read(d1.join(BLOB_FILE)).unwrap();
        let b2 = std::fs::read(d2.join(BLOB_FILE)).unwrap();
        assert_eq!(b1, b2);
        let m1 = std::fs::read(d1.join(MANIFEST_FILE)).unwrap();
        let m2 = std::fs::read(d2.join(MANIFEST_FILE)).unwrap();
        assert_eq!(m1, m2);
    }

    #[test]
    fn truncated_blob_is_an_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let model = DualStreamModel::<f32>::init(ModelConfig::tiny(), 4).unwrap();
        save_checkpoint(dir.path(), &model.store, 0, "").unwrap();
        let blob_path = dir.path().join(BLOB_FILE);
        let blob = std::fs::read(&blob_path).unwrap();
        std::fs::write(&blob_path, &blob[..blob.len() - 8]).unwrap();
        let err = load_checkpoint(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Integrity(_)), "{err}");
    }

    #[test]
    fn manifest_mismatch_is_an_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let model = DualStreamModel::<f32>::init(ModelConfig::tiny(), 4).unwrap();
        save_checkpoint(dir.path(), &model.store, 0, "").unwrap();
        let loaded = load_checkpoint(dir.path()).unwrap();
        // a model with a different architecture refuses the parameters
        let mut other =
            DualStreamModel::<f32>::init(ModelConfig::tiny().with_variant(crate::model::Variant::Gated), 4)
                .unwrap();
        assert!(load_into_model(&mut other, &loaded).is_err());
    }

    #[test]
    fn manifest_ordering_is_stable() {
        let dir = tempfile::tempdir().unwrap();
        let model = DualStreamModel::<f32>::init(ModelConfig::tiny(), 4).unwrap();
        save_checkpoint(&dir.path().join("x"), &model.store, 0, "").unwrap();
        save_checkpoint(&dir.path().join("y"), &model.store, 0, "").unwrap();
        let a = std::fs::read(dir.path().join("x").join(MANIFEST_FILE)).unwrap();
        let b = std::fs::read(dir.path().join("y").join(MANIFEST_FILE)).unwrap();
        assert_eq!(a, b);
    }
}

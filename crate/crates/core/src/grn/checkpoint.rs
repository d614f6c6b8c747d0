//! On-disk form of a distilled model: a directory holding `manifest.json`
//! and one tensor container file per parameter.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{GrnConfig, GrnModel, LayerParams};
use crate::autodiff::BatchNormState;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    config: GrnConfig,
    class_ids: Vec<usize>,
    bank_hashes: Vec<String>,
    batch_norm: Vec<BatchNormState>,
    /// Parameter name → file name, in parameter order.
    tensors: Vec<(String, String)>,
}

fn param_names(model: &GrnModel) -> Vec<String> {
    let mut out = Vec::new();
    for (k, l) in model.layers.iter().enumerate() {
        out.push(format!("layer{k}.w1"));
        out.push(format!("layer{k}.w2"));
        if l.w3.is_some() {
            out.push(format!("layer{k}.w3"));
        }
        out.push(format!("layer{k}.w4"));
        out.push(format!("layer{k}.gamma"));
        out.push(format!("layer{k}.beta"));
    }
    out.extend(["e", "embed.w", "embed.b"].map(String::from));
    out
}

pub fn save_model(model: &GrnModel, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let names = param_names(model);
    let mut tensors = Vec::with_capacity(names.len());
    for (name, t) in names.into_iter().zip(model.params()) {
        let file = format!("{name}.json");
        t.save(&dir.join(&file))?;
        tensors.push((name, file));
    }
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        config: model.config.clone(),
        class_ids: model.class_ids.clone(),
        bank_hashes: model.bank_hashes.clone(),
        batch_norm: model.bn_states(),
        tensors,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_model(dir: &Path) -> Result<GrnModel> {
    let mpath = dir.join("manifest.json");
    let where_ = mpath.display().to_string();
    let manifest: Manifest = serde_json::from_slice(&fs::read(&mpath)?)
        .map_err(|e| Error::schema(&where_, e.to_string()))?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::schema(&where_, format!("unsupported version {}", manifest.version)));
    }
    // A fresh model fixes the expected shapes; the files then overwrite it.
    let mut model = GrnModel::new(manifest.config, manifest.class_ids, 0)?;
    model.bank_hashes = manifest.bank_hashes;
    let names = param_names(&model);
    if manifest.tensors.len() != names.len() || manifest.batch_norm.len() != model.layers.len() {
        return Err(Error::schema(&where_, "parameter list does not match the config"));
    }
    for ((name, file), (expected, slot)) in manifest.tensors.iter().zip(names.iter().zip(model.params_mut())) {
        if name != expected {
            return Err(Error::schema(&where_, format!("expected tensor {expected}, found {name}")));
        }
        let t = Tensor::load(&dir.join(file))?;
        if t.shape() != slot.shape() {
            return Err(Error::shape("checkpoint tensor", slot.shape(), t.shape()));
        }
        *slot = t;
    }
    for (l, bn) in model.layers.iter_mut().zip(manifest.batch_norm) {
        let LayerParams { gamma, .. } = l;
        if bn.running_mean.len() != gamma.len() {
            return Err(Error::schema(&where_, "batch-norm width does not match the config"));
        }
        l.bn = bn;
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let mut m = GrnModel::new(GrnConfig::new(2, 3, 6), vec![4, 7], 9).unwrap();
        m.bank_hashes = vec!["aa".into(), "bb".into()];
        m.layers[1].bn.running_mean[0] = 0.123456789;
        let dir = tempfile::tempdir().unwrap();
        save_model(&m, dir.path()).unwrap();
        assert_eq!(load_model(dir.path()).unwrap(), m);
    }

    #[test]
    fn missing_tensor_is_reported() {
        let m = GrnModel::new(GrnConfig::new(2, 2, 3), vec![0, 1], 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_model(&m, dir.path()).unwrap();
        fs::remove_file(dir.path().join("e.json")).unwrap();
        assert!(load_model(dir.path()).is_err());
    }
}

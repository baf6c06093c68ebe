//! Checkpoint directories: a parameter manifest, raw little-endian arrays for
//! parameters and optimizer moments, and a JSON metadata file.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::dataset::NormStats;
use crate::error::{Error, Result};
use crate::model::StHyper;
use crate::params::{Adam, ParamStore};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";
pub const OPTIMIZER_FILE: &str = "optimizer.bin";
pub const META_FILE: &str = "meta.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub dtype: String,
    /// Byte offset into the array files.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub config_hash: String,
    pub n_vars: usize,
    pub variable_names: Vec<String>,
    pub norm_stats: NormStats,
    pub epoch: usize,
    pub best_val_loss: f64,
    pub adam_step: u64,
}

/// A trained model: parameters, optimizer state and everything needed to
/// rebuild the structure and undo normalization.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore,
    pub adam: Adam,
}

fn write_arrays(path: &Path, arrays: &[Array2<f64>]) -> Result<()> {
    let bytes: Vec<u8> = arrays.iter().flat_map(|a| a.iter()).flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_arrays(path: &Path, manifest: &[ManifestEntry]) -> Result<Vec<Array2<f64>>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    manifest
        .iter()
        .map(|entry| {
            let [r, c] = entry.shape;
            let end = entry.offset + r * c * 8;
            if entry.dtype != "f64" {
                return Err(Error::Checkpoint(format!("unsupported dtype {} for {}", entry.dtype, entry.name)));
            }
            let raw = bytes
                .get(entry.offset..end)
                .ok_or_else(|| Error::Checkpoint(format!("{} truncated at {}", path.display(), entry.name)))?;
            let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
            Array2::from_shape_vec((r, c), data).map_err(|e| Error::Checkpoint(e.to_string()))
        })
        .collect()
}

impl Checkpoint {
    pub fn new(
        model: &StHyper,
        params: ParamStore,
        adam: Adam,
        norm_stats: NormStats,
        variable_names: Vec<String>,
        epoch: usize,
        best_val_loss: f64,
    ) -> Self {
        let meta = CheckpointMeta {
            config: model.cfg.clone(),
            config_hash: model.cfg.hash(),
            n_vars: model.n_vars,
            variable_names,
            norm_stats,
            epoch,
            best_val_loss,
            adam_step: adam.step,
        };
        Self { meta, params, adam }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut offset = 0;
        let manifest: Vec<ManifestEntry> = self
            .params
            .iter()
            .map(|(name, v)| {
                let entry = ManifestEntry { name: name.to_string(), shape: [v.nrows(), v.ncols()], dtype: "f64".into(), offset };
                offset += v.len() * 8;
                entry
            })
            .collect();
        let write_json = |file: &str, value: String| {
            let path = dir.join(file);
            fs::write(&path, value).map_err(|e| Error::io(&path, e))
        };
        write_json(MANIFEST_FILE, serde_json::to_string_pretty(&manifest)?)?;
        write_json(META_FILE, serde_json::to_string_pretty(&self.meta)?)?;
        write_arrays(&dir.join(PARAMS_FILE), self.params.values())?;
        let moments: Vec<Array2<f64>> =
            self.adam.first_moment.iter().chain(&self.adam.second_moment).cloned().collect();
        write_arrays(&dir.join(OPTIMIZER_FILE), &moments)
    }

    /// Loads `dir` and checks it against the structure rebuilt from its config.
    pub fn load(dir: &Path) -> Result<(StHyper, Self)> {
        let read = |file: &str| {
            let path = dir.join(file);
            fs::read_to_string(&path).map_err(|e| Error::io(&path, e))
        };
        let manifest: Vec<ManifestEntry> = serde_json::from_str(&read(MANIFEST_FILE)?)?;
        let meta: CheckpointMeta = serde_json::from_str(&read(META_FILE)?)?;
        if meta.config.hash() != meta.config_hash {
            return Err(Error::Checkpoint("config hash does not match stored config".into()));
        }
        let (model, mut params) = StHyper::new(&meta.config, meta.n_vars)?;
        if manifest.len() != params.len() {
            return Err(Error::Checkpoint(format!("manifest lists {} parameters, model has {}", manifest.len(), params.len())));
        }
        let values = read_arrays(&dir.join(PARAMS_FILE), &manifest)?;
        for ((entry, value), id) in manifest.iter().zip(values).zip(params.ids().collect::<Vec<_>>()) {
            let slot = params.get(id);
            if params.name(id) != entry.name || slot.dim() != value.dim() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} {:?} does not match model parameter {} {:?}",
                    entry.name,
                    value.dim(),
                    params.name(id),
                    slot.dim()
                )));
            }
            *params.get_mut(id) = value;
        }
        let mut adam = Adam::new(&params, meta.config.learning_rate);
        let shifted: Vec<ManifestEntry> = {
            let half: usize = manifest.iter().map(|e| e.shape[0] * e.shape[1] * 8).sum();
            manifest
                .iter()
                .cloned()
                .chain(manifest.iter().map(|e| ManifestEntry { offset: e.offset + half, ..e.clone() }))
                .collect()
        };
        let moments = read_arrays(&dir.join(OPTIMIZER_FILE), &shifted)?;
        let (first, second) = moments.split_at(manifest.len());
        adam.first_moment = first.to_vec();
        adam.second_moment = second.to_vec();
        adam.step = meta.adam_step;
        Ok((model, Self { meta, params, adam }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn cfg() -> ModelConfig {
        ModelConfig {
            input_len: 16,
            horizon: 4,
            pooling_ratio: 3,
            patch_len: 4,
            temporal_scales: 2,
            hyperedge_nodes: 3,
            hidden_dim: 6,
            memory_items: 4,
            memory_dim: 3,
            hyperedges: 4,
            ..Default::default()
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let (model, params) = StHyper::new(&cfg(), 6).unwrap();
        let mut adam = Adam::new(&params, 1e-3);
        adam.step = 3;
        adam.first_moment[0].fill(0.25);
        let norm = NormStats { mean: vec![0.5; 6], std: vec![2.0; 6] };
        let ck = Checkpoint::new(&model, params, adam, norm, (0..6).map(|i| format!("v{i}")).collect(), 4, 1.5);
        let dir = tempfile::tempdir().unwrap();
        ck.save(dir.path()).unwrap();
        let (model2, ck2) = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(ck2.meta, ck.meta);
        assert_eq!(ck2.params.values(), ck.params.values());
        assert_eq!(ck2.adam.first_moment, ck.adam.first_moment);
        assert_eq!(ck2.adam.step, 3);
        let x = Array2::from_shape_fn((6, 16), |(i, j)| (i as f64 * 1.3 + j as f64 * 0.7).cos());
        let a = model.predict_normalized(&ck.params, &x).unwrap();
        let b = model2.predict_normalized(&ck2.params, &x).unwrap();
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn tampered_config_is_rejected() {
        let (model, params) = StHyper::new(&cfg(), 6).unwrap();
        let adam = Adam::new(&params, 1e-3);
        let norm = NormStats { mean: vec![0.0; 6], std: vec![1.0; 6] };
        let ck = Checkpoint::new(&model, params, adam, norm, vec![String::new(); 6], 1, 0.0);
        let dir = tempfile::tempdir().unwrap();
        ck.save(dir.path()).unwrap();
        let meta_path = dir.path().join(META_FILE);
        let text = fs::read_to_string(&meta_path).unwrap().replace("\"hidden_dim\": 6", "\"hidden_dim\": 7");
        fs::write(&meta_path, text).unwrap();
        assert_eq!(Checkpoint::load(dir.path()).unwrap_err().kind(), "checkpoint");
    }
}

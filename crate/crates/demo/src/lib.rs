//! Browser bindings: every entry point takes plain numbers and returns a JSON
//! string for the page script.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use sthyper::dataset::{generate_synthetic, zscore_normalize, SyntheticSpec};
use sthyper::dtw::compute_dtw_adjacency;
use sthyper::export::structures;
use sthyper::metrics::{adjusted_rand_index, persistence_forecast, MetricSet};
use sthyper::train::train_model;
use sthyper::ModelConfig;

fn rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn error(e: impl std::fmt::Display) -> String {
    json!({ "error": e.to_string() }).to_string()
}

fn synth(groups: usize, vars_per_group: usize, length: usize, noise: f64, seed: u64) -> sthyper::Result<sthyper::dataset::TimeSeriesDataset> {
    generate_synthetic(&SyntheticSpec { n_groups: groups, vars_per_group, length, seed, noise })
}

/// Synthetic grouped series with their DTW affinity matrix.
#[wasm_bindgen]
pub fn synth_affinity(groups: usize, vars_per_group: usize, length: usize, noise: f64, seed: u64) -> String {
    let run = || -> sthyper::Result<Value> {
        let ds = synth(groups, vars_per_group, length, noise, seed)?;
        let norm = zscore_normalize(&ds, 0..ds.len())?;
        let adj = compute_dtw_adjacency(&norm.values);
        Ok(json!({
            "names": ds.variable_names,
            "labels": ds.group_labels,
            "series": rows(&norm.values),
            "affinity": rows(&adj.affinity),
            "sigma": adj.sigma,
        }))
    };
    run().map(|v| v.to_string()).unwrap_or_else(error)
}

/// A random `alpha × beta` incidence matrix and its top-`k` per column.
#[wasm_bindgen]
pub fn sparsify_incidence(alpha: usize, beta: usize, k: usize, seed: u64) -> String {
    if alpha == 0 || beta == 0 || k == 0 {
        return error("alpha, beta and k must be positive");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dense = Array2::from_shape_simple_fn((alpha, beta), || rng.random_range(0.0..1.0));
    let sparse = &dense * &sthyper::ahm::topk_column_mask(&dense, k);
    json!({ "dense": rows(&dense), "sparse": rows(&sparse) }).to_string()
}

/// Trains a small model on synthetic data and forecasts the last test window.
#[wasm_bindgen]
pub fn train_forecast(epochs: usize, noise: f64, seed: u64) -> String {
    let run = || -> sthyper::Result<Value> {
        let ds = synth(3, 4, 512, noise, 7)?;
        let cfg = ModelConfig {
            input_len: 32,
            horizon: 8,
            pooling_ratio: 4,
            temporal_scales: 2,
            patch_len: 8,
            hidden_dim: 8,
            memory_dim: 4,
            memory_items: 6,
            hyperedges: 6,
            hyperedge_nodes: 4,
            batch_size: 16,
            learning_rate: 3e-3,
            max_epochs: epochs.max(1),
            patience: epochs.max(1),
            seed,
            ..Default::default()
        };
        let out = train_model(&cfg, &ds, None)?;
        let window = out.data.test.last().expect("test windows");
        let pred = out.model.predict_normalized(&out.store, &window.input)?;
        let naive = persistence_forecast(&window.input, cfg.horizon);
        let flat = |m: &Array2<f64>| m.iter().copied().collect::<Vec<_>>();
        let st = structures(&out.model, &out.store)?;
        let truth = ds.group_labels.clone().unwrap_or_default();
        Ok(json!({
            "train_loss": out.report.epochs.iter().map(|e| e.train_loss).collect::<Vec<_>>(),
            "val_loss": out.report.epochs.iter().map(|e| e.val_loss).collect::<Vec<_>>(),
            "best_epoch": out.report.best_epoch,
            "input": rows(&window.input),
            "target": rows(&window.target),
            "forecast": rows(&pred),
            "mae": MetricSet::compute(&flat(&pred), &flat(&window.target)).mae,
            "persistence_mae": MetricSet::compute(&flat(&naive), &flat(&window.target)).mae,
            "groups": st.labels[0],
            "ari": adjusted_rand_index(&st.labels[0], &truth),
            "omega": st.omega.iter().map(|w| w.iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>(),
        }))
    };
    run().map(|v| v.to_string()).unwrap_or_else(error)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affinity_is_square_with_unit_diagonal() {
        let v: Value = serde_json::from_str(&synth_affinity(2, 2, 64, 0.1, 1)).unwrap();
        let a = v["affinity"].as_array().unwrap();
        assert_eq!(a.len(), 4);
        for (i, row) in a.iter().enumerate() {
            assert_eq!(row[i].as_f64().unwrap(), 1.0);
        }
    }

    #[test]
    fn sparsified_columns_keep_k_entries() {
        let v: Value = serde_json::from_str(&sparsify_incidence(6, 3, 2, 4)).unwrap();
        let sparse = v["sparse"].as_array().unwrap();
        for c in 0..3 {
            let nonzero = sparse.iter().filter(|r| r[c].as_f64().unwrap() != 0.0).count();
            assert_eq!(nonzero, 2);
        }
        assert!(sparsify_incidence(0, 3, 2, 4).contains("error"));
    }

    #[test]
    fn short_training_returns_forecast() {
        let v: Value = serde_json::from_str(&train_forecast(1, 0.1, 0)).unwrap();
        assert_eq!(v["train_loss"].as_array().unwrap().len(), 1);
        assert_eq!(v["forecast"].as_array().unwrap().len(), 12);
        assert_eq!(v["forecast"][0].as_array().unwrap().len(), 8);
    }
}

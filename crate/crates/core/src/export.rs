//! Writes the learned structures of a model as CSV matrices with JSON sidecars.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::graph::Tape;
use crate::model::StHyper;
use crate::params::ParamStore;

/// Learned structures, as plain matrices.
#[derive(Clone, Debug)]
pub struct Structures {
    /// `A^j`, one per spatial scale.
    pub adjacency: Vec<Array2<f64>>,
    /// `S^j`, one per scale boundary.
    pub assignments: Vec<Array2<f64>>,
    /// Arg-max group of every node under each `S^j`.
    pub labels: Vec<Vec<usize>>,
    /// Sparsified incidence `Λ̃` of every hypergraph layer.
    pub incidence: Vec<Array2<f64>>,
    /// Hyperedge graph `A_h` of every hypergraph layer.
    pub hyperedge_graph: Vec<Array2<f64>>,
    /// Temporal fusion weights `ω^j`, `1 × K` each.
    pub omega: Vec<Array2<f64>>,
}

/// Index of the largest entry of each row; ties go to the lower index.
pub fn argmax_rows(m: &Array2<f64>) -> Vec<usize> {
    m.rows()
        .into_iter()
        .map(|row| row.iter().enumerate().fold(0, |best, (i, v)| if *v > row[best] { i } else { best }))
        .collect()
}

pub fn structures(model: &StHyper, store: &ParamStore) -> Result<Structures> {
    let mut tape = Tape::new();
    let bound = store.bind_frozen(&mut tape);
    let pyramid = model.pyramid.forward(&mut tape, &bound, None)?;
    let adjacency = pyramid.adjacency.iter().map(|v| tape.value(*v).clone()).collect();
    let assignments: Vec<Array2<f64>> = pyramid.assignments.iter().map(|v| tape.value(*v).clone()).collect();
    let labels = assignments.iter().map(argmax_rows).collect();
    let mut incidence = Vec::new();
    let mut hyperedge_graph = Vec::new();
    for layer in &model.ahm {
        let (_, sparse) = layer.incidence(&mut tape, &bound);
        incidence.push(tape.value(sparse).clone());
        let a_h = layer.hyperedge_graph(&mut tape, &bound);
        hyperedge_graph.push(tape.value(a_h).clone());
    }
    let omega = model.fusion.omegas(&mut tape, &bound).iter().map(|v| tape.value(*v).clone()).collect();
    Ok(Structures { adjacency, assignments, labels, incidence, hyperedge_graph, omega })
}

fn matrix_csv(m: &Array2<f64>) -> String {
    let mut out = String::new();
    for row in m.rows() {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

fn write_matrix(dir: &Path, name: &str, m: &Array2<f64>, extra: Value) -> Result<Vec<PathBuf>> {
    let csv = dir.join(format!("{name}.csv"));
    fs::write(&csv, matrix_csv(m)).map_err(|e| Error::io(&csv, e))?;
    let mut sidecar = json!({ "name": name, "rows": m.nrows(), "cols": m.ncols() });
    if let (Value::Object(base), Value::Object(more)) = (&mut sidecar, extra) {
        base.extend(more);
    }
    let meta = dir.join(format!("{name}.json"));
    fs::write(&meta, serde_json::to_string_pretty(&sidecar)?).map_err(|e| Error::io(&meta, e))?;
    Ok(vec![csv, meta])
}

/// Writes every learned structure under `out_dir` and returns the file paths.
pub fn export_structures(model: &StHyper, store: &ParamStore, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let st = structures(model, store)?;
    let mut files = Vec::new();
    for (j, a) in st.adjacency.iter().enumerate() {
        files.extend(write_matrix(out_dir, &format!("A_{}", j + 1), a, json!({ "scale": j + 1 }))?);
    }
    for (j, s) in st.assignments.iter().enumerate() {
        files.extend(write_matrix(out_dir, &format!("S_{}", j + 1), s, json!({ "from_scale": j + 1, "to_scale": j + 2 }))?);
        let labels = Array2::from_shape_fn((st.labels[j].len(), 1), |(i, _)| st.labels[j][i] as f64);
        files.extend(write_matrix(out_dir, &format!("labels_{}", j + 1), &labels, json!({ "scale": j + 1, "groups": s.ncols() }))?);
    }
    let index_map: Vec<[usize; 3]> =
        model.stpm.layout.index_map().into_iter().map(|(j, k, i)| [j + 1, k + 1, i + 1]).collect();
    for (l, inc) in st.incidence.iter().enumerate() {
        let name = if st.incidence.len() == 1 { "incidence".to_string() } else { format!("incidence_{}", l + 1) };
        files.extend(write_matrix(
            out_dir,
            &name,
            inc,
            json!({ "layer": l + 1, "nodes_per_edge": model.cfg.hyperedge_nodes, "row_index": ["spatial_scale", "temporal_scale", "node"], "rows_jkn": index_map }),
        )?);
        let name = if st.hyperedge_graph.len() == 1 { "A_h".to_string() } else { format!("A_h_{}", l + 1) };
        files.extend(write_matrix(out_dir, &name, &st.hyperedge_graph[l], json!({ "layer": l + 1 }))?);
    }
    for (j, w) in st.omega.iter().enumerate() {
        files.extend(write_matrix(out_dir, &format!("omega_{}", j + 1), w, json!({ "scale": j + 1 }))?);
    }
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use ndarray::array;

    #[test]
    fn argmax_prefers_first_on_ties() {
        assert_eq!(argmax_rows(&array![[0.2, 0.5, 0.5], [0.9, 0.1, 0.0]]), vec![1, 0]);
    }

    #[test]
    fn export_writes_expected_files_and_is_repeatable() {
        let cfg = ModelConfig {
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
        };
        let (model, store) = StHyper::new(&cfg, 6).unwrap();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        export_structures(&model, &store, a.path()).unwrap();
        export_structures(&model, &store, b.path()).unwrap();
        for name in ["S_1", "A_1", "A_2", "labels_1", "incidence", "A_h", "omega_1", "omega_2"] {
            for ext in ["csv", "json"] {
                let file = format!("{name}.{ext}");
                let x = fs::read(a.path().join(&file)).unwrap();
                assert_eq!(x, fs::read(b.path().join(&file)).unwrap(), "{file}");
            }
        }
        let st = structures(&model, &store).unwrap();
        for col in st.incidence[0].columns() {
            assert_eq!(col.iter().filter(|v| **v != 0.0).count(), 3);
        }
    }
}

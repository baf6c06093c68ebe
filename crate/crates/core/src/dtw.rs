//! Dynamic time warping distances and the affinity graph built from them.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::hash_matrix;
use crate::error::{Error, Result};

/// Unconstrained DTW with absolute-difference local cost.
pub fn dtw_distance(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return if a.len() == b.len() { 0.0 } else { f64::INFINITY };
    }
    let m = b.len();
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut curr = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for &x in a {
        curr[0] = f64::INFINITY;
        for j in 1..=m {
            let best = prev[j - 1].min(prev[j]).min(curr[j - 1]);
            curr[j] = (x - b[j - 1]).abs() + best;
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[m]
}

/// Symmetric matrix of DTW distances between the rows of `series`.
pub fn pairwise_distances(series: &Array2<f64>) -> Array2<f64> {
    let n = series.nrows();
    let rows: Vec<Vec<f64>> = series.rows().into_iter().map(|r| r.to_vec()).collect();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let dists: Vec<f64> = pairs.par_iter().map(|&(i, j)| dtw_distance(&rows[i], &rows[j])).collect();
    let mut out = Array2::zeros((n, n));
    for (&(i, j), d) in pairs.iter().zip(dists) {
        out[[i, j]] = d;
        out[[j, i]] = d;
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct DtwAdjacency {
    /// `N × N` affinities in `(0, 1]`, 1 on the diagonal.
    pub affinity: Array2<f64>,
    /// Kernel bandwidth: median off-diagonal distance.
    pub sigma: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len().is_multiple_of(2) {
        0.5 * (v[mid - 1] + v[mid])
    } else {
        v[mid]
    }
}

/// Gaussian-kernel affinity `exp(-d² / σ²)` of pairwise DTW distances with
/// `σ` the median pairwise distance.
pub fn compute_dtw_adjacency(train_values: &Array2<f64>) -> DtwAdjacency {
    let n = train_values.nrows();
    let dist = pairwise_distances(train_values);
    let off: Vec<f64> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).map(|(i, j)| dist[[i, j]]).collect();
    let sigma = median(off);
    let affinity = dist.mapv(|d| {
        if d == 0.0 {
            1.0
        } else if sigma > 0.0 {
            (-(d * d) / (sigma * sigma)).exp()
        } else {
            0.0
        }
    });
    DtwAdjacency { affinity, sigma }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DtwCacheMeta {
    pub dataset_hash: String,
    pub sigma: f64,
    pub n: usize,
}

pub const CACHE_FILE: &str = "dtw_adjacency.bin";

fn cache_paths(dir: &Path) -> (PathBuf, PathBuf) {
    let bin = dir.join(CACHE_FILE);
    let meta = bin.with_extension("json");
    (bin, meta)
}

pub fn write_cache(dir: &Path, adj: &DtwAdjacency, dataset_hash: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (bin, meta) = cache_paths(dir);
    let bytes: Vec<u8> = adj.affinity.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
    let m = DtwCacheMeta { dataset_hash: dataset_hash.into(), sigma: adj.sigma, n: adj.affinity.nrows() };
    fs::write(&meta, serde_json::to_string_pretty(&m)?).map_err(|e| Error::io(&meta, e))
}

/// Returns the cached matrix if present and keyed by `dataset_hash`.
pub fn read_cache(dir: &Path, dataset_hash: &str) -> Result<Option<DtwAdjacency>> {
    let (bin, meta) = cache_paths(dir);
    if !bin.exists() || !meta.exists() {
        return Ok(None);
    }
    let raw = fs::read_to_string(&meta).map_err(|e| Error::io(&meta, e))?;
    let m: DtwCacheMeta = serde_json::from_str(&raw)?;
    if m.dataset_hash != dataset_hash {
        return Ok(None);
    }
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    if bytes.len() != m.n * m.n * 8 {
        return Err(Error::Format(format!("DTW cache {} has {} bytes, expected {}", bin.display(), bytes.len(), m.n * m.n * 8)));
    }
    let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let affinity = Array2::from_shape_vec((m.n, m.n), data).map_err(|e| Error::Format(e.to_string()))?;
    Ok(Some(DtwAdjacency { affinity, sigma: m.sigma }))
}

/// Cached [`compute_dtw_adjacency`], keyed by a hash of `train_values`.
pub fn load_or_compute(dir: &Path, train_values: &Array2<f64>) -> Result<DtwAdjacency> {
    let hash = hash_matrix(train_values);
    if let Some(adj) = read_cache(dir, &hash)? {
        return Ok(adj);
    }
    let adj = compute_dtw_adjacency(train_values);
    write_cache(dir, &adj, &hash)?;
    Ok(adj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Minimum over every monotone warping path, enumerated recursively.
    fn enumerate_paths(a: &[f64], b: &[f64]) -> f64 {
        fn walk(a: &[f64], b: &[f64], i: usize, j: usize, acc: f64) -> f64 {
            let acc = acc + (a[i] - b[j]).abs();
            if i + 1 == a.len() && j + 1 == b.len() {
                return acc;
            }
            let mut best = f64::INFINITY;
            if i + 1 < a.len() {
                best = best.min(walk(a, b, i + 1, j, acc));
            }
            if j + 1 < b.len() {
                best = best.min(walk(a, b, i, j + 1, acc));
            }
            if i + 1 < a.len() && j + 1 < b.len() {
                best = best.min(walk(a, b, i + 1, j + 1, acc));
            }
            best
        }
        walk(a, b, 0, 0, 0.0)
    }

    #[test]
    fn small_example_matches_path_enumeration() {
        let a = [0.0, 0.0, 1.0];
        let b = [0.0, 1.0, 1.0];
        assert_eq!(dtw_distance(&a, &b), enumerate_paths(&a, &b));
        assert_eq!(dtw_distance(&a, &b), 0.0);
        let c = [0.3, -1.0, 2.5, 0.7];
        let d = [1.0, 0.1, -0.2];
        assert_eq!(dtw_distance(&c, &d), enumerate_paths(&c, &d));
    }

    #[test]
    fn identical_series_have_unit_affinity() {
        let x = array![[0.1, 0.5, -0.3, 0.9], [0.1, 0.5, -0.3, 0.9], [1.0, -1.0, 1.0, -1.0]];
        let adj = compute_dtw_adjacency(&x);
        assert_eq!(adj.affinity[[0, 1]], 1.0);
        assert_eq!(adj.affinity[[1, 0]], 1.0);
        for i in 0..3 {
            assert_eq!(adj.affinity[[i, i]], 1.0);
        }
        assert!(adj.affinity[[0, 2]] < 1.0 && adj.affinity[[0, 2]] > 0.0);
    }

    #[test]
    fn affinity_is_exactly_symmetric() {
        let x = Array2::from_shape_fn((5, 20), |(i, t)| ((i * 31 + t * 17) % 13) as f64 / 13.0);
        let adj = compute_dtw_adjacency(&x);
        assert_eq!(adj.affinity, adj.affinity.t());
        let max = adj.affinity.iter().cloned().fold(f64::MIN, f64::max);
        for i in 0..5 {
            assert_eq!(adj.affinity[[i, i]], max);
        }
    }

    #[test]
    fn single_series_gives_unit_matrix() {
        let adj = compute_dtw_adjacency(&array![[1.0, 2.0, 3.0]]);
        assert_eq!(adj.affinity, array![[1.0]]);
    }

    #[test]
    fn cache_round_trip_and_key_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let x = Array2::from_shape_fn((4, 16), |(i, t)| (i as f64 + 1.0) * (t as f64 * 0.3).sin());
        let first = load_or_compute(dir.path(), &x).unwrap();
        let cached = read_cache(dir.path(), &hash_matrix(&x)).unwrap().unwrap();
        assert_eq!(first, cached);
        assert!(read_cache(dir.path(), "other").unwrap().is_none());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn distance_equals_path_minimum(
                a in proptest::collection::vec(-5.0f64..5.0, 1..7),
                b in proptest::collection::vec(-5.0f64..5.0, 1..7),
            ) {
                prop_assert_eq!(dtw_distance(&a, &b).to_bits(), enumerate_paths(&a, &b).to_bits());
                prop_assert_eq!(dtw_distance(&a, &b), dtw_distance(&b, &a));
            }
        }
    }
}

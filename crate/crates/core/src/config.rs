//! Model and training configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HeadChoice {
    /// Recurrent decoder when `horizon <= input_len`, feed-forward otherwise.
    #[default]
    Auto,
    Short,
    Long,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossReduction {
    /// Sum of absolute errors over all `N · τ` entries of a window.
    #[default]
    Sum,
    Mean,
}

/// Every hyperparameter of the model and its training loop. The field names
/// are also the keys of the TOML config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Input length `T`.
    pub input_len: usize,
    /// Forecast horizon `τ`.
    pub horizon: usize,
    /// Graph pooling ratio `q`: `N_{j+1} = floor(N_j / q)`.
    pub pooling_ratio: usize,
    /// Number of spatial scales `J`.
    pub spatial_scales: usize,
    /// Patch length `r`.
    pub patch_len: usize,
    /// Number of temporal scales `K`.
    pub temporal_scales: usize,
    /// Nodes kept per hyperedge `K′`.
    pub hyperedge_nodes: usize,
    /// Weight `λ` of the graph pooling loss.
    pub lambda: f64,
    /// Feature / GCRU hidden size `D`.
    pub hidden_dim: usize,
    /// Memory items `m` per memory bank.
    pub memory_items: usize,
    /// Memory item dimension `d`.
    pub memory_dim: usize,
    /// Hyperedge count `β`.
    pub hyperedges: usize,
    pub ahm_layers: usize,
    /// Propagation hops in each GCRU graph convolution.
    pub graph_order: usize,
    /// Keep only this many neighbours per hyperedge in the hyperedge graph.
    pub topk_neighbors: Option<usize>,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub head: HeadChoice,
    pub loss_reduction: LossReduction,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub disable_ahm: bool,
    pub disable_gp_loss: bool,
    /// Learn graphs from free node embeddings instead of memory projections.
    pub plain_graph_learning: bool,
    /// Evaluate batch items one after another instead of on the thread pool.
    pub serial: bool,
    /// Train / validation / test ratios.
    pub split: [f64; 3],
    /// Error (rather than warn) when a split is too short for a single window.
    pub strict_windows: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_len: 96,
            horizon: 24,
            pooling_ratio: 20,
            spatial_scales: 2,
            patch_len: 16,
            temporal_scales: 3,
            hyperedge_nodes: 20,
            lambda: 1e-2,
            hidden_dim: 64,
            memory_items: 20,
            memory_dim: 32,
            hyperedges: 40,
            ahm_layers: 1,
            graph_order: 1,
            topk_neighbors: None,
            learning_rate: 1e-3,
            max_epochs: 150,
            patience: 15,
            batch_size: 32,
            seed: 0,
            head: HeadChoice::Auto,
            loss_reduction: LossReduction::Sum,
            grad_clip: Some(5.0),
            disable_ahm: false,
            disable_gp_loss: false,
            plain_graph_learning: false,
            serial: true,
            split: [0.7, 0.1, 0.2],
            strict_windows: true,
        }
    }
}

/// Per-dataset settings of the benchmark configurations.
pub const PRESETS: [&str; 6] = ["metr-la", "pems-bay", "china-aqi", "electricity", "solar-energy", "temperature"];

impl ModelConfig {
    /// Benchmark configuration by dataset name. For the long-horizon sets the
    /// shortest horizon is used; override `horizon` for the others.
    pub fn preset(name: &str) -> Option<Self> {
        let base = Self::default();
        let (t, tau, q, j, r, kp, lambda) = match name {
            "metr-la" => (12, 12, 10, 2, 2, 20, 1e-1),
            "pems-bay" => (12, 12, 20, 2, 2, 20, 1e-1),
            "china-aqi" => (96, 24, 20, 2, 16, 20, 1e-2),
            "electricity" => (96, 96, 20, 2, 8, 10, 1e-2),
            "solar-energy" => (96, 96, 20, 2, 16, 10, 1e-2),
            "temperature" => (96, 192, 30, 3, 16, 20, 1e-2),
            _ => return None,
        };
        Some(Self {
            input_len: t,
            horizon: tau,
            pooling_ratio: q,
            spatial_scales: j,
            patch_len: r,
            temporal_scales: 3,
            hyperedge_nodes: kp,
            lambda,
            batch_size: if name == "temperature" { 8 } else { 32 },
            ..base
        })
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string().trim().replace('\n', " ")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&raw)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// `[N_1, …, N_J]` for `n_vars` base variables.
    pub fn node_counts(&self, n_vars: usize) -> Vec<usize> {
        let mut counts = vec![n_vars];
        for _ in 1..self.spatial_scales {
            let prev = *counts.last().unwrap();
            counts.push(prev / self.pooling_ratio.max(1));
        }
        counts
    }

    /// `[T_1, …, T_K]`.
    pub fn temporal_lengths(&self) -> Vec<usize> {
        (0..self.temporal_scales).map(|k| self.input_len >> k).collect()
    }

    /// Hypergraph node count `α = K · Σ_j N_j`.
    pub fn alpha(&self, n_vars: usize) -> usize {
        self.temporal_scales * self.node_counts(n_vars).iter().sum::<usize>()
    }

    /// Width `D + d` of memory-augmented features.
    pub fn feature_dim(&self) -> usize {
        self.hidden_dim + self.memory_dim
    }

    pub fn uses_short_head(&self) -> bool {
        match self.head {
            HeadChoice::Auto => self.horizon <= self.input_len,
            HeadChoice::Short => true,
            HeadChoice::Long => false,
        }
    }

    pub fn effective_lambda(&self) -> f64 {
        if self.disable_gp_loss {
            0.0
        } else {
            self.lambda
        }
    }

    /// Joint validation against a dataset with `n_vars` variables.
    pub fn validate(&self, n_vars: usize) -> Result<()> {
        let positive = [
            ("input_len", self.input_len),
            ("horizon", self.horizon),
            ("pooling_ratio", self.pooling_ratio),
            ("spatial_scales", self.spatial_scales),
            ("patch_len", self.patch_len),
            ("temporal_scales", self.temporal_scales),
            ("hyperedge_nodes", self.hyperedge_nodes),
            ("hidden_dim", self.hidden_dim),
            ("memory_items", self.memory_items),
            ("memory_dim", self.memory_dim),
            ("hyperedges", self.hyperedges),
            ("ahm_layers", self.ahm_layers),
            ("graph_order", self.graph_order),
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if let Some(clip) = self.grad_clip {
            if !(clip > 0.0) {
                return Err(Error::Config("grad_clip must be positive".into()));
            }
        }
        if self.topk_neighbors == Some(0) {
            return Err(Error::Config("topk_neighbors must be at least 1".into()));
        }
        let div = 1usize << (self.temporal_scales - 1);
        if !self.input_len.is_multiple_of(div) {
            return Err(Error::Config(format!(
                "input_len {} is not divisible by 2^(temporal_scales-1) = {div}",
                self.input_len
            )));
        }
        if n_vars == 0 {
            return Err(Error::Config("dataset has no variables".into()));
        }
        let counts = self.node_counts(n_vars);
        if let Some(j) = counts.iter().position(|&c| c == 0) {
            return Err(Error::Config(format!(
                "spatial scale {} has no nodes (N = {n_vars}, pooling_ratio = {}, spatial_scales = {})",
                j + 1,
                self.pooling_ratio,
                self.spatial_scales
            )));
        }
        for (k, t_k) in self.temporal_lengths().into_iter().enumerate() {
            if t_k / self.patch_len == 0 {
                return Err(Error::Config(format!(
                    "temporal scale {} has length {t_k} < patch_len {} (every spatial scale j, k = {}, r = {})",
                    k + 1,
                    self.patch_len,
                    k + 1,
                    self.patch_len
                )));
            }
            let dropped = t_k % self.patch_len;
            if 2 * dropped > self.patch_len {
                log::warn!("temporal scale {}: {dropped} trailing steps dropped by patching", k + 1);
            }
        }
        Ok(())
    }
}

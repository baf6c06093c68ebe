//! Spatial pyramidal graph: per-scale learned adjacency, soft assignments
//! between adjacent scales, and the graph pooling regularizer.

use ndarray::Array2;
use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::params::{Bound, ParamId, ParamStore};

/// `softmax_rows(ReLU(E1 E2ᵀ))` with `E1 = W_E1 M`, `E2 = W_E2 M`.
pub fn learn_adjacency(tape: &mut Tape, memory: Var, w_e1: Var, w_e2: Var) -> Var {
    let e1 = tape.matmul(w_e1, memory);
    let e2 = tape.matmul(w_e2, memory);
    adjacency_from_embeddings(tape, e1, e2)
}

/// `softmax_rows(ReLU(E1 E2ᵀ))` on free embeddings.
pub fn adjacency_from_embeddings(tape: &mut Tape, e1: Var, e2: Var) -> Var {
    let e2t = tape.transpose(e2);
    let scores = tape.matmul(e1, e2t);
    let scores = tape.relu(scores);
    tape.softmax_rows(scores)
}

pub(crate) fn check_row_stochastic(m: &Array2<f64>, what: &str) -> Result<()> {
    for (i, row) in m.rows().into_iter().enumerate() {
        let total: f64 = row.sum();
        if (total - 1.0).abs() > 1e-6 || row.iter().any(|v| *v < 0.0) {
            return Err(Error::NotRowStochastic(format!("{what} (row {i} sums to {total})")));
        }
    }
    Ok(())
}

fn check_shape(context: &str, actual: (usize, usize), expected: (usize, usize)) -> Result<()> {
    if actual != expected {
        return Err(Error::Shape { context: context.into(), expected, actual });
    }
    Ok(())
}

/// `‖A_dtw − S Sᵀ‖_F + mean_i H(S_i)` for one scale boundary.
pub fn pooling_loss(tape: &mut Tape, s: Var, a_dtw: Var) -> Result<Var> {
    let (n, _) = tape.shape(s);
    check_shape("pooling_loss A_dtw", tape.shape(a_dtw), (n, n))?;
    check_row_stochastic(tape.value(s), "assignment matrix")?;
    let st = tape.transpose(s);
    let sst = tape.matmul(s, st);
    let diff = tape.sub(a_dtw, sst);
    let frob = tape.frobenius_norm(diff);
    let entropy = tape.mean_row_entropy(s);
    Ok(tape.add(frob, entropy))
}

/// `Sᵀ A_dtw S`: the affinity between group nodes of the next scale.
pub fn coarsen_dtw(tape: &mut Tape, a_dtw: Var, s: Var) -> Result<Var> {
    let (n, _) = tape.shape(s);
    check_shape("coarsen_dtw A_dtw", tape.shape(a_dtw), (n, n))?;
    let st = tape.transpose(s);
    let left = tape.matmul(st, a_dtw);
    Ok(tape.matmul(left, s))
}

#[derive(Clone, Debug)]
pub enum GraphParams {
    Memory { w_e1: ParamId, w_e2: ParamId },
    Plain { e1: ParamId, e2: ParamId },
}

#[derive(Clone, Debug)]
pub struct ScaleGraph {
    /// Memory bank `M^j` (`m × d`); also queried by feature pattern matching.
    pub memory: ParamId,
    pub graph: GraphParams,
}

/// Learnable parameters of the pyramid; matrices are produced on a tape.
#[derive(Clone, Debug)]
pub struct SpatialPyramid {
    pub node_counts: Vec<usize>,
    pub scales: Vec<ScaleGraph>,
    /// Logits of `S^j`, `N_j × N_{j+1}`, for `j = 1..J-1`.
    pub assign_logits: Vec<ParamId>,
}

pub struct PyramidOutput {
    /// `A^j` per scale.
    pub adjacency: Vec<Var>,
    /// `S^j` per boundary.
    pub assignments: Vec<Var>,
    /// `M^j` per scale.
    pub memories: Vec<Var>,
    /// Summed pooling loss, when a base affinity matrix was supplied.
    pub pooling_loss: Option<Var>,
}

impl SpatialPyramid {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, n_vars: usize, rng: &mut R) -> Self {
        let node_counts = cfg.node_counts(n_vars);
        let (m, d) = (cfg.memory_items, cfg.memory_dim);
        let scales = node_counts
            .iter()
            .enumerate()
            .map(|(j, &n)| {
                let memory = store.xavier(format!("spg.{}.memory", j + 1), m, d, rng);
                let graph = if cfg.plain_graph_learning {
                    GraphParams::Plain {
                        e1: store.xavier(format!("spg.{}.e1", j + 1), n, d, rng),
                        e2: store.xavier(format!("spg.{}.e2", j + 1), n, d, rng),
                    }
                } else {
                    GraphParams::Memory {
                        w_e1: store.xavier(format!("spg.{}.w_e1", j + 1), n, m, rng),
                        w_e2: store.xavier(format!("spg.{}.w_e2", j + 1), n, m, rng),
                    }
                };
                ScaleGraph { memory, graph }
            })
            .collect();
        let assign_logits = node_counts
            .windows(2)
            .enumerate()
            .map(|(j, w)| store.normal(format!("spg.{}.assign_logits", j + 1), w[0], w[1], 0.5, rng))
            .collect();
        Self { node_counts, scales, assign_logits }
    }

    pub fn num_scales(&self) -> usize {
        self.node_counts.len()
    }

    pub fn adjacency(&self, tape: &mut Tape, bound: &Bound, j: usize) -> Var {
        let scale = &self.scales[j];
        match scale.graph {
            GraphParams::Memory { w_e1, w_e2 } => {
                learn_adjacency(tape, bound.var(scale.memory), bound.var(w_e1), bound.var(w_e2))
            }
            GraphParams::Plain { e1, e2 } => adjacency_from_embeddings(tape, bound.var(e1), bound.var(e2)),
        }
    }

    /// `S^j` for a 1-based boundary index `1 ≤ j < J`.
    pub fn assignment(&self, tape: &mut Tape, bound: &Bound, j: usize) -> Result<Var> {
        if j == 0 || j >= self.num_scales() {
            return Err(Error::ScaleIndex { index: j, limit: self.num_scales() });
        }
        Ok(tape.softmax_rows(bound.var(self.assign_logits[j - 1])))
    }

    /// Builds every `A^j` and `S^j`; with `a_dtw` also the pooling loss summed
    /// over all boundaries, coarsening the affinity through the current `S^j`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, a_dtw: Option<&Array2<f64>>) -> Result<PyramidOutput> {
        let adjacency = (0..self.num_scales()).map(|j| self.adjacency(tape, bound, j)).collect();
        let assignments =
            (1..self.num_scales()).map(|j| self.assignment(tape, bound, j)).collect::<Result<Vec<_>>>()?;
        let memories = self.scales.iter().map(|s| bound.var(s.memory)).collect();
        let pooling_loss = match a_dtw {
            Some(base) if !assignments.is_empty() => {
                let mut affinity = tape.constant(base.clone());
                let mut total: Option<Var> = None;
                for &s in &assignments {
                    let term = pooling_loss(tape, s, affinity)?;
                    total = Some(match total {
                        Some(t) => tape.add(t, term),
                        None => term,
                    });
                    affinity = coarsen_dtw(tape, affinity, s)?;
                }
                total
            }
            Some(_) => Some(tape.scalar(0.0)),
            None => None,
        };
        Ok(PyramidOutput { adjacency, assignments, memories, pooling_loss })
    }
}

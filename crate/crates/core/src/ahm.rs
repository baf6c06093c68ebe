//! Adaptive hypergraph over the multi-scale feature nodes: a learned sparse
//! incidence matrix and tri-phase propagation (nodes → hyperedges →
//! hyperedges → nodes).

use ndarray::Array2;
use rand::Rng;

use crate::config::ModelConfig;
use crate::graph::{Tape, Var};
use crate::params::{Bound, ParamId, ParamStore};
use crate::spg::learn_adjacency;

/// Stand-in for `-∞` in attention masks.
pub const MASK_NEG: f64 = -1e9;

/// 0/1 mask of the `k` largest entries of every column; ties go to the lower row index.
pub fn topk_column_mask(weights: &Array2<f64>, k: usize) -> Array2<f64> {
    let (rows, cols) = weights.dim();
    let mut mask = Array2::zeros((rows, cols));
    let keep = k.min(rows);
    let mut order: Vec<usize> = Vec::with_capacity(rows);
    for c in 0..cols {
        order.clear();
        order.extend(0..rows);
        // stable sort keeps lower indices first among equal values
        order.sort_by(|&a, &b| weights[[b, c]].total_cmp(&weights[[a, c]]));
        for &r in &order[..keep] {
            mask[[r, c]] = 1.0;
        }
    }
    mask
}

/// 0/1 mask of the `k` largest entries of every row.
pub fn topk_row_mask(weights: &Array2<f64>, k: usize) -> Array2<f64> {
    topk_column_mask(&weights.t().to_owned(), k).t().to_owned()
}

/// Keeps the `k` largest weights of each column. Gradients reach only the
/// retained entries.
pub fn sparsify_incidence(tape: &mut Tape, incidence: Var, k: usize) -> Var {
    let mask = topk_column_mask(tape.value(incidence), k);
    tape.mul_const(incidence, mask)
}

/// `E₁ = ReLU(U Λ̃ᵀ X) + Λ̃ᵀ X`.
pub fn nodes_to_hyperedges(tape: &mut Tape, incidence: Var, x: Var, u: Var) -> Var {
    let inc_t = tape.transpose(incidence);
    let agg = tape.matmul(inc_t, x);
    let mixed = tape.matmul(u, agg);
    let act = tape.relu(mixed);
    tape.add(act, agg)
}

/// `Γ[i, e] = 0` where `Λ̃[i, e] ≠ 0`, else [`MASK_NEG`].
pub fn build_mask(incidence: &Array2<f64>) -> Array2<f64> {
    incidence.mapv(|v| if v != 0.0 { 0.0 } else { MASK_NEG })
}

/// Single-head graph attention over the hyperedge graph.
#[derive(Clone, Debug)]
pub struct GatParams {
    pub w: ParamId,
    pub a_src: ParamId,
    pub a_dst: ParamId,
}

/// GAT attention weights `softmax_j(LeakyReLU(a_srcᵀ W e_i + a_dstᵀ W e_j))`,
/// multiplied by the structural prior `A_h` and renormalized per row.
/// Returns `(attention, W E)`.
pub fn gat_attention(tape: &mut Tape, e: Var, prior: Var, w: Var, a_src: Var, a_dst: Var) -> (Var, Var) {
    let wh = tape.matmul(e, w);
    let src = tape.matmul(wh, a_src);
    let dst = tape.matmul(wh, a_dst);
    let (beta, _) = tape.shape(e);
    let zeros = tape.constant(Array2::zeros((beta, beta)));
    let logits = tape.add_col(zeros, src);
    let dst_t = tape.transpose(dst);
    let logits = tape.add_row(logits, dst_t);
    let logits = tape.leaky_relu(logits, 0.2);
    let attn = tape.softmax_rows(logits);
    let weighted = tape.mul(attn, prior);
    (tape.row_normalize(weighted), wh)
}

/// Learnable state of one hypergraph layer.
#[derive(Clone, Debug)]
pub struct HypergraphLayer {
    pub alpha: usize,
    pub hyperedges: usize,
    pub nodes_per_edge: usize,
    pub topk_neighbors: Option<usize>,
    /// `α × β`; `Λ = sigmoid(logits)`.
    pub incidence_logits: ParamId,
    /// `β × β`; `U = softmax_rows(logits)`.
    pub u_logits: ParamId,
    /// Hyperedge memory `M_h` (`m × d`).
    pub memory: ParamId,
    pub w_e1: ParamId,
    pub w_e2: ParamId,
    pub gat: GatParams,
    pub query_w: ParamId,
    pub query_b: ParamId,
    pub agg_w: ParamId,
    pub agg_b: ParamId,
    pub edge_mlp: Mlp,
    pub q_w: ParamId,
    pub q_b: ParamId,
    pub k_w: ParamId,
    pub k_b: ParamId,
    pub v_w: ParamId,
    pub v_b: ParamId,
    pub node_mlp: Mlp,
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
}

/// Two-layer perceptron with a ReLU between the layers.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl Mlp {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        Self {
            w1: store.xavier(format!("{prefix}.w1"), input, hidden, rng),
            b1: store.zeros(format!("{prefix}.b1"), 1, hidden),
            w2: store.xavier(format!("{prefix}.w2"), hidden, output, rng),
            b2: store.zeros(format!("{prefix}.b2"), 1, output),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Var {
        let h = tape.matmul(x, bound.var(self.w1));
        let h = tape.add_row(h, bound.var(self.b1));
        let h = tape.relu(h);
        let o = tape.matmul(h, bound.var(self.w2));
        tape.add_row(o, bound.var(self.b2))
    }
}

/// Intermediate results of one layer, kept for inspection and export.
pub struct AhmOutput {
    /// `α × D_e`
    pub x_hyper: Var,
    /// `Λ̃`, `α × β`.
    pub incidence: Var,
    pub u: Var,
    /// Hyperedge graph `A_h`.
    pub a_h: Var,
    /// Renormalized GAT attention between hyperedges.
    pub gat_attention: Var,
    /// Node-to-hyperedge attention of the last phase.
    pub node_attention: Var,
}

impl HypergraphLayer {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig, alpha: usize, rng: &mut R) -> Self {
        let beta = cfg.hyperedges;
        let d_e = cfg.feature_dim();
        let (m, d) = (cfg.memory_items, cfg.memory_dim);
        Self {
            alpha,
            hyperedges: beta,
            nodes_per_edge: cfg.hyperedge_nodes,
            topk_neighbors: cfg.topk_neighbors,
            incidence_logits: store.normal(format!("{prefix}.incidence_logits"), alpha, beta, 1.0, rng),
            u_logits: store.normal(format!("{prefix}.u_logits"), beta, beta, 0.1, rng),
            memory: store.xavier(format!("{prefix}.memory"), m, d, rng),
            w_e1: store.xavier(format!("{prefix}.w_e1"), beta, m, rng),
            w_e2: store.xavier(format!("{prefix}.w_e2"), beta, m, rng),
            gat: GatParams {
                w: store.xavier(format!("{prefix}.gat.w"), d_e, d_e, rng),
                a_src: store.xavier(format!("{prefix}.gat.a_src"), d_e, 1, rng),
                a_dst: store.xavier(format!("{prefix}.gat.a_dst"), d_e, 1, rng),
            },
            query_w: store.xavier(format!("{prefix}.edge_query_w"), d_e, d, rng),
            query_b: store.zeros(format!("{prefix}.edge_query_b"), 1, d),
            agg_w: store.xavier(format!("{prefix}.agg_w"), d_e + d, d_e, rng),
            agg_b: store.zeros(format!("{prefix}.agg_b"), 1, d_e),
            edge_mlp: Mlp::new(store, &format!("{prefix}.edge_mlp"), d_e, d_e, d_e, rng),
            q_w: store.xavier(format!("{prefix}.q_w"), d_e, d_e, rng),
            q_b: store.zeros(format!("{prefix}.q_b"), 1, d_e),
            k_w: store.xavier(format!("{prefix}.k_w"), d_e, d_e, rng),
            k_b: store.zeros(format!("{prefix}.k_b"), 1, d_e),
            v_w: store.xavier(format!("{prefix}.v_w"), d_e, d_e, rng),
            v_b: store.zeros(format!("{prefix}.v_b"), 1, d_e),
            node_mlp: Mlp::new(store, &format!("{prefix}.node_mlp"), d_e, d_e, d_e, rng),
            ln_gamma: store.filled(format!("{prefix}.ln_gamma"), 1, d_e, 1.0),
            ln_beta: store.zeros(format!("{prefix}.ln_beta"), 1, d_e),
        }
    }

    /// `Λ = sigmoid(logits)` and its sparsified form `Λ̃`.
    pub fn incidence(&self, tape: &mut Tape, bound: &Bound) -> (Var, Var) {
        let dense = tape.sigmoid(bound.var(self.incidence_logits));
        let sparse = sparsify_incidence(tape, dense, self.nodes_per_edge);
        (dense, sparse)
    }

    pub fn hyperedge_graph(&self, tape: &mut Tape, bound: &Bound) -> Var {
        let a_h = learn_adjacency(tape, bound.var(self.memory), bound.var(self.w_e1), bound.var(self.w_e2));
        match self.topk_neighbors {
            Some(k) if k < self.hyperedges => {
                let mask = topk_row_mask(tape.value(a_h), k);
                tape.mul_const(a_h, mask)
            }
            _ => a_h,
        }
    }

    /// `Ê = MLP(E₁ + W·concat(E₂, E₂′) + b)` with `E₂ = GAT(E₁, A_h)` and
    /// `E₂′` its memory read-out. Returns `(Ê, GAT attention)`.
    pub fn hyperedges_to_hyperedges(&self, tape: &mut Tape, bound: &Bound, e1: Var, a_h: Var) -> (Var, Var) {
        let (attn, wh) = gat_attention(
            tape,
            e1,
            a_h,
            bound.var(self.gat.w),
            bound.var(self.gat.a_src),
            bound.var(self.gat.a_dst),
        );
        let e2 = tape.matmul(attn, wh);
        let memory = bound.var(self.memory);
        let q = tape.matmul(e2, bound.var(self.query_w));
        let q = tape.add_row(q, bound.var(self.query_b));
        let mt = tape.transpose(memory);
        let scores = tape.matmul(q, mt);
        let read = tape.softmax_rows(scores);
        let e2_mem = tape.matmul(read, memory);
        let augmented = tape.concat_cols(&[e2, e2_mem]);
        let agg = tape.matmul(augmented, bound.var(self.agg_w));
        let agg = tape.add_row(agg, bound.var(self.agg_b));
        let sum = tape.add(e1, agg);
        (self.edge_mlp.forward(tape, bound, sum), attn)
    }

    /// Masked attention from nodes to their hyperedges, then
    /// `LayerNorm(MLP(X_att) + X)`. Nodes in no hyperedge skip the attention
    /// term. Returns `(X_hyper, attention)`.
    pub fn hyperedges_to_nodes(&self, tape: &mut Tape, bound: &Bound, x: Var, e_hat: Var, incidence: &Array2<f64>) -> (Var, Var) {
        let q = tape.matmul(x, bound.var(self.q_w));
        let q = tape.add_row(q, bound.var(self.q_b));
        let k = tape.matmul(e_hat, bound.var(self.k_w));
        let k = tape.add_row(k, bound.var(self.k_b));
        let v = tape.matmul(e_hat, bound.var(self.v_w));
        let v = tape.add_row(v, bound.var(self.v_b));
        let kt = tape.transpose(k);
        let scores = tape.matmul(q, kt);
        let scores = tape.add_const(scores, &build_mask(incidence));
        let attn = tape.softmax_rows(scores);
        let x_att = tape.matmul(attn, v);
        let msg = self.node_mlp.forward(tape, bound, x_att);
        let width = tape.shape(msg).1;
        let connected = Array2::from_shape_fn((incidence.nrows(), width), |(i, _)| {
            if incidence.row(i).iter().any(|v| *v != 0.0) {
                1.0
            } else {
                0.0
            }
        });
        let msg = tape.mul_const(msg, connected);
        let res = tape.add(msg, x);
        let normed = tape.layer_norm_rows(res);
        let scaled = tape.mul_row(normed, bound.var(self.ln_gamma));
        (tape.add_row(scaled, bound.var(self.ln_beta)), attn)
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> AhmOutput {
        let (_, incidence) = self.incidence(tape, bound);
        let u = tape.softmax_rows(bound.var(self.u_logits));
        let e1 = nodes_to_hyperedges(tape, incidence, x, u);
        let a_h = self.hyperedge_graph(tape, bound);
        let (e_hat, gat_attention) = self.hyperedges_to_hyperedges(tape, bound, e1, a_h);
        let inc_value = tape.value(incidence).clone();
        let (x_hyper, node_attention) = self.hyperedges_to_nodes(tape, bound, x, e_hat, &inc_value);
        AhmOutput { x_hyper, incidence, u, a_h, gat_attention, node_attention }
    }
}

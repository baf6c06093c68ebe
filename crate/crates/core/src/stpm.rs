//! Multi-scale feature extraction: spatial coarsening, the temporal pyramid,
//! patch embedding, graph-convolutional GRU encoding and memory matching.

use ndarray::Array2;
use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::params::{Bound, ParamId, ParamStore};
use crate::spg::{check_row_stochastic, PyramidOutput};

/// `Sᵀ X`: series of the group nodes at the next spatial scale.
pub fn coarsen_series(tape: &mut Tape, x: Var, s: Var) -> Result<Var> {
    let (n, _) = tape.shape(x);
    let (sn, _) = tape.shape(s);
    if sn != n {
        return Err(Error::Shape { context: "coarsen_series S".into(), expected: (n, tape.shape(s).1), actual: tape.shape(s) });
    }
    let st = tape.transpose(s);
    Ok(tape.matmul(st, x))
}

/// `len × len/2` matrix averaging non-overlapping pairs of columns.
pub fn pair_pooling_matrix(len: usize) -> Array2<f64> {
    Array2::from_shape_fn((len, len / 2), |(t, p)| if t / 2 == p { 0.5 } else { 0.0 })
}

/// Width-1 convolution (`w · x + b` with scalar `w`, `b`) followed by 1×2 average pooling.
pub fn conv_pool(tape: &mut Tape, x: Var, w: Var, b: Var) -> Var {
    let conv = tape.mul_scalar(w, x);
    let (rows, cols) = tape.shape(x);
    let ones = tape.constant(Array2::ones((rows, cols)));
    let bias = tape.mul_scalar(b, ones);
    let conv = tape.add(conv, bias);
    let pool = tape.constant(pair_pooling_matrix(cols));
    tape.matmul(conv, pool)
}

/// `[X^{j,1}, …, X^{j,K}]` with one `(w, b)` convolution per coarser level.
pub fn temporal_pyramid(tape: &mut Tape, x: Var, convs: &[(Var, Var)]) -> Vec<Var> {
    let mut levels = vec![x];
    for &(w, b) in convs {
        let prev = *levels.last().unwrap();
        levels.push(conv_pool(tape, prev, w, b));
    }
    levels
}

/// Cuts each row into `floor(T/r)` non-overlapping patches (dropping the
/// remainder) and projects each with the shared map `patch · W + b`.
/// Returns one `N × D` matrix per patch, in time order.
pub fn patchify(tape: &mut Tape, x: Var, patch_len: usize, w: Var, b: Var) -> Result<Vec<Var>> {
    let (_, len) = tape.shape(x);
    let count = len / patch_len.max(1);
    if patch_len == 0 || count == 0 {
        return Err(Error::Config(format!("series of length {len} yields no patches of length {patch_len}")));
    }
    Ok((0..count)
        .map(|p| {
            let patch = tape.slice_cols(x, p * patch_len, (p + 1) * patch_len);
            let proj = tape.matmul(patch, w);
            tape.add_row(proj, b)
        })
        .collect())
}

/// Parameters of one graph-convolutional GRU cell.
#[derive(Clone, Debug)]
pub struct GcruCell {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub order: usize,
    pub w_z: ParamId,
    pub b_z: ParamId,
    pub w_r: ParamId,
    pub b_r: ParamId,
    pub w_c: ParamId,
    pub b_c: ParamId,
}

impl GcruCell {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, input_dim: usize, hidden_dim: usize, order: usize, rng: &mut R) -> Self {
        let fan_in = order * (input_dim + hidden_dim);
        Self {
            input_dim,
            hidden_dim,
            order,
            w_z: store.xavier(format!("{prefix}.w_z"), fan_in, hidden_dim, rng),
            b_z: store.zeros(format!("{prefix}.b_z"), 1, hidden_dim),
            w_r: store.xavier(format!("{prefix}.w_r"), fan_in, hidden_dim, rng),
            b_r: store.zeros(format!("{prefix}.b_r"), 1, hidden_dim),
            w_c: store.xavier(format!("{prefix}.w_c"), fan_in, hidden_dim, rng),
            b_c: store.zeros(format!("{prefix}.b_c"), 1, hidden_dim),
        }
    }

    /// `[Â Z, Â² Z, …]` up to the configured order.
    fn hops(&self, tape: &mut Tape, a_hat: Var, z: Var) -> Var {
        let mut out = Vec::with_capacity(self.order);
        let mut cur = z;
        for _ in 0..self.order {
            cur = tape.matmul(a_hat, cur);
            out.push(cur);
        }
        if out.len() == 1 {
            out[0]
        } else {
            tape.concat_cols(&out)
        }
    }

    /// One recurrence step; `x` is `N × input_dim`, `h` is `N × hidden_dim`.
    pub fn step(&self, tape: &mut Tape, bound: &Bound, a_hat: Var, x: Var, h: Var) -> Var {
        let xh = tape.concat_cols(&[x, h]);
        let g = self.hops(tape, a_hat, xh);
        let z = tape.matmul(g, bound.var(self.w_z));
        let z = tape.add_row(z, bound.var(self.b_z));
        let z = tape.sigmoid(z);
        let r = tape.matmul(g, bound.var(self.w_r));
        let r = tape.add_row(r, bound.var(self.b_r));
        let r = tape.sigmoid(r);
        let rh = tape.mul(r, h);
        let xrh = tape.concat_cols(&[x, rh]);
        let gc = self.hops(tape, a_hat, xrh);
        let c = tape.matmul(gc, bound.var(self.w_c));
        let c = tape.add_row(c, bound.var(self.b_c));
        let c = tape.tanh(c);
        let keep = tape.mul(z, h);
        let one_minus_z = tape.one_minus(z);
        let update = tape.mul(one_minus_z, c);
        tape.add(keep, update)
    }

    /// Runs the cell over `steps` from a zero state and returns the final hidden state.
    pub fn encode(&self, tape: &mut Tape, bound: &Bound, a_hat: Var, steps: &[Var]) -> Result<Var> {
        if steps.is_empty() {
            return Err(Error::Config("GCRU needs at least one step".into()));
        }
        check_row_stochastic(tape.value(a_hat), "GCRU adjacency")?;
        let (n, _) = tape.shape(steps[0]);
        let mut h = tape.constant(Array2::zeros((n, self.hidden_dim)));
        for &x in steps {
            h = self.step(tape, bound, a_hat, x, h);
        }
        Ok(h)
    }
}

/// `concat(softmax(Q Mᵀ) M, X_en)` with `Q = X_en W + b`.
pub fn memory_match(tape: &mut Tape, x_en: Var, memory: Var, w: Var, b: Var) -> Var {
    let q = tape.matmul(x_en, w);
    let q = tape.add_row(q, b);
    let mt = tape.transpose(memory);
    let scores = tape.matmul(q, mt);
    let attn = tape.softmax_rows(scores);
    let att = tape.matmul(attn, memory);
    tape.concat_cols(&[att, x_en])
}

/// Position of every hypergraph node: j-major, then k, then node index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScaleLayout {
    pub node_counts: Vec<usize>,
    pub temporal_scales: usize,
}

impl ScaleLayout {
    pub fn new(node_counts: Vec<usize>, temporal_scales: usize) -> Self {
        Self { node_counts, temporal_scales }
    }

    pub fn alpha(&self) -> usize {
        self.temporal_scales * self.node_counts.iter().sum::<usize>()
    }

    /// Zero-based `(j, k)` block → first row in the flattened set.
    pub fn block_offset(&self, j: usize, k: usize) -> usize {
        let before: usize = self.node_counts[..j].iter().sum();
        self.temporal_scales * before + k * self.node_counts[j]
    }

    pub fn blocks(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.node_counts.len()).flat_map(move |j| (0..self.temporal_scales).map(move |k| (j, k)))
    }

    /// Zero-based `(j, k, node)` of every flattened row.
    pub fn index_map(&self) -> Vec<(usize, usize, usize)> {
        self.blocks().flat_map(|(j, k)| (0..self.node_counts[j]).map(move |i| (j, k, i))).collect()
    }

    pub fn flatten(&self, tape: &mut Tape, blocks: &[Var]) -> Var {
        tape.concat_rows(blocks)
    }

    pub fn unflatten(&self, tape: &mut Tape, flat: Var) -> Vec<Var> {
        self.blocks()
            .map(|(j, k)| {
                let start = self.block_offset(j, k);
                tape.slice_rows(flat, start, start + self.node_counts[j])
            })
            .collect()
    }
}

/// The encoded features `X̃^{j,k}` of every scale pair.
pub struct ScaleFeatureSet {
    pub layout: ScaleLayout,
    /// One `N_j × (D + d)` block per `(j, k)`, j-major.
    pub blocks: Vec<Var>,
    /// `α × (D + d)`.
    pub flat: Var,
}

#[derive(Clone, Debug)]
pub struct ScaleEncoder {
    pub patch_w: ParamId,
    pub patch_b: ParamId,
    pub cell: GcruCell,
}

#[derive(Clone, Debug)]
pub struct Stpm {
    pub layout: ScaleLayout,
    pub patch_len: usize,
    /// Per spatial scale, one `(w, b)` pair per coarser temporal level.
    pub convs: Vec<Vec<(ParamId, ParamId)>>,
    /// j-major, then k.
    pub encoders: Vec<ScaleEncoder>,
    pub match_w: Vec<ParamId>,
    pub match_b: Vec<ParamId>,
}

impl Stpm {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, n_vars: usize, rng: &mut R) -> Self {
        let layout = ScaleLayout::new(cfg.node_counts(n_vars), cfg.temporal_scales);
        let (d_hidden, d_mem, r) = (cfg.hidden_dim, cfg.memory_dim, cfg.patch_len);
        let mut convs = Vec::new();
        let mut match_w = Vec::new();
        let mut match_b = Vec::new();
        for j in 0..layout.node_counts.len() {
            convs.push(
                (1..cfg.temporal_scales)
                    .map(|k| {
                        (
                            store.filled(format!("stpm.{}.{}.conv_w", j + 1, k + 1), 1, 1, 1.0),
                            store.zeros(format!("stpm.{}.{}.conv_b", j + 1, k + 1), 1, 1),
                        )
                    })
                    .collect(),
            );
            match_w.push(store.xavier(format!("stpm.{}.match_w", j + 1), d_hidden, d_mem, rng));
            match_b.push(store.zeros(format!("stpm.{}.match_b", j + 1), 1, d_mem));
        }
        let encoders = layout
            .blocks()
            .collect::<Vec<_>>()
            .into_iter()
            .map(|(j, k)| {
                let prefix = format!("stpm.{}.{}", j + 1, k + 1);
                ScaleEncoder {
                    patch_w: store.xavier(format!("{prefix}.patch_w"), r, d_hidden, rng),
                    patch_b: store.zeros(format!("{prefix}.patch_b"), 1, d_hidden),
                    cell: GcruCell::new(store, &format!("{prefix}.gcru"), d_hidden, d_hidden, cfg.graph_order, rng),
                }
            })
            .collect();
        Self { layout, patch_len: r, convs, encoders, match_w, match_b }
    }

    /// Encodes an `N × T` window at every spatial-temporal scale.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, input: Var, pyramid: &PyramidOutput) -> Result<ScaleFeatureSet> {
        let n_scales = self.layout.node_counts.len();
        let mut spatial = vec![input];
        for s in &pyramid.assignments {
            let prev = *spatial.last().unwrap();
            spatial.push(coarsen_series(tape, prev, *s)?);
        }
        let mut blocks = Vec::with_capacity(self.encoders.len());
        for j in 0..n_scales {
            let convs: Vec<(Var, Var)> = self.convs[j].iter().map(|(w, b)| (bound.var(*w), bound.var(*b))).collect();
            let levels = temporal_pyramid(tape, spatial[j], &convs);
            for (k, level) in levels.into_iter().enumerate() {
                let enc = &self.encoders[j * self.layout.temporal_scales + k];
                let patches = patchify(tape, level, self.patch_len, bound.var(enc.patch_w), bound.var(enc.patch_b))?;
                let x_en = enc.cell.encode(tape, bound, pyramid.adjacency[j], &patches)?;
                let feat =
                    memory_match(tape, x_en, pyramid.memories[j], bound.var(self.match_w[j]), bound.var(self.match_b[j]));
                blocks.push(feat);
            }
        }
        let flat = self.layout.flatten(tape, &blocks);
        Ok(ScaleFeatureSet { layout: self.layout.clone(), blocks, flat })
    }
}

//! Cross-scale fusion back onto the base variables, the two forecasting heads
//! and the training objective.

use rand::Rng;

use crate::ahm::Mlp;
use crate::config::{LossReduction, ModelConfig};
use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::params::{Bound, ParamId, ParamStore};
use crate::stpm::GcruCell;

/// `ω^j = softmax(logits^j)`, a `1 × K` row.
pub fn omega(tape: &mut Tape, logits: Var) -> Var {
    tape.softmax_rows(logits)
}

/// Weighted temporal mix per scale followed by the map of every coarse scale
/// back onto the base nodes:
/// `F = O¹ + Σ_{j≥2} (S¹ ⋯ S^{j-1}) O^j` with `O^j = Σ_k ω^{j,k} X^{j,k}`.
///
/// `blocks` holds `J` rows of `K` feature matrices; `omegas` one `1 × K` row per
/// scale; `assignments` the `J - 1` matrices `S^j`.
pub fn fuse_scales(tape: &mut Tape, blocks: &[Vec<Var>], omegas: &[Var], assignments: &[Var]) -> Result<Var> {
    if blocks.is_empty() || omegas.len() != blocks.len() || assignments.len() + 1 != blocks.len() {
        return Err(Error::Config(format!(
            "fusion needs J feature rows, J weight rows and J-1 assignments; got {}, {}, {}",
            blocks.len(),
            omegas.len(),
            assignments.len()
        )));
    }
    let mut fused: Option<Var> = None;
    let mut path: Option<Var> = None;
    for (j, row) in blocks.iter().enumerate() {
        let k = tape.shape(omegas[j]).1;
        if row.len() != k {
            return Err(Error::Config(format!("scale {} has {} of {k} temporal blocks", j + 1, row.len())));
        }
        let mut o: Option<Var> = None;
        for (idx, &x) in row.iter().enumerate() {
            let w = tape.slice_cols(omegas[j], idx, idx + 1);
            let term = tape.mul_scalar(w, x);
            o = Some(match o {
                Some(acc) => tape.add(acc, term),
                None => term,
            });
        }
        let o = o.expect("at least one temporal block");
        if j > 0 {
            let s = assignments[j - 1];
            path = Some(match path {
                Some(p) => tape.matmul(p, s),
                None => s,
            });
        }
        let mapped = match path {
            Some(p) => tape.matmul(p, o),
            None => o,
        };
        fused = Some(match fused {
            Some(acc) => tape.add(acc, mapped),
            None => mapped,
        });
    }
    Ok(fused.unwrap())
}

/// Recurrent decoder: the state starts at `X_fused W + b` and each step feeds
/// back the previous one-value-per-node prediction.
#[derive(Clone, Debug)]
pub struct ShortHead {
    pub init_w: ParamId,
    pub init_b: ParamId,
    pub cell: GcruCell,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

impl ShortHead {
    pub fn new<R: Rng>(store: &mut ParamStore, width: usize, order: usize, rng: &mut R) -> Self {
        Self {
            init_w: store.xavier("head.init_w", width, width, rng),
            init_b: store.zeros("head.init_b", 1, width),
            cell: GcruCell::new(store, "head.gcru", 1, width, order, rng),
            out_w: store.xavier("head.out_w", width, 1, rng),
            out_b: store.zeros("head.out_b", 1, 1),
        }
    }
}

/// Autoregressive GCRU decoding over `A¹`; `go` is the `N × 1` first input.
pub fn forecast_short(tape: &mut Tape, bound: &Bound, head: &ShortHead, x_fused: Var, a1: Var, go: Var, horizon: usize) -> Var {
    let h0 = tape.matmul(x_fused, bound.var(head.init_w));
    let mut h = tape.add_row(h0, bound.var(head.init_b));
    let mut prev = go;
    let mut outputs = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        h = head.cell.step(tape, bound, a1, prev, h);
        let y = tape.matmul(h, bound.var(head.out_w));
        let y = tape.add_row(y, bound.var(head.out_b));
        outputs.push(y);
        prev = y;
    }
    tape.concat_cols(&outputs)
}

/// One-shot two-layer perceptron from each node's fused vector to `τ` values.
pub fn forecast_long(tape: &mut Tape, bound: &Bound, head: &Mlp, x_fused: Var) -> Var {
    head.forward(tape, bound, x_fused)
}

/// `L₁ + λ L_GP` on normalized values.
pub fn training_loss(
    tape: &mut Tape,
    prediction: Var,
    target: Var,
    pooling: Option<Var>,
    lambda: f64,
    reduction: LossReduction,
) -> Result<Var> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    let l1 = l1_loss(tape, prediction, target, reduction)?;
    Ok(match pooling {
        Some(gp) if lambda != 0.0 => {
            let weighted = tape.scale(gp, lambda);
            tape.add(l1, weighted)
        }
        _ => l1,
    })
}

pub fn l1_loss(tape: &mut Tape, prediction: Var, target: Var, reduction: LossReduction) -> Result<Var> {
    let (ps, ts) = (tape.shape(prediction), tape.shape(target));
    if ps != ts {
        return Err(Error::Shape { context: "loss target".into(), expected: ps, actual: ts });
    }
    let diff = tape.sub(prediction, target);
    let abs = tape.abs(diff);
    let total = tape.sum(abs);
    Ok(match reduction {
        LossReduction::Sum => total,
        LossReduction::Mean => tape.scale(total, 1.0 / (ps.0 * ps.1) as f64),
    })
}

/// Fusion weights, the adapter at the fusion boundary and the output head.
#[derive(Clone, Debug)]
pub struct Fusion {
    pub hidden_dim: usize,
    pub memory_dim: usize,
    pub horizon: usize,
    /// One `1 × K` row per spatial scale.
    pub omega_logits: Vec<ParamId>,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub head: Head,
}

#[derive(Clone, Debug)]
pub enum Head {
    Short(ShortHead),
    Long(Mlp),
}

impl Fusion {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let width = cfg.feature_dim();
        let omega_logits =
            (0..cfg.spatial_scales).map(|j| store.zeros(format!("fusion.{}.omega_logits", j + 1), 1, cfg.temporal_scales)).collect();
        let proj_w = store.xavier("fusion.proj_w", width, cfg.hidden_dim, rng);
        let proj_b = store.zeros("fusion.proj_b", 1, cfg.hidden_dim);
        let head = if cfg.uses_short_head() {
            Head::Short(ShortHead::new(store, width, cfg.graph_order, rng))
        } else {
            Head::Long(Mlp::new(store, "head.mlp", width, width, cfg.horizon, rng))
        };
        Self { hidden_dim: cfg.hidden_dim, memory_dim: cfg.memory_dim, horizon: cfg.horizon, omega_logits, proj_w, proj_b, head }
    }

    pub fn omegas(&self, tape: &mut Tape, bound: &Bound) -> Vec<Var> {
        self.omega_logits.iter().map(|&id| omega(tape, bound.var(id))).collect()
    }

    /// `concat(F W + b, F[:, ..d])`: the fused features projected to `D`, with
    /// the memory read-out columns carried through, keeping width `D + d`.
    pub fn adapt(&self, tape: &mut Tape, bound: &Bound, fused: Var) -> Var {
        let proj = tape.matmul(fused, bound.var(self.proj_w));
        let proj = tape.add_row(proj, bound.var(self.proj_b));
        let memory = tape.slice_cols(fused, 0, self.memory_dim);
        tape.concat_cols(&[proj, memory])
    }

    /// `N × τ` normalized forecast. `last` is the last observed value of each
    /// node (`N × 1`), the decoder's first input.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        blocks: &[Vec<Var>],
        assignments: &[Var],
        a1: Var,
        last: Var,
    ) -> Result<(Var, Vec<Var>)> {
        let omegas = self.omegas(tape, bound);
        let fused = fuse_scales(tape, blocks, &omegas, assignments)?;
        let x_fused = self.adapt(tape, bound, fused);
        let pred = match &self.head {
            Head::Short(h) => forecast_short(tape, bound, h, x_fused, a1, last, self.horizon),
            Head::Long(m) => forecast_long(tape, bound, m, x_fused),
        };
        Ok((pred, omegas))
    }
}

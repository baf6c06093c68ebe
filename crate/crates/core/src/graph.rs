//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Values are
//! computed eagerly; [`Tape::backward`] walks the record in reverse and
//! accumulates gradients for every node that depends on a parameter leaf.
//! Vectors are represented as `1 × c` or `r × 1` matrices and scalars as `1 × 1`.

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    AddRow(Var, Var),
    AddCol(Var, Var),
    MulRow(Var, Var),
    MulScalar(Var, Var),
    MulConst(Var, Array2<f64>),
    Transpose(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Abs(Var),
    SoftmaxRows(Var),
    RowNormalize(Var),
    LayerNormRows { x: Var, xhat: Array2<f64>, inv_std: Vec<f64> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    SliceRows(Var, usize, usize),
    Sum(Var),
    FrobeniusNorm(Var),
    MeanRowEntropy(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Shift(..) => "shift",
            Op::AddRow(..) => "add_row",
            Op::AddCol(..) => "add_col",
            Op::MulRow(..) => "mul_row",
            Op::MulScalar(..) => "mul_scalar",
            Op::MulConst(..) => "mul_const",
            Op::Transpose(..) => "transpose",
            Op::Relu(..) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "ln",
            Op::Abs(..) => "abs",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::RowNormalize(..) => "row_normalize",
            Op::LayerNormRows { .. } => "layer_norm",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::Sum(..) => "sum",
            Op::FrobeniusNorm(..) => "frobenius_norm",
            Op::MeanRowEntropy(..) => "mean_row_entropy",
        }
    }
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
    label: Option<String>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub(crate) fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let total: f64 = row.sum();
        row.mapv_inplace(|v| v / total);
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;

/// Matrix product; small operands skip the packing of the blocked kernel.
fn dot(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let (m, k) = a.dim();
    let n = b.ncols();
    if m * k * n > 32_768 {
        return a.dot(&b);
    }
    if m == 0 || k == 0 || n == 0 {
        return Array2::zeros((m, n));
    }
    let a = a.as_standard_layout();
    let b = b.as_standard_layout();
    let (a, b) = (a.as_slice().unwrap(), b.as_slice().unwrap());
    let mut out = vec![0.0; m * n];
    for (o_row, a_row) in out.chunks_exact_mut(n).zip(a.chunks_exact(k)) {
        for (&x, b_row) in a_row.iter().zip(b.chunks_exact(n)) {
            for (o, y) in o_row.iter_mut().zip(b_row) {
                *o += x * y;
            }
        }
    }
    Array2::from_shape_vec((m, n), out).unwrap()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad, label: None });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, x: Var, value: Array2<f64>, op: Op) -> Var {
        let ng = self.nodes[x.0].needs_grad;
        self.push(value, op, ng)
    }

    fn binary(&mut self, a: Var, b: Var, value: Array2<f64>, op: Op) -> Var {
        let ng = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        self.push(value, op, ng)
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that is treated as a constant.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), value))
    }

    /// Attach a name used in divergence diagnostics.
    pub fn label(&mut self, v: Var, name: impl Into<String>) -> Var {
        self.nodes[v.0].label = Some(name.into());
        v
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let value = &self.nodes[v.0].value;
        debug_assert_eq!(value.dim(), (1, 1));
        value[[0, 0]]
    }

    /// Describes the first recorded node holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<String> {
        self.nodes.iter().enumerate().find_map(|(i, n)| {
            if n.value.iter().all(|v| v.is_finite()) {
                return None;
            }
            Some(match &n.label {
                Some(l) => format!("node {i} ({}, {l})", n.op.name()),
                None => format!("node {i} ({})", n.op.name()),
            })
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = dot(self.value(a).view(), self.value(b).view());
        self.binary(a, b, value, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.binary(a, b, value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        self.binary(a, b, value, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.binary(a, b, value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x) * c;
        self.unary(x, value, Op::Scale(x, c))
    }

    /// `x + c` elementwise for a constant offset.
    pub fn shift(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x) + c;
        self.unary(x, value, Op::Shift(x))
    }

    /// `x + m` for a constant matrix `m`.
    pub fn add_const(&mut self, x: Var, m: &Array2<f64>) -> Var {
        let value = self.value(x) + m;
        self.unary(x, value, Op::Shift(x))
    }

    /// `1 - x`
    pub fn one_minus(&mut self, x: Var) -> Var {
        let neg = self.scale(x, -1.0);
        self.shift(neg, 1.0)
    }

    /// `x (r×c) + b (1×c)` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let value = self.value(x) + self.value(b);
        self.binary(x, b, value, Op::AddRow(x, b))
    }

    /// `x (r×c) + b (r×1)` broadcast over columns.
    pub fn add_col(&mut self, x: Var, b: Var) -> Var {
        let value = self.value(x) + self.value(b);
        self.binary(x, b, value, Op::AddCol(x, b))
    }

    /// `x (r×c) ⊙ g (1×c)` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Var {
        let value = self.value(x) * self.value(g);
        self.binary(x, g, value, Op::MulRow(x, g))
    }

    /// `s (1×1) · x`
    pub fn mul_scalar(&mut self, s: Var, x: Var) -> Var {
        let value = self.value(x) * self.scalar_value(s);
        self.binary(s, x, value, Op::MulScalar(s, x))
    }

    /// Elementwise product with a constant; gradients pass only where the constant is nonzero.
    pub fn mul_const(&mut self, x: Var, m: Array2<f64>) -> Var {
        let value = self.value(x) * &m;
        self.unary(x, value, Op::MulConst(x, m))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.value(x).t().to_owned();
        self.unary(x, value, Op::Transpose(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| v.max(0.0));
        self.unary(x, value, Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let value = self.value(x).mapv(|v| if v > 0.0 { v } else { slope * v });
        self.unary(x, value, Op::LeakyRelu(x, slope))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(sigmoid);
        self.unary(x, value, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(f64::tanh);
        self.unary(x, value, Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(f64::exp);
        self.unary(x, value, Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(f64::ln);
        self.unary(x, value, Op::Ln(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(f64::abs);
        self.unary(x, value, Op::Abs(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let value = softmax_rows(self.value(x));
        self.unary(x, value, Op::SoftmaxRows(x))
    }

    /// Divides each row by its sum. Rows must have a nonzero sum.
    pub fn row_normalize(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        for mut row in value.rows_mut() {
            let total: f64 = row.sum();
            row.mapv_inplace(|v| v / total);
        }
        self.unary(x, value, Op::RowNormalize(x))
    }

    /// Per-row standardization (no affine part).
    pub fn layer_norm_rows(&mut self, x: Var) -> Var {
        let input = self.value(x);
        let cols = input.ncols() as f64;
        let mut xhat = input.clone();
        let mut inv_std = Vec::with_capacity(input.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / cols;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
            inv_std.push(inv);
        }
        let value = xhat.clone();
        self.unary(x, value, Op::LayerNormRows { x, xhat, inv_std })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        let ng = parts.iter().any(|p| self.nodes[p.0].needs_grad);
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = concatenate(Axis(0), &views).expect("concat_rows: column counts differ");
        let ng = parts.iter().any(|p| self.nodes[p.0].needs_grad);
        self.push(value, Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let value = self.value(x).slice(s![.., start..end]).to_owned();
        self.unary(x, value, Op::SliceCols(x, start, end))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let value = self.value(x).slice(s![start..end, ..]).to_owned();
        self.unary(x, value, Op::SliceRows(x, start, end))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(x).sum());
        self.unary(x, value, Op::Sum(x))
    }

    pub fn frobenius_norm(&mut self, x: Var) -> Var {
        let norm = self.value(x).iter().map(|v| v * v).sum::<f64>().sqrt();
        self.unary(x, Array2::from_elem((1, 1), norm), Op::FrobeniusNorm(x))
    }

    /// Mean Shannon entropy (natural log) of the rows of a row-stochastic matrix.
    pub fn mean_row_entropy(&mut self, p: Var) -> Var {
        let probs = self.value(p);
        let n = probs.nrows() as f64;
        let h: f64 = probs.iter().map(|&v| if v > 0.0 { -v * v.ln() } else { 0.0 }).sum();
        self.unary(p, Array2::from_elem((1, 1), h / n), Op::MeanRowEntropy(p))
    }

    /// Runs reverse accumulation from a `1 × 1` output.
    pub fn backward(&self, output: Var) -> Gradients {
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Array2::ones(self.value(output).dim()));
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.nodes[a.0].needs_grad {
                    self.accumulate(grads, *a, dot(g.view(), self.value(*b).t()));
                }
                if self.nodes[b.0].needs_grad {
                    self.accumulate(grads, *b, dot(self.value(*a).t(), g.view()));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                self.accumulate(grads, *a, g * self.value(*b));
                self.accumulate(grads, *b, g * self.value(*a));
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, g * *c),
            Op::Shift(x) => self.accumulate(grads, *x, g.clone()),
            Op::AddRow(x, b) => {
                self.accumulate(grads, *x, g.clone());
                self.accumulate(grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::AddCol(x, b) => {
                self.accumulate(grads, *x, g.clone());
                self.accumulate(grads, *b, g.sum_axis(Axis(1)).insert_axis(Axis(1)));
            }
            Op::MulRow(x, r) => {
                self.accumulate(grads, *x, g * self.value(*r));
                let gr = (g * self.value(*x)).sum_axis(Axis(0)).insert_axis(Axis(0));
                self.accumulate(grads, *r, gr);
            }
            Op::MulScalar(sv, x) => {
                let s = self.scalar_value(*sv);
                let gs = (g * self.value(*x)).sum();
                self.accumulate(grads, *sv, Array2::from_elem((1, 1), gs));
                self.accumulate(grads, *x, g * s);
            }
            Op::MulConst(x, m) => self.accumulate(grads, *x, g * m),
            Op::Transpose(x) => self.accumulate(grads, *x, g.t().to_owned()),
            Op::Relu(x) => {
                let mut gx = g.clone();
                gx.zip_mut_with(self.value(*x), |gv, &xv| {
                    if xv <= 0.0 {
                        *gv = 0.0
                    }
                });
                self.accumulate(grads, *x, gx);
            }
            Op::LeakyRelu(x, slope) => {
                let mut gx = g.clone();
                gx.zip_mut_with(self.value(*x), |gv, &xv| {
                    if xv <= 0.0 {
                        *gv *= slope
                    }
                });
                self.accumulate(grads, *x, gx);
            }
            Op::Sigmoid(x) => self.accumulate(grads, *x, g * &y.mapv(|v| v * (1.0 - v))),
            Op::Tanh(x) => self.accumulate(grads, *x, g * &y.mapv(|v| 1.0 - v * v)),
            Op::Exp(x) => self.accumulate(grads, *x, g * y),
            Op::Ln(x) => self.accumulate(grads, *x, g / self.value(*x)),
            Op::Abs(x) => {
                let sign = self.value(*x).mapv(|v| {
                    if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, *x, g * &sign);
            }
            Op::SoftmaxRows(x) => {
                let gy = g * y;
                let dot = gy.sum_axis(Axis(1)).insert_axis(Axis(1));
                self.accumulate(grads, *x, gy - &(y * &dot));
            }
            Op::RowNormalize(x) => {
                let sums = self.value(*x).sum_axis(Axis(1)).insert_axis(Axis(1));
                let dot = (g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                self.accumulate(grads, *x, (g - &dot) / &sums);
            }
            Op::LayerNormRows { x, xhat, inv_std } => {
                let cols = xhat.ncols() as f64;
                let mut gx = g.clone();
                for (r, mut row) in gx.rows_mut().into_iter().enumerate() {
                    let xh = xhat.row(r);
                    let gsum: f64 = row.sum();
                    let gxh: f64 = row.iter().zip(xh.iter()).map(|(a, b)| a * b).sum();
                    let inv = inv_std[r];
                    for (c, v) in row.iter_mut().enumerate() {
                        *v = inv / cols * (cols * *v - gsum - xh[c] * gxh);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = self.value(*p).ncols();
                    self.accumulate(grads, *p, g.slice(s![.., start..start + w]).to_owned());
                    start += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let h = self.value(*p).nrows();
                    self.accumulate(grads, *p, g.slice(s![start..start + h, ..]).to_owned());
                    start += h;
                }
            }
            Op::SliceCols(x, start, end) => {
                let mut gx = Array2::zeros(self.value(*x).dim());
                gx.slice_mut(s![.., *start..*end]).assign(g);
                self.accumulate(grads, *x, gx);
            }
            Op::SliceRows(x, start, end) => {
                let mut gx = Array2::zeros(self.value(*x).dim());
                gx.slice_mut(s![*start..*end, ..]).assign(g);
                self.accumulate(grads, *x, gx);
            }
            Op::Sum(x) => {
                let gv = g[[0, 0]];
                self.accumulate(grads, *x, Array2::from_elem(self.value(*x).dim(), gv));
            }
            Op::FrobeniusNorm(x) => {
                let norm = y[[0, 0]];
                let gx = if norm > 0.0 {
                    self.value(*x) * (g[[0, 0]] / norm)
                } else {
                    Array2::zeros(self.value(*x).dim())
                };
                self.accumulate(grads, *x, gx);
            }
            Op::MeanRowEntropy(p) => {
                let probs = self.value(*p);
                let scale = -g[[0, 0]] / probs.nrows() as f64;
                let gx = probs.mapv(|v| if v > 0.0 { scale * (v.ln() + 1.0) } else { 0.0 });
                self.accumulate(grads, *p, gx);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central-difference check of every parameter entry for a scalar function.
    fn check<F>(inputs: &[Array2<f64>], f: F)
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
        let out = f(&mut tape, &vars);
        let grads = tape.backward(out);
        let eval = |xs: &[Array2<f64>]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
            let o = f(&mut t, &vs);
            t.scalar_value(o)
        };
        let h = 1e-6;
        for (k, x) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Array2::zeros(x.dim()));
            for idx in 0..x.len() {
                let mut plus = inputs.to_vec();
                let mut minus = inputs.to_vec();
                plus[k].as_slice_mut().unwrap()[idx] += h;
                minus[k].as_slice_mut().unwrap()[idx] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.as_slice().unwrap()[idx];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(err < 1e-5, "input {k} entry {idx}: analytic {a} numeric {numeric}");
            }
        }
    }

    fn a() -> Array2<f64> {
        array![[0.3, -1.2, 0.7], [1.1, 0.4, -0.5]]
    }

    fn b() -> Array2<f64> {
        array![[0.2, -0.3], [0.9, 0.1], [-0.4, 0.6]]
    }

    #[test]
    fn matmul_and_elementwise_gradients() {
        check(&[a(), b()], |t, v| {
            let m = t.matmul(v[0], v[1]);
            let s = t.sigmoid(m);
            let th = t.tanh(s);
            let e = t.exp(th);
            t.sum(e)
        });
        check(&[a(), a()], |t, v| {
            let m = t.mul(v[0], v[1]);
            let d = t.sub(m, v[0]);
            let l = t.leaky_relu(d, 0.2);
            t.sum(l)
        });
    }

    #[test]
    fn softmax_layer_norm_and_reductions() {
        check(&[a()], |t, v| {
            let sm = t.softmax_rows(v[0]);
            let w = t.constant(array![[1.0, 2.0, -1.0], [0.5, 0.0, 3.0]]);
            let p = t.mul(sm, w);
            t.sum(p)
        });
        check(&[a()], |t, v| {
            let ln = t.layer_norm_rows(v[0]);
            let w = t.constant(array![[1.0, 2.0, -1.0], [0.5, 0.0, 3.0]]);
            let p = t.mul(ln, w);
            t.sum(p)
        });
        check(&[a()], |t, v| {
            let sm = t.softmax_rows(v[0]);
            t.mean_row_entropy(sm)
        });
        check(&[a()], |t, v| t.frobenius_norm(v[0]));
        check(&[a()], |t, v| {
            let e = t.exp(v[0]);
            let n = t.row_normalize(e);
            let w = t.constant(array![[1.0, 2.0, -1.0], [0.5, 0.0, 3.0]]);
            let p = t.mul(n, w);
            t.sum(p)
        });
    }

    #[test]
    fn broadcasting_slicing_and_concat() {
        let row = array![[0.5, -0.2, 0.1]];
        let col = array![[0.3], [-0.7]];
        check(&[a(), row.clone(), col.clone()], |t, v| {
            let x = t.add_row(v[0], v[1]);
            let x = t.add_col(x, v[2]);
            let x = t.mul_row(x, v[1]);
            let sl = t.slice_cols(x, 1, 3);
            let r = t.slice_rows(x, 0, 1);
            let c = t.concat_cols(&[sl, x]);
            let tr = t.transpose(r);
            let c2 = t.concat_rows(&[c, c]);
            let s1 = t.sum(c2);
            let s2 = t.sum(tr);
            let sc = t.mul_scalar(s2, s1);
            t.abs(sc)
        });
    }

    #[test]
    fn mul_const_blocks_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(a());
        let mask = array![[1.0, 0.0, 1.0], [0.0, 0.0, 1.0]];
        let y = tape.mul_const(x, mask.clone());
        let s = tape.sum(y);
        let g = tape.backward(s);
        assert_eq!(g.get(x).unwrap(), &mask);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.constant(a());
        let w = tape.param(b());
        let y = tape.matmul(x, w);
        let s = tape.sum(y);
        let g = tape.backward(s);
        assert!(g.get(x).is_none());
        assert!(g.get(w).is_some());
    }

    #[test]
    fn reports_first_non_finite_node() {
        let mut tape = Tape::new();
        let x = tape.constant(array![[-1.0]]);
        let l = tape.ln(x);
        tape.label(l, "log_of_negative");
        let msg = tape.first_non_finite().unwrap();
        assert!(msg.contains("ln") && msg.contains("log_of_negative"), "{msg}");
    }
}

//! Forecast error metrics, the persistence baseline and the adjusted Rand index.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// Floor on `|y|` in the MAPE denominator.
pub const MAPE_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub mae: f64,
    pub mse: f64,
    pub rmse: f64,
    /// Percent.
    pub mape: f64,
}

/// Accumulates absolute, squared and relative errors.
#[derive(Clone, Copy, Debug, Default)]
struct Accum {
    abs: f64,
    sq: f64,
    rel: f64,
    count: usize,
}

impl Accum {
    fn push(&mut self, pred: f64, truth: f64) {
        let e = pred - truth;
        self.abs += e.abs();
        self.sq += e * e;
        self.rel += e.abs() / truth.abs().max(MAPE_EPS);
        self.count += 1;
    }

    fn finish(self) -> MetricSet {
        if self.count == 0 {
            return MetricSet::default();
        }
        let n = self.count as f64;
        let mse = self.sq / n;
        MetricSet { mae: self.abs / n, mse, rmse: mse.sqrt(), mape: 100.0 * self.rel / n }
    }
}

impl MetricSet {
    pub fn compute(pred: &[f64], truth: &[f64]) -> Self {
        assert_eq!(pred.len(), truth.len(), "prediction and truth lengths differ");
        let mut acc = Accum::default();
        for (p, t) in pred.iter().zip(truth) {
            acc.push(*p, *t);
        }
        acc.finish()
    }
}

/// Metrics over every window, overall and per forecast step (1-based keys).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub overall: MetricSet,
    pub horizon: BTreeMap<usize, MetricSet>,
    pub windows: usize,
}

impl MetricsReport {
    /// `preds[w]` and `truths[w]` are `N × τ` matrices in the same units.
    pub fn from_windows(preds: &[Array2<f64>], truths: &[Array2<f64>]) -> Self {
        assert_eq!(preds.len(), truths.len());
        let steps = preds.first().map_or(0, |p| p.ncols());
        let mut overall = Accum::default();
        let mut per_step = vec![Accum::default(); steps];
        for (p, t) in preds.iter().zip(truths) {
            assert_eq!(p.dim(), t.dim(), "prediction and truth shapes differ");
            for ((i, step), v) in p.indexed_iter() {
                overall.push(*v, t[[i, step]]);
                per_step[step].push(*v, t[[i, step]]);
            }
        }
        Self {
            overall: overall.finish(),
            horizon: per_step.into_iter().enumerate().map(|(s, a)| (s + 1, a.finish())).collect(),
            windows: preds.len(),
        }
    }
}

/// Repeats each node's last observed value over the horizon.
pub fn persistence_forecast(input: &Array2<f64>, horizon: usize) -> Array2<f64> {
    let last = input.ncols() - 1;
    Array2::from_shape_fn((input.nrows(), horizon), |(i, _)| input[[i, last]])
}

fn choose2(n: usize) -> f64 {
    (n * n.saturating_sub(1)) as f64 / 2.0
}

/// Adjusted Rand index between two labelings of the same items. Identical
/// partitions score 1; when both are trivial (one cluster each, or all
/// singletons) the index is defined as 1.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut table: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut rows: BTreeMap<usize, usize> = BTreeMap::new();
    let mut cols: BTreeMap<usize, usize> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let index: f64 = table.values().map(|&n| choose2(n)).sum();
    let sum_a: f64 = rows.values().map(|&n| choose2(n)).sum();
    let sum_b: f64 = cols.values().map(|&n| choose2(n)).sum();
    let total = choose2(a.len());
    if total == 0.0 {
        return 1.0;
    }
    let expected = sum_a * sum_b / total;
    let max = 0.5 * (sum_a + sum_b);
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

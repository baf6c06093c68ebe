//! Data preparation, the optimization loop with early stopping, evaluation
//! and inference.

use std::path::Path;

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{LossReduction, ModelConfig};
use crate::dataset::{chronological_split, make_windows, NormStats, SplitRanges, TimeSeriesDataset, WindowSample};
use crate::dtw::{compute_dtw_adjacency, load_or_compute, DtwAdjacency};
use crate::error::{Error, Result};
use crate::graph::Tape;
use crate::metrics::MetricsReport;
use crate::model::StHyper;
use crate::params::{clip_global_norm, Adam, ParamStore};

/// Normalized windows of every split plus the training-range DTW affinity.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub splits: SplitRanges,
    pub norm: NormStats,
    /// Normalized `N × L` values.
    pub values: Array2<f64>,
    pub train: Vec<WindowSample>,
    pub val: Vec<WindowSample>,
    pub test: Vec<WindowSample>,
    pub dtw: DtwAdjacency,
}

/// Splits chronologically, fits normalization on the training range, cuts
/// windows and computes (or loads from `cache_dir`) the DTW affinity of the
/// normalized training series.
pub fn prepare(ds: &TimeSeriesDataset, cfg: &ModelConfig, cache_dir: Option<&Path>) -> Result<PreparedData> {
    cfg.validate(ds.n_vars())?;
    let splits = chronological_split(ds.len(), cfg.split)?;
    let norm = NormStats::fit(ds, splits.train.clone())?;
    let values = norm.normalize(&ds.values);
    let (t, h, strict) = (cfg.input_len, cfg.horizon, cfg.strict_windows);
    let train = make_windows(&values, t, h, splits.train.clone(), strict)?;
    let val = make_windows(&values, t, h, splits.val.clone(), strict)?;
    let test = make_windows(&values, t, h, splits.test.clone(), strict)?;
    let train_values = values.slice(s![.., splits.train.clone()]).to_owned();
    let dtw = match cache_dir {
        Some(dir) => load_or_compute(dir, &train_values)?,
        None => compute_dtw_adjacency(&train_values),
    };
    Ok(PreparedData { splits, norm, values, train, val, test, dtw })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Patience counter over validation losses; any strict improvement resets it.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: Option<usize>,
    pub bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: f64::INFINITY, best_epoch: None, bad_epochs: 0 }
    }

    pub fn observe(&mut self, epoch: usize, loss: f64) -> StopDecision {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = Some(epoch);
            self.bad_epochs = 0;
            return StopDecision::Improved;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean training objective over the epoch's batches.
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    /// Mean `L₁` of the batch windows.
    pub l1: f64,
    pub grad_norm: f64,
}

/// Owns the parameters and optimizer state during training.
pub struct Trainer<'a> {
    pub model: &'a StHyper,
    pub store: ParamStore,
    pub adam: Adam,
    pub a_dtw: Option<Array2<f64>>,
    pub epoch: usize,
    rng: ChaCha8Rng,
}

struct SampleGrad {
    grads: Vec<Array2<f64>>,
    loss: f64,
    l1: f64,
}

impl<'a> Trainer<'a> {
    pub fn new(model: &'a StHyper, store: ParamStore, a_dtw: Option<Array2<f64>>) -> Self {
        let adam = Adam::new(&store, model.cfg.learning_rate);
        let rng = ChaCha8Rng::seed_from_u64(model.cfg.seed ^ 0x5eed);
        Self { model, store, adam, a_dtw, epoch: 0, rng }
    }

    fn sample_gradient(&self, sample: &WindowSample, weight: f64) -> Result<SampleGrad> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape);
        let out = self.model.sample_loss(&mut tape, &bound, sample, self.a_dtw.as_ref(), weight)?;
        let loss = tape.scalar_value(out.objective);
        if !loss.is_finite() {
            return Err(Error::Divergence(tape.first_non_finite().unwrap_or_else(|| "loss".into())));
        }
        let mut g = tape.backward(out.objective);
        let grads = bound.gradients(&self.store, &mut g);
        for (id, grad) in self.store.ids().zip(&grads) {
            if grad.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence(format!("gradient of {}", self.store.name(id))));
            }
        }
        Ok(SampleGrad { grads, loss, l1: out.l1 })
    }

    /// Batch objective and gradients, summed in batch order.
    pub fn batch_gradients(&self, batch: &[&WindowSample]) -> Result<(Vec<Array2<f64>>, f64, f64)> {
        if batch.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let weight = 1.0 / batch.len() as f64;
        let parts: Vec<Result<SampleGrad>> = if self.model.cfg.serial {
            batch.iter().map(|s| self.sample_gradient(s, weight)).collect()
        } else {
            batch.par_iter().map(|s| self.sample_gradient(s, weight)).collect()
        };
        let mut total: Option<Vec<Array2<f64>>> = None;
        let (mut loss, mut l1) = (0.0, 0.0);
        for part in parts {
            let part = part?;
            loss += part.loss;
            l1 += part.l1 * weight;
            match total.as_mut() {
                None => total = Some(part.grads),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&part.grads) {
                        *a += g;
                    }
                }
            }
        }
        Ok((total.unwrap(), loss, l1))
    }

    /// One optimizer update on `batch`.
    pub fn step(&mut self, batch: &[&WindowSample]) -> Result<StepStats> {
        let (mut grads, loss, l1) = self.batch_gradients(batch)?;
        let grad_norm = match self.model.cfg.grad_clip {
            Some(max) => clip_global_norm(&mut grads, max),
            None => grads.iter().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt(),
        };
        self.adam.update(&mut self.store, &grads);
        if let Some(pos) = self.store.values().iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            let id = self.store.ids().nth(pos).unwrap();
            return Err(Error::Divergence(format!("parameter {}", self.store.name(id))));
        }
        Ok(StepStats { loss, l1, grad_norm })
    }

    /// One pass over shuffled training windows; returns the mean batch objective.
    pub fn run_epoch(&mut self, windows: &[WindowSample]) -> Result<f64> {
        if windows.is_empty() {
            return Err(Error::Config("no training windows".into()));
        }
        let mut order: Vec<usize> = (0..windows.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(self.model.cfg.batch_size) {
            let batch: Vec<&WindowSample> = chunk.iter().map(|&i| &windows[i]).collect();
            total += self.step(&batch)?.loss;
            batches += 1;
        }
        self.epoch += 1;
        Ok(total / batches as f64)
    }

    /// Mean per-window `L₁` without the pooling term.
    pub fn validation_loss(&self, windows: &[WindowSample]) -> Result<f64> {
        validation_loss(self.model, &self.store, windows)
    }

    /// Trains for at most `cfg.max_epochs`, stopping after `cfg.patience`
    /// epochs without strict validation improvement, and restores the best
    /// parameters and optimizer state.
    pub fn fit(&mut self, train: &[WindowSample], val: &[WindowSample]) -> Result<TrainReport> {
        let cfg = &self.model.cfg;
        let monitor = if val.is_empty() {
            log::warn!("no validation windows; early stopping tracks the training windows");
            train
        } else {
            val
        };
        let mut stopper = EarlyStopping::new(cfg.patience);
        let mut best = (self.store.clone(), self.adam.clone());
        let mut epochs = Vec::new();
        let mut stopped_early = false;
        for epoch in 1..=cfg.max_epochs {
            let train_loss = self.run_epoch(train)?;
            let val_loss = self.validation_loss(monitor)?;
            log::info!("epoch {epoch}: train {train_loss:.6} val {val_loss:.6}");
            epochs.push(EpochLog { epoch, train_loss, val_loss });
            match stopper.observe(epoch, val_loss) {
                StopDecision::Improved => best = (self.store.clone(), self.adam.clone()),
                StopDecision::Continue => {}
                StopDecision::Stop => {
                    stopped_early = true;
                    break;
                }
            }
        }
        (self.store, self.adam) = best;
        Ok(TrainReport {
            epochs,
            best_epoch: stopper.best_epoch.unwrap_or(0),
            best_val_loss: stopper.best,
            stopped_early,
        })
    }
}

/// Normalized forecasts for every window, in order.
pub fn predict_windows(model: &StHyper, store: &ParamStore, windows: &[WindowSample]) -> Result<Vec<Array2<f64>>> {
    let preds: Vec<Result<Array2<f64>>> = if model.cfg.serial {
        windows.iter().map(|w| model.predict_normalized(store, &w.input)).collect()
    } else {
        windows.par_iter().map(|w| model.predict_normalized(store, &w.input)).collect()
    };
    preds.into_iter().collect()
}

pub fn validation_loss(model: &StHyper, store: &ParamStore, windows: &[WindowSample]) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::Config("no windows to evaluate".into()));
    }
    let preds = predict_windows(model, store, windows)?;
    let total: f64 = preds
        .iter()
        .zip(windows)
        .map(|(p, w)| {
            let sum: f64 = (p - &w.target).mapv(f64::abs).sum();
            match model.cfg.loss_reduction {
                LossReduction::Sum => sum,
                LossReduction::Mean => sum / p.len() as f64,
            }
        })
        .sum();
    Ok(total / windows.len() as f64)
}

/// Metrics on normalized values.
pub fn evaluate_normalized(model: &StHyper, store: &ParamStore, windows: &[WindowSample]) -> Result<MetricsReport> {
    let preds = predict_windows(model, store, windows)?;
    let truths: Vec<Array2<f64>> = windows.iter().map(|w| w.target.clone()).collect();
    Ok(MetricsReport::from_windows(&preds, &truths))
}

/// Metrics in the original units of the data.
pub fn evaluate(model: &StHyper, store: &ParamStore, windows: &[WindowSample], norm: &NormStats) -> Result<MetricsReport> {
    if windows.is_empty() {
        return Err(Error::Config("no windows to evaluate".into()));
    }
    let preds: Vec<Array2<f64>> = predict_windows(model, store, windows)?.iter().map(|p| norm.denormalize(p)).collect();
    let truths: Vec<Array2<f64>> = windows.iter().map(|w| norm.denormalize(&w.target)).collect();
    Ok(MetricsReport::from_windows(&preds, &truths))
}

/// Forecast in original units for a raw `N × T` window.
pub fn predict(model: &StHyper, store: &ParamStore, norm: &NormStats, raw_input: &Array2<f64>) -> Result<Array2<f64>> {
    model.check_input(raw_input)?;
    let pred = model.predict_normalized(store, &norm.normalize(raw_input))?;
    Ok(norm.denormalize(&pred))
}

/// Everything produced by [`train_model`].
pub struct TrainOutcome {
    pub model: StHyper,
    pub store: ParamStore,
    pub adam: Adam,
    pub report: TrainReport,
    pub data: PreparedData,
}

/// Prepares `ds`, builds the model from `cfg` and trains it.
pub fn train_model(cfg: &ModelConfig, ds: &TimeSeriesDataset, cache_dir: Option<&Path>) -> Result<TrainOutcome> {
    let data = prepare(ds, cfg, cache_dir)?;
    let (model, store) = StHyper::new(cfg, ds.n_vars())?;
    let a_dtw = Some(data.dtw.affinity.clone());
    let (store, adam, report) = {
        let mut trainer = Trainer::new(&model, store, a_dtw);
        let report = trainer.fit(&data.train, &data.val)?;
        (trainer.store, trainer.adam, report)
    };
    Ok(TrainOutcome { model, store, adam, report, data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SyntheticSpec};
    use proptest::prelude::*;

    #[test]
    fn patience_example() {
        let mut es = EarlyStopping::new(15);
        let mut losses = vec![5.0, 4.0];
        losses.extend(std::iter::repeat_n(4.0, 20));
        let mut stopped_at = None;
        for (i, l) in losses.iter().enumerate() {
            if es.observe(i + 1, *l) == StopDecision::Stop {
                stopped_at = Some(i + 1);
                break;
            }
        }
        assert_eq!(stopped_at, Some(17));
        assert_eq!(es.best_epoch, Some(2));
    }

    proptest! {
        #[test]
        fn counter_resets_on_strict_improvement(losses in proptest::collection::vec(0.0f64..10.0, 1..60), patience in 1usize..6) {
            let mut es = EarlyStopping::new(patience);
            let mut best = f64::INFINITY;
            let mut since = 0;
            for (i, l) in losses.iter().enumerate() {
                let d = es.observe(i, *l);
                if *l < best {
                    best = *l;
                    since = 0;
                    prop_assert_eq!(d, StopDecision::Improved);
                    prop_assert_eq!(es.bad_epochs, 0);
                } else {
                    since += 1;
                    prop_assert_eq!(d == StopDecision::Stop, since >= patience);
                }
                if d == StopDecision::Stop {
                    break;
                }
            }
        }
    }

    fn small() -> (ModelConfig, TimeSeriesDataset) {
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
            batch_size: 4,
            max_epochs: 2,
            ..Default::default()
        };
        let ds = generate_synthetic(&SyntheticSpec { n_groups: 2, vars_per_group: 3, length: 256, ..Default::default() }).unwrap();
        (cfg, ds)
    }

    #[test]
    fn seeded_runs_are_identical() {
        let (cfg, ds) = small();
        let a = train_model(&cfg, &ds, None).unwrap();
        let b = train_model(&cfg, &ds, None).unwrap();
        assert_eq!(a.report.epochs, b.report.epochs);
        assert_eq!(a.store.values(), b.store.values());
    }

    #[test]
    fn parallel_batches_match_serial() {
        let (cfg, ds) = small();
        let a = train_model(&cfg, &ds, None).unwrap();
        let b = train_model(&ModelConfig { serial: false, ..cfg }, &ds, None).unwrap();
        assert_eq!(a.report.epochs, b.report.epochs);
    }

    #[test]
    fn divergence_names_a_tensor() {
        let (cfg, ds) = small();
        let data = prepare(&ds, &cfg, None).unwrap();
        let (model, mut store) = StHyper::new(&cfg, 6).unwrap();
        let id = store.find("head.out_b").unwrap();
        store.get_mut(id).fill(f64::NAN);
        let mut trainer = Trainer::new(&model, store, None);
        let err = trainer.step(&[&data.train[0]]).unwrap_err();
        assert_eq!(err.kind(), "divergence");
        assert!(!err.to_string().is_empty());
    }

    #[test]
    fn evaluation_reports_in_original_units() {
        let (cfg, ds) = small();
        let data = prepare(&ds, &cfg, None).unwrap();
        let (model, store) = StHyper::new(&cfg, 6).unwrap();
        let report = evaluate(&model, &store, &data.test, &data.norm).unwrap();
        assert!(report.overall.mae > 0.0);
        assert!((report.overall.rmse - report.overall.mse.sqrt()).abs() < 1e-9);
        assert_eq!(report.horizon.len(), 4);
        let raw = ds.values.slice(s![.., 0..16]).to_owned();
        let p = predict(&model, &store, &data.norm, &raw).unwrap();
        assert_eq!(p.dim(), (6, 4));
    }
}

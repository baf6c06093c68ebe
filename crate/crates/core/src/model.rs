//! The full forecaster: pyramid graph, multi-scale encoder, hypergraph
//! layers and fusion head wired together.

use ndarray::{s, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ahm::{AhmOutput, HypergraphLayer};
use crate::config::ModelConfig;
use crate::dataset::WindowSample;
use crate::error::{Error, Result};
use crate::fusion::{l1_loss, Fusion};
use crate::graph::{Tape, Var};
use crate::params::{Bound, ParamStore};
use crate::spg::{PyramidOutput, SpatialPyramid};
use crate::stpm::{ScaleFeatureSet, Stpm};

/// Model structure; the learnable values live in a separate [`ParamStore`].
#[derive(Clone, Debug)]
pub struct StHyper {
    pub cfg: ModelConfig,
    pub n_vars: usize,
    pub pyramid: SpatialPyramid,
    pub stpm: Stpm,
    pub ahm: Vec<HypergraphLayer>,
    pub fusion: Fusion,
}

pub struct ForwardOutput {
    /// Normalized `N × τ` forecast.
    pub prediction: Var,
    pub pyramid: PyramidOutput,
    pub features: ScaleFeatureSet,
    pub ahm: Vec<AhmOutput>,
    /// `α × (D + d)` after the last hypergraph layer.
    pub x_hyper: Var,
    pub omegas: Vec<Var>,
}

/// Loss of one window on a tape.
pub struct SampleLoss {
    /// The value to differentiate.
    pub objective: Var,
    /// Unscaled `L₁` of the window.
    pub l1: f64,
    /// Unscaled pooling loss, if computed.
    pub pooling: Option<f64>,
}

impl StHyper {
    /// Builds the structure and its parameters, initialized from `cfg.seed`.
    pub fn new(cfg: &ModelConfig, n_vars: usize) -> Result<(Self, ParamStore)> {
        cfg.validate(n_vars)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let pyramid = SpatialPyramid::new(&mut store, cfg, n_vars, &mut rng);
        let stpm = Stpm::new(&mut store, cfg, n_vars, &mut rng);
        let alpha = cfg.alpha(n_vars);
        let ahm = if cfg.disable_ahm {
            Vec::new()
        } else {
            (0..cfg.ahm_layers)
                .map(|l| HypergraphLayer::new(&mut store, &format!("ahm.{}", l + 1), cfg, alpha, &mut rng))
                .collect()
        };
        let fusion = Fusion::new(&mut store, cfg, &mut rng);
        Ok((Self { cfg: cfg.clone(), n_vars, pyramid, stpm, ahm, fusion }, store))
    }

    pub fn check_input(&self, input: &Array2<f64>) -> Result<()> {
        let expected = (self.n_vars, self.cfg.input_len);
        if input.dim() != expected {
            return Err(Error::Shape { context: "input window".into(), expected, actual: input.dim() });
        }
        if let Some(pos) = input.iter().position(|v| !v.is_finite()) {
            return Err(Error::MissingValue { row: pos % expected.1, column: format!("variable {}", pos / expected.1) });
        }
        Ok(())
    }

    /// Forward pass on one normalized `N × T` window. With `a_dtw` the pooling
    /// loss is built as well.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, input: &Array2<f64>, a_dtw: Option<&Array2<f64>>) -> Result<ForwardOutput> {
        self.check_input(input)?;
        let pyramid = self.pyramid.forward(tape, bound, a_dtw)?;
        let x = tape.constant(input.clone());
        let x = tape.label(x, "input");
        let features = self.stpm.forward(tape, bound, x, &pyramid)?;
        let mut x_hyper = features.flat;
        let mut ahm = Vec::with_capacity(self.ahm.len());
        for layer in &self.ahm {
            let out = layer.forward(tape, bound, x_hyper);
            x_hyper = out.x_hyper;
            ahm.push(out);
        }
        let flat_blocks = features.layout.unflatten(tape, x_hyper);
        let k = self.cfg.temporal_scales;
        let blocks: Vec<Vec<Var>> = flat_blocks.chunks(k).map(|c| c.to_vec()).collect();
        let last = input.slice(s![.., input.ncols() - 1..]).to_owned();
        let last = tape.constant(last);
        let (prediction, omegas) =
            self.fusion.forward(tape, bound, &blocks, &pyramid.assignments, pyramid.adjacency[0], last)?;
        let prediction = tape.label(prediction, "prediction");
        Ok(ForwardOutput { prediction, pyramid, features, ahm, x_hyper, omegas })
    }

    /// `(L₁ + λ L_GP) · weight` for one window; `weight` is `1/B` inside a batch.
    pub fn sample_loss(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        sample: &WindowSample,
        a_dtw: Option<&Array2<f64>>,
        weight: f64,
    ) -> Result<SampleLoss> {
        let lambda = self.cfg.effective_lambda();
        let dtw = if lambda > 0.0 { a_dtw } else { None };
        let out = self.forward(tape, bound, &sample.input, dtw)?;
        let target = tape.constant(sample.target.clone());
        let l1 = l1_loss(tape, out.prediction, target, self.cfg.loss_reduction)?;
        let l1_value = tape.scalar_value(l1);
        let pooling = out.pyramid.pooling_loss.map(|p| tape.scalar_value(p));
        let total = match out.pyramid.pooling_loss {
            Some(gp) if lambda > 0.0 => {
                let w = tape.scale(gp, lambda);
                tape.add(l1, w)
            }
            _ => l1,
        };
        let objective = tape.scale(total, weight);
        let objective = tape.label(objective, "loss");
        Ok(SampleLoss { objective, l1: l1_value, pooling })
    }

    /// Normalized forecast for one window, without gradient bookkeeping.
    pub fn predict_normalized(&self, store: &ParamStore, input: &Array2<f64>) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let bound = store.bind_frozen(&mut tape);
        let out = self.forward(&mut tape, &bound, input, None)?;
        Ok(tape.value(out.prediction).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::HeadChoice;

    pub(crate) fn tiny() -> ModelConfig {
        ModelConfig {
            input_len: 16,
            horizon: 4,
            pooling_ratio: 3,
            spatial_scales: 2,
            patch_len: 4,
            temporal_scales: 2,
            hyperedge_nodes: 3,
            hidden_dim: 8,
            memory_items: 5,
            memory_dim: 4,
            hyperedges: 4,
            batch_size: 2,
            ..Default::default()
        }
    }

    fn window(n: usize, t: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, t), |(i, j)| ((i + 1) as f64 * 0.3 * j as f64).sin())
    }

    #[test]
    fn forward_shapes_for_both_heads() {
        for head in [HeadChoice::Short, HeadChoice::Long] {
            let cfg = ModelConfig { head, ..tiny() };
            let (model, store) = StHyper::new(&cfg, 6).unwrap();
            let mut t = Tape::new();
            let b = store.bind(&mut t);
            let out = model.forward(&mut t, &b, &window(6, 16), None).unwrap();
            assert_eq!(t.shape(out.prediction), (6, 4));
            assert_eq!(t.shape(out.x_hyper), (16, 12));
            assert!(t.value(out.prediction).iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn rejects_bad_windows() {
        let (model, store) = StHyper::new(&tiny(), 6).unwrap();
        let err = model.predict_normalized(&store, &window(6, 12)).unwrap_err();
        assert!(err.to_string().contains("(6, 16)"));
        let mut w = window(6, 16);
        w[[2, 3]] = f64::NAN;
        assert!(model.predict_normalized(&store, &w).is_err());
    }

    #[test]
    fn disable_ahm_has_no_hypergraph_parameters() {
        let cfg = ModelConfig { disable_ahm: true, ..tiny() };
        let (model, store) = StHyper::new(&cfg, 6).unwrap();
        assert!(model.ahm.is_empty());
        assert!(store.iter().all(|(name, _)| !name.starts_with("ahm")));
        let pred = model.predict_normalized(&store, &window(6, 16)).unwrap();
        assert_eq!(pred.dim(), (6, 4));
    }

    #[test]
    fn prediction_is_pure() {
        let (model, store) = StHyper::new(&tiny(), 6).unwrap();
        let w = window(6, 16);
        let a = model.predict_normalized(&store, &w).unwrap();
        let b = model.predict_normalized(&store, &w).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ablation_switches_change_structure() {
        let a_dtw = Array2::from_shape_fn((6, 6), |(i, j)| if i / 3 == j / 3 { 1.0 } else { 0.2 });
        let sample = WindowSample { input: window(6, 16), target: Array2::zeros((6, 4)), origin: 0 };

        let cfg = ModelConfig { lambda: 0.5, disable_gp_loss: true, ..tiny() };
        assert_eq!(cfg.effective_lambda(), 0.0);
        let (model, store) = StHyper::new(&cfg, 6).unwrap();
        let mut t = Tape::new();
        let b = store.bind(&mut t);
        let out = model.sample_loss(&mut t, &b, &sample, Some(&a_dtw), 0.5).unwrap();
        assert!(out.pooling.is_none());
        assert_eq!(t.scalar_value(out.objective), out.l1 * 0.5);

        let cfg = ModelConfig { lambda: 0.5, ..tiny() };
        let (model, store) = StHyper::new(&cfg, 6).unwrap();
        let mut t = Tape::new();
        let b = store.bind(&mut t);
        let out = model.sample_loss(&mut t, &b, &sample, Some(&a_dtw), 1.0).unwrap();
        let gp = out.pooling.unwrap();
        assert!((t.scalar_value(out.objective) - (out.l1 + 0.5 * gp)).abs() < 1e-12);

        let cfg = ModelConfig { plain_graph_learning: true, ..tiny() };
        let (model, store) = StHyper::new(&cfg, 6).unwrap();
        assert!(store.find("spg.1.e1").is_some() && store.find("spg.1.w_e1").is_none());
        let mut t = Tape::new();
        let b = store.bind(&mut t);
        let out = model.forward(&mut t, &b, &window(6, 16), None).unwrap();
        for &a in &out.pyramid.adjacency {
            for row in t.value(a).rows() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn feature_shapes_over_config_grid(
                n in 2usize..9,
                j in 1usize..4,
                q in 2usize..4,
                k in 1usize..4,
                r in 1usize..4,
                patches in 1usize..3,
                d_hidden in 2usize..6,
                d_mem in 1usize..4,
                horizon in 1usize..6,
            ) {
                let input_len = (1 << (k - 1)) * r * patches;
                let cfg = ModelConfig {
                    input_len,
                    horizon,
                    pooling_ratio: q,
                    spatial_scales: j,
                    temporal_scales: k,
                    patch_len: r,
                    hidden_dim: d_hidden,
                    memory_dim: d_mem,
                    memory_items: 3,
                    hyperedges: 3,
                    hyperedge_nodes: 2,
                    ..Default::default()
                };
                prop_assume!(cfg.validate(n).is_ok());
                let (model, store) = StHyper::new(&cfg, n).unwrap();
                let mut t = Tape::new();
                let b = store.bind(&mut t);
                let out = model.forward(&mut t, &b, &window(n, input_len), None).unwrap();
                let alpha = k * cfg.node_counts(n).iter().sum::<usize>();
                prop_assert_eq!(alpha, cfg.alpha(n));
                prop_assert_eq!(t.shape(out.x_hyper), (alpha, d_hidden + d_mem));
                prop_assert_eq!(t.shape(out.prediction), (n, horizon));
            }
        }
    }
}

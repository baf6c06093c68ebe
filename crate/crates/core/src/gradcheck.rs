//! Central finite-difference checks of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Tape, Var};
use crate::params::{Bound, ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct GradSample {
    pub param: String,
    pub index: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    /// Rounding bound of the central difference itself.
    pub noise: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub samples: Vec<GradSample>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.samples.iter().map(|s| s.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradSample> {
        self.samples.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// `max(|a - n| - noise, 0) / max(|a|, |n|, floor)`. `noise` is the part of
/// the difference a central difference cannot resolve; the floor keeps
/// entries whose true gradient is zero from dividing by it.
pub fn relative_error(analytic: f64, numeric: f64, noise: f64, floor: f64) -> f64 {
    ((analytic - numeric).abs() - noise).max(0.0) / analytic.abs().max(numeric.abs()).max(floor)
}

fn evaluate<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = store.bind_frozen(&mut tape);
    let out = f(&mut tape, &bound)?;
    Ok(tape.scalar_value(out))
}

/// Compares analytic gradients of the scalar built by `f` with central
/// differences on up to `per_param` random entries of every parameter
/// (all entries of smaller ones).
pub fn check_gradients<F>(store: &ParamStore, f: F, per_param: usize, step: f64, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let out = f(&mut tape, &bound)?;
    let mut grads = tape.backward(out);
    let analytic = bound.gradients(store, &mut grads);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = store.clone();
    let mut samples = Vec::new();
    let ids: Vec<ParamId> = store.ids().collect();
    for (pos, id) in ids.into_iter().enumerate() {
        let value = store.get(id);
        let cols = value.ncols();
        let picks = sample(&mut rng, value.len(), per_param.min(value.len())).into_vec();
        for flat in picks {
            let idx = (flat / cols, flat % cols);
            let orig = value[idx];
            probe.get_mut(id)[idx] = orig + step;
            let up = evaluate(&probe, &f)?;
            probe.get_mut(id)[idx] = orig - step;
            let down = evaluate(&probe, &f)?;
            probe.get_mut(id)[idx] = orig;
            let numeric = (up - down) / (2.0 * step);
            let noise = f64::EPSILON * (up.abs() + down.abs()) / (2.0 * step);
            let a = analytic[pos][idx];
            samples.push(GradSample {
                param: store.name(id).to_string(),
                index: idx,
                analytic: a,
                numeric,
                noise,
                rel_error: relative_error(a, numeric, noise, 1e-6),
            });
        }
    }
    Ok(GradCheckReport { samples })
}

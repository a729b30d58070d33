//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ParamKey, ParamStore, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Check at most this many coordinates, sampled without replacement.
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Only check parameters whose name starts with one of these prefixes.
    pub only: Option<Vec<String>>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { eps: 1e-5, max_coords: None, seed: 0, only: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest [`relative_error`] after discounting the difference
    /// quotient's rounding noise (see [`resolution`]).
    pub max_relative_error: f64,
    /// Undiscounted error at the worst coordinate.
    pub max_raw_relative_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    /// Coordinates whose ±eps perturbation flipped some ReLU pre-activation.
    pub skipped_kinks: usize,
    /// Coordinates whose gradient is zero on both sides up to roundoff
    /// (e.g. a key bias under softmax shift invariance).
    pub flat: usize,
}

/// Analytic gradients at or below this are roundoff around an exact zero.
pub const FLAT_ANALYTIC: f64 = 1e-10;
/// Central differences at `eps = 1e-5` resolve nothing finer than this.
pub const FLAT_NUMERIC: f64 = 1e-8;

/// `|g_a − g_n| / max(1e−8, |g_a| + |g_n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Rounding in each loss evaluation is about `ε_mach·|L|`, so a central
/// difference cannot pin a gradient down more finely than roughly
/// `ε_mach·|L| / eps`. This returns that bound times a safety factor of 2.
pub fn resolution(loss: f64, eps: f64) -> f64 {
    2.0 * f64::EPSILON * loss.abs().max(1.0) / eps
}

/// [`relative_error`] of the part of `|g_a − g_n|` that exceeds `resolution`.
pub fn resolved_relative_error(analytic: f64, numeric: f64, resolution: f64) -> f64 {
    ((analytic - numeric).abs() - resolution).max(0.0) / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares analytic gradients of `loss_fn` against central differences.
///
/// `loss_fn` records a forward pass on the given tape and returns a `1 x 1`
/// loss. Coordinates where the `+eps` and `−eps` evaluations disagree on the
/// sign of any ReLU pre-activation straddle a kink and are skipped.
/// Coordinates where both gradients vanish (see [`FLAT_ANALYTIC`],
/// [`FLAT_NUMERIC`]) are counted as `flat` instead of entering the relative
/// error, whose `1e−8` floor sits below central-difference roundoff. The
/// reported error discounts disagreement up to [`resolution`], which only
/// matters for gradients within a few orders of magnitude of it.
pub fn finite_diff_check<F>(store: &ParamStore, opts: &GradCheckOptions, loss_fn: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new(store);
    let loss = loss_fn(&mut tape)?;
    let base = tape.scalar(loss);
    if !base.is_finite() {
        return Err(Error::NonFinite(format!("loss {base}")));
    }
    let grads = tape.backward(loss)?;
    drop(tape);

    let mut coords: Vec<(ParamKey, usize)> = Vec::new();
    for (key, name, value) in store.iter() {
        if let Some(only) = &opts.only {
            if !only.iter().any(|p| name.starts_with(p.as_str())) {
                continue;
            }
        }
        coords.extend((0..value.data().len()).map(|i| (key, i)));
    }
    if let Some(max) = opts.max_coords {
        if coords.len() > max {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let mut picked: Vec<usize> = sample(&mut rng, coords.len(), max).into_vec();
            picked.sort_unstable();
            coords = picked.into_iter().map(|i| coords[i]).collect();
        }
    }

    let mut work = store.clone();
    let floor = resolution(base, opts.eps);
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        max_raw_relative_error: 0.0,
        worst: None,
        checked: 0,
        skipped_kinks: 0,
        flat: 0,
    };
    for (key, i) in coords {
        let original = work.get(key).data()[i];
        work.get_mut(key).data_mut()[i] = original + opts.eps;
        let (plus, pattern_plus) = eval(&work, &loss_fn)?;
        work.get_mut(key).data_mut()[i] = original - opts.eps;
        let (minus, pattern_minus) = eval(&work, &loss_fn)?;
        work.get_mut(key).data_mut()[i] = original;

        if pattern_plus != pattern_minus {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * opts.eps);
        let analytic = grads.value(key, i);
        if analytic.abs() <= FLAT_ANALYTIC && numeric.abs() <= FLAT_NUMERIC {
            report.flat += 1;
            continue;
        }
        let err = resolved_relative_error(analytic, numeric, floor);
        let raw = relative_error(analytic, numeric);
        report.checked += 1;
        if report.worst.is_none() || (err, raw) > (report.max_relative_error, report.max_raw_relative_error) {
            report.max_relative_error = err;
            report.max_raw_relative_error = raw;
            report.worst = Some((store.name(key).to_string(), i));
        }
    }
    Ok(report)
}

fn eval<F>(store: &ParamStore, loss_fn: &F) -> Result<(f64, Vec<bool>)>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new(store);
    let loss = loss_fn(&mut tape)?;
    let v = tape.scalar(loss);
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("perturbed loss {v}")));
    }
    Ok((v, tape.relu_pattern().to_vec()))
}

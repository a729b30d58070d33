//! Dense numeric kernel: matrices, parameters, reverse-mode tape, layers,
//! gradient checking and the AdamW optimizer.

mod gradcheck;
mod matrix;
pub mod nn;
mod optim;
mod params;
mod tape;

pub use gradcheck::{
    finite_diff_check, relative_error, GradCheckOptions, GradCheckReport, FLAT_ANALYTIC, FLAT_NUMERIC,
};
pub use matrix::FeatureMatrix;
pub use optim::{AdamW, AdamWConfig};
pub use params::{FfnParams, GateParams, LinearParams, MhaParams, ParamBuilder, ParamKey, ParamStore};
pub use tape::{sigmoid, Gradients, Tape, Var};

use rand::Rng;

use crate::error::Result;

// Eager forms of the layer operations. Each records on a throwaway tape so the
// value path is the same one the gradient checker exercises.

pub fn linear(store: &ParamStore, x: &FeatureMatrix, p: &LinearParams) -> Result<FeatureMatrix> {
    let mut t = Tape::new(store);
    let xv = t.constant(x.clone());
    let y = nn::linear(&mut t, xv, p)?;
    Ok(t.value(y).clone())
}

pub fn softmax_rows(x: &FeatureMatrix) -> FeatureMatrix {
    tape::softmax_rows_masked(x, None)
}

pub fn attention(
    store: &ParamStore,
    q_in: &FeatureMatrix,
    kv_in: &FeatureMatrix,
    p: &MhaParams,
    keep: Option<&[bool]>,
) -> Result<FeatureMatrix> {
    let mut t = Tape::new(store);
    let q = t.constant(q_in.clone());
    let kv = t.constant(kv_in.clone());
    let y = nn::attention(&mut t, q, kv, p, keep)?;
    Ok(t.value(y).clone())
}

pub fn ffn(store: &ParamStore, x: &FeatureMatrix, p: &FfnParams) -> Result<FeatureMatrix> {
    let mut t = Tape::new(store);
    let xv = t.constant(x.clone());
    let y = nn::ffn(&mut t, xv, p)?;
    Ok(t.value(y).clone())
}

/// Returns `(out, ω)`.
pub fn sigmoid_gate(
    store: &ParamStore,
    a: &FeatureMatrix,
    b: &FeatureMatrix,
    p: &GateParams,
) -> Result<(FeatureMatrix, FeatureMatrix)> {
    let mut t = Tape::new(store);
    let (av, bv) = (t.constant(a.clone()), t.constant(b.clone()));
    let (out, omega) = nn::sigmoid_gate(&mut t, av, bv, p)?;
    Ok((t.value(out).clone(), t.value(omega).clone()))
}

pub fn dropout<R: Rng + ?Sized>(x: &FeatureMatrix, rate: f64, rng: &mut R, training: bool) -> Result<FeatureMatrix> {
    let store = ParamStore::new();
    let mut t = Tape::new(&store);
    let xv = t.constant(x.clone());
    let y = nn::dropout(&mut t, xv, rate, rng, training)?;
    Ok(t.value(y).clone())
}

//! Object perception-enhancement: cross-attention of a context stream over a
//! reference stream, blended back into the context by an elementwise gate.
//!
//! TOPA enhances instruction features with the parsed object and action
//! phrases; IOPA enhances the fine-grained visual stream with the
//! object-level cross-modal features.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{nn, GateParams, MhaParams, ParamBuilder, Tape, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct OpeParams {
    pub mha: MhaParams,
    pub gate: GateParams,
}

impl OpeParams {
    pub fn build<R: Rng>(b: &mut ParamBuilder<'_, R>, name: &str, dim: usize, heads: usize) -> Result<Self> {
        b.scoped(name, |b| Ok(Self { mha: b.mha("mha", dim, heads)?, gate: b.gate("gate", dim) }))
    }
}

/// How the enhanced stream is merged back.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GateMode {
    /// `ω ⊙ enhanced + (1 − ω) ⊙ context`.
    #[default]
    Gated,
    /// Attention kept, gate dropped: the output is the enhanced stream.
    Ungated,
}

#[derive(Debug, Clone, Copy)]
pub struct OpeTrace {
    pub output: Var,
    /// `None` when the reference was empty and the block was bypassed.
    pub enhanced: Option<Var>,
    /// `None` when bypassed or ungated.
    pub omega: Option<Var>,
}

pub fn ope_block_traced(t: &mut Tape, context: Var, reference: Var, p: &OpeParams, mode: GateMode) -> Result<OpeTrace> {
    let (cs, rs) = (t.shape(context), t.shape(reference));
    if cs.1 != rs.1 {
        return Err(Error::ShapeMismatch { op: "ope_block", left: cs, right: rs });
    }
    if rs.0 == 0 || cs.0 == 0 {
        return Ok(OpeTrace { output: context, enhanced: None, omega: None });
    }
    let enhanced = nn::attention(t, context, reference, &p.mha, None)?;
    match mode {
        GateMode::Gated => {
            let (output, omega) = nn::sigmoid_gate(t, enhanced, context, &p.gate)?;
            Ok(OpeTrace { output, enhanced: Some(enhanced), omega: Some(omega) })
        }
        GateMode::Ungated => Ok(OpeTrace { output: enhanced, enhanced: Some(enhanced), omega: None }),
    }
}

/// Gated enhancement of `context` by `reference`. An empty reference returns
/// `context` itself.
pub fn ope_block(t: &mut Tape, context: Var, reference: Var, p: &OpeParams) -> Result<Var> {
    ope_block_traced(t, context, reference, p, GateMode::Gated).map(|tr| tr.output)
}

/// `A_f^I`: instruction features enhanced by `[E_o; E_a]`.
pub fn topa_with(t: &mut Tape, e_c: Var, e_o: Var, e_a: Var, p: &OpeParams, mode: GateMode) -> Result<OpeTrace> {
    let reference = match (t.rows(e_o), t.rows(e_a)) {
        (_, 0) => e_o,
        (0, _) => e_a,
        _ => t.concat_rows(&[e_o, e_a])?,
    };
    ope_block_traced(t, e_c, reference, p, mode)
}

pub fn topa(t: &mut Tape, e_c: Var, e_o: Var, e_a: Var, p: &OpeParams) -> Result<Var> {
    topa_with(t, e_c, e_o, e_a, p, GateMode::Gated).map(|tr| tr.output)
}

/// `A_f^R`: fine-grained visual features enhanced by `O̅_t`.
pub fn iopa_with(t: &mut Tape, f_t: Var, o_bar: Var, p: &OpeParams, mode: GateMode) -> Result<OpeTrace> {
    ope_block_traced(t, f_t, o_bar, p, mode)
}

pub fn iopa(t: &mut Tape, f_t: Var, o_bar: Var, p: &OpeParams) -> Result<Var> {
    iopa_with(t, f_t, o_bar, p, GateMode::Gated).map(|tr| tr.output)
}

//! Toy stand-ins for the pretrained encoders: token embedding with positions,
//! a small text transformer, descriptor projections, panorama self-attention,
//! pose embeddings and the two-stream cross-modal encoder.
//!
//! Every sub-block is residual and unnormalized, so zeroing a block's
//! parameters turns it into the identity.

use std::collections::HashMap;

use rand::Rng;

use crate::envsim::{Observation, D_RAW};
use crate::error::{Error, Result};
use crate::tensor::{nn, FeatureMatrix, FfnParams, LinearParams, MhaParams, ParamBuilder, ParamKey, Tape, Var};
use crate::textparse::ParsedInstruction;

pub const UNK: &str = "<unk>";
/// `[sin yaw, cos yaw, sin pitch, cos pitch, distance, steps]`.
pub const POSE_DIM: usize = 6;
const POSE_DISTANCE_SCALE: f64 = 10.0;
const POSE_STEP_SCALE: f64 = 15.0;

/// Word → row index, with row 0 reserved for unknown words.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Self { words: vec![UNK.to_string()], index: HashMap::new() };
        v.index.insert(UNK.to_string(), 0);
        for w in words {
            if !v.index.contains_key(w) {
                v.index.insert(w.to_string(), v.words.len());
                v.words.push(w.to_string());
            }
        }
        v
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(0)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub vocab: Vocab,
    /// `V x d`.
    pub table: ParamKey,
    /// `L_max x d`.
    pub positional: ParamKey,
    pub dim: usize,
    pub max_len: usize,
}

impl EmbeddingTable {
    pub fn build<R: Rng>(b: &mut ParamBuilder<'_, R>, vocab: Vocab, dim: usize, max_len: usize) -> Self {
        let table = b.uniform("embed.table", vocab.len(), dim, 0.5);
        let positional = b.uniform("embed.positional", max_len, dim, 0.1);
        Self { vocab, table, positional, dim, max_len }
    }
}

/// Embeds a phrase sequence: row `i` is the mean of its words' rows plus
/// `positional[i]`. A single-word phrase is just the word's row.
pub fn embed_phrases<S: AsRef<str>>(t: &mut Tape, phrases: &[S], emb: &EmbeddingTable) -> Result<Var> {
    let n = phrases.len();
    if n == 0 {
        return Ok(t.constant(FeatureMatrix::zeros(0, emb.dim)));
    }
    if n > emb.max_len {
        return Err(Error::SequenceTooLong { len: n, max: emb.max_len });
    }
    let mut select = FeatureMatrix::zeros(n, emb.vocab.len());
    for (i, phrase) in phrases.iter().enumerate() {
        let words: Vec<&str> = phrase.as_ref().split_whitespace().collect();
        let w = 1.0 / words.len().max(1) as f64;
        for word in words {
            let j = emb.vocab.id(word);
            select.set(i, j, select.get(i, j) + w);
        }
    }
    let select = t.constant(select);
    let table = t.param(emb.table);
    let rows = t.matmul(select, table)?;
    let positional = t.param(emb.positional);
    let pos = t.slice_rows(positional, 0, n)?;
    t.add(rows, pos)
}

/// `(E_I, E_o, E_a)`: the full instruction, its object phrases and its
/// action phrases, each with its own positions starting at 0.
pub fn embed_tokens(t: &mut Tape, parsed: &ParsedInstruction, emb: &EmbeddingTable) -> Result<(Var, Var, Var)> {
    Ok((
        embed_phrases(t, &parsed.tokens, emb)?,
        embed_phrases(t, &parsed.object_phrases, emb)?,
        embed_phrases(t, &parsed.action_phrases, emb)?,
    ))
}

/// Self-attention sub-block followed by a feedforward sub-block, both residual.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub attn: MhaParams,
    pub ffn: FfnParams,
}

impl EncoderLayer {
    pub fn build<R: Rng>(b: &mut ParamBuilder<'_, R>, name: &str, dim: usize, heads: usize) -> Result<Self> {
        b.scoped(name, |b| Ok(Self { attn: b.mha("attn", dim, heads)?, ffn: b.ffn("ffn", dim, 2 * dim, dim) }))
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Result<Var> {
        let a = nn::attention(t, x, x, &self.attn, None)?;
        let x = t.add(x, a)?;
        let f = nn::ffn(t, x, &self.ffn)?;
        t.add(x, f)
    }
}

pub fn build_stack<R: Rng>(
    b: &mut ParamBuilder<'_, R>,
    name: &str,
    layers: usize,
    dim: usize,
    heads: usize,
) -> Result<Vec<EncoderLayer>> {
    (0..layers).map(|i| EncoderLayer::build(b, &format!("{name}.{i}"), dim, heads)).collect()
}

/// Contextual language features `E_c` from the embedded instruction.
pub fn encode_text(t: &mut Tape, e_i: Var, layers: &[EncoderLayer]) -> Result<Var> {
    if t.rows(e_i) == 0 {
        return Err(Error::EmptyInput("instruction has no tokens"));
    }
    layers.iter().try_fold(e_i, |x, layer| layer.forward(t, x))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureProjection {
    pub view: LinearParams,
    pub object: LinearParams,
}

impl FeatureProjection {
    pub fn build<R: Rng>(b: &mut ParamBuilder<'_, R>, dim: usize) -> Self {
        Self { view: b.linear("features.view", D_RAW, dim), object: b.linear("features.object", D_RAW, dim) }
    }
}

fn descriptor_matrix<'a>(rows: impl ExactSizeIterator<Item = &'a Vec<f64>>) -> Result<FeatureMatrix> {
    let n = rows.len();
    let mut data = Vec::with_capacity(n * D_RAW);
    for r in rows {
        if r.len() != D_RAW {
            return Err(Error::ShapeMismatch { op: "raw descriptor", left: (1, r.len()), right: (1, D_RAW) });
        }
        data.extend_from_slice(r);
    }
    FeatureMatrix::from_vec(n, D_RAW, data)
}

/// `(R_t, O_t)`: projected view and object descriptors.
pub fn extract_features(t: &mut Tape, obs: &Observation, proj: &FeatureProjection) -> Result<(Var, Var)> {
    let views = descriptor_matrix(obs.viewpoints.iter().map(|v| &v.raw_descriptor))?;
    let objects = descriptor_matrix(obs.objects.iter().map(|o| &o.raw_descriptor))?;
    let (v, o) = (t.constant(views), t.constant(objects));
    Ok((nn::linear(t, v, &proj.view)?, nn::linear(t, o, &proj.object)?))
}

/// Self-attention over `[R_t; O_t]`, split back at the original boundary.
pub fn encode_panorama(t: &mut Tape, r: Var, o: Var, layers: &[EncoderLayer]) -> Result<(Var, Var)> {
    let (nr, no) = (t.rows(r), t.rows(o));
    if no == 0 {
        let r = layers.iter().try_fold(r, |x, layer| layer.forward(t, x))?;
        return Ok((r, o));
    }
    let x = t.concat_rows(&[r, o])?;
    let x = layers.iter().try_fold(x, |x, layer| layer.forward(t, x))?;
    Ok((t.slice_rows(x, 0, nr)?, t.slice_rows(x, nr, nr + no)?))
}

pub fn pose_code(yaw: f64, pitch: f64, distance: f64, steps: usize) -> [f64; POSE_DIM] {
    [
        yaw.sin(),
        yaw.cos(),
        pitch.sin(),
        pitch.cos(),
        distance / POSE_DISTANCE_SCALE,
        steps as f64 / POSE_STEP_SCALE,
    ]
}

/// Pose of one feature row: relative to the episode start and relative to
/// the current node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseRecord {
    pub start_relative: [f64; POSE_DIM],
    pub neighbor_relative: [f64; POSE_DIM],
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseEmbedParams {
    pub start: LinearParams,
    pub neighbor: LinearParams,
}

impl PoseEmbedParams {
    pub fn build<R: Rng>(b: &mut ParamBuilder<'_, R>, name: &str, dim: usize) -> Self {
        b.scoped(name, |b| Self { start: b.linear("start", POSE_DIM, dim), neighbor: b.linear("neighbor", POSE_DIM, dim) })
    }
}

/// `X + startRel(pose) + neighborRel(pose)`, row by row.
pub fn add_pose_embeddings(t: &mut Tape, x: Var, poses: &[PoseRecord], p: &PoseEmbedParams) -> Result<Var> {
    let (rows, _) = t.shape(x);
    if rows != poses.len() {
        return Err(Error::ShapeMismatch { op: "add_pose_embeddings", left: t.shape(x), right: (poses.len(), POSE_DIM) });
    }
    if rows == 0 {
        return Ok(x);
    }
    let code = |f: fn(&PoseRecord) -> &[f64; POSE_DIM]| {
        FeatureMatrix::from_vec(rows, POSE_DIM, poses.iter().flat_map(|p| f(p).iter().copied()).collect())
    };
    let s = t.constant(code(|p| &p.start_relative)?);
    let n = t.constant(code(|p| &p.neighbor_relative)?);
    let s = nn::linear(t, s, &p.start)?;
    let n = nn::linear(t, n, &p.neighbor)?;
    let x = t.add(x, s)?;
    t.add(x, n)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossModalLayer {
    /// Vision queries over text keys.
    pub vis_to_txt: MhaParams,
    /// Text queries over vision keys.
    pub txt_to_vis: MhaParams,
    pub vis_ffn: FfnParams,
    pub txt_ffn: FfnParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossModalParams {
    pub layers: Vec<CrossModalLayer>,
}

impl CrossModalParams {
    pub fn build<R: Rng>(
        b: &mut ParamBuilder<'_, R>,
        name: &str,
        layers: usize,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        b.scoped(name, |b| {
            let layers = (0..layers)
                .map(|i| {
                    b.scoped(&i.to_string(), |b| {
                        Ok(CrossModalLayer {
                            vis_to_txt: b.mha("vis_to_txt", dim, heads)?,
                            txt_to_vis: b.mha("txt_to_vis", dim, heads)?,
                            vis_ffn: b.ffn("vis_ffn", dim, 2 * dim, dim),
                            txt_ffn: b.ffn("txt_ffn", dim, 2 * dim, dim),
                        })
                    })
                })
                .collect::<Result<_>>()?;
            Ok(Self { layers })
        })
    }
}

/// Two-stream encoder. Both cross-attentions of a layer read that layer's
/// inputs. If either stream is empty there is nothing to attend to and both
/// pass through unchanged.
pub fn cross_modal_encode(t: &mut Tape, vis: Var, txt: Var, p: &CrossModalParams) -> Result<(Var, Var)> {
    if t.rows(vis) == 0 || t.rows(txt) == 0 {
        return Ok((vis, txt));
    }
    let (mut v, mut x) = (vis, txt);
    for layer in &p.layers {
        let va = nn::attention(t, v, x, &layer.vis_to_txt, None)?;
        let xa = nn::attention(t, x, v, &layer.txt_to_vis, None)?;
        let v1 = t.add(v, va)?;
        let x1 = t.add(x, xa)?;
        let vf = nn::ffn(t, v1, &layer.vis_ffn)?;
        let xf = nn::ffn(t, x1, &layer.txt_ffn)?;
        v = t.add(v1, vf)?;
        x = t.add(x1, xf)?;
    }
    Ok((v, x))
}

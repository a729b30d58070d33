//! The full agent: configuration, parameter layout, instruction encoding and
//! the versioned checkpoint format.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{
    build_stack, embed_tokens, encode_text, CrossModalParams, EmbeddingTable, EncoderLayer, FeatureProjection,
    PoseEmbedParams, Vocab,
};
use crate::error::{Error, Result};
use crate::ope::{topa_with, GateMode, OpeParams};
use crate::tensor::{FeatureMatrix, FfnParams, LinearParams, ParamBuilder, ParamKey, ParamStore, Tape, Var};
use crate::textparse::{Lexicon, ParsedInstruction};

pub const CHECKPOINT_FORMAT: u32 = 1;

/// Which enhancement blocks are switched off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    /// `A_f^I := E_c`.
    pub no_topa: bool,
    /// `A_f^R := f_t`.
    pub no_iopa: bool,
    /// Keep the OPE attention but drop its gate: output := enhanced.
    pub no_ope: bool,
}

impl Ablation {
    pub const FULL: Ablation = Ablation { no_topa: false, no_iopa: false, no_ope: false };
    pub const BASELINE: Ablation = Ablation { no_topa: true, no_iopa: true, no_ope: false };

    pub fn gate_mode(&self) -> GateMode {
        if self.no_ope {
            GateMode::Ungated
        } else {
            GateMode::Gated
        }
    }

    /// Short label such as `full`, `no_topa+no_iopa`.
    pub fn label(&self) -> String {
        let flags: Vec<&str> = [(self.no_topa, "no_topa"), (self.no_iopa, "no_iopa"), (self.no_ope, "no_ope")]
            .into_iter()
            .filter_map(|(on, name)| on.then_some(name))
            .collect();
        if flags.is_empty() {
            "full".into()
        } else {
            flags.join("+")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub text_layers: usize,
    pub pano_layers: usize,
    pub cross_layers: usize,
    pub max_len: usize,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { dim: 32, heads: 2, text_layers: 2, pano_layers: 2, cross_layers: 4, max_len: 64, ablation: Ablation::FULL }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::HeadsNotDivisible { dim: self.dim, heads: self.heads });
        }
        if self.max_len == 0 {
            return Err(Error::InvalidArgument("max_len must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub embed: EmbeddingTable,
    pub text: Vec<EncoderLayer>,
    pub topa: OpeParams,
    pub features: FeatureProjection,
    pub panorama: Vec<EncoderLayer>,
    pub object_pose: PoseEmbedParams,
    pub view_pose: PoseEmbedParams,
    pub node_pose: PoseEmbedParams,
    pub object_cross: CrossModalParams,
    pub fine_cross: CrossModalParams,
    pub iopa: OpeParams,
    pub fine_head: FfnParams,
    pub coarse_cross: CrossModalParams,
    pub coarse_head: FfnParams,
    /// Learned feature row standing for STOP in the coarse node matrix.
    pub stop_row: ParamKey,
    /// Shared score for global candidates outside the local action space.
    pub backtrack: ParamKey,
    /// `λ = δ(pooled · w + b)`.
    pub fusion: LinearParams,
    pub ground_head: FfnParams,
}

#[derive(Debug, Clone)]
pub struct DopeModel {
    pub config: ModelConfig,
    pub lexicon: Lexicon,
    pub store: ParamStore,
    pub params: ModelParams,
}

impl DopeModel {
    /// Freshly initialized model; a pure function of its arguments.
    pub fn new(config: ModelConfig, lexicon: Lexicon, seed: u64) -> Result<Self> {
        config.validate()?;
        lexicon.validate()?;
        let (d, h, cl) = (config.dim, config.heads, config.cross_layers);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = ParamBuilder::new(&mut store, &mut rng);
        let vocab = Vocab::new(lexicon.all_words());
        let params = ModelParams {
            embed: EmbeddingTable::build(&mut b, vocab, d, config.max_len),
            text: build_stack(&mut b, "text", config.text_layers, d, h)?,
            topa: OpeParams::build(&mut b, "topa", d, h)?,
            features: FeatureProjection::build(&mut b, d),
            panorama: build_stack(&mut b, "panorama", config.pano_layers, d, h)?,
            object_pose: PoseEmbedParams::build(&mut b, "pose.object", d),
            view_pose: PoseEmbedParams::build(&mut b, "pose.view", d),
            node_pose: PoseEmbedParams::build(&mut b, "pose.node", d),
            object_cross: CrossModalParams::build(&mut b, "object_cross", cl, d, h)?,
            fine_cross: CrossModalParams::build(&mut b, "fine_cross", cl, d, h)?,
            iopa: OpeParams::build(&mut b, "iopa", d, h)?,
            fine_head: b.ffn("fine_head", d, 2 * d, 1),
            coarse_cross: CrossModalParams::build(&mut b, "coarse_cross", cl, d, h)?,
            coarse_head: b.ffn("coarse_head", d, 2 * d, 1),
            stop_row: b.uniform("stop_row", 1, d, 0.5),
            backtrack: b.zeros("backtrack", 1, 1),
            fusion: b.linear("fusion", d, 1),
            ground_head: b.ffn("ground_head", d, 2 * d, 1),
        };
        Ok(Self { config, lexicon, store, params })
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    /// Encodes a parsed instruction: `E_c` from the text encoder and `A_f^I`
    /// from TOPA (or `E_c` itself when TOPA is ablated).
    pub fn encode_instruction(&self, t: &mut Tape, parsed: &ParsedInstruction) -> Result<InstructionEncoding> {
        let (e_i, e_o, e_a) = embed_tokens(t, parsed, &self.params.embed)?;
        let e_c = encode_text(t, e_i, &self.params.text)?;
        if self.config.ablation.no_topa {
            return Ok(InstructionEncoding { e_c, e_o, e_a, a_f: e_c, topa_omega: None });
        }
        let tr = topa_with(t, e_c, e_o, e_a, &self.params.topa, self.config.ablation.gate_mode())?;
        Ok(InstructionEncoding { e_c, e_o, e_a, a_f: tr.output, topa_omega: tr.omega })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let params = self
            .store
            .iter()
            .map(|(_, name, m)| (name.to_string(), ParamEntry { shape: [m.rows(), m.cols()], values: m.data().to_vec() }))
            .collect();
        Checkpoint { format: CHECKPOINT_FORMAT, config: self.config.clone(), lexicon: self.lexicon.clone(), params }
    }

    /// Rebuilds the model from a checkpoint. Every parameter must be present
    /// with its expected shape, and nothing extra may be present.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unsupported format {}", ckpt.format)));
        }
        let mut model = Self::new(ckpt.config.clone(), ckpt.lexicon.clone(), 0)?;
        if model.store.len() != ckpt.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, checkpoint has {}",
                model.store.len(),
                ckpt.params.len()
            )));
        }
        let keys: Vec<ParamKey> = model.store.keys().collect();
        for key in keys {
            let name = model.store.name(key).to_string();
            let entry = ckpt.params.get(&name).ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            let value = FeatureMatrix::from_vec(entry.shape[0], entry.shape[1], entry.values.clone())?;
            if !value.is_finite() {
                return Err(Error::Checkpoint(format!("parameter {name} has non-finite values")));
            }
            model.store.set(key, value).map_err(|e| Error::Checkpoint(format!("parameter {name}: {e}")))?;
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(&self.to_checkpoint())?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Self::from_checkpoint(&ckpt)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct InstructionEncoding {
    pub e_c: Var,
    pub e_o: Var,
    pub e_a: Var,
    /// `A_f^I`.
    pub a_f: Var,
    pub topa_omega: Option<Var>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub shape: [usize; 2],
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: u32,
    pub config: ModelConfig,
    pub lexicon: Lexicon,
    pub params: BTreeMap<String, ParamEntry>,
}

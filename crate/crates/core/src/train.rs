//! Imitation learning: teacher-forced single-step action prediction plus
//! object grounding, optimized with AdamW.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envsim::{derive_seed, EnvironmentGraph, Episode, EpisodeMode};
use crate::error::{Error, Result};
use crate::model::{DopeModel, ModelConfig};
use crate::policy::{select_action, ActionKey, DropoutCtl, TopoMap};
use crate::tensor::{finite_diff_check, AdamW, AdamWConfig, GradCheckOptions, GradCheckReport, Gradients, Tape, Var};
use crate::textparse::{parse_instruction, Lexicon};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    #[serde(flatten)]
    pub model: ModelConfig,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub dropout: f64,
    pub seed: u64,
    pub og_weight: f64,
    pub weight_decay: f64,
    /// Rescale each batch gradient to at most this global norm.
    pub clip_norm: Option<f64>,
    /// Finite-difference check of the episode loss before training.
    pub self_test: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            lr: 1e-3,
            epochs: 10,
            batch_size: 8,
            dropout: 0.7,
            seed: 0,
            og_weight: 1.0,
            weight_decay: 0.01,
            clip_norm: Some(5.0),
            self_test: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {} must be finite and non-negative", self.lr)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidDropout(self.dropout));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        if self.og_weight < 0.0 {
            return Err(Error::InvalidArgument("og_weight must be non-negative".into()));
        }
        Ok(())
    }
}

/// `−log softmax(fused)[gt]`.
pub fn sap_loss(t: &mut Tape, fused: Var, keys: &[ActionKey], gt: ActionKey) -> Result<Var> {
    let idx = keys.iter().position(|k| *k == gt).ok_or_else(|| Error::MissingTarget(format!("{gt:?}")))?;
    t.cross_entropy(fused, idx)
}

/// Cross-entropy over the object rows at the goal.
pub fn og_loss(t: &mut Tape, object_scores: Option<Var>, gt_object: usize) -> Result<Var> {
    let scores = object_scores.ok_or(Error::EmptyInput("no objects to ground"))?;
    if gt_object >= t.shape(scores).1 {
        return Err(Error::MissingTarget(format!("object {gt_object}")));
    }
    t.cross_entropy(scores, gt_object)
}

/// Teacher-forced loss of one episode on a tape.
#[derive(Debug, Clone, Copy)]
pub struct EpisodeLoss {
    pub loss: Var,
    pub steps: usize,
    /// Steps whose fused argmax equals the ground-truth action.
    pub correct: usize,
}

/// Rolls along `gt_path`, scoring every step against the next ground-truth
/// node (STOP at the end). The loss is the mean step cross-entropy plus
/// `og_weight` times the grounding cross-entropy at the goal.
pub fn episode_loss(
    model: &DopeModel,
    t: &mut Tape,
    env: &EnvironmentGraph,
    episode: &Episode,
    og_weight: f64,
    dropout: Option<(f64, &mut ChaCha8Rng)>,
) -> Result<EpisodeLoss> {
    if episode.gt_path.is_empty() {
        return Err(Error::EmptyInput("episode has an empty gt_path"));
    }
    let parsed = parse_instruction(&episode.instruction_text, &model.lexicon);
    let instr = model.encode_instruction(t, &parsed)?;
    let mut map = TopoMap::new(episode.start_node);
    let mut losses = Vec::with_capacity(episode.gt_path.len());
    let mut correct = 0;
    let mut dropout = dropout;
    let mut og = None;
    for (step, &node) in episode.gt_path.iter().enumerate() {
        let ctl = dropout.as_mut().map(|(rate, rng)| DropoutCtl { rate: *rate, rng: &mut **rng });
        let fwd = model.step(t, &instr, env, &mut map, node, step, ctl)?;
        let gt = episode.gt_path.get(step + 1).map_or(ActionKey::Stop, |&n| ActionKey::Node(n));
        if select_action(&fwd.keys, t.value(fwd.fused).data())? == gt {
            correct += 1;
        }
        losses.push(sap_loss(t, fwd.fused, &fwd.keys, gt)?);
        if gt == ActionKey::Stop && episode.mode == EpisodeMode::GoalOriented && og_weight > 0.0 {
            if let Some(idx) = episode.target_object_index(env) {
                og = Some(og_loss(t, fwd.object_scores, idx)?);
            }
        }
    }
    let steps = losses.len();
    let sap = t.concat_cols(&losses)?;
    let sap = t.sum_all(sap);
    let mut loss = t.affine(sap, 1.0 / steps as f64, 0.0);
    if let Some(og) = og {
        let og = t.affine(og, og_weight, 0.0);
        loss = t.add(loss, og)?;
    }
    Ok(EpisodeLoss { loss, steps, correct })
}

/// Fraction of teacher-forced steps where the model's argmax matches the
/// ground truth, at inference (no dropout).
pub fn teacher_forced_accuracy(model: &DopeModel, data: &[(&EnvironmentGraph, &Episode)]) -> Result<f64> {
    let (mut correct, mut total) = (0, 0);
    for (env, ep) in data {
        let mut t = Tape::new(&model.store);
        let el = episode_loss(model, &mut t, env, ep, 0.0, None)?;
        correct += el.correct;
        total += el.steps;
    }
    if total == 0 {
        return Err(Error::EmptyInput("no teacher-forced steps"));
    }
    Ok(correct as f64 / total as f64)
}

/// Checks analytic gradients of one episode's loss on a sample of
/// coordinates drawn from every parameter.
pub fn gradient_self_test(
    model: &DopeModel,
    env: &EnvironmentGraph,
    episode: &Episode,
    og_weight: f64,
    max_coords: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let opts = GradCheckOptions { max_coords: Some(max_coords), seed, ..Default::default() };
    finite_diff_check(&model.store, &opts, |t| Ok(episode_loss(model, t, env, episode, og_weight, None)?.loss))
}

pub const SELF_TEST_TOLERANCE: f64 = 1e-4;
const SELF_TEST_COORDS: usize = 48;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Teacher-forced accuracy measured during the (dropout) training pass.
    pub train_accuracy: f64,
    pub steps: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: DopeModel,
    pub history: Vec<EpochStats>,
    pub self_test: Option<GradCheckReport>,
}

/// Trains a fresh model. Deterministic in `cfg.seed`: episode order,
/// dropout masks and initialization all derive from it.
pub fn train_loop(
    data: &[(&EnvironmentGraph, &Episode)],
    cfg: &TrainConfig,
    lexicon: Lexicon,
    on_epoch: &mut dyn FnMut(&EpochStats),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyInput("training set"));
    }
    let model = DopeModel::new(cfg.model.clone(), lexicon, derive_seed(cfg.seed, 0x1417))?;
    train_model(model, data, cfg, on_epoch)
}

/// Continues training `model` with `cfg`'s optimizer settings.
pub fn train_model(
    mut model: DopeModel,
    data: &[(&EnvironmentGraph, &Episode)],
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochStats),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyInput("training set"));
    }
    let self_test = if cfg.self_test {
        let (env, ep) = data[0];
        let report = gradient_self_test(&model, env, ep, cfg.og_weight, SELF_TEST_COORDS, cfg.seed)?;
        if report.max_relative_error >= SELF_TEST_TOLERANCE {
            let worst = report.worst.as_ref().map_or_else(String::new, |(n, i)| format!("{n}[{i}]"));
            return Err(Error::GradientCheckFailed { error: report.max_relative_error, worst });
        }
        Some(report)
    } else {
        None
    };

    let adam_cfg = AdamWConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, ..Default::default() };
    let mut opt = AdamW::new(&model.store, adam_cfg);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64));
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut correct, mut steps) = (0.0, 0, 0);
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = Gradients::zeros_like(&model.store);
            for &i in batch {
                let (env, ep) = data[i];
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed ^ 0xD50F, (epoch * data.len() + i) as u64));
                let mut t = Tape::new(&model.store);
                let el = episode_loss(&model, &mut t, env, ep, cfg.og_weight, Some((cfg.dropout, &mut rng)))?;
                let value = t.scalar(el.loss);
                if !value.is_finite() {
                    return Err(Error::NonFinite(format!("loss {value} on episode {} in epoch {epoch}", ep.episode_id)));
                }
                grads.accumulate(&t.backward(el.loss)?);
                loss_sum += value;
                correct += el.correct;
                steps += el.steps;
            }
            grads.scale(1.0 / batch.len() as f64);
            if !grads.is_finite() {
                return Err(Error::NonFinite(format!("gradient in epoch {epoch}")));
            }
            if let Some(max) = cfg.clip_norm {
                let norm = grads.norm();
                if norm > max {
                    grads.scale(max / norm);
                }
            }
            opt.step(&mut model.store, &grads);
        }
        let stats = EpochStats {
            epoch,
            mean_loss: loss_sum / data.len() as f64,
            train_accuracy: correct as f64 / steps.max(1) as f64,
            steps,
        };
        on_epoch(&stats);
        history.push(stats);
    }
    Ok(TrainOutcome { model, history, self_test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::FeatureMatrix;

    #[test]
    fn sap_loss_uniform_is_ln_k() {
        let store = crate::tensor::ParamStore::new();
        let mut t = Tape::new(&store);
        let keys = [ActionKey::Stop, ActionKey::Node(1), ActionKey::Node(2)];
        let s = t.constant(FeatureMatrix::row_vector(vec![0.4; 3]));
        let l = sap_loss(&mut t, s, &keys, ActionKey::Node(2)).unwrap();
        assert!((t.scalar(l) - 3f64.ln()).abs() < 1e-12);
        assert!(matches!(sap_loss(&mut t, s, &keys, ActionKey::Node(5)), Err(Error::MissingTarget(_))));
    }

    #[test]
    fn og_loss_requires_objects() {
        let store = crate::tensor::ParamStore::new();
        let mut t = Tape::new(&store);
        assert!(og_loss(&mut t, None, 0).is_err());
        let s = t.constant(FeatureMatrix::row_vector(vec![0.0, 0.0]));
        assert!(og_loss(&mut t, Some(s), 2).is_err());
        let l = og_loss(&mut t, Some(s), 1).unwrap();
        assert!((t.scalar(l) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { dropout: 1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { lr: -1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn config_json_is_flat() {
        let v = serde_json::to_value(TrainConfig::default()).unwrap();
        assert_eq!(v["dim"], 32);
        assert_eq!(v["dropout"], 0.7);
        let back: TrainConfig = serde_json::from_str(r#"{"dim": 16, "epochs": 2}"#).unwrap();
        assert_eq!((back.model.dim, back.epochs, back.model.heads), (16, 2, 2));
    }
}

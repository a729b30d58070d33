//! Browser bindings. The [`Session`] logic is plain Rust and returns JSON
//! values; the `wasm_bindgen` wrappers only convert to strings for the page.

use dope::envsim::{generate_suite, EpisodeMode, Suite, SuiteConfig};
use dope::evalmetrics::episode_metrics;
use dope::model::{DopeModel, ModelConfig};
use dope::policy::{run_episode, ActionKey, DropoutCtl};
use dope::tensor::{FeatureMatrix, Tape};
use dope::textparse::{parse_instruction, Lexicon};
use dope::train::{train_model, EpochStats, TrainConfig};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

fn model_config() -> ModelConfig {
    ModelConfig { dim: 16, heads: 2, text_layers: 1, pano_layers: 1, cross_layers: 1, max_len: 64, ..Default::default() }
}

pub struct Session {
    suite: Suite,
    model: DopeModel,
    history: Vec<EpochStats>,
    rounds: u64,
    seed: u64,
}

impl Session {
    pub fn new(seed: u64) -> dope::Result<Self> {
        let suite = generate_suite(&SuiteConfig {
            seed,
            num_envs: 2,
            num_nodes: 14,
            episodes_per_env: 8,
            mode: EpisodeMode::GoalOriented,
            ..Default::default()
        })?;
        let model = DopeModel::new(model_config(), Lexicon::default(), seed)?;
        Ok(Self { suite, model, history: Vec::new(), rounds: 0, seed })
    }

    pub fn num_episodes(&self) -> usize {
        self.suite.episodes.len()
    }

    /// Continues training the current model for `epochs` more epochs.
    pub fn train(&mut self, epochs: usize) -> dope::Result<Value> {
        let cfg = TrainConfig {
            model: model_config(),
            epochs,
            lr: 5e-3,
            dropout: 0.1,
            seed: self.seed.wrapping_add(self.rounds),
            self_test: false,
            ..Default::default()
        };
        let data = self.suite.pairs()?;
        let offset = self.history.len();
        let out = train_model(self.model.clone(), &data, &cfg, &mut |_| {})?;
        self.model = out.model;
        self.rounds += 1;
        self.history.extend(out.history.into_iter().map(|s| EpochStats { epoch: s.epoch + offset, ..s }));
        Ok(json!({
            "history": self.history.iter().map(|s| json!({
                "epoch": s.epoch,
                "loss": s.mean_loss,
                "accuracy": s.train_accuracy,
            })).collect::<Vec<_>>(),
        }))
    }

    /// Rolls out one episode and returns everything the page draws.
    pub fn episode(&self, index: usize) -> dope::Result<Value> {
        let ep = self
            .suite
            .episodes
            .get(index)
            .ok_or_else(|| dope::Error::InvalidArgument(format!("episode {index} of {}", self.num_episodes())))?;
        let env = self.suite.env(ep.env_id)?;
        let log = run_episode(&self.model, env, ep)?;
        let metrics = episode_metrics(&log, ep, env)?;
        let parsed = parse_instruction(&ep.instruction_text, &self.model.lexicon);

        // Gate values from the first step: TOPA per instruction token, IOPA
        // per view and object.
        let mut t = Tape::new(&self.model.store);
        let instr = self.model.encode_instruction(&mut t, &parsed)?;
        let mut map = dope::policy::TopoMap::new(ep.start_node);
        let first = self.model.step(&mut t, &instr, env, &mut map, ep.start_node, 0, None::<DropoutCtl<'_, ChaCha8Rng>>)?;
        let heat = |v: Option<dope::tensor::Var>, labels: Vec<String>| -> Value {
            match v {
                Some(v) => {
                    let m: &FeatureMatrix = t.value(v);
                    json!({
                        "rows": labels,
                        "values": (0..m.rows()).map(|r| m.row(r).to_vec()).collect::<Vec<_>>(),
                    })
                }
                None => Value::Null,
            }
        };
        let views = (0..first.obs.viewpoints.len()).map(|i| format!("view {i}"));
        let objects = first.obs.objects.iter().map(|o| o.category.clone());

        Ok(json!({
            "env": {
                "nodes": env.nodes().iter().enumerate().map(|(i, n)| json!({
                    "id": i,
                    "x": n.position[0],
                    "y": n.position[1],
                    "objects": n.objects.iter().map(|o| o.category.as_str()).collect::<Vec<_>>(),
                })).collect::<Vec<_>>(),
                "edges": env.edges(),
            },
            "episode": {
                "id": ep.episode_id,
                "instruction": ep.instruction_text,
                "start": ep.start_node,
                "goal": ep.goal_node,
                "target": ep.target_category,
                "gt_path": ep.gt_path,
            },
            "parsed": parsed,
            "trajectory": {
                "nodes": log.nodes,
                "grounded_object": log.grounded_object,
                "steps": log.steps.iter().map(|s| json!({
                    "node": s.node,
                    "lambda": s.scores.lambda,
                    "action": match s.action { ActionKey::Stop => "STOP".to_string(), ActionKey::Node(n) => n.to_string() },
                })).collect::<Vec<_>>(),
            },
            "metrics": metrics,
            "topa_omega": heat(instr.topa_omega, parsed.tokens.clone()),
            "iopa_omega": heat(first.iopa_omega, views.chain(objects).collect()),
        }))
    }
}

pub fn parse_to_json(text: &str) -> Value {
    json!(parse_instruction(text, &Lexicon::default()))
}

fn js_err(e: dope::Error) -> JsValue {
    JsValue::from_str(&json!({ "kind": e.kind(), "message": e.to_string() }).to_string())
}

#[wasm_bindgen]
pub fn parse(text: &str) -> String {
    parse_to_json(text).to_string()
}

#[wasm_bindgen]
pub struct Demo {
    inner: Session,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> Result<Demo, JsValue> {
        Session::new(seed as u64).map(|inner| Demo { inner }).map_err(js_err)
    }

    #[wasm_bindgen(js_name = numEpisodes)]
    pub fn num_episodes(&self) -> usize {
        self.inner.num_episodes()
    }

    pub fn train(&mut self, epochs: u32) -> Result<String, JsValue> {
        self.inner.train(epochs as usize).map(|v| v.to_string()).map_err(js_err)
    }

    pub fn episode(&self, index: u32) -> Result<String, JsValue> {
        self.inner.episode(index as usize).map(|v| v.to_string()).map_err(js_err)
    }
}

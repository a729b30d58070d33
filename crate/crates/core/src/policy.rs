//! Topological map, dual-scale action scoring, fusion, action selection,
//! object grounding and the episode rollout loop.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{
    add_pose_embeddings, cross_modal_encode, encode_panorama, extract_features, pose_code, PoseRecord,
};
use crate::envsim::{
    heading_between, observe, shortest_path_tree_within, EnvironmentGraph, Episode, EpisodeMode, NodeId, Observation,
};
use crate::error::{Error, Result};
use crate::model::{DopeModel, InstructionEncoding};
use crate::ope::iopa_with;
use crate::tensor::{nn, sigmoid, FeatureMatrix, FfnParams, LinearParams, Tape, Var};
use crate::textparse::parse_instruction;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKey {
    Stop,
    Node(NodeId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeState {
    Current,
    Visited,
    Navigable,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapNode {
    pub state: NodeState,
    /// Pooled `A_f^R` view feature from the latest visit (`1 x d`).
    pub feature: Option<FeatureMatrix>,
    /// The same feature as recorded on the rollout's tape, so later steps
    /// backpropagate into earlier visits. Only meaningful on that tape.
    pub feature_var: Option<Var>,
    /// Step of the latest visit.
    pub visit_step: Option<usize>,
}

/// Current, visited and navigable nodes seen so far in one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct TopoMap {
    start: NodeId,
    current: Option<NodeId>,
    nodes: BTreeMap<NodeId, MapNode>,
}

impl TopoMap {
    pub fn new(start: NodeId) -> Self {
        Self { start, current: None, nodes: BTreeMap::new() }
    }

    pub fn start(&self) -> NodeId {
        self.start
    }

    pub fn current(&self) -> Option<NodeId> {
        self.current
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn get(&self, id: NodeId) -> Option<&MapNode> {
        self.nodes.get(&id)
    }

    pub fn state(&self, id: NodeId) -> Option<NodeState> {
        self.nodes.get(&id).map(|n| n.state)
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &MapNode)> {
        self.nodes.iter().map(|(&id, n)| (id, n))
    }

    pub fn with_state(&self, state: NodeState) -> Vec<NodeId> {
        self.iter().filter(|(_, n)| n.state == state).map(|(id, _)| id).collect()
    }

    /// Current or visited.
    pub fn is_explored(&self, id: NodeId) -> bool {
        matches!(self.state(id), Some(NodeState::Current | NodeState::Visited))
    }

    /// Every global move target: all mapped nodes except the current one.
    pub fn candidates(&self) -> Vec<NodeId> {
        self.iter().filter(|(_, n)| n.state != NodeState::Current).map(|(id, _)| id).collect()
    }

    /// Marks `obs.node` current (demoting the previous current node to
    /// visited), stores its pooled feature and adds unseen neighbors as
    /// navigable.
    pub fn update(&mut self, obs: &Observation, pooled: FeatureMatrix, step: usize) {
        self.update_inner(obs, pooled, None, step);
    }

    /// [`TopoMap::update`] that also remembers the tape variable of the
    /// pooled feature.
    pub fn update_on_tape(&mut self, t: &Tape, obs: &Observation, pooled: Var, step: usize) {
        self.update_inner(obs, t.value(pooled).clone(), Some(pooled), step);
    }

    fn update_inner(&mut self, obs: &Observation, pooled: FeatureMatrix, var: Option<Var>, step: usize) {
        if let Some(prev) = self.current.replace(obs.node) {
            if let Some(n) = self.nodes.get_mut(&prev) {
                n.state = NodeState::Visited;
            }
        }
        let entry = self.nodes.entry(obs.node).or_insert(MapNode { state: NodeState::Current, feature: None, feature_var: None, visit_step: None });
        entry.state = NodeState::Current;
        entry.feature = Some(pooled);
        entry.feature_var = var;
        entry.visit_step = Some(step);
        for n in &obs.neighbors {
            self.nodes.entry(n.id).or_insert(MapNode { state: NodeState::Navigable, feature: None, feature_var: None, visit_step: None });
        }
    }
}

pub fn update_topo_map(mut map: TopoMap, obs: &Observation, pooled: FeatureMatrix, step: usize) -> TopoMap {
    map.update(obs, pooled, step);
    map
}

/// Score vectors of one decision step. `keys` index `global`, `lifted` and
/// `fused`; `local_keys` index `local`. STOP comes first in both.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionScores {
    pub keys: Vec<ActionKey>,
    pub global: Vec<f64>,
    pub local_keys: Vec<ActionKey>,
    pub local: Vec<f64>,
    pub lifted: Vec<f64>,
    pub fused: Vec<f64>,
    pub lambda: f64,
}

/// Argmax with deterministic ties: the smallest node id wins and STOP loses
/// to any node.
pub fn select_action(keys: &[ActionKey], scores: &[f64]) -> Result<ActionKey> {
    if keys.is_empty() || keys.len() != scores.len() {
        return Err(Error::InvalidArgument(format!("{} keys for {} scores", keys.len(), scores.len())));
    }
    let mut best = 0;
    for i in 1..keys.len() {
        let better = scores[i] > scores[best]
            || (scores[i] == scores[best]
                && match (keys[i], keys[best]) {
                    (ActionKey::Node(_), ActionKey::Stop) => true,
                    (ActionKey::Node(a), ActionKey::Node(b)) => a < b,
                    _ => false,
                });
        if better {
            best = i;
        }
    }
    Ok(keys[best])
}

/// Value-level lifting: neighbors and STOP keep their local score, every
/// other candidate gets `backtrack`.
pub fn lift_local_to_global(local_keys: &[ActionKey], local: &[f64], keys: &[ActionKey], backtrack: f64) -> Vec<f64> {
    keys.iter()
        .map(|k| local_keys.iter().position(|l| l == k).map_or(backtrack, |i| local[i]))
        .collect()
}

/// Value-level fusion `λ·global + (1−λ)·lifted`.
pub fn fuse_scores(global: &[f64], lifted: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if global.len() != lifted.len() {
        return Err(Error::ShapeMismatch { op: "fuse_scores", left: (1, global.len()), right: (1, lifted.len()) });
    }
    Ok(global.iter().zip(lifted).map(|(g, l)| lambda * g + (1.0 - lambda) * l).collect())
}

/// `λ = δ(w·pooled + b)`.
pub fn fusion_weight(pooled: &[f64], w: &FeatureMatrix, b: f64) -> f64 {
    sigmoid(pooled.iter().zip(w.data()).map(|(x, w)| x * w).sum::<f64>() + b)
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> Option<usize> {
    (0..scores.len()).fold(None, |best, i| match best {
        Some(b) if scores[b] >= scores[i] => Some(b),
        _ => Some(i),
    })
}

/// Local scores: one FFN score per view row, neighbor = its view's score,
/// STOP = the FFN on the mean of all rows. Returns `(keys, 1 x (m+1))`.
pub fn fine_scores(
    t: &mut Tape,
    a_f_r: Var,
    num_views: usize,
    obs: &Observation,
    head: &FfnParams,
) -> Result<(Vec<ActionKey>, Var)> {
    let views = t.slice_rows(a_f_r, 0, num_views)?;
    let per_view = nn::ffn(t, views, head)?;
    let pooled = t.mean_rows(a_f_r);
    let stop = nn::ffn(t, pooled, head)?;
    let mut neighbors: Vec<(NodeId, usize)> = obs.neighbors.iter().map(|n| (n.id, n.view_index)).collect();
    neighbors.sort_unstable();
    let mut keys = vec![ActionKey::Stop];
    let mut picks = vec![(stop, 0, 0)];
    for (id, view) in neighbors {
        keys.push(ActionKey::Node(id));
        picks.push((per_view, view, 0));
    }
    Ok((keys, t.gather(&picks)?))
}

/// Lifted scores on the tape, aligned with `keys`.
pub fn lift_scores(t: &mut Tape, local_keys: &[ActionKey], local: Var, keys: &[ActionKey], backtrack: Var) -> Result<Var> {
    let picks: Vec<(Var, usize, usize)> = keys
        .iter()
        .map(|k| match local_keys.iter().position(|l| l == k) {
            Some(i) => (local, 0, i),
            None => (backtrack, 0, 0),
        })
        .collect();
    t.gather(&picks)
}

/// `(fused, λ)` on the tape.
pub fn fuse(t: &mut Tape, global: Var, lifted: Var, pooled: Var, fusion: &LinearParams) -> Result<(Var, Var)> {
    let z = nn::linear(t, pooled, fusion)?;
    let lambda = t.sigmoid(z);
    let diff = t.sub(global, lifted)?;
    let scaled = t.scale_by(diff, lambda)?;
    Ok((t.add(lifted, scaled)?, lambda))
}

/// Object scores (`1 x n_obj`) for the object rows of `A_f^R`, or `None`
/// when there are no objects.
pub fn object_scores(t: &mut Tape, a_f_r: Var, num_views: usize, head: &FfnParams) -> Result<Option<Var>> {
    let rows = t.rows(a_f_r);
    if rows == num_views {
        return Ok(None);
    }
    let objects = t.slice_rows(a_f_r, num_views, rows)?;
    let s = nn::ffn(t, objects, head)?;
    let picks: Vec<(Var, usize, usize)> = (0..rows - num_views).map(|i| (s, i, 0)).collect();
    Ok(Some(t.gather(&picks)?))
}

/// The argmax object's index and category.
pub fn ground_object(scores: Option<&FeatureMatrix>, obs: &Observation) -> Option<(usize, String)> {
    let i = argmax(scores?.data())?;
    obs.objects.get(i).map(|o| (i, o.category.clone()))
}

/// Everything one decision step recorded on the tape.
#[derive(Debug, Clone)]
pub struct StepForward {
    pub obs: Observation,
    pub keys: Vec<ActionKey>,
    pub local_keys: Vec<ActionKey>,
    pub global: Var,
    pub local: Var,
    pub lifted: Var,
    pub fused: Var,
    pub lambda: Var,
    pub object_scores: Option<Var>,
    /// `A_f^R`: views then objects.
    pub a_f_r: Var,
    pub iopa_omega: Option<Var>,
}

impl StepForward {
    pub fn scores(&self, t: &Tape) -> ActionScores {
        ActionScores {
            keys: self.keys.clone(),
            global: t.value(self.global).data().to_vec(),
            local_keys: self.local_keys.clone(),
            local: t.value(self.local).data().to_vec(),
            lifted: t.value(self.lifted).data().to_vec(),
            fused: t.value(self.fused).data().to_vec(),
            lambda: t.scalar(self.lambda),
        }
    }
}

/// Feature dropout during training; `None` means inference.
pub struct DropoutCtl<'r, R: Rng> {
    pub rate: f64,
    pub rng: &'r mut R,
}

fn relative_pose(env: &EnvironmentGraph, from: NodeId, to: NodeId, steps: usize) -> [f64; 6] {
    let (p, q) = (env.nodes()[from].position, env.nodes()[to].position);
    pose_code(heading_between(p, q), 0.0, env.distance(from, to), steps)
}

impl DopeModel {
    /// One decision step at `node`: encode the panorama, run both
    /// enhancement branches, update the map and score every action.
    pub fn step<R: Rng>(
        &self,
        t: &mut Tape,
        instr: &InstructionEncoding,
        env: &EnvironmentGraph,
        map: &mut TopoMap,
        node: NodeId,
        step: usize,
        dropout: Option<DropoutCtl<'_, R>>,
    ) -> Result<StepForward> {
        let p = &self.params;
        let ablation = self.config.ablation;
        let obs = observe(env, node)?;
        let num_views = obs.viewpoints.len();
        let (mut r, mut o) = extract_features(t, &obs, &p.features)?;
        if let Some(ctl) = dropout {
            r = nn::dropout(t, r, ctl.rate, ctl.rng, true)?;
            o = nn::dropout(t, o, ctl.rate, ctl.rng, true)?;
        }
        let (r_enc, o_enc) = encode_panorama(t, r, o, &p.panorama)?;

        let start_pose = relative_pose(env, map.start(), node, step);
        let view_poses: Vec<PoseRecord> = obs
            .viewpoints
            .iter()
            .enumerate()
            .map(|(k, v)| {
                let dist = obs.neighbors.iter().find(|n| n.view_index == k).map_or(0.0, |n| n.distance);
                PoseRecord { start_relative: start_pose, neighbor_relative: pose_code(v.heading, v.pitch, dist, step) }
            })
            .collect();
        let object_poses: Vec<PoseRecord> = obs
            .objects
            .iter()
            .map(|ob| {
                let v = &obs.viewpoints[ob.viewpoint_index];
                PoseRecord { start_relative: start_pose, neighbor_relative: pose_code(v.heading, v.pitch, 0.0, step) }
            })
            .collect();

        // Object branch: O̅_t from raw object features against object phrases.
        let o_posed = add_pose_embeddings(t, o, &object_poses, &p.object_pose)?;
        let (o_bar, _) = cross_modal_encode(t, o_posed, instr.e_o, &p.object_cross)?;

        // Fine branch: f_t from the encoded panorama against A_f^I.
        let r_posed = add_pose_embeddings(t, r_enc, &view_poses, &p.view_pose)?;
        let o_posed = add_pose_embeddings(t, o_enc, &object_poses, &p.object_pose)?;
        let pano = if obs.objects.is_empty() { r_posed } else { t.concat_rows(&[r_posed, o_posed])? };
        let (f_t, _) = cross_modal_encode(t, pano, instr.a_f, &p.fine_cross)?;
        let (a_f_r, iopa_omega) = if ablation.no_iopa {
            (f_t, None)
        } else {
            let tr = iopa_with(t, f_t, o_bar, &p.iopa, ablation.gate_mode())?;
            (tr.output, tr.omega)
        };

        let views = t.slice_rows(a_f_r, 0, num_views)?;
        let pooled = t.mean_rows(views);
        map.update_on_tape(t, &obs, pooled, step);

        let (local_keys, local) = fine_scores(t, a_f_r, num_views, &obs, &p.fine_head)?;
        let (keys, global) = self.coarse_scores(t, map, env, node, pooled, instr.a_f, step)?;
        let backtrack = t.param(p.backtrack);
        let lifted = lift_scores(t, &local_keys, local, &keys, backtrack)?;
        let (fused, lambda) = fuse(t, global, lifted, pooled, &p.fusion)?;
        let object_scores = object_scores(t, a_f_r, num_views, &p.ground_head)?;
        Ok(StepForward { obs, keys, local_keys, global, local, lifted, fused, lambda, object_scores, a_f_r, iopa_omega })
    }

    /// Global scores over STOP and every mapped node except the current one.
    /// Node rows are the stored pooled features of explored nodes (the
    /// current node uses this step's live feature) and zeros for navigable
    /// ones, plus pose embeddings.
    #[allow(clippy::too_many_arguments)]
    pub fn coarse_scores(
        &self,
        t: &mut Tape,
        map: &TopoMap,
        env: &EnvironmentGraph,
        current: NodeId,
        current_pooled: Var,
        txt: Var,
        step: usize,
    ) -> Result<(Vec<ActionKey>, Var)> {
        let p = &self.params;
        let d = self.config.dim;
        let mut rows = Vec::with_capacity(map.len());
        let mut poses = Vec::with_capacity(map.len());
        let mut keys = vec![ActionKey::Stop];
        let mut picks_rows = vec![0usize];
        for (i, (id, n)) in map.iter().enumerate() {
            let row = match (id == current, n.feature_var) {
                (true, _) => current_pooled,
                (false, Some(v)) => v,
                (false, None) => t.constant(n.feature.clone().unwrap_or_else(|| FeatureMatrix::zeros(1, d))),
            };
            rows.push(row);
            poses.push(PoseRecord {
                start_relative: relative_pose(env, map.start(), id, step),
                neighbor_relative: relative_pose(env, current, id, step),
            });
            if id != current {
                keys.push(ActionKey::Node(id));
                picks_rows.push(i + 1);
            }
        }
        let nodes = t.concat_rows(&rows)?;
        let nodes = add_pose_embeddings(t, nodes, &poses, &p.node_pose)?;
        let stop = t.param(p.stop_row);
        let all = t.concat_rows(&[stop, nodes])?;
        let (p_hat, _) = cross_modal_encode(t, all, txt, &p.coarse_cross)?;
        let s = nn::ffn(t, p_hat, &p.coarse_head)?;
        let picks: Vec<(Var, usize, usize)> = picks_rows.into_iter().map(|r| (s, r, 0)).collect();
        Ok((keys, t.gather(&picks)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    StopAction,
    StepLimit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub node: NodeId,
    pub scores: ActionScores,
    pub action: ActionKey,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryLog {
    pub episode_id: usize,
    pub env_id: usize,
    /// Every node passed through, including intermediate nodes of
    /// backtracking moves.
    pub nodes: Vec<NodeId>,
    pub steps: Vec<StepRecord>,
    pub grounded_object: Option<String>,
    pub grounded_index: Option<usize>,
    pub stop_reason: StopReason,
}

impl TrajectoryLog {
    pub fn final_node(&self) -> NodeId {
        *self.nodes.last().expect("trajectory starts at the start node")
    }
}

/// Called before each action with the step index and scores; returning
/// `Some` overrides the model's choice.
pub type ActionOverride<'a> = dyn FnMut(usize, &ActionScores) -> Option<ActionKey> + 'a;

pub fn run_episode(model: &DopeModel, env: &EnvironmentGraph, episode: &Episode) -> Result<TrajectoryLog> {
    run_episode_with(model, env, episode, &mut |_, _| None)
}

/// Greedy rollout. Terminates on STOP or after `max_steps` moves; a move
/// to a non-adjacent node walks the shortest route through explored nodes.
pub fn run_episode_with(
    model: &DopeModel,
    env: &EnvironmentGraph,
    episode: &Episode,
    hook: &mut ActionOverride<'_>,
) -> Result<TrajectoryLog> {
    let parsed = parse_instruction(&episode.instruction_text, &model.lexicon);
    let mut t = Tape::new(&model.store);
    let instr = model.encode_instruction(&mut t, &parsed)?;
    let mut map = TopoMap::new(episode.start_node);
    let mut nodes = vec![episode.start_node];
    let mut steps = Vec::new();
    let mut current = episode.start_node;
    let mut step = 0;
    let (fwd, reason) = loop {
        let fwd = model.step(&mut t, &instr, env, &mut map, current, step, None::<DropoutCtl<'_, rand_chacha::ChaCha8Rng>>)?;
        if step >= episode.max_steps {
            break (fwd, StopReason::StepLimit);
        }
        let scores = fwd.scores(&t);
        let action = match hook(step, &scores) {
            Some(a) => a,
            None => select_action(&scores.keys, &scores.fused)?,
        };
        steps.push(StepRecord { node: current, scores, action });
        match action {
            ActionKey::Stop => break (fwd, StopReason::StopAction),
            ActionKey::Node(target) => {
                let route = route_through_explored(env, &map, current, target)?;
                nodes.extend_from_slice(&route[1..]);
                current = target;
            }
        }
        step += 1;
    };
    let grounded = match episode.mode {
        EpisodeMode::GoalOriented => ground_object(fwd.object_scores.map(|v| t.value(v)), &fwd.obs),
        EpisodeMode::PathOriented => None,
    };
    Ok(TrajectoryLog {
        episode_id: episode.episode_id,
        env_id: episode.env_id,
        nodes,
        steps,
        grounded_index: grounded.as_ref().map(|g| g.0),
        grounded_object: grounded.map(|g| g.1),
        stop_reason: reason,
    })
}

/// Walk from `from` to a mapped `target`, using only explored nodes in
/// between.
pub fn route_through_explored(env: &EnvironmentGraph, map: &TopoMap, from: NodeId, target: NodeId) -> Result<Vec<NodeId>> {
    if map.state(target).is_none() {
        return Err(Error::InvalidArgument(format!("node {target} is not on the map")));
    }
    if env.has_edge(from, target) {
        return Ok(vec![from, target]);
    }
    let tree = shortest_path_tree_within(env, from, |v| v == target || map.is_explored(v))?;
    tree.path_to(target).ok_or_else(|| Error::InvalidArgument(format!("node {target} unreachable through explored nodes")))
}

//! Synthetic discrete indoor worlds.
//!
//! An environment is an undirected graph of panorama nodes laid out in the
//! plane. Each node carries `n` viewpoint descriptors and a few annotated
//! objects. Every descriptor is a 16-dimensional code: twelve category
//! channels followed by four pose/position channels, plus small seeded noise.
//!
//! A viewpoint that faces a neighbor "sees down the corridor": its category
//! channels hold, for each category, the strongest `0.85^(hops-1)` over the
//! objects whose shortest path from this node leaves through that neighbor.
//! That makes the direction toward a named object learnable from the views
//! alone.

use std::collections::BTreeSet;
use std::f64::consts::TAU;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::textparse::{OBJECT_CATEGORIES, ROOM_TYPES};

pub type NodeId = usize;

/// Width of every raw view/object descriptor.
pub const D_RAW: usize = 16;
pub const NUM_CATEGORIES: usize = OBJECT_CATEGORIES.len();
pub const DEFAULT_VIEWS: usize = 6;
pub const DEFAULT_MAX_STEPS: usize = 15;
pub const MIN_EDGE_M: f64 = 1.5;
pub const MAX_EDGE_M: f64 = 4.0;
const SCENT_DECAY: f64 = 0.85;
const DESCRIPTOR_NOISE: f64 = 0.05;
const EXTRA_EDGE_PROB: f64 = 0.35;
const OBJECT_SLOTS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewDescriptor {
    /// Radians in `[0, 2π)`, clockwise from north (+y).
    pub heading: f64,
    pub pitch: f64,
    pub raw_descriptor: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectAnnotation {
    pub category: String,
    pub raw_descriptor: Vec<f64>,
    pub viewpoint_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeighborView {
    pub neighbor: NodeId,
    pub view: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub id: NodeId,
    pub position: [f64; 3],
    pub room: String,
    pub viewpoints: Vec<ViewDescriptor>,
    pub objects: Vec<ObjectAnnotation>,
    /// Which viewpoint each neighbor is visible from.
    pub neighbor_views: Vec<NeighborView>,
}

impl NodeRecord {
    pub fn view_of(&self, neighbor: NodeId) -> Option<usize> {
        self.neighbor_views.iter().find(|nv| nv.neighbor == neighbor).map(|nv| nv.view)
    }

    pub fn has_category(&self, category: &str) -> bool {
        self.objects.iter().any(|o| o.category == category)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvMeta {
    pub seed: u64,
    pub env_id: usize,
    pub num_views: usize,
    pub object_density: f64,
    pub meters_per_unit: f64,
}

#[derive(Serialize, Deserialize)]
struct EnvironmentFile {
    nodes: Vec<NodeRecord>,
    edges: Vec<[NodeId; 2]>,
    meta: EnvMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "EnvironmentFile", try_from = "EnvironmentFile")]
pub struct EnvironmentGraph {
    meta: EnvMeta,
    nodes: Vec<NodeRecord>,
    /// Unordered pairs stored as `[lo, hi]`, sorted.
    edges: Vec<[NodeId; 2]>,
    adjacency: Vec<Vec<NodeId>>,
}

impl From<EnvironmentGraph> for EnvironmentFile {
    fn from(g: EnvironmentGraph) -> Self {
        Self { nodes: g.nodes, edges: g.edges, meta: g.meta }
    }
}

impl TryFrom<EnvironmentFile> for EnvironmentGraph {
    type Error = Error;

    fn try_from(f: EnvironmentFile) -> Result<Self> {
        EnvironmentGraph::from_parts(f.meta, f.nodes, f.edges)
    }
}

impl EnvironmentGraph {
    /// Assembles and validates a graph.
    pub fn from_parts(meta: EnvMeta, nodes: Vec<NodeRecord>, edges: Vec<[NodeId; 2]>) -> Result<Self> {
        let mut adjacency = vec![Vec::new(); nodes.len()];
        let mut normalized = BTreeSet::new();
        for &[a, b] in &edges {
            if a >= nodes.len() || b >= nodes.len() {
                return Err(Error::UnknownNode(a.max(b)));
            }
            if a == b {
                return Err(Error::InvalidArgument(format!("self-loop at node {a}")));
            }
            if !normalized.insert([a.min(b), a.max(b)]) {
                return Err(Error::InvalidArgument(format!("duplicate edge {a}-{b}")));
            }
            adjacency[a].push(b);
            adjacency[b].push(a);
        }
        adjacency.iter_mut().for_each(|n| n.sort_unstable());
        let g = Self { meta, nodes, edges: normalized.into_iter().collect(), adjacency };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.nodes.is_empty() {
            return bad("environment has no nodes".into());
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.id != i {
                return bad(format!("node at index {i} has id {}", node.id));
            }
            if node.viewpoints.is_empty() {
                return bad(format!("node {i} has no viewpoints"));
            }
            if node.viewpoints.windows(2).any(|w| w[0].heading >= w[1].heading) {
                return bad(format!("node {i} viewpoint headings not strictly increasing"));
            }
            let assigned: BTreeSet<NodeId> = node.neighbor_views.iter().map(|nv| nv.neighbor).collect();
            let actual: BTreeSet<NodeId> = self.adjacency[i].iter().copied().collect();
            if assigned != actual || assigned.len() != node.neighbor_views.len() {
                return bad(format!("node {i} neighbor/viewpoint assignment does not match its edges"));
            }
            if node.neighbor_views.iter().any(|nv| nv.view >= node.viewpoints.len()) {
                return bad(format!("node {i} assigns a neighbor to a missing viewpoint"));
            }
            for o in &node.objects {
                if o.viewpoint_index >= node.viewpoints.len() {
                    return bad(format!("node {i} object {} in missing viewpoint", o.category));
                }
            }
        }
        let reach = bfs_order(&self.adjacency, 0);
        if reach.len() != self.nodes.len() {
            return bad(format!("graph is disconnected ({} of {} reachable)", reach.len(), self.nodes.len()));
        }
        Ok(())
    }

    pub fn meta(&self) -> &EnvMeta {
        &self.meta
    }

    pub fn env_id(&self) -> usize {
        self.meta.env_id
    }

    pub fn set_env_id(&mut self, id: usize) {
        self.meta.env_id = id;
    }

    pub fn nodes(&self) -> &[NodeRecord] {
        &self.nodes
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn node(&self, id: NodeId) -> Result<&NodeRecord> {
        self.nodes.get(id).ok_or(Error::UnknownNode(id))
    }

    pub fn edges(&self) -> &[[NodeId; 2]] {
        &self.edges
    }

    pub fn neighbors(&self, id: NodeId) -> &[NodeId] {
        &self.adjacency[id]
    }

    pub fn has_edge(&self, a: NodeId, b: NodeId) -> bool {
        self.adjacency.get(a).is_some_and(|n| n.binary_search(&b).is_ok())
    }

    /// Euclidean distance in meters between two node positions.
    pub fn distance(&self, a: NodeId, b: NodeId) -> f64 {
        let (p, q) = (self.nodes[a].position, self.nodes[b].position);
        let d2: f64 = p.iter().zip(&q).map(|(x, y)| (x - y) * (x - y)).sum();
        d2.sqrt() * self.meta.meters_per_unit
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

fn bfs_order(adjacency: &[Vec<NodeId>], start: NodeId) -> Vec<NodeId> {
    let mut seen = vec![false; adjacency.len()];
    let mut order = vec![start];
    seen[start] = true;
    let mut i = 0;
    while i < order.len() {
        for &n in &adjacency[order[i]] {
            if !seen[n] {
                seen[n] = true;
                order.push(n);
            }
        }
        i += 1;
    }
    order
}

/// Single-source shortest paths over Euclidean edge lengths.
#[derive(Debug, Clone)]
pub struct ShortestPathTree {
    pub source: NodeId,
    pub dist: Vec<f64>,
    pub pred: Vec<Option<NodeId>>,
}

impl ShortestPathTree {
    /// Node sequence from the source to `target`, or `None` if unreachable.
    pub fn path_to(&self, target: NodeId) -> Option<Vec<NodeId>> {
        if !self.dist.get(target)?.is_finite() {
            return None;
        }
        let mut path = vec![target];
        let mut cur = target;
        while let Some(p) = self.pred[cur] {
            path.push(p);
            cur = p;
        }
        path.reverse();
        Some(path)
    }
}

/// Dijkstra restricted to nodes accepted by `allowed` (the source is always
/// allowed). Ties resolve toward smaller node ids; predecessors change only
/// on strict improvement, so results are deterministic.
pub fn shortest_path_tree_within(
    env: &EnvironmentGraph,
    source: NodeId,
    allowed: impl Fn(NodeId) -> bool,
) -> Result<ShortestPathTree> {
    let n = env.num_nodes();
    if source >= n {
        return Err(Error::UnknownNode(source));
    }
    let mut dist = vec![f64::INFINITY; n];
    let mut pred = vec![None; n];
    let mut done = vec![false; n];
    dist[source] = 0.0;
    loop {
        let next = (0..n).filter(|&v| !done[v] && dist[v].is_finite()).min_by(|&a, &b| dist[a].total_cmp(&dist[b]));
        let Some(u) = next else { break };
        done[u] = true;
        for &v in env.neighbors(u) {
            if done[v] || !allowed(v) {
                continue;
            }
            let alt = dist[u] + env.distance(u, v);
            if alt < dist[v] {
                dist[v] = alt;
                pred[v] = Some(u);
            }
        }
    }
    Ok(ShortestPathTree { source, dist, pred })
}

pub fn shortest_path_tree(env: &EnvironmentGraph, source: NodeId) -> Result<ShortestPathTree> {
    shortest_path_tree_within(env, source, |_| true)
}

/// Geodesic between two nodes: `(path, length in meters)`.
pub fn shortest_path(env: &EnvironmentGraph, a: NodeId, b: NodeId) -> Result<(Vec<NodeId>, f64)> {
    if b >= env.num_nodes() {
        return Err(Error::UnknownNode(b));
    }
    let tree = shortest_path_tree(env, a)?;
    let path = tree.path_to(b).ok_or_else(|| Error::InvalidArgument(format!("node {b} unreachable from {a}")))?;
    Ok((path, tree.dist[b]))
}

/// Sum of edge lengths along a node walk. Consecutive repeats count zero.
pub fn walk_length(env: &EnvironmentGraph, walk: &[NodeId]) -> f64 {
    walk.windows(2).map(|w| env.distance(w[0], w[1])).sum()
}

/// Clockwise-from-north heading of `to` seen from `from`, in `[0, 2π)`.
pub fn heading_between(from: [f64; 3], to: [f64; 3]) -> f64 {
    let (dx, dy) = (to[0] - from[0], to[1] - from[1]);
    if dx == 0.0 && dy == 0.0 {
        return 0.0;
    }
    dx.atan2(dy).rem_euclid(TAU)
}

fn angular_gap(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(TAU);
    d.min(TAU - d)
}

fn position_code(x: f64, y: f64) -> [f64; 4] {
    [
        0.5 * (0.9 * x + 0.4 * y).sin(),
        0.5 * (0.7 * y - 0.3 * x).cos(),
        0.5 * (0.5 * (x - y)).sin(),
        0.5 * (0.6 * (x + y)).cos(),
    ]
}

fn category_index(category: &str) -> Option<usize> {
    OBJECT_CATEGORIES.iter().position(|c| *c == category)
}

/// Builds a connected random environment. Pure function of its arguments.
pub fn generate_environment(
    seed: u64,
    num_nodes: usize,
    num_views: usize,
    object_density: f64,
) -> Result<EnvironmentGraph> {
    if num_nodes < 2 {
        return Err(Error::InvalidArgument(format!("num_nodes must be at least 2, got {num_nodes}")));
    }
    if num_views < 1 {
        return Err(Error::InvalidArgument("num_views must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&object_density) {
        return Err(Error::InvalidArgument(format!("object_density {object_density} outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let degree_cap = num_views.max(2);

    // Layout: grow a random tree, each child 1.5-3.5 m from its parent and at
    // least 1.5 m from everything else.
    let mut half = 1.5 * (num_nodes as f64).sqrt() + 2.0;
    let mut pos: Vec<[f64; 2]> = vec![[0.0, 0.0]];
    let mut adjacency: Vec<Vec<NodeId>> = vec![Vec::new()];
    let mut edges: BTreeSet<[NodeId; 2]> = BTreeSet::new();
    for i in 1..num_nodes {
        let mut attempts = 0;
        loop {
            attempts += 1;
            if attempts % 2000 == 0 {
                half *= 1.25;
            }
            let parent = rng.gen_range(0..i);
            if adjacency[parent].len() >= degree_cap {
                continue;
            }
            let angle = rng.gen_range(0.0..TAU);
            let len = rng.gen_range(MIN_EDGE_M..3.5);
            let cand = [pos[parent][0] + len * angle.sin(), pos[parent][1] + len * angle.cos()];
            if cand[0].abs() > half || cand[1].abs() > half {
                continue;
            }
            if pos.iter().any(|q| ((q[0] - cand[0]).powi(2) + (q[1] - cand[1]).powi(2)).sqrt() < MIN_EDGE_M) {
                continue;
            }
            pos.push(cand);
            adjacency.push(vec![parent]);
            adjacency[parent].push(i);
            edges.insert([parent, i]);
            break;
        }
    }
    // Loops: short non-tree pairs become edges with some probability.
    for i in 0..num_nodes {
        for j in i + 1..num_nodes {
            if edges.contains(&[i, j]) || adjacency[i].len() >= degree_cap || adjacency[j].len() >= degree_cap {
                continue;
            }
            let d = ((pos[i][0] - pos[j][0]).powi(2) + (pos[i][1] - pos[j][1]).powi(2)).sqrt();
            if d <= MAX_EDGE_M && rng.gen::<f64>() < EXTRA_EDGE_PROB {
                edges.insert([i, j]);
                adjacency[i].push(j);
                adjacency[j].push(i);
            }
        }
    }
    adjacency.iter_mut().for_each(|a| a.sort_unstable());

    // Rooms: nearest of a few random centers.
    let num_rooms = (num_nodes / 5).clamp(2, ROOM_TYPES.len()).min(num_nodes);
    let mut order: Vec<NodeId> = (0..num_nodes).collect();
    order.shuffle(&mut rng);
    let mut room_types: Vec<&str> = ROOM_TYPES.to_vec();
    room_types.shuffle(&mut rng);
    let centers: Vec<NodeId> = order[..num_rooms].to_vec();
    let rooms: Vec<String> = pos
        .iter()
        .map(|p| {
            let best = (0..num_rooms)
                .min_by(|&a, &b| {
                    let da = (pos[centers[a]][0] - p[0]).powi(2) + (pos[centers[a]][1] - p[1]).powi(2);
                    let db = (pos[centers[b]][0] - p[0]).powi(2) + (pos[centers[b]][1] - p[1]).powi(2);
                    da.total_cmp(&db)
                })
                .unwrap_or(0);
            room_types[best].to_string()
        })
        .collect();

    // Objects: up to two distinct categories per node.
    let mut node_categories: Vec<Vec<(usize, usize)>> = Vec::with_capacity(num_nodes);
    for _ in 0..num_nodes {
        let mut cats: Vec<(usize, usize)> = Vec::new();
        for _ in 0..OBJECT_SLOTS {
            if rng.gen::<f64>() < object_density {
                let free: Vec<usize> = (0..NUM_CATEGORIES).filter(|c| cats.iter().all(|(k, _)| k != c)).collect();
                let cat = free[rng.gen_range(0..free.len())];
                cats.push((cat, rng.gen_range(0..num_views)));
            }
        }
        node_categories.push(cats);
    }

    let headings: Vec<f64> = (0..num_views).map(|k| TAU * k as f64 / num_views as f64).collect();
    let pos3: Vec<[f64; 3]> = pos.iter().map(|p| [p[0], p[1], 0.0]).collect();

    // Neighbor → viewpoint: greedy on angular gap, one neighbor per view when
    // the degree allows it.
    let mut neighbor_views: Vec<Vec<NeighborView>> = Vec::with_capacity(num_nodes);
    for u in 0..num_nodes {
        let mut pairs: Vec<(f64, NodeId, usize)> = Vec::new();
        for &v in &adjacency[u] {
            let h = heading_between(pos3[u], pos3[v]);
            for (k, &vh) in headings.iter().enumerate() {
                pairs.push((angular_gap(h, vh), v, k));
            }
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let exclusive = adjacency[u].len() <= num_views;
        let mut used = vec![false; num_views];
        let mut assigned: Vec<NeighborView> = Vec::new();
        for (_, v, k) in pairs {
            if assigned.iter().any(|nv| nv.neighbor == v) || (exclusive && used[k]) {
                continue;
            }
            used[k] = true;
            assigned.push(NeighborView { neighbor: v, view: k });
        }
        assigned.sort_by_key(|nv| nv.neighbor);
        neighbor_views.push(assigned);
    }

    let tmp = EnvironmentGraph {
        meta: EnvMeta { seed, env_id: 0, num_views, object_density, meters_per_unit: 1.0 },
        nodes: (0..num_nodes)
            .map(|i| NodeRecord {
                id: i,
                position: pos3[i],
                room: String::new(),
                viewpoints: Vec::new(),
                objects: Vec::new(),
                neighbor_views: Vec::new(),
            })
            .collect(),
        edges: edges.iter().copied().collect(),
        adjacency: adjacency.clone(),
    };

    let mut nodes = Vec::with_capacity(num_nodes);
    for u in 0..num_nodes {
        let tree = shortest_path_tree(&tmp, u)?;
        let mut scent = vec![[0.0f64; NUM_CATEGORIES]; num_views];
        for (v, cats) in node_categories.iter().enumerate() {
            if v == u || cats.is_empty() {
                continue;
            }
            let path = tree.path_to(v).expect("connected by construction");
            let first_hop = path[1];
            let hops = path.len() - 1;
            let strength = SCENT_DECAY.powi(hops as i32 - 1);
            for nv in neighbor_views[u].iter().filter(|nv| nv.neighbor == first_hop) {
                for &(cat, _) in cats {
                    let s = &mut scent[nv.view][cat];
                    *s = s.max(strength);
                }
            }
        }
        let pc = position_code(pos[u][0], pos[u][1]);
        let noise = |rng: &mut ChaCha8Rng| rng.gen_range(-DESCRIPTOR_NOISE..DESCRIPTOR_NOISE);
        let viewpoints = (0..num_views)
            .map(|k| {
                let mut d = Vec::with_capacity(D_RAW);
                d.extend_from_slice(&scent[k]);
                d.extend_from_slice(&[0.5 * headings[k].sin(), 0.5 * headings[k].cos(), pc[0], pc[1]]);
                d.iter_mut().for_each(|x| *x += noise(&mut rng));
                ViewDescriptor { heading: headings[k], pitch: 0.0, raw_descriptor: d }
            })
            .collect();
        let objects = node_categories[u]
            .iter()
            .map(|&(cat, view)| {
                let mut d = vec![0.0; NUM_CATEGORIES];
                d[cat] = 1.0;
                d.extend_from_slice(&pc);
                d.iter_mut().for_each(|x| *x += noise(&mut rng));
                ObjectAnnotation { category: OBJECT_CATEGORIES[cat].to_string(), raw_descriptor: d, viewpoint_index: view }
            })
            .collect();
        nodes.push(NodeRecord {
            id: u,
            position: pos3[u],
            room: rooms[u].clone(),
            viewpoints,
            objects,
            neighbor_views: neighbor_views[u].clone(),
        });
    }
    EnvironmentGraph::from_parts(tmp.meta, nodes, tmp.edges)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpisodeMode {
    /// Step-by-step instruction naming landmarks along the route.
    PathOriented,
    /// Destination room plus a target object to ground at the end.
    GoalOriented,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub episode_id: usize,
    pub env_id: usize,
    pub mode: EpisodeMode,
    pub start_node: NodeId,
    pub goal_node: NodeId,
    pub target_category: Option<String>,
    pub instruction_text: String,
    pub gt_path: Vec<NodeId>,
    pub max_steps: usize,
}

impl Episode {
    pub fn validate(&self, env: &EnvironmentGraph) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("episode {}: {m}", self.episode_id)));
        if self.env_id != env.env_id() {
            return bad(format!("env {} does not match environment {}", self.env_id, env.env_id()));
        }
        if self.gt_path.first() != Some(&self.start_node) || self.gt_path.last() != Some(&self.goal_node) {
            return bad("gt_path endpoints do not match start/goal".into());
        }
        if self.gt_path.windows(2).any(|w| !env.has_edge(w[0], w[1])) {
            return bad("gt_path is not a walk on the graph".into());
        }
        let (_, best) = shortest_path(env, self.start_node, self.goal_node)?;
        if (walk_length(env, &self.gt_path) - best).abs() > 1e-9 {
            return bad("gt_path is not a shortest path".into());
        }
        if let Some(cat) = &self.target_category {
            if !env.node(self.goal_node)?.has_category(cat) {
                return bad(format!("goal node lacks target '{cat}'"));
            }
        }
        Ok(())
    }

    /// Index of the first goal-node object matching the target category.
    pub fn target_object_index(&self, env: &EnvironmentGraph) -> Option<usize> {
        let cat = self.target_category.as_ref()?;
        env.nodes().get(self.goal_node)?.objects.iter().position(|o| &o.category == cat)
    }
}

/// Ground-truth phrase slots of a rendered instruction template.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TemplateSlots {
    pub objects: Vec<String>,
    pub actions: Vec<String>,
}

impl TemplateSlots {
    fn clause(&mut self, words: &mut Vec<String>, lead: &str, action: &str, object: &str) {
        words.push(lead.to_string());
        words.push(object.to_string());
        self.actions.push(action.to_string());
        self.objects.push(object.to_string());
    }
}

const PATH_CLAUSES: [(&str, &str); 4] =
    [("walk past the", "walk"), ("turn toward the", "turn"), ("continue past the", "continue"), ("passing the", "pass")];

/// `(lead-in before room, action 1, link before object, action 2)`.
const GOAL_TEMPLATES: [(&str, &str, &str, &str); 4] = [
    ("go to the", "go", "and find the", "find"),
    ("enter the", "enter", "and locate the", "locate"),
    ("head into the", "head", ", then look for the", "look"),
    ("walking into the", "walk", ", search for the", "search"),
];

pub const MIN_EPISODE_HOPS: usize = 4;
pub const MAX_EPISODE_HOPS: usize = 7;

pub fn make_episode(env: &EnvironmentGraph, seed: u64, mode: EpisodeMode) -> Result<Episode> {
    make_episode_annotated(env, seed, mode).map(|(e, _)| e)
}

/// Samples a start/goal pair 4 to 7 edges apart (falling back to the longest
/// available shortest path) and renders its instruction.
pub fn make_episode_annotated(
    env: &EnvironmentGraph,
    seed: u64,
    mode: EpisodeMode,
) -> Result<(Episode, TemplateSlots)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_e915_0de0_0001);
    let n = env.num_nodes();
    let mut counts = [0usize; NUM_CATEGORIES];
    for node in env.nodes() {
        for o in &node.objects {
            if let Some(c) = category_index(&o.category) {
                counts[c] += 1;
            }
        }
    }
    let unique_at = |g: NodeId| -> Vec<usize> {
        env.nodes()[g]
            .objects
            .iter()
            .enumerate()
            .filter(|(_, o)| category_index(&o.category).is_some_and(|c| counts[c] == 1))
            .map(|(i, _)| i)
            .collect()
    };

    let mut pairs: Vec<(NodeId, NodeId, Vec<NodeId>)> = Vec::new();
    for s in 0..n {
        let tree = shortest_path_tree(env, s)?;
        for g in (0..n).filter(|&g| g != s) {
            pairs.push((s, g, tree.path_to(g).expect("connected")));
        }
    }
    let hops = |p: &Vec<NodeId>| p.len() - 1;
    let in_range = |p: &Vec<NodeId>| (MIN_EPISODE_HOPS..=MAX_EPISODE_HOPS).contains(&hops(p));
    let longest = |filter: &dyn Fn(NodeId) -> bool| -> Vec<usize> {
        let max = pairs.iter().filter(|(_, g, _)| filter(*g)).map(|(_, _, p)| hops(p)).max();
        pairs
            .iter()
            .enumerate()
            .filter(|(_, (_, g, p))| filter(*g) && Some(hops(p)) == max)
            .map(|(i, _)| i)
            .collect()
    };
    let has_objects = |g: NodeId| !env.nodes()[g].objects.is_empty();
    let select = |f: &dyn Fn(&(NodeId, NodeId, Vec<NodeId>)) -> bool| -> Vec<usize> {
        pairs.iter().enumerate().filter(|(_, p)| f(p)).map(|(i, _)| i).collect()
    };

    let candidates = match mode {
        EpisodeMode::GoalOriented => {
            let tiers = [
                select(&|(_, g, p)| in_range(p) && !unique_at(*g).is_empty()),
                select(&|(_, g, p)| in_range(p) && has_objects(*g)),
                longest(&has_objects),
                select(&|(_, _, p)| in_range(p)),
                longest(&|_| true),
            ];
            tiers.into_iter().find(|t| !t.is_empty())
        }
        EpisodeMode::PathOriented => {
            [select(&|(_, _, p)| in_range(p)), longest(&|_| true)].into_iter().find(|t| !t.is_empty())
        }
    }
    .ok_or_else(|| Error::InvalidArgument("environment has no start/goal pair".into()))?;

    let (start, goal, gt_path) = pairs[candidates[rng.gen_range(0..candidates.len())]].clone();
    let goal_node = env.node(goal)?;
    let mut slots = TemplateSlots::default();
    let mut words: Vec<String> = Vec::new();
    let target_category = match mode {
        EpisodeMode::GoalOriented => {
            let target = if goal_node.objects.is_empty() {
                None
            } else {
                let unique = unique_at(goal);
                let idx = if unique.is_empty() {
                    rng.gen_range(0..goal_node.objects.len())
                } else {
                    unique[rng.gen_range(0..unique.len())]
                };
                Some(goal_node.objects[idx].category.clone())
            };
            let (lead, a1, link, a2) = GOAL_TEMPLATES[rng.gen_range(0..GOAL_TEMPLATES.len())];
            slots.clause(&mut words, lead, a1, &goal_node.room);
            if let Some(t) = &target {
                slots.clause(&mut words, link, a2, t);
            }
            target
        }
        EpisodeMode::PathOriented => {
            for &v in &gt_path[1..gt_path.len() - 1] {
                if let Some(o) = env.node(v)?.objects.first() {
                    let (lead, action) = PATH_CLAUSES[rng.gen_range(0..PATH_CLAUSES.len())];
                    slots.clause(&mut words, lead, action, &o.category);
                    words.push(", then".into());
                }
            }
            match goal_node.objects.first() {
                Some(o) => slots.clause(&mut words, "stop at the", "stop", &o.category),
                None => slots.clause(&mut words, "stop in the", "stop", &goal_node.room),
            }
            None
        }
    };
    let mut text = words.join(" ").replace(" ,", ",");
    if let Some(first) = text.get(..1) {
        text = first.to_uppercase() + &text[1..];
    }
    text.push('.');

    let episode = Episode {
        episode_id: 0,
        env_id: env.env_id(),
        mode,
        start_node: start,
        goal_node: goal,
        target_category,
        instruction_text: text,
        gt_path,
        max_steps: DEFAULT_MAX_STEPS,
    };
    Ok((episode, slots))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborObservation {
    pub id: NodeId,
    pub view_index: usize,
    /// Clockwise-from-north heading toward the neighbor.
    pub heading: f64,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub node: NodeId,
    pub position: [f64; 3],
    pub viewpoints: Vec<ViewDescriptor>,
    pub objects: Vec<ObjectAnnotation>,
    pub neighbors: Vec<NeighborObservation>,
}

impl Observation {
    /// The viewpoint a neighbor is visible from.
    pub fn view_of(&self, neighbor: NodeId) -> Option<usize> {
        self.neighbors.iter().find(|n| n.id == neighbor).map(|n| n.view_index)
    }
}

pub fn observe(env: &EnvironmentGraph, node: NodeId) -> Result<Observation> {
    let rec = env.node(node)?;
    let neighbors = rec
        .neighbor_views
        .iter()
        .map(|nv| NeighborObservation {
            id: nv.neighbor,
            view_index: nv.view,
            heading: heading_between(rec.position, env.nodes()[nv.neighbor].position),
            distance: env.distance(node, nv.neighbor),
        })
        .collect();
    Ok(Observation {
        node,
        position: rec.position,
        viewpoints: rec.viewpoints.clone(),
        objects: rec.objects.clone(),
        neighbors,
    })
}

/// Mixes a base seed with an index into an independent-looking stream seed.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SuiteConfig {
    pub seed: u64,
    pub num_envs: usize,
    pub num_nodes: usize,
    pub num_views: usize,
    pub object_density: f64,
    pub episodes_per_env: usize,
    pub mode: EpisodeMode,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_envs: 4,
            num_nodes: 20,
            num_views: DEFAULT_VIEWS,
            object_density: 0.5,
            episodes_per_env: 10,
            mode: EpisodeMode::GoalOriented,
        }
    }
}

/// A set of environments and episodes over them, with consecutive ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Suite {
    pub envs: Vec<EnvironmentGraph>,
    pub episodes: Vec<Episode>,
}

impl Suite {
    pub fn env(&self, env_id: usize) -> Result<&EnvironmentGraph> {
        self.envs
            .iter()
            .find(|e| e.env_id() == env_id)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown env id {env_id}")))
    }

    /// Each episode with the environment it belongs to.
    pub fn pairs(&self) -> Result<Vec<(&EnvironmentGraph, &Episode)>> {
        self.episodes.iter().map(|ep| Ok((self.env(ep.env_id)?, ep))).collect()
    }
}

pub fn generate_suite(cfg: &SuiteConfig) -> Result<Suite> {
    let mut envs = Vec::with_capacity(cfg.num_envs);
    let mut episodes = Vec::new();
    for i in 0..cfg.num_envs {
        let mut env =
            generate_environment(derive_seed(cfg.seed, i as u64), cfg.num_nodes, cfg.num_views, cfg.object_density)?;
        env.set_env_id(i);
        let episode_base = derive_seed(cfg.seed ^ 0xE915_0DE5, i as u64);
        for j in 0..cfg.episodes_per_env {
            let mut ep = make_episode(&env, derive_seed(episode_base, j as u64), cfg.mode)?;
            ep.episode_id = episodes.len();
            episodes.push(ep);
        }
        envs.push(env);
    }
    Ok(Suite { envs, episodes })
}

/// More episodes over existing environments, ids continuing from `first_id`.
pub fn sample_episodes(
    envs: &[EnvironmentGraph],
    seed: u64,
    per_env: usize,
    mode: EpisodeMode,
    first_id: usize,
) -> Result<Vec<Episode>> {
    let mut out = Vec::new();
    for env in envs {
        let base = derive_seed(seed, env.env_id() as u64);
        for j in 0..per_env {
            let mut ep = make_episode(env, derive_seed(base, j as u64), mode)?;
            ep.episode_id = first_id + out.len();
            out.push(ep);
        }
    }
    Ok(out)
}

//! Helpers shared by the integration tests: random data, hand-built graphs
//! and brute-force oracles written independently of the library code.
#![allow(dead_code)]

use std::f64::consts::PI;

use dope::envsim::{EnvMeta, EnvironmentGraph, Episode, EpisodeMode, NeighborView, NodeRecord, ObjectAnnotation, ViewDescriptor, D_RAW};
use dope::model::{Ablation, DopeModel, ModelConfig};
use dope::policy::{StopReason, TrajectoryLog};
use dope::tensor::{FeatureMatrix, Tape, Var};
use dope::textparse::Lexicon;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> FeatureMatrix {
    FeatureMatrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Scalar reduction with fixed random weights, so every output entry has
/// its own sensitivity.
pub fn weighted_sum(t: &mut Tape, y: Var, seed: u64) -> dope::Result<Var> {
    let (r, c) = t.shape(y);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random_matrix(&mut rng, r, c);
    let m = t.mul_const(y, w)?;
    Ok(t.sum_all(m))
}

/// Graph from 2-D positions (meters; +y is north) and an edge list. Each
/// node gets four views facing N, E, S, W; neighbors go to the closest one.
pub fn hand_env(positions: &[[f64; 2]], edges: &[(usize, usize)], objects: &[(usize, &str)]) -> EnvironmentGraph {
    let headings = [0.0, PI / 2.0, PI, 3.0 * PI / 2.0];
    let nodes = positions
        .iter()
        .enumerate()
        .map(|(id, p)| {
            let neighbor_views = edges
                .iter()
                .filter_map(|&(a, b)| match (a == id, b == id) {
                    (true, _) => Some(b),
                    (_, true) => Some(a),
                    _ => None,
                })
                .map(|n| {
                    let q = positions[n];
                    let h = (q[0] - p[0]).atan2(q[1] - p[1]).rem_euclid(2.0 * PI);
                    let view = (0..4)
                        .min_by(|&x, &y| angle_gap(headings[x], h).total_cmp(&angle_gap(headings[y], h)))
                        .unwrap();
                    NeighborView { neighbor: n, view }
                })
                .collect();
            NodeRecord {
                id,
                position: [p[0], p[1], 0.0],
                room: "hallway".into(),
                viewpoints: headings
                    .iter()
                    .map(|&h| ViewDescriptor { heading: h, pitch: 0.0, raw_descriptor: vec![0.1 * id as f64; D_RAW] })
                    .collect(),
                objects: objects
                    .iter()
                    .filter(|(n, _)| *n == id)
                    .map(|(_, c)| ObjectAnnotation { category: c.to_string(), raw_descriptor: vec![0.2; D_RAW], viewpoint_index: 0 })
                    .collect(),
                neighbor_views,
            }
        })
        .collect();
    let meta = EnvMeta { seed: 0, env_id: 0, num_views: 4, object_density: 0.0, meters_per_unit: 1.0 };
    EnvironmentGraph::from_parts(meta, nodes, edges.iter().map(|&(a, b)| [a, b]).collect()).unwrap()
}

fn angle_gap(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(2.0 * PI);
    d.min(2.0 * PI - d)
}

/// Euclidean distance straight from node positions.
pub fn euclid(env: &EnvironmentGraph, a: usize, b: usize) -> f64 {
    let (p, q) = (env.nodes()[a].position, env.nodes()[b].position);
    ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
}

/// Shortest length over every simple path from `a` to `b`, by exhaustive DFS.
pub fn exhaustive_shortest(env: &EnvironmentGraph, a: usize, b: usize) -> f64 {
    fn dfs(env: &EnvironmentGraph, at: usize, goal: usize, seen: &mut Vec<bool>, len: f64, best: &mut f64) {
        if at == goal {
            *best = best.min(len);
            return;
        }
        for &[x, y] in env.edges() {
            let next = if x == at { y } else if y == at { x } else { continue };
            if !seen[next] {
                seen[next] = true;
                dfs(env, next, goal, seen, len + euclid(env, at, next), best);
                seen[next] = false;
            }
        }
    }
    let mut seen = vec![false; env.num_nodes()];
    seen[a] = true;
    let mut best = f64::INFINITY;
    dfs(env, a, b, &mut seen, 0.0, &mut best);
    best
}

/// Nodes reachable from `start`, by breadth-first search over the edge list.
pub fn bfs_reachable(env: &EnvironmentGraph, start: usize) -> Vec<bool> {
    let mut seen = vec![false; env.num_nodes()];
    let mut queue = std::collections::VecDeque::from([start]);
    seen[start] = true;
    while let Some(v) = queue.pop_front() {
        for &[x, y] in env.edges() {
            let next = if x == v { y } else if y == v { x } else { continue };
            if !seen[next] {
                seen[next] = true;
                queue.push_back(next);
            }
        }
    }
    seen
}

pub fn tiny_config(ablation: Ablation) -> ModelConfig {
    ModelConfig { dim: 8, heads: 2, text_layers: 1, pano_layers: 1, cross_layers: 1, max_len: 64, ablation }
}

pub fn tiny_model(ablation: Ablation, seed: u64) -> DopeModel {
    DopeModel::new(tiny_config(ablation), Lexicon::default(), seed).unwrap()
}

/// Sets every parameter whose name starts with `prefix` to zero.
pub fn zero_params(store: &mut dope::tensor::ParamStore, prefix: &str) {
    let keys: Vec<_> = store.keys().filter(|&k| store.name(k).starts_with(prefix)).collect();
    assert!(!keys.is_empty(), "no parameters under {prefix}");
    for k in keys {
        let (r, c) = store.get(k).shape();
        store.set(k, FeatureMatrix::zeros(r, c)).unwrap();
    }
}

/// Dense loop-based multi-head attention, written from the definition.
pub fn attention_oracle(
    store: &dope::tensor::ParamStore,
    q_in: &FeatureMatrix,
    kv_in: &FeatureMatrix,
    p: &dope::tensor::MhaParams,
) -> FeatureMatrix {
    let lin = |x: &FeatureMatrix, l: &dope::tensor::LinearParams| -> Vec<Vec<f64>> {
        let (w, b) = (store.get(l.w), store.get(l.b));
        (0..x.rows())
            .map(|i| (0..w.cols()).map(|j| b.get(0, j) + (0..x.cols()).map(|k| x.get(i, k) * w.get(k, j)).sum::<f64>()).collect())
            .collect()
    };
    let (q, k, v) = (lin(q_in, &p.query), lin(kv_in, &p.key), lin(kv_in, &p.value));
    let d = p.dim();
    let dh = d / p.heads;
    let mut concat = vec![vec![0.0; d]; q.len()];
    for h in 0..p.heads {
        for i in 0..q.len() {
            let logits: Vec<f64> = (0..k.len())
                .map(|j| (0..dh).map(|c| q[i][h * dh + c] * k[j][h * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..dh {
                concat[i][h * dh + c] = (0..k.len()).map(|j| e[j] / z * v[j][h * dh + c]).sum();
            }
        }
    }
    let concat = FeatureMatrix::from_rows(&concat).unwrap();
    FeatureMatrix::from_rows(&lin(&concat, &p.output)).unwrap()
}

/// Loop-based `relu(x W1 + b1) W2 + b2`.
pub fn ffn_oracle(store: &dope::tensor::ParamStore, x: &FeatureMatrix, p: &dope::tensor::FfnParams) -> FeatureMatrix {
    let lin = |x: &FeatureMatrix, l: &dope::tensor::LinearParams, relu: bool| {
        let (w, b) = (store.get(l.w), store.get(l.b));
        let rows: Vec<Vec<f64>> = (0..x.rows())
            .map(|i| {
                (0..w.cols())
                    .map(|j| {
                        let v = b.get(0, j) + (0..x.cols()).map(|k| x.get(i, k) * w.get(k, j)).sum::<f64>();
                        if relu { v.max(0.0) } else { v }
                    })
                    .collect()
            })
            .collect();
        FeatureMatrix::from_rows(&rows).unwrap()
    };
    lin(&lin(x, &p.hidden, true), &p.out, false)
}

pub fn plus(a: &FeatureMatrix, b: &FeatureMatrix) -> FeatureMatrix {
    a.zip_map(b, |x, y| x + y)
}

/// Random walks from each start node, stopping after a random number of hops.
pub fn random_logs(envs: &[EnvironmentGraph], episodes: &[Episode], rng: &mut ChaCha8Rng) -> Vec<TrajectoryLog> {
    episodes
        .iter()
        .map(|ep| {
            let env = &envs[ep.env_id];
            let mut nodes = vec![ep.start_node];
            if rng.gen_bool(0.3) {
                nodes = ep.gt_path.clone();
            } else {
                for _ in 0..rng.gen_range(0..8) {
                    let at = *nodes.last().unwrap();
                    let nb: Vec<usize> = (0..env.num_nodes()).filter(|&v| env.has_edge(at, v)).collect();
                    nodes.push(nb[rng.gen_range(0..nb.len())]);
                }
            }
            let here = &env.nodes()[*nodes.last().unwrap()].objects;
            let grounded = match rng.gen_range(0..3) {
                0 => ep.target_category.clone(),
                1 if !here.is_empty() => Some(here[rng.gen_range(0..here.len())].category.clone()),
                _ => None,
            };
            TrajectoryLog {
                episode_id: ep.episode_id,
                env_id: ep.env_id,
                nodes,
                steps: Vec::new(),
                grounded_object: grounded,
                grounded_index: None,
                stop_reason: StopReason::StepLimit,
            }
        })
        .collect()
}

pub struct MetricsOracle {
    pub ne: f64,
    pub sr: f64,
    pub osr: f64,
    pub spl: f64,
    pub rgs: Option<f64>,
    pub rgspl: Option<f64>,
}

pub fn metrics_oracle(envs: &[EnvironmentGraph], episodes: &[Episode], logs: &[TrajectoryLog]) -> MetricsOracle {
    let n = episodes.len() as f64;
    let (mut ne, mut sr, mut osr, mut spl, mut rgs, mut rgspl, mut goals) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0usize);
    for ep in episodes {
        let env = &envs[ep.env_id];
        let l = logs.iter().find(|l| l.episode_id == ep.episode_id).unwrap();
        let d = euclid(env, *l.nodes.last().unwrap(), ep.goal_node);
        let s = if d <= 3.0 { 1.0 } else { 0.0 };
        let best = exhaustive_shortest(env, ep.start_node, ep.goal_node);
        let walked: f64 = l.nodes.windows(2).map(|w| euclid(env, w[0], w[1])).sum();
        let term = if s == 1.0 { if walked.max(best) == 0.0 { 1.0 } else { best / walked.max(best) } } else { 0.0 };
        ne += d;
        sr += s;
        osr += if l.nodes.iter().any(|&v| euclid(env, v, ep.goal_node) <= 3.0) { 1.0 } else { 0.0 };
        spl += term;
        if ep.mode == EpisodeMode::GoalOriented {
            goals += 1;
            if s == 1.0 && l.grounded_object.is_some() && l.grounded_object == ep.target_category {
                rgs += 1.0;
                rgspl += term;
            }
        }
    }
    let g = goals as f64;
    MetricsOracle {
        ne: ne / n,
        sr: sr / n,
        osr: osr / n,
        spl: spl / n,
        rgs: (goals > 0).then(|| rgs / g),
        rgspl: (goals > 0).then(|| rgspl / g),
    }
}

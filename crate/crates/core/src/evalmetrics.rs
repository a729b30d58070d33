//! Navigation metrics: NE, SR, OSR, SPL, RGS and RGSPL.

use std::collections::HashMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::envsim::{shortest_path, walk_length, EnvironmentGraph, Episode, EpisodeMode};
use crate::error::{Error, Result};
use crate::policy::TrajectoryLog;

/// Success radius in meters. The comparison is inclusive.
pub const SUCCESS_THRESHOLD_M: f64 = 3.0;

fn check_alignment(log: &TrajectoryLog, episode: &Episode) -> Result<()> {
    if log.episode_id != episode.episode_id || log.env_id != episode.env_id {
        return Err(Error::InvalidArgument(format!(
            "trajectory for episode {} (env {}) paired with episode {} (env {})",
            log.episode_id, log.env_id, episode.episode_id, episode.env_id
        )));
    }
    if log.nodes.first() != Some(&episode.start_node) {
        return Err(Error::InvalidArgument(format!("trajectory {} does not begin at the start node", log.episode_id)));
    }
    Ok(())
}

/// Distance in meters from the stopping node to the goal node.
pub fn navigation_error(log: &TrajectoryLog, episode: &Episode, env: &EnvironmentGraph) -> Result<f64> {
    check_alignment(log, episode)?;
    env.node(log.final_node())?;
    env.node(episode.goal_node)?;
    Ok(env.distance(log.final_node(), episode.goal_node))
}

pub fn success(log: &TrajectoryLog, episode: &Episode, env: &EnvironmentGraph, threshold: f64) -> Result<bool> {
    Ok(navigation_error(log, episode, env)? <= threshold)
}

/// Whether any node along the walk came within `threshold` of the goal.
pub fn oracle_success(log: &TrajectoryLog, episode: &Episode, env: &EnvironmentGraph, threshold: f64) -> Result<bool> {
    check_alignment(log, episode)?;
    for &n in &log.nodes {
        env.node(n)?;
    }
    Ok(log.nodes.iter().any(|&n| env.distance(n, episode.goal_node) <= threshold))
}

/// `S · l / max(p, l)`; a zero-length success counts fully.
pub fn spl_term(success: bool, shortest: f64, traversed: f64) -> f64 {
    if !success {
        return 0.0;
    }
    let denom = traversed.max(shortest);
    if denom <= 0.0 {
        1.0
    } else {
        shortest / denom
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub episode_id: usize,
    pub env_id: usize,
    pub ne: f64,
    pub success: bool,
    pub oracle_success: bool,
    pub spl: f64,
    /// Absent for path-oriented episodes.
    pub rgs: Option<bool>,
    pub rgspl: Option<f64>,
    pub shortest_length: f64,
    pub path_length: f64,
}

pub fn episode_metrics(log: &TrajectoryLog, episode: &Episode, env: &EnvironmentGraph) -> Result<EpisodeMetrics> {
    let ne = navigation_error(log, episode, env)?;
    let ok = ne <= SUCCESS_THRESHOLD_M;
    let (_, shortest) = shortest_path(env, episode.start_node, episode.goal_node)?;
    let traversed = walk_length(env, &log.nodes);
    let spl = spl_term(ok, shortest, traversed);
    let (rgs, rgspl) = match episode.mode {
        EpisodeMode::GoalOriented => {
            let grounded = ok
                && episode.target_category.is_some()
                && log.grounded_object.as_deref() == episode.target_category.as_deref();
            (Some(grounded), Some(if grounded { spl } else { 0.0 }))
        }
        EpisodeMode::PathOriented => (None, None),
    };
    Ok(EpisodeMetrics {
        episode_id: episode.episode_id,
        env_id: episode.env_id,
        ne,
        success: ok,
        oracle_success: oracle_success(log, episode, env, SUCCESS_THRESHOLD_M)?,
        spl,
        rgs,
        rgspl,
        shortest_length: shortest,
        path_length: traversed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ne: f64,
    pub osr: f64,
    pub sr: f64,
    pub spl: f64,
    /// Mean over goal-oriented episodes; absent when there are none.
    pub rgs: Option<f64>,
    pub rgspl: Option<f64>,
    pub episodes: usize,
    pub per_episode: Vec<EpisodeMetrics>,
}

fn env_index(envs: &[EnvironmentGraph]) -> HashMap<usize, &EnvironmentGraph> {
    envs.iter().map(|e| (e.env_id(), e)).collect()
}

/// Pairs each log with its episode by id. Every episode needs exactly one log.
pub fn align<'a>(logs: &'a [TrajectoryLog], episodes: &'a [Episode]) -> Result<Vec<(&'a TrajectoryLog, &'a Episode)>> {
    let by_id: HashMap<usize, &TrajectoryLog> = logs.iter().map(|l| (l.episode_id, l)).collect();
    if by_id.len() != logs.len() || logs.len() != episodes.len() {
        return Err(Error::InvalidArgument(format!("{} trajectories for {} episodes", logs.len(), episodes.len())));
    }
    episodes
        .iter()
        .map(|ep| {
            by_id
                .get(&ep.episode_id)
                .map(|l| (*l, ep))
                .ok_or_else(|| Error::InvalidArgument(format!("no trajectory for episode {}", ep.episode_id)))
        })
        .collect()
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn report(logs: &[TrajectoryLog], episodes: &[Episode], envs: &[EnvironmentGraph]) -> Result<MetricsReport> {
    if episodes.is_empty() {
        return Err(Error::EmptyInput("no episodes to evaluate"));
    }
    let envs = env_index(envs);
    let per_episode = align(logs, episodes)?
        .into_iter()
        .map(|(log, ep)| {
            let env = envs.get(&ep.env_id).ok_or_else(|| Error::InvalidArgument(format!("unknown env id {}", ep.env_id)))?;
            episode_metrics(log, ep, env)
        })
        .collect::<Result<Vec<_>>>()?;
    let rate = |f: &dyn Fn(&EpisodeMetrics) -> bool| mean(per_episode.iter().map(|m| f(m) as u8 as f64)).unwrap_or(0.0);
    Ok(MetricsReport {
        ne: mean(per_episode.iter().map(|m| m.ne)).unwrap_or(0.0),
        osr: rate(&|m| m.oracle_success),
        sr: rate(&|m| m.success),
        spl: mean(per_episode.iter().map(|m| m.spl)).unwrap_or(0.0),
        rgs: mean(per_episode.iter().filter_map(|m| m.rgs.map(|b| b as u8 as f64))),
        rgspl: mean(per_episode.iter().filter_map(|m| m.rgspl)),
        episodes: per_episode.len(),
        per_episode,
    })
}

/// `SPL ≤ SR ≤ OSR` and `RGSPL ≤ RGS ≤ SR`, up to rounding.
pub fn check_invariants(r: &MetricsReport) -> bool {
    let tol = 1e-12;
    let chain = r.spl <= r.sr + tol && r.sr <= r.osr + tol;
    let grounding = match (r.rgs, r.rgspl) {
        (Some(rgs), Some(rgspl)) => {
            let goal_only = r.per_episode.iter().all(|m| m.rgs.is_some());
            rgspl <= rgs + tol && (!goal_only || rgs <= r.sr + tol)
        }
        (None, None) => true,
        _ => false,
    };
    chain && grounding
}

/// One row per episode; absent grounding metrics are empty cells.
pub fn write_csv<W: Write>(r: &MetricsReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for m in &r.per_episode {
        w.serialize(m)?;
    }
    w.flush()?;
    Ok(())
}

//! Ablation runs: train each configuration cell on the same data and seed,
//! evaluate on environments never seen in training, and summarize by median.

use serde::{Deserialize, Serialize};

use crate::envsim::{derive_seed, generate_suite, EnvironmentGraph, Episode, Suite, SuiteConfig};
use crate::error::{Error, Result};
use crate::evalmetrics::{report, MetricsReport};
use crate::model::Ablation;
use crate::policy::{run_episode, TrajectoryLog};
use crate::textparse::Lexicon;
use crate::train::{train_loop, TrainConfig};

/// What the `no_ope` flag means in these runs.
pub const NO_OPE_NOTE: &str = "no_ope keeps the phrase attention of TOPA and IOPA and drops the gate: the block outputs the enhanced features directly instead of the gated blend with its input";

pub fn default_cells() -> Vec<Ablation> {
    vec![
        Ablation::BASELINE,
        Ablation { no_topa: false, no_iopa: true, no_ope: false },
        Ablation { no_topa: true, no_iopa: false, no_ope: false },
        Ablation::FULL,
        Ablation { no_ope: true, ..Ablation::FULL },
    ]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    pub cells: Vec<Ablation>,
    /// Training suite; its `seed` is replaced by each run seed.
    pub train_suite: SuiteConfig,
    pub test_envs: usize,
    pub test_episodes_per_env: usize,
    /// Optimizer and model settings shared by every cell; `seed` and
    /// `model.ablation` are set per run.
    pub train: TrainConfig,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2, 3, 4],
            cells: default_cells(),
            train_suite: SuiteConfig { num_envs: 8, episodes_per_env: 10, ..Default::default() },
            test_envs: 4,
            test_episodes_per_env: 10,
            train: TrainConfig { self_test: false, ..Default::default() },
        }
    }
}

/// Training suite plus a disjoint set of unseen environments. Test env and
/// episode ids continue after the training ones.
pub fn unseen_split(cfg: &AblationConfig, seed: u64) -> Result<(Suite, Suite)> {
    let train = generate_suite(&SuiteConfig { seed, ..cfg.train_suite.clone() })?;
    let mut test = generate_suite(&SuiteConfig {
        seed: derive_seed(seed, 0x7E57),
        num_envs: cfg.test_envs,
        episodes_per_env: cfg.test_episodes_per_env,
        ..cfg.train_suite.clone()
    })?;
    let (env_offset, ep_offset) = (train.envs.len(), train.episodes.len());
    for env in &mut test.envs {
        env.set_env_id(env.env_id() + env_offset);
    }
    for ep in &mut test.episodes {
        ep.env_id += env_offset;
        ep.episode_id += ep_offset;
    }
    Ok((train, test))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub final_loss: Option<f64>,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub label: String,
    pub ablation: Ablation,
    pub runs: Vec<SeedRun>,
    pub median_sr: f64,
    pub median_spl: f64,
    pub median_ne: f64,
    pub median_rgs: Option<f64>,
    pub median_rgspl: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub cells: Vec<CellSummary>,
    pub seeds: Vec<u64>,
    pub no_ope_note: String,
}

impl AblationReport {
    pub fn cell(&self, ablation: Ablation) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.ablation == ablation)
    }
}

/// Median with the usual midpoint convention for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() || values.iter().any(|v| v.is_nan()) {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

pub fn rollout_all(
    model: &crate::model::DopeModel,
    envs: &[EnvironmentGraph],
    episodes: &[Episode],
) -> Result<Vec<TrajectoryLog>> {
    episodes
        .iter()
        .map(|ep| {
            let env = envs
                .iter()
                .find(|e| e.env_id() == ep.env_id)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown env id {}", ep.env_id)))?;
            run_episode(model, env, ep)
        })
        .collect()
}

/// Runs every cell for every seed. `on_run` sees each finished run.
pub fn run_ablation(
    cfg: &AblationConfig,
    lexicon: &Lexicon,
    on_run: &mut dyn FnMut(&str, &SeedRun),
) -> Result<AblationReport> {
    if cfg.seeds.is_empty() {
        return Err(Error::EmptyInput("ablation seeds"));
    }
    if cfg.cells.is_empty() {
        return Err(Error::EmptyInput("ablation cells"));
    }
    let mut runs: Vec<Vec<SeedRun>> = vec![Vec::new(); cfg.cells.len()];
    for &seed in &cfg.seeds {
        let (train, test) = unseen_split(cfg, seed)?;
        let data = train.pairs()?;
        for (cell, out) in cfg.cells.iter().zip(runs.iter_mut()) {
            let mut tc = cfg.train.clone();
            tc.seed = seed;
            tc.model.ablation = *cell;
            let trained = train_loop(&data, &tc, lexicon.clone(), &mut |_| {})?;
            let logs = rollout_all(&trained.model, &test.envs, &test.episodes)?;
            let run = SeedRun {
                seed,
                final_loss: trained.history.last().map(|s| s.mean_loss),
                metrics: report(&logs, &test.episodes, &test.envs)?,
            };
            on_run(&cell.label(), &run);
            out.push(run);
        }
    }
    let cells = cfg
        .cells
        .iter()
        .zip(runs)
        .map(|(cell, runs)| {
            let pick = |f: fn(&MetricsReport) -> f64| median(&runs.iter().map(|r| f(&r.metrics)).collect::<Vec<_>>());
            let pick_opt = |f: fn(&MetricsReport) -> Option<f64>| {
                runs.iter().map(|r| f(&r.metrics)).collect::<Option<Vec<_>>>().and_then(|v| median(&v))
            };
            CellSummary {
                label: cell.label(),
                ablation: *cell,
                median_sr: pick(|m| m.sr).unwrap_or(f64::NAN),
                median_spl: pick(|m| m.spl).unwrap_or(f64::NAN),
                median_ne: pick(|m| m.ne).unwrap_or(f64::NAN),
                median_rgs: pick_opt(|m| m.rgs),
                median_rgspl: pick_opt(|m| m.rgspl),
                runs,
            }
        })
        .collect();
    Ok(AblationReport { cells, seeds: cfg.seeds.clone(), no_ope_note: NO_OPE_NOTE.to_string() })
}

mod files;

use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use dope::ablation::{rollout_all, run_ablation, AblationConfig};
use dope::envsim::{generate_suite, EpisodeMode, SuiteConfig};
use dope::evalmetrics::{report, write_csv};
use dope::model::DopeModel;
use dope::policy::TrajectoryLog;
use dope::textparse::{parse_instruction, Lexicon};
use dope::train::{train_loop, TrainConfig};
use serde::Deserialize;
use serde_json::json;

#[derive(Parser)]
#[command(name = "dope", version, about = "Synthetic vision-and-language navigation with object perception enhancement")]
struct Cli {
    /// JSON file with `gen`, `train`, `ablate` and `lexicon` sections.
    /// Command-line flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate environments and episodes.
    Gen(GenArgs),
    /// Extract object and action phrases from instructions.
    Parse(ParseArgs),
    /// Train a model with teacher forcing.
    Train(TrainArgs),
    /// Run a trained model on episodes and log trajectories.
    Rollout(RolloutArgs),
    /// Score trajectories.
    Eval(EvalArgs),
    /// Train and evaluate every ablation cell over several seeds.
    Ablate(AblateArgs),
}

#[derive(Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    gen: SuiteConfig,
    train: TrainConfig,
    ablate: AblationConfig,
    lexicon: Option<PathBuf>,
}

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    fn lexicon(&self, flag: Option<&Path>) -> Result<Lexicon> {
        match flag.or(self.lexicon.as_deref()) {
            Some(p) => Ok(Lexicon::from_json_file(p).with_context(|| format!("lexicon {}", p.display()))?),
            None => Ok(Lexicon::default()),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Goal,
    Path,
}

impl From<Mode> for EpisodeMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Goal => EpisodeMode::GoalOriented,
            Mode::Path => EpisodeMode::PathOriented,
        }
    }
}

#[derive(Args)]
struct SuiteArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    envs: Option<usize>,
    #[arg(long)]
    nodes: Option<usize>,
    #[arg(long)]
    views: Option<usize>,
    #[arg(long)]
    object_density: Option<f64>,
    #[arg(long)]
    episodes_per_env: Option<usize>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
}

impl SuiteArgs {
    fn apply(&self, c: &mut SuiteConfig) {
        set(&mut c.seed, self.seed);
        set(&mut c.num_envs, self.envs);
        set(&mut c.num_nodes, self.nodes);
        set(&mut c.num_views, self.views);
        set(&mut c.object_density, self.object_density);
        set(&mut c.episodes_per_env, self.episodes_per_env);
        set(&mut c.mode, self.mode.map(Into::into));
    }
}

#[derive(Args)]
struct GenArgs {
    /// Output directory; receives `envs/` and `episodes.jsonl`.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    suite: SuiteArgs,
}

#[derive(Args)]
struct ParseArgs {
    /// Plain-text lines or JSONL with `instruction_text` (or `text`);
    /// stdin when absent.
    #[arg(long)]
    input: Option<PathBuf>,
    /// JSONL output; stdout when absent.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    lexicon: Option<PathBuf>,
}

/// Model shape and optimizer settings. Every `TrainConfig` field has a flag.
#[derive(Args)]
struct TrainFlags {
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    text_layers: Option<usize>,
    #[arg(long)]
    pano_layers: Option<usize>,
    #[arg(long)]
    cross_layers: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    og_weight: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long, conflicts_with = "no_clip")]
    clip_norm: Option<f64>,
    /// Disable gradient clipping.
    #[arg(long)]
    no_clip: bool,
    /// Skip the finite-difference check before training.
    #[arg(long)]
    no_self_test: bool,
}

impl TrainFlags {
    fn apply(&self, c: &mut TrainConfig) {
        set(&mut c.model.dim, self.dim);
        set(&mut c.model.heads, self.heads);
        set(&mut c.model.text_layers, self.text_layers);
        set(&mut c.model.pano_layers, self.pano_layers);
        set(&mut c.model.cross_layers, self.cross_layers);
        set(&mut c.model.max_len, self.max_len);
        set(&mut c.lr, self.lr);
        set(&mut c.epochs, self.epochs);
        set(&mut c.batch_size, self.batch_size);
        set(&mut c.dropout, self.dropout);
        set(&mut c.og_weight, self.og_weight);
        set(&mut c.weight_decay, self.weight_decay);
        if self.clip_norm.is_some() {
            c.clip_norm = self.clip_norm;
        }
        if self.no_clip {
            c.clip_norm = None;
        }
        if self.no_self_test {
            c.self_test = false;
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Environment JSON file or directory of them.
    #[arg(long)]
    envs: PathBuf,
    #[arg(long)]
    episodes: PathBuf,
    /// Where to write the trained checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Per-epoch JSONL loss log.
    #[arg(long)]
    loss_log: Option<PathBuf>,
    #[arg(long)]
    lexicon: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    flags: TrainFlags,
    /// Replace TOPA's output with the instruction features.
    #[arg(long)]
    no_topa: bool,
    /// Replace IOPA's output with the view features.
    #[arg(long)]
    no_iopa: bool,
    /// Keep the enhancement attention but drop the gate.
    #[arg(long)]
    no_ope: bool,
}

#[derive(Args)]
struct RolloutArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    envs: PathBuf,
    #[arg(long)]
    episodes: PathBuf,
    /// Trajectory JSONL.
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    envs: PathBuf,
    #[arg(long)]
    episodes: PathBuf,
    #[arg(long)]
    trajectories: PathBuf,
    /// Report JSON; stdout when absent.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Per-episode CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    /// Comma-separated run seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    train_envs: Option<usize>,
    #[arg(long)]
    test_envs: Option<usize>,
    #[arg(long)]
    nodes: Option<usize>,
    #[arg(long)]
    episodes_per_env: Option<usize>,
    #[arg(long)]
    test_episodes_per_env: Option<usize>,
    #[command(flatten)]
    flags: TrainFlags,
    /// Directory for per-cell, per-seed reports plus `report.json`.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    lexicon: Option<PathBuf>,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn print_json(value: &serde_json::Value) -> Result<()> {
    let mut out = io::stdout().lock();
    serde_json::to_writer(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn cmd_gen(a: GenArgs, cfg: FileConfig) -> Result<()> {
    let mut sc = cfg.gen;
    a.suite.apply(&mut sc);
    let suite = generate_suite(&sc)?;
    let (env_dir, episodes) = files::write_suite(&a.out, &suite)?;
    let hops: Vec<usize> = suite.episodes.iter().map(|e| e.gt_path.len() - 1).collect();
    let edges: usize = suite.envs.iter().map(|e| e.edges().len()).sum();
    print_json(&json!({
        "envs": suite.envs.len(),
        "episodes": suite.episodes.len(),
        "mean_edges": edges as f64 / suite.envs.len().max(1) as f64,
        "mean_hops": if hops.is_empty() { None } else { Some(hops.iter().sum::<usize>() as f64 / hops.len() as f64) },
        "env_dir": env_dir,
        "episodes_file": episodes,
    }))
}

fn instruction_of(line: &str) -> Result<String> {
    if !line.starts_with('{') {
        return Ok(line.to_string());
    }
    let v: serde_json::Value = serde_json::from_str(line)?;
    ["instruction_text", "text"]
        .iter()
        .find_map(|k| v.get(*k).and_then(|s| s.as_str()))
        .map(str::to_string)
        .ok_or_else(|| dope::Error::InvalidArgument("JSON line has no `instruction_text` or `text` string".into()).into())
}

fn cmd_parse(a: ParseArgs, cfg: FileConfig) -> Result<()> {
    let lex = cfg.lexicon(a.lexicon.as_deref())?;
    let input: Box<dyn BufRead> = match &a.input {
        Some(p) => Box::new(io::BufReader::new(
            std::fs::File::open(p).with_context(|| format!("opening {}", p.display()))?,
        )),
        None => Box::new(io::stdin().lock()),
    };
    let mut out: Box<dyn Write> = match &a.output {
        Some(p) => Box::new(files::create(p)?),
        None => Box::new(io::stdout().lock()),
    };
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let text = instruction_of(line).with_context(|| format!("input line {}", i + 1))?;
        serde_json::to_writer(&mut out, &parse_instruction(&text, &lex))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

fn cmd_train(a: TrainArgs, cfg: FileConfig) -> Result<()> {
    let lex = cfg.lexicon(a.lexicon.as_deref())?;
    let mut tc = cfg.train;
    a.flags.apply(&mut tc);
    set(&mut tc.seed, a.seed);
    tc.model.ablation.no_topa |= a.no_topa;
    tc.model.ablation.no_iopa |= a.no_iopa;
    tc.model.ablation.no_ope |= a.no_ope;
    tc.validate()?;
    let envs = files::read_envs(&a.envs)?;
    let episodes = files::read_episodes(&a.episodes, &envs)?;
    let data: Vec<_> = episodes
        .iter()
        .map(|ep| (envs.iter().find(|e| e.env_id() == ep.env_id).expect("checked on load"), ep))
        .collect();

    let mut log = a.loss_log.as_deref().map(files::create).transpose()?;
    let mut log_err = None;
    let out = train_loop(&data, &tc, lex, &mut |s| {
        if let Some(w) = log.as_mut() {
            let r = serde_json::to_writer(&mut *w, s).map_err(anyhow::Error::from).and_then(|_| Ok(w.write_all(b"\n")?));
            if let Err(e) = r {
                log_err.get_or_insert(e);
            }
        }
    })?;
    if let Some(e) = log_err {
        return Err(e.context("writing loss log"));
    }
    if let Some(mut w) = log {
        w.flush()?;
    }
    out.model.save(&a.checkpoint)?;
    let last = out.history.last();
    print_json(&json!({
        "checkpoint": a.checkpoint,
        "parameters": out.model.num_parameters(),
        "epochs": out.history.len(),
        "final_loss": last.map(|s| s.mean_loss),
        "final_train_accuracy": last.map(|s| s.train_accuracy),
        "ablation": tc.model.ablation.label(),
        "self_test": out.self_test.map(|r| json!({
            "max_relative_error": r.max_relative_error,
            "max_raw_relative_error": r.max_raw_relative_error,
            "checked": r.checked,
            "flat": r.flat,
            "skipped_kinks": r.skipped_kinks,
        })),
    }))
}

fn cmd_rollout(a: RolloutArgs) -> Result<()> {
    let model = DopeModel::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let envs = files::read_envs(&a.envs)?;
    let episodes = files::read_episodes(&a.episodes, &envs)?;
    let logs = rollout_all(&model, &envs, &episodes)?;
    files::write_jsonl(&a.output, &logs)?;
    let stopped = logs.iter().filter(|l| l.stop_reason == dope::policy::StopReason::StopAction).count();
    print_json(&json!({ "episodes": logs.len(), "stopped": stopped, "output": a.output }))
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let envs = files::read_envs(&a.envs)?;
    let episodes = files::read_episodes(&a.episodes, &envs)?;
    let logs: Vec<TrajectoryLog> = files::read_jsonl(&a.trajectories)?;
    let r = report(&logs, &episodes, &envs)?;
    if let Some(p) = &a.csv {
        let mut w = files::create(p)?;
        write_csv(&r, &mut w)?;
        w.flush()?;
    }
    match &a.output {
        Some(p) => files::write_json(p, &r),
        None => print_json(&serde_json::to_value(&r)?),
    }
}

fn cmd_ablate(a: AblateArgs, cfg: FileConfig) -> Result<()> {
    let lex = cfg.lexicon(a.lexicon.as_deref())?;
    let mut ac = cfg.ablate;
    set(&mut ac.seeds, a.seeds);
    set(&mut ac.train_suite.num_envs, a.train_envs);
    set(&mut ac.train_suite.num_nodes, a.nodes);
    set(&mut ac.train_suite.episodes_per_env, a.episodes_per_env);
    set(&mut ac.test_envs, a.test_envs);
    set(&mut ac.test_episodes_per_env, a.test_episodes_per_env);
    a.flags.apply(&mut ac.train);
    ac.train.validate()?;
    if let Some(dir) = &a.out_dir {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut write_err = None;
    let rep = run_ablation(&ac, &lex, &mut |label, run| {
        if let Some(dir) = &a.out_dir {
            let path = dir.join(label).join(format!("seed_{}.json", run.seed));
            if let Err(e) = files::write_json(&path, run) {
                write_err.get_or_insert(e);
            }
        }
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    let summary = json!({
        "seeds": rep.seeds,
        "no_ope_note": rep.no_ope_note,
        "cells": rep.cells.iter().map(|c| json!({
            "label": c.label,
            "ablation": c.ablation,
            "median_sr": c.median_sr,
            "median_spl": c.median_spl,
            "median_ne": c.median_ne,
            "median_rgs": c.median_rgs,
            "median_rgspl": c.median_rgspl,
        })).collect::<Vec<_>>(),
    });
    match &a.out_dir {
        Some(dir) => {
            files::write_json(&dir.join("report.json"), &rep)?;
            print_json(&summary)
        }
        None => print_json(&serde_json::to_value(&rep)?),
    }
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    for cause in e.chain() {
        if let Some(d) = cause.downcast_ref::<dope::Error>() {
            return d.kind();
        }
        if cause.is::<serde_json::Error>() {
            return "json";
        }
        if cause.is::<io::Error>() {
            return "io";
        }
    }
    "error"
}

fn fail(kind: &str, message: String, code: u8) -> ExitCode {
    eprintln!("{}", json!({ "error": { "kind": kind, "message": message } }));
    ExitCode::from(code)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = FileConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Gen(a) => cmd_gen(a, cfg),
        Command::Parse(a) => cmd_parse(a, cfg),
        Command::Train(a) => cmd_train(a, cfg),
        Command::Rollout(a) => cmd_rollout(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a, cfg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", e.to_string().trim().to_string(), 2),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(error_kind(&e), format!("{e:#}"), 1),
    }
}

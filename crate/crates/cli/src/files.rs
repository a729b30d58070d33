//! Reading and writing the on-disk formats: one JSON file per environment,
//! JSONL for episodes, trajectories and loss logs.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dope::envsim::{EnvironmentGraph, Episode, Suite};
use serde::de::DeserializeOwned;
use serde::Serialize;

pub fn env_file_name(env_id: usize) -> String {
    format!("env_{env_id:04}.json")
}

/// Writes `dir/envs/env_NNNN.json` and `dir/episodes.jsonl`.
pub fn write_suite(dir: &Path, suite: &Suite) -> Result<(PathBuf, PathBuf)> {
    let env_dir = dir.join("envs");
    fs::create_dir_all(&env_dir).with_context(|| format!("creating {}", env_dir.display()))?;
    for env in &suite.envs {
        let path = env_dir.join(env_file_name(env.env_id()));
        fs::write(&path, env.to_json()?).with_context(|| format!("writing {}", path.display()))?;
    }
    let episodes = dir.join("episodes.jsonl");
    write_jsonl(&episodes, &suite.episodes)?;
    Ok((env_dir, episodes))
}

/// A single environment file, or every `*.json` in a directory. Sorted by
/// env id; duplicate ids are an error.
pub fn read_envs(path: &Path) -> Result<Vec<EnvironmentGraph>> {
    let files = if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .with_context(|| format!("listing {}", path.display()))?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        files.retain(|p| p.extension().is_some_and(|e| e == "json"));
        files.sort();
        files
    } else {
        vec![path.to_path_buf()]
    };
    if files.is_empty() {
        bail!(dope::Error::EmptyInput("no environment files"));
    }
    let mut envs = Vec::with_capacity(files.len());
    for f in files {
        let text = fs::read_to_string(&f).with_context(|| format!("reading {}", f.display()))?;
        envs.push(EnvironmentGraph::from_json(&text).with_context(|| format!("parsing {}", f.display()))?);
    }
    envs.sort_by_key(|e| e.env_id());
    if envs.windows(2).any(|w| w[0].env_id() == w[1].env_id()) {
        bail!(dope::Error::InvalidArgument("duplicate env ids among environment files".into()));
    }
    Ok(envs)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = create(path)?;
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Episodes checked against their environments.
pub fn read_episodes(path: &Path, envs: &[EnvironmentGraph]) -> Result<Vec<Episode>> {
    let episodes: Vec<Episode> = read_jsonl(path)?;
    for ep in &episodes {
        let env = envs
            .iter()
            .find(|e| e.env_id() == ep.env_id)
            .ok_or_else(|| dope::Error::InvalidArgument(format!("episode {} names unknown env {}", ep.episode_id, ep.env_id)))?;
        ep.validate(env)?;
    }
    Ok(episodes)
}

//! Offline datasets on disk: one JSONL file per task plus a manifest with
//! task metadata, score ranges, generation settings and content hashes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numfmt::{sig9, sig9_array};
use crate::tasks::{
    generate_dataset, normalized_score, score_range_oracle, ControllerGains, NoiseSchedule, TaskSpec, Trajectory,
};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationInfo {
    pub seed: u64,
    pub n_traj_per_task: usize,
    pub noise: NoiseSchedule,
    pub gains: ControllerGains,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DifficultyInfo {
    pub proxy: String,
    pub scores: BTreeMap<usize, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileEntry {
    pub task_id: usize,
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub generation: GenerationInfo,
    pub tasks: Vec<TaskSpec>,
    pub difficulty: DifficultyInfo,
    pub files: Vec<FileEntry>,
}

/// Per-task trajectory lists with their task specs (score ranges filled in).
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetStore {
    pub tasks: Vec<TaskSpec>,
    pub datasets: BTreeMap<usize, Vec<Trajectory>>,
    pub generation: GenerationInfo,
}

/// Round to the nearest value with nine significant digits so that JSON
/// output carries no more digits than the dataset files.
pub fn round9(x: f64) -> f64 {
    sig9(x).parse().expect("sig9 output parses")
}

impl DatasetStore {
    /// Score ranges from the controller/random oracles, then one dataset per
    /// task. Tasks are processed in parallel; results are keyed by task id.
    pub fn generate(tasks: &[TaskSpec], generation: GenerationInfo) -> Result<Self> {
        let built: Vec<(TaskSpec, Vec<Trajectory>)> = tasks
            .par_iter()
            .map(|t| {
                let mut spec = t.clone();
                let mut range = score_range_oracle(&spec, &generation.gains)?;
                range.r_min = round9(range.r_min);
                range.r_max = round9(range.r_max);
                spec.score_range = Some(range);
                spec.validate()?;
                let data = generate_dataset(
                    &spec,
                    generation.n_traj_per_task,
                    &generation.noise,
                    &generation.gains,
                    generation.seed,
                )?;
                Ok((spec, data))
            })
            .collect::<Result<_>>()?;
        let mut store = Self {
            tasks: Vec::with_capacity(built.len()),
            datasets: BTreeMap::new(),
            generation,
        };
        for (spec, data) in built {
            if store.datasets.insert(spec.task_id, data).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate task id {}", spec.task_id)));
            }
            store.tasks.push(spec);
        }
        Ok(store)
    }

    pub fn task(&self, task_id: usize) -> Result<&TaskSpec> {
        self.tasks
            .iter()
            .find(|t| t.task_id == task_id)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown task id {task_id}")))
    }

    pub fn dataset(&self, task_id: usize) -> Result<&[Trajectory]> {
        match self.datasets.get(&task_id) {
            Some(d) if !d.is_empty() => Ok(d),
            _ => Err(Error::EmptyDataset(task_id)),
        }
    }

    pub fn task_ids(&self) -> Vec<usize> {
        self.tasks.iter().map(|t| t.task_id).collect()
    }

    /// Keep only the listed tasks.
    pub fn subset(&self, task_ids: &[usize]) -> Result<Self> {
        let mut out = Self {
            tasks: Vec::new(),
            datasets: BTreeMap::new(),
            generation: self.generation.clone(),
        };
        for &id in task_ids {
            out.tasks.push(self.task(id)?.clone());
            out.datasets.insert(id, self.dataset(id)?.to_vec());
        }
        Ok(out)
    }

    /// Mean normalized return of each task's behaviour data.
    pub fn difficulty(&self) -> Result<BTreeMap<usize, f64>> {
        let mut out = BTreeMap::new();
        for t in &self.tasks {
            let data = self.dataset(t.task_id)?;
            let mut total = 0.0;
            for tr in data {
                total += normalized_score(t, tr.episode_return() as f64)?;
            }
            out.insert(t.task_id, round9(total / data.len() as f64));
        }
        Ok(out)
    }

    /// Write `manifest.json` and `datasets/task_<id>.jsonl` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<Manifest> {
        let data_dir = dir.join("datasets");
        fs::create_dir_all(&data_dir).map_err(|e| Error::io(&data_dir, e))?;
        let mut files = Vec::new();
        for t in &self.tasks {
            let rel = format!("datasets/task_{}.jsonl", t.task_id);
            let mut text = String::new();
            for tr in self.dataset(t.task_id)? {
                text.push_str(&trajectory_line(tr));
                text.push('\n');
            }
            let path = dir.join(&rel);
            fs::write(&path, text.as_bytes()).map_err(|e| Error::io(&path, e))?;
            files.push(FileEntry {
                task_id: t.task_id,
                path: rel,
                sha256: hex::encode(Sha256::digest(text.as_bytes())),
            });
        }
        let manifest = Manifest {
            version: MANIFEST_VERSION,
            generation: self.generation.clone(),
            tasks: self.tasks.clone(),
            difficulty: DifficultyInfo {
                proxy: "mean normalized return of the task's noisy scripted-controller dataset".into(),
                scores: self.difficulty()?,
            },
            files,
        };
        let path = dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(&manifest)?;
        fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }

    /// Read a store written by [`DatasetStore::write`], verifying every
    /// dataset file against its recorded hash.
    pub fn load(dir: &Path) -> Result<(Self, Manifest)> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::UnknownVersion {
                path,
                version: manifest.version,
            });
        }
        let mut datasets = BTreeMap::new();
        for f in &manifest.files {
            let p = dir.join(&f.path);
            let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
            if hex::encode(Sha256::digest(&bytes)) != f.sha256 {
                return Err(Error::HashMismatch { path: p });
            }
            let text = String::from_utf8(bytes).map_err(|e| Error::InvalidArgument(format!("{}: {e}", p.display())))?;
            let mut trajs = Vec::new();
            for line in text.lines().filter(|l| !l.is_empty()) {
                let tr = parse_trajectory_line(line)?;
                if tr.task_id != f.task_id {
                    return Err(Error::InvalidArgument(format!(
                        "{}: trajectory of task {} in file of task {}",
                        p.display(),
                        tr.task_id,
                        f.task_id
                    )));
                }
                trajs.push(tr);
            }
            datasets.insert(f.task_id, trajs);
        }
        for t in &manifest.tasks {
            t.validate()?;
            if !datasets.contains_key(&t.task_id) {
                return Err(Error::MissingArtifact(format!("dataset file for task {}", t.task_id)));
            }
        }
        if let Some(id) = datasets.keys().find(|id| !manifest.tasks.iter().any(|t| t.task_id == **id)) {
            return Err(Error::InvalidArgument(format!("dataset for task {id} missing from manifest")));
        }
        let store = Self {
            tasks: manifest.tasks.clone(),
            datasets,
            generation: manifest.generation.clone(),
        };
        Ok((store, manifest))
    }
}

fn rows(data: &[f32], width: usize) -> String {
    let parts: Vec<String> = data
        .chunks(width.max(1))
        .map(|r| sig9_array(r.iter().map(|&v| v as f64)))
        .collect();
    format!("[{}]", parts.join(","))
}

/// One JSON object per trajectory; every number has at most nine
/// significant digits.
pub fn trajectory_line(tr: &Trajectory) -> String {
    let steps: Vec<String> = tr.timesteps.iter().map(|t| t.to_string()).collect();
    format!(
        "{{\"task_id\":{},\"states\":{},\"actions\":{},\"rewards\":{},\"rtg\":{},\"timesteps\":[{}]}}",
        tr.task_id,
        rows(&tr.states, tr.state_dim),
        rows(&tr.actions, tr.action_dim),
        sig9_array(tr.rewards.iter().map(|&v| v as f64)),
        sig9_array(tr.rtg.iter().map(|&v| v as f64)),
        steps.join(",")
    )
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TrajectoryRecord {
    task_id: usize,
    states: Vec<Vec<f32>>,
    actions: Vec<Vec<f32>>,
    rewards: Vec<f32>,
    rtg: Vec<f32>,
    timesteps: Vec<usize>,
}

pub fn parse_trajectory_line(line: &str) -> Result<Trajectory> {
    let r: TrajectoryRecord = serde_json::from_str(line)?;
    let t = r.rewards.len();
    if r.states.len() != t || r.actions.len() != t || r.rtg.len() != t || r.timesteps.len() != t {
        return Err(Error::InvalidArgument(format!(
            "trajectory of task {} has inconsistent lengths",
            r.task_id
        )));
    }
    let state_dim = r.states.first().map_or(0, Vec::len);
    let action_dim = r.actions.first().map_or(0, Vec::len);
    if r.states.iter().any(|s| s.len() != state_dim) || r.actions.iter().any(|a| a.len() != action_dim) {
        return Err(Error::InvalidArgument(format!("ragged rows in trajectory of task {}", r.task_id)));
    }
    Ok(Trajectory {
        task_id: r.task_id,
        state_dim,
        action_dim,
        states: r.states.concat(),
        actions: r.actions.concat(),
        rewards: r.rewards,
        rtg: r.rtg,
        timesteps: r.timesteps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::build_suite;

    fn small_store(seed: u64) -> DatasetStore {
        let tasks = build_suite(1, 1, 1, 16);
        DatasetStore::generate(
            &tasks,
            GenerationInfo {
                seed,
                n_traj_per_task: 4,
                noise: NoiseSchedule::default(),
                gains: ControllerGains::default(),
            },
        )
        .unwrap()
    }

    #[test]
    fn line_round_trip_is_exact() {
        let store = small_store(3);
        for data in store.datasets.values() {
            for tr in data {
                assert_eq!(&parse_trajectory_line(&trajectory_line(tr)).unwrap(), tr);
            }
        }
    }

    #[test]
    fn write_load_and_regenerate_identically() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        small_store(5).write(a.path()).unwrap();
        small_store(5).write(b.path()).unwrap();
        for f in ["manifest.json", "datasets/task_0.jsonl", "datasets/task_2.jsonl"] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
        }
        let (loaded, manifest) = DatasetStore::load(a.path()).unwrap();
        assert_eq!(loaded, small_store(5));
        assert_eq!(manifest.files.len(), 3);
        assert!(manifest.tasks.iter().all(|t| t.score_range.is_some()));
    }

    #[test]
    fn tampered_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        small_store(1).write(dir.path()).unwrap();
        let p = dir.path().join("datasets/task_1.jsonl");
        let mut text = fs::read_to_string(&p).unwrap();
        text.push('\n');
        fs::write(&p, text).unwrap();
        assert!(matches!(DatasetStore::load(dir.path()), Err(Error::HashMismatch { .. })));
    }

    #[test]
    fn unknown_manifest_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        small_store(1).write(dir.path()).unwrap();
        let p = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&p).unwrap().replacen('{', "{\"extra\": 1,", 1);
        fs::write(&p, text).unwrap();
        assert!(matches!(DatasetStore::load(dir.path()), Err(Error::Json(_))));
    }

    #[test]
    fn rtg_head_is_episode_return() {
        let store = small_store(2);
        for data in store.datasets.values() {
            for tr in data {
                let total: f32 = tr.rewards.iter().sum();
                assert!((tr.rtg[0] - total).abs() <= 1e-4 * total.abs().max(1.0));
            }
        }
    }
}

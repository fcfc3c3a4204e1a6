//! Checkpoints: one `CLDT` blob per tensor plus `checkpoint.toml`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::optim::AdamState;
use super::trainer::{TrainConfig, TrainerState};
use crate::data::format::{read_blob, write_blob, Blob};
use crate::error::{Error, Result};
use crate::network::ModelParams;
use crate::tensor::Tensor;

pub const CHECKPOINT_FILE: &str = "checkpoint.toml";
pub const CHECKPOINT_VERSION: u32 = 1;

const GROUPS: [&str; 5] = ["student", "teacher", "reference", "adam_m", "adam_v"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub group: String,
    pub name: String,
    pub file: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub version: u32,
    pub iteration: u64,
    pub adam_steps: u64,
    pub config: TrainConfig,
    pub tensors: Vec<TensorEntry>,
}

fn groups(state: &TrainerState) -> [Vec<(&str, &Tensor<f32>)>; 5] {
    [
        state.student.iter().collect(),
        state.teacher.iter().collect(),
        state.reference.iter().collect(),
        state.adam.m.iter().map(|(k, v)| (k.as_str(), v)).collect(),
        state.adam.v.iter().map(|(k, v)| (k.as_str(), v)).collect(),
    ]
}

pub fn save_checkpoint(dir: &Path, state: &TrainerState, config: &TrainConfig) -> Result<CheckpointManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tensors = Vec::new();
    for (group, items) in GROUPS.iter().zip(groups(state)) {
        for (name, t) in items {
            let file = PathBuf::from(group).join(format!("{name}.cldt"));
            write_blob(&dir.join(&file), &Blob::F32(t.clone()))?;
            tensors.push(TensorEntry { group: group.to_string(), name: name.to_string(), file });
        }
    }
    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION,
        iteration: state.iteration,
        adam_steps: state.adam.steps,
        config: config.clone(),
        tensors,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let path = dir.join(CHECKPOINT_FILE);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_checkpoint_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(CHECKPOINT_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: CheckpointManifest =
        toml::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if m.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: version {} (expected {CHECKPOINT_VERSION})",
            path.display(),
            m.version
        )));
    }
    Ok(m)
}

pub fn load_checkpoint(dir: &Path) -> Result<(TrainerState, CheckpointManifest)> {
    let manifest = read_checkpoint_manifest(dir)?;
    let mut maps: BTreeMap<&str, BTreeMap<String, Tensor<f32>>> =
        GROUPS.iter().map(|g| (*g, BTreeMap::new())).collect();
    for e in &manifest.tensors {
        let slot = maps
            .get_mut(e.group.as_str())
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor group {}", e.group)))?;
        let path = dir.join(&e.file);
        slot.insert(e.name.clone(), read_blob(&path)?.into_f32(&path)?);
    }
    let net = &manifest.config.net;
    let mut take = |g: &str| maps.remove(g).unwrap_or_default();
    let student = ModelParams::from_tensors(net, take("student"))?;
    let teacher = ModelParams::from_tensors(net, take("teacher"))?;
    let reference = ModelParams::from_tensors(net, take("reference"))?;
    let adam = AdamState { m: take("adam_m"), v: take("adam_v"), steps: manifest.adam_steps };
    for (k, t) in student.iter() {
        for moments in [&adam.m, &adam.v] {
            match moments.get(k) {
                Some(m) if m.shape() == t.shape() => {}
                _ => return Err(Error::Checkpoint(format!("optimizer moments missing or misshapen for {k}"))),
            }
        }
    }
    let state = TrainerState { student, teacher, reference, adam, iteration: manifest.iteration };
    Ok((state, manifest))
}

/// Error unless a checkpoint written under `saved` can continue under `current`.
pub fn check_resume_compatible(saved: &TrainConfig, current: &TrainConfig) -> Result<()> {
    if saved.net != current.net {
        return Err(Error::Checkpoint(format!(
            "model mismatch: checkpoint {:?} vs config {:?}",
            saved.net, current.net
        )));
    }
    if saved.seed != current.seed {
        return Err(Error::Checkpoint(format!("seed mismatch: checkpoint {} vs config {}", saved.seed, current.seed)));
    }
    if saved.mode != current.mode {
        return Err(Error::Checkpoint("training mode differs from the checkpoint's".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::NetConfig;

    #[test]
    fn round_trip() {
        let mut cfg = TrainConfig::desk_default(3);
        cfg.net = NetConfig { widths: [2, 2, 2, 2], embed_dim: 3, num_classes: 3 };
        let mut state = TrainerState::init(&cfg.net, 4).unwrap();
        state.iteration = 7;
        state.adam.steps = 7;
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &state, &cfg).unwrap();
        let (back, m) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back, state);
        assert_eq!(m.config, cfg);
    }
}

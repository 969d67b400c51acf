//! Checkpoint directories.
//!
//! ```text
//! <dir>/manifest.json          {format_version, model_config, tensor_names, training?}
//! <dir>/tensors/<name>.mmtf    one per trainable tensor
//! <dir>/optim/{m,v}/<name>.mmtf  optimizer moments, present when `training` is
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mmtf::{read_tensor, write_tensor};
use crate::model::{ModelConfig, ModelParams};
use crate::optim::AdamWState;
use crate::params::ParamTree;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingProgress {
    pub epochs_done: usize,
    pub optimizer_step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub model_config: ModelConfig,
    pub tensor_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainingProgress>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub training: Option<(TrainingProgress, AdamWState)>,
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)? + "\n").map_err(|e| Error::io(path, e))
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn save_checkpoint(
    dir: impl AsRef<Path>,
    params: &ModelParams,
    config: &ModelConfig,
    training: Option<(TrainingProgress, &AdamWState)>,
) -> Result<()> {
    let dir = dir.as_ref();
    let named = params.named();
    mkdir(&dir.join("tensors"))?;
    for (name, t) in &named {
        write_tensor(dir.join("tensors").join(format!("{name}.mmtf")), t)?;
    }
    if let Some((_, state)) = training {
        if state.m.len() != named.len() {
            return Err(Error::Contract(format!(
                "optimizer has {} slots for {} tensors",
                state.m.len(),
                named.len()
            )));
        }
        for (sub, moments) in [("m", &state.m), ("v", &state.v)] {
            let d = dir.join("optim").join(sub);
            mkdir(&d)?;
            for ((name, t), mom) in named.iter().zip(moments) {
                write_tensor(d.join(format!("{name}.mmtf")), &Tensor::new(t.shape().to_vec(), mom.clone())?)?;
            }
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        model_config: config.clone(),
        tensor_names: named.iter().map(|(n, _)| n.clone()).collect(),
        training: training.map(|(p, _)| p),
    };
    write_json(&dir.join("manifest.json"), &manifest)
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let path = dir.as_ref().join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let raw: serde_json::Value = serde_json::from_str(&text)?;
    let found = raw.get("format_version").and_then(serde_json::Value::as_u64).unwrap_or(0) as u32;
    if found != FORMAT_VERSION {
        return Err(Error::Version { found, expected: FORMAT_VERSION });
    }
    Ok(serde_json::from_value(raw)?)
}

fn load_named(dir: &Path, name: &str, expected: &[usize]) -> Result<Tensor> {
    let path = dir.join(format!("{name}.mmtf"));
    if !path.exists() {
        return Err(Error::MissingTensor(name.to_string()));
    }
    let t = read_tensor(&path)?;
    if t.shape() != expected {
        return Err(Error::ShapeDrift { name: name.to_string(), expected: expected.to_vec(), found: t.shape().to_vec() });
    }
    Ok(t)
}

/// Loads and validates every tensor against the shapes the stored config implies.
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let config = manifest.model_config.clone();
    let mut params = ModelParams::init(&config)?;
    let listed: std::collections::BTreeSet<&str> = manifest.tensor_names.iter().map(String::as_str).collect();
    let mut loaded = BTreeMap::new();
    for (name, t) in params.named() {
        if !listed.contains(name.as_str()) {
            return Err(Error::MissingTensor(name));
        }
        let v = load_named(&dir.join("tensors"), &name, t.shape())?;
        loaded.insert(name, v);
    }
    if let Some(extra) = manifest.tensor_names.iter().find(|n| !loaded.contains_key(n.as_str())) {
        return Err(Error::Contract(format!("checkpoint lists tensor `{extra}` the model does not have")));
    }
    params.visit_mut("", &mut |name, t| *t = loaded.remove(name).expect("validated above").into_param());

    let training = match manifest.training {
        None => None,
        Some(progress) => {
            let mut state = AdamWState::new(&params);
            state.step = progress.optimizer_step;
            for (i, (name, t)) in params.named().into_iter().enumerate() {
                state.m[i] = load_named(&dir.join("optim").join("m"), &name, t.shape())?.to_vec();
                state.v[i] = load_named(&dir.join("optim").join("v"), &name, t.shape())?.to_vec();
            }
            Some((progress, state))
        }
    };
    Ok(Checkpoint { config, params, training })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig { h: 2, w: 2, d_model: 3, d_state: 2, depth: 1, num_classes: 2, ..ModelConfig::toy() }
    }

    #[test]
    fn round_trip_preserves_values() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        let p = ModelParams::init(&cfg).unwrap();
        let mut st = AdamWState::new(&p);
        st.step = 3;
        st.m[0][0] = 0.25;
        save_checkpoint(dir.path(), &p, &cfg, Some((TrainingProgress { epochs_done: 2, optimizer_step: 3 }, &st))).unwrap();
        let ck = load_checkpoint(dir.path()).unwrap();
        assert_eq!(ck.config, cfg);
        for ((na, a), (nb, b)) in p.named().into_iter().zip(ck.params.named()) {
            assert_eq!(na, nb);
            assert_eq!(a.data(), b.data());
            assert!(b.requires_grad());
        }
        let (prog, st2) = ck.training.unwrap();
        assert_eq!(prog.epochs_done, 2);
        assert_eq!(st2, st);
    }

    #[test]
    fn named_failures() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        let p = ModelParams::init(&cfg).unwrap();
        save_checkpoint(dir.path(), &p, &cfg, None).unwrap();
        let victim = dir.path().join("tensors/stem1.w.mmtf");
        write_tensor(&victim, &Tensor::zeros([5, 3])).unwrap();
        match load_checkpoint(dir.path()) {
            Err(Error::ShapeDrift { name, expected, found }) => {
                assert_eq!(name, "stem1.w");
                assert_eq!((expected, found), (vec![2, 3], vec![5, 3]));
            }
            other => panic!("{other:?}"),
        }
        fs::remove_file(&victim).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::MissingTensor(n)) if n == "stem1.w"));

        let mpath = dir.path().join("manifest.json");
        let text = fs::read_to_string(&mpath).unwrap().replace("\"format_version\": 1", "\"format_version\": 7");
        fs::write(&mpath, text).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Version { found: 7, expected: 1 })));
    }
}

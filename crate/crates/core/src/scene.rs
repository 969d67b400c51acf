//! Synthetic paired-modality scenes and their on-disk layout.
//!
//! Every pixel carries two hidden factors `u, v` drawn uniformly from
//! `0..m`. Modality 1 sees only `u`, modality 2 only `v`, and the label is
//! `(u + v) mod m`. Each `u` is compatible with every label, so either
//! modality alone recovers the label with probability `1/m` at best.
//!
//! A factor `k` is written into `c` channels as points on circles,
//! `cos(j * 2 pi k / m), sin(j * 2 pi k / m)` for `j = 1, 2, ...`; an odd last
//! channel (or a single channel) holds the level `2k/(m-1) - 1`.
//!
//! ```text
//! <dir>/index.json
//! <dir>/scene_0000/{x1,x2,labels,mask}.mmtf   [H,W,c1] [H,W,c2] [H,W] [H,W]
//! <dir>/scene_0000/{emb1,emb2}.mmtf           optional encoder embeddings
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mmtf::{read_tensor, write_tensor};
use crate::model::SampleInputs;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const VALID_FRACTION: f64 = 0.9;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    /// `[H, W, c1]`
    pub x1: Tensor,
    /// `[H, W, c2]`
    pub x2: Tensor,
    pub labels: Vec<usize>,
    pub mask: Vec<bool>,
    pub emb1: Option<Tensor>,
    pub emb2: Option<Tensor>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub h: usize,
    pub w: usize,
    pub classes: usize,
    pub c1: usize,
    pub c2: usize,
    pub noise: f64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.classes < 2 {
            problems.push(format!("classes must be >= 2, got {}", self.classes));
        }
        if self.h < 2 || self.w < 2 {
            problems.push(format!("scene must be at least 2x2, got {}x{}", self.h, self.w));
        }
        if self.c1 == 0 || self.c2 == 0 {
            problems.push("each modality needs at least one channel".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            problems.push(format!("noise must be a finite value >= 0, got {}", self.noise));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

pub fn label_rule(u: usize, v: usize, classes: usize) -> usize {
    (u + v) % classes
}

/// Noise-free channel values of factor `k` in `channels` channels.
pub fn encode_factor(k: usize, classes: usize, channels: usize) -> Vec<f64> {
    let theta = std::f64::consts::TAU * k as f64 / classes as f64;
    let mut out = Vec::with_capacity(channels);
    for j in 0..channels / 2 {
        let a = (j + 1) as f64 * theta;
        out.push(a.cos());
        out.push(a.sin());
    }
    if channels % 2 == 1 {
        out.push(2.0 * k as f64 / (classes - 1) as f64 - 1.0);
    }
    out
}

/// Nearest noise-free code for a pixel of one modality.
pub fn decode_factor(pixel: &[f64], classes: usize) -> usize {
    let dist = |k: usize| -> f64 {
        encode_factor(k, classes, pixel.len()).iter().zip(pixel).map(|(a, b)| (a - b) * (a - b)).sum()
    };
    (0..classes).min_by(|&a, &b| dist(a).total_cmp(&dist(b))).expect("classes >= 1")
}

pub fn gen_scene(seed: u64, spec: &SceneSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let rng = Rng::new(seed);
    let (m, t) = (spec.classes, spec.h * spec.w);
    let mut lat = rng.stream("latent");
    let u: Vec<usize> = (0..t).map(|_| lat.random_range(0..m)).collect();
    let v: Vec<usize> = (0..t).map(|_| lat.random_range(0..m)).collect();
    let normal = Normal::new(0.0, spec.noise.max(0.0)).expect("finite noise");
    let paint = |factor: &[usize], c: usize, name: &str| -> Result<Tensor> {
        let mut s = rng.stream(name);
        let mut d = Vec::with_capacity(t * c);
        for &k in factor {
            for x in encode_factor(k, m, c) {
                d.push(if spec.noise > 0.0 { x + normal.sample(&mut s) } else { x });
            }
        }
        Tensor::new([spec.h, spec.w, c], d)
    };
    let x1 = paint(&u, spec.c1, "noise1")?;
    let x2 = paint(&v, spec.c2, "noise2")?;
    let labels = u.iter().zip(&v).map(|(&a, &b)| label_rule(a, b, m)).collect();
    let mut ms = rng.stream("mask");
    let mut mask: Vec<bool> = (0..t).map(|_| ms.random_bool(VALID_FRACTION)).collect();
    if !mask.contains(&true) {
        mask[0] = true;
    }
    Ok(SyntheticScene { x1, x2, labels, mask, emb1: None, emb2: None })
}

impl SyntheticScene {
    /// Flattened model inputs; `zero` blanks modality 1 or 2 everywhere,
    /// encoder input included.
    pub fn inputs(&self, zero: Option<u8>) -> Result<SampleInputs> {
        let flat = |x: &Tensor| x.reshape([x.shape()[0] * x.shape()[1], x.shape()[2]]);
        let blank = |x: Tensor| Tensor::zeros(x.shape().to_vec());
        let (mut x1, mut x2) = (flat(&self.x1)?, flat(&self.x2)?);
        let (mut emb1, mut emb2) = (self.emb1.clone(), self.emb2.clone());
        match zero {
            None => {}
            Some(1) => {
                x1 = blank(x1);
                emb1 = emb1.map(blank);
            }
            Some(2) => {
                x2 = blank(x2);
                emb2 = emb2.map(blank);
            }
            Some(k) => return Err(Error::Config(format!("unimodal must be 1 or 2, got {k}"))),
        }
        Ok(SampleInputs { x1, x2, emb1, emb2 })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetIndex {
    pub seed: u64,
    pub spec: SceneSpec,
    pub scenes: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub index: DatasetIndex,
    pub scenes: Vec<SyntheticScene>,
}

pub fn scene_seed(seed: u64, i: usize) -> u64 {
    Rng::new(seed).child(&format!("scene{i}")).seed()
}

pub fn gen_dataset(seed: u64, spec: &SceneSpec, count: usize) -> Result<Dataset> {
    let scenes = (0..count).map(|i| gen_scene(scene_seed(seed, i), spec)).collect::<Result<Vec<_>>>()?;
    let names = (0..count).map(|i| format!("scene_{i:04}")).collect();
    Ok(Dataset { index: DatasetIndex { seed, spec: *spec, scenes: names }, scenes })
}

fn grid_tensor<T: Copy>(h: usize, w: usize, v: &[T], f: impl Fn(T) -> f64) -> Tensor {
    Tensor::new([h, w], v.iter().map(|&x| f(x)).collect()).expect("finite grid values")
}

pub fn save_dataset(dir: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    let dir = dir.as_ref();
    for (name, s) in ds.index.scenes.iter().zip(&ds.scenes) {
        let sd = dir.join(name);
        fs::create_dir_all(&sd).map_err(|e| Error::io(&sd, e))?;
        let (h, w) = (s.x1.shape()[0], s.x1.shape()[1]);
        write_tensor(sd.join("x1.mmtf"), &s.x1)?;
        write_tensor(sd.join("x2.mmtf"), &s.x2)?;
        write_tensor(sd.join("labels.mmtf"), &grid_tensor(h, w, &s.labels, |l| l as f64))?;
        write_tensor(sd.join("mask.mmtf"), &grid_tensor(h, w, &s.mask, |m| f64::from(u8::from(m))))?;
        if let Some(e) = &s.emb1 {
            write_tensor(sd.join("emb1.mmtf"), e)?;
        }
        if let Some(e) = &s.emb2 {
            write_tensor(sd.join("emb2.mmtf"), e)?;
        }
    }
    let path = dir.join("index.json");
    fs::write(&path, serde_json::to_string_pretty(&ds.index)? + "\n").map_err(|e| Error::io(&path, e))
}

fn read_optional(path: PathBuf) -> Result<Option<Tensor>> {
    if path.exists() {
        read_tensor(path).map(Some)
    } else {
        Ok(None)
    }
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let path = dir.join("index.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let index: DatasetIndex = serde_json::from_str(&text)?;
    let sp = index.spec;
    let mut scenes = Vec::with_capacity(index.scenes.len());
    for name in &index.scenes {
        let sd = dir.join(name);
        let x1 = read_tensor(sd.join("x1.mmtf"))?;
        let x2 = read_tensor(sd.join("x2.mmtf"))?;
        let labels_t = read_tensor(sd.join("labels.mmtf"))?;
        let mask_t = read_tensor(sd.join("mask.mmtf"))?;
        let grid = [sp.h, sp.w];
        if x1.shape() != [sp.h, sp.w, sp.c1] || x2.shape() != [sp.h, sp.w, sp.c2] || labels_t.shape() != grid || mask_t.shape() != grid {
            return Err(Error::Dimension(format!(
                "{name}: tensors {:?} {:?} {:?} {:?} do not match the index ({}x{}, c1={}, c2={})",
                x1.shape(),
                x2.shape(),
                labels_t.shape(),
                mask_t.shape(),
                sp.h,
                sp.w,
                sp.c1,
                sp.c2
            )));
        }
        let labels = labels_t
            .data()
            .iter()
            .map(|&l| {
                if l >= 0.0 && l.fract() == 0.0 && (l as usize) < sp.classes {
                    Ok(l as usize)
                } else {
                    Err(Error::Contract(format!("{name}: label {l} outside 0..{}", sp.classes)))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let mask = mask_t.data().iter().map(|&m| m != 0.0).collect();
        let emb1 = read_optional(sd.join("emb1.mmtf"))?;
        let emb2 = read_optional(sd.join("emb2.mmtf"))?;
        scenes.push(SyntheticScene { x1, x2, labels, mask, emb1, emb2 });
    }
    Ok(Dataset { index, scenes })
}

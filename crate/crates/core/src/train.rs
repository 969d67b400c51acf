//! Mini-batch training and evaluation over synthetic scenes.

use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::checkpoint::{load_checkpoint, save_checkpoint, TrainingProgress};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::{compute_metrics, ConfusionMatrix, Metrics};
use crate::model::{predict, softmax_rows, threshold_map, Model, ModelConfig, ModelParams, SampleInputs};
use crate::objective::{consistency_loss, supervised_loss, total_loss, LossWeights};
use crate::optim::{adamw_step, AdamWState};
use crate::params::ParamTree;
use crate::rng::Rng;
use crate::scene::{gen_dataset, load_dataset, SyntheticScene};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub sup: f64,
    pub unsup: f64,
    pub total: f64,
    pub train_oa: f64,
}

/// Loss values, gradients and fusion-head predictions of one sample.
pub struct SampleStep {
    pub sup: f64,
    pub unsup: f64,
    pub total: f64,
    pub grads: Vec<Tensor>,
    pub pred: Vec<usize>,
}

pub fn sample_step(
    model: &Model,
    params: &ModelParams,
    inputs: &SampleInputs,
    labels: &[usize],
    mask: &[bool],
    w: &LossWeights,
    consistency_masked: bool,
) -> Result<SampleStep> {
    let tape = Tape::new();
    let out = model.forward_sample(&tape, params, inputs)?;
    let sup = supervised_loss(out.logits1, out.logits2, out.logitsf, labels, mask)?;
    let unsup = consistency_loss(out.logits1, out.logits2, out.logitsf, consistency_masked.then_some(mask))?;
    let total = total_loss(sup, unsup, w)?;
    let grads = tape.backward(total)?;
    Ok(SampleStep {
        sup: sup.value().item(),
        unsup: unsup.value().item(),
        total: total.value().item(),
        grads: params.grads_in_order(&grads),
        pred: predict(&out.logitsf.value())?,
    })
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub model: Model,
    pub params: ModelParams,
    pub opt: AdamWState,
    pub epochs_done: usize,
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(cfg.model.clone())?;
        let params = ModelParams::init(&cfg.model)?;
        let opt = AdamWState::new(&params);
        Ok(Self { cfg, model, params, opt, epochs_done: 0 })
    }

    /// Continues from a checkpoint written by [`Trainer::save`].
    pub fn resume(cfg: RunConfig, dir: impl AsRef<Path>) -> Result<Self> {
        cfg.validate()?;
        let ck = load_checkpoint(dir)?;
        if ck.config != cfg.model {
            return Err(Error::Config("checkpoint model config differs from the run config".into()));
        }
        let (progress, opt) =
            ck.training.ok_or_else(|| Error::Config("checkpoint carries no optimizer state to resume".into()))?;
        let model = Model::new(cfg.model.clone())?;
        Ok(Self { cfg, model, params: ck.params, opt, epochs_done: progress.epochs_done })
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let progress = TrainingProgress { epochs_done: self.epochs_done, optimizer_step: self.opt.step };
        save_checkpoint(dir, &self.params, &self.cfg.model, Some((progress, &self.opt)))
    }

    /// Scene order of epoch `epoch` (1-based); depends only on the seed.
    pub fn epoch_order(&self, epoch: usize, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut Rng::new(self.cfg.seed).child("shuffle").stream(&format!("epoch{epoch}")));
        order
    }

    pub fn run_epoch(&mut self, scenes: &[SyntheticScene]) -> Result<EpochStats> {
        if scenes.is_empty() {
            return Err(Error::Contract("training on an empty dataset".into()));
        }
        let epoch = self.epochs_done + 1;
        let order = self.epoch_order(epoch, scenes.len());
        let adamw = self.cfg.optim.adamw();
        let mut cm = ConfusionMatrix::new(self.cfg.model.num_classes);
        let (mut sup, mut unsup, mut total) = (0.0, 0.0, 0.0);
        for batch in order.chunks(self.cfg.optim.batch) {
            let steps: Vec<SampleStep> = batch
                .par_iter()
                .map(|&i| {
                    let s = &scenes[i];
                    sample_step(
                        &self.model,
                        &self.params,
                        &s.inputs(None)?,
                        &s.labels,
                        &s.mask,
                        &self.cfg.loss,
                        self.cfg.consistency_masked,
                    )
                })
                .collect::<Result<_>>()?;
            let scale = 1.0 / steps.len() as f64;
            let mut acc: Vec<Vec<f64>> = steps[0].grads.iter().map(|g| vec![0.0; g.numel()]).collect();
            for (&i, st) in batch.iter().zip(&steps) {
                sup += st.sup;
                unsup += st.unsup;
                total += st.total;
                cm.accumulate(&scenes[i].labels, &st.pred, &scenes[i].mask)?;
                for (a, g) in acc.iter_mut().zip(&st.grads) {
                    for (x, y) in a.iter_mut().zip(g.data()) {
                        *x += y * scale;
                    }
                }
            }
            let grads: Vec<Tensor> = acc
                .into_iter()
                .zip(&steps[0].grads)
                .map(|(d, g)| Tensor::new(g.shape().to_vec(), d))
                .collect::<Result<_>>()?;
            adamw_step(&mut self.params, &grads, &mut self.opt, &adamw)?;
        }
        self.epochs_done = epoch;
        let n = scenes.len() as f64;
        Ok(EpochStats { epoch, sup: sup / n, unsup: unsup / n, total: total / n, train_oa: compute_metrics(&cm)?.oa })
    }
}

/// Training scenes named by the run config.
pub fn training_scenes(cfg: &RunConfig) -> Result<Vec<SyntheticScene>> {
    match (&cfg.data.path, &cfg.data.gen) {
        (Some(p), None) => {
            let ds = load_dataset(p)?;
            check_scenes(&cfg.model, &ds.scenes)?;
            Ok(ds.scenes)
        }
        (None, Some(g)) => Ok(gen_dataset(g.seed, &cfg.scene_spec(g.noise), g.count)?.scenes),
        _ => Err(Error::Config("data: exactly one of path or gen is required".into())),
    }
}

pub fn check_scenes(cfg: &ModelConfig, scenes: &[SyntheticScene]) -> Result<()> {
    for (i, s) in scenes.iter().enumerate() {
        if s.x1.shape() != [cfg.h, cfg.w, cfg.c1] || s.x2.shape() != [cfg.h, cfg.w, cfg.c2] {
            return Err(Error::Dimension(format!(
                "scene {i} is {:?}/{:?}, model expects [{}, {}, {}]/[{}, {}, {}]",
                s.x1.shape(),
                s.x2.shape(),
                cfg.h,
                cfg.w,
                cfg.c1,
                cfg.h,
                cfg.w,
                cfg.c2
            )));
        }
        if let Some(&l) = s.labels.iter().find(|&&l| l >= cfg.num_classes) {
            return Err(Error::Dimension(format!("scene {i} has label {l} for {} classes", cfg.num_classes)));
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub confusion: ConfusionMatrix,
    pub metrics: Metrics,
    pub predictions: Vec<Vec<usize>>,
    /// Per-scene confidence maps, when a threshold was requested.
    pub maps: Option<Vec<Vec<u8>>>,
}

/// Fusion-head metrics over the masked pixels of `scenes`. `unimodal = Some(k)`
/// keeps only modality `k` and blanks the other one.
pub fn evaluate(
    model: &Model,
    params: &ModelParams,
    scenes: &[SyntheticScene],
    unimodal: Option<u8>,
    tau: Option<f64>,
) -> Result<Evaluation> {
    check_scenes(&model.config, scenes)?;
    let zero = match unimodal {
        None => None,
        Some(1) => Some(2),
        Some(2) => Some(1),
        Some(k) => return Err(Error::Config(format!("unimodal must be 1 or 2, got {k}"))),
    };
    let per: Vec<(Vec<usize>, Option<Vec<u8>>)> = scenes
        .par_iter()
        .map(|s| {
            let tape = Tape::new();
            let out = model.forward_sample(&tape, params, &s.inputs(zero)?)?;
            let logits = out.logitsf.value();
            let map = tau.map(|t| threshold_map(&softmax_rows(&logits), t)).transpose()?;
            Ok((predict(&logits)?, map))
        })
        .collect::<Result<_>>()?;
    let mut cm = ConfusionMatrix::new(model.config.num_classes);
    for (s, (pred, _)) in scenes.iter().zip(&per) {
        cm.accumulate(&s.labels, pred, &s.mask)?;
    }
    let metrics = compute_metrics(&cm)?;
    let (predictions, maps): (Vec<_>, Vec<_>) = per.into_iter().unzip();
    let maps = tau.map(|_| maps.into_iter().map(Option::unwrap).collect());
    Ok(Evaluation { confusion: cm, metrics, predictions, maps })
}

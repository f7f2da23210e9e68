//! Downstream segmentation training, evaluation and model files.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::load_backbone_weights;
use crate::datasets::{load_checkpoint, save_checkpoint, Checkpoint, Sample, StoredTensor};
use crate::error::{invalid, Error, Result};
use crate::metrics::{confusion, ConfusionCounts, EvalReport};
use crate::model::{ModelConfig, Segmenter, ARCH_TENSOR};
use crate::numerics::{Adam, Graph, ParamStore, Tensor};
use crate::objective::{fuse_prediction, loss_with, FuseMode, FusedMask};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Also supervise every intermediate decoder mask.
    pub deep_supervision: bool,
    /// Validation period in steps; 0 validates only after the last step.
    pub val_every: usize,
    pub fuse: FuseMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            lr: 1e-3,
            batch_size: 4,
            deep_supervision: false,
            val_every: 100,
            fuse: FuseMode::Normalized,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid!("train batch_size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid!("train learning rate must be positive"));
        }
        Ok(())
    }
}

/// A segmenter with its parameters.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub net: Segmenter,
    pub params: ParamStore<f32>,
}

impl TrainedModel {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let net = Segmenter::new(config, &mut params, &mut ChaCha8Rng::seed_from_u64(seed))?;
        Ok(TrainedModel { net, params })
    }

    pub fn config(&self) -> &ModelConfig {
        self.net.config()
    }

    /// Copy backbone weights from a pretraining checkpoint.
    pub fn init_backbone(&mut self, ckpt: &Checkpoint) -> Result<usize> {
        load_backbone_weights(&mut self.params, ckpt.f32_tensors())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::from_store(&self.params, "");
        c.push(ARCH_TENSOR, StoredTensor::F64(self.config().to_tensor()));
        c
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let arch = ckpt
            .f64(ARCH_TENSOR)
            .ok_or_else(|| Error::Checkpoint(format!("no {ARCH_TENSOR} tensor, not a model checkpoint")))?;
        let config = ModelConfig::from_tensor(arch)?;
        let mut m = Self::new(&config, 0)?;
        m.params.load_prefix("", ckpt.f32_tensors())?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.to_checkpoint())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&load_checkpoint(path)?).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Fused binary mask for one `[3, H, W]` image.
    pub fn predict(&self, image: &Tensor<f32>, mode: FuseMode, threshold: f64) -> Result<FusedMask> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(image.clone());
        let pred = self.net.forward(&mut g, &p, x)?;
        fuse_prediction(&g, &pred, mode, threshold)
    }
}

fn mask_bits(mask: &Tensor<f32>) -> Vec<bool> {
    mask.data().iter().map(|&v| v > 0.5).collect()
}

fn labeled<'a>(samples: &'a [Sample], what: &str) -> Result<Vec<(&'a Tensor<f32>, &'a Tensor<f32>)>> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            s.mask
                .as_ref()
                .map(|m| (&s.image, m))
                .ok_or_else(|| Error::Data(format!("{what} sample {i} has no mask")))
        })
        .collect()
}

/// Micro-averaged scores of `model` on labelled `samples`.
pub fn evaluate_model(
    model: &TrainedModel,
    samples: &[Sample],
    fold: &str,
    mode: FuseMode,
    threshold: f64,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Data(format!("fold {fold} is empty")));
    }
    let mut total = ConfusionCounts::default();
    for (image, mask) in labeled(samples, fold)? {
        let fused = model.predict(image, mode, threshold)?;
        total += confusion(&fused.mask, &mask_bits(mask))?;
    }
    Ok(EvalReport::from_counts(fold, samples.len(), total))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainLogRow {
    pub step: usize,
    pub loss: f64,
    pub val_iou: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: TrainedModel,
    pub log: Vec<TrainLogRow>,
    /// Validation IoU after the last step, when a validation fold was given.
    pub final_val_iou: Option<f64>,
}

/// Train `model` in place on `train`, validating on `val`.
pub fn train(
    mut model: TrainedModel,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    seed: u64,
    mut on_step: impl FnMut(&TrainLogRow) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training fold is empty".into()));
    }
    let data = labeled(train, "training")?;
    labeled(val, "validation")?;
    let targets: Vec<Tensor<f32>> = data.iter().map(|(_, m)| (*m).clone()).collect();
    let mut opt = Adam::new(&model.params, cfg.lr);
    let mut order_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::with_capacity(cfg.steps);
    let mut final_val_iou = None;

    for step in 0..cfg.steps {
        let mut g = Graph::new();
        let p = model.params.bind(&mut g, true);
        let mut total = None;
        for _ in 0..cfg.batch_size {
            if order.is_empty() {
                order = (0..data.len()).collect();
                order.shuffle(&mut order_rng);
            }
            let i = order.pop().expect("refilled");
            let x = g.constant(data[i].0.clone());
            let pred = model.net.forward(&mut g, &p, x)?;
            let l = loss_with(&mut g, &pred, &targets[i], cfg.deep_supervision)?.total;
            total = Some(match total {
                Some(t) => g.add(t, l)?,
                None => l,
            });
        }
        let loss = g.scale(total.expect("batch_size > 0"), 1.0 / cfg.batch_size as f64);
        let value = g.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("training loss {value} at step {step}")));
        }
        let grads = g.backward(loss)?;
        drop(g);
        opt.step(&mut model.params, &p, &grads);

        let last = step + 1 == cfg.steps;
        let due = last || (cfg.val_every > 0 && (step + 1) % cfg.val_every == 0);
        let val_iou = if due && !val.is_empty() {
            Some(evaluate_model(&model, val, "val", cfg.fuse, 0.5)?.iou)
        } else {
            None
        };
        if last {
            final_val_iou = val_iou;
        }
        let row = TrainLogRow { step, loss: value, val_iou };
        on_step(&row)?;
        log.push(row);
    }
    Ok(TrainOutcome { model, log, final_val_iou })
}

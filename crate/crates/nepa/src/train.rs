//! Pretraining loop.
//!
//! A batch is split into [`SHARD_SIZE`] shards; each shard runs on its own
//! tape and the weighted shard gradients are summed in shard order. Every
//! random draw is keyed on `(seed, step, shard)` or `(seed, step, sample)`,
//! so a run is a pure function of its config and seed and can be resumed
//! from any checkpoint.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::data::{batch_iter, normalize_pixel, resize_bilinear, sample_crop, Dataset};
use crate::error::{Error, Result};
use crate::objective::{normalized_target_std, Objective, ObjectiveConfig};
use crate::optim::checkpoint::{CheckpointMeta, TrainState};
use crate::optim::{lr_at, AdamW, AdamWConfig, Ema, ScheduleConfig, EMA_DECAY};
use crate::parallel::{shard_ranges, Exec, SHARD_SIZE};
use crate::params::{Bound, ParamInfo, ParamSet};
use crate::rng::{keyed, Domain};
use crate::tensor::{Element, Tape, Tensor, Var};

pub const PRETRAIN_KIND: &str = "pretrain";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub backbone: BackboneConfig,
    pub objective: ObjectiveConfig,
    pub optimizer: AdamWConfig,
    pub schedule: ScheduleConfig,
    /// Averaging decay; `None` (written `0`) disables the EMA copy.
    #[serde(with = "crate::optim::optional_decay")]
    pub ema_decay: Option<f64>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            objective: ObjectiveConfig::default(),
            optimizer: AdamWConfig::default(),
            schedule: ScheduleConfig::default(),
            ema_decay: Some(EMA_DECAY),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.objective.validate()?;
        self.optimizer.validate("optimizer")?;
        self.schedule.validate("schedule")?;
        if let Some(d) = self.ema_decay {
            if !(0.0..1.0).contains(&d) {
                return Err(Error::Config(format!("ema_decay: must be in [0, 1), got {d}")));
            }
        }
        if self.objective.shift && self.backbone.num_patches() < 2 {
            return Err(Error::Config(
                "backbone.patch_size: shifted prediction needs at least 2 patches".into(),
            ));
        }
        Ok(())
    }
}

/// Supplies model-ready `[B, C, H, W]` batches as a function of `(seed, step)`.
pub trait ImageSource: Sync {
    fn batch<E: Element>(&self, seed: u64, step: u64, batch_size: usize) -> Result<Tensor<E>>;
}

/// Fresh standard-normal images every step.
#[derive(Clone, Copy, Debug)]
pub struct NoiseImages {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageSource for NoiseImages {
    fn batch<E: Element>(&self, seed: u64, step: u64, batch_size: usize) -> Result<Tensor<E>> {
        let mut rng = keyed(seed, Domain::Noise, step, 0);
        Ok(Tensor::randn(
            [batch_size, self.channels, self.height, self.width],
            1.0,
            &mut rng,
        ))
    }
}

/// Shuffled epochs over a dataset, optionally with random resized crops.
#[derive(Clone, Copy, Debug)]
pub struct DatasetSource<'a> {
    pub data: &'a Dataset,
    pub rrc_scale: Option<(f64, f64)>,
}

impl DatasetSource<'_> {
    pub fn steps_per_epoch(&self, batch_size: usize) -> u64 {
        (self.data.len() / batch_size.max(1)) as u64
    }
}

impl ImageSource for DatasetSource<'_> {
    fn batch<E: Element>(&self, seed: u64, step: u64, batch_size: usize) -> Result<Tensor<E>> {
        let per_epoch = self.steps_per_epoch(batch_size);
        if per_epoch == 0 {
            return Err(Error::Data(format!(
                "dataset of {} images cannot fill a batch of {batch_size}",
                self.data.len()
            )));
        }
        let order = batch_iter(self.data.len(), batch_size, seed, step / per_epoch);
        let indices = &order[(step % per_epoch) as usize];
        let Some(scale) = self.rrc_scale else {
            return Ok(self.data.batch::<E>(indices)?.0);
        };
        let imgs = indices
            .iter()
            .enumerate()
            .map(|(i, &idx)| {
                let px = &self.data.samples[idx].pixels;
                let (h, w) = (px.shape()[1], px.shape()[2]);
                let mut rng = keyed(seed, Domain::Augment, step, i as u64);
                let rect = sample_crop(h, w, scale, &mut rng);
                Ok(resize_bilinear(px, rect, h, w)?.map(normalize_pixel).cast())
            })
            .collect::<Result<Vec<Tensor<E>>>>()?;
        Tensor::stack(&imgs)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    /// Completed optimizer steps after this one.
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

/// Model, optimizer and averaging state of one pretraining run.
#[derive(Clone, Debug)]
pub struct Pretrainer<E: Element> {
    pub config: PretrainConfig,
    pub backbone: Backbone,
    pub objective: Objective,
    pub params: ParamSet<E>,
    pub adam: AdamW<E>,
    pub ema: Option<Ema>,
    pub seed: u64,
    pub step: u64,
    pub exec: Exec,
}

impl<E: Element> Pretrainer<E> {
    pub fn new(config: PretrainConfig, seed: u64, exec: Exec) -> Result<Self> {
        config.validate()?;
        let mut rng = keyed(seed, Domain::Init, 0, 0);
        let mut params = ParamSet::new();
        let backbone = Backbone::init(&config.backbone, &mut params, &mut rng)?;
        let objective = Objective::init(&config.objective, config.backbone.dim, &mut params, &mut rng)?;
        let adam = AdamW::new(config.optimizer.clone(), &params);
        let ema = config.ema_decay.map(|d| Ema::new(d, &params));
        Ok(Self {
            config,
            backbone,
            objective,
            params,
            adam,
            ema,
            seed,
            step: 0,
            exec,
        })
    }

    /// Restores a run from checkpoint bytes written by [`Pretrainer::state`].
    pub fn resume(config: PretrainConfig, bytes: &[u8], exec: Exec) -> Result<Self> {
        let meta = crate::optim::checkpoint::read_meta(bytes)?;
        if meta.kind != PRETRAIN_KIND {
            return Err(Error::Checkpoint(format!(
                "expected a {PRETRAIN_KIND} checkpoint, got `{}`",
                meta.kind
            )));
        }
        let mut run = Self::new(config, meta.seed, exec)?;
        let state = TrainState::from_bytes(bytes, &run.params)?;
        run.adam = state
            .adam
            .ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state".into()))?;
        if state.ema.is_some() != run.ema.is_some() {
            return Err(Error::Checkpoint("EMA presence differs from the config".into()));
        }
        run.ema = state.ema;
        run.params = state.params;
        run.step = meta.step;
        Ok(run)
    }

    /// Snapshot for checkpointing. `config` is stored verbatim in the metadata.
    pub fn state(&self, config: serde_json::Value) -> TrainState<E> {
        TrainState {
            params: self.params.clone(),
            adam: Some(self.adam.clone()),
            ema: self.ema.clone(),
            meta: CheckpointMeta {
                kind: PRETRAIN_KIND.into(),
                step: self.step,
                seed: self.seed,
                optimizer: Some(self.adam.config.clone()),
                adam_t: self.adam.t,
                ema_decay: self.ema.as_ref().map(|e| e.decay),
                config,
            },
        }
    }

    /// Weights used for evaluation: the EMA copy when enabled.
    pub fn eval_params(&self) -> Result<ParamSet<E>> {
        match &self.ema {
            Some(e) => e.params(&self.params),
            None => Ok(self.params.clone()),
        }
    }

    /// Batch-mean loss and its gradient for every parameter.
    pub fn loss_and_grads(&self, images: &Tensor<E>, step: u64) -> Result<(f64, Vec<Option<Tensor<E>>>)> {
        let b = images.shape().first().copied().unwrap_or(0);
        sharded_grads(self.exec, &self.params, b, |_| true, |tape, bound, si, r| {
            let x = images.narrow_axis0(r.start, r.len())?;
            let patches = tape.constant(self.backbone.patchify(&x)?);
            let mut rng = keyed(self.seed, Domain::Mask, step, si as u64);
            let (loss, _) = self
                .objective
                .forward(tape, bound, &self.backbone, patches, &mut rng)?;
            Ok(loss)
        })
    }

    /// One optimizer step on `images` using the scheduled learning rate.
    pub fn train_step(&mut self, images: &Tensor<E>) -> Result<StepRecord> {
        let lr = lr_at(self.step, &self.config.schedule);
        let (loss, grads) = self.loss_and_grads(images, self.step)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss at step {}", self.step)));
        }
        let scale = vec![1.0; self.params.len()];
        self.adam.step(&mut self.params, &grads, lr, &scale)?;
        if let Some(e) = self.ema.as_mut() {
            e.update(&self.params)?;
        }
        self.step += 1;
        Ok(StepRecord {
            step: self.step,
            lr,
            loss,
        })
    }

    /// Draws the batch for the current step from `source` and trains on it.
    pub fn step_from<S: ImageSource>(&mut self, source: &S) -> Result<StepRecord> {
        let images = source.batch::<E>(self.seed, self.step, self.config.schedule.batch_size)?;
        self.train_step(&images)
    }

    /// Loss and normalized-target spread on `images` with the live weights,
    /// without masking.
    pub fn diagnostics(&self, images: &Tensor<E>) -> Result<(f64, f64)> {
        let tape = Tape::new();
        let bound = self.params.bind_frozen(&tape);
        let seq = self.backbone.forward(&tape, &bound, images, false)?;
        let cfg = ObjectiveConfig {
            mask_ratio: 0.0,
            ..self.objective.config.clone()
        };
        let loss = crate::objective::nepa_loss(seq.z, seq.h_out, &cfg)?;
        Ok((loss.value().item().as_f64(), normalized_target_std(&seq.z.value())?))
    }
}

/// Splits a batch of `batch` samples into [`SHARD_SIZE`] shards, evaluates
/// `shard_loss(tape, bound, shard_index, range)` (a mean over the shard) on
/// a fresh tape per shard, and returns the batch-mean loss with gradients
/// summed in shard order. Parameters rejected by `trainable` get `None`.
pub fn sharded_grads<E, T, F>(
    exec: Exec,
    params: &ParamSet<E>,
    batch: usize,
    trainable: T,
    shard_loss: F,
) -> Result<(f64, Vec<Option<Tensor<E>>>)>
where
    E: Element,
    T: Fn(&ParamInfo) -> bool + Sync,
    F: for<'t> Fn(&'t Tape<E>, &Bound<'t, E>, usize, Range<usize>) -> Result<Var<'t, E>> + Sync,
{
    if batch == 0 {
        return Err(Error::Data("empty batch".into()));
    }
    let shards = shard_ranges(batch, SHARD_SIZE);
    let parts = exec.try_map(shards.len(), |si| {
        let r = shards[si].clone();
        let tape = Tape::new();
        let bound = params.bind(&tape, &trainable);
        let loss = shard_loss(&tape, &bound, si, r.clone())?;
        let loss = loss.scale(r.len() as f64 / batch as f64);
        let grads = tape.backward(loss)?;
        Ok((loss.value().item().as_f64(), bound.grads(&grads)))
    })?;
    let mut total = 0.0;
    let mut sum: Vec<Option<Tensor<E>>> = vec![None; params.len()];
    for (loss, grads) in parts {
        total += loss;
        for (acc, g) in sum.iter_mut().zip(grads) {
            match (acc.as_mut(), g) {
                (Some(a), Some(g)) => {
                    for (a, &g) in a.data_mut().iter_mut().zip(g.data()) {
                        *a += g;
                    }
                }
                (None, g) => *acc = g,
                (Some(_), None) => {}
            }
        }
    }
    Ok((total, sum))
}

//! Classification transfer: a linear head on the last output embedding,
//! end-to-end fine-tuning and linear probing of frozen features.

use serde::{Deserialize, Serialize};

use crate::analysis::MetricRow;
use crate::backbone::{AttentionMode, Backbone, BackboneConfig};
use crate::data::{
    batch_iter, eval_batches, mixup_cutmix, normalize_pixel, resize_bilinear, sample_crop, smooth_labels,
    AugmentConfig, Dataset,
};
use crate::error::{Error, Result};
use crate::optim::{llrd_factor, lr_at, AdamW, AdamWConfig, Ema, ScheduleConfig};
use crate::parallel::{shard_ranges, Exec, SHARD_SIZE};
use crate::params::{Bound, ParamId, ParamSet};
use crate::rng::{keyed, Domain};
use crate::tensor::{Element, Tape, Tensor, Var};
use crate::train::sharded_grads;

pub const HEAD_INIT_STD: f64 = 0.01;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// The final position's output.
    #[default]
    Last,
    /// Mean over positions.
    Avg,
}

impl Pooling {
    pub fn name(self) -> &'static str {
        match self {
            Pooling::Last => "last",
            Pooling::Avg => "avg",
        }
    }
}

/// `[B, T, D]` → `[B, D]`.
pub fn pool<'t, E: Element>(h: Var<'t, E>, pooling: Pooling) -> Result<Var<'t, E>> {
    let s = h.shape();
    if s.len() != 3 || s[1] == 0 {
        return Err(Error::shape("pool", &s, &[0, 1, 0]));
    }
    match pooling {
        Pooling::Last => h.slice(1, s[1] - 1..s[1])?.reshape(&[s[0], s[2]]),
        Pooling::Avg => h.mean_axis(1),
    }
}

/// Mean over rows of `−Σₖ targetₖ · log softmax(logits)ₖ`.
pub fn soft_cross_entropy<'t, E: Element>(logits: Var<'t, E>, targets: Var<'t, E>) -> Result<Var<'t, E>> {
    let b = logits.shape()[0] as f64;
    Ok(logits.log_softmax()?.mul(targets)?.sum().scale(-1.0 / b))
}

/// Backbone plus a linear head registered in the same parameter set.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub backbone: Backbone,
    pub head_weight: ParamId,
    pub head_bias: ParamId,
    pub num_classes: usize,
    pub pooling: Pooling,
}

impl Classifier {
    /// Registers `head.weight` (normal, `std`) and a zero `head.bias` at the
    /// top layer-decay group.
    pub fn init<E: Element, R: rand::Rng + ?Sized>(
        backbone: Backbone,
        params: &mut ParamSet<E>,
        num_classes: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::Config("finetune: dataset has no classes".into()));
        }
        let top = backbone.num_layers();
        let d = backbone.config().dim;
        let w = Tensor::randn([d, num_classes], std, rng);
        let head_weight = params.register("head.weight", w, top, true)?;
        let head_bias = params.register("head.bias", Tensor::zeros([num_classes]), top, false)?;
        Ok(Self {
            backbone,
            head_weight,
            head_bias,
            num_classes,
            pooling: Pooling::Last,
        })
    }

    pub fn logits<'t, E: Element>(
        &self,
        tape: &'t Tape<E>,
        bound: &Bound<'t, E>,
        images: &Tensor<E>,
    ) -> Result<Var<'t, E>> {
        let seq = self.backbone.forward(tape, bound, images, false)?;
        pool(seq.h_out, self.pooling)?
            .matmul(bound[self.head_weight])?
            .add_broadcast(bound[self.head_bias])
    }

    /// Predicted classes for every sample, evaluated in shards.
    pub fn predict<E: Element>(&self, params: &ParamSet<E>, data: &Dataset, exec: Exec) -> Result<Vec<usize>> {
        let batches = eval_batches(data.len(), SHARD_SIZE);
        let parts = exec.try_map(batches.len(), |i| {
            let (x, _) = data.batch::<E>(&batches[i])?;
            let tape = Tape::new();
            let bound = params.bind_frozen(&tape);
            let l = self.logits(&tape, &bound, &x)?.value();
            Ok(argmax_rows(&l))
        })?;
        Ok(parts.concat())
    }

    pub fn accuracy<E: Element>(&self, params: &ParamSet<E>, data: &Dataset, exec: Exec) -> Result<f64> {
        let pred = self.predict(params, data, exec)?;
        Ok(accuracy(&pred, data))
    }
}

fn argmax_rows<E: Element>(t: &Tensor<E>) -> Vec<usize> {
    let k = t.shape()[1];
    t.data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

fn accuracy(pred: &[usize], data: &Dataset) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let hits = pred.iter().zip(&data.samples).filter(|(p, s)| **p == s.label).count();
    hits as f64 / data.len() as f64
}

/// Copies every backbone tensor of `cfg` by name out of `source` (which may
/// hold extra tensors such as a mask token) into a fresh parameter set.
pub fn backbone_from_params<E: Element>(cfg: &BackboneConfig, source: &ParamSet<E>) -> Result<(Backbone, ParamSet<E>)> {
    let mut rng = keyed(0, Domain::Init, 0, 0);
    let mut params = ParamSet::new();
    let backbone = Backbone::init(cfg, &mut params, &mut rng)?;
    for id in params.ids().collect::<Vec<_>>() {
        let name = params.info(id).name.clone();
        let t = source
            .by_name(&name)
            .ok_or_else(|| Error::Config(format!("backbone: pretrained weights lack `{name}`")))?;
        if t.shape() != params.get(id).shape() {
            return Err(Error::Config(format!(
                "backbone: `{name}` has shape {:?}, config expects {:?}",
                t.shape(),
                params.get(id).shape()
            )));
        }
        params.set(id, t.clone())?;
    }
    Ok((backbone, params))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub attention_mode: AttentionMode,
    pub freeze_patch_embed: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: f64,
    /// Layer decay ramps from `llrd_start` to `llrd_end` over training.
    pub llrd_start: f64,
    pub llrd_end: f64,
    pub optimizer: AdamWConfig,
    pub augment: AugmentConfig,
    /// Accepted for config compatibility; stochastic depth is not applied.
    pub drop_path_rate: f64,
    pub head_init_std: f64,
    /// When set (nonzero), an averaged copy is kept and evaluated alongside.
    #[serde(with = "crate::optim::optional_decay")]
    pub ema_decay: Option<f64>,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            attention_mode: AttentionMode::Bidirectional,
            freeze_patch_embed: true,
            epochs: 5,
            batch_size: 64,
            base_lr: 1e-3,
            min_lr: 1e-6,
            warmup_epochs: 1.0,
            llrd_start: 0.35,
            llrd_end: 1.0,
            optimizer: AdamWConfig {
                beta2: 0.999,
                ..Default::default()
            },
            augment: AugmentConfig::default(),
            drop_path_rate: 0.0,
            head_init_std: HEAD_INIT_STD,
            ema_decay: None,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, m: String| Err(Error::Config(format!("finetune.{f}: {m}")));
        if self.batch_size == 0 || !self.batch_size.is_multiple_of(2) {
            return bad("batch_size", format!("must be positive and even, got {}", self.batch_size));
        }
        if !(self.warmup_epochs >= 0.0 && self.warmup_epochs <= self.epochs as f64) {
            return bad("warmup_epochs", format!("must be in [0, epochs], got {}", self.warmup_epochs));
        }
        if !(self.head_init_std >= 0.0) {
            return bad("head_init_std", "must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.drop_path_rate) {
            return bad("drop_path_rate", "must be in [0, 1)".into());
        }
        if let Some(d) = self.ema_decay {
            if !(0.0..1.0).contains(&d) {
                return bad("ema_decay", format!("must be in [0, 1), got {d}"));
            }
        }
        self.optimizer.validate("finetune.optimizer")?;
        self.augment.validate("finetune.augment")?;
        self.schedule(1).validate("finetune")
    }

    /// Step schedule for `steps_per_epoch` optimizer steps per epoch.
    pub fn schedule(&self, steps_per_epoch: u64) -> ScheduleConfig {
        ScheduleConfig {
            base_lr: self.base_lr,
            batch_size: self.batch_size,
            warmup_steps: (self.warmup_epochs * steps_per_epoch as f64).round() as u64,
            total_steps: (self.epochs as u64 * steps_per_epoch).max(1),
            min_lr: self.min_lr,
            llrd_start: self.llrd_start,
            llrd_end: self.llrd_end,
        }
    }
}

pub struct FinetuneOutcome<E: Element> {
    pub classifier: Classifier,
    pub params: ParamSet<E>,
    pub ema: Option<Ema>,
    pub trace: Vec<MetricRow>,
    /// Test accuracy of the raw fine-tuned weights after the last epoch.
    pub test_accuracy: f64,
}

fn is_patch_embed(name: &str) -> bool {
    name.starts_with("patch_embed.")
}

/// Model-ready augmented batch: random resized crops, smoothed labels, then
/// mixup or cutmix. Every draw is keyed on `(seed, step)`.
fn train_batch<E: Element>(
    data: &Dataset,
    indices: &[usize],
    cfg: &AugmentConfig,
    seed: u64,
    step: u64,
) -> Result<(Tensor<E>, Tensor<E>)> {
    let imgs = indices
        .iter()
        .enumerate()
        .map(|(i, &idx)| {
            let px = &data.samples[idx].pixels;
            let px = if cfg.rrc {
                let (h, w) = (px.shape()[1], px.shape()[2]);
                let mut rng = keyed(seed, Domain::Augment, step, i as u64);
                resize_bilinear(px, sample_crop(h, w, cfg.rrc_scale, &mut rng), h, w)?
            } else {
                px.clone()
            };
            Ok(px.map(normalize_pixel).cast())
        })
        .collect::<Result<Vec<Tensor<E>>>>()?;
    let mut images = Tensor::stack(&imgs)?;
    let labels: Vec<usize> = indices.iter().map(|&i| data.samples[i].label).collect();
    let mut targets = smooth_labels::<E>(&labels, cfg.label_smoothing, data.num_classes())?;
    let mut rng = keyed(seed, Domain::Mix, step, 0);
    mixup_cutmix(&mut images, &mut targets, cfg, &mut rng)?;
    Ok((images, targets))
}

/// Trains a fresh head and the (unfrozen) backbone on `train`, evaluating on
/// `test` after every epoch. Rows: `train/loss`, `test/accuracy` and, with
/// averaging enabled, `test/accuracy_ema`.
#[allow(clippy::too_many_arguments)]
pub fn finetune<E: Element>(
    backbone: Backbone,
    backbone_params: ParamSet<E>,
    train: &Dataset,
    test: &Dataset,
    cfg: &FinetuneConfig,
    seed: u64,
    exec: Exec,
    mut on_row: impl FnMut(&MetricRow),
) -> Result<FinetuneOutcome<E>> {
    cfg.validate()?;
    let bc = backbone.config().clone();
    for ds in [train, test] {
        ds.check_geometry(bc.channels, bc.image_size, bc.image_width())
            .map_err(|e| Error::Config(format!("backbone.image_size: {e}")))?;
    }
    if cfg.drop_path_rate > 0.0 {
        log::warn!("finetune.drop_path_rate = {} is accepted but not applied", cfg.drop_path_rate);
    }
    let backbone = backbone.with_attention_mode(cfg.attention_mode);
    let mut params = backbone_params;
    let mut rng = keyed(seed, Domain::Init, 1, 0);
    let clf = Classifier::init(backbone, &mut params, train.num_classes(), cfg.head_init_std, &mut rng)?;
    let per_epoch = (train.len() / cfg.batch_size) as u64;
    if per_epoch == 0 && cfg.epochs > 0 {
        return Err(Error::Data(format!(
            "training split of {} images cannot fill a batch of {}",
            train.len(),
            cfg.batch_size
        )));
    }
    let sched = cfg.schedule(per_epoch);
    let n_layers = clf.backbone.num_layers();
    let mut adam = AdamW::new(cfg.optimizer.clone(), &params);
    let mut ema = cfg.ema_decay.map(|d| Ema::new(d, &params));
    let freeze = cfg.freeze_patch_embed;
    let trainable = |name: &str| !(freeze && is_patch_embed(name));
    let mut trace = Vec::new();
    let mut emit = |row: MetricRow, trace: &mut Vec<MetricRow>| {
        on_row(&row);
        trace.push(row);
    };
    let mut step = 0u64;
    let mut test_accuracy = clf.accuracy(&params, test, exec)?;
    for epoch in 0..cfg.epochs as u64 {
        let mut loss_sum = 0.0;
        let batches = batch_iter(train.len(), cfg.batch_size, seed, epoch);
        for idx in &batches {
            let (x, y) = train_batch::<E>(train, idx, &cfg.augment, seed, step)?;
            let b = idx.len();
            let (loss, grads) = sharded_grads(exec, &params, b, |i| trainable(&i.name), |tape, bound, _, r| {
                let xs = x.narrow_axis0(r.start, r.len())?;
                let ys = tape.constant(y.narrow_axis0(r.start, r.len())?);
                soft_cross_entropy(clf.logits(tape, bound, &xs)?, ys)
            })?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite fine-tuning loss at step {step}")));
            }
            let progress = step as f64 / sched.total_steps as f64;
            let scale: Vec<f64> = params
                .infos()
                .iter()
                .map(|i| llrd_factor(i.layer, n_layers, progress, &sched))
                .collect();
            adam.step(&mut params, &grads, lr_at(step, &sched), &scale)?;
            if let Some(e) = ema.as_mut() {
                e.update(&params)?;
            }
            loss_sum += loss;
            step += 1;
        }
        let e1 = epoch + 1;
        emit(MetricRow::new(e1, "train", "loss", loss_sum / batches.len() as f64), &mut trace);
        test_accuracy = clf.accuracy(&params, test, exec)?;
        emit(MetricRow::new(e1, "test", "accuracy", test_accuracy), &mut trace);
        if let Some(e) = &ema {
            let acc = clf.accuracy(&e.params(&params)?, test, exec)?;
            emit(MetricRow::new(e1, "test", "accuracy_ema", acc), &mut trace);
        }
    }
    Ok(FinetuneOutcome {
        classifier: clf,
        params,
        ema,
        trace,
        test_accuracy,
    })
}

/// Frozen-backbone features `[N, D]` with the given pooling.
pub fn extract_features<E: Element>(
    backbone: &Backbone,
    params: &ParamSet<E>,
    data: &Dataset,
    pooling: Pooling,
    exec: Exec,
) -> Result<Tensor<f64>> {
    let d = backbone.config().dim;
    let ranges = shard_ranges(data.len(), SHARD_SIZE);
    let parts = exec.try_map(ranges.len(), |i| {
        let idx: Vec<usize> = ranges[i].clone().collect();
        let (x, _) = data.batch::<E>(&idx)?;
        let tape = Tape::new();
        let bound = params.bind_frozen(&tape);
        let seq = backbone.forward(&tape, &bound, &x, false)?;
        Ok(pool(seq.h_out, pooling)?.value().to_f64_vec())
    })?;
    Tensor::new(vec![data.len(), d], parts.concat())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 256,
            lr: 1e-2,
            weight_decay: 0.0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, m: &str| Err(Error::Config(format!("probe.{f}: {m}")));
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if !(self.lr > 0.0) {
            return bad("lr", "must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay", "must be non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeResult {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

/// Per-dimension mean and standard deviation of the rows of `x`.
fn feature_stats(x: &Tensor<f64>) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let mut mean = vec![0.0; d];
    for row in x.data().chunks(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / n as f64;
        }
    }
    let mut var = vec![0.0; d];
    for row in x.data().chunks(d) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m) / n as f64;
        }
    }
    (mean, var.into_iter().map(|v| (v + 1e-6).sqrt()).collect())
}

fn standardize(x: &Tensor<f64>, mean: &[f64], std: &[f64]) -> Tensor<f64> {
    let d = mean.len();
    Tensor::from_fn(x.shape().to_vec(), |i| (x.data()[i] - mean[i % d]) / std[i % d])
}

/// Softmax regression on frozen features. Features are standardized with the
/// training split's statistics; the backbone is only read.
#[allow(clippy::too_many_arguments)]
pub fn linear_probe<E: Element>(
    backbone: &Backbone,
    params: &ParamSet<E>,
    train: &Dataset,
    test: &Dataset,
    pooling: Pooling,
    cfg: &ProbeConfig,
    seed: u64,
    exec: Exec,
) -> Result<ProbeResult> {
    cfg.validate()?;
    let ftr = extract_features(backbone, params, train, pooling, exec)?;
    let fte = extract_features(backbone, params, test, pooling, exec)?;
    let (mean, std) = feature_stats(&ftr);
    let (ftr, fte) = (standardize(&ftr, &mean, &std), standardize(&fte, &mean, &std));
    let ytr: Vec<usize> = train.samples.iter().map(|s| s.label).collect();
    let k = train.num_classes();
    let d = backbone.config().dim;
    let mut head = ParamSet::<f64>::new();
    let w = head.register("probe.weight", Tensor::zeros([d, k]), 0, true)?;
    let b = head.register("probe.bias", Tensor::zeros([k]), 0, false)?;
    let mut adam = AdamW::new(
        AdamWConfig {
            beta2: 0.999,
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
        &head,
    );
    let bs = cfg.batch_size.min(train.len()).max(1);
    for epoch in 0..cfg.epochs as u64 {
        for idx in batch_iter(train.len(), bs, seed ^ 0x5eed, epoch) {
            let x = Tensor::stack(&idx.iter().map(|&i| ftr.index_axis0(i)).collect::<Result<Vec<_>>>()?)?;
            let labels: Vec<usize> = idx.iter().map(|&i| ytr[i]).collect();
            let y = smooth_labels::<f64>(&labels, 0.0, k)?;
            let tape = Tape::new();
            let bound = head.bind(&tape, |_| true);
            let logits = tape.constant(x).matmul(bound[w])?.add_broadcast(bound[b])?;
            let loss = soft_cross_entropy(logits, tape.constant(y))?;
            let g = bound.grads(&tape.backward(loss)?);
            adam.step(&mut head, &g, cfg.lr, &[1.0, 1.0])?;
        }
    }
    let acc = |f: &Tensor<f64>, data: &Dataset| -> Result<f64> {
        let tape = Tape::new();
        let bound = head.bind_frozen(&tape);
        let l = tape.constant(f.clone()).matmul(bound[w])?.add_broadcast(bound[b])?;
        Ok(accuracy(&argmax_rows(&l.value()), data))
    };
    Ok(ProbeResult {
        train_accuracy: acc(&ftr, train)?,
        test_accuracy: acc(&fte, test)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SynthSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> BackboneConfig {
        BackboneConfig {
            image_size: 16,
            patch_size: 8,
            dim: 16,
            depth: 2,
            heads: 2,
            ..Default::default()
        }
    }

    fn data(start: u64, n: usize) -> Dataset {
        SynthSpec {
            image_size: 16,
            ..Default::default()
        }
        .dataset(start, n, Exec::Sequential)
        .unwrap()
    }

    fn fresh(cfg: &BackboneConfig, seed: u64) -> (Backbone, ParamSet<f64>) {
        let mut p = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (Backbone::init(cfg, &mut p, &mut rng).unwrap(), p)
    }

    #[test]
    fn zero_head_gives_log_k() {
        let (bb, mut p) = fresh(&small_cfg(), 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let clf = Classifier::init(bb, &mut p, 4, 0.0, &mut rng).unwrap();
        let (x, y) = data(0, 4).batch::<f64>(&[0, 1, 2, 3]).unwrap();
        let tape = Tape::new();
        let bound = p.bind_frozen(&tape);
        let t = tape.constant(smooth_labels(&y, 0.0, 4).unwrap());
        let loss = soft_cross_entropy(clf.logits(&tape, &bound, &x).unwrap(), t).unwrap();
        assert!((loss.value().item() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn causal_logits_depend_on_last_patch() {
        let (bb, mut p) = fresh(&small_cfg(), 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let clf = Classifier::init(bb, &mut p, 4, 0.5, &mut rng).unwrap();
        let x = Tensor::<f64>::randn([1, 3, 16, 16], 1.0, &mut rng);
        let mut y = x.clone();
        // bottom-right pixel lies in the last patch
        let n = y.numel();
        y.data_mut()[n - 1] += 1.0;
        let tape = Tape::new();
        let bound = p.bind_frozen(&tape);
        let a = clf.logits(&tape, &bound, &x).unwrap().value();
        let b = clf.logits(&tape, &bound, &y).unwrap().value();
        assert!(a.max_abs_diff(&b) > 1e-6);
        assert!(a.bit_eq(&clf.logits(&tape, &bound, &x).unwrap().value()));
    }

    #[test]
    fn single_patch_modes_agree() {
        let cfg = BackboneConfig {
            image_size: 8,
            patch_size: 8,
            ..small_cfg()
        };
        let (bb, mut p) = fresh(&cfg, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let clf = Classifier::init(bb.clone(), &mut p, 3, 0.5, &mut rng).unwrap();
        let x = Tensor::<f64>::randn([2, 3, 8, 8], 1.0, &mut rng);
        let bi = Classifier {
            backbone: bb.with_attention_mode(AttentionMode::Bidirectional),
            ..clf.clone()
        };
        let tape = Tape::new();
        let bound = p.bind_frozen(&tape);
        let a = clf.logits(&tape, &bound, &x).unwrap().value();
        let b = bi.logits(&tape, &bound, &x).unwrap().value();
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn soft_ce_is_linear_in_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits = Tensor::<f64>::randn([6, 5], 2.0, &mut rng);
        let ya = smooth_labels::<f64>(&[0, 1, 2, 3, 4, 0], 0.1, 5).unwrap();
        let yb = smooth_labels::<f64>(&[4, 3, 2, 1, 0, 1], 0.1, 5).unwrap();
        let lam = 0.37;
        let mixed = Tensor::from_fn([6, 5], |i| lam * ya.data()[i] + (1.0 - lam) * yb.data()[i]);
        let ce = |y: &Tensor<f64>| {
            let tape = Tape::new();
            soft_cross_entropy(tape.constant(logits.clone()), tape.constant(y.clone()))
                .unwrap()
                .value()
                .item()
        };
        assert!((ce(&mixed) - (lam * ce(&ya) + (1.0 - lam) * ce(&yb))).abs() < 1e-6);
    }

    #[test]
    fn pooling_shapes() {
        let tape = Tape::<f64>::new();
        let h = tape.constant(Tensor::from_fn([2, 3, 4], |i| i as f64));
        let last = pool(h, Pooling::Last).unwrap().value();
        assert_eq!(last.shape(), &[2, 4]);
        assert_eq!(last.data()[..4], [8.0, 9.0, 10.0, 11.0]);
        let avg = pool(h, Pooling::Avg).unwrap().value();
        assert_eq!(avg.shape(), &[2, 4]);
        assert_eq!(avg.data()[0], 4.0);
    }

    #[test]
    fn frozen_patch_embed_and_zero_epochs() {
        let (bb, p) = fresh(&small_cfg(), 0);
        let cfg = FinetuneConfig {
            epochs: 1,
            batch_size: 8,
            warmup_epochs: 0.0,
            ..Default::default()
        };
        let (train, test) = (data(0, 16), data(100, 8));
        let out = finetune(bb.clone(), p.clone(), &train, &test, &cfg, 0, Exec::Sequential, |_| {}).unwrap();
        for name in ["patch_embed.weight", "patch_embed.bias"] {
            assert!(out.params.by_name(name).unwrap().bit_eq(p.by_name(name).unwrap()));
        }
        assert!(!out.params.by_name("blocks.0.attn.qkv.weight").unwrap().bit_eq(p.by_name("blocks.0.attn.qkv.weight").unwrap()));
        assert_eq!(out.trace.len(), 2);

        let zero = FinetuneConfig {
            epochs: 0,
            warmup_epochs: 0.0,
            ..cfg
        };
        let out = finetune(bb, p.clone(), &train, &test, &zero, 0, Exec::Sequential, |_| {}).unwrap();
        for (info, t) in p.iter() {
            assert!(out.params.by_name(&info.name).unwrap().bit_eq(t));
        }
        assert_eq!(out.params.len(), p.len() + 2);
        assert!(out.trace.is_empty());
    }

    #[test]
    fn zero_layer_decay_freezes_a_group() {
        let (bb, p) = fresh(&small_cfg(), 0);
        let mut params = p.clone();
        let grads: Vec<Option<Tensor<f64>>> = params.tensors().iter().map(|t| Some(Tensor::ones(t.shape().to_vec()))).collect();
        let scale: Vec<f64> = params.infos().iter().map(|i| if i.layer == 1 { 0.0 } else { 1.0 }).collect();
        let mut adam = AdamW::new(AdamWConfig::default(), &params);
        adam.step(&mut params, &grads, 1e-2, &scale).unwrap();
        for ((info, a), b) in params.iter().zip(p.tensors()) {
            assert_eq!(a.bit_eq(b), info.layer == 1, "{}", info.name);
        }
        assert_eq!(bb.num_layers(), 3);
    }

    #[test]
    fn probe_leaves_backbone_untouched_and_beats_chance() {
        let (bb, p) = fresh(&small_cfg(), 0);
        let before = p.clone();
        let (train, test) = (data(0, 64), data(1000, 32));
        for pooling in [Pooling::Last, Pooling::Avg] {
            let f = extract_features(&bb, &p, &test, pooling, Exec::Sequential).unwrap();
            assert_eq!(f.shape(), &[32, 16]);
        }
        let cfg = ProbeConfig {
            epochs: 50,
            batch_size: 32,
            ..Default::default()
        };
        let r = linear_probe(&bb, &p, &train, &test, Pooling::Avg, &cfg, 0, Exec::Sequential).unwrap();
        assert!(p.bit_eq(&before));
        assert!(r.train_accuracy > 0.25, "{r:?}");
    }

    #[test]
    fn loads_backbone_by_name_ignoring_extras() {
        let cfg = small_cfg();
        let (_, mut p) = fresh(&cfg, 3);
        p.register("mask_token", Tensor::zeros([16]), 0, false).unwrap();
        let (_, q) = backbone_from_params(&cfg, &p).unwrap();
        assert_eq!(q.len(), p.len() - 1);
        assert!(q.by_name("norm.weight").unwrap().bit_eq(p.by_name("norm.weight").unwrap()));
        let wider = BackboneConfig { dim: 32, ..cfg };
        assert!(matches!(backbone_from_params(&wider, &p), Err(Error::Config(_))));
    }
}

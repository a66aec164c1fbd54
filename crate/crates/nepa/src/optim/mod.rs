//! AdamW, learning-rate schedules, layer-wise decay and weight averaging.

pub mod checkpoint;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self, section: &str) -> Result<()> {
        let check = |name: &str, ok: bool| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(format!("{section}.{name}: out of range")))
            }
        };
        check("beta1", (0.0..1.0).contains(&self.beta1))?;
        check("beta2", (0.0..1.0).contains(&self.beta2))?;
        check("eps", self.eps > 0.0)?;
        check("weight_decay", self.weight_decay >= 0.0)
    }
}

/// Moments mirror the parameter list; `t` counts completed steps.
#[derive(Clone, Debug)]
pub struct AdamW<E: Element> {
    pub config: AdamWConfig,
    pub m: Vec<Tensor<E>>,
    pub v: Vec<Tensor<E>>,
    pub t: u64,
}

impl<E: Element> AdamW<E> {
    pub fn new(config: AdamWConfig, params: &ParamSet<E>) -> Self {
        Self {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    /// One update. `grads[i] == None` leaves parameter `i` and its moments
    /// untouched. `lr_scale[i]` multiplies `lr` for parameter `i`.
    /// Weight decay applies only to parameters flagged for it.
    pub fn step(
        &mut self,
        params: &mut ParamSet<E>,
        grads: &[Option<Tensor<E>>],
        lr: f64,
        lr_scale: &[f64],
    ) -> Result<()> {
        let n = params.len();
        if grads.len() != n || lr_scale.len() != n || self.m.len() != n {
            return Err(Error::Config(format!(
                "optimizer state covers {} parameters, got {} gradients for {n}",
                self.m.len(),
                grads.len()
            )));
        }
        for (info, g) in params.infos().iter().zip(grads) {
            if let Some(g) = g {
                if !g.all_finite() {
                    return Err(Error::Numeric(format!("non-finite gradient for `{}`", info.name)));
                }
            }
        }
        self.t += 1;
        let c = &self.config;
        let (b1, b2) = (E::of(c.beta1), E::of(c.beta2));
        let bc1 = E::of(1.0 - c.beta1.powi(self.t as i32));
        let bc2 = E::of(1.0 - c.beta2.powi(self.t as i32));
        let eps = E::of(c.eps);
        for i in 0..n {
            let Some(g) = &grads[i] else { continue };
            let lr_i = lr * lr_scale[i];
            let decay = if params.infos()[i].decay {
                E::of(1.0 - lr_i * c.weight_decay)
            } else {
                E::one()
            };
            let lr_i = E::of(lr_i);
            let p = params.tensors_mut()[i].data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                *m = b1 * *m + (E::one() - b1) * g;
                *v = b2 * *v + (E::one() - b2) * g * g;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *p = *p * decay - lr_i * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Step-based learning-rate schedule and layer-wise decay range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub base_lr: f64,
    pub batch_size: usize,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub min_lr: f64,
    pub llrd_start: f64,
    pub llrd_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            base_lr: 3e-4,
            batch_size: 256,
            warmup_steps: 0,
            total_steps: 1,
            min_lr: 0.0,
            llrd_start: 1.0,
            llrd_end: 1.0,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self, section: &str) -> Result<()> {
        let bad = |f: &str, m: String| Err(Error::Config(format!("{section}.{f}: {m}")));
        if !(self.base_lr > 0.0) {
            return bad("base_lr", format!("must be positive, got {}", self.base_lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive".into());
        }
        if self.total_steps == 0 {
            return bad("total_steps", "must be positive".into());
        }
        if self.warmup_steps > self.total_steps {
            return bad(
                "warmup_steps",
                format!("{} exceeds total_steps {}", self.warmup_steps, self.total_steps),
            );
        }
        if !(self.min_lr >= 0.0) {
            return bad("min_lr", "must be non-negative".into());
        }
        for (f, v) in [("llrd_start", self.llrd_start), ("llrd_end", self.llrd_end)] {
            if !(v > 0.0 && v <= 1.0) {
                return bad(f, format!("must be in (0, 1], got {v}"));
            }
        }
        Ok(())
    }

    /// `base_lr · batch_size / 256`.
    pub fn peak_lr(&self) -> f64 {
        self.base_lr * self.batch_size as f64 / 256.0
    }
}

/// Linear warmup from 0 to the peak, then cosine decay to `min_lr`.
pub fn lr_at(step: u64, s: &ScheduleConfig) -> f64 {
    let peak = s.peak_lr();
    if step > s.total_steps {
        return s.min_lr;
    }
    if step < s.warmup_steps {
        return peak * step as f64 / s.warmup_steps as f64;
    }
    let span = s.total_steps - s.warmup_steps;
    if span == 0 {
        return peak;
    }
    let progress = (step - s.warmup_steps) as f64 / span as f64;
    s.min_lr + (peak - s.min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Layer-wise decay multiplier `d^(n_layers − layer)` with
/// `d = start + progress·(end − start)`.
pub fn llrd_factor(layer: usize, n_layers: usize, progress: f64, s: &ScheduleConfig) -> f64 {
    let p = progress.clamp(0.0, 1.0);
    let d = s.llrd_start + p * (s.llrd_end - s.llrd_start);
    d.powi(n_layers.saturating_sub(layer) as i32)
}

/// Exponential moving average of parameters, accumulated in `f64`.
#[derive(Clone, Debug)]
pub struct Ema {
    pub decay: f64,
    pub shadow: Vec<Tensor<f64>>,
}

pub const EMA_DECAY: f64 = 0.9999;

/// Serde form of an optional averaging decay: a plain number, with `0`
/// standing for "no averaging" since structured text formats lack a null.
pub mod optional_decay {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(v.unwrap_or(0.0))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        let v = f64::deserialize(d)?;
        Ok((v != 0.0).then_some(v))
    }
}

impl Ema {
    pub fn new<E: Element>(decay: f64, params: &ParamSet<E>) -> Self {
        Self {
            decay,
            shadow: params.tensors().iter().map(Tensor::cast).collect(),
        }
    }

    /// `shadow ← decay·shadow + (1−decay)·param`.
    pub fn update<E: Element>(&mut self, params: &ParamSet<E>) -> Result<()> {
        if params.len() != self.shadow.len() {
            return Err(Error::Config("EMA tracks a different parameter list".into()));
        }
        let d = self.decay;
        for (s, p) in self.shadow.iter_mut().zip(params.tensors()) {
            if s.shape() != p.shape() {
                return Err(Error::shape("ema_update", s.shape(), p.shape()));
            }
            for (s, &p) in s.data_mut().iter_mut().zip(p.data()) {
                *s = d * *s + (1.0 - d) * p.as_f64();
            }
        }
        Ok(())
    }

    /// Copy of `template` holding the averaged weights.
    pub fn params<E: Element>(&self, template: &ParamSet<E>) -> Result<ParamSet<E>> {
        let mut out = template.clone();
        for (id, s) in template.ids().zip(&self.shadow) {
            out.set(id, s.cast())?;
        }
        Ok(out)
    }
}

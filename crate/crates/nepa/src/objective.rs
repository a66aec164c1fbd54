//! Next-embedding prediction loss and its ablation switches.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, EmbeddingSequence, INIT_STD};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamSet};
use crate::tensor::{Element, Tape, Tensor, Var, L2_EPS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    /// Predict position t+1 from position t (off: predict t from t).
    pub shift: bool,
    /// Detach the targets.
    pub stop_grad: bool,
    /// Fraction of input embeddings replaced by the mask token.
    pub mask_ratio: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            shift: true,
            stop_grad: true,
            mask_ratio: 0.0,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::Config(format!(
                "objective.mask_ratio: must be in [0, 1), got {}",
                self.mask_ratio
            )));
        }
        Ok(())
    }
}

/// Aligns predictions with targets along the sequence axis. With `shift`,
/// the prediction at t is paired with the target at t+1.
pub fn shift_pairs<'t, E: Element>(
    pred: Var<'t, E>,
    target: Var<'t, E>,
    shift: bool,
) -> Result<(Var<'t, E>, Var<'t, E>)> {
    let (ps, ts) = (pred.shape(), target.shape());
    if ps.len() != 3 || ps != ts {
        return Err(Error::shape("shift_pairs", &ps, &ts));
    }
    if !shift {
        return Ok((pred, target));
    }
    let t = ps[1];
    if t < 2 {
        return Err(Error::Objective(format!(
            "shifted prediction needs at least 2 positions, got {t}"
        )));
    }
    Ok((pred.slice(1, 0..t - 1)?, target.slice(1, 1..t)?))
}

/// Negative mean cosine similarity between aligned predictions and targets.
pub fn nepa_loss<'t, E: Element>(
    z: Var<'t, E>,
    h_out: Var<'t, E>,
    cfg: &ObjectiveConfig,
) -> Result<Var<'t, E>> {
    if !z.value().all_finite() || !h_out.value().all_finite() {
        return Err(Error::Numeric("non-finite embeddings entering the loss".into()));
    }
    let target = if cfg.stop_grad { z.stop_gradient() } else { z };
    let (pred, target) = shift_pairs(h_out, target, cfg.shift)?;
    let s = pred.shape();
    let pairs = (s[0] * s[1]) as f64;
    let dots = pred
        .l2_normalize(L2_EPS)
        .mul(target.l2_normalize(L2_EPS))?
        .sum();
    Ok(dots.scale(-1.0 / pairs))
}

/// Masked positions, row-major `[B, T]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub batch: usize,
    pub seq: usize,
    pub masked: Vec<bool>,
}

impl Mask {
    pub fn none(batch: usize, seq: usize) -> Self {
        Self {
            batch,
            seq,
            masked: vec![false; batch * seq],
        }
    }

    pub fn count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }
}

/// `⌊ratio·T⌋` positions per sample, uniformly without replacement.
pub fn sample_mask<R: Rng + ?Sized>(batch: usize, seq: usize, ratio: f64, rng: &mut R) -> Mask {
    let k = ((ratio * seq as f64).floor() as usize).min(seq);
    let mut m = Mask::none(batch, seq);
    if k == 0 {
        return m;
    }
    for b in 0..batch {
        for i in sample(rng, seq, k).into_iter() {
            m.masked[b * seq + i] = true;
        }
    }
    m
}

/// Replaces masked rows of `z` (`[B, T, D]`) with `token` (`[D]`).
pub fn mask_inputs<'t, E: Element>(z: Var<'t, E>, mask: &Mask, token: Var<'t, E>) -> Result<Var<'t, E>> {
    let s = z.shape();
    if s.len() != 3 || s[0] != mask.batch || s[1] != mask.seq || token.shape() != [s[2]] {
        return Err(Error::shape("mask_inputs", &s, &token.shape()));
    }
    if mask.count() == 0 {
        return Ok(z);
    }
    let d = s[2];
    let hit = |i: usize| mask.masked[i / d];
    let keep = Tensor::from_fn(s.clone(), |i| if hit(i) { E::zero() } else { E::one() });
    let fill = Tensor::from_fn(s, |i| if hit(i) { E::one() } else { E::zero() });
    let tape = z.tape();
    z.mul(tape.constant(keep))?
        .add(tape.constant(fill).mul_broadcast(token)?)
}

/// Objective settings plus the learned mask token when masking is on.
#[derive(Clone, Debug)]
pub struct Objective {
    pub config: ObjectiveConfig,
    mask_token: Option<ParamId>,
}

impl Objective {
    /// Registers `mask_token` (layer 0, no decay) only when `mask_ratio > 0`.
    pub fn init<E: Element, R: Rng + ?Sized>(
        config: &ObjectiveConfig,
        dim: usize,
        params: &mut ParamSet<E>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let mask_token = if config.mask_ratio > 0.0 {
            let t = Tensor::trunc_normal([dim], INIT_STD, rng);
            Some(params.register("mask_token", t, 0, false)?)
        } else {
            None
        };
        Ok(Self {
            config: config.clone(),
            mask_token,
        })
    }

    /// Embeds, optionally masks, predicts and scores one batch of patch rows.
    /// `rng` drives the mask draw only.
    pub fn forward<'t, E: Element, R: Rng + ?Sized>(
        &self,
        tape: &'t Tape<E>,
        bound: &Bound<'t, E>,
        backbone: &Backbone,
        patches: Var<'t, E>,
        rng: &mut R,
    ) -> Result<(Var<'t, E>, EmbeddingSequence<'t, E>)> {
        let z = backbone.embed(bound, patches)?;
        let s = z.shape();
        let input = match self.mask_token {
            Some(id) => {
                let mask = sample_mask(s[0], s[1], self.config.mask_ratio, rng);
                mask_inputs(z, &mask, bound[id])?
            }
            None => z,
        };
        let input = backbone.add_positions(bound, input)?;
        let h_out = backbone.predict(tape, bound, input, None)?;
        let loss = nepa_loss(z, h_out, &self.config)?;
        Ok((
            loss,
            EmbeddingSequence {
                z,
                h_out,
                layers: Vec::new(),
            },
        ))
    }
}

/// Across-patch standard deviation of l2-normalized embeddings `[B, T, D]`,
/// per channel, averaged over channels and samples. Near `1/√D` for spread
/// embeddings and 0 when every patch maps to the same direction.
pub fn normalized_target_std<E: Element>(z: &Tensor<E>) -> Result<f64> {
    let s = z.shape();
    if s.len() != 3 || s[1] == 0 || s[2] == 0 {
        return Err(Error::shape("normalized_target_std", s, &[0, 0, 0]));
    }
    let (b, t, d) = (s[0], s[1], s[2]);
    let data = z.to_f64_vec();
    let mut total = 0.0;
    for bi in 0..b {
        let rows: Vec<Vec<f64>> = (0..t)
            .map(|ti| {
                let r = &data[(bi * t + ti) * d..(bi * t + ti + 1) * d];
                let n = r.iter().map(|x| x * x).sum::<f64>().sqrt() + L2_EPS;
                r.iter().map(|x| x / n).collect()
            })
            .collect();
        for c in 0..d {
            let mean = rows.iter().map(|r| r[c]).sum::<f64>() / t as f64;
            let var = rows.iter().map(|r| (r[c] - mean).powi(2)).sum::<f64>() / t as f64;
            total += var.sqrt();
        }
    }
    Ok(total / (b * d) as f64)
}

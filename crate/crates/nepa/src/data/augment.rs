//! Crop, blend and label-smoothing augmentations.

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub rrc: bool,
    /// Area fraction range for random resized crops.
    pub rrc_scale: (f64, f64),
    pub mixup_alpha: f64,
    pub cutmix_alpha: f64,
    pub label_smoothing: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rrc: true,
            rrc_scale: (0.2, 1.0),
            mixup_alpha: 0.8,
            cutmix_alpha: 1.0,
            label_smoothing: 0.1,
        }
    }
}

impl AugmentConfig {
    /// No augmentation at all.
    pub fn none() -> Self {
        Self {
            rrc: false,
            rrc_scale: (1.0, 1.0),
            mixup_alpha: 0.0,
            cutmix_alpha: 0.0,
            label_smoothing: 0.0,
        }
    }

    pub fn validate(&self, section: &str) -> Result<()> {
        let bad = |f: &str, m: &str| Err(Error::Config(format!("{section}.{f}: {m}")));
        let (lo, hi) = self.rrc_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return bad("rrc_scale", "need 0 < min <= max <= 1");
        }
        if !(self.mixup_alpha >= 0.0) {
            return bad("mixup_alpha", "must be non-negative");
        }
        if !(self.cutmix_alpha >= 0.0) {
            return bad("cutmix_alpha", "must be non-negative");
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad("label_smoothing", "must be in [0, 1)");
        }
        Ok(())
    }
}

/// Crop rectangle in source pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// Draws a crop with area fraction in `scale` and aspect ratio in
/// `[3/4, 4/3]` (log-uniform). After ten rejected draws, falls back to the
/// largest centred crop with a clamped aspect ratio.
pub fn sample_crop<R: Rng + ?Sized>(h: usize, w: usize, scale: (f64, f64), rng: &mut R) -> Rect {
    let area = (h * w) as f64;
    let (lr0, lr1) = ((3.0f64 / 4.0).ln(), (4.0f64 / 3.0).ln());
    for _ in 0..10 {
        let target = area * rng.random_range(scale.0..=scale.1);
        let ratio = rng.random_range(lr0..=lr1).exp();
        let cw = (target * ratio).sqrt().round() as usize;
        let ch = (target / ratio).sqrt().round() as usize;
        if cw > 0 && ch > 0 && cw <= w && ch <= h {
            return Rect {
                top: rng.random_range(0..=h - ch),
                left: rng.random_range(0..=w - cw),
                height: ch,
                width: cw,
            };
        }
    }
    let in_ratio = w as f64 / h as f64;
    let (cw, ch) = if in_ratio < 0.75 {
        (w, ((w as f64 / 0.75).round() as usize).min(h))
    } else if in_ratio > 4.0 / 3.0 {
        (((h as f64 * 4.0 / 3.0).round() as usize).min(w), h)
    } else {
        (w, h)
    };
    Rect {
        top: (h - ch) / 2,
        left: (w - cw) / 2,
        height: ch,
        width: cw,
    }
}

/// Bilinear resize of `rect` from `[C, H, W]` to `[C, out_h, out_w]`.
///
/// Output pixel `i` samples source coordinate `(i + 0.5)·(in/out) − 0.5`
/// (half-pixel centres), clamped to the crop, with weights computed in `f64`.
pub fn resize_bilinear<E: Element>(img: &Tensor<E>, rect: Rect, out_h: usize, out_w: usize) -> Result<Tensor<E>> {
    let s = img.shape();
    if s.len() != 3 || rect.top + rect.height > s[1] || rect.left + rect.width > s[2] || rect.height == 0 || rect.width == 0 {
        return Err(Error::shape("resize_bilinear", s, &[rect.height, rect.width]));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let taps = |out: usize, len: usize, off: usize| -> Vec<(usize, usize, f64)> {
        (0..out)
            .map(|i| {
                let src = ((i as f64 + 0.5) * len as f64 / out as f64 - 0.5).clamp(0.0, (len - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(len - 1);
                (off + i0, off + i1, src - i0 as f64)
            })
            .collect()
    };
    let ys = taps(out_h, rect.height, rect.top);
    let xs = taps(out_w, rect.width, rect.left);
    let d = img.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ci in 0..c {
        let plane = &d[ci * h * w..(ci + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let p = |y: usize, x: usize| plane[y * w + x].as_f64();
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out.push(E::of(top * (1.0 - fy) + bot * fy));
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

pub fn random_resized_crop<E: Element, R: Rng + ?Sized>(
    img: &Tensor<E>,
    scale: (f64, f64),
    out_size: usize,
    rng: &mut R,
) -> Result<Tensor<E>> {
    let s = img.shape();
    if s.len() != 3 {
        return Err(Error::shape("random_resized_crop", s, &[3]));
    }
    let rect = sample_crop(s[1], s[2], scale, rng);
    resize_bilinear(img, rect, out_size, out_size)
}

/// `[B, K]` label distributions: `1−ε+ε/K` on the true class, `ε/K` elsewhere.
pub fn smooth_labels<E: Element>(labels: &[usize], eps: f64, k: usize) -> Result<Tensor<E>> {
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::Config(format!("label smoothing must be in [0, 1), got {eps}")));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Data(format!("label {bad} out of range for {k} classes")));
    }
    let off = eps / k as f64;
    let on = 1.0 - eps + off;
    Ok(Tensor::from_fn([labels.len(), k], |i| {
        E::of(if labels[i / k] == i % k { on } else { off })
    }))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MixKind {
    Mixup,
    Cutmix { rect: Rect },
}

/// What a mixing call did; `lambda` is the weight kept by each original row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixInfo {
    pub kind: MixKind,
    pub lambda: f64,
}

/// Blends each row of a `[B, C, H, W]` batch with its mirror row `B−1−i`.
///
/// Mixup or cutmix is chosen with equal probability when both are enabled
/// (alpha > 0). Cutmix resets `λ` to the realized kept-area fraction.
/// Returns `None` and leaves the batch alone when both are disabled.
pub fn mixup_cutmix<E: Element, R: Rng + ?Sized>(
    images: &mut Tensor<E>,
    targets: &mut Tensor<E>,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<Option<MixInfo>> {
    let s = images.shape().to_vec();
    if s.len() != 4 || targets.rank() != 2 || targets.shape()[0] != s[0] {
        return Err(Error::shape("mixup_cutmix", &s, targets.shape()));
    }
    if !s[0].is_multiple_of(2) {
        return Err(Error::Data(format!("mixing needs an even batch, got {}", s[0])));
    }
    let use_mix = cfg.mixup_alpha > 0.0;
    let use_cut = cfg.cutmix_alpha > 0.0;
    let cut = match (use_mix, use_cut) {
        (false, false) => return Ok(None),
        (true, false) => false,
        (false, true) => true,
        (true, true) => rng.random_bool(0.5),
    };
    let alpha = if cut { cfg.cutmix_alpha } else { cfg.mixup_alpha };
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::Config(format!("beta({alpha}): {e}")))?;
    let mut lambda: f64 = beta.sample(rng);
    let info = if cut {
        let rect = cut_rect(s[2], s[3], lambda, rng);
        lambda = 1.0 - (rect.height * rect.width) as f64 / (s[2] * s[3]) as f64;
        paste(images, rect);
        MixInfo {
            kind: MixKind::Cutmix { rect },
            lambda,
        }
    } else {
        blend(images, lambda);
        MixInfo {
            kind: MixKind::Mixup,
            lambda,
        }
    };
    blend(targets, info.lambda);
    Ok(Some(info))
}

/// Box covering roughly `1−λ` of the image, centred uniformly and clipped.
fn cut_rect<R: Rng + ?Sized>(h: usize, w: usize, lambda: f64, rng: &mut R) -> Rect {
    let r = (1.0 - lambda).sqrt();
    let (ch, cw) = ((h as f64 * r) as usize, (w as f64 * r) as usize);
    let cy = rng.random_range(0..h) as isize;
    let cx = rng.random_range(0..w) as isize;
    let clip = |v: isize, hi: usize| v.clamp(0, hi as isize) as usize;
    let (y0, y1) = (clip(cy - ch as isize / 2, h), clip(cy + ch as isize / 2, h));
    let (x0, x1) = (clip(cx - cw as isize / 2, w), clip(cx + cw as isize / 2, w));
    Rect {
        top: y0,
        left: x0,
        height: y1 - y0,
        width: x1 - x0,
    }
}

/// Row i ← λ·row i + (1−λ)·row (B−1−i), over the leading axis.
fn blend<E: Element>(t: &mut Tensor<E>, lambda: f64) {
    let b = t.shape()[0];
    let row = t.numel() / b.max(1);
    let src = t.data().to_vec();
    let (l, m) = (E::of(lambda), E::of(1.0 - lambda));
    let dst = t.data_mut();
    for i in 0..b {
        let j = b - 1 - i;
        for k in 0..row {
            dst[i * row + k] = l * src[i * row + k] + m * src[j * row + k];
        }
    }
}

fn paste<E: Element>(t: &mut Tensor<E>, rect: Rect) {
    let s = t.shape().to_vec();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let src = t.data().to_vec();
    let dst = t.data_mut();
    for i in 0..b {
        let j = b - 1 - i;
        for ci in 0..c {
            for y in rect.top..rect.top + rect.height {
                let o = ((i * c + ci) * h + y) * w;
                let p = ((j * c + ci) * h + y) * w;
                dst[o + rect.left..o + rect.left + rect.width]
                    .copy_from_slice(&src[p + rect.left..p + rect.left + rect.width]);
            }
        }
    }
}

//! Procedural shape images.
//!
//! Every sample is a function of `(seed, index)` alone: a ChaCha8 generator
//! seeded with `seed` is moved to stream `index` before any draw.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Dataset, ImageSample};
use crate::error::{Error, Result};
use crate::parallel::Exec;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Disk,
    Square,
    Triangle,
    Cross,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Disk, Shape::Square, Shape::Triangle, Shape::Cross];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Disk => "disk",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Cross => "cross",
        }
    }

    /// Membership of a point in shape coordinates (unit circumradius).
    pub fn contains(self, x: f64, y: f64) -> bool {
        match self {
            Shape::Disk => x * x + y * y <= 1.0,
            Shape::Square => x.abs() <= 0.8 && y.abs() <= 0.8,
            Shape::Triangle => {
                // equilateral, apex up; outward edge normals at 270°, 30°, 150°
                let s = 3f64.sqrt() / 2.0;
                -y <= 0.5 && (s * x + 0.5 * y) <= 0.5 && (-s * x + 0.5 * y) <= 0.5
            }
            Shape::Cross => {
                (x.abs() <= 0.3 && y.abs() <= 1.0) || (y.abs() <= 0.3 && x.abs() <= 1.0)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub classes: Vec<Shape>,
    pub image_size: usize,
    pub channels: usize,
    pub noise_std: f64,
    /// Radius as a fraction of half the image side.
    pub scale_range: (f64, f64),
    /// Largest center offset as a fraction of half the image side.
    pub max_shift: f64,
    /// Rotate uniformly over the full circle.
    pub rotate: bool,
    /// Smallest mean absolute foreground/background colour difference.
    pub min_contrast: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: Shape::ALL.to_vec(),
            image_size: 32,
            channels: 3,
            noise_std: 0.05,
            scale_range: (0.45, 0.9),
            max_shift: 0.15,
            rotate: false,
            min_contrast: 0.5,
            seed: 0,
        }
    }
}

/// Geometry and colours drawn for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Placement {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    pub angle: f64,
    pub fg: Vec<f64>,
    pub bg: Vec<f64>,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, m: &str| Err(Error::Config(format!("data.synth.{f}: {m}")));
        if self.classes.is_empty() {
            return bad("classes", "at least one class required");
        }
        if self.image_size == 0 {
            return bad("image_size", "must be positive");
        }
        if self.channels == 0 {
            return bad("channels", "must be positive");
        }
        if !(self.noise_std >= 0.0) {
            return bad("noise_std", "must be non-negative");
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi) {
            return bad("scale_range", "need 0 < min <= max");
        }
        if !(0.0..1.0).contains(&self.max_shift) {
            return bad("max_shift", "must be in [0, 1)");
        }
        if !(0.0..=0.9).contains(&self.min_contrast) {
            return bad("min_contrast", "must be in [0, 0.9]");
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|s| s.name().to_string()).collect()
    }

    fn rng(&self, index: u64) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed);
        r.set_stream(index);
        r
    }

    pub fn placement(&self, index: u64) -> Placement {
        let mut r = self.rng(index);
        let half = self.image_size as f64 / 2.0;
        let (lo, hi) = self.scale_range;
        let radius = half * if hi > lo { r.random_range(lo..=hi) } else { lo };
        let shift = self.max_shift * half;
        let mut off = || if shift > 0.0 { r.random_range(-shift..=shift) } else { 0.0 };
        let (dx, dy) = (off(), off());
        let angle = if self.rotate {
            r.random_range(0.0..std::f64::consts::TAU)
        } else {
            0.0
        };
        let (fg, bg) = loop {
            let fg: Vec<f64> = (0..self.channels).map(|_| r.random::<f64>()).collect();
            let bg: Vec<f64> = (0..self.channels).map(|_| r.random::<f64>()).collect();
            let contrast =
                fg.iter().zip(&bg).map(|(a, b)| (a - b).abs()).sum::<f64>() / self.channels as f64;
            if contrast >= self.min_contrast {
                break (fg, bg);
            }
        };
        Placement {
            cx: half + dx,
            cy: half + dy,
            radius,
            angle,
            fg,
            bg,
        }
    }

    /// Renders sample `index`; class is `index mod classes`.
    pub fn generate(&self, index: u64) -> ImageSample {
        let label = (index % self.classes.len() as u64) as usize;
        let shape = self.classes[label];
        let p = self.placement(index);
        let mut noise_rng = self.rng(index);
        // skip the placement draws so noise never aliases geometry
        noise_rng.set_word_pos(1 << 20);
        let n = self.image_size;
        let (sin, cos) = p.angle.sin_cos();
        let mut mask = vec![false; n * n];
        for y in 0..n {
            for x in 0..n {
                let (px, py) = (x as f64 + 0.5 - p.cx, y as f64 + 0.5 - p.cy);
                // rotate by −angle into shape coordinates; image y grows downward
                let u = (cos * px + sin * py) / p.radius;
                let v = (-sin * px + cos * py) / p.radius;
                mask[y * n + x] = shape.contains(u, -v);
            }
        }
        let mut pixels = Vec::with_capacity(self.channels * n * n);
        for c in 0..self.channels {
            for &m in &mask {
                let base = if m { p.fg[c] } else { p.bg[c] };
                let noise = if self.noise_std > 0.0 {
                    self.noise_std * noise_rng.sample::<f64, _>(StandardNormal)
                } else {
                    0.0
                };
                pixels.push((base + noise).clamp(0.0, 1.0) as f32);
            }
        }
        ImageSample {
            pixels: Tensor::new(vec![self.channels, n, n], pixels).expect("sized above"),
            label,
            id: index,
        }
    }

    /// Samples `start..start+len`.
    pub fn dataset(&self, start: u64, len: usize, exec: Exec) -> Result<Dataset> {
        self.validate()?;
        let samples = exec.map(len, |i| self.generate(start + i as u64));
        Ok(Dataset {
            samples,
            classes: self.class_names(),
            skipped: 0,
        })
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    Causal,
    Bidirectional,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RopeMode {
    /// Positions are raster indices.
    #[serde(rename = "1d")]
    OneD,
    /// Half of the rotation pairs follow the patch row, half the column.
    #[serde(rename = "2d-axial")]
    Axial2d,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MlpKind {
    Gelu,
    Swiglu,
}

/// Architecture of the causal ViT.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    /// Image height in pixels (also the width unless `image_width` is set).
    pub image_size: usize,
    /// Optional image width for non-square grids.
    pub image_width: Option<usize>,
    pub patch_size: usize,
    pub channels: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub use_rope: bool,
    pub rope_mode: RopeMode,
    pub rope_base: f64,
    pub use_layerscale: bool,
    pub layerscale_init: f64,
    pub use_qknorm: bool,
    pub mlp_kind: MlpKind,
    pub use_learnable_posembed: bool,
    pub attention_mode: AttentionMode,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            image_width: None,
            patch_size: 8,
            channels: 3,
            dim: 64,
            depth: 6,
            heads: 4,
            mlp_ratio: 4.0,
            use_rope: true,
            rope_mode: RopeMode::Axial2d,
            rope_base: 10000.0,
            use_layerscale: true,
            layerscale_init: 1e-5,
            use_qknorm: true,
            mlp_kind: MlpKind::Swiglu,
            use_learnable_posembed: true,
            attention_mode: AttentionMode::Causal,
        }
    }
}

fn bad(field: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("backbone.{field}: {msg}"))
}

impl BackboneConfig {
    pub fn image_width(&self) -> usize {
        self.image_width.unwrap_or(self.image_size)
    }

    /// Patch grid as (rows, cols).
    pub fn grid(&self) -> (usize, usize) {
        (
            self.image_size / self.patch_size,
            self.image_width() / self.patch_size,
        )
    }

    /// Sequence length T.
    pub fn num_patches(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Hidden width of the feed-forward block.
    ///
    /// GeLU: `mlp_ratio·dim`. SwiGLU: `⅔·mlp_ratio·dim` rounded to the
    /// nearest multiple of 8, which keeps the parameter count close to GeLU's.
    pub fn mlp_hidden(&self) -> usize {
        let base = self.mlp_ratio * self.dim as f64;
        match self.mlp_kind {
            MlpKind::Gelu => base.round() as usize,
            MlpKind::Swiglu => (((base * 2.0 / 3.0) / 8.0).round() as usize).max(1) * 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 {
            return Err(bad("patch_size", "must be positive"));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(bad(
                "image_size",
                format!("{} is not a positive multiple of patch_size {}", self.image_size, self.patch_size),
            ));
        }
        let w = self.image_width();
        if w == 0 || !w.is_multiple_of(self.patch_size) {
            return Err(bad(
                "image_width",
                format!("{w} is not a positive multiple of patch_size {}", self.patch_size),
            ));
        }
        if self.channels == 0 {
            return Err(bad("channels", "must be positive"));
        }
        if self.heads == 0 || self.dim == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(bad(
                "heads",
                format!("dim {} must be a positive multiple of heads {}", self.dim, self.heads),
            ));
        }
        if self.depth == 0 {
            return Err(bad("depth", "must be positive"));
        }
        if !(self.mlp_ratio > 0.0) || !self.mlp_ratio.is_finite() {
            return Err(bad("mlp_ratio", "must be positive"));
        }
        if self.use_rope {
            let hd = self.head_dim();
            if !hd.is_multiple_of(2) {
                return Err(bad("heads", format!("rope needs an even head_dim, got {hd}")));
            }
            if self.rope_mode == RopeMode::Axial2d && !hd.is_multiple_of(4) {
                return Err(bad(
                    "rope_mode",
                    format!("2d-axial rope needs head_dim divisible by 4, got {hd}"),
                ));
            }
            if !(self.rope_base > 1.0) {
                return Err(bad("rope_base", "must exceed 1"));
            }
        }
        if self.use_layerscale && !(self.layerscale_init > 0.0) {
            return Err(bad("layerscale_init", "must be > 0 when layerscale is on"));
        }
        Ok(())
    }

    /// Closed-form parameter count.
    ///
    /// ```text
    /// patch embedding   C·p²·D + D
    /// position table    T·D                      (if learnable)
    /// per block         2D + 3D² + 3D + D² + D + 2D + mlp + 2D·[layerscale]
    ///   mlp (gelu)      2·D·H + H + D            H = mlp_ratio·D
    ///   mlp (swiglu)    3·D·H + 2H + D           H = round8(⅔·mlp_ratio·D)
    /// final norm        2D
    /// ```
    pub fn param_count(&self) -> usize {
        let d = self.dim;
        let h = self.mlp_hidden();
        let mlp = match self.mlp_kind {
            MlpKind::Gelu => 2 * d * h + h + d,
            MlpKind::Swiglu => 3 * d * h + 2 * h + d,
        };
        let ls = if self.use_layerscale { 2 * d } else { 0 };
        let block = 2 * d + 3 * d * d + 3 * d + d * d + d + 2 * d + mlp + ls;
        let pos = if self.use_learnable_posembed {
            self.num_patches() * d
        } else {
            0
        };
        self.patch_dim() * d + d + pos + self.depth * block + 2 * d
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        BackboneConfig::default().validate().unwrap();
        assert_eq!(BackboneConfig::default().num_patches(), 16);
    }

    #[test]
    fn validation_names_field() {
        let c = BackboneConfig {
            image_size: 30,
            ..Default::default()
        };
        assert!(c.validate().unwrap_err().to_string().contains("backbone.image_size"));
        let c = BackboneConfig {
            heads: 5,
            ..Default::default()
        };
        assert!(c.validate().unwrap_err().to_string().contains("backbone.heads"));
        let c = BackboneConfig {
            dim: 12,
            heads: 2,
            use_rope: true,
            ..Default::default()
        };
        assert!(c.validate().unwrap_err().to_string().contains("rope_mode"));
        let c = BackboneConfig {
            dim: 6,
            heads: 2,
            rope_mode: RopeMode::OneD,
            ..Default::default()
        };
        assert!(c.validate().unwrap_err().to_string().contains("even head_dim"));
    }

    #[test]
    fn swiglu_hidden_rounds_to_eight() {
        let c = BackboneConfig::default();
        assert_eq!(c.mlp_hidden(), 168);
        let g = BackboneConfig {
            mlp_kind: MlpKind::Gelu,
            ..Default::default()
        };
        assert_eq!(g.mlp_hidden(), 256);
    }

    #[test]
    fn swiglu_and_gelu_counts_within_two_percent() {
        for dim in [64, 128, 192, 384, 768] {
            let s = BackboneConfig {
                dim,
                heads: dim / 32,
                ..Default::default()
            };
            let g = BackboneConfig {
                mlp_kind: MlpKind::Gelu,
                ..s.clone()
            };
            let (a, b) = (s.param_count() as f64, g.param_count() as f64);
            assert!((a - b).abs() / b < 0.02, "dim {dim}: {a} vs {b}");
        }
    }
}

//! Causal vision transformer: patch embedding, positional table and the
//! pre-norm predictor stack.

mod config;
pub mod rope;

pub use config::{AttentionMode, BackboneConfig, MlpKind, RopeMode};
pub use rope::{apply_rope, grid_positions, Position, RopeTable};

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamSet};
use crate::tensor::{Element, Tape, Tensor, Var, LAYERNORM_EPS};

pub const INIT_STD: f64 = 0.02;

/// `[B, C, H, W]` images to `[B, T, C·p²]` patch rows in raster order.
pub fn patchify<E: Element>(images: &Tensor<E>, p: usize) -> Result<Tensor<E>> {
    let s = images.shape();
    if s.len() != 4 || p == 0 || !s[2].is_multiple_of(p) || !s[3].is_multiple_of(p) {
        return Err(Error::Config(format!(
            "patchify: image shape {s:?} is not divisible into {p}x{p} patches"
        )));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (gr, gc) = (h / p, w / p);
    let t = gr * gc;
    let pd = c * p * p;
    let src = images.data();
    let mut out = Vec::with_capacity(b * t * pd);
    for bi in 0..b {
        for pr in 0..gr {
            for pc in 0..gc {
                for ci in 0..c {
                    for dy in 0..p {
                        let row = ((bi * c + ci) * h + pr * p + dy) * w + pc * p;
                        out.extend_from_slice(&src[row..row + p]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, t, pd], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<E: Element>(
    patches: &Tensor<E>,
    channels: usize,
    height: usize,
    width: usize,
    p: usize,
) -> Result<Tensor<E>> {
    let s = patches.shape();
    if p == 0 || !height.is_multiple_of(p) || !width.is_multiple_of(p) {
        return Err(Error::Config(format!(
            "unpatchify: {height}x{width} is not divisible into {p}x{p} patches"
        )));
    }
    let (gr, gc) = (height / p, width / p);
    if s.len() != 3 || s[1] != gr * gc || s[2] != channels * p * p {
        return Err(Error::shape("unpatchify", s, &[gr * gc, channels * p * p]));
    }
    let b = s[0];
    let src = patches.data();
    let mut out = vec![E::zero(); b * channels * height * width];
    let mut i = 0;
    for bi in 0..b {
        for pr in 0..gr {
            for pc in 0..gc {
                for ci in 0..channels {
                    for dy in 0..p {
                        let row = ((bi * channels + ci) * height + pr * p + dy) * width + pc * p;
                        out[row..row + p].copy_from_slice(&src[i..i + p]);
                        i += p;
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, channels, height, width], out)
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
enum Mlp {
    Gelu { fc1: Linear, fc2: Linear },
    /// `fc1` produces gate and value halves side by side.
    Swiglu { fc1: Linear, fc2: Linear, hidden: usize },
}

#[derive(Clone, Debug)]
struct Block {
    norm1: Norm,
    qkv: Linear,
    proj: Linear,
    ls1: Option<ParamId>,
    norm2: Norm,
    mlp: Mlp,
    ls2: Option<ParamId>,
}

/// Per-layer tensors kept for analysis.
#[derive(Clone, Copy)]
pub struct LayerTrace<'t, E: Element> {
    /// Scaled attention logits before masking, `[B, H, T, T]`.
    pub logits: Var<'t, E>,
    /// Attention probabilities `[B, H, T, T]`.
    pub attn: Var<'t, E>,
    /// Queries and keys right after QK-Norm (before rotation), `[B, H, T, hd]`.
    pub q: Var<'t, E>,
    pub k: Var<'t, E>,
    /// Block output `[B, T, D]`.
    pub hidden: Var<'t, E>,
}

pub struct EmbeddingSequence<'t, E: Element> {
    /// Patch embeddings `[B, T, D]`; the regression targets.
    pub z: Var<'t, E>,
    /// Predictor outputs `[B, T, D]`, unshifted.
    pub h_out: Var<'t, E>,
    /// One entry per block when requested.
    pub layers: Vec<LayerTrace<'t, E>>,
}

/// Parameter layout of a backbone. The tensors live in a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Backbone {
    config: BackboneConfig,
    patch: Linear,
    pos: Option<ParamId>,
    blocks: Vec<Block>,
    norm: Norm,
    rope: Option<RopeTable>,
}

impl Backbone {
    /// Registers freshly initialized parameters under hierarchical names.
    /// Patch embedding and positions are layer 0, block `i` is layer `i+1`
    /// and the final norm is layer `depth+1`.
    pub fn init<E: Element, R: Rng + ?Sized>(
        config: &BackboneConfig,
        params: &mut ParamSet<E>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let linear = |params: &mut ParamSet<E>,
                          name: &str,
                          fan_in: usize,
                          fan_out: usize,
                          layer: usize,
                          rng: &mut R|
         -> Result<Linear> {
            let w = Tensor::trunc_normal([fan_in, fan_out], INIT_STD, rng);
            Ok(Linear {
                weight: params.register(format!("{name}.weight"), w, layer, true)?,
                bias: params.register(format!("{name}.bias"), Tensor::zeros([fan_out]), layer, false)?,
            })
        };
        let norm = |params: &mut ParamSet<E>, name: &str, layer: usize| -> Result<Norm> {
            Ok(Norm {
                weight: params.register(format!("{name}.weight"), Tensor::ones([d]), layer, false)?,
                bias: params.register(format!("{name}.bias"), Tensor::zeros([d]), layer, false)?,
            })
        };

        let patch = linear(params, "patch_embed", config.patch_dim(), d, 0, rng)?;
        let pos = if config.use_learnable_posembed {
            let t = Tensor::trunc_normal([config.num_patches(), d], INIT_STD, rng);
            Some(params.register("pos_embed", t, 0, false)?)
        } else {
            None
        };
        let hidden = config.mlp_hidden();
        let mut blocks = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let layer = i + 1;
            let p = format!("blocks.{i}");
            let norm1 = norm(params, &format!("{p}.norm1"), layer)?;
            let qkv = linear(params, &format!("{p}.attn.qkv"), d, 3 * d, layer, rng)?;
            let proj = linear(params, &format!("{p}.attn.proj"), d, d, layer, rng)?;
            let ls1 = config
                .use_layerscale
                .then(|| {
                    params.register(
                        format!("{p}.ls1"),
                        Tensor::full([d], E::of(config.layerscale_init)),
                        layer,
                        false,
                    )
                })
                .transpose()?;
            let norm2 = norm(params, &format!("{p}.norm2"), layer)?;
            let mlp = match config.mlp_kind {
                MlpKind::Gelu => Mlp::Gelu {
                    fc1: linear(params, &format!("{p}.mlp.fc1"), d, hidden, layer, rng)?,
                    fc2: linear(params, &format!("{p}.mlp.fc2"), hidden, d, layer, rng)?,
                },
                MlpKind::Swiglu => Mlp::Swiglu {
                    fc1: linear(params, &format!("{p}.mlp.fc1"), d, 2 * hidden, layer, rng)?,
                    fc2: linear(params, &format!("{p}.mlp.fc2"), hidden, d, layer, rng)?,
                    hidden,
                },
            };
            let ls2 = config
                .use_layerscale
                .then(|| {
                    params.register(
                        format!("{p}.ls2"),
                        Tensor::full([d], E::of(config.layerscale_init)),
                        layer,
                        false,
                    )
                })
                .transpose()?;
            blocks.push(Block {
                norm1,
                qkv,
                proj,
                ls1,
                norm2,
                mlp,
                ls2,
            });
        }
        let norm = norm(params, "norm", config.depth + 1)?;
        let rope = Self::rope_table(config)?;
        Ok(Self {
            config: config.clone(),
            patch,
            pos,
            blocks,
            norm,
            rope,
        })
    }

    fn rope_table(config: &BackboneConfig) -> Result<Option<RopeTable>> {
        if !config.use_rope {
            return Ok(None);
        }
        let (r, c) = config.grid();
        Ok(Some(RopeTable::new(
            config.rope_mode,
            &grid_positions(r, c),
            config.head_dim(),
            config.rope_base,
        )?))
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// Number of layer-decay groups below the head (`depth + 1`).
    pub fn num_layers(&self) -> usize {
        self.config.depth + 1
    }

    /// Same parameters with a different attention mask.
    pub fn with_attention_mode(&self, mode: AttentionMode) -> Self {
        let mut b = self.clone();
        b.config.attention_mode = mode;
        b
    }

    /// Replaces the rotary table, e.g. with shifted positions.
    pub fn with_rope_table(&self, table: RopeTable) -> Self {
        let mut b = self.clone();
        b.rope = Some(table);
        b
    }

    /// Layer-scale parameter ids, in block order.
    pub fn layerscale_ids(&self) -> Vec<ParamId> {
        self.blocks
            .iter()
            .flat_map(|b| [b.ls1, b.ls2])
            .flatten()
            .collect()
    }

    /// Attention input projection weights, in block order.
    pub fn qkv_weight_ids(&self) -> Vec<ParamId> {
        self.blocks.iter().map(|b| b.qkv.weight).collect()
    }

    /// Affine patch projection `z = patches·W + b` (no positions).
    pub fn embed<'t, E: Element>(&self, bound: &Bound<'t, E>, patches: Var<'t, E>) -> Result<Var<'t, E>> {
        let pd = self.config.patch_dim();
        let s = patches.shape();
        if s.len() != 3 || s[2] != pd {
            return Err(Error::shape("embed", &s, &[pd]));
        }
        patches
            .matmul(bound[self.patch.weight])?
            .add_broadcast(bound[self.patch.bias])
    }

    /// Predictor input: embeddings plus the positional table when enabled.
    pub fn add_positions<'t, E: Element>(&self, bound: &Bound<'t, E>, x: Var<'t, E>) -> Result<Var<'t, E>> {
        match self.pos {
            Some(id) => x.add_broadcast(bound[id]),
            None => Ok(x),
        }
    }

    fn causal_mask<E: Element>(t: usize) -> Tensor<E> {
        Tensor::from_fn([t, t], |i| {
            if i % t > i / t {
                E::neg_infinity()
            } else {
                E::zero()
            }
        })
    }

    fn attention<'t, E: Element>(
        &self,
        bound: &Bound<'t, E>,
        block: &Block,
        x: Var<'t, E>,
        mask: Option<Var<'t, E>>,
    ) -> Result<(Var<'t, E>, LayerTrace<'t, E>)> {
        let s = x.shape();
        let (b, t, d) = (s[0], s[1], s[2]);
        let h = self.config.heads;
        let hd = d / h;
        let qkv = x
            .matmul(bound[block.qkv.weight])?
            .add_broadcast(bound[block.qkv.bias])?
            .reshape(&[b, t, 3, h, hd])?
            .permute(&[2, 0, 3, 1, 4])?;
        let part = |i: usize| qkv.slice(0, i..i + 1)?.reshape(&[b, h, t, hd]);
        let (mut q, mut k, v) = (part(0)?, part(1)?, part(2)?);
        if self.config.use_qknorm {
            q = q.layer_norm(None, None, LAYERNORM_EPS)?;
            k = k.layer_norm(None, None, LAYERNORM_EPS)?;
        }
        let (qn, kn) = (q, k);
        if let Some(table) = &self.rope {
            if table.len() != t {
                return Err(Error::shape("rope", &[t], &[table.len()]));
            }
            (q, k) = apply_rope(q, k, table)?;
        }
        let logits = q.matmul(k.transpose()?)?.scale(1.0 / (hd as f64).sqrt());
        let probs = match mask {
            Some(m) => logits.add_broadcast(m)?.softmax()?,
            None => logits.softmax()?,
        };
        let out = probs
            .matmul(v)?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b, t, d])?
            .matmul(bound[block.proj.weight])?
            .add_broadcast(bound[block.proj.bias])?;
        let trace = LayerTrace {
            logits,
            attn: probs,
            q: qn,
            k: kn,
            hidden: out,
        };
        Ok((out, trace))
    }

    fn mlp<'t, E: Element>(&self, bound: &Bound<'t, E>, mlp: &Mlp, x: Var<'t, E>) -> Result<Var<'t, E>> {
        match mlp {
            Mlp::Gelu { fc1, fc2 } => x
                .matmul(bound[fc1.weight])?
                .add_broadcast(bound[fc1.bias])?
                .gelu()
                .matmul(bound[fc2.weight])?
                .add_broadcast(bound[fc2.bias]),
            Mlp::Swiglu { fc1, fc2, hidden } => {
                let u = x.matmul(bound[fc1.weight])?.add_broadcast(bound[fc1.bias])?;
                let last = u.shape().len() - 1;
                let gate = u.slice(last, 0..*hidden)?.silu();
                let val = u.slice(last, *hidden..2 * hidden)?;
                gate.mul(val)?
                    .matmul(bound[fc2.weight])?
                    .add_broadcast(bound[fc2.bias])
            }
        }
    }

    fn block_forward<'t, E: Element>(
        &self,
        bound: &Bound<'t, E>,
        block: &Block,
        x: Var<'t, E>,
        mask: Option<Var<'t, E>>,
    ) -> Result<(Var<'t, E>, LayerTrace<'t, E>)> {
        let n1 = block.norm1;
        let h = x.layer_norm(Some(bound[n1.weight]), Some(bound[n1.bias]), LAYERNORM_EPS)?;
        let (mut a, mut trace) = self.attention(bound, block, h, mask)?;
        if let Some(g) = block.ls1 {
            a = a.mul_broadcast(bound[g])?;
        }
        let x = x.add(a)?;
        let n2 = block.norm2;
        let h = x.layer_norm(Some(bound[n2.weight]), Some(bound[n2.bias]), LAYERNORM_EPS)?;
        let mut m = self.mlp(bound, &block.mlp, h)?;
        if let Some(g) = block.ls2 {
            m = m.mul_broadcast(bound[g])?;
        }
        let out = x.add(m)?;
        trace.hidden = out;
        Ok((out, trace))
    }

    /// Runs one block by index; exposed for block-level checks.
    pub fn block<'t, E: Element>(
        &self,
        tape: &'t Tape<E>,
        bound: &Bound<'t, E>,
        index: usize,
        x: Var<'t, E>,
    ) -> Result<Var<'t, E>> {
        let mask = self.mask_var(tape, x.shape()[1]);
        Ok(self.block_forward(bound, &self.blocks[index], x, mask)?.0)
    }

    fn mask_var<'t, E: Element>(&self, tape: &'t Tape<E>, t: usize) -> Option<Var<'t, E>> {
        (self.config.attention_mode == AttentionMode::Causal).then(|| tape.constant(Self::causal_mask(t)))
    }

    /// Blocks followed by the final norm. `layers` collects per-block traces.
    pub fn predict<'t, E: Element>(
        &self,
        tape: &'t Tape<E>,
        bound: &Bound<'t, E>,
        input: Var<'t, E>,
        mut layers: Option<&mut Vec<LayerTrace<'t, E>>>,
    ) -> Result<Var<'t, E>> {
        let s = input.shape();
        if s.len() != 3 || s[2] != self.config.dim {
            return Err(Error::shape("predict", &s, &[self.config.dim]));
        }
        let mask = self.mask_var(tape, s[1]);
        let mut x = input;
        for block in &self.blocks {
            let (y, trace) = self.block_forward(bound, block, x, mask)?;
            if let Some(l) = layers.as_deref_mut() {
                l.push(trace);
            }
            x = y;
        }
        x.layer_norm(
            Some(bound[self.norm.weight]),
            Some(bound[self.norm.bias]),
            LAYERNORM_EPS,
        )
    }

    /// Full forward from patch rows held in a tape variable.
    pub fn forward_patches<'t, E: Element>(
        &self,
        tape: &'t Tape<E>,
        bound: &Bound<'t, E>,
        patches: Var<'t, E>,
        want_hidden: bool,
    ) -> Result<EmbeddingSequence<'t, E>> {
        let z = self.embed(bound, patches)?;
        let input = self.add_positions(bound, z)?;
        let mut layers = Vec::new();
        let h_out = self.predict(tape, bound, input, want_hidden.then_some(&mut layers))?;
        Ok(EmbeddingSequence { z, h_out, layers })
    }

    /// Full forward from `[B, C, H, W]` images.
    pub fn forward<'t, E: Element>(
        &self,
        tape: &'t Tape<E>,
        bound: &Bound<'t, E>,
        images: &Tensor<E>,
        want_hidden: bool,
    ) -> Result<EmbeddingSequence<'t, E>> {
        let patches = self.patchify(images)?;
        self.forward_patches(tape, bound, tape.constant(patches), want_hidden)
    }

    /// Patch rows for this configuration, checking the image geometry.
    pub fn patchify<E: Element>(&self, images: &Tensor<E>) -> Result<Tensor<E>> {
        let c = &self.config;
        let s = images.shape();
        if s.len() != 4 || s[1] != c.channels || s[2] != c.image_size || s[3] != c.image_width() {
            return Err(Error::shape(
                "forward",
                s,
                &[c.channels, c.image_size, c.image_width()],
            ));
        }
        patchify(images, c.patch_size)
    }
}

#[cfg(test)]
mod tests;

//! End-to-end gradient check of the pretraining loss.
//!
//! Analytic gradients come from the tape through the real objective. The
//! numeric side perturbs one parameter coordinate at a time, reruns the
//! forward pass and recomputes the loss with a plain cosine formula. With the
//! stop-gradient enabled, the oracle holds the targets at their unperturbed
//! values, which is the function the analytic gradient differentiates.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::objective::{Objective, ObjectiveConfig};
use crate::params::ParamSet;
use crate::rng::{keyed, Domain};
use crate::tensor::gradcheck::{primitive_checks, relative_error, CheckResult};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub h: f64,
    pub tolerance: f64,
    pub batch: usize,
    /// Spread of the random offsets added to freshly initialized parameters.
    pub param_std: f64,
    pub backbone: BackboneConfig,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            h: 1e-5,
            tolerance: 1e-4,
            batch: 2,
            param_std: 0.3,
            backbone: check_backbone(),
        }
    }
}

impl GradcheckConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.h > 0.0) {
            return Err(Error::Config("gradcheck.h: must be positive".into()));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::Config("gradcheck.tolerance: must be positive".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("gradcheck.batch: must be positive".into()));
        }
        self.backbone.validate().map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("gradcheck.{m}")),
            other => other,
        })
    }
}

/// Depth 2, width 8, 2 heads, a 1x5 patch grid (T = 5).
pub fn check_backbone() -> BackboneConfig {
    BackboneConfig {
        image_size: 2,
        image_width: Some(10),
        patch_size: 2,
        channels: 3,
        dim: 8,
        depth: 2,
        heads: 2,
        ..Default::default()
    }
}

/// Objective variants beyond the default, checked tensor-wise in tests.
pub fn objective_variants() -> Vec<(&'static str, ObjectiveConfig)> {
    let base = ObjectiveConfig::default();
    vec![
        (
            "nepa.no_stop_grad",
            ObjectiveConfig {
                stop_grad: false,
                ..base.clone()
            },
        ),
        (
            "nepa.no_shift",
            ObjectiveConfig {
                shift: false,
                ..base.clone()
            },
        ),
        (
            "nepa.masked",
            ObjectiveConfig {
                mask_ratio: 0.4,
                ..base
            },
        ),
    ]
}

fn cosine_loss(pred: &[f64], target: &[f64], b: usize, t: usize, d: usize, shift: bool) -> f64 {
    let (off, n) = if shift { (1, t - 1) } else { (0, t) };
    let mut total = 0.0;
    for bi in 0..b {
        for ti in 0..n {
            let p = &pred[(bi * t + ti) * d..(bi * t + ti + 1) * d];
            let q = &target[(bi * t + ti + off) * d..(bi * t + ti + off + 1) * d];
            let dot: f64 = p.iter().zip(q).map(|(x, y)| x * y).sum();
            let np = p.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nq = q.iter().map(|x| x * x).sum::<f64>().sqrt();
            total += dot / (np * nq);
        }
    }
    -total / (b * n) as f64
}

struct Model {
    backbone: Backbone,
    objective: Objective,
    params: ParamSet<f64>,
    patches: Tensor<f64>,
}

impl Model {
    /// Forward values `(z, h_out)` with the fixed mask draw.
    fn values(&self, params: &ParamSet<f64>, seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
        let tape = Tape::new();
        let bound = params.bind_frozen(&tape);
        let mut rng = keyed(seed, Domain::Mask, 0, 0);
        let (_, seq) = self
            .objective
            .forward(&tape, &bound, &self.backbone, tape.constant(self.patches.clone()), &mut rng)?;
        Ok((seq.z.value().to_vec(), seq.h_out.value().to_vec()))
    }
}

/// Analytic and numeric gradients of one parameter tensor.
pub struct GradPair {
    pub name: String,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradPair {
    /// Coordinate-wise max of [`relative_error`].
    pub fn max_rel_error(&self) -> f64 {
        self.analytic
            .iter()
            .zip(&self.numeric)
            .map(|(&a, &n)| relative_error(a, n))
            .fold(0.0, f64::max)
    }

    /// `‖a − n‖ / max(‖a‖, ‖n‖, 1e-8)` over the whole tensor.
    pub fn norm_rel_error(&self) -> f64 {
        let l2 = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
        let diff = l2(&mut self.analytic.iter().zip(&self.numeric).map(|(a, n)| a - n));
        let a = l2(&mut self.analytic.iter().copied());
        let n = l2(&mut self.numeric.iter().copied());
        diff / a.max(n).max(1e-8)
    }
}

/// Coordinate-wise check of every parameter of a model built from `cfg`
/// under objective `obj`, one result per tensor named `<label>/<param>`.
pub fn model_check(cfg: &GradcheckConfig, label: &str, obj: &ObjectiveConfig) -> Result<Vec<CheckResult>> {
    Ok(grad_pairs(cfg, obj, obj.stop_grad)?
        .into_iter()
        .map(|p| CheckResult {
            max_rel_error: p.max_rel_error(),
            name: format!("{label}/{}", p.name),
        })
        .collect())
}

/// Tape and central-difference gradients for every parameter.
/// `freeze_targets` selects the oracle: targets held at the base point, or
/// recomputed at every perturbation.
pub fn grad_pairs(cfg: &GradcheckConfig, obj: &ObjectiveConfig, freeze_targets: bool) -> Result<Vec<GradPair>> {
    cfg.validate()?;
    let bc = &cfg.backbone;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ParamSet::new();
    let backbone = Backbone::init(bc, &mut params, &mut rng)?;
    let objective = Objective::init(obj, bc.dim, &mut params, &mut rng)?;
    // move away from the symmetric init so no gradient is accidentally tiny
    for t in params.tensors_mut() {
        let noise = Tensor::<f64>::randn(t.shape().to_vec(), cfg.param_std, &mut rng);
        for (v, n) in t.data_mut().iter_mut().zip(noise.data()) {
            *v += n;
        }
    }
    let images = Tensor::<f64>::randn([cfg.batch, bc.channels, bc.image_size, bc.image_width()], 1.0, &mut rng);
    let model = Model {
        patches: backbone.patchify(&images)?,
        backbone,
        objective,
        params,
    };
    let (b, t, d) = (cfg.batch, bc.num_patches(), bc.dim);

    let tape = Tape::new();
    let bound = model.params.bind(&tape, |_| true);
    let mut mrng = keyed(cfg.seed, Domain::Mask, 0, 0);
    let patches = tape.constant(model.patches.clone());
    let (loss, _) = model
        .objective
        .forward(&tape, &bound, &model.backbone, patches, &mut mrng)?;
    let analytic = bound.grads(&tape.backward(loss)?);

    let (z0, h0) = model.values(&model.params, cfg.seed)?;
    let oracle0 = cosine_loss(&h0, &z0, b, t, d, obj.shift);
    let tape_loss = loss.value().item();
    if (oracle0 - tape_loss).abs() > 1e-9 {
        return Err(Error::Numeric(format!(
            "oracle loss {oracle0} disagrees with tape loss {tape_loss}"
        )));
    }
    let eval = |p: &ParamSet<f64>| -> Result<f64> {
        let (z, h) = model.values(p, cfg.seed)?;
        let target = if freeze_targets { &z0 } else { &z };
        Ok(cosine_loss(&h, target, b, t, d, obj.shift))
    };

    let mut out = Vec::new();
    let mut probe = model.params.clone();
    for (i, id) in model.params.ids().enumerate() {
        let g = analytic[i]
            .as_ref()
            .ok_or_else(|| Error::Numeric(format!("no gradient for parameter {i}")))?;
        let mut numeric = Vec::with_capacity(g.numel());
        for j in 0..g.numel() {
            let orig = probe.get(id).data()[j];
            probe.get_mut(id).data_mut()[j] = orig + cfg.h;
            let up = eval(&probe)?;
            probe.get_mut(id).data_mut()[j] = orig - cfg.h;
            let down = eval(&probe)?;
            probe.get_mut(id).data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * cfg.h));
        }
        out.push(GradPair {
            name: model.params.info(id).name.clone(),
            analytic: g.to_vec(),
            numeric,
        });
    }
    Ok(out)
}

/// Primitive checks followed by the coordinate-wise check of the default
/// objective.
pub fn full_gradcheck(cfg: &GradcheckConfig) -> Result<Vec<CheckResult>> {
    let mut out = primitive_checks(cfg.seed, cfg.h)?;
    out.extend(model_check(cfg, "nepa", &ObjectiveConfig::default())?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{MlpKind, RopeMode};

    #[test]
    fn check_model_has_five_positions() {
        let c = check_backbone();
        assert_eq!(c.num_patches(), 5);
        assert_eq!((c.depth, c.dim, c.heads), (2, 8, 2));
    }

    #[test]
    fn oracle_loss_examples() {
        // identical unit vectors give −1; orthogonal give 0
        let e = [1.0, 0.0, 0.0, 1.0];
        assert_eq!(cosine_loss(&e, &e, 1, 2, 2, false), -1.0);
        let p = [1.0, 0.0, 5.0, 5.0];
        let q = [9.0, 9.0, 0.0, 2.0];
        assert_eq!(cosine_loss(&p, &q, 1, 2, 2, true), 0.0);
    }

    #[test]
    fn nepa_loss_passes_on_several_seeds() {
        for seed in 0..4 {
            let cfg = GradcheckConfig {
                seed,
                ..Default::default()
            };
            for r in model_check(&cfg, "nepa", &ObjectiveConfig::default()).unwrap() {
                assert!(r.max_rel_error < cfg.tolerance, "seed {seed} {}: {}", r.name, r.max_rel_error);
            }
        }
    }

    #[test]
    fn variants_match_tensor_wise() {
        // coordinates whose gradient is near the finite-difference noise
        // floor make the coordinate-wise ratio unreliable for these
        let cfg = GradcheckConfig::default();
        for (label, obj) in objective_variants() {
            for p in grad_pairs(&cfg, &obj, obj.stop_grad).unwrap() {
                assert!(p.norm_rel_error() < 1e-6, "{label}/{}: {}", p.name, p.norm_rel_error());
            }
        }
    }

    #[test]
    fn full_gradcheck_covers_every_parameter() {
        let cfg = GradcheckConfig::default();
        let r = full_gradcheck(&cfg).unwrap();
        assert!(r.iter().any(|c| c.name == "nepa/patch_embed.weight"));
        assert!(r.iter().any(|c| c.name == "nepa/norm.weight"));
        assert!(r.iter().all(|c| c.max_rel_error < cfg.tolerance));
    }

    #[test]
    fn alternative_architecture_passes() {
        let cfg = GradcheckConfig {
            seed: 3,
            backbone: BackboneConfig {
                mlp_kind: MlpKind::Gelu,
                rope_mode: RopeMode::OneD,
                use_learnable_posembed: false,
                use_layerscale: false,
                ..check_backbone()
            },
            ..Default::default()
        };
        let r = model_check(&cfg, "alt", &ObjectiveConfig::default()).unwrap();
        assert!(!r.iter().any(|c| c.name == "alt/pos_embed"));
        for c in r {
            assert!(c.max_rel_error < cfg.tolerance, "{}: {}", c.name, c.max_rel_error);
        }
    }

    #[test]
    fn wrong_oracle_is_caught() {
        // detached targets checked against a fully differentiated loss
        let cfg = GradcheckConfig::default();
        let r = grad_pairs(&cfg, &ObjectiveConfig::default(), false).unwrap();
        let embed = r.iter().find(|p| p.name == "patch_embed.weight").unwrap();
        assert!(embed.norm_rel_error() > 1e-2, "{}", embed.norm_rel_error());
    }
}

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::gradcheck::finite_diff_check;

fn small(dim: usize, heads: usize, depth: usize) -> BackboneConfig {
    BackboneConfig {
        image_size: 32,
        patch_size: 8,
        channels: 3,
        dim,
        heads,
        depth,
        ..Default::default()
    }
}

fn build<E: Element>(cfg: &BackboneConfig, seed: u64) -> (Backbone, ParamSet<E>) {
    let mut params = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = Backbone::init(cfg, &mut params, &mut rng).unwrap();
    (b, params)
}

/// Sets every layer-scale vector to `v`.
fn set_layerscale<E: Element>(b: &Backbone, params: &mut ParamSet<E>, v: f64) {
    for id in b.layerscale_ids() {
        let n = params.get(id).numel();
        params.set(id, Tensor::full([n], E::of(v))).unwrap();
    }
}

fn images(b: usize, cfg: &BackboneConfig, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn([b, cfg.channels, cfg.image_size, cfg.image_width()], 1.0, &mut rng)
}

#[test]
fn patchify_shapes_and_order() {
    let x = Tensor::<f64>::from_fn([1, 1, 4, 4], |i| i as f64);
    let p = patchify(&x, 2).unwrap();
    assert_eq!(p.shape(), &[1, 4, 4]);
    // second patch is the top-right block
    assert_eq!(&p.data()[4..8], &[2.0, 3.0, 6.0, 7.0]);

    let c = Tensor::<f64>::full([2, 3, 8, 8], 0.5);
    let p = patchify(&c, 4).unwrap();
    let rows: Vec<&[f64]> = p.data().chunks(48).collect();
    assert!(rows.iter().all(|r| *r == rows[0]));

    assert!(patchify(&Tensor::<f64>::zeros([1, 1, 6, 6]), 4).is_err());
}

#[test]
fn patch_rows_are_channel_major() {
    let x = Tensor::<f64>::from_fn([1, 2, 2, 2], |i| i as f64);
    let p = patchify(&x, 2).unwrap();
    assert_eq!(p.data(), &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
}

proptest! {
    #[test]
    fn unpatchify_inverts_patchify(b in 1usize..3, c in 1usize..4, gr in 1usize..4, gc in 1usize..4, p in 1usize..5, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f32>::randn([b, c, gr * p, gc * p], 1.0, &mut rng);
        let y = unpatchify(&patchify(&x, p).unwrap(), c, gr * p, gc * p, p).unwrap();
        prop_assert!(x.bit_eq(&y));
    }

    #[test]
    fn param_count_matches_registration(
        heads in 1usize..4,
        depth in 1usize..4,
        rope in any::<bool>(),
        ls in any::<bool>(),
        swiglu in any::<bool>(),
        pos in any::<bool>(),
        ratio in 1.0f64..4.0,
    ) {
        let cfg = BackboneConfig {
            dim: 8 * heads,
            heads,
            depth,
            use_rope: rope,
            use_layerscale: ls,
            mlp_kind: if swiglu { MlpKind::Swiglu } else { MlpKind::Gelu },
            use_learnable_posembed: pos,
            mlp_ratio: ratio,
            ..Default::default()
        };
        let (_, params) = build::<f32>(&cfg, 0);
        prop_assert_eq!(params.numel(), cfg.param_count());
    }
}

#[test]
fn layerscale_initialized_exactly() {
    let cfg = small(16, 2, 2);
    let (b, params) = build::<f32>(&cfg, 1);
    let ids = b.layerscale_ids();
    assert_eq!(ids.len(), 4);
    for id in ids {
        assert!(params.get(id).data().iter().all(|&v| v == 1e-5f32));
    }
    assert!(params.by_name("blocks.1.attn.qkv.weight").is_some());
    assert!(params.by_name("blocks.0.mlp.fc2.bias").is_some());
}

#[test]
fn embed_is_affine_without_positions() {
    let cfg = small(16, 2, 1);
    let (b, mut params) = build::<f64>(&cfg, 2);
    let bias = params.id("patch_embed.bias").unwrap();
    params.set(bias, Tensor::zeros([16])).unwrap();
    let tape = Tape::new();
    let bound = params.bind_frozen(&tape);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = Tensor::randn([2, 16, 192], 1.0, &mut rng);
    let c = Tensor::randn([2, 16, 192], 1.0, &mut rng);
    let emb = |t: &Tensor<f64>| b.embed(&bound, tape.constant(t.clone())).unwrap().value();
    let zero = emb(&Tensor::zeros([2, 16, 192]));
    assert!(zero.data().iter().all(|&v| v == 0.0));
    let sum = Tensor::from_fn([2, 16, 192], |i| a.data()[i] + c.data()[i]);
    let lhs = Tensor::from_fn([2, 16, 16], |i| emb(&a).data()[i] + emb(&c).data()[i]);
    assert!(lhs.max_abs_diff(&emb(&sum)) < 1e-12);
}

#[test]
fn forward_shapes_and_purity() {
    let cfg = small(16, 2, 2);
    let (b, params) = build::<f64>(&cfg, 4);
    let x = images(2, &cfg, 5);
    let run = || {
        let tape = Tape::new();
        let bound = params.bind_frozen(&tape);
        let out = b.forward(&tape, &bound, &x, true).unwrap();
        assert_eq!(out.layers.len(), 2);
        (out.z.value(), out.h_out.value())
    };
    let (z1, h1) = run();
    let (z2, h2) = run();
    assert_eq!(z1.shape(), &[2, 16, 16]);
    assert_eq!(h1.shape(), &[2, 16, 16]);
    assert!(z1.bit_eq(&z2) && h1.bit_eq(&h2));
}

#[test]
fn forward_rejects_wrong_geometry() {
    let cfg = small(16, 2, 1);
    let (b, params) = build::<f64>(&cfg, 4);
    let tape = Tape::new();
    let bound = params.bind_frozen(&tape);
    assert!(b.forward(&tape, &bound, &Tensor::zeros([1, 3, 16, 16]), false).is_err());
}

#[test]
fn zero_layerscale_block_is_identity() {
    let cfg = small(16, 2, 1);
    let (b, mut params) = build::<f64>(&cfg, 6);
    set_layerscale(&b, &mut params, 0.0);
    let tape = Tape::new();
    let bound = params.bind_frozen(&tape);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = Tensor::randn([2, 16, 16], 1.0, &mut rng);
    let y = b.block(&tape, &bound, 0, tape.constant(x.clone())).unwrap().value();
    assert!(x.bit_eq(&y));
}

#[test]
fn fresh_block_is_near_identity() {
    let cfg = small(32, 4, 1);
    let (b, params) = build::<f64>(&cfg, 8);
    let tape = Tape::new();
    let bound = params.bind_frozen(&tape);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Tensor::<f64>::randn([1, 16, 32], 1.0, &mut rng);
    let n = x.l2_norm();
    let x = x.map(|v| v / n);
    let y = b.block(&tape, &bound, 0, tape.constant(x.clone())).unwrap().value();
    let diff = Tensor::from_fn([1, 16, 32], |i| y.data()[i] - x.data()[i]);
    assert!(diff.l2_norm() / x.l2_norm() < 1e-3);
}

#[test]
fn block_gradient_matches_finite_differences() {
    for (kind, rope) in [(MlpKind::Swiglu, true), (MlpKind::Gelu, false)] {
        let cfg = BackboneConfig {
            image_size: 8,
            image_width: Some(16),
            patch_size: 4,
            dim: 8,
            heads: 2,
            depth: 1,
            mlp_kind: kind,
            use_rope: rope,
            ..Default::default()
        };
        let (b, mut params) = build::<f64>(&cfg, 10);
        set_layerscale(&b, &mut params, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = Tensor::<f64>::randn([1, 8, 8], 1.0, &mut rng);
        let x = Tensor::<f64>::randn([1, 8, 8], 1.0, &mut rng);
        let err = finite_diff_check(
            |tape, x| {
                let bound = params.bind_frozen(tape);
                let y = b.block(tape, &bound, 0, x)?;
                Ok(y.mul(tape.constant(w.clone()))?.sum())
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{kind:?}: {err}");
    }
}

#[test]
fn single_token_attention_is_value_projection() {
    let cfg = BackboneConfig {
        image_size: 8,
        patch_size: 8,
        dim: 8,
        heads: 2,
        depth: 1,
        ..Default::default()
    };
    let (b, params) = build::<f64>(&cfg, 12);
    let tape = Tape::new();
    let bound = params.bind_frozen(&tape);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = tape.constant(Tensor::<f64>::randn([1, 1, 8], 1.0, &mut rng));
    let block = &b.blocks[0];
    let (out, trace) = b.attention(&bound, block, x, None).unwrap();
    assert_eq!(trace.attn.value().data(), &[1.0, 1.0]);
    let qkv = x
        .matmul(bound[block.qkv.weight])
        .unwrap()
        .add_broadcast(bound[block.qkv.bias])
        .unwrap();
    let v = qkv.slice(2, 16..24).unwrap();
    let expect = v
        .matmul(bound[block.proj.weight])
        .unwrap()
        .add_broadcast(bound[block.proj.bias])
        .unwrap();
    assert!(out.value().max_abs_diff(&expect.value()) < 1e-12);
}

fn causal_cfg(seed: u64) -> BackboneConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let heads = rng.random_range(1..=2);
    BackboneConfig {
        image_size: 4 * rng.random_range(1..=2),
        image_width: Some(4 * rng.random_range(2..=3)),
        patch_size: 4,
        channels: rng.random_range(1..=3),
        dim: 8 * heads,
        heads,
        depth: rng.random_range(1..=2),
        rope_mode: if rng.random_bool(0.5) { RopeMode::OneD } else { RopeMode::Axial2d },
        use_rope: rng.random_bool(0.7),
        use_qknorm: rng.random_bool(0.7),
        use_layerscale: rng.random_bool(0.5),
        mlp_kind: if rng.random_bool(0.5) { MlpKind::Gelu } else { MlpKind::Swiglu },
        ..Default::default()
    }
}

#[test]
fn causal_outputs_ignore_future_patches() {
    for seed in 0..6 {
        let cfg = causal_cfg(seed);
        let (b, mut params) = build::<f64>(&cfg, seed);
        set_layerscale(&b, &mut params, 1.0);
        let x = images(2, &cfg, seed + 100);
        let patches = b.patchify(&x).unwrap();
        let (n, t, pd) = (2, cfg.num_patches(), cfg.patch_dim());
        for s in 1..t {
            let mut rng = ChaCha8Rng::seed_from_u64(seed * 31 + s as u64);
            let noise = Tensor::<f64>::randn([n, t, pd], 1.0, &mut rng);
            let perturbed = Tensor::from_fn([n, t, pd], |i| {
                let pos = (i / pd) % t;
                patches.data()[i] + if pos >= s { noise.data()[i] } else { 0.0 }
            });
            let h = |p: &Tensor<f64>| {
                let tape = Tape::new();
                let bound = params.bind_frozen(&tape);
                b.forward_patches(&tape, &bound, tape.constant(p.clone()), false)
                    .unwrap()
                    .h_out
                    .value()
            };
            let (a, c) = (h(&patches), h(&perturbed));
            let d = cfg.dim;
            for bi in 0..n {
                let lo = bi * t * d;
                assert_eq!(&a.data()[lo..lo + s * d], &c.data()[lo..lo + s * d], "seed {seed} s {s}");
            }
        }
    }
}

#[test]
fn causal_gradient_is_exactly_zero_for_future() {
    let cfg = causal_cfg(3);
    let (b, mut params) = build::<f64>(&cfg, 3);
    set_layerscale(&b, &mut params, 1.0);
    let x = images(1, &cfg, 7);
    let patches = b.patchify(&x).unwrap();
    let (t, pd) = (cfg.num_patches(), cfg.patch_dim());
    for target in 0..t {
        let tape = Tape::new();
        let bound = params.bind_frozen(&tape);
        let p = tape.leaf(patches.clone());
        let out = b.forward_patches(&tape, &bound, p, false).unwrap();
        let row = out.h_out.slice(1, target..target + 1).unwrap().sum();
        let g = tape.backward(row).unwrap().get_or_zeros(p);
        for s in 0..t {
            let chunk = &g.data()[s * pd..(s + 1) * pd];
            if s > target {
                assert!(chunk.iter().all(|&v| v == 0.0), "t {target} s {s}");
            } else if s == target {
                assert!(chunk.iter().any(|&v| v != 0.0));
            }
        }
    }
}

#[test]
fn bidirectional_differs_at_first_position() {
    let cfg = small(16, 2, 1);
    let (b, mut params) = build::<f64>(&cfg, 14);
    set_layerscale(&b, &mut params, 1.0);
    let bi = b.with_attention_mode(AttentionMode::Bidirectional);
    let x = images(1, &cfg, 15);
    let first = |m: &Backbone| {
        let tape = Tape::new();
        let bound = params.bind_frozen(&tape);
        m.forward(&tape, &bound, &x, false).unwrap().h_out.value().data()[..16].to_vec()
    };
    assert_ne!(first(&b), first(&bi));
}

#[test]
fn rope_logits_invariant_to_position_shift() {
    for mode in [RopeMode::OneD, RopeMode::Axial2d] {
        let cfg = BackboneConfig {
            rope_mode: mode,
            ..small(32, 2, 2)
        };
        let (b, mut params) = build::<f64>(&cfg, 16);
        set_layerscale(&b, &mut params, 1.0);
        let x = images(1, &cfg, 17);
        let (r, c) = cfg.grid();
        let logits = |m: &Backbone| {
            let tape = Tape::new();
            let bound = params.bind_frozen(&tape);
            let out = m.forward(&tape, &bound, &x, true).unwrap();
            out.layers.iter().map(|l| l.logits.value()).collect::<Vec<_>>()
        };
        let base = logits(&b);
        for s in [1.0, 7.0, 123.0] {
            let pos: Vec<_> = grid_positions(r, c).into_iter().map(|p| p.shifted(s)).collect();
            let table = RopeTable::new(mode, &pos, cfg.head_dim(), cfg.rope_base).unwrap();
            let shifted = logits(&b.with_rope_table(table));
            for (a, bb) in base.iter().zip(&shifted) {
                assert!(a.max_abs_diff(bb) <= 1e-5, "{mode:?} shift {s}: {}", a.max_abs_diff(bb));
            }
        }
    }
}

#[test]
fn qknorm_rows_are_standardized() {
    let cfg = small(32, 4, 2);
    let (b, mut params) = build::<f64>(&cfg, 18);
    // variance-preserving projections; at std 0.02 the pre-norm rows are so
    // small that the epsilon alone moves the variance by ~1e-4
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for id in b.qkv_weight_ids() {
        let shape = params.get(id).shape().to_vec();
        params.set(id, Tensor::randn(shape, (1.0 / 32f64).sqrt(), &mut rng)).unwrap();
    }
    let x = images(2, &cfg, 19);
    let tape = Tape::new();
    let bound = params.bind_frozen(&tape);
    let out = b.forward(&tape, &bound, &x, true).unwrap();
    let hd = cfg.head_dim();
    for layer in &out.layers {
        for v in [layer.q.value(), layer.k.value()] {
            for row in v.data().chunks(hd) {
                let mean = row.iter().sum::<f64>() / hd as f64;
                let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / hd as f64;
                assert!(mean.abs() < 1e-6);
                assert!((var - 1.0).abs() < 1e-5, "var {var}");
            }
        }
    }
}

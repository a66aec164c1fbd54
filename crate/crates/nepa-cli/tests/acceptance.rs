//! Acceptance criteria 1-10. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails. Runs the `nepa` binary on the shipped
//! configs wherever a criterion is about a command.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nepa::analysis::parse_csv;
use nepa::backbone::{grid_positions, Backbone, BackboneConfig, MlpKind, RopeMode, RopeTable};
use nepa::optim::{llrd_factor, lr_at, Ema, ScheduleConfig};
use nepa::params::ParamSet;
use nepa::{Tape, Tensor};
use nepa_cli::commands::{GRADCHECK_CSV, LOSS_CSV, METRICS_CSV, PROBE_CSV, SUMMARY_JSON};
use nepa_cli::config::RunConfig;

type Outcome = Result<String, String>;

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn shipped(name: &str) -> RunConfig {
    let text = std::fs::read_to_string(configs_dir().join(name)).expect("shipped config");
    RunConfig::parse(&text).expect("shipped config parses")
}

/// Writes `cfg` (outputs under `dir`) and runs `nepa <args> --config`.
fn nepa(dir: &Path, cfg: &RunConfig, args: &[&str]) -> Result<String, String> {
    nepa_with(dir, cfg, args, None)
}

fn nepa_with(dir: &Path, cfg: &RunConfig, args: &[&str], threads: Option<&str>) -> Result<String, String> {
    std::fs::create_dir_all(dir).map_err(|e| e.to_string())?;
    let path = dir.join("run.toml");
    std::fs::write(&path, cfg.to_toml().map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_nepa"));
    if let Some(n) = threads {
        cmd.env("NEPA_THREADS", n);
    }
    let out = cmd
        .args(args)
        .arg("--config")
        .arg(&path)
        .output()
        .map_err(|e| e.to_string())?;
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    if !out.status.success() {
        return Err(format!(
            "`nepa {}` exited with {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    Ok(stdout)
}

fn summary(dir: &Path) -> Result<(f64, f64), String> {
    let text = std::fs::read_to_string(dir.join(SUMMARY_JSON)).map_err(|e| e.to_string())?;
    let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    Ok((v["probe_loss"].as_f64().unwrap_or(f64::NAN), v["target_std"].as_f64().unwrap_or(f64::NAN)))
}

/// Lowest training loss over steps `1..=upto`.
fn min_loss(dir: &Path, upto: u64) -> Result<f64, String> {
    let rows = parse_csv(&std::fs::read_to_string(dir.join(LOSS_CSV)).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    Ok(rows
        .iter()
        .filter(|r| r.epoch <= upto)
        .map(|r| r.value)
        .fold(f64::INFINITY, f64::min))
}

fn ensure(ok: bool, msg: String) -> Result<String, String> {
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn criterion_1(tmp: &Path) -> Outcome {
    let mut cfg = shipped("gradcheck.toml");
    cfg.out_dir = tmp.join("c1");
    cfg.exec = nepa::parallel::Exec::Sequential;
    let stdout = nepa_with(&cfg.out_dir, &cfg, &["gradcheck"], Some("1"))?;
    let rows = parse_csv(&std::fs::read_to_string(cfg.out_dir.join(GRADCHECK_CSV)).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let model = rows.iter().filter(|r| r.metric.starts_with("nepa/")).count();
    let worst = rows.iter().map(|r| r.value).fold(0.0, f64::max);
    let last = stdout.lines().last().unwrap_or_default().to_string();
    ensure(
        model > 0 && rows.len() > model && worst < 1e-4,
        format!("{} checks ({model} model tensors), worst rel err {worst:.2e} < 1e-4; {last}", rows.len()),
    )
}

fn collapse_cfg(tmp: &Path, name: &str, shift: bool, stop_grad: bool) -> RunConfig {
    let mut cfg = shipped("collapse.toml");
    cfg.out_dir = tmp.join(name);
    cfg.pretrain.objective.shift = shift;
    cfg.pretrain.objective.stop_grad = stop_grad;
    cfg
}

fn criterion_2(tmp: &Path) -> Outcome {
    let nsg = collapse_cfg(tmp, "c2_nosg", true, false);
    nepa(&nsg.out_dir, &nsg, &["pretrain"])?;
    let sg = collapse_cfg(tmp, "c2_sg", true, true);
    nepa(&sg.out_dir, &sg, &["pretrain"])?;
    let (l0, s0) = summary(&nsg.out_dir)?;
    let (l1, s1) = summary(&sg.out_dir)?;
    ensure(
        l0 < -0.999 && s0 < 1e-3 && l1 > -0.9 && s1 > 0.1,
        format!(
            "no stop-grad: loss {l0:+.5} (< -0.999), std {s0:.2e} (< 1e-3); stop-grad: loss {l1:+.5} (> -0.9), std {s1:.3} (> 0.1)"
        ),
    )
}

/// Reuses the shifted stop-grad run of criterion 2.
fn criterion_3(tmp: &Path) -> Outcome {
    let mut ns = collapse_cfg(tmp, "c3_noshift", false, true);
    ns.pretrain_loop.stop_after = Some(200);
    nepa(&ns.out_dir, &ns, &["pretrain"])?;
    let noshift = min_loss(&ns.out_dir, 200)?;
    let (noshift_eval, _) = summary(&ns.out_dir)?;
    let shifted_dir = tmp.join("c2_sg");
    if !shifted_dir.join(LOSS_CSV).exists() {
        let sg = collapse_cfg(tmp, "c2_sg", true, true);
        nepa(&sg.out_dir, &sg, &["pretrain"])?;
    }
    let shifted = min_loss(&shifted_dir, 200)?;
    ensure(
        noshift < -0.999 && shifted >= -0.999,
        format!(
            "min loss within 200 steps: no shift {noshift:+.5} (eval at 200: {noshift_eval:+.5}), shifted {shifted:+.5}"
        ),
    )
}

fn random_config(rng: &mut ChaCha8Rng) -> BackboneConfig {
    let heads = rng.random_range(1..=3);
    let head_dim = 4 * rng.random_range(1..=3);
    BackboneConfig {
        image_size: 4 * rng.random_range(1..=3),
        image_width: Some(4 * rng.random_range(1..=3)),
        patch_size: 4,
        channels: rng.random_range(1..=3),
        dim: heads * head_dim,
        heads,
        depth: rng.random_range(1..=3),
        use_rope: rng.random_bool(0.8),
        rope_mode: if rng.random_bool(0.5) { RopeMode::OneD } else { RopeMode::Axial2d },
        use_qknorm: rng.random_bool(0.7),
        use_layerscale: rng.random_bool(0.5),
        mlp_kind: if rng.random_bool(0.5) { MlpKind::Gelu } else { MlpKind::Swiglu },
        use_learnable_posembed: rng.random_bool(0.5),
        ..Default::default()
    }
}

/// Backbone with unit layer scales so every block contributes.
fn build(cfg: &BackboneConfig, seed: u64) -> (Backbone, ParamSet<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    let b = Backbone::init(cfg, &mut params, &mut rng).expect("valid config");
    for id in b.layerscale_ids() {
        let n = params.get(id).numel();
        params.set(id, Tensor::full([n], 1.0)).expect("same shape");
    }
    (b, params)
}

fn criterion_4(_: &Path) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut checked = 0;
    for c in 0..20u64 {
        let cfg = random_config(&mut rng);
        let (b, params) = build(&cfg, c);
        let (t, pd, d) = (cfg.num_patches(), cfg.patch_dim(), cfg.dim);
        let patches = Tensor::<f64>::randn([2, t, pd], 1.0, &mut rng);
        let h = |p: &Tensor<f64>| {
            let tape = Tape::new();
            let bound = params.bind_frozen(&tape);
            b.forward_patches(&tape, &bound, tape.constant(p.clone()), false)
                .expect("forward")
                .h_out
                .value()
        };
        let base = h(&patches);
        for s in 1..t {
            let noise = Tensor::<f64>::randn([2, t, pd], 1.0, &mut rng);
            let moved = Tensor::from_fn([2, t, pd], |i| {
                patches.data()[i] + if (i / pd) % t >= s { noise.data()[i] } else { 0.0 }
            });
            let out = h(&moved);
            for bi in 0..2 {
                let lo = bi * t * d;
                if base.data()[lo..lo + s * d] != out.data()[lo..lo + s * d] {
                    return Err(format!("config {c}: outputs before {s} moved under a later perturbation"));
                }
            }
            checked += 1;
        }
        for target in 0..t {
            let tape = Tape::new();
            let bound = params.bind_frozen(&tape);
            let p = tape.leaf(patches.clone());
            let out = b.forward_patches(&tape, &bound, p, false).expect("forward");
            let row = out.h_out.slice(1, target..target + 1).expect("slice").sum();
            let g = tape.backward(row).expect("backward").get_or_zeros(p);
            for bi in 0..2 {
                for s in target + 1..t {
                    let lo = (bi * t + s) * pd;
                    if g.data()[lo..lo + pd].iter().any(|&v| v != 0.0) {
                        return Err(format!("config {c}: d h[{target}] / d patch[{s}] is nonzero"));
                    }
                }
            }
            checked += 1;
        }
    }
    Ok(format!("20 random configs, {checked} perturbation and gradient checks, all exact zeros"))
}

fn criterion_5(_: &Path) -> Outcome {
    let mut worst: f64 = 0.0;
    for mode in [RopeMode::OneD, RopeMode::Axial2d] {
        let cfg = BackboneConfig {
            dim: 32,
            heads: 2,
            depth: 2,
            rope_mode: mode,
            ..Default::default()
        };
        let (b, params) = build(&cfg, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let x = Tensor::<f64>::randn([2, cfg.channels, cfg.image_size, cfg.image_width()], 1.0, &mut rng);
        let logits = |m: &Backbone| {
            let tape = Tape::new();
            let bound = params.bind_frozen(&tape);
            let out = m.forward(&tape, &bound, &x, true).expect("forward");
            out.layers.iter().map(|l| l.logits.value()).collect::<Vec<_>>()
        };
        let base = logits(&b);
        let (r, c) = cfg.grid();
        for s in [1.0, 5.0, 37.0, 1000.0] {
            let pos: Vec<_> = grid_positions(r, c).into_iter().map(|p| p.shifted(s)).collect();
            let table = RopeTable::new(mode, &pos, cfg.head_dim(), cfg.rope_base).map_err(|e| e.to_string())?;
            for (a, bb) in base.iter().zip(&logits(&b.with_rope_table(table))) {
                worst = worst.max(a.max_abs_diff(bb));
            }
        }
    }
    ensure(worst <= 1e-5, format!("1d and 2d-axial, shifts up to 1000: max logit change {worst:.2e} <= 1e-5"))
}

fn criterion_6(_: &Path) -> Outcome {
    let cfg = BackboneConfig {
        dim: 64,
        heads: 4,
        depth: 3,
        ..Default::default()
    };
    let (b, mut params) = build(&cfg, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    for id in b.qkv_weight_ids() {
        let shape = params.get(id).shape().to_vec();
        params
            .set(id, Tensor::randn(shape, (1.0 / cfg.dim as f64).sqrt(), &mut rng))
            .map_err(|e| e.to_string())?;
    }
    let x = Tensor::<f64>::randn([4, cfg.channels, cfg.image_size, cfg.image_width()], 1.0, &mut rng);
    let tape = Tape::new();
    let bound = params.bind_frozen(&tape);
    let out = b.forward(&tape, &bound, &x, true).map_err(|e| e.to_string())?;
    let hd = cfg.head_dim();
    let (mut worst_mean, mut worst_var): (f64, f64) = (0.0, 0.0);
    let mut rows = 0;
    for layer in &out.layers {
        for v in [layer.q.value(), layer.k.value()] {
            for row in v.data().chunks(hd) {
                let mean = row.iter().sum::<f64>() / hd as f64;
                let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / hd as f64;
                worst_mean = worst_mean.max(mean.abs());
                worst_var = worst_var.max((var - 1.0).abs());
                rows += 1;
            }
        }
    }
    ensure(
        worst_mean < 1e-6 && worst_var < 1e-5,
        format!("{rows} q/k rows: max |mean| {worst_mean:.1e} < 1e-6, max |var - 1| {worst_var:.1e} < 1e-5"),
    )
}

fn criterion_7(tmp: &Path) -> Outcome {
    let mut cfg = shipped("desk.toml");
    cfg.out_dir = tmp.join("c7");
    cfg.init.checkpoint = Some(cfg.out_dir.join(nepa_cli::commands::FINAL_CKPT));
    cfg.pretrain_loop.log_every = 0;
    let b = &cfg.pretrain.backbone;
    if (b.dim, b.depth, b.image_size, b.patch_size) != (64, 6, 32, 8)
        || cfg.pretrain.schedule.total_steps != 3000
        || cfg.data.train_size + cfg.data.test_size != 8000
        || cfg.data.synth.classes.len() != 4
        || cfg.finetune.epochs != 5
    {
        return Err("shipped desk config does not match the criterion's setup".into());
    }
    nepa(&cfg.out_dir, &cfg, &["pretrain"])?;
    nepa(&cfg.out_dir, &cfg, &["probe"])?;
    nepa(&cfg.out_dir, &cfg, &["finetune"])?;
    let read = |f: &str| -> Result<Vec<nepa::analysis::MetricRow>, String> {
        parse_csv(&std::fs::read_to_string(cfg.out_dir.join(f)).map_err(|e| e.to_string())?).map_err(|e| e.to_string())
    };
    let probe = read(PROBE_CSV)?;
    let acc = |m: &str| {
        probe
            .iter()
            .find(|r| r.split == "test" && r.metric == m)
            .map_or(f64::NAN, |r| r.value)
    };
    let (pre_last, rnd_last) = (acc("pretrained_accuracy_last"), acc("random_accuracy_last"));
    let (pre_avg, rnd_avg) = (acc("pretrained_accuracy_avg"), acc("random_accuracy_avg"));
    let ft = read(METRICS_CSV)?
        .iter()
        .filter(|r| r.split == "test" && r.metric == "accuracy")
        .next_back()
        .map_or(f64::NAN, |r| r.value);
    let margin = (pre_last - rnd_last) * 100.0;
    ensure(
        ft >= 0.9 && margin >= 5.0,
        format!(
            "fine-tune test acc {:.1}% (>= 90%); probe last {:.1}% vs random {:.1}% (+{margin:.1} pts, >= 5), avg {:.1}% vs {:.1}%",
            ft * 100.0,
            pre_last * 100.0,
            rnd_last * 100.0,
            pre_avg * 100.0,
            rnd_avg * 100.0
        ),
    )
}

fn criterion_8(_: &Path) -> Outcome {
    let s = ScheduleConfig {
        base_lr: 3e-4,
        batch_size: 4096,
        warmup_steps: 40,
        total_steps: 400,
        ..Default::default()
    };
    let peak = lr_at(s.warmup_steps, &s);
    if peak != 4.8e-3 {
        return Err(format!("peak lr {peak:e} != 4.8e-3"));
    }
    let d = 0.999;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut start = ParamSet::<f64>::new();
    start.register("w", Tensor::randn([16], 1.0, &mut rng), 0, true).map_err(|e| e.to_string())?;
    let mut target = start.clone();
    let id = target.ids().next().expect("one tensor");
    target.set(id, Tensor::randn([16], 1.0, &mut rng)).map_err(|e| e.to_string())?;
    let mut ema = Ema::new(d, &start);
    let mut worst: f64 = 0.0;
    for n in 1..=1000 {
        ema.update(&target).map_err(|e| e.to_string())?;
        let dn = d.powi(n);
        for ((s, a), b) in ema.shadow[0].data().iter().zip(start.get(id).data()).zip(target.get(id).data()) {
            worst = worst.max((s - (dn * a + (1.0 - dn) * b)).abs());
        }
    }
    if worst > 1e-6 {
        return Err(format!("EMA deviates from its closed form by {worst:e}"));
    }
    let fixed = ScheduleConfig {
        llrd_start: 0.65,
        llrd_end: 0.65,
        ..Default::default()
    };
    let f0 = llrd_factor(0, 12, 0.3, &fixed);
    if (f0 - 0.65f64.powi(12)).abs() > 1e-15 || (f0 - 0.00569).abs() > 5e-6 {
        return Err(format!("fixed LLRD 0.65^12 gave {f0}"));
    }
    let ramp = ScheduleConfig {
        llrd_start: 0.35,
        llrd_end: 1.0,
        ..Default::default()
    };
    let mut ramp_worst: f64 = 0.0;
    for layer in 0..=12 {
        for p in [0.0f64, 0.25, 0.5, 1.0] {
            let want = (0.35 + 0.65 * p).powi(12 - layer as i32);
            ramp_worst = ramp_worst.max((llrd_factor(layer, 12, p, &ramp) - want).abs());
        }
    }
    ensure(
        ramp_worst < 1e-15 && llrd_factor(0, 12, 1.0, &ramp) == 1.0,
        format!(
            "peak lr 4.8e-3 exact; EMA max dev {worst:.1e} over 1000 steps; 0.65^12 = {f0:.5}; ramp 0.35->1.00 max dev {ramp_worst:.1e}"
        ),
    )
}

fn criterion_9(tmp: &Path) -> Outcome {
    let mut cfg = shipped("desk.toml");
    cfg.data.train_size = 512;
    cfg.data.test_size = 64;
    cfg.pretrain.schedule.total_steps = 30;
    cfg.pretrain.schedule.warmup_steps = 5;
    cfg.pretrain_loop.log_every = 0;
    cfg.pretrain_loop.checkpoint_every = 0;
    let run = |name: &str, f: &dyn Fn(&mut RunConfig), args: &[&str]| -> Result<Vec<u8>, String> {
        let mut c = cfg.clone();
        c.out_dir = tmp.join(name);
        f(&mut c);
        nepa(&c.out_dir, &c, args)?;
        std::fs::read(c.out_dir.join(LOSS_CSV)).map_err(|e| e.to_string())
    };
    let a = run("c9_a", &|_| {}, &["pretrain"])?;
    let b = run("c9_b", &|_| {}, &["pretrain"])?;
    if a != b {
        return Err("two runs with the same seed wrote different loss CSVs".into());
    }
    let c = run("c9_c", &|_| {}, &["pretrain", "--seed", "1"])?;
    if a == c {
        return Err("a different seed gave the same loss CSV".into());
    }
    run(
        "c9_r",
        &|c| {
            c.pretrain_loop.stop_after = Some(13);
            c.pretrain_loop.checkpoint_every = 13;
        },
        &["pretrain"],
    )?;
    let ckpt = tmp.join("c9_r/checkpoints/step_000013.ckpt");
    let resumed = run("c9_r", &|_| {}, &["pretrain", "--resume", ckpt.to_str().ok_or("path")?])?;
    ensure(
        resumed == a,
        format!(
            "identical seeds give byte-identical CSVs ({} bytes); stop at 13 + resume reproduces the 30-step trace{}",
            a.len(),
            if resumed == a { "" } else { " -- MISMATCH" }
        ),
    )
}

fn criterion_10(tmp: &Path) -> Outcome {
    let mut cfg = shipped("ablate.toml");
    cfg.out_dir = tmp.join("c10");
    let stdout = nepa(&cfg.out_dir, &cfg, &["ablate", "--table", "c"])?;
    let text = std::fs::read_to_string(cfg.out_dir.join("ablate_c.csv")).map_err(|e| e.to_string())?;
    for line in stdout.lines() {
        println!("    {line}");
    }
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split(',').collect()).collect();
    let ratios: Vec<&str> = rows.iter().map(|r| r[4]).collect();
    let report: Vec<String> = rows
        .iter()
        .map(|r| format!("mask {} -> {} ({}; reference {})", r[4], if r[7].is_empty() { "-" } else { r[7] }, r[6], r[10]))
        .collect();
    ensure(
        ratios == ["0", "0.4", "0.6"],
        format!("{}; reference ordering reported, not asserted", report.join(", ")),
    )
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    type Check = fn(&Path) -> Outcome;
    let criteria: [(u32, &str, Check, Duration); 10] = [
        (1, "gradient integrity", criterion_1, Duration::from_secs(120)),
        (2, "collapse without stop-gradient", criterion_2, Duration::from_secs(600)),
        (3, "shortcut without shifting", criterion_3, Duration::from_secs(300)),
        (4, "causality", criterion_4, Duration::from_secs(60)),
        (5, "RoPE relative positions", criterion_5, Duration::from_secs(60)),
        (6, "QK-Norm statistics", criterion_6, Duration::from_secs(60)),
        (7, "desk-scale transfer", criterion_7, Duration::from_secs(1800)),
        (8, "schedules and EMA", criterion_8, Duration::from_secs(60)),
        (9, "reproducibility", criterion_9, Duration::from_secs(300)),
        (10, "ablation harness", criterion_10, Duration::from_secs(1200)),
    ];
    let mut failed = 0;
    for (n, name, check, budget) in criteria {
        let start = Instant::now();
        let outcome = check(tmp.path());
        let secs = start.elapsed().as_secs_f64();
        let outcome = match outcome {
            Ok(m) if start.elapsed() > budget => Err(format!("{m}; took {secs:.0}s, budget {}s", budget.as_secs())),
            other => other,
        };
        match outcome {
            Ok(m) => println!("PASS criterion {n:>2} ({name}): {m} [{secs:.1}s]"),
            Err(m) => {
                failed += 1;
                println!("FAIL criterion {n:>2} ({name}): {m} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

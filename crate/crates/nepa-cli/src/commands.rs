//! Subcommand implementations. Every output lands under `out_dir`.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use nepa::analysis::{attention_maps, csv_string, parse_csv, similarity_map, write_csv, write_pgm, MetricRow, CSV_HEADER};
use nepa::backbone::Backbone;
use nepa::checks::full_gradcheck;
use nepa::data::{load_folder, Dataset};
use nepa::optim::checkpoint::{read_meta, CheckpointMeta, TrainState};
use nepa::params::ParamSet;
use nepa::train::{DatasetSource, ImageSource, NoiseImages, PretrainConfig, Pretrainer, StepRecord, PRETRAIN_KIND};
use nepa::transfer::{backbone_from_params, finetune as run_finetune, linear_probe};

use crate::config::{DataSource, PretrainImages, RunConfig, Weights};
use crate::error::CliError;

pub const LOSS_CSV: &str = "loss.csv";
pub const METRICS_CSV: &str = "metrics.csv";
pub const PROBE_CSV: &str = "probe.csv";
pub const GRADCHECK_CSV: &str = "gradcheck.csv";
pub const FINAL_CKPT: &str = "final.ckpt";
pub const FINETUNE_CKPT: &str = "finetuned.ckpt";
pub const SUMMARY_JSON: &str = "summary.json";
pub const MAPS_DIR: &str = "maps";
pub const FINETUNE_KIND: &str = "finetune";

type P = f32;

pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
}

/// Train and test splits at the given `(channels, height, width)`.
pub fn load_data(cfg: &RunConfig, geometry: (usize, usize, usize)) -> Result<Splits, CliError> {
    let d = &cfg.data;
    let (c, h, w) = geometry;
    let splits = match d.source {
        DataSource::Synth => Splits {
            train: d.synth.dataset(0, d.train_size, cfg.exec)?,
            test: d.synth.dataset(d.train_size as u64, d.test_size, cfg.exec)?,
        },
        DataSource::Folder => {
            let load = |p: &Option<PathBuf>| -> Result<Dataset, CliError> {
                let p = p.as_ref().expect("validated");
                let ds = load_folder(p, Some((h, w)))?;
                if ds.skipped > 0 {
                    log::warn!("{}: skipped {} undecodable files", p.display(), ds.skipped);
                }
                Ok(ds)
            };
            Splits {
                train: load(&d.train_dir)?,
                test: load(&d.test_dir)?,
            }
        }
    };
    for (name, ds) in [("train", &splits.train), ("test", &splits.test)] {
        if ds.is_empty() {
            return Err(CliError::Runtime(format!("{name} split is empty")));
        }
        ds.check_geometry(c, h, w)
            .map_err(|e| CliError::Config(format!("data: {name} split: {e}")))?;
    }
    if splits.train.classes != splits.test.classes {
        return Err(CliError::Config("data.test_dir: class folders differ from the training split".into()));
    }
    Ok(splits)
}

fn geometry(bc: &nepa::backbone::BackboneConfig) -> (usize, usize, usize) {
    (bc.channels, bc.image_size, bc.image_width())
}

fn config_json(cfg: &RunConfig) -> Result<serde_json::Value, CliError> {
    serde_json::to_value(cfg).map_err(|e| CliError::Runtime(format!("config serialization: {e}")))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

pub fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join("checkpoints").join(format!("step_{step:06}.ckpt"))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PretrainSummary {
    pub steps: u64,
    pub last_loss: f64,
    /// Loss and normalized-target spread of the live weights on a fixed batch.
    pub probe_loss: f64,
    pub target_std: f64,
    pub seconds: f64,
}

/// Parts of a stored run configuration that must match for a resume to
/// continue the same trace.
fn resume_key(v: &serde_json::Value) -> serde_json::Value {
    serde_json::json!({
        "pretrain": v["pretrain"],
        "data": v["data"],
        "images": v["pretrain_loop"]["images"],
        "rrc_scale": v["pretrain_loop"]["rrc_scale"],
    })
}

fn check_resume(cfg: &RunConfig, meta: &CheckpointMeta) -> Result<(), CliError> {
    if meta.kind != PRETRAIN_KIND {
        return Err(CliError::Config(format!("resume: `{}` checkpoint cannot resume pretraining", meta.kind)));
    }
    if meta.seed != cfg.seed {
        return Err(CliError::Config(format!(
            "seed: checkpoint was written with seed {}, run has seed {}",
            meta.seed, cfg.seed
        )));
    }
    if resume_key(&meta.config) != resume_key(&config_json(cfg)?) {
        return Err(CliError::Config(
            "pretrain: settings differ from the checkpoint being resumed".into(),
        ));
    }
    Ok(())
}

/// Rewrites `path` keeping the rows up to `step`, or starts it afresh.
fn prepare_loss_csv(path: &Path, step: u64) -> Result<(), CliError> {
    let rows = match fs::read_to_string(path) {
        Ok(text) => parse_csv(&text)?,
        Err(_) if step == 0 => Vec::new(),
        Err(_) => {
            log::warn!("{} not found; the resumed trace starts at step {}", path.display(), step + 1);
            Vec::new()
        }
    };
    let kept: Vec<MetricRow> = rows.into_iter().filter(|r| r.epoch <= step).collect();
    fs::write(path, csv_string(&kept))?;
    Ok(())
}

fn drive<S: ImageSource>(
    cfg: &RunConfig,
    run: &mut Pretrainer<P>,
    source: &S,
    csv: &mut BufWriter<File>,
) -> Result<Option<StepRecord>, CliError> {
    let l = &cfg.pretrain_loop;
    let total = cfg.pretrain.schedule.total_steps;
    let end = l.stop_after.map_or(total, |s| s.min(total));
    let json = config_json(cfg)?;
    let mut last = None;
    let start = Instant::now();
    while run.step < end {
        let r = run.step_from(source)?;
        writeln!(csv, "{}", MetricRow::new(r.step, "train", "loss", r.loss).to_csv_line())?;
        if l.log_every > 0 && r.step % l.log_every == 0 {
            println!(
                "step {:>6} loss {:+.6} lr {:.3e} ({:.0}s)",
                r.step,
                r.loss,
                r.lr,
                start.elapsed().as_secs_f64()
            );
        }
        if l.checkpoint_every > 0 && r.step % l.checkpoint_every == 0 {
            csv.flush()?;
            let path = checkpoint_path(&cfg.out_dir, r.step);
            fs::create_dir_all(path.parent().expect("has parent"))?;
            run.state(json.clone()).save(&path)?;
        }
        last = Some(r);
    }
    Ok(last)
}

/// Pretraining with periodic and final checkpoints. The loss trace has one
/// `train,loss` row per optimizer step, keyed by the step number.
pub fn pretrain(cfg: &RunConfig, resume: Option<&Path>) -> Result<PretrainSummary, CliError> {
    let start = Instant::now();
    let mut run = match resume {
        Some(path) => {
            let bytes = fs::read(path).map_err(|e| CliError::Config(format!("resume: `{}`: {e}", path.display())))?;
            check_resume(cfg, &read_meta(&bytes)?)?;
            Pretrainer::<P>::resume(cfg.pretrain.clone(), &bytes, cfg.exec)?
        }
        None => Pretrainer::<P>::new(cfg.pretrain.clone(), cfg.seed, cfg.exec)?,
    };
    fs::create_dir_all(&cfg.out_dir)?;
    let csv_path = cfg.out_dir.join(LOSS_CSV);
    if resume.is_some() {
        prepare_loss_csv(&csv_path, run.step)?;
    } else {
        fs::write(&csv_path, format!("{CSV_HEADER}\n"))?;
    }
    let mut csv = BufWriter::new(OpenOptions::new().append(true).open(&csv_path)?);
    let bc = cfg.pretrain.backbone.clone();
    let b = cfg.pretrain.schedule.batch_size;
    let (last, probe) = match cfg.pretrain_loop.images {
        PretrainImages::Data => {
            let splits = load_data(cfg, geometry(&bc))?;
            let source = DatasetSource {
                data: &splits.train,
                rrc_scale: cfg.pretrain_loop.rrc_scale,
            };
            let last = drive(cfg, &mut run, &source, &mut csv)?;
            let n = b.min(splits.test.len());
            (last, splits.test.batch::<P>(&(0..n).collect::<Vec<_>>())?.0)
        }
        PretrainImages::Noise => {
            let source = NoiseImages {
                channels: bc.channels,
                height: bc.image_size,
                width: bc.image_width(),
            };
            let last = drive(cfg, &mut run, &source, &mut csv)?;
            (last, source.batch::<P>(!cfg.seed, 0, b)?)
        }
    };
    csv.flush()?;
    run.state(config_json(cfg)?).save(&cfg.out_dir.join(FINAL_CKPT))?;
    let (probe_loss, target_std) = run.diagnostics(&probe)?;
    let summary = PretrainSummary {
        steps: run.step,
        last_loss: last.map_or(f64::NAN, |r| r.loss),
        probe_loss,
        target_std,
        seconds: start.elapsed().as_secs_f64(),
    };
    write_json(&cfg.out_dir.join(SUMMARY_JSON), &summary)?;
    println!(
        "pretrain done: {} steps, probe loss {:+.6}, target std {:.3e} ({:.0}s)",
        summary.steps, summary.probe_loss, summary.target_std, summary.seconds
    );
    Ok(summary)
}

/// Backbone weights for transfer and analysis, plus the initialization the
/// same run started from.
pub struct LoadedBackbone {
    pub backbone: Backbone,
    pub params: ParamSet<P>,
    pub init: ParamSet<P>,
    pub pretrained: bool,
}

pub fn pretrain_config_of(meta: &CheckpointMeta) -> Result<PretrainConfig, CliError> {
    serde_json::from_value(meta.config["pretrain"].clone())
        .map_err(|e| CliError::Runtime(format!("checkpoint metadata: pretrain: {e}")))
}

pub fn load_backbone(cfg: &RunConfig) -> Result<LoadedBackbone, CliError> {
    let Some(path) = &cfg.init.checkpoint else {
        let fresh = Pretrainer::<P>::new(cfg.pretrain.clone(), cfg.seed, cfg.exec)?;
        let (backbone, params) = backbone_from_params(&cfg.pretrain.backbone, &fresh.params)?;
        return Ok(LoadedBackbone {
            backbone,
            init: params.clone(),
            params,
            pretrained: false,
        });
    };
    let bytes = fs::read(path).map_err(|e| CliError::Config(format!("init.checkpoint: `{}`: {e}", path.display())))?;
    let meta = read_meta(&bytes)?;
    if meta.kind != PRETRAIN_KIND {
        return Err(CliError::Config(format!(
            "init.checkpoint: expected a {PRETRAIN_KIND} checkpoint, got `{}`",
            meta.kind
        )));
    }
    let pcfg = pretrain_config_of(&meta)?;
    let template = Pretrainer::<P>::new(pcfg.clone(), meta.seed, cfg.exec)?;
    let state = TrainState::from_bytes(&bytes, &template.params)?;
    let weights = match (cfg.init.weights, &state.ema) {
        (Weights::Ema, Some(e)) => e.params(&state.params)?,
        (Weights::Ema, None) => {
            log::warn!("checkpoint has no averaged weights; using the raw ones");
            state.params
        }
        (Weights::Raw, _) => state.params,
    };
    let (backbone, params) = backbone_from_params(&pcfg.backbone, &weights)?;
    let (_, init) = backbone_from_params(&pcfg.backbone, &template.params)?;
    Ok(LoadedBackbone {
        backbone,
        params,
        init,
        pretrained: true,
    })
}

/// Fine-tunes a classifier and returns its final test accuracy.
pub fn finetune(cfg: &RunConfig) -> Result<f64, CliError> {
    let lb = load_backbone(cfg)?;
    let splits = load_data(cfg, geometry(lb.backbone.config()))?;
    fs::create_dir_all(&cfg.out_dir)?;
    let mut csv = BufWriter::new(File::create(cfg.out_dir.join(METRICS_CSV))?);
    writeln!(csv, "{CSV_HEADER}")?;
    let mut io = Ok(());
    let start = Instant::now();
    let out = run_finetune(
        lb.backbone,
        lb.params,
        &splits.train,
        &splits.test,
        &cfg.finetune,
        cfg.seed,
        cfg.exec,
        |row| {
            println!(
                "epoch {:>3} {}/{} {:.6} ({:.0}s)",
                row.epoch,
                row.split,
                row.metric,
                row.value,
                start.elapsed().as_secs_f64()
            );
            if io.is_ok() {
                io = writeln!(csv, "{}", row.to_csv_line());
            }
        },
    )?;
    io?;
    csv.flush()?;
    let steps = (splits.train.len() / cfg.finetune.batch_size * cfg.finetune.epochs) as u64;
    let state = TrainState {
        params: out.params,
        adam: None,
        ema: out.ema,
        meta: CheckpointMeta {
            kind: FINETUNE_KIND.into(),
            step: steps,
            seed: cfg.seed,
            optimizer: Some(cfg.finetune.optimizer.clone()),
            adam_t: steps,
            ema_decay: cfg.finetune.ema_decay,
            config: config_json(cfg)?,
        },
    };
    state.save(&cfg.out_dir.join(FINETUNE_CKPT))?;
    println!("finetune test accuracy {:.4}", out.test_accuracy);
    Ok(out.test_accuracy)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeLine {
    pub pooling: &'static str,
    pub backbone: &'static str,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

/// Linear probes for every configured pooling, and optionally for the
/// backbone's initialization.
pub fn probe(cfg: &RunConfig) -> Result<Vec<ProbeLine>, CliError> {
    let lb = load_backbone(cfg)?;
    let splits = load_data(cfg, geometry(lb.backbone.config()))?;
    let pc = cfg.probe.probe_config();
    let label = if lb.pretrained { "pretrained" } else { "init" };
    let mut sets = vec![(label, &lb.params)];
    if cfg.probe.random_baseline && lb.pretrained {
        sets.push(("random", &lb.init));
    }
    let mut lines = Vec::new();
    let mut rows = Vec::new();
    for &pooling in &cfg.probe.poolings {
        for &(name, params) in &sets {
            let r = linear_probe(&lb.backbone, params, &splits.train, &splits.test, pooling, &pc, cfg.seed, cfg.exec)?;
            println!(
                "probe pooling={} backbone={} train_accuracy={:.4} test_accuracy={:.4}",
                pooling.name(),
                name,
                r.train_accuracy,
                r.test_accuracy
            );
            let metric = format!("{name}_accuracy_{}", pooling.name());
            rows.push(MetricRow::new(pc.epochs as u64, "train", &metric, r.train_accuracy));
            rows.push(MetricRow::new(pc.epochs as u64, "test", &metric, r.test_accuracy));
            lines.push(ProbeLine {
                pooling: pooling.name(),
                backbone: name,
                train_accuracy: r.train_accuracy,
                test_accuracy: r.test_accuracy,
            });
        }
    }
    fs::create_dir_all(&cfg.out_dir)?;
    write_csv(&rows, &cfg.out_dir.join(PROBE_CSV))?;
    Ok(lines)
}

/// Attention maps for every layer, head and query, plus similarity maps.
/// Returns the written paths.
pub fn analyze(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let lb = load_backbone(cfg)?;
    let splits = load_data(cfg, geometry(lb.backbone.config()))?;
    let n = cfg.analyze.images.min(splits.test.len());
    let (x, _) = splits.test.batch::<P>(&(0..n).collect::<Vec<_>>())?;
    let t = lb.backbone.config().num_patches();
    let queries: Vec<usize> = if cfg.analyze.queries.is_empty() {
        (0..t).collect()
    } else {
        cfg.analyze.queries.clone()
    };
    let dir = cfg.out_dir.join(MAPS_DIR);
    fs::create_dir_all(&dir)?;
    let mut written = Vec::new();
    for &q in &queries {
        let mut maps = attention_maps(&lb.backbone, &lb.params, &x, q)?;
        if cfg.analyze.similarity {
            maps.push(similarity_map(&lb.backbone, &lb.params, &x, q)?);
        }
        for m in maps {
            let path = dir.join(m.file_name());
            write_pgm(&m, &path)?;
            written.push(path);
        }
    }
    println!("analyze: wrote {} maps for {} queries to {}", written.len(), queries.len(), dir.display());
    Ok(written)
}

/// Runs every gradient check; fails when any exceeds the tolerance.
pub fn gradcheck(cfg: &RunConfig) -> Result<(), CliError> {
    let start = Instant::now();
    let g = &cfg.gradcheck;
    let results = full_gradcheck(g)?;
    let mut rows = Vec::new();
    let mut failed = 0;
    for r in &results {
        let ok = r.max_rel_error < g.tolerance;
        failed += usize::from(!ok);
        println!("{:<44} {:.3e} {}", r.name, r.max_rel_error, if ok { "ok" } else { "FAIL" });
        rows.push(MetricRow::new(0, "gradcheck", &r.name, r.max_rel_error));
    }
    fs::create_dir_all(&cfg.out_dir)?;
    write_csv(&rows, &cfg.out_dir.join(GRADCHECK_CSV))?;
    let worst = results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    println!(
        "gradcheck: {} checks, worst {:.3e}, tolerance {:.0e} ({:.1}s)",
        results.len(),
        worst,
        g.tolerance,
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        return Err(CliError::Runtime(format!("gradcheck: {failed} checks exceed {:e}", g.tolerance)));
    }
    Ok(())
}

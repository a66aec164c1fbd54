//! Desk-scale ablation tables. Each row pretrains a variant, scores the
//! outcome and, unless the objective degenerated, fine-tunes it.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use nepa::backbone::AttentionMode;
use nepa::train::{DatasetSource, PretrainConfig, Pretrainer};
use nepa::transfer::{backbone_from_params, finetune};

use crate::commands::{load_data, Splits};
use crate::config::{AblationTable, RunConfig};
use crate::error::CliError;

pub const CSV_COLUMNS: &str =
    "table,shift,causal,stop_grad,mask_ratio,finetune_attention,status,accuracy,pretrain_loss,target_std,reference";

#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub shift: bool,
    pub causal: bool,
    pub stop_grad: bool,
    pub mask_ratio: f64,
    pub finetune_attention: AttentionMode,
    /// Reference accuracy for this row, or `fail`.
    pub reference: &'static str,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub table: AblationTable,
    pub variant: Variant,
    /// `ok`, `collapse`, `shortcut` or `diverged`.
    pub status: String,
    pub accuracy: Option<f64>,
    pub pretrain_loss: f64,
    pub target_std: f64,
}

fn mode_name(m: AttentionMode) -> &'static str {
    match m {
        AttentionMode::Causal => "causal",
        AttentionMode::Bidirectional => "bidirect",
    }
}

impl AblationRow {
    pub fn to_csv_line(&self) -> String {
        let v = &self.variant;
        let acc = self.accuracy.map_or(String::new(), |a| format!("{:.4}", a * 100.0));
        format!(
            "{},{},{},{},{},{},{},{},{:.6},{:.6e},{}",
            self.table.name(),
            v.shift,
            v.causal,
            v.stop_grad,
            v.mask_ratio,
            mode_name(v.finetune_attention),
            self.status,
            acc,
            self.pretrain_loss,
            self.target_std,
            v.reference
        )
    }
}

/// Rows in reference order.
pub fn variants(table: AblationTable, base_attention: AttentionMode) -> Vec<Variant> {
    let row = |shift, causal, stop_grad, reference| Variant {
        shift,
        causal,
        stop_grad,
        mask_ratio: 0.0,
        finetune_attention: base_attention,
        reference,
    };
    match table {
        AblationTable::A => vec![
            row(false, true, true, "fail"),
            row(true, false, true, "73.6"),
            row(true, true, false, "fail"),
            row(true, true, true, "76.8"),
        ],
        AblationTable::C => [(0.0, "78.2"), (0.4, "76.4"), (0.6, "75.7")]
            .into_iter()
            .map(|(mask_ratio, reference)| Variant {
                mask_ratio,
                ..row(true, true, true, reference)
            })
            .collect(),
        AblationTable::E => [(AttentionMode::Bidirectional, "82.5"), (AttentionMode::Causal, "81.3")]
            .into_iter()
            .map(|(finetune_attention, reference)| Variant {
                finetune_attention,
                ..row(true, true, true, reference)
            })
            .collect(),
    }
}

fn pretrain_config(base: &PretrainConfig, v: &Variant) -> PretrainConfig {
    let mut c = base.clone();
    c.objective.shift = v.shift;
    c.objective.stop_grad = v.stop_grad;
    c.objective.mask_ratio = v.mask_ratio;
    c.backbone.attention_mode = if v.causal {
        AttentionMode::Causal
    } else {
        AttentionMode::Bidirectional
    };
    c
}

struct Pretrained {
    config: PretrainConfig,
    run: Option<Pretrainer<f32>>,
    status: String,
    loss: f64,
    std: f64,
}

fn pretrain_variant(cfg: &RunConfig, splits: &Splits, pcfg: PretrainConfig) -> Result<Pretrained, CliError> {
    let mut run = Pretrainer::<f32>::new(pcfg.clone(), cfg.seed, cfg.exec)?;
    let source = DatasetSource {
        data: &splits.train,
        rrc_scale: cfg.pretrain_loop.rrc_scale,
    };
    for _ in 0..pcfg.schedule.total_steps {
        match run.step_from(&source) {
            Ok(_) => {}
            Err(nepa::Error::Numeric(m)) => {
                log::warn!("ablation variant diverged: {m}");
                return Ok(Pretrained {
                    config: pcfg,
                    run: None,
                    status: "diverged".into(),
                    loss: f64::NAN,
                    std: f64::NAN,
                });
            }
            Err(e) => return Err(e.into()),
        }
    }
    let n = pcfg.schedule.batch_size.min(splits.test.len());
    let (probe, _) = splits.test.batch::<f32>(&(0..n).collect::<Vec<_>>())?;
    let (loss, std) = run.diagnostics(&probe)?;
    let a = &cfg.ablate;
    let status = if loss < a.fail_loss {
        if std < a.collapse_std {
            "collapse"
        } else {
            "shortcut"
        }
    } else {
        "ok"
    };
    Ok(Pretrained {
        config: pcfg,
        run: Some(run),
        status: status.into(),
        loss,
        std,
    })
}

/// Runs the requested tables, writing `ablate_<table>.csv` for each.
pub fn ablate(cfg: &RunConfig, tables: &[AblationTable]) -> Result<Vec<AblationRow>, CliError> {
    let start = Instant::now();
    let splits = load_data(
        cfg,
        (
            cfg.pretrain.backbone.channels,
            cfg.pretrain.backbone.image_size,
            cfg.pretrain.backbone.image_width(),
        ),
    )?;
    fs::create_dir_all(&cfg.out_dir)?;
    let mut cache: Vec<Pretrained> = Vec::new();
    let mut scores: Vec<(PretrainConfig, AttentionMode, f64)> = Vec::new();
    let mut all = Vec::new();
    for &table in tables {
        let mut text = format!("{CSV_COLUMNS}\n");
        for v in variants(table, cfg.finetune.attention_mode) {
            let pcfg = pretrain_config(&cfg.pretrain, &v);
            let idx = match cache.iter().position(|p| p.config == pcfg) {
                Some(i) => i,
                None => {
                    cache.push(pretrain_variant(cfg, &splits, pcfg.clone())?);
                    cache.len() - 1
                }
            };
            let p = &cache[idx];
            let accuracy = match &p.run {
                Some(run) if p.status == "ok" => {
                    let known = scores
                        .iter()
                        .find(|(c, m, _)| *c == pcfg && *m == v.finetune_attention)
                        .map(|s| s.2);
                    Some(match known {
                        Some(a) => a,
                        None => {
                            let (bb, bp) = backbone_from_params(&pcfg.backbone, &run.eval_params()?)?;
                            let fcfg = nepa::transfer::FinetuneConfig {
                                attention_mode: v.finetune_attention,
                                ..cfg.finetune.clone()
                            };
                            let out = finetune(bb, bp, &splits.train, &splits.test, &fcfg, cfg.seed, cfg.exec, |_| {})?;
                            scores.push((pcfg.clone(), v.finetune_attention, out.test_accuracy));
                            out.test_accuracy
                        }
                    })
                }
                _ => None,
            };
            let row = AblationRow {
                table,
                variant: v,
                status: p.status.clone(),
                accuracy,
                pretrain_loss: p.loss,
                target_std: p.std,
            };
            println!("{} ({:.0}s)", row.to_csv_line(), start.elapsed().as_secs_f64());
            writeln!(text, "{}", row.to_csv_line()).expect("writing to a String");
            all.push(row);
        }
        fs::write(csv_path(cfg, table), text)?;
    }
    Ok(all)
}

pub fn csv_path(cfg: &RunConfig, table: AblationTable) -> PathBuf {
    cfg.out_dir.join(format!("ablate_{}.csv", table.name()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_follow_the_reference_tables() {
        let a = variants(AblationTable::A, AttentionMode::Bidirectional);
        assert_eq!(a.len(), 4);
        let fails: Vec<_> = a.iter().filter(|v| v.reference == "fail").collect();
        assert_eq!(fails.len(), 2);
        assert!(!fails[0].shift && fails[0].stop_grad);
        assert!(fails[1].shift && !fails[1].stop_grad);
        let c = variants(AblationTable::C, AttentionMode::Bidirectional);
        let ratios: Vec<f64> = c.iter().map(|v| v.mask_ratio).collect();
        assert_eq!(ratios, [0.0, 0.4, 0.6]);
        let refs: Vec<&str> = c.iter().map(|v| v.reference).collect();
        assert_eq!(refs, ["78.2", "76.4", "75.7"]);
        let e = variants(AblationTable::E, AttentionMode::Bidirectional);
        assert_eq!(e[0].finetune_attention, AttentionMode::Bidirectional);
        assert_eq!(e[1].finetune_attention, AttentionMode::Causal);
    }

    #[test]
    fn csv_line_has_every_column() {
        let row = AblationRow {
            table: AblationTable::C,
            variant: variants(AblationTable::C, AttentionMode::Bidirectional)[1].clone(),
            status: "ok".into(),
            accuracy: Some(0.5),
            pretrain_loss: -0.25,
            target_std: 0.125,
        };
        let line = row.to_csv_line();
        assert_eq!(line.split(',').count(), CSV_COLUMNS.split(',').count());
        assert_eq!(line, "c,true,true,true,0.4,bidirect,ok,50.0000,-0.250000,1.250000e-1,76.4");
    }

    #[test]
    fn failed_rows_leave_accuracy_empty() {
        let row = AblationRow {
            table: AblationTable::A,
            variant: variants(AblationTable::A, AttentionMode::Bidirectional)[2].clone(),
            status: "collapse".into(),
            accuracy: None,
            pretrain_loss: -1.0,
            target_std: 1e-6,
        };
        let cols: Vec<String> = row.to_csv_line().split(',').map(String::from).collect();
        assert_eq!(cols[6], "collapse");
        assert_eq!(cols[7], "");
        assert_eq!(cols[10], "fail");
    }
}

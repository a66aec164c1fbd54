//! Run configuration: one TOML document shared by every subcommand.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use nepa::checks::GradcheckConfig;
use nepa::data::SynthSpec;
use nepa::parallel::Exec;
use nepa::train::PretrainConfig;
use nepa::transfer::{FinetuneConfig, Pooling, ProbeConfig};

use crate::error::CliError;

/// File name of the resolved-config echo written beside every run's outputs.
pub const ECHO_FILE: &str = "config.resolved.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Output directory; relative paths are taken from the config file's directory.
    pub out_dir: PathBuf,
    pub exec: Exec,
    pub data: DataConfig,
    pub pretrain: PretrainConfig,
    pub pretrain_loop: LoopConfig,
    pub init: InitConfig,
    pub finetune: FinetuneConfig,
    pub probe: ProbeSection,
    pub analyze: AnalyzeConfig,
    pub gradcheck: GradcheckConfig,
    pub ablate: AblateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/nepa"),
            exec: Exec::default(),
            data: DataConfig::default(),
            pretrain: PretrainConfig::default(),
            pretrain_loop: LoopConfig::default(),
            init: InitConfig::default(),
            finetune: FinetuneConfig::default(),
            probe: ProbeSection::default(),
            analyze: AnalyzeConfig::default(),
            gradcheck: GradcheckConfig::default(),
            ablate: AblateConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synth,
    Folder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    pub synth: SynthSpec,
    /// Synthetic indices `0..train_size` form the training split, the next
    /// `test_size` the test split.
    pub train_size: usize,
    pub test_size: usize,
    /// `root/<class>/<file>` folders for `source = "folder"`.
    pub train_dir: Option<PathBuf>,
    pub test_dir: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synth,
            synth: SynthSpec::default(),
            train_size: 6400,
            test_size: 1600,
            train_dir: None,
            test_dir: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PretrainImages {
    /// The training split.
    Data,
    /// Fresh standard-normal images every step.
    Noise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoopConfig {
    pub images: PretrainImages,
    /// Random resized crop area range for `images = "data"`.
    pub rrc_scale: Option<(f64, f64)>,
    /// Checkpoint period in steps; 0 keeps only the final checkpoint.
    pub checkpoint_every: u64,
    /// Progress line period in steps; 0 is silent.
    pub log_every: u64,
    /// Halt after this many completed steps even if the schedule runs longer.
    pub stop_after: Option<u64>,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            images: PretrainImages::Data,
            rrc_scale: Some((0.2, 1.0)),
            checkpoint_every: 0,
            log_every: 100,
            stop_after: None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weights {
    /// The averaged copy when the checkpoint has one.
    #[default]
    Ema,
    Raw,
}

/// Backbone source for `finetune`, `probe` and `analyze`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitConfig {
    /// Pretraining checkpoint; without one the backbone is freshly initialized
    /// from `pretrain.backbone`.
    pub checkpoint: Option<PathBuf>,
    pub weights: Weights,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub poolings: Vec<Pooling>,
    /// Also probe the backbone's initialization.
    pub random_baseline: bool,
}

impl Default for ProbeSection {
    fn default() -> Self {
        let p = ProbeConfig::default();
        Self {
            epochs: p.epochs,
            batch_size: p.batch_size,
            lr: p.lr,
            weight_decay: p.weight_decay,
            poolings: vec![Pooling::Last, Pooling::Avg],
            random_baseline: true,
        }
    }
}

impl ProbeSection {
    pub fn probe_config(&self) -> ProbeConfig {
        ProbeConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalyzeConfig {
    /// Query positions; empty means all.
    pub queries: Vec<usize>,
    /// Number of test images the maps are averaged over.
    pub images: usize,
    pub similarity: bool,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        Self {
            queries: Vec::new(),
            images: 16,
            similarity: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationTable {
    /// Shifting, causal masking and stop-gradient toggles.
    A,
    /// Input masking ratios.
    C,
    /// Attention type during fine-tuning.
    E,
}

impl AblationTable {
    pub fn name(self) -> &'static str {
        match self {
            AblationTable::A => "a",
            AblationTable::C => "c",
            AblationTable::E => "e",
        }
    }
}

impl std::str::FromStr for AblationTable {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "a" => Ok(AblationTable::A),
            "c" => Ok(AblationTable::C),
            "e" => Ok(AblationTable::E),
            _ => Err(format!("unknown table `{s}` (expected a, c or e)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub tables: Vec<AblationTable>,
    /// A pretraining loss below this counts as a degenerate solution.
    pub fail_loss: f64,
    /// Degenerate runs whose normalized target spread is below this are
    /// reported as `collapse`, the rest as `shortcut`.
    pub collapse_std: f64,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            tables: vec![AblationTable::A, AblationTable::C, AblationTable::E],
            fail_loss: -0.999,
            collapse_std: 1e-3,
        }
    }
}

fn bad(path: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{path}: {msg}"))
}

/// Library validation messages name fields relative to their section.
fn prefixed(prefix: &str, r: nepa::Result<()>) -> Result<(), CliError> {
    r.map_err(|e| match e {
        nepa::Error::Config(m) if !prefix.is_empty() && !m.starts_with(prefix) => {
            CliError::Config(format!("{prefix}.{m}"))
        }
        other => CliError::from(other),
    })
}

impl RunConfig {
    /// Parses a TOML document. Errors name the offending field path.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let de = toml::de::Deserializer::parse(text).map_err(|e| CliError::Config(format!("toml: {e}")))?;
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            CliError::Config(format!("{path}: {}", e.into_inner().message().trim()))
        })
    }

    /// Reads, parses and validates `path`, resolving relative paths against
    /// its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("config `{}`: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out_dir);
        for p in [&mut self.data.train_dir, &mut self.data.test_dir, &mut self.init.checkpoint]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
    }

    /// Checks every section, whichever command runs.
    pub fn validate(&self) -> Result<(), CliError> {
        prefixed("pretrain", self.pretrain.validate())?;
        prefixed("", self.finetune.validate())?;
        prefixed("", self.probe.probe_config().validate())?;
        prefixed("", self.gradcheck.validate())?;
        if self.probe.poolings.is_empty() {
            return Err(bad("probe.poolings", "must list at least one pooling"));
        }
        let d = &self.data;
        match d.source {
            DataSource::Synth => {
                prefixed("data.synth", d.synth.validate())?;
                let bc = &self.pretrain.backbone;
                if d.synth.image_size != bc.image_size || bc.image_width() != bc.image_size {
                    return Err(bad(
                        "data.synth.image_size",
                        format!("{} does not match pretrain.backbone geometry", d.synth.image_size),
                    ));
                }
                if d.synth.channels != bc.channels {
                    return Err(bad(
                        "data.synth.channels",
                        format!("{} does not match pretrain.backbone.channels {}", d.synth.channels, bc.channels),
                    ));
                }
                if d.train_size == 0 {
                    return Err(bad("data.train_size", "must be positive"));
                }
                if d.test_size == 0 {
                    return Err(bad("data.test_size", "must be positive"));
                }
            }
            DataSource::Folder => {
                if d.train_dir.is_none() {
                    return Err(bad("data.train_dir", "required when source = \"folder\""));
                }
                if d.test_dir.is_none() {
                    return Err(bad("data.test_dir", "required when source = \"folder\""));
                }
            }
        }
        let l = &self.pretrain_loop;
        if let Some((lo, hi)) = l.rrc_scale {
            if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
                return Err(bad("pretrain_loop.rrc_scale", format!("need 0 < lo <= hi <= 1, got ({lo}, {hi})")));
            }
        }
        if l.stop_after == Some(0) {
            return Err(bad("pretrain_loop.stop_after", "must be positive"));
        }
        if self.analyze.images == 0 {
            return Err(bad("analyze.images", "must be positive"));
        }
        let t = self.pretrain.backbone.num_patches();
        if let Some(&q) = self.analyze.queries.iter().find(|&&q| q >= t) {
            return Err(bad("analyze.queries", format!("query {q} out of range for {t} patches")));
        }
        let a = &self.ablate;
        if !(a.fail_loss > -1.0 && a.fail_loss < 1.0) {
            return Err(bad("ablate.fail_loss", "must be in (-1, 1)"));
        }
        if !(a.collapse_std > 0.0) {
            return Err(bad("ablate.collapse_std", "must be positive"));
        }
        Ok(())
    }

    /// The resolved configuration as TOML.
    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string_pretty(self).map_err(|e| CliError::Runtime(format!("config echo: {e}")))
    }

    /// Writes [`ECHO_FILE`] into `out_dir`.
    pub fn write_echo(&self) -> Result<(), CliError> {
        std::fs::create_dir_all(&self.out_dir)?;
        std::fs::write(self.out_dir.join(ECHO_FILE), self.to_toml()?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn err(text: &str) -> String {
        match RunConfig::parse(text).and_then(|c| c.validate().map(|_| c)) {
            Err(CliError::Config(m)) => m,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn empty_document_is_the_default() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn unknown_key_names_its_path() {
        let m = err("[pretrain.backbone]\ndepht = 3\n");
        assert!(m.starts_with("pretrain.backbone"), "{m}");
        assert!(m.contains("depht"), "{m}");
    }

    #[test]
    fn wrong_type_names_its_path() {
        let m = err("[pretrain.schedule]\nbase_lr = \"fast\"\n");
        assert!(m.starts_with("pretrain.schedule.base_lr"), "{m}");
    }

    #[test]
    fn semantic_errors_name_their_path() {
        assert!(err("[pretrain.backbone]\nheads = 5\n").starts_with("pretrain.backbone."));
        assert!(err("[pretrain.schedule]\nwarmup_steps = 10\n").starts_with("pretrain.schedule.warmup_steps"));
        assert!(err("[finetune]\nbatch_size = 3\n").starts_with("finetune.batch_size"));
        assert!(err("[data]\nsource = \"folder\"\n").starts_with("data.train_dir"));
        assert!(err("[data.synth]\nimage_size = 16\n").starts_with("data.synth.image_size"));
        assert!(err("[probe]\npoolings = []\n").starts_with("probe.poolings"));
        assert!(err("[analyze]\nqueries = [16]\n").starts_with("analyze.queries"));
    }

    #[test]
    fn echo_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.seed = 9;
        cfg.init.checkpoint = Some("x.ckpt".into());
        cfg.ablate.tables = vec![AblationTable::C];
        let back = RunConfig::parse(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn zero_decay_disables_averaging() {
        let cfg = RunConfig::parse("[pretrain]\nema_decay = 0.0\n[finetune]\nema_decay = 0.99\n").unwrap();
        assert_eq!(cfg.pretrain.ema_decay, None);
        assert_eq!(cfg.finetune.ema_decay, Some(0.99));
        assert_eq!(RunConfig::parse(&cfg.to_toml().unwrap()).unwrap(), cfg);
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let mut cfg = RunConfig::parse("out_dir = \"out\"\n[init]\ncheckpoint = \"/abs/a.ckpt\"\n").unwrap();
        cfg.resolve_paths(Path::new("/etc/runs"));
        assert_eq!(cfg.out_dir, PathBuf::from("/etc/runs/out"));
        assert_eq!(cfg.init.checkpoint, Some(PathBuf::from("/abs/a.ckpt")));
    }

    proptest::proptest! {
        #[test]
        fn echo_parses_back_to_the_same_config(
            seed in 0u64..u64::MAX,
            dim_per_head in 1usize..8,
            heads in 1usize..6,
            lr in 1e-6f64..1.0,
            decay in proptest::option::of(0.5f64..0.99999),
            stop_after in proptest::option::of(1u64..10_000),
            shift in proptest::bool::ANY,
            mask in 0.0f64..0.9,
        ) {
            let mut cfg = RunConfig { seed, ..Default::default() };
            cfg.pretrain.backbone.heads = heads;
            cfg.pretrain.backbone.dim = 4 * dim_per_head * heads;
            cfg.pretrain.schedule.base_lr = lr;
            cfg.pretrain.ema_decay = decay;
            cfg.pretrain.objective.shift = shift;
            cfg.pretrain.objective.mask_ratio = mask;
            cfg.pretrain_loop.stop_after = stop_after;
            let back = RunConfig::parse(&cfg.to_toml().unwrap()).unwrap();
            proptest::prop_assert_eq!(back, cfg);
        }
    }
}

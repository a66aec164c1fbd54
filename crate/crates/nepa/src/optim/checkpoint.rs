//! Training checkpoints.
//!
//! Layout (little-endian): magic `NEPA`, `u32` version, `u32` record count,
//! tensor records, `u64` metadata length, UTF-8 JSON metadata. Parameters are
//! stored under their own names, optimizer moments under `optim.m.<name>` and
//! `optim.v.<name>`, averaged weights under `ema.<name>`.

use std::io::{Cursor, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamW, AdamWConfig, Ema};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::record::{read_record, write_record};
use crate::tensor::{Element, Tensor};

pub const MAGIC: &[u8; 4] = b"NEPA";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Producing command, e.g. `pretrain`.
    pub kind: String,
    /// Completed optimizer steps.
    pub step: u64,
    /// Run seed; together with `step` it fixes every later random draw.
    pub seed: u64,
    pub optimizer: Option<AdamWConfig>,
    pub adam_t: u64,
    pub ema_decay: Option<f64>,
    /// Resolved run configuration.
    pub config: serde_json::Value,
}

#[derive(Clone, Debug)]
pub struct TrainState<E: Element> {
    pub params: ParamSet<E>,
    pub adam: Option<AdamW<E>>,
    pub ema: Option<Ema>,
    pub meta: CheckpointMeta,
}

fn u32_at(buf: &mut Cursor<&[u8]>) -> Result<u32> {
    let mut b = [0u8; 4];
    buf.read_exact(&mut b)
        .map_err(|_| Error::Checkpoint("truncated checkpoint header".into()))?;
    Ok(u32::from_le_bytes(b))
}

impl<E: Element> TrainState<E> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let mut records: Vec<(String, &Tensor<E>)> = self
            .params
            .iter()
            .map(|(i, t)| (i.name.clone(), t))
            .collect();
        if let Some(a) = &self.adam {
            for (i, t) in self.params.infos().iter().zip(&a.m) {
                records.push((format!("optim.m.{}", i.name), t));
            }
            for (i, t) in self.params.infos().iter().zip(&a.v) {
                records.push((format!("optim.v.{}", i.name), t));
            }
        }
        let ema_count = self.ema.as_ref().map_or(0, |e| e.shadow.len());
        out.extend_from_slice(&((records.len() + ema_count) as u32).to_le_bytes());
        for (name, t) in &records {
            write_record(&mut out, name, *t)?;
        }
        if let Some(e) = &self.ema {
            for (i, t) in self.params.infos().iter().zip(&e.shadow) {
                write_record(&mut out, &format!("ema.{}", i.name), t)?;
            }
        }
        let meta = serde_json::to_vec(&self.meta)
            .map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        Ok(out)
    }

    /// Writes to a temporary sibling and renames, so a crash never leaves a
    /// half-written checkpoint under `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Parses a checkpoint whose parameters must match `template` by name
    /// and shape. Unknown or missing tensors are errors.
    pub fn from_bytes(bytes: &[u8], template: &ParamSet<E>) -> Result<Self> {
        let meta = read_meta(bytes)?;
        let mut cur = Cursor::new(bytes);
        cur.set_position(8);
        let count = u32_at(&mut cur)? as usize;
        let n = template.len();
        let mut params = template.clone();
        let mut seen = vec![false; n];
        let mut m: Vec<Option<Tensor<E>>> = vec![None; n];
        let mut v: Vec<Option<Tensor<E>>> = vec![None; n];
        let mut ema: Vec<Option<Tensor<f64>>> = vec![None; n];
        for _ in 0..count {
            // read wide: the EMA shadow is f64 even in an f32 run
            let (name, t) = read_record::<f64, _>(&mut cur)?;
            let (slot, base) = if let Some(b) = name.strip_prefix("optim.m.") {
                (1, b)
            } else if let Some(b) = name.strip_prefix("optim.v.") {
                (2, b)
            } else if let Some(b) = name.strip_prefix("ema.") {
                (3, b)
            } else {
                (0, name.as_str())
            };
            let id = template
                .id(base)
                .ok_or_else(|| Error::Checkpoint(format!("unknown tensor `{name}`")))?;
            if t.shape() != template.get(id).shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    template.get(id).shape()
                )));
            }
            let i = id.index();
            match slot {
                0 => {
                    params.set(id, t.cast())?;
                    seen[i] = true;
                }
                1 => m[i] = Some(t.cast()),
                2 => v[i] = Some(t.cast()),
                _ => ema[i] = Some(t),
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Checkpoint(format!(
                "missing tensor `{}`",
                template.infos()[i].name
            )));
        }
        let all = |xs: &[Option<Tensor<_>>]| xs.iter().all(Option::is_some);
        let none = |xs: &[Option<Tensor<_>>]| xs.iter().all(Option::is_none);
        let adam = match &meta.optimizer {
            Some(cfg) if n > 0 && all(&m) && all(&v) => Some(AdamW {
                config: cfg.clone(),
                m: m.into_iter().flatten().collect(),
                v: v.into_iter().flatten().collect(),
                t: meta.adam_t,
            }),
            _ if none(&m) && none(&v) => None,
            _ => return Err(Error::Checkpoint("incomplete optimizer state".into())),
        };
        let ema = match meta.ema_decay {
            Some(decay) if ema.iter().all(Option::is_some) => Some(Ema {
                decay,
                shadow: ema.into_iter().flatten().collect(),
            }),
            None if ema.iter().all(Option::is_none) => None,
            _ => return Err(Error::Checkpoint("incomplete EMA state".into())),
        };
        Ok(Self {
            params,
            adam,
            ema,
            meta,
        })
    }

    pub fn load(path: &Path, template: &ParamSet<E>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?, template)
    }
}

/// Checks the header and decodes only the metadata block.
pub fn read_meta(bytes: &[u8]) -> Result<CheckpointMeta> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Version("not a checkpoint (bad magic bytes)".into()));
    }
    let mut cur = Cursor::new(bytes);
    cur.set_position(4);
    let version = u32_at(&mut cur)?;
    if version != VERSION {
        return Err(Error::Version(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let count = u32_at(&mut cur)?;
    for _ in 0..count {
        read_record::<f64, _>(&mut cur)?;
    }
    let mut len = [0u8; 8];
    cur.read_exact(&mut len)
        .map_err(|_| Error::Checkpoint("truncated metadata block".into()))?;
    let len = u64::from_le_bytes(len) as usize;
    let start = cur.position() as usize;
    let end = start
        .checked_add(len)
        .filter(|&e| e == bytes.len())
        .ok_or_else(|| Error::Checkpoint("truncated or oversized metadata block".into()))?;
    serde_json::from_slice(&bytes[start..end]).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))
}

pub fn read_meta_file(path: &Path) -> Result<CheckpointMeta> {
    read_meta(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn state() -> TrainState<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = ParamSet::new();
        p.register("a.weight", Tensor::randn([3, 2], 1.0, &mut rng), 0, true).unwrap();
        p.register("a.bias", Tensor::randn([2], 1.0, &mut rng), 0, false).unwrap();
        let mut adam = AdamW::new(AdamWConfig::default(), &p);
        let grads: Vec<_> = p.tensors().iter().map(|t| Some(t.map(|v| v * 0.5))).collect();
        adam.step(&mut p, &grads, 0.1, &[1.0, 1.0]).unwrap();
        let mut ema = Ema::new(0.99, &p);
        ema.update(&p).unwrap();
        TrainState {
            adam: Some(adam),
            ema: Some(ema),
            meta: CheckpointMeta {
                kind: "pretrain".into(),
                step: 1,
                seed: 7,
                optimizer: Some(AdamWConfig::default()),
                adam_t: 1,
                ema_decay: Some(0.99),
                config: serde_json::json!({"dim": 4}),
            },
            params: p,
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let s = state();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        s.save(&path).unwrap();
        let loaded = TrainState::load(&path, &s.params).unwrap();
        assert!(loaded.params.bit_eq(&s.params));
        assert_eq!(loaded.meta, s.meta);
        assert_eq!(loaded.to_bytes().unwrap(), std::fs::read(&path).unwrap());
    }

    #[test]
    fn rejects_bad_header_and_truncation() {
        let s = state();
        let mut b = s.to_bytes().unwrap();
        let good = b.clone();
        b[0] = b'X';
        assert!(matches!(TrainState::from_bytes(&b, &s.params), Err(Error::Version(_))));
        let mut b = good.clone();
        b[4] = 9;
        assert!(matches!(TrainState::from_bytes(&b, &s.params), Err(Error::Version(_))));
        for cut in [6, 20, good.len() / 2, good.len() - 3] {
            assert!(matches!(
                TrainState::from_bytes(&good[..cut], &s.params),
                Err(Error::Checkpoint(_))
            ));
        }
    }

    #[test]
    fn rejects_unknown_and_missing_tensors() {
        let s = state();
        let b = s.to_bytes().unwrap();
        let mut other = ParamSet::<f32>::new();
        other.register("a.weight", Tensor::zeros([3, 2]), 0, true).unwrap();
        let e = TrainState::from_bytes(&b, &other).unwrap_err();
        assert!(e.to_string().contains("unknown tensor"), "{e}");
        let mut bigger = s.params.clone();
        bigger.register("head.weight", Tensor::zeros([1]), 1, true).unwrap();
        let e = TrainState::from_bytes(&b, &bigger).unwrap_err();
        assert!(e.to_string().contains("missing tensor `head.weight`"), "{e}");
    }
}

//! Attention and similarity maps over the patch grid, PGM export and metric
//! traces.

use std::fmt::Write as _;
use std::path::Path;

use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::{Element, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapKind {
    Attention { layer: usize, head: usize },
    Similarity,
}

/// Scalar field over the `[rows, cols]` patch grid for one query position.
#[derive(Clone, Debug, PartialEq)]
pub struct AnalysisMap {
    pub kind: MapKind,
    pub query: usize,
    pub grid: Tensor<f64>,
}

impl AnalysisMap {
    /// Value range mapped to black and white: fixed `[−1, 1]` for similarity,
    /// the map's own extremes for attention.
    pub fn display_range(&self) -> (f64, f64) {
        match self.kind {
            MapKind::Similarity => (-1.0, 1.0),
            MapKind::Attention { .. } => {
                let d = self.grid.data();
                let lo = d.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                (lo, hi)
            }
        }
    }

    /// `attn_L{l}_H{h}_Q{q}.pgm` or `sim_Q{q}.pgm`.
    pub fn file_name(&self) -> String {
        match self.kind {
            MapKind::Attention { layer, head } => format!("attn_L{layer}_H{head}_Q{}.pgm", self.query),
            MapKind::Similarity => format!("sim_Q{}.pgm", self.query),
        }
    }
}

fn check_query(backbone: &Backbone, query: usize) -> Result<()> {
    let t = backbone.config().num_patches();
    if query >= t {
        return Err(Error::Config(format!("analysis.queries: query {query} out of range for {t} patches")));
    }
    Ok(())
}

fn to_grid(backbone: &Backbone, values: Vec<f64>) -> Tensor<f64> {
    let (rows, cols) = backbone.config().grid();
    Tensor::new(vec![rows, cols], values).expect("one value per patch")
}

/// Post-softmax attention of `query` over all keys for every layer and head,
/// averaged over the batch, in `(layer, head)` order.
pub fn attention_maps<E: Element>(
    backbone: &Backbone,
    params: &ParamSet<E>,
    images: &Tensor<E>,
    query: usize,
) -> Result<Vec<AnalysisMap>> {
    check_query(backbone, query)?;
    let tape = Tape::new();
    let bound = params.bind_frozen(&tape);
    let seq = backbone.forward(&tape, &bound, images, true)?;
    let mut out = Vec::new();
    for (layer, trace) in seq.layers.iter().enumerate() {
        let a = trace.attn.value();
        let s = a.shape();
        let (b, heads, t) = (s[0], s[1], s[2]);
        let d = a.data();
        for head in 0..heads {
            let mut row = vec![0.0; t];
            for bi in 0..b {
                let base = ((bi * heads + head) * t + query) * t;
                for (r, v) in row.iter_mut().zip(&d[base..base + t]) {
                    *r += v.as_f64() / b as f64;
                }
            }
            out.push(AnalysisMap {
                kind: MapKind::Attention { layer, head },
                query,
                grid: to_grid(backbone, row),
            });
        }
    }
    Ok(out)
}

/// One layer and head of [`attention_maps`].
pub fn attention_map<E: Element>(
    backbone: &Backbone,
    params: &ParamSet<E>,
    images: &Tensor<E>,
    layer: usize,
    head: usize,
    query: usize,
) -> Result<AnalysisMap> {
    let c = backbone.config();
    if layer >= c.depth || head >= c.heads {
        return Err(Error::Config(format!(
            "analysis: layer {layer} / head {head} out of range for depth {} and {} heads",
            c.depth, c.heads
        )));
    }
    let mut maps = attention_maps(backbone, params, images, query)?;
    Ok(maps.swap_remove(layer * c.heads + head))
}

/// Cosine between the prediction made at `query` (the estimate of the next
/// embedding) and every patch embedding, averaged over the batch.
pub fn similarity_map<E: Element>(
    backbone: &Backbone,
    params: &ParamSet<E>,
    images: &Tensor<E>,
    query: usize,
) -> Result<AnalysisMap> {
    check_query(backbone, query)?;
    let tape = Tape::new();
    let bound = params.bind_frozen(&tape);
    let seq = backbone.forward(&tape, &bound, images, false)?;
    let (z, h) = (seq.z.value().to_f64_vec(), seq.h_out.value().to_f64_vec());
    let s = seq.z.shape();
    let (b, t, d) = (s[0], s[1], s[2]);
    let mut vals = vec![0.0; t];
    for bi in 0..b {
        let p = &h[(bi * t + query) * d..(bi * t + query + 1) * d];
        for (ti, v) in vals.iter_mut().enumerate() {
            let zt = &z[(bi * t + ti) * d..(bi * t + ti + 1) * d];
            *v += cosine(p, zt) / b as f64;
        }
    }
    Ok(AnalysisMap {
        kind: MapKind::Similarity,
        query,
        grid: to_grid(backbone, vals),
    })
}

/// Cosine similarity clamped to `[−1, 1]`; zero vectors give 0.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// 8-bit binary PGM of the map scaled linearly from its display range.
/// A degenerate range renders mid-grey.
pub fn encode_pgm(map: &AnalysisMap) -> Result<Vec<u8>> {
    let s = map.grid.shape();
    if s.len() != 2 {
        return Err(Error::shape("encode_pgm", s, &[0, 0]));
    }
    let (lo, hi) = map.display_range();
    let mut out = format!("P5\n{} {}\n255\n", s[1], s[0]).into_bytes();
    out.extend(map.grid.data().iter().map(|&v| {
        if hi > lo {
            ((v - lo) / (hi - lo) * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            128
        }
    }));
    Ok(out)
}

pub fn write_pgm(map: &AnalysisMap, path: &Path) -> Result<()> {
    std::fs::write(path, encode_pgm(map)?)?;
    Ok(())
}

/// Parses an 8-bit P5 image into `(width, height, pixels)`.
pub fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |m: &str| Error::Data(format!("pgm: {m}"));
    if !bytes.starts_with(b"P5") {
        return Err(bad("missing P5 magic"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in &mut fields {
        while bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
            pos += 1;
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("bad header"))?;
    }
    let [w, h, max] = fields;
    if max != 255 {
        return Err(bad("only 8-bit maps are supported"));
    }
    let data = bytes
        .get(pos + 1..pos + 1 + w * h)
        .ok_or_else(|| bad("truncated raster"))?;
    Ok((w, h, data.to_vec()))
}

/// One `epoch,split,metric,value` row.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub epoch: u64,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

impl MetricRow {
    pub fn new(epoch: u64, split: &str, metric: &str, value: f64) -> Self {
        Self {
            epoch,
            split: split.into(),
            metric: metric.into(),
            value,
        }
    }

    /// The row without its newline; values use the shortest exact form.
    pub fn to_csv_line(&self) -> String {
        format!("{},{},{},{:?}", self.epoch, self.split, self.metric, self.value)
    }
}

pub const CSV_HEADER: &str = "epoch,split,metric,value";

pub fn csv_string(rows: &[MetricRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.to_csv_line());
    }
    s
}

pub fn write_csv(rows: &[MetricRow], path: &Path) -> Result<()> {
    std::fs::write(path, csv_string(rows))?;
    Ok(())
}

pub fn parse_csv(text: &str) -> Result<Vec<MetricRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::Data("csv: missing header".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::Data(format!("csv: bad row `{l}`"));
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(MetricRow {
                epoch: f[0].parse().map_err(|_| bad())?,
                split: f[1].into(),
                metric: f[2].into(),
                value: f[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

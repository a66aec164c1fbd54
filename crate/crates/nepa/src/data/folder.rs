//! Image folders laid out as `root/<class>/<file>`, PNG or binary PPM.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use super::augment::{resize_bilinear, Rect};
use super::{Dataset, ImageSample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    out.sort();
    Ok(out)
}

/// Loads every decodable image. Classes are subdirectories in byte order,
/// files within a class likewise. Undecodable files are skipped and counted.
/// With `size = Some((h, w))` images are bilinearly resized to it; without,
/// all images must share one size.
pub fn load_folder(root: &Path, size: Option<(usize, usize)>) -> Result<Dataset> {
    let mut classes = Vec::new();
    let mut samples = Vec::new();
    let mut skipped = 0;
    let mut dims: Option<(usize, usize)> = size;
    for dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let label = classes.len();
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let files: Vec<PathBuf> = sorted_entries(&dir)?.into_iter().filter(|p| p.is_file()).collect();
        if files.is_empty() {
            return Err(Error::Data(format!("class directory `{}` is empty", dir.display())));
        }
        for f in files {
            let img = match fs::read(&f).map_err(Error::from).and_then(|b| decode(&b)) {
                Ok(img) => img,
                Err(e) => {
                    log::warn!("skipping {}: {e}", f.display());
                    skipped += 1;
                    continue;
                }
            };
            let (h, w) = (img.shape()[1], img.shape()[2]);
            let img = match dims {
                None => {
                    dims = Some((h, w));
                    img
                }
                Some(d) if d == (h, w) => img,
                Some((th, tw)) if size.is_some() => {
                    let rect = Rect {
                        top: 0,
                        left: 0,
                        height: h,
                        width: w,
                    };
                    resize_bilinear(&img, rect, th, tw)?
                }
                Some(d) => {
                    return Err(Error::Data(format!(
                        "{} is {h}x{w}, earlier images are {}x{}",
                        f.display(),
                        d.0,
                        d.1
                    )))
                }
            };
            let id = samples.len() as u64;
            samples.push(ImageSample {
                pixels: img,
                label,
                id,
            });
        }
        classes.push(name);
    }
    if classes.is_empty() {
        return Err(Error::Data(format!("no class directories under `{}`", root.display())));
    }
    Ok(Dataset {
        samples,
        classes,
        skipped,
    })
}

/// Decodes PNG or P6 bytes to `[3, H, W]` in `[0, 1]`.
pub fn decode(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.starts_with(b"\x89PNG") {
        decode_png(bytes)
    } else if bytes.starts_with(b"P6") {
        decode_ppm(bytes)
    } else {
        Err(Error::Data("unrecognized image format".into()))
    }
}

fn planar(h: usize, w: usize, channels: usize, get: impl Fn(usize, usize) -> f32) -> Result<Tensor<f32>> {
    // channel-major [3, H, W]; grey replicates, alpha is dropped
    let mut out = Vec::with_capacity(3 * h * w);
    for c in 0..3 {
        let src = if channels < 3 { 0 } else { c };
        for px in 0..h * w {
            out.push(get(px, src));
        }
    }
    Tensor::new(vec![3, h, w], out)
}

fn decode_png(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut dec = png::Decoder::new(std::io::Cursor::new(bytes));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| Error::Data(format!("png: {e}")))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| Error::Data("png: image too large".into()))?];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Data(format!("png: {e}")))?;
    let channels = info.color_type.samples();
    let (w, h) = (info.width as usize, info.height as usize);
    let data = &buf[..info.buffer_size()];
    planar(h, w, channels, |px, c| data[px * channels + c] as f32 / 255.0)
}

fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut pos = 2;
    let mut field = || -> Result<usize> {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(Error::Data("ppm: truncated header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Data("ppm: bad header field".into()))
    };
    let (w, h, max) = (field()?, field()?, field()?);
    if max == 0 || max > 65535 || w == 0 || h == 0 {
        return Err(Error::Data(format!("ppm: bad header {w}x{h} max {max}")));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = pos + 1;
    let width = if max < 256 { 1 } else { 2 };
    let need = w * h * 3 * width;
    let data = bytes
        .get(start..start + need)
        .ok_or_else(|| Error::Data("ppm: truncated raster".into()))?;
    let scale = max as f32;
    planar(h, w, 3, |px, c| {
        let i = (px * 3 + c) * width;
        let v = if width == 1 {
            data[i] as u32
        } else {
            u32::from(data[i]) << 8 | u32::from(data[i + 1])
        };
        v as f32 / scale
    })
}

fn to_bytes_rgb(img: &Tensor<f32>) -> Result<(usize, usize, Vec<u8>)> {
    let s = img.shape();
    if s.len() != 3 || !(s[0] == 1 || s[0] == 3) {
        return Err(Error::shape("image export", s, &[3]));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let d = img.data();
    let mut out = Vec::with_capacity(h * w * 3);
    for px in 0..h * w {
        for ch in 0..3 {
            let src = if c == 1 { 0 } else { ch };
            out.push((d[src * h * w + px].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok((h, w, out))
}

pub fn write_png(path: &Path, img: &Tensor<f32>) -> Result<()> {
    let (h, w, rgb) = to_bytes_rgb(img)?;
    let file = BufWriter::new(fs::File::create(path)?);
    let mut enc = png::Encoder::new(file, w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut wr = enc.write_header().map_err(|e| Error::Data(format!("png: {e}")))?;
    wr.write_image_data(&rgb).map_err(|e| Error::Data(format!("png: {e}")))?;
    Ok(())
}

pub fn write_ppm(path: &Path, img: &Tensor<f32>) -> Result<()> {
    let (h, w, rgb) = to_bytes_rgb(img)?;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(&rgb);
    fs::write(path, out)?;
    Ok(())
}

/// Writes `root/<class>/<id>.png` for every sample.
pub fn export_folder(ds: &Dataset, root: &Path) -> Result<()> {
    for name in &ds.classes {
        fs::create_dir_all(root.join(name))?;
    }
    for s in &ds.samples {
        let path = root.join(&ds.classes[s.label]).join(format!("{:06}.png", s.id));
        write_png(&path, &s.pixels)?;
    }
    Ok(())
}

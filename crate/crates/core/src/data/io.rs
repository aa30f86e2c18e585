//! Depth (PFM, 16-bit PNG), RGB PNG, intrinsics and manifest files.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::Domain;
use crate::error::{Error, Result};
use crate::geometry::Intrinsics;
use crate::grids::{Grid2, Mask, RgbImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DepthFormat {
    /// Little-endian 32-bit float, bottom-up rows, scale `-1.0`.
    Pfm,
    /// 16-bit grayscale with a `<file>.meta` sidecar holding scale/offset.
    Png16,
}

impl DepthFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("pfm") => Ok(Self::Pfm),
            Some("png") => Ok(Self::Png16),
            other => Err(Error::UnsupportedFormat(format!(
                "depth file extension {other:?}"
            ))),
        }
    }
}

/// Invalid pixels are stored as 0 (PFM) or the reserved code (PNG16).
pub fn write_depth(grid: &Grid2, mask: &Mask, path: &Path, format: DepthFormat) -> Result<()> {
    mask.check_shape(grid)?;
    match format {
        DepthFormat::Pfm => write_pfm(grid, mask, path),
        DepthFormat::Png16 => write_png16(grid, mask, path),
    }
}

/// Non-finite or zero values come back as invalid mask entries.
pub fn read_depth(path: &Path) -> Result<(Grid2, Mask)> {
    match DepthFormat::from_path(path)? {
        DepthFormat::Pfm => read_pfm(path),
        DepthFormat::Png16 => read_png16(path),
    }
}

fn write_pfm(grid: &Grid2, mask: &Mask, path: &Path) -> Result<()> {
    let (h, w) = grid.shape();
    let mut buf = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    buf.reserve(h * w * 4);
    for y in (0..h).rev() {
        for x in 0..w {
            let v = if mask.is_valid(y, x) { grid.get(y, x) as f32 } else { 0.0 };
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

fn malformed(path: &Path, what: &str) -> Error {
    Error::MalformedFile(format!("{}: {what}", path.display()))
}

fn read_pfm(path: &Path) -> Result<(Grid2, Mask)> {
    let bytes = fs::read(path)?;
    // three whitespace-terminated header fields after the magic line
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos || pos >= bytes.len() {
            return Err(malformed(path, "truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1; // single whitespace byte before the raster
    match fields[0].as_str() {
        "Pf" => {}
        "PF" => return Err(Error::UnsupportedFormat("three-channel PFM".into())),
        _ => return Err(malformed(path, "bad magic")),
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| malformed(path, "bad dimensions"));
    let (w, h) = (parse(&fields[1])?, parse(&fields[2])?);
    let scale: f64 = fields[3].parse().map_err(|_| malformed(path, "bad scale"))?;
    if w == 0 || h == 0 || scale == 0.0 || !scale.is_finite() {
        return Err(malformed(path, "bad header values"));
    }
    let raster = &bytes[pos.min(bytes.len())..];
    if raster.len() != w * h * 4 {
        return Err(malformed(path, "raster size does not match header"));
    }
    let little = scale < 0.0;
    let mut values = vec![0.0; w * h];
    for (i, chunk) in raster.chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (row, col) = (h - 1 - i / w, i % w);
        values[row * w + col] = v as f64;
    }
    finish_decoded(h, w, values)
}

fn finish_decoded(h: usize, w: usize, mut values: Vec<f64>) -> Result<(Grid2, Mask)> {
    let valid: Vec<bool> = values.iter().map(|v| v.is_finite() && *v != 0.0).collect();
    for (v, ok) in values.iter_mut().zip(&valid) {
        if !ok {
            *v = 0.0;
        }
    }
    Ok((Grid2::new(h, w, values)?, Mask::new(h, w, valid)?))
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

fn write_png16(grid: &Grid2, mask: &Mask, path: &Path) -> Result<()> {
    let valid = mask.select(grid)?;
    if valid.is_empty() {
        return Err(Error::EmptyMask);
    }
    if let Some(v) = valid.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(*v));
    }
    let lo = valid.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = valid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let has_invalid = valid.len() < grid.len();
    // with invalid pixels, code 0 is reserved and valid data uses 1..=65535
    let (first, steps) = if has_invalid { (1u32, 65534.0) } else { (0u32, 65535.0) };
    let scale = if hi > lo { (hi - lo) / steps } else { 1.0 };
    let offset = lo - first as f64 * scale;
    let (h, w) = grid.shape();
    let mut img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let code = if mask.is_valid(y, x) {
                ((grid.get(y, x) - offset) / scale).round().clamp(first as f64, 65535.0) as u16
            } else {
                0
            };
            img.put_pixel(x as u32, y as u32, image::Luma([code]));
        }
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::MalformedFile(e.to_string()))?;
    let invalid = if has_invalid { "0" } else { "none" };
    fs::write(
        sidecar(path),
        format!("scale={scale}\noffset={offset}\ninvalid_code={invalid}\n"),
    )?;
    Ok(())
}

fn read_png16(path: &Path) -> Result<(Grid2, Mask)> {
    let meta_path = sidecar(path);
    let meta = fs::read_to_string(&meta_path)
        .map_err(|e| malformed(&meta_path, &format!("missing sidecar ({e})")))?;
    let (mut scale, mut offset, mut invalid_code) = (None, None, None);
    for line in meta.lines().filter(|l| !l.trim().is_empty()) {
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| malformed(&meta_path, "expected key=value"))?;
        let num = || {
            value
                .trim()
                .parse::<f64>()
                .map_err(|_| malformed(&meta_path, "bad number"))
        };
        match key.trim() {
            "scale" => scale = Some(num()?),
            "offset" => offset = Some(num()?),
            "invalid_code" => {
                invalid_code = Some(match value.trim() {
                    "none" => None,
                    v => Some(v.parse::<u16>().map_err(|_| malformed(&meta_path, "bad code"))?),
                })
            }
            other => return Err(malformed(&meta_path, &format!("unknown key `{other}`"))),
        }
    }
    let (Some(scale), Some(offset)) = (scale, offset) else {
        return Err(malformed(&meta_path, "scale and offset required"));
    };
    let invalid_code = invalid_code.flatten();
    let img = image::open(path).map_err(|e| malformed(path, &e.to_string()))?;
    let img = match img {
        image::DynamicImage::ImageLuma16(i) => i,
        _ => return Err(Error::UnsupportedFormat("expected 16-bit grayscale PNG".into())),
    };
    let (w, h) = (img.width() as usize, img.height() as usize);
    let values = img
        .pixels()
        .map(|p| {
            let code = p.0[0];
            if Some(code) == invalid_code {
                f64::NAN
            } else {
                offset + scale * code as f64
            }
        })
        .collect();
    finish_decoded(h, w, values)
}

pub fn write_rgb(image: &RgbImage, path: &Path) -> Result<()> {
    let (h, w) = image.shape();
    let [r, g, b] = image.channels();
    let to_u8 = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            img.put_pixel(
                x as u32,
                y as u32,
                image::Rgb([to_u8(r.get(y, x)), to_u8(g.get(y, x)), to_u8(b.get(y, x))]),
            );
        }
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::MalformedFile(e.to_string()))
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path)
        .map_err(|e| malformed(path, &e.to_string()))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let channel = |c: usize| {
        Grid2::from_fn(h, w, |y, x| img.get_pixel(x as u32, y as u32).0[c] as f64 / 255.0)
    };
    RgbImage::new(channel(0), channel(1), channel(2))
}

pub fn write_intrinsics(k: &Intrinsics, path: &Path) -> Result<()> {
    fs::write(path, format!("{} {} {} {}\n", k.fx, k.fy, k.cx, k.cy))?;
    Ok(())
}

pub fn read_intrinsics(path: &Path) -> Result<Intrinsics> {
    let text = fs::read_to_string(path)?;
    let v: Vec<f64> = text
        .split_whitespace()
        .map(|s| s.parse::<f64>().map_err(|_| malformed(path, "bad number")))
        .collect::<Result<_>>()?;
    if v.len() != 4 {
        return Err(malformed(path, "expected fx fy cx cy"));
    }
    Intrinsics::new(v[0], v[1], v[2], v[3])
}

/// One `rgb<TAB>depth<TAB>domain` record; paths are relative to the
/// manifest's directory on disk and resolved on read.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub rgb: PathBuf,
    pub depth: PathBuf,
    pub domain: Domain,
}

pub fn write_manifest(entries: &[ManifestEntry], path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for e in entries {
        writeln!(out, "{}\t{}\t{}", e.rgb.display(), e.depth.display(), e.domain)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut entries = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<_> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(malformed(path, &format!("line {}: expected 3 fields", n + 1)));
        }
        let rgb = PathBuf::from(fields[0]);
        let id = rgb
            .file_stem()
            .and_then(|s| s.to_str())
            .map(|s| s.trim_end_matches("_rgb").to_string())
            .ok_or_else(|| malformed(path, "bad rgb path"))?;
        entries.push(ManifestEntry {
            id,
            rgb: base.join(rgb),
            depth: base.join(fields[1]),
            domain: fields[2].parse()?,
        });
    }
    Ok(entries)
}

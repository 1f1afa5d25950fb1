//! Image file I/O: 8/16-bit PNG, PFM and Radiance RGBE.
//!
//! LDR pixels are mapped linearly to `[0, 1]` and stored without any transfer
//! curve; gamma is only ever applied by explicit tone-mapping code.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use image::codecs::hdr::HdrEncoder;
use image::{DynamicImage, ImageFormat, Rgb};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageKind {
    LdrPng,
    Pfm,
    RadianceHdr,
}

impl ImageKind {
    /// Picks the format from a file extension (`png`, `pfm`, `hdr`/`pic`).
    pub fn from_path(path: &Path) -> Result<Self> {
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        match ext.as_deref() {
            Some("png") => Ok(ImageKind::LdrPng),
            Some("pfm") => Ok(ImageKind::Pfm),
            Some("hdr") | Some("pic") => Ok(ImageKind::RadianceHdr),
            _ => Err(Error::invalid(format!(
                "{}: unsupported image extension (expected .png, .pfm or .hdr)",
                path.display()
            ))),
        }
    }

    pub fn is_hdr(self) -> bool {
        !matches!(self, ImageKind::LdrPng)
    }
}

/// Reads an image as a 3-channel tensor, picking the format from the extension.
pub fn read_image_auto(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    read_image(path, ImageKind::from_path(path)?)
}

/// Writes an image, picking the format from the extension.
pub fn write_image_auto(tensor: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    write_image(tensor, path, ImageKind::from_path(path)?)
}

/// Reads an image as a `3×H×W` tensor. Gray images are expanded to three
/// channels and alpha is dropped.
pub fn read_image(path: impl AsRef<Path>, kind: ImageKind) -> Result<Tensor> {
    let path = path.as_ref();
    let tensor = match kind {
        ImageKind::LdrPng => read_png(path)?,
        ImageKind::Pfm => {
            let file = File::open(path).map_err(|e| Error::io(path, e))?;
            read_pfm(BufReader::new(file)).map_err(|reason| Error::format(path, reason))?
        }
        ImageKind::RadianceHdr => read_radiance(path)?,
    };
    if tensor.channels() == 1 {
        tensor.repeat_channels(3)
    } else {
        Ok(tensor)
    }
}

/// Writes a 1- or 3-channel tensor. PNG requires values in `[0, 1]`; HDR
/// formats require non-negative finite values. Nothing is clamped.
pub fn write_image(tensor: &Tensor, path: impl AsRef<Path>, kind: ImageKind) -> Result<()> {
    let path = path.as_ref();
    if !matches!(tensor.channels(), 1 | 3) {
        return Err(Error::invalid(format!(
            "cannot write a {}-channel image",
            tensor.channels()
        )));
    }
    if !tensor.is_finite() {
        return Err(Error::OutOfRange("image contains NaN or infinity".into()));
    }
    match kind {
        ImageKind::LdrPng => {
            let (lo, hi) = (tensor.min_value(), tensor.max_value());
            if lo < 0.0 || hi > 1.0 {
                return Err(Error::OutOfRange(format!(
                    "LDR values must lie in [0, 1], found [{lo}, {hi}]"
                )));
            }
            write_png(tensor, path)
        }
        ImageKind::Pfm | ImageKind::RadianceHdr => {
            if tensor.min_value() < 0.0 {
                return Err(Error::OutOfRange("HDR values must be non-negative".into()));
            }
            let file = File::create(path).map_err(|e| Error::io(path, e))?;
            let mut out = BufWriter::new(file);
            if kind == ImageKind::Pfm {
                write_pfm(tensor, &mut out).map_err(|e| Error::io(path, e))?;
            } else {
                write_radiance(tensor, &mut out, path)?;
            }
            out.flush().map_err(|e| Error::io(path, e))
        }
    }
}

// The file has already been opened, so read failures here mean truncated or
// corrupt content.
fn decode_error(path: &Path, err: image::ImageError) -> Error {
    Error::format(path, err.to_string())
}

fn read_png(path: &Path) -> Result<Tensor> {
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| decode_error(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, samples): (usize, Vec<f32>) = match img {
        DynamicImage::ImageLuma8(b) => {
            (1, b.into_raw().iter().map(|&v| v as f32 / 255.0).collect())
        }
        DynamicImage::ImageLuma16(b) => (
            1,
            b.into_raw().iter().map(|&v| v as f32 / 65535.0).collect(),
        ),
        DynamicImage::ImageLumaA8(_) | DynamicImage::ImageRgb8(_) | DynamicImage::ImageRgba8(_) => {
            (
                3,
                img.to_rgb8()
                    .into_raw()
                    .iter()
                    .map(|&v| v as f32 / 255.0)
                    .collect(),
            )
        }
        DynamicImage::ImageLumaA16(_)
        | DynamicImage::ImageRgb16(_)
        | DynamicImage::ImageRgba16(_) => (
            3,
            img.to_rgb16()
                .into_raw()
                .iter()
                .map(|&v| v as f32 / 65535.0)
                .collect(),
        ),
        _ => {
            return Err(Error::format(
                path,
                "unsupported bit depth (expected 8 or 16 bit)",
            ))
        }
    };
    Ok(interleaved_to_planar(&samples, channels, h, w))
}

fn interleaved_to_planar(samples: &[f32], channels: usize, h: usize, w: usize) -> Tensor {
    Tensor::from_fn([channels, h, w], |c, y, x| {
        samples[(y * w + x) * channels + c]
    })
}

fn planar_to_interleaved(t: &Tensor) -> Vec<f32> {
    let [c, h, w] = t.shape();
    let mut out = Vec::with_capacity(t.len());
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out.push(t.at(ch, y, x));
            }
        }
    }
    out
}

fn write_png(t: &Tensor, path: &Path) -> Result<()> {
    let [c, h, w] = t.shape();
    let bytes: Vec<u8> = planar_to_interleaved(t)
        .iter()
        .map(|&v| (v * 255.0).round() as u8)
        .collect();
    let color = if c == 1 {
        image::ExtendedColorType::L8
    } else {
        image::ExtendedColorType::Rgb8
    };
    image::save_buffer_with_format(path, &bytes, w as u32, h as u32, color, ImageFormat::Png)
        .map_err(|e| decode_error(path, e))
}

fn read_radiance(path: &Path) -> Result<Tensor> {
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| decode_error(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let rgb = img.to_rgb32f();
    Ok(interleaved_to_planar(rgb.as_raw(), 3, h, w))
}

fn write_radiance<W: Write>(t: &Tensor, out: W, path: &Path) -> Result<()> {
    let t = if t.channels() == 1 {
        t.repeat_channels(3)?
    } else {
        t.clone()
    };
    let [_, h, w] = t.shape();
    let pixels: Vec<Rgb<f32>> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .map(|(y, x)| Rgb([t.at(0, y, x), t.at(1, y, x), t.at(2, y, x)]))
        .collect();
    HdrEncoder::new(out)
        .encode(&pixels, w, h)
        .map_err(|e| decode_error(path, e))
}

/// Writes a PFM stream: `PF` (colour) or `Pf` (gray) header, little-endian
/// scale `-1.0`, rows stored bottom to top.
pub fn write_pfm<W: Write>(t: &Tensor, mut out: W) -> std::io::Result<()> {
    let [c, h, w] = t.shape();
    let magic = if c == 1 { "Pf" } else { "PF" };
    write!(out, "{magic}\n{w} {h}\n-1.0\n")?;
    let mut row = Vec::with_capacity(w * c * 4);
    for y in (0..h).rev() {
        row.clear();
        for x in 0..w {
            for ch in 0..c {
                row.extend_from_slice(&t.at(ch, y, x).to_le_bytes());
            }
        }
        out.write_all(&row)?;
    }
    Ok(())
}

fn next_token<R: BufRead>(r: &mut R) -> Result<String, String> {
    let mut token = Vec::new();
    let mut byte = [0u8];
    loop {
        match r.read(&mut byte) {
            Ok(0) => break,
            Ok(_) if byte[0].is_ascii_whitespace() => {
                if token.is_empty() {
                    continue;
                }
                break;
            }
            Ok(_) => token.push(byte[0]),
            Err(e) => return Err(e.to_string()),
        }
        if token.len() > 32 {
            return Err("header token too long".into());
        }
    }
    String::from_utf8(token).map_err(|_| "non-ASCII header".to_string())
}

/// Reads a PFM stream, keeping its channel count (1 or 3).
pub fn read_pfm<R: BufRead>(mut r: R) -> Result<Tensor, String> {
    let channels = match next_token(&mut r)?.as_str() {
        "PF" => 3,
        "Pf" => 1,
        other => return Err(format!("bad magic {other:?}")),
    };
    let w: usize = next_token(&mut r)?.parse().map_err(|_| "bad width")?;
    let h: usize = next_token(&mut r)?.parse().map_err(|_| "bad height")?;
    let scale: f32 = next_token(&mut r)?.parse().map_err(|_| "bad scale")?;
    if w == 0 || h == 0 || scale == 0.0 || !scale.is_finite() {
        return Err("degenerate header".into());
    }
    let little = scale < 0.0;
    let mut raw = vec![0u8; w * h * channels * 4];
    r.read_exact(&mut raw)
        .map_err(|_| "truncated pixel data".to_string())?;
    let mut t = Tensor::zeros([channels, h, w]);
    for (i, chunk) in raw.chunks_exact(4).enumerate() {
        let bytes = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little {
            f32::from_le_bytes(bytes)
        } else {
            f32::from_be_bytes(bytes)
        };
        if !v.is_finite() || v < 0.0 {
            return Err(format!(
                "invalid sample {v} (expected finite, non-negative)"
            ));
        }
        let ch = i % channels;
        let x = (i / channels) % w;
        let y = h - 1 - i / (channels * w);
        t.set(ch, y, x, v);
    }
    Ok(t)
}

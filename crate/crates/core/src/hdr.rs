//! Luminance-space merging of an exposure bracket and percentile tone mapping.
//!
//! Stored LDR pixels are display-referred: `I^γ` linearizes them and the tone
//! map applies `1/γ` on the way back.

use crate::error::{Error, Result};
use crate::tensor::{percentile, Tensor};

pub const DEFAULT_GAMMA: f64 = 2.4;
pub const LUMA_WEIGHTS: [f64; 3] = [0.21267, 0.71516, 0.07217];
/// Display luminance above which an exposure counts as clipped.
pub const OVEREXPOSED: f64 = 0.9;
/// Width of the soft transition above [`OVEREXPOSED`].
pub const OVEREXPOSED_BAND: f64 = 0.1;

/// LDR images of one scene at decreasing exposure values, starting at 0.
#[derive(Debug, Clone)]
pub struct ExposureBracket {
    images: Vec<Tensor>,
    evs: Vec<f64>,
}

impl ExposureBracket {
    pub fn new(images: Vec<Tensor>, evs: Vec<f64>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::invalid("exposure bracket is empty"));
        }
        if images.len() != evs.len() {
            return Err(Error::invalid(format!(
                "{} images but {} exposure values",
                images.len(),
                evs.len()
            )));
        }
        if evs[0] != 0.0 {
            return Err(Error::invalid("first exposure value must be 0"));
        }
        if evs.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(Error::invalid(
                "exposure values must be strictly decreasing",
            ));
        }
        for img in &images {
            img.ensure_same_shape(&images[0])?;
        }
        if images[0].channels() != 3 {
            return Err(Error::invalid("bracket images need 3 channels"));
        }
        Ok(Self { images, evs })
    }

    pub fn images(&self) -> &[Tensor] {
        &self.images
    }

    pub fn evs(&self) -> &[f64] {
        &self.evs
    }
}

fn check_ldr(img: &Tensor) -> Result<()> {
    if img.channels() != 3 {
        return Err(Error::invalid(format!(
            "expected 3 channels, got {}",
            img.channels()
        )));
    }
    if img.min_value() < 0.0 {
        return Err(Error::OutOfRange("negative pixel values".into()));
    }
    Ok(())
}

/// Per-pixel `(I^γ · w) · 2^{−ev}` in double precision.
fn luminance_f64(img: &Tensor, ev: f64, gamma: f64) -> Vec<f64> {
    let gain = (-ev).exp2();
    let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
    r.iter()
        .zip(g)
        .zip(b)
        .map(|((&r, &g), &b)| {
            let lin = LUMA_WEIGHTS[0] * (r as f64).powf(gamma)
                + LUMA_WEIGHTS[1] * (g as f64).powf(gamma)
                + LUMA_WEIGHTS[2] * (b as f64).powf(gamma);
            lin * gain
        })
        .collect()
}

/// Single-channel luminance of an LDR image brought to exposure 0.
pub fn luminance(img: &Tensor, ev: f64, gamma: f64) -> Result<Tensor> {
    check_ldr(img)?;
    let data = luminance_f64(img, ev, gamma)
        .into_iter()
        .map(|v| v as f32)
        .collect();
    Tensor::new([1, img.height(), img.width()], data)
}

/// Merges a bracket into linear HDR radiance.
///
/// Starting from the darkest exposure, each brighter image replaces the running
/// luminance except where it is overexposed; chroma comes from the EV 0 image.
pub fn merge_ldrs(bracket: &ExposureBracket, gamma: f64) -> Result<Tensor> {
    for img in &bracket.images {
        check_ldr(img)?;
    }
    let n = bracket.images.len();
    let mut l = luminance_f64(&bracket.images[n - 1], bracket.evs[n - 1], gamma);
    for i in (0..n - 1).rev() {
        let ev = bracket.evs[i];
        let li = luminance_f64(&bracket.images[i], ev, gamma);
        let exposure = ev.exp2();
        for (l, &li) in l.iter_mut().zip(&li) {
            let soft = ((exposure * li - OVEREXPOSED) / OVEREXPOSED_BAND).clamp(0.0, 1.0);
            let m = if *l > li { soft } else { 0.0 };
            *l = (1.0 - m) * li + m * *l;
        }
    }
    let i0 = &bracket.images[0];
    let l0 = luminance_f64(i0, 0.0, gamma);
    let plane = i0.height() * i0.width();
    let data = i0
        .data()
        .iter()
        .enumerate()
        .map(|(k, &v)| {
            let p = k % plane;
            if l0[p] == 0.0 {
                0.0
            } else {
                ((v as f64).powf(gamma) * (l[p] / l0[p])) as f32
            }
        })
        .collect();
    Tensor::new(i0.shape(), data)
}

/// Tone-map parameters: exposure offset, gamma, and which percentile of the
/// input lands on which display value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToneMap {
    pub ev: f64,
    pub gamma: f64,
    pub percentile: f64,
    pub target: f64,
}

impl Default for ToneMap {
    fn default() -> Self {
        Self {
            ev: 0.0,
            gamma: DEFAULT_GAMMA,
            percentile: 99.0,
            target: 0.9,
        }
    }
}

/// `clip((2^ev · s · hdr)^{1/γ}, 0, 1)` with `s = target^γ / P_q(hdr)`.
pub fn tonemap(hdr: &Tensor, params: &ToneMap) -> Result<Tensor> {
    if hdr.min_value() < 0.0 {
        return Err(Error::OutOfRange("HDR values must be non-negative".into()));
    }
    let p = percentile(hdr.data(), params.percentile)?;
    if p <= 0.0 {
        return Err(Error::Numerical(format!(
            "percentile {} of the image is zero",
            params.percentile
        )));
    }
    let scale = params.ev.exp2() * params.target.powf(params.gamma) / p;
    let inv = 1.0 / params.gamma;
    Ok(hdr.map(|v| (scale * v as f64).powf(inv).clamp(0.0, 1.0) as f32))
}

/// `2^ev · hdr`.
pub fn scale_exposure(hdr: &Tensor, ev: f64) -> Tensor {
    let k = ev.exp2();
    hdr.map(|v| (k * v as f64) as f32)
}

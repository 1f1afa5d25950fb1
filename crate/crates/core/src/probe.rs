//! Mirror-ball, equirectangular and pinhole geometry, plus sphere rendering.
//!
//! Conventions shared by everything here:
//!
//! * World axes: `+y` up, camera looking down `−z`, so `+z` points back at
//!   the camera.
//! * Equirectangular `(u, v)`: `u = 0.5` is camera-forward (`−z`), `u = 0.75`
//!   is `+x`, `v = 0` is straight up. Texel `(i, j)` has its centre at
//!   `u = (j + ½)/W`, `v = (i + ½)/H`.
//! * Ball and sphere images are orthographic views of a unit sphere; disk
//!   coordinates `(x, y)` run over `[−1, 1]` with `x` right and `y` up.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type Vec3 = [f64; 3];

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn normalize(a: Vec3) -> Vec3 {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Unit direction for equirectangular coordinates.
pub fn uv_to_direction(u: f64, v: f64) -> Vec3 {
    let theta = v * PI;
    let phi = 2.0 * PI * (u - 0.5);
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = phi.sin_cos();
    [st * sp, ct, -st * cp]
}

/// Equirectangular coordinates of a direction, `u ∈ [0, 1)`, `v ∈ [0, 1]`.
pub fn direction_to_uv(d: Vec3) -> (f64, f64) {
    let d = normalize(d);
    let theta = d[1].clamp(-1.0, 1.0).acos();
    let phi = d[0].atan2(-d[2]);
    let u = (phi / (2.0 * PI) + 0.5).rem_euclid(1.0);
    (u, theta / PI)
}

/// Direction through the centre of texel `(i, j)` of an `h×w` map.
pub fn texel_direction(i: usize, j: usize, h: usize, w: usize) -> Vec3 {
    uv_to_direction((j as f64 + 0.5) / w as f64, (i as f64 + 0.5) / h as f64)
}

/// Exact solid angle of each texel row band: `(2π/W)(cos θ_i − cos θ_{i+1})`.
/// The weights of all texels sum to `4π` at any resolution.
pub fn solid_angle_weights(h: usize, w: usize) -> Vec<f64> {
    (0..h)
        .map(|i| {
            let t0 = i as f64 * PI / h as f64;
            let t1 = (i + 1) as f64 * PI / h as f64;
            2.0 * PI / w as f64 * (t0.cos() - t1.cos())
        })
        .collect()
}

/// Mirror reflection of the view ray at disk point `(x, y)`, or `None`
/// outside the unit disk.
pub fn disk_to_direction(x: f64, y: f64) -> Option<Vec3> {
    let r2 = x * x + y * y;
    if r2 > 1.0 {
        return None;
    }
    let nz = (1.0 - r2).sqrt();
    Some([2.0 * x * nz, 2.0 * y * nz, 2.0 * nz * nz - 1.0])
}

/// Disk point whose mirror reflection is `r`. The direction straight away
/// from the camera maps to the whole rim; the rim point in the direction of
/// `r`'s lateral component is used (or `+x` when there is none).
pub fn direction_to_disk(r: Vec3) -> (f64, f64) {
    let r = normalize(r);
    let h = [r[0], r[1], r[2] + 1.0];
    let len = dot(h, h).sqrt();
    if len < 1e-9 {
        let lateral = (r[0] * r[0] + r[1] * r[1]).sqrt();
        return if lateral > 0.0 {
            (r[0] / lateral, r[1] / lateral)
        } else {
            (1.0, 0.0)
        };
    }
    (h[0] / len, h[1] / len)
}

/// Disk coordinates of pixel `(row, col)` of an `s×s` image.
pub fn pixel_to_disk(row: usize, col: usize, s: usize) -> (f64, f64) {
    let x = (col as f64 + 0.5) / s as f64 * 2.0 - 1.0;
    let y = 1.0 - (row as f64 + 0.5) / s as f64 * 2.0;
    (x, y)
}

fn in_disk(row: usize, col: usize, s: usize) -> bool {
    let (x, y) = pixel_to_disk(row, col, s);
    x * x + y * y <= 1.0
}

/// Equirectangular HDR radiance map, `3×H×W` with `W = 2H`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvMap {
    radiance: Tensor,
}

impl EnvMap {
    pub fn new(radiance: Tensor) -> Result<Self> {
        let [c, h, w] = radiance.shape();
        if c != 3 {
            return Err(Error::invalid(format!(
                "environment map needs 3 channels, got {c}"
            )));
        }
        if h == 0 || w != 2 * h {
            return Err(Error::invalid(format!(
                "environment map must be H×2H, got {h}×{w}"
            )));
        }
        if !radiance.is_finite() || radiance.min_value() < 0.0 {
            return Err(Error::OutOfRange(
                "environment radiance must be finite and non-negative".into(),
            ));
        }
        Ok(Self { radiance })
    }

    /// Map whose texel at direction `d` has radiance `f(d)`.
    pub fn from_direction_fn(h: usize, f: impl Fn(Vec3) -> [f64; 3]) -> Result<Self> {
        let w = 2 * h;
        let mut t = Tensor::zeros([3, h, w]);
        for i in 0..h {
            for j in 0..w {
                let rgb = f(texel_direction(i, j, h, w));
                for (c, v) in rgb.iter().enumerate() {
                    t.set(c, i, j, *v as f32);
                }
            }
        }
        Self::new(t)
    }

    pub fn radiance(&self) -> &Tensor {
        &self.radiance
    }

    pub fn into_radiance(self) -> Tensor {
        self.radiance
    }

    pub fn height(&self) -> usize {
        self.radiance.height()
    }

    pub fn width(&self) -> usize {
        self.radiance.width()
    }

    /// Bilinear lookup, wrapping in `u` and clamping in `v`.
    pub fn sample_uv(&self, u: f64, v: f64) -> [f64; 3] {
        let (h, w) = (self.height(), self.width());
        let px = u * w as f64 - 0.5;
        let py = (v * h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
        let x0 = px.floor();
        let y0 = py.floor();
        let (fx, fy) = (px - x0, py - y0);
        let wrap = |x: f64| (x as i64).rem_euclid(w as i64) as usize;
        let (xa, xb) = (wrap(x0), wrap(x0 + 1.0));
        let ya = y0 as usize;
        let yb = (ya + 1).min(h - 1);
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            let p = |y, x| self.radiance.at(c, y, x) as f64;
            let top = p(ya, xa) * (1.0 - fx) + p(ya, xb) * fx;
            let bottom = p(yb, xa) * (1.0 - fx) + p(yb, xb) * fx;
            *o = top * (1.0 - fy) + bottom * fy;
        }
        out
    }

    pub fn sample_direction(&self, d: Vec3) -> [f64; 3] {
        let (u, v) = direction_to_uv(d);
        self.sample_uv(u, v)
    }

    /// Rotates the panorama about the vertical axis: content at azimuth `φ`
    /// moves to `φ + degrees`.
    pub fn rotate_azimuth(&self, degrees: f64) -> EnvMap {
        let (h, w) = (self.height(), self.width());
        let shift = degrees / 360.0;
        let mut t = Tensor::zeros([3, h, w]);
        for i in 0..h {
            let v = (i as f64 + 0.5) / h as f64;
            for j in 0..w {
                let u = ((j as f64 + 0.5) / w as f64 - shift).rem_euclid(1.0);
                let rgb = self.sample_uv(u, v);
                for (c, val) in rgb.iter().enumerate() {
                    t.set(c, i, j, *val as f32);
                }
            }
        }
        EnvMap { radiance: t }
    }
}

/// Bilinear sample of a square ball image at disk point `(x, y)`, using only
/// taps whose centres lie inside the disk.
fn sample_ball(ball: &Tensor, x: f64, y: f64) -> [f64; 3] {
    let s = ball.width();
    let px = (x + 1.0) / 2.0 * s as f64 - 0.5;
    let py = (1.0 - y) / 2.0 * s as f64 - 0.5;
    let (x0, y0) = (px.floor(), py.floor());
    let (fx, fy) = (px - x0, py - y0);
    let mut acc = [0.0; 3];
    let mut wsum = 0.0;
    for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
        for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
            let (r, c) = (y0 + dy, x0 + dx);
            let wt = wx * wy;
            if wt <= 0.0 || r < 0.0 || c < 0.0 || r >= s as f64 || c >= s as f64 {
                continue;
            }
            let (r, c) = (r as usize, c as usize);
            if !in_disk(r, c, s) {
                continue;
            }
            for (ch, a) in acc.iter_mut().enumerate() {
                *a += wt * ball.at(ch, r, c) as f64;
            }
            wsum += wt;
        }
    }
    if wsum > 0.0 {
        return acc.map(|a| a / wsum);
    }
    // Point lies beyond the outermost ring of pixel centres: walk inward to
    // the nearest pixel inside the disk.
    let mut k = 1.0;
    loop {
        let sx = x * k;
        let sy = y * k;
        let c = (((sx + 1.0) / 2.0 * s as f64).floor() as usize).min(s - 1);
        let r = (((1.0 - sy) / 2.0 * s as f64).floor() as usize).min(s - 1);
        if in_disk(r, c, s) {
            return [0, 1, 2].map(|ch| ball.at(ch, r, c) as f64);
        }
        k -= 0.5 / s as f64;
    }
}

/// Unwraps an orthographic mirror-ball image into an equirectangular map.
pub fn ball_to_envmap(ball: &Tensor, out: (usize, usize)) -> Result<EnvMap> {
    let [c, bh, bw] = ball.shape();
    if bh != bw || bh == 0 {
        return Err(Error::invalid(format!(
            "ball image must be square, got {bh}×{bw}"
        )));
    }
    if c != 3 {
        return Err(Error::invalid(format!(
            "ball image needs 3 channels, got {c}"
        )));
    }
    let (h, w) = out;
    if h == 0 || w != 2 * h {
        return Err(Error::invalid(format!(
            "environment map must be H×2H, got {h}×{w}"
        )));
    }
    let rows: Vec<Vec<[f64; 3]>> = (0..h)
        .into_par_iter()
        .map(|i| {
            (0..w)
                .map(|j| {
                    let (x, y) = direction_to_disk(texel_direction(i, j, h, w));
                    sample_ball(ball, x, y)
                })
                .collect()
        })
        .collect();
    let t = Tensor::from_fn([3, h, w], |c, i, j| rows[i][j][c] as f32);
    EnvMap::new(t)
}

/// Mirror-ball image of an environment; pixels outside the disk are 0.
pub fn envmap_to_ball(env: &EnvMap, size: usize) -> Tensor {
    let rows: Vec<Vec<[f64; 3]>> = (0..size)
        .into_par_iter()
        .map(|r| {
            (0..size)
                .map(|c| {
                    let (x, y) = pixel_to_disk(r, c, size);
                    disk_to_direction(x, y).map_or([0.0; 3], |d| env.sample_direction(d))
                })
                .collect()
        })
        .collect();
    Tensor::from_fn([3, size, size], |c, r, col| rows[r][col][c] as f32)
}

/// Pinhole view into a panorama.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CropSpec {
    /// Vertical field of view, degrees.
    pub fov_v: f64,
    /// Yaw, degrees; positive turns toward `+x`.
    pub azimuth: f64,
    /// Pitch, degrees; positive looks up.
    pub elevation: f64,
    pub out_size: (usize, usize),
}

impl CropSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.fov_v > 0.0 && self.fov_v < 180.0) {
            return Err(Error::invalid(format!(
                "field of view {} outside (0, 180)",
                self.fov_v
            )));
        }
        if !(-90.0..=90.0).contains(&self.elevation) {
            return Err(Error::invalid(format!(
                "elevation {} outside [-90, 90]",
                self.elevation
            )));
        }
        if !self.azimuth.is_finite() {
            return Err(Error::invalid("azimuth must be finite"));
        }
        if self.out_size.0 == 0 || self.out_size.1 == 0 {
            return Err(Error::invalid("crop size must be positive"));
        }
        Ok(())
    }

    /// World-space ray through the centre of output pixel `(row, col)`.
    pub fn ray(&self, row: usize, col: usize) -> Vec3 {
        let (h, w) = self.out_size;
        let f = (h as f64 / 2.0) / (self.fov_v.to_radians() / 2.0).tan();
        let x = col as f64 + 0.5 - w as f64 / 2.0;
        let y = h as f64 / 2.0 - (row as f64 + 0.5);
        let z = -f;
        let (se, ce) = self.elevation.to_radians().sin_cos();
        let (y1, z1) = (y * ce - z * se, y * se + z * ce);
        let (sa, ca) = self.azimuth.to_radians().sin_cos();
        let (x2, z2) = (x * ca - z1 * sa, x * sa + z1 * ca);
        normalize([x2, y1, z2])
    }
}

/// Perspective crop of a panorama with bilinear sampling.
pub fn crop_pano(env: &EnvMap, spec: &CropSpec) -> Result<Tensor> {
    spec.validate()?;
    let (h, w) = spec.out_size;
    let rows: Vec<Vec<[f64; 3]>> = (0..h)
        .into_par_iter()
        .map(|r| {
            (0..w)
                .map(|c| env.sample_direction(spec.ray(r, c)))
                .collect()
        })
        .collect();
    Ok(Tensor::from_fn([3, h, w], |c, r, col| {
        rows[r][col][c] as f32
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaterialKind {
    Mirror,
    MatteSilver,
    GrayDiffuse,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SphereMaterial {
    pub kind: MaterialKind,
    pub albedo: f64,
    pub gloss_exponent: f64,
}

impl SphereMaterial {
    pub fn mirror() -> Self {
        Self {
            kind: MaterialKind::Mirror,
            albedo: 0.9,
            gloss_exponent: 1.0,
        }
    }

    pub fn matte_silver() -> Self {
        Self {
            kind: MaterialKind::MatteSilver,
            albedo: 0.8,
            gloss_exponent: 50.0,
        }
    }

    pub fn gray_diffuse() -> Self {
        Self {
            kind: MaterialKind::GrayDiffuse,
            albedo: 0.5,
            gloss_exponent: 1.0,
        }
    }

    pub fn default_for(kind: MaterialKind) -> Self {
        match kind {
            MaterialKind::Mirror => Self::mirror(),
            MaterialKind::MatteSilver => Self::matte_silver(),
            MaterialKind::GrayDiffuse => Self::gray_diffuse(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.albedo > 0.0 && self.albedo <= 1.0) {
            return Err(Error::invalid(format!(
                "albedo {} outside (0, 1]",
                self.albedo
            )));
        }
        if !(self.gloss_exponent > 0.0) || !self.gloss_exponent.is_finite() {
            return Err(Error::invalid("gloss exponent must be positive"));
        }
        Ok(())
    }
}

/// Non-black texels of an environment with their directions and
/// solid-angle-weighted radiance.
struct Quadrature {
    dirs: Vec<Vec3>,
    weighted: Vec<[f64; 3]>,
}

impl Quadrature {
    fn new(env: &EnvMap) -> Self {
        let (h, w) = (env.height(), env.width());
        let bands = solid_angle_weights(h, w);
        let r = env.radiance();
        let mut dirs = Vec::new();
        let mut weighted = Vec::new();
        for (i, &band) in bands.iter().enumerate() {
            for j in 0..w {
                let l = [0, 1, 2].map(|c| r.at(c, i, j) as f64);
                if l == [0.0; 3] {
                    continue;
                }
                dirs.push(texel_direction(i, j, h, w));
                weighted.push(l.map(|v| v * band));
            }
        }
        Self { dirs, weighted }
    }

    /// `Σ L(ω)·dω·k(axis·ω)` over texels with `axis·ω > 0`.
    fn integrate(&self, axis: Vec3, kernel: impl Fn(f64) -> f64) -> [f64; 3] {
        let mut acc = [0.0; 3];
        for (d, l) in self.dirs.iter().zip(&self.weighted) {
            let c = dot(axis, *d);
            if c > 0.0 {
                let k = kernel(c);
                acc[0] += l[0] * k;
                acc[1] += l[1] * k;
                acc[2] += l[2] * k;
            }
        }
        acc
    }
}

/// Orthographic render of a sphere under `env`; pixels off the sphere are 0.
///
/// Diffuse shading is `(ρ/π)∫L·max(0, n·ω)dω`; the matte lobe is
/// `ρ(s+1)/(2π)∫L·max(0, R·ω)^s dω`, normalized so it integrates to `ρ`.
pub fn render_sphere(env: &EnvMap, mat: &SphereMaterial, size: usize) -> Result<Tensor> {
    mat.validate()?;
    if mat.kind == MaterialKind::Mirror {
        let ball = envmap_to_ball(env, size);
        let a = mat.albedo as f32;
        return Ok(if a == 1.0 { ball } else { ball.scale(a) });
    }
    let quad = Quadrature::new(env);
    let rows: Vec<Vec<[f64; 3]>> = (0..size)
        .into_par_iter()
        .map(|r| {
            (0..size)
                .map(|c| {
                    let (x, y) = pixel_to_disk(r, c, size);
                    let r2 = x * x + y * y;
                    if r2 > 1.0 {
                        return [0.0; 3];
                    }
                    let n = [x, y, (1.0 - r2).sqrt()];
                    match mat.kind {
                        MaterialKind::GrayDiffuse => {
                            let k = mat.albedo / PI;
                            quad.integrate(n, |c| c).map(|v| k * v)
                        }
                        MaterialKind::MatteSilver => {
                            let s = mat.gloss_exponent;
                            let refl = disk_to_direction(x, y).unwrap_or([0.0, 0.0, -1.0]);
                            let k = mat.albedo * (s + 1.0) / (2.0 * PI);
                            quad.integrate(refl, |c| c.powf(s)).map(|v| k * v)
                        }
                        MaterialKind::Mirror => unreachable!(),
                    }
                })
                .collect()
        })
        .collect();
    Ok(Tensor::from_fn([3, size, size], |c, r, col| {
        rows[r][col][c] as f32
    }))
}

/// Square footprint `(row, col, diameter)` of one sphere in an array render.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Footprint {
    pub row: usize,
    pub col: usize,
    pub diameter: usize,
}

/// Grid layout: each sphere of radius `r` sits centred in a `2.25r` square
/// cell (quarter-radius gap between neighbours), and the grid is centred in
/// the frame.
pub fn sphere_array_layout(grid: (usize, usize), out: (usize, usize)) -> Result<Vec<Footprint>> {
    let (rows, cols) = grid;
    let (h, w) = out;
    if rows == 0 || cols == 0 {
        return Err(Error::invalid("sphere grid must be at least 1×1"));
    }
    let radius = (h as f64 / (rows as f64 * 2.25)).min(w as f64 / (cols as f64 * 2.25));
    let cell = 2.25 * radius;
    let diameter = (2.0 * radius).floor() as usize;
    if diameter == 0 {
        return Err(Error::invalid(format!(
            "{h}×{w} frame too small for a {rows}×{cols} grid"
        )));
    }
    let oy = (h as f64 - rows as f64 * cell) / 2.0;
    let ox = (w as f64 - cols as f64 * cell) / 2.0;
    let mut out_fp = Vec::with_capacity(rows * cols);
    for gr in 0..rows {
        for gc in 0..cols {
            let cy = oy + (gr as f64 + 0.5) * cell;
            let cx = ox + (gc as f64 + 0.5) * cell;
            out_fp.push(Footprint {
                row: (cy - diameter as f64 / 2.0).round() as usize,
                col: (cx - diameter as f64 / 2.0).round() as usize,
                diameter,
            });
        }
    }
    Ok(out_fp)
}

/// Grid of gray-diffuse spheres lit by one environment, on a black background.
pub fn render_sphere_array(
    env: &EnvMap,
    grid: (usize, usize),
    out: (usize, usize),
) -> Result<Tensor> {
    let layout = sphere_array_layout(grid, out)?;
    let sphere = render_sphere(env, &SphereMaterial::gray_diffuse(), layout[0].diameter)?;
    let mut frame = Tensor::zeros([3, out.0, out.1]);
    for fp in &layout {
        for c in 0..3 {
            for y in 0..fp.diameter {
                for x in 0..fp.diameter {
                    frame.set(c, fp.row + y, fp.col + x, sphere.at(c, y, x));
                }
            }
        }
    }
    Ok(frame)
}

/// Binary `1×s×s` mask of pixels whose centres lie on the sphere.
pub fn sphere_footprint(size: usize) -> Tensor {
    Tensor::from_fn(
        [1, size, size],
        |_, r, c| if in_disk(r, c, size) { 1.0 } else { 0.0 },
    )
}

/// Footprint mask of a whole sphere array.
pub fn sphere_array_footprint(grid: (usize, usize), out: (usize, usize)) -> Result<Tensor> {
    let layout = sphere_array_layout(grid, out)?;
    let disk = sphere_footprint(layout[0].diameter);
    let mut mask = Tensor::zeros([1, out.0, out.1]);
    for fp in &layout {
        for y in 0..fp.diameter {
            for x in 0..fp.diameter {
                if disk.at(0, y, x) == 1.0 {
                    mask.set(0, fp.row + y, fp.col + x, 1.0);
                }
            }
        }
    }
    Ok(mask)
}

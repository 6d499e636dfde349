//! Software raycaster.
//!
//! Rays are marched through the volume's bounding box in voxel space
//! (`[0, nx-1] × [0, ny-1] × [0, nz-1]`). Each sample is classified through the
//! 2D lookup table by its interpolated value and gradient magnitude, corrected
//! for the step size, and composited front to back.

use image::RgbaImage;
use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::histogram::value_bin;
use crate::transfer_function::TransferLut;
use crate::volume::{GradientVolume, Volume};

type Vec3 = Vector3<f64>;

#[derive(Debug, Error, PartialEq)]
pub enum RenderError {
    #[error("volume dims {volume:?} do not match gradient dims {gradient:?}")]
    DimsMismatch {
        volume: [usize; 3],
        gradient: [usize; 3],
    },
    #[error("degenerate camera: {0}")]
    DegenerateCamera(String),
    #[error("invalid render settings: {0}")]
    InvalidSettings(String),
    #[error("sample position {0:?} outside the volume")]
    OutOfBounds([f64; 3]),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    #[default]
    Perspective,
    Orthographic,
}

fn default_fov() -> f64 {
    45.0
}

/// Camera JSON: `{"eye":[..],"lookat":[..],"up":[..],"fov":45,"projection":"perspective","width":512,"height":512}`.
///
/// `half_height` sets the orthographic view extent; when absent it is derived
/// from `fov` and the eye distance so switching projection keeps the framing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub eye: [f64; 3],
    pub lookat: [f64; 3],
    pub up: [f64; 3],
    #[serde(default = "default_fov")]
    pub fov: f64,
    #[serde(default)]
    pub projection: Projection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub half_height: Option<f64>,
    pub width: u32,
    pub height: u32,
}

impl Camera {
    /// Orthographic camera looking along `-z` at the center of a volume of `dims`.
    pub fn orthographic_front(dims: [usize; 3], half_height: f64, width: u32, height: u32) -> Self {
        let c = dims.map(|d| (d - 1) as f64 / 2.0);
        Camera {
            eye: [c[0], c[1], c[2] + 2.0 * dims[2] as f64],
            lookat: c,
            up: [0.0, 1.0, 0.0],
            fov: default_fov(),
            projection: Projection::Orthographic,
            half_height: Some(half_height),
            width,
            height,
        }
    }

    fn frame(&self) -> Result<CameraFrame, RenderError> {
        let eye = Vec3::from(self.eye);
        let view = Vec3::from(self.lookat) - eye;
        if !(view.norm() > 0.0) {
            return Err(RenderError::DegenerateCamera("eye equals lookat".into()));
        }
        if !(self.fov > 0.0 && self.fov < 180.0) {
            return Err(RenderError::DegenerateCamera(format!(
                "fov {} outside (0, 180)",
                self.fov
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(RenderError::DegenerateCamera("image dims must be at least 1".into()));
        }
        let forward = view.normalize();
        let right = forward.cross(&Vec3::from(self.up));
        if !(right.norm() > 1e-12) {
            return Err(RenderError::DegenerateCamera(
                "up vector is parallel to the view direction".into(),
            ));
        }
        let right = right.normalize();
        let up = right.cross(&forward);
        let half_height = match self.projection {
            Projection::Perspective => (self.fov.to_radians() / 2.0).tan(),
            Projection::Orthographic => {
                let h = self
                    .half_height
                    .unwrap_or_else(|| view.norm() * (self.fov.to_radians() / 2.0).tan());
                if !(h > 0.0 && h.is_finite()) {
                    return Err(RenderError::DegenerateCamera(format!(
                        "orthographic half height {h} must be positive"
                    )));
                }
                h
            }
        };
        Ok(CameraFrame {
            eye,
            forward,
            right,
            up,
            half_height,
            aspect: self.width as f64 / self.height as f64,
            projection: self.projection,
            width: self.width,
            height: self.height,
        })
    }
}

struct CameraFrame {
    eye: Vec3,
    forward: Vec3,
    right: Vec3,
    up: Vec3,
    half_height: f64,
    aspect: f64,
    projection: Projection,
    width: u32,
    height: u32,
}

impl CameraFrame {
    fn ray(&self, px: u32, py: u32) -> (Vec3, Vec3) {
        let sx = (2.0 * (px as f64 + 0.5) / self.width as f64 - 1.0) * self.aspect * self.half_height;
        let sy = (1.0 - 2.0 * (py as f64 + 0.5) / self.height as f64) * self.half_height;
        match self.projection {
            Projection::Perspective => {
                let dir = (self.forward + self.right * sx + self.up * sy).normalize();
                (self.eye, dir)
            }
            Projection::Orthographic => (self.eye + self.right * sx + self.up * sy, self.forward),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Shading {
    #[default]
    None,
    Lambert,
}

fn default_step() -> f64 {
    0.5
}
fn default_termination() -> f64 {
    0.99
}
fn default_background() -> [f64; 4] {
    [0.0, 0.0, 0.0, 1.0]
}
fn default_light() -> [f64; 3] {
    [0.0, 0.0, 1.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderSettings {
    /// Ray-march step in voxel units.
    #[serde(default = "default_step")]
    pub step_size: f64,
    #[serde(default = "default_termination")]
    pub early_termination_alpha: f64,
    #[serde(default)]
    pub shading: Shading,
    #[serde(default = "default_background")]
    pub background: [f64; 4],
    /// Direction towards the light, used with Lambert shading.
    #[serde(default = "default_light")]
    pub light_direction: [f64; 3],
}

impl Default for RenderSettings {
    fn default() -> Self {
        RenderSettings {
            step_size: default_step(),
            early_termination_alpha: default_termination(),
            shading: Shading::None,
            background: default_background(),
            light_direction: default_light(),
        }
    }
}

impl RenderSettings {
    fn validate(&self) -> Result<(), RenderError> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(RenderError::InvalidSettings(format!(
                "step_size {} must be positive",
                self.step_size
            )));
        }
        if !(self.early_termination_alpha > 0.0 && self.early_termination_alpha <= 1.0) {
            return Err(RenderError::InvalidSettings(format!(
                "early_termination_alpha {} outside (0, 1]",
                self.early_termination_alpha
            )));
        }
        if self.background.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(RenderError::InvalidSettings("background channels outside [0, 1]".into()));
        }
        if self.shading == Shading::Lambert && !(Vec3::from(self.light_direction).norm() > 0.0) {
            return Err(RenderError::InvalidSettings("light_direction must be non-zero".into()));
        }
        Ok(())
    }
}

/// Trilinear interpolation of a grid laid out x-fastest; `p` must lie inside the lattice box.
#[inline]
fn interpolate(dims: [usize; 3], data: &[f64], p: [f64; 3]) -> f64 {
    let mut base = [0usize; 3];
    let mut frac = [0.0; 3];
    for a in 0..3 {
        let cell = (p[a].floor() as usize).min(dims[a] - 2);
        base[a] = cell;
        frac[a] = p[a] - cell as f64;
    }
    let [x, y, z] = base;
    let [fx, fy, fz] = frac;
    let at = |dx: usize, dy: usize, dz: usize| data[(x + dx) + dims[0] * ((y + dy) + dims[1] * (z + dz))];
    let c00 = at(0, 0, 0) * (1.0 - fx) + at(1, 0, 0) * fx;
    let c10 = at(0, 1, 0) * (1.0 - fx) + at(1, 1, 0) * fx;
    let c01 = at(0, 0, 1) * (1.0 - fx) + at(1, 0, 1) * fx;
    let c11 = at(0, 1, 1) * (1.0 - fx) + at(1, 1, 1) * fx;
    let c0 = c00 * (1.0 - fy) + c10 * fy;
    let c1 = c01 * (1.0 - fy) + c11 * fy;
    c0 * (1.0 - fz) + c1 * fz
}

fn in_bounds(dims: [usize; 3], p: [f64; 3]) -> bool {
    (0..3).all(|a| p[a] >= 0.0 && p[a] <= (dims[a] - 1) as f64)
}

/// Trilinearly interpolated volume value at a continuous voxel-space position.
pub fn trilinear_sample(v: &Volume, p: [f64; 3]) -> Result<f64, RenderError> {
    if !in_bounds(v.dims(), p) {
        return Err(RenderError::OutOfBounds(p));
    }
    Ok(interpolate(v.dims(), v.data(), p))
}

/// Slab-method intersection with `[0, hi]`; returns the parametric entry and exit.
fn intersect_box(origin: &Vec3, dir: &Vec3, hi: [f64; 3]) -> Option<(f64, f64)> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    for a in 0..3 {
        if dir[a].abs() < 1e-15 {
            if origin[a] < 0.0 || origin[a] > hi[a] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[a];
        let (t0, t1) = {
            let ta = (0.0 - origin[a]) * inv;
            let tb = (hi[a] - origin[a]) * inv;
            if ta <= tb { (ta, tb) } else { (tb, ta) }
        };
        t_near = t_near.max(t0);
        t_far = t_far.min(t1);
    }
    let t_near = t_near.max(0.0);
    (t_near <= t_far).then_some((t_near, t_far))
}

struct Scene<'a> {
    volume: &'a Volume,
    gradient: &'a GradientVolume,
    lut: &'a TransferLut,
    settings: &'a RenderSettings,
    upper: [f64; 3],
    light: Vec3,
}

impl Scene<'_> {
    fn shade_factor(&self, p: [f64; 3]) -> f64 {
        let dims = self.volume.dims();
        let mut grad = Vec3::zeros();
        for a in 0..3 {
            let mut lo = p;
            let mut hi = p;
            lo[a] = (p[a] - 1.0).max(0.0);
            hi[a] = (p[a] + 1.0).min(self.upper[a]);
            let span = hi[a] - lo[a];
            grad[a] = (interpolate(dims, self.volume.data(), hi) - interpolate(dims, self.volume.data(), lo)) / span;
        }
        let norm = grad.norm();
        if norm < 1e-12 {
            return 1.0;
        }
        // the outward surface normal of a dense object points down the gradient
        let normal = -grad / norm;
        normal.dot(&self.light).max(0.0)
    }

    fn trace(&self, origin: Vec3, dir: Vec3) -> [f64; 4] {
        let s = self.settings;
        let mut color = [0.0; 3];
        let mut alpha = 0.0;
        if let Some((t_near, t_far)) = intersect_box(&origin, &dir, self.upper) {
            let dims = self.volume.dims();
            let mut k = 0u64;
            loop {
                let t = t_near + s.step_size * (0.5 + k as f64);
                if t > t_far {
                    break;
                }
                k += 1;
                let q = origin + dir * t;
                let p = [
                    q[0].clamp(0.0, self.upper[0]),
                    q[1].clamp(0.0, self.upper[1]),
                    q[2].clamp(0.0, self.upper[2]),
                ];
                let value = interpolate(dims, self.volume.data(), p);
                let magnitude = interpolate(dims, self.gradient.magnitudes(), p);
                let [r, g, b, a] = self.lut.get(value_bin(value), self.gradient.bin(magnitude));
                if a <= 0.0 {
                    continue;
                }
                let corrected = 1.0 - (1.0 - a).powf(s.step_size);
                let shade = match s.shading {
                    Shading::None => 1.0,
                    Shading::Lambert => self.shade_factor(p),
                };
                let weight = (1.0 - alpha) * corrected;
                color[0] += weight * r * shade;
                color[1] += weight * g * shade;
                color[2] += weight * b * shade;
                alpha += weight;
                if alpha >= s.early_termination_alpha {
                    break;
                }
            }
        }
        let bg = s.background;
        let rest = 1.0 - alpha;
        [
            color[0] + rest * bg[0],
            color[1] + rest * bg[1],
            color[2] + rest * bg[2],
            alpha + rest * bg[3],
        ]
    }
}

/// Renders to floating-point RGBA, row-major from the top-left pixel.
pub fn render_float(
    v: &Volume,
    g: &GradientVolume,
    lut: &TransferLut,
    cam: &Camera,
    s: &RenderSettings,
) -> Result<Vec<[f64; 4]>, RenderError> {
    if v.dims() != g.dims() {
        return Err(RenderError::DimsMismatch {
            volume: v.dims(),
            gradient: g.dims(),
        });
    }
    s.validate()?;
    let frame = cam.frame()?;
    let light = if s.shading == Shading::Lambert {
        Vec3::from(s.light_direction).normalize()
    } else {
        Vec3::zeros()
    };
    let scene = Scene {
        volume: v,
        gradient: g,
        lut,
        settings: s,
        upper: v.dims().map(|d| (d - 1) as f64),
        light,
    };
    let width = frame.width as usize;
    let mut pixels = vec![[0.0; 4]; width * frame.height as usize];
    pixels
        .par_chunks_mut(width)
        .enumerate()
        .for_each(|(py, row)| {
            for (px, out) in row.iter_mut().enumerate() {
                let (origin, dir) = frame.ray(px as u32, py as u32);
                *out = scene.trace(origin, dir);
            }
        });
    Ok(pixels)
}

/// Renders the classified volume to an 8-bit RGBA image.
pub fn render(
    v: &Volume,
    g: &GradientVolume,
    lut: &TransferLut,
    cam: &Camera,
    s: &RenderSettings,
) -> Result<RgbaImage, RenderError> {
    let pixels = render_float(v, g, lut, cam, s)?;
    let raw = pixels
        .iter()
        .flat_map(|p| p.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8))
        .collect();
    Ok(RgbaImage::from_raw(cam.width, cam.height, raw).expect("buffer matches image dims"))
}

//! 2D transfer-function filters and their rasterization into an RGBA lookup table.
//!
//! A filter is an elliptic footprint in normalized histogram coordinates
//! (`u` along attenuation, `v` along gradient magnitude). Its `size` is the
//! full width of the bounding rectangle and the kernel falls to zero at the
//! rectangle's inscribed ellipse.

use std::f64::consts::PI;

use image::RgbaImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::histogram::BINS;

#[derive(Debug, Error, PartialEq)]
pub enum TfError {
    #[error("invalid filter: {field} {reason}")]
    InvalidFilter { field: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    Gauss,
    Sine,
}

/// Kernel falloff at normalized radial distance `d` (0 at the center, 1 on the footprint edge).
#[inline]
pub fn kernel_weight(kernel: Kernel, d: f64) -> f64 {
    if !(0.0..=1.0).contains(&d) {
        return 0.0;
    }
    match kernel {
        Kernel::Gauss => (-4.5 * d * d).exp(),
        Kernel::Sine => {
            let c = (PI * d / 2.0).cos();
            if d == 1.0 {
                0.0
            } else {
                c * c
            }
        }
    }
}

/// Center and full size of a filter footprint, normalized to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterGeometry {
    pub center: [f64; 2],
    pub size: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub center: [f64; 2],
    pub size: [f64; 2],
    pub kernel: Kernel,
    pub color: [f64; 3],
    pub opacity: f64,
}

fn invalid(field: impl Into<String>, reason: impl Into<String>) -> TfError {
    TfError::InvalidFilter {
        field: field.into(),
        reason: reason.into(),
    }
}

impl FilterSpec {
    pub fn geometry(&self) -> FilterGeometry {
        FilterGeometry {
            center: self.center,
            size: self.size,
        }
    }

    pub fn validate(&self) -> Result<(), TfError> {
        for (axis, &c) in self.center.iter().enumerate() {
            if !(0.0..=1.0).contains(&c) {
                return Err(invalid(format!("center[{axis}]"), format!("{c} outside [0, 1]")));
            }
        }
        for (axis, &s) in self.size.iter().enumerate() {
            if !(s > 0.0 && s <= 1.0) {
                return Err(invalid(format!("size[{axis}]"), format!("{s} outside (0, 1]")));
            }
        }
        for (channel, &c) in self.color.iter().enumerate() {
            if !(0.0..=1.0).contains(&c) {
                return Err(invalid(format!("color[{channel}]"), format!("{c} outside [0, 1]")));
            }
        }
        if !(0.0..=1.0).contains(&self.opacity) {
            return Err(invalid("opacity", format!("{} outside [0, 1]", self.opacity)));
        }
        Ok(())
    }

    /// Opacity contributed at normalized histogram position `(u, v)`.
    #[inline]
    pub fn alpha_at(&self, u: f64, v: f64) -> f64 {
        let du = 2.0 * (u - self.center[0]) / self.size[0];
        let dv = 2.0 * (v - self.center[1]) / self.size[1];
        let d2 = du * du + dv * dv;
        if d2 > 1.0 {
            return 0.0;
        }
        self.opacity * kernel_weight(self.kernel, d2.sqrt())
    }
}

/// Validates a whole list, prefixing the offending field with its index.
pub fn validate_filters(filters: &[FilterSpec]) -> Result<(), TfError> {
    for (i, f) in filters.iter().enumerate() {
        f.validate().map_err(|TfError::InvalidFilter { field, reason }| {
            invalid(format!("filters[{i}].{field}"), reason)
        })?;
    }
    Ok(())
}

/// 256×256 RGBA table indexed by (attenuation bin, gradient bin).
#[derive(Debug, Clone, PartialEq)]
pub struct TransferLut {
    cells: Vec<[f64; 4]>,
}

impl TransferLut {
    pub fn transparent() -> Self {
        TransferLut {
            cells: vec![[0.0; 4]; BINS * BINS],
        }
    }

    /// Builds a table from a per-cell function; channels are clamped to `[0, 1]`.
    pub fn from_fn(mut f: impl FnMut(usize, usize) -> [f64; 4]) -> Self {
        let mut cells = Vec::with_capacity(BINS * BINS);
        for y in 0..BINS {
            for x in 0..BINS {
                cells.push(f(x, y).map(|c| c.clamp(0.0, 1.0)));
            }
        }
        TransferLut { cells }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 4] {
        self.cells[y * BINS + x]
    }

    pub fn cells(&self) -> &[[f64; 4]] {
        &self.cells
    }

    /// 8-bit RGBA view, gradient bin 0 on the bottom row.
    pub fn to_image(&self) -> RgbaImage {
        RgbaImage::from_fn(BINS as u32, BINS as u32, |px, py| {
            let c = self.get(px as usize, BINS - 1 - py as usize);
            image::Rgba(c.map(|v| (v * 255.0).round() as u8))
        })
    }
}

/// Bin index to normalized coordinate.
#[inline]
pub fn bin_coordinate(bin: usize) -> f64 {
    bin as f64 / (BINS - 1) as f64
}

fn blend_cell(filters: &[FilterSpec], u: f64, v: f64, scratch: &mut Vec<(f64, [f64; 3])>) -> [f64; 4] {
    scratch.clear();
    scratch.extend(
        filters
            .iter()
            .map(|f| (f.alpha_at(u, v), f.color))
            .filter(|(a, _)| *a > 0.0),
    );
    if scratch.is_empty() {
        return [0.0; 4];
    }
    // fixed summation order makes the result independent of list order
    scratch.sort_by(|a, b| {
        a.0.total_cmp(&b.0)
            .then_with(|| a.1[0].total_cmp(&b.1[0]))
            .then_with(|| a.1[1].total_cmp(&b.1[1]))
            .then_with(|| a.1[2].total_cmp(&b.1[2]))
    });
    let mut transmittance = 1.0;
    let mut weight = 0.0;
    let mut color = [0.0; 3];
    for (a, c) in scratch.iter() {
        transmittance *= 1.0 - a;
        weight += a;
        for k in 0..3 {
            color[k] += a * c[k];
        }
    }
    let mut out = [0.0; 4];
    for k in 0..3 {
        out[k] = (color[k] / weight).clamp(0.0, 1.0);
    }
    out[3] = (1.0 - transmittance).clamp(0.0, 1.0);
    out
}

/// Rasterizes and blends filters: alpha is `1 - Π(1 - a_i)`, color is the alpha-weighted mean.
pub fn rasterize(filters: &[FilterSpec]) -> Result<TransferLut, TfError> {
    validate_filters(filters)?;
    let mut scratch = Vec::with_capacity(filters.len());
    Ok(TransferLut::from_fn(|x, y| {
        blend_cell(filters, bin_coordinate(x), bin_coordinate(y), &mut scratch)
    }))
}

pub const MYOCARD_COLOR: [f64; 3] = [1.0, 1.0, 0.0];
pub const BOUNDARY_COLOR: [f64; 3] = [1.0, 0.0, 0.0];
pub const MYOCARD_OPACITY: f64 = 0.35;
pub const BOUNDARY_OPACITY: f64 = 0.6;

/// Heart preset: a yellow myocard filter and a red contrast-boundary filter, both Gauss.
pub fn heart_preset(geometry: [FilterGeometry; 2]) -> Vec<FilterSpec> {
    let [myocard, boundary] = geometry;
    vec![
        FilterSpec {
            center: myocard.center,
            size: myocard.size,
            kernel: Kernel::Gauss,
            color: MYOCARD_COLOR,
            opacity: MYOCARD_OPACITY,
        },
        FilterSpec {
            center: boundary.center,
            size: boundary.size,
            kernel: Kernel::Gauss,
            color: BOUNDARY_COLOR,
            opacity: BOUNDARY_OPACITY,
        },
    ]
}

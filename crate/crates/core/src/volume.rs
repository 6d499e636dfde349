//! Scalar volumes, synthetic phantoms and gradient magnitude.
//!
//! Raw volumes are a JSON header beside a raw sample file. Samples are stored
//! x-fastest (x, then y, then z) and are normalized to `[0, 1]` on load so that
//! everything downstream is independent of the source sample type.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("byte count {actual} does not match header (expected {expected})")]
    SizeMismatch { expected: usize, actual: usize },
    #[error("bad header: {0}")]
    BadHeader(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Sample type of the raw file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    #[serde(rename = "u8")]
    U8,
    #[serde(rename = "u16le")]
    U16Le,
}

impl Dtype {
    pub fn size_of(self) -> usize {
        match self {
            Dtype::U8 => 1,
            Dtype::U16Le => 2,
        }
    }

    pub fn max_value(self) -> f64 {
        match self {
            Dtype::U8 => 255.0,
            Dtype::U16Le => 65535.0,
        }
    }
}

fn default_spacing() -> [f64; 3] {
    [1.0; 3]
}

/// Header file contents: `{"dims":[nx,ny,nz],"spacing":[sx,sy,sz],"dtype":"u8"|"u16le"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub dims: [usize; 3],
    #[serde(default = "default_spacing")]
    pub spacing: [f64; 3],
    pub dtype: Dtype,
}

impl VolumeHeader {
    fn validate(&self) -> Result<(), VolumeError> {
        validate_dims(self.dims)?;
        if self.spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(VolumeError::BadHeader(format!(
                "spacing must be positive, got {:?}",
                self.spacing
            )));
        }
        Ok(())
    }

    pub fn voxel_count(&self) -> usize {
        self.dims.iter().product()
    }

    /// Parses a header, mapping JSON errors (including unknown dtypes) to `BadHeader`.
    pub fn from_json(text: &str) -> Result<Self, VolumeError> {
        let header: VolumeHeader =
            serde_json::from_str(text).map_err(|e| VolumeError::BadHeader(e.to_string()))?;
        header.validate()?;
        Ok(header)
    }
}

fn validate_dims(dims: [usize; 3]) -> Result<(), VolumeError> {
    if dims.iter().any(|&d| d < 2) {
        return Err(VolumeError::BadHeader(format!(
            "every dimension must be at least 2, got {dims:?}"
        )));
    }
    Ok(())
}

/// A 3D scalar grid with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f64; 3],
    data: Vec<f64>,
    source_dtype: Dtype,
}

impl Volume {
    pub fn new(
        dims: [usize; 3],
        spacing: [f64; 3],
        data: Vec<f64>,
        source_dtype: Dtype,
    ) -> Result<Self, VolumeError> {
        let header = VolumeHeader {
            dims,
            spacing,
            dtype: source_dtype,
        };
        header.validate()?;
        if data.len() != header.voxel_count() {
            return Err(VolumeError::SizeMismatch {
                expected: header.voxel_count(),
                actual: data.len(),
            });
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(VolumeError::BadHeader(format!(
                "voxel value {bad} outside [0, 1]"
            )));
        }
        Ok(Volume {
            dims,
            spacing,
            data,
            source_dtype,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn source_dtype(&self) -> Dtype {
        self.source_dtype
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.index(x, y, z)]
    }

    pub fn header(&self) -> VolumeHeader {
        VolumeHeader {
            dims: self.dims,
            spacing: self.spacing,
            dtype: self.source_dtype,
        }
    }

    /// Encodes the samples in the source dtype, rounding to the nearest code.
    pub fn to_bytes(&self) -> Vec<u8> {
        let max = self.source_dtype.max_value();
        match self.source_dtype {
            Dtype::U8 => self
                .data
                .iter()
                .map(|v| (v * max).round() as u8)
                .collect(),
            Dtype::U16Le => self
                .data
                .iter()
                .flat_map(|v| ((v * max).round() as u16).to_le_bytes())
                .collect(),
        }
    }

    /// Reads `<prefix>.json` and `<prefix>.raw`.
    pub fn read(prefix: &Path) -> Result<Self, VolumeError> {
        let (header_path, raw_path) = file_pair(prefix);
        let text = fs::read_to_string(&header_path).map_err(|source| VolumeError::Io {
            path: header_path.clone(),
            source,
        })?;
        let header = VolumeHeader::from_json(&text)?;
        let bytes = fs::read(&raw_path).map_err(|source| VolumeError::Io {
            path: raw_path.clone(),
            source,
        })?;
        load_volume(&bytes, &header)
    }

    /// Writes `<prefix>.json` and `<prefix>.raw`.
    pub fn write(&self, prefix: &Path) -> Result<(), VolumeError> {
        let (header_path, raw_path) = file_pair(prefix);
        let header = serde_json::to_string(&self.header()).expect("header serializes");
        fs::write(&header_path, header).map_err(|source| VolumeError::Io {
            path: header_path,
            source,
        })?;
        fs::write(&raw_path, self.to_bytes()).map_err(|source| VolumeError::Io {
            path: raw_path,
            source,
        })
    }
}

/// Header and raw file paths for a volume prefix.
pub fn file_pair(prefix: &Path) -> (PathBuf, PathBuf) {
    let mut header = prefix.as_os_str().to_owned();
    header.push(".json");
    let mut raw = prefix.as_os_str().to_owned();
    raw.push(".raw");
    (PathBuf::from(header), PathBuf::from(raw))
}

/// Decodes a raw sample stream described by `header`.
pub fn load_volume(bytes: &[u8], header: &VolumeHeader) -> Result<Volume, VolumeError> {
    header.validate()?;
    let expected = header.voxel_count() * header.dtype.size_of();
    if bytes.len() != expected {
        return Err(VolumeError::SizeMismatch {
            expected,
            actual: bytes.len(),
        });
    }
    let max = header.dtype.max_value();
    let data = match header.dtype {
        Dtype::U8 => bytes.iter().map(|&b| f64::from(b) / max).collect(),
        Dtype::U16Le => bytes
            .chunks_exact(2)
            .map(|c| f64::from(u16::from_le_bytes([c[0], c[1]])) / max)
            .collect(),
    };
    Ok(Volume {
        dims: header.dims,
        spacing: header.spacing,
        data,
        source_dtype: header.dtype,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shell {
    /// Center in voxel coordinates.
    pub center: [f64; 3],
    /// Radius in voxels.
    pub radius: f64,
    pub value: f64,
}

/// A synthetic volume made of nested spheres over a uniform background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    #[serde(default = "default_spacing")]
    pub spacing: [f64; 3],
    pub background_value: f64,
    #[serde(default)]
    pub shells: Vec<Shell>,
    /// Sample type used when the phantom is written to disk.
    #[serde(default = "default_phantom_dtype")]
    pub dtype: Dtype,
}

fn default_phantom_dtype() -> Dtype {
    Dtype::U16Le
}

impl PhantomSpec {
    pub fn new(dims: [usize; 3], background_value: f64) -> Self {
        PhantomSpec {
            dims,
            spacing: default_spacing(),
            background_value,
            shells: Vec::new(),
            dtype: default_phantom_dtype(),
        }
    }

    pub fn with_shell(mut self, center: [f64; 3], radius: f64, value: f64) -> Self {
        self.shells.push(Shell {
            center,
            radius,
            value,
        });
        self
    }

    fn validate(&self) -> Result<(), VolumeError> {
        validate_dims(self.dims)?;
        if !(0.0..=1.0).contains(&self.background_value) {
            return Err(VolumeError::BadHeader(format!(
                "background_value {} outside [0, 1]",
                self.background_value
            )));
        }
        for (i, shell) in self.shells.iter().enumerate() {
            if !(shell.radius.is_finite() && shell.radius > 0.0) {
                return Err(VolumeError::BadHeader(format!(
                    "shell {i}: radius must be positive"
                )));
            }
            if !(0.0..=1.0).contains(&shell.value) {
                return Err(VolumeError::BadHeader(format!(
                    "shell {i}: value {} outside [0, 1]",
                    shell.value
                )));
            }
        }
        Ok(())
    }
}

/// Voxel value is that of the last shell containing the voxel center, else background.
pub fn make_phantom(spec: &PhantomSpec) -> Result<Volume, VolumeError> {
    spec.validate()?;
    let [nx, ny, nz] = spec.dims;
    let mut data = vec![spec.background_value; nx * ny * nz];
    data.par_chunks_mut(nx * ny)
        .enumerate()
        .for_each(|(z, slice)| {
            for y in 0..ny {
                for x in 0..nx {
                    let p = [x as f64, y as f64, z as f64];
                    let inside = spec.shells.iter().rev().find(|s| {
                        let d2: f64 = (0..3).map(|a| (p[a] - s.center[a]).powi(2)).sum();
                        d2 <= s.radius * s.radius
                    });
                    if let Some(shell) = inside {
                        slice[x + nx * y] = shell.value;
                    }
                }
            }
        });
    Volume::new(spec.dims, spec.spacing, data, spec.dtype)
}

/// Per-voxel gradient magnitude of a [`Volume`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVolume {
    dims: [usize; 3],
    magnitudes: Vec<f64>,
    max_magnitude: f64,
    scale: f64,
}

/// Fraction of voxels whose magnitude lies at or below the histogram scale.
pub const GRADIENT_SCALE_PERCENTILE: f64 = 0.995;

impl GradientVolume {
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn magnitudes(&self) -> &[f64] {
        &self.magnitudes
    }

    pub fn max_magnitude(&self) -> f64 {
        self.max_magnitude
    }

    /// The 99.5th-percentile magnitude (nearest rank). Magnitudes above it
    /// saturate the gradient axis of histograms and lookup tables.
    pub fn gradient_scale(&self) -> f64 {
        self.scale
    }

    /// Maps a magnitude to a gradient bin in `0..=255`.
    #[inline]
    pub fn bin(&self, magnitude: f64) -> usize {
        if self.scale <= 0.0 {
            return 0;
        }
        let clamped = magnitude.clamp(0.0, self.scale);
        ((clamped / self.scale * 255.0 + 0.5).floor() as usize).min(255)
    }
}

fn percentile_nearest_rank(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut sorted = values.to_vec();
    let rank = ((q * values.len() as f64).ceil() as usize).clamp(1, values.len());
    let (_, nth, _) = sorted.select_nth_unstable_by(rank - 1, f64::total_cmp);
    *nth
}

/// Central differences inside, one-sided differences on the boundary, scaled by spacing.
pub fn gradient_magnitude(v: &Volume) -> GradientVolume {
    let [nx, ny, nz] = v.dims;
    let spacing = v.spacing;
    let mut magnitudes = vec![0.0; v.len()];
    magnitudes
        .par_chunks_mut(nx * ny)
        .enumerate()
        .for_each(|(z, slice)| {
            for y in 0..ny {
                for x in 0..nx {
                    let gx = axis_derivative(x, nx, spacing[0], |i| v.get(i, y, z));
                    let gy = axis_derivative(y, ny, spacing[1], |i| v.get(x, i, z));
                    let gz = axis_derivative(z, nz, spacing[2], |i| v.get(x, y, i));
                    slice[x + nx * y] = (gx * gx + gy * gy + gz * gz).sqrt();
                }
            }
        });
    let max_magnitude = magnitudes.iter().copied().fold(0.0, f64::max);
    let scale = percentile_nearest_rank(&magnitudes, GRADIENT_SCALE_PERCENTILE);
    GradientVolume {
        dims: v.dims,
        magnitudes,
        max_magnitude,
        scale,
    }
}

#[inline]
fn axis_derivative(i: usize, n: usize, spacing: f64, at: impl Fn(usize) -> f64) -> f64 {
    if i == 0 {
        (at(1) - at(0)) / spacing
    } else if i == n - 1 {
        (at(n - 1) - at(n - 2)) / spacing
    } else {
        (at(i + 1) - at(i - 1)) / (2.0 * spacing)
    }
}

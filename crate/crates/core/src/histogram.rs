//! Joint attenuation / gradient-magnitude histograms and their reduction to
//! network inputs.

use image::GrayImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume::{GradientVolume, Volume};

/// Bins per histogram axis.
pub const BINS: usize = 256;
/// Downscale factor applied on both axes before the network sees the histogram.
pub const REDUCTION: usize = 4;
/// Gradient bins kept by the reduction (the lower half).
pub const KEPT_GRADIENT_BINS: usize = BINS / 2;
pub const REDUCED_COLUMNS: usize = BINS / REDUCTION;
pub const REDUCED_ROWS: usize = KEPT_GRADIENT_BINS / REDUCTION;
/// Length of the network input vector.
pub const REDUCED_LEN: usize = REDUCED_COLUMNS * REDUCED_ROWS;

#[derive(Debug, Error)]
pub enum HistogramError {
    #[error("volume dims {volume:?} do not match gradient dims {gradient:?}")]
    DimsMismatch {
        volume: [usize; 3],
        gradient: [usize; 3],
    },
    #[error("bad histogram: {0}")]
    BadFormat(String),
}

/// Attenuation bin (x) of a normalized value.
#[inline]
pub fn value_bin(value: f64) -> usize {
    ((value.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as usize).min(BINS - 1)
}

/// 256×256 counts; x is the attenuation bin, y the gradient-magnitude bin.
#[derive(Debug, Clone, PartialEq)]
pub struct JointHistogram {
    counts: Vec<u64>,
    total: u64,
    gradient_scale: f64,
}

#[derive(Serialize, Deserialize)]
struct HistogramFile {
    counts: Vec<Vec<u64>>,
    gradient_scale: f64,
}

impl JointHistogram {
    /// Builds a histogram from row-major counts (`counts[y * 256 + x]`).
    pub fn from_counts(counts: Vec<u64>, gradient_scale: f64) -> Result<Self, HistogramError> {
        if counts.len() != BINS * BINS {
            return Err(HistogramError::BadFormat(format!(
                "expected {} bins, got {}",
                BINS * BINS,
                counts.len()
            )));
        }
        if !(gradient_scale.is_finite() && gradient_scale >= 0.0) {
            return Err(HistogramError::BadFormat(format!(
                "gradient_scale must be finite and non-negative, got {gradient_scale}"
            )));
        }
        let total = counts.iter().sum();
        Ok(JointHistogram {
            counts,
            total,
            gradient_scale,
        })
    }

    pub fn empty() -> Self {
        JointHistogram {
            counts: vec![0; BINS * BINS],
            total: 0,
            gradient_scale: 0.0,
        }
    }

    #[inline]
    pub fn count(&self, x: usize, y: usize) -> u64 {
        self.counts[y * BINS + x]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn gradient_scale(&self) -> f64 {
        self.gradient_scale
    }

    pub fn max_count(&self) -> u64 {
        self.counts.iter().copied().max().unwrap_or(0)
    }

    /// JSON export; rows are gradient bins from 0 upward, each row spans the attenuation bins.
    pub fn to_json(&self) -> String {
        let file = HistogramFile {
            counts: self.counts.chunks(BINS).map(<[u64]>::to_vec).collect(),
            gradient_scale: self.gradient_scale,
        };
        serde_json::to_string(&file).expect("histogram serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, HistogramError> {
        let file: HistogramFile =
            serde_json::from_str(text).map_err(|e| HistogramError::BadFormat(e.to_string()))?;
        if file.counts.len() != BINS || file.counts.iter().any(|r| r.len() != BINS) {
            return Err(HistogramError::BadFormat(
                "counts must be 256 rows of 256 integers".into(),
            ));
        }
        Self::from_counts(file.counts.concat(), file.gradient_scale)
    }
}

/// Bins every voxel by (value, clamped gradient magnitude).
pub fn joint_histogram(v: &Volume, g: &GradientVolume) -> Result<JointHistogram, HistogramError> {
    if v.dims() != g.dims() {
        return Err(HistogramError::DimsMismatch {
            volume: v.dims(),
            gradient: g.dims(),
        });
    }
    const CHUNK: usize = 1 << 16;
    let counts = v
        .data()
        .par_chunks(CHUNK)
        .zip(g.magnitudes().par_chunks(CHUNK))
        .fold(
            || vec![0u64; BINS * BINS],
            |mut acc, (values, mags)| {
                for (&value, &mag) in values.iter().zip(mags) {
                    acc[g.bin(mag) * BINS + value_bin(value)] += 1;
                }
                acc
            },
        )
        .reduce(
            || vec![0u64; BINS * BINS],
            |mut a, b| {
                a.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
                a
            },
        );
    JointHistogram::from_counts(counts, g.gradient_scale())
}

/// 2048 network inputs in `[0, 1]`: 32 rows (gradient, from bin 0 upward) of 64 columns.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedInput {
    values: Vec<f64>,
}

impl ReducedInput {
    pub fn new(values: Vec<f64>) -> Result<Self, HistogramError> {
        if values.len() != REDUCED_LEN {
            return Err(HistogramError::BadFormat(format!(
                "reduced input needs {REDUCED_LEN} values, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(HistogramError::BadFormat(
                "reduced input values must lie in [0, 1]".into(),
            ));
        }
        Ok(ReducedInput { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn at(&self, row: usize, column: usize) -> f64 {
        self.values[row * REDUCED_COLUMNS + column]
    }
}

/// Sums each 4×4 block of the lower half of the histogram, row-major from gradient bin 0.
pub fn block_sums(h: &JointHistogram) -> Vec<u64> {
    let mut sums = vec![0u64; REDUCED_LEN];
    for y in 0..KEPT_GRADIENT_BINS {
        let row = y / REDUCTION;
        for x in 0..BINS {
            sums[row * REDUCED_COLUMNS + x / REDUCTION] += h.count(x, y);
        }
    }
    sums
}

/// Crops to the lower half, downscales by four and log-normalizes to `[0, 1]`.
pub fn reduce_histogram(h: &JointHistogram) -> ReducedInput {
    let sums = block_sums(h);
    let max = sums.iter().copied().max().unwrap_or(0);
    let values = if max == 0 {
        vec![0.0; REDUCED_LEN]
    } else {
        let denom = (max as f64).ln_1p();
        sums.iter()
            .map(|&c| ((c as f64).ln_1p() / denom).min(1.0))
            .collect()
    };
    ReducedInput { values }
}

/// Log-scaled grayscale view with gradient bin 0 on the bottom row.
pub fn render_histogram_image(h: &JointHistogram) -> GrayImage {
    let max = h.max_count();
    let denom = (max as f64).ln_1p();
    GrayImage::from_fn(BINS as u32, BINS as u32, |px, py| {
        let c = h.count(px as usize, BINS - 1 - py as usize);
        let level = if max == 0 {
            0.0
        } else {
            255.0 * (c as f64).ln_1p() / denom
        };
        image::Luma([level.round().clamp(0.0, 255.0) as u8])
    })
}

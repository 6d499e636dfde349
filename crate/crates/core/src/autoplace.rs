//! Automatic filter placement: training samples, prediction from histograms,
//! synthetic training sets and the learning-curve experiment.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::histogram::{joint_histogram, reduce_histogram, HistogramError, JointHistogram, REDUCED_LEN};
use crate::neural::{train, MlpNetwork, NeuralError, Pair, TrainConfig};
use crate::transfer_function::{heart_preset, FilterGeometry, FilterSpec};
use crate::volume::{gradient_magnitude, make_phantom, PhantomSpec, Volume, VolumeError};

/// Network outputs: two filters × (x, y, width, height).
pub const TARGET_LEN: usize = 8;
/// Smallest predicted filter extent, one reduced-histogram cell.
pub const MIN_FILTER_SIZE: f64 = 1.0 / 64.0;
/// Training-set sizes of the learning-curve experiment.
pub const CURVE_SIZES: [usize; 5] = [2, 4, 6, 8, 10];
/// Held-out samples at the end of the dataset.
pub const VALIDATION_COUNT: usize = 2;

#[derive(Debug, Error)]
pub enum AutoplaceError {
    #[error("expected exactly 2 filters, got {0}")]
    WrongFilterCount(usize),
    #[error("network shape {0:?} does not map 2048 inputs to 8 outputs")]
    ShapeMismatch(Vec<usize>),
    #[error("learning curve needs at least {needed} samples, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("bad training sample {path}: {reason}")]
    BadSample { path: String, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Histogram(#[from] HistogramError),
}

/// Packs two geometries as `(xpos1, ypos1, xsize1, ysize1, xpos2, ypos2, xsize2, ysize2)`.
pub fn pack_geometry(g: &[FilterGeometry; 2]) -> [f64; TARGET_LEN] {
    [
        g[0].center[0],
        g[0].center[1],
        g[0].size[0],
        g[0].size[1],
        g[1].center[0],
        g[1].center[1],
        g[1].size[0],
        g[1].size[1],
    ]
}

pub fn unpack_geometry(t: &[f64; TARGET_LEN]) -> [FilterGeometry; 2] {
    [
        FilterGeometry {
            center: [t[0], t[1]],
            size: [t[2], t[3]],
        },
        FilterGeometry {
            center: [t[4], t[5]],
            size: [t[6], t[7]],
        },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub input: Vec<f64>,
    pub target: [f64; TARGET_LEN],
    #[serde(default)]
    pub label: String,
}

impl TrainingSample {
    pub fn validate(&self) -> Result<(), String> {
        if self.input.len() != REDUCED_LEN {
            return Err(format!("input has {} values, expected {REDUCED_LEN}", self.input.len()));
        }
        if self.input.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err("input values must lie in [0, 1]".into());
        }
        if self.target.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err("target values must lie in [0, 1]".into());
        }
        Ok(())
    }

    pub fn geometry(&self) -> [FilterGeometry; 2] {
        unpack_geometry(&self.target)
    }

    pub fn as_pair(&self) -> Pair<'_> {
        (&self.input, &self.target)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("sample serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        let sample: TrainingSample = serde_json::from_str(text).map_err(|e| e.to_string())?;
        sample.validate()?;
        Ok(sample)
    }
}

/// Training sample from a histogram and the geometry of two hand-placed filters.
pub fn sample_from_histogram(
    h: &JointHistogram,
    filters: &[FilterSpec],
    label: impl Into<String>,
) -> Result<TrainingSample, AutoplaceError> {
    let [a, b] = filters else {
        return Err(AutoplaceError::WrongFilterCount(filters.len()));
    };
    Ok(TrainingSample {
        input: reduce_histogram(h).into_values(),
        target: pack_geometry(&[a.geometry(), b.geometry()]),
        label: label.into(),
    })
}

/// Computes the reduced histogram of `v` and pairs it with the filters' geometry.
pub fn build_sample(
    v: &Volume,
    filters: &[FilterSpec],
    label: impl Into<String>,
) -> Result<TrainingSample, AutoplaceError> {
    if filters.len() != 2 {
        return Err(AutoplaceError::WrongFilterCount(filters.len()));
    }
    let g = gradient_magnitude(v);
    let h = joint_histogram(v, &g)?;
    sample_from_histogram(&h, filters, label)
}

fn check_placement_net(net: &MlpNetwork) -> Result<(), AutoplaceError> {
    if net.input_len() != REDUCED_LEN || net.output_len() != TARGET_LEN {
        return Err(AutoplaceError::ShapeMismatch(net.layer_sizes().to_vec()));
    }
    Ok(())
}

/// Predicts the two filter geometries for a histogram; sizes are clamped to at least 1/64.
pub fn predict_filters(net: &MlpNetwork, h: &JointHistogram) -> Result<[FilterGeometry; 2], AutoplaceError> {
    check_placement_net(net)?;
    let out = net.forward(reduce_histogram(h).values())?;
    let mut t = [0.0; TARGET_LEN];
    t.copy_from_slice(&out);
    let mut geometry = unpack_geometry(&t);
    for g in &mut geometry {
        for s in &mut g.size {
            *s = s.clamp(MIN_FILTER_SIZE, 1.0);
        }
    }
    Ok(geometry)
}

/// Predicted geometry dressed with the heart preset colors.
pub fn autoplace_filters(net: &MlpNetwork, h: &JointHistogram) -> Result<Vec<FilterSpec>, AutoplaceError> {
    Ok(heart_preset(predict_filters(net, h)?))
}

/// Writes one `sample_NNN.json` per sample.
pub fn save_dataset(dir: &Path, samples: &[TrainingSample]) -> Result<(), AutoplaceError> {
    fs::create_dir_all(dir).map_err(|source| AutoplaceError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    for (i, s) in samples.iter().enumerate() {
        let path = dir.join(format!("sample_{i:03}.json"));
        fs::write(&path, s.to_json()).map_err(|source| AutoplaceError::Io { path, source })?;
    }
    Ok(())
}

/// Loads every `*.json` file in `dir`, ordered by file name.
pub fn load_dataset(dir: &Path) -> Result<Vec<TrainingSample>, AutoplaceError> {
    let entries = fs::read_dir(dir).map_err(|source| AutoplaceError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|path| {
            let text = fs::read_to_string(&path).map_err(|source| AutoplaceError::Io {
                path: path.clone(),
                source,
            })?;
            TrainingSample::from_json(&text).map_err(|reason| AutoplaceError::BadSample {
                path: path.display().to_string(),
                reason,
            })
        })
        .collect()
}

/// A synthetic heart-like phantom: a muscle sphere holding a contrast-filled
/// cavity and a small dense inclusion, over a low-attenuation background.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCase {
    pub phantom: PhantomSpec,
    pub muscle: f64,
    pub contrast: f64,
    pub filters: [FilterGeometry; 2],
}

/// Myocard filter on the muscle value at low gradient, and a boundary filter
/// above it on the arch between muscle and contrast.
pub fn reference_filters(muscle: f64, contrast: f64) -> [FilterGeometry; 2] {
    let spread = contrast - muscle;
    [
        FilterGeometry {
            center: [muscle, 0.02],
            size: [0.14, 0.2],
        },
        FilterGeometry {
            center: [(muscle + contrast) / 2.0, 0.28],
            size: [spread + 0.04, 0.36],
        },
    ]
}

/// Generates `count` jittered phantoms with consistent reference filters.
pub fn synthetic_cases(count: usize, seed: u64, edge: usize) -> Vec<SyntheticCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e = edge as f64;
    let mid = (e - 1.0) / 2.0;
    (0..count)
        .map(|_| {
            let background = rng.random_range(0.04..0.14);
            let muscle = rng.random_range(0.36..0.5);
            let contrast = rng.random_range(0.6..0.75);
            let jitter = |rng: &mut ChaCha8Rng| rng.random_range(-0.06..0.06) * e;
            let outer = [mid + jitter(&mut rng), mid + jitter(&mut rng), mid + jitter(&mut rng)];
            let outer_r = e * rng.random_range(0.3..0.38);
            let inner = [
                outer[0] + 0.5 * jitter(&mut rng),
                outer[1] + 0.5 * jitter(&mut rng),
                outer[2] + 0.5 * jitter(&mut rng),
            ];
            let inner_r = outer_r * rng.random_range(0.4..0.55);
            let bone = [mid + 0.38 * e, mid - 0.35 * e, mid];
            let phantom = PhantomSpec::new([edge; 3], background)
                .with_shell(outer, outer_r, muscle)
                .with_shell(inner, inner_r, contrast)
                .with_shell(bone, e * 0.06, rng.random_range(0.88..0.96));
            SyntheticCase {
                phantom,
                muscle,
                contrast,
                filters: reference_filters(muscle, contrast),
            }
        })
        .collect()
}

/// Builds training samples for synthetic cases, with heart-preset colors on the targets.
pub fn synthetic_dataset(count: usize, seed: u64, edge: usize) -> Result<Vec<TrainingSample>, AutoplaceError> {
    synthetic_cases(count, seed, edge)
        .into_par_iter()
        .enumerate()
        .map(|(i, case)| {
            let v = make_phantom(&case.phantom)?;
            build_sample(
                &v,
                &heart_preset(case.filters),
                format!("synthetic seed={seed} case={i} muscle={:.4} contrast={:.4}", case.muscle, case.contrast),
            )
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub n: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningCurveResult {
    pub points: Vec<CurvePoint>,
}

impl LearningCurveResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,train_mse,val_mse\n");
        for p in &self.points {
            out.push_str(&format!("{},{:e},{:e}\n", p.n, p.train_mse, p.val_mse));
        }
        out
    }

    /// Line plot of training (blue) and validation (red) MSE against n.
    pub fn plot(&self) -> RgbImage {
        plot_curve(&self.points)
    }
}

/// Trains one fresh network per training-set size on the first `n` samples and
/// evaluates it on the last two.
pub fn learning_curve(
    dataset: &[TrainingSample],
    layer_sizes: &[usize],
    cfg: &TrainConfig,
) -> Result<LearningCurveResult, AutoplaceError> {
    let needed = CURVE_SIZES[CURVE_SIZES.len() - 1] + VALIDATION_COUNT;
    if dataset.len() < needed {
        return Err(AutoplaceError::InsufficientData {
            needed,
            got: dataset.len(),
        });
    }
    let validation: Vec<Pair<'_>> = dataset[dataset.len() - VALIDATION_COUNT..]
        .iter()
        .map(TrainingSample::as_pair)
        .collect();
    let points = CURVE_SIZES
        .par_iter()
        .map(|&n| {
            let train_set: Vec<Pair<'_>> = dataset[..n].iter().map(TrainingSample::as_pair).collect();
            let net = cfg.init_network(layer_sizes)?;
            let (net, report) = train(net, &train_set, Some(&validation), cfg)?;
            log::info!(
                "n={n}: {} epochs, train mse {:.3e}, validation mse {:.3e}",
                report.epochs_run,
                report.final_train_mse(),
                report.validation_mse.unwrap_or(f64::NAN)
            );
            Ok(CurvePoint {
                n,
                train_mse: net.mse(&train_set)?,
                val_mse: net.mse(&validation)?,
                epochs: report.epochs_run,
            })
        })
        .collect::<Result<Vec<_>, AutoplaceError>>()?;
    Ok(LearningCurveResult { points })
}

const PLOT_W: u32 = 640;
const PLOT_H: u32 = 400;
const MARGIN: u32 = 48;

fn draw_line(img: &mut RgbImage, from: (i64, i64), to: (i64, i64), color: Rgb<u8>) {
    let (mut x0, mut y0) = from;
    let (x1, y1) = to;
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        for (ox, oy) in [(0, 0), (1, 0), (0, 1)] {
            let (px, py) = (x0 + ox, y0 + oy);
            if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height() {
                img.put_pixel(px as u32, py as u32, color);
            }
        }
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

fn draw_marker(img: &mut RgbImage, at: (i64, i64), color: Rgb<u8>) {
    for dy in -3..=3 {
        draw_line(img, (at.0 - 3, at.1 + dy), (at.0 + 3, at.1 + dy), color);
    }
}

fn plot_curve(points: &[CurvePoint]) -> RgbImage {
    let mut img = RgbImage::from_pixel(PLOT_W, PLOT_H, Rgb([255, 255, 255]));
    let axis = Rgb([0, 0, 0]);
    let grid = Rgb([220, 220, 220]);
    let (left, right) = (MARGIN as i64, (PLOT_W - MARGIN) as i64);
    let (top, bottom) = (MARGIN as i64, (PLOT_H - MARGIN) as i64);
    for k in 1..=4 {
        let y = bottom - (bottom - top) * k / 4;
        draw_line(&mut img, (left, y), (right, y), grid);
    }
    draw_line(&mut img, (left, bottom), (right, bottom), axis);
    draw_line(&mut img, (left, top), (left, bottom), axis);
    if points.is_empty() {
        return img;
    }
    let n_min = points.iter().map(|p| p.n).min().unwrap_or(0) as f64;
    let n_max = points.iter().map(|p| p.n).max().unwrap_or(1) as f64;
    let y_max = points
        .iter()
        .flat_map(|p| [p.train_mse, p.val_mse])
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE)
        * 1.1;
    let to_screen = |n: usize, mse: f64| {
        let fx = if n_max > n_min { (n as f64 - n_min) / (n_max - n_min) } else { 0.5 };
        let x = left + (fx * (right - left) as f64).round() as i64;
        let y = bottom - ((mse / y_max) * (bottom - top) as f64).round() as i64;
        (x, y)
    };
    for p in points {
        let (x, _) = to_screen(p.n, 0.0);
        draw_line(&mut img, (x, bottom), (x, bottom + 6), axis);
    }
    let series: [(fn(&CurvePoint) -> f64, Rgb<u8>); 2] = [
        (|p| p.train_mse, Rgb([30, 90, 200])),
        (|p| p.val_mse, Rgb([210, 40, 40])),
    ];
    for (value, color) in series {
        for w in points.windows(2) {
            draw_line(&mut img, to_screen(w[0].n, value(&w[0])), to_screen(w[1].n, value(&w[1])), color);
        }
        for p in points {
            draw_marker(&mut img, to_screen(p.n, value(p)), color);
        }
    }
    img
}

//! `voltf` command line tool and HTTP service.

pub mod cli;
pub mod service;
pub mod store;

use voltf_core::png::encode_rgba;
use voltf_core::renderer::{render, Camera, RenderSettings};
use voltf_core::transfer_function::{rasterize, FilterSpec};
use voltf_core::volume::{gradient_magnitude, GradientVolume, Volume};
use voltf_core::histogram::{joint_histogram, JointHistogram};

/// A volume with the derived data every request needs.
#[derive(Debug)]
pub struct Prepared {
    pub volume: Volume,
    pub gradient: GradientVolume,
    pub histogram: JointHistogram,
}

impl Prepared {
    pub fn new(volume: Volume) -> Self {
        let gradient = gradient_magnitude(&volume);
        let histogram = joint_histogram(&volume, &gradient).expect("gradient dims match its volume");
        Prepared {
            volume,
            gradient,
            histogram,
        }
    }

    /// Rasterizes `filters`, renders and encodes the frame as PNG.
    pub fn render_png(
        &self,
        filters: &[FilterSpec],
        camera: &Camera,
        settings: &RenderSettings,
    ) -> anyhow::Result<Vec<u8>> {
        let lut = rasterize(filters)?;
        let img = render(&self.volume, &self.gradient, &lut, camera, settings)?;
        Ok(encode_rgba(&img))
    }
}

/// Perspective view from the +z side framing the whole volume.
pub fn default_camera(dims: [usize; 3]) -> Camera {
    let c = dims.map(|d| (d - 1) as f64 / 2.0);
    let extent = dims.iter().copied().max().unwrap_or(1) as f64;
    Camera {
        eye: [c[0], c[1], c[2] + 2.2 * extent],
        lookat: c,
        up: [0.0, 1.0, 0.0],
        fov: 30.0,
        projection: Default::default(),
        half_height: None,
        width: 256,
        height: 256,
    }
}

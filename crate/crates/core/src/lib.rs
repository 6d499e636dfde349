//! Semi-automatic 2D transfer functions for scalar volumes.
//!
//! The pipeline runs from a raw scalar [`volume::Volume`] through its
//! gradient magnitude to a 256×256 attenuation/gradient
//! [`histogram::JointHistogram`]. The histogram is reduced to a 2048-element
//! vector that a small logistic [`neural::MlpNetwork`] maps to the geometry of
//! two classification filters ([`autoplace`]). The filters are rasterized into
//! a [`transfer_function::TransferLut`] and the classified volume is drawn by
//! the software raycaster in [`renderer`].

pub mod autoplace;
pub mod histogram;
pub mod neural;
pub mod png;
pub mod renderer;
pub mod transfer_function;
pub mod volume;

pub use autoplace::TrainingSample;
pub use histogram::{JointHistogram, ReducedInput};
pub use neural::{MlpNetwork, TrainConfig, TrainReport};
pub use renderer::{Camera, RenderSettings};
pub use transfer_function::{FilterGeometry, FilterSpec, Kernel, TransferLut};
pub use volume::{GradientVolume, PhantomSpec, Volume};

//! Point clouds in, elliptical Gaussians out, images rendered.
//!
//! The pipeline has three stages:
//!
//! 1. [`pcio`] loads colored point clouds (PLY) and applies the scene
//!    transforms used for data preparation (normalization, 10-bit
//!    quantization, lattice downsampling, random subsets).
//! 2. [`estimators`] turns every point into one 3D Gaussian [`Splat`], either
//!    analytically (global isotropic, local PCA) or with the sparse UNet in
//!    [`sparsenet`] running on the adaptive voxelization of [`voxelgrid`].
//! 3. [`rasterizer`] projects splats with the first-order EWA Jacobian
//!    ([`gaussians`]), sorts them front to back and alpha-blends them tile by
//!    tile into RGB, normal and depth planes. The same module provides a
//!    brute-force reference renderer, late-shading relighting and an analytic
//!    backward pass, which [`fit`] uses for per-scene optimization.
//!
//! [`evalkit`] holds the quality metrics and synthetic scenes with analytic
//! ground truth used by tests and benchmarks.

pub mod estimators;
pub mod evalkit;
pub mod fit;
pub mod gaussians;
pub mod imagebuf;
pub mod knn;
pub mod pcio;
pub mod rasterizer;
pub mod sparsenet;
pub mod stats;
pub mod voxelgrid;

pub use estimators::{EstimatorConfig, EstimatorKind};
pub use gaussians::{Camera, ProjectedSplat, Splat};
pub use imagebuf::Image;
pub use pcio::{Point, PointCloud};
pub use rasterizer::{FrameBuffer, RenderMode, RenderOptions};
pub use voxelgrid::{SparseVoxelGrid, VoxelizedCloud};

pub type Vec3 = nalgebra::Vector3<f64>;
pub type Mat3 = nalgebra::Matrix3<f64>;

/// Any error raised by the library, for callers that do not care which stage failed.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Pcio(#[from] pcio::PcioError),
    #[error(transparent)]
    Voxel(#[from] voxelgrid::VoxelError),
    #[error(transparent)]
    Gaussian(#[from] gaussians::GaussianError),
    #[error(transparent)]
    Render(#[from] rasterizer::RenderError),
    #[error(transparent)]
    Net(#[from] sparsenet::NetError),
    #[error(transparent)]
    Fit(#[from] fit::FitError),
    #[error(transparent)]
    Estimate(#[from] estimators::EstimateError),
    #[error(transparent)]
    Eval(#[from] evalkit::EvalError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

//! Preprocessed splat scene and pose-to-RGBA rendering shared by the CLI and the server.

use std::path::Path;
use std::time::{Duration, Instant};

use anyhow::{Context, Result};
use splatforge::estimators::{estimate, EstimatorConfig, EstimatorKind};
use splatforge::imagebuf::{unit_to_u8, Image};
use splatforge::pcio::{load_ply, PointCloud};
use splatforge::rasterizer::{relight, SplatSet};
use splatforge::sparsenet::{init_random, NetworkPlan, NetworkWeights};
use splatforge::{Camera, RenderMode, RenderOptions, Splat, Vec3};

use crate::protocol::{CameraPose, FrameMode};

pub const RELIGHT_AMBIENT: f64 = 0.2;
pub const RELIGHT_DIFFUSE: f64 = 0.8;
/// Seed of the random network used when no weights are given.
pub const FALLBACK_WEIGHTS_SEED: u64 = 0;

/// Network weights for `cfg`: loaded from `cfg.weights_path`, or random with
/// a warning on stderr when the neural estimator has no weights file.
pub fn resolve_weights(cfg: &EstimatorConfig) -> Result<Option<NetworkWeights>> {
    if cfg.kind != EstimatorKind::Neural {
        return Ok(None);
    }
    match &cfg.weights_path {
        Some(p) => Ok(Some(
            NetworkWeights::load(p).with_context(|| format!("loading weights {}", p.display()))?,
        )),
        None => {
            eprintln!(
                "warning: no --weights given for the neural estimator; using random weights (seed {FALLBACK_WEIGHTS_SEED})"
            );
            Ok(Some(init_random(&NetworkPlan::default(), FALLBACK_WEIGHTS_SEED)?))
        }
    }
}

/// Splats of one cloud, estimated once and rendered from any pose.
pub struct Scene {
    set: SplatSet,
    preprocess: Duration,
    cloud_center: Vec3,
    cloud_radius: f64,
}

/// RGBA8 output of one pose.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RenderedFrame {
    pub width: u32,
    pub height: u32,
    pub mode: FrameMode,
    pub rgba: Vec<u8>,
    pub render_time: Duration,
}

impl Scene {
    /// Runs the estimator; only the estimate itself counts as preprocessing.
    pub fn preprocess(cloud: &PointCloud, cfg: &EstimatorConfig, weights: Option<&NetworkWeights>) -> Result<Self> {
        cfg.validate()?;
        let start = Instant::now();
        let splats = estimate(cloud, cfg, weights)?;
        let preprocess = start.elapsed();
        let bbox = cloud.bbox();
        Ok(Self {
            set: SplatSet::new(splats),
            preprocess,
            cloud_center: bbox.center(),
            cloud_radius: 0.5 * bbox.extent().max(),
        })
    }

    pub fn load(input: &Path, cfg: &EstimatorConfig) -> Result<Self> {
        let cloud = load_ply(input).with_context(|| format!("reading {}", input.display()))?;
        let weights = resolve_weights(cfg)?;
        Self::preprocess(&cloud, cfg, weights.as_ref())
    }

    pub fn splats(&self) -> &[Splat] {
        self.set.splats()
    }

    pub fn preprocess_time(&self) -> Duration {
        self.preprocess
    }

    /// Center and half of the largest side of the source cloud's bounding box.
    pub fn bounds(&self) -> (Vec3, f64) {
        (self.cloud_center, self.cloud_radius)
    }

    pub fn render(&self, pose: &CameraPose, background: [f64; 3]) -> Result<RenderedFrame> {
        let cam = pose.camera()?;
        let start = Instant::now();
        let rgba = self.render_camera(&cam, pose.mode, pose.light_dir, background)?;
        Ok(RenderedFrame {
            width: pose.width,
            height: pose.height,
            mode: pose.mode,
            rgba,
            render_time: start.elapsed(),
        })
    }

    /// Relit frames default to a headlight along the viewing direction.
    pub fn render_camera(&self, cam: &Camera, mode: FrameMode, light_dir: Option<[f64; 3]>, background: [f64; 3]) -> Result<Vec<u8>> {
        let opts = RenderOptions::default();
        Ok(match mode {
            FrameMode::Rgb => self.set.render(cam, RenderMode::Rgb, background, &opts)?.to_rgba8(),
            FrameMode::Normal => {
                let fb = self.set.render(cam, RenderMode::Normal, background, &opts)?;
                rgba8(&fb.display_image(RenderMode::Normal)?, &fb.transmittance)
            }
            FrameMode::Relit => {
                let fb = self.set.render(cam, RenderMode::Normal, background, &opts)?;
                let light = light_dir.map_or(-cam.forward(), Vec3::from);
                rgba8(&relight(&fb, &fb, light, RELIGHT_AMBIENT, RELIGHT_DIFFUSE)?, &fb.transmittance)
            }
        })
    }
}

/// RGBA8 with alpha `(1 - T) · 255`.
pub fn rgba8(img: &Image, transmittance: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(img.data.len() * 4);
    for (px, t) in img.data.iter().zip(transmittance) {
        out.extend(px.iter().map(|&c| unit_to_u8(c)));
        out.push(unit_to_u8(1.0 - t));
    }
    out
}

#![allow(dead_code)]

use std::path::{Path, PathBuf};

use rendersvc::protocol::{CameraPose, FrameMode};
use splatforge::evalkit::{make_scene, SceneKind};
use splatforge::pcio::save_ply;
use splatforge::{Camera, Vec3};

pub const POINTS: usize = 3000;

/// Writes a small checker sphere as binary PLY.
pub fn sphere_ply(dir: &Path) -> PathBuf {
    let (cloud, _) = make_scene(SceneKind::CheckerSphere, POINTS, 4).unwrap();
    let path = dir.join("sphere.ply");
    save_ply(&cloud, &path, true).unwrap();
    path
}

pub fn pose(mode: FrameMode, width: usize, height: usize) -> CameraPose {
    let cam = Camera::look_at(Vec3::new(1.0, 0.8, 2.6), Vec3::zeros(), Vec3::y(), 1.2 * width as f64, width, height).unwrap();
    CameraPose::from_camera(&cam, mode, None)
}

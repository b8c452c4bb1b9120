//! Image quality metrics, synthetic scenes with analytic ground truth, and
//! the one-pixel point baseline used for hole comparisons.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Serialize, Serializer};

use crate::gaussians::{Camera, GaussianError, Z_NEAR};
use crate::imagebuf::Image;
use crate::pcio::{PcioError, Point, PointCloud};
use crate::rasterizer::FrameBuffer;
use crate::Vec3;

/// MS-SSIM per-scale weights, finest scale first.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Smallest image side that survives four dyadic downsamplings with an
/// 11-tap window.
pub const MS_SSIM_MIN_SIDE: usize = SSIM_WINDOW << 4;
/// Final transmittance above which a silhouette pixel counts as a hole.
pub const HOLE_TRANSMITTANCE: f64 = 0.5;
pub const MIN_SCENE_POINTS: usize = 100;

pub const SPHERE_RADIUS: f64 = 0.9;
pub const PLANE_HALF_SIZE: f64 = 0.9;
/// Edge length of the solid checker cells.
pub const CHECKER_CELL: f64 = 0.3;
pub const CHECKER_COLORS: [[f64; 3]; 2] = [[0.85, 0.55, 0.25], [0.25, 0.45, 0.75]];

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("{what}: {got_w}×{got_h} does not match {want_w}×{want_h}")]
    DimensionMismatch {
        what: &'static str,
        got_w: usize,
        got_h: usize,
        want_w: usize,
        want_h: usize,
    },
    #[error("MS-SSIM needs both sides ≥ {min} pixels, got {width}×{height}")]
    TooSmall { min: usize, width: usize, height: usize },
    #[error("mask has {got} entries, expected {expected}")]
    MaskSize { got: usize, expected: usize },
    #[error("scene needs at least {min} points, got {got}")]
    TooFewPoints { min: usize, got: usize },
    #[error(transparent)]
    Camera(#[from] GaussianError),
    #[error(transparent)]
    Cloud(#[from] PcioError),
}

type Result<T> = std::result::Result<T, EvalError>;

fn check_same(what: &'static str, a: &Image, b: &Image) -> Result<()> {
    if a.same_size(b) {
        Ok(())
    } else {
        Err(EvalError::DimensionMismatch {
            what,
            got_w: b.width,
            got_h: b.height,
            want_w: a.width,
            want_h: a.height,
        })
    }
}

/// `10·log10(1 / MSE)` over all pixels and channels; identical images give
/// `f64::INFINITY`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    check_same("psnr", a, b)?;
    let sum: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(p, q)| (0..3).map(|c| (p[c] - q[c]).powi(2)).sum::<f64>())
        .sum();
    let mse = sum / (3 * a.data.len()).max(1) as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

/// Normalized 1D Gaussian window.
pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

struct Plane {
    w: usize,
    h: usize,
    v: Vec<f64>,
}

impl Plane {
    fn channel(img: &Image, c: usize) -> Self {
        Self {
            w: img.width,
            h: img.height,
            v: img.data.iter().map(|p| p[c]).collect(),
        }
    }

    fn map2(&self, o: &Plane, f: impl Fn(f64, f64) -> f64) -> Plane {
        Plane {
            w: self.w,
            h: self.h,
            v: self.v.iter().zip(&o.v).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    /// Separable "valid" filtering with the Gaussian window.
    fn filter(&self, win: &[f64; SSIM_WINDOW]) -> Plane {
        let k = SSIM_WINDOW;
        let ow = self.w + 1 - k;
        let oh = self.h + 1 - k;
        let mut rows = vec![0.0; ow * self.h];
        for y in 0..self.h {
            let src = &self.v[y * self.w..(y + 1) * self.w];
            for x in 0..ow {
                rows[y * ow + x] = (0..k).map(|i| win[i] * src[x + i]).sum();
            }
        }
        let mut out = vec![0.0; ow * oh];
        for y in 0..oh {
            for x in 0..ow {
                out[y * ow + x] = (0..k).map(|i| win[i] * rows[(y + i) * ow + x]).sum();
            }
        }
        Plane { w: ow, h: oh, v: out }
    }

    /// 2×2 box average; an odd trailing row or column is dropped.
    fn downsample(&self) -> Plane {
        let w = self.w / 2;
        let h = self.h / 2;
        let mut v = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let i = 2 * y * self.w + 2 * x;
                v[y * w + x] = 0.25 * (self.v[i] + self.v[i + 1] + self.v[i + self.w] + self.v[i + self.w + 1]);
            }
        }
        Plane { w, h, v }
    }
}

/// Mean luminance-contrast-structure and contrast-structure terms of SSIM on
/// one single-channel scale.
fn ssim_terms(x: &Plane, y: &Plane, win: &[f64; SSIM_WINDOW]) -> (f64, f64) {
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mx = x.filter(win);
    let my = y.filter(win);
    let xx = x.map2(x, |a, b| a * b).filter(win);
    let yy = y.map2(y, |a, b| a * b).filter(win);
    let xy = x.map2(y, |a, b| a * b).filter(win);
    let n = mx.v.len() as f64;
    let (mut full, mut cs) = (0.0, 0.0);
    for i in 0..mx.v.len() {
        let (ux, uy) = (mx.v[i], my.v[i]);
        let sx = xx.v[i] - ux * ux;
        let sy = yy.v[i] - uy * uy;
        let sxy = xy.v[i] - ux * uy;
        let c = (2.0 * sxy + c2) / (sx + sy + c2);
        let l = (2.0 * ux * uy + c1) / (ux * ux + uy * uy + c1);
        cs += c;
        full += l * c;
    }
    (full / n, cs / n)
}

/// Five-scale structural similarity, computed per channel and averaged.
/// Negative per-scale terms are clamped to zero before weighting.
pub fn ms_ssim(a: &Image, b: &Image) -> Result<f64> {
    check_same("ms_ssim", a, b)?;
    if a.width.min(a.height) < MS_SSIM_MIN_SIDE {
        return Err(EvalError::TooSmall {
            min: MS_SSIM_MIN_SIDE,
            width: a.width,
            height: a.height,
        });
    }
    let win = gaussian_window();
    let per_channel: Vec<f64> = (0..3)
        .into_par_iter()
        .map(|c| {
            let mut x = Plane::channel(a, c);
            let mut y = Plane::channel(b, c);
            let mut value = 1.0;
            for (scale, &w) in MS_SSIM_WEIGHTS.iter().enumerate() {
                let (full, cs) = ssim_terms(&x, &y, &win);
                let term = if scale + 1 == MS_SSIM_WEIGHTS.len() { full } else { cs };
                value *= term.max(0.0).powf(w);
                x = x.downsample();
                y = y.downsample();
            }
            value
        })
        .collect();
    Ok((per_channel.iter().sum::<f64>() / 3.0).clamp(0.0, 1.0))
}

/// Fraction of silhouette pixels whose final transmittance exceeds
/// [`HOLE_TRANSMITTANCE`]; zero for an empty silhouette.
pub fn hole_ratio(fb: &FrameBuffer, silhouette: &[bool]) -> Result<f64> {
    if silhouette.len() != fb.transmittance.len() {
        return Err(EvalError::MaskSize {
            got: silhouette.len(),
            expected: fb.transmittance.len(),
        });
    }
    let inside = silhouette.iter().filter(|&&m| m).count();
    if inside == 0 {
        return Ok(0.0);
    }
    let holes = silhouette
        .iter()
        .zip(&fb.transmittance)
        .filter(|(&m, &t)| m && t > HOLE_TRANSMITTANCE)
        .count();
    Ok(holes as f64 / inside as f64)
}

fn serialize_psnr<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MsSsimConstants {
    pub weights: [f64; 5],
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for MsSsimConstants {
    fn default() -> Self {
        Self {
            weights: MS_SSIM_WEIGHTS,
            window: SSIM_WINDOW,
            sigma: SSIM_SIGMA,
            k1: SSIM_K1,
            k2: SSIM_K2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportMetadata {
    pub width: usize,
    pub height: usize,
    pub background: [f64; 3],
    pub estimator: String,
    /// Pixels the PSNR is averaged over.
    pub psnr_region: &'static str,
    pub ms_ssim: MsSsimConstants,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    /// `"inf"` in JSON when the images are identical.
    #[serde(serialize_with = "serialize_psnr")]
    pub psnr_db: f64,
    pub ms_ssim: f64,
    pub hole_ratio: f64,
    pub metadata: ReportMetadata,
}

impl MetricReport {
    /// Compares a render against analytic ground truth of the same view.
    pub fn evaluate(fb: &FrameBuffer, truth: &GroundTruth, estimator: &str) -> Result<Self> {
        Ok(Self {
            psnr_db: psnr(&truth.rgb, &fb.rgb)?,
            ms_ssim: ms_ssim(&truth.rgb, &fb.rgb)?,
            hole_ratio: hole_ratio(fb, &truth.silhouette)?,
            metadata: ReportMetadata {
                width: fb.width,
                height: fb.height,
                background: fb.background,
                estimator: estimator.to_string(),
                psnr_region: "full_frame",
                ms_ssim: MsSsimConstants::default(),
            },
        })
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metric report serializes")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    CheckerSphere,
    CheckerPlane,
    TwoBox,
}

impl std::str::FromStr for SceneKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "checker_sphere" => Ok(SceneKind::CheckerSphere),
            "checker_plane" => Ok(SceneKind::CheckerPlane),
            "two_box" => Ok(SceneKind::TwoBox),
            other => Err(format!(
                "unknown scene {other:?} (expected checker_sphere, checker_plane or two_box)"
            )),
        }
    }
}

/// Axis-aligned box given by its corners.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxShape {
    pub min: Vec3,
    pub max: Vec3,
}

pub const TWO_BOXES: [BoxShape; 2] = [
    BoxShape {
        min: Vec3::new(-0.8, -0.5, -0.5),
        max: Vec3::new(-0.05, 0.25, 0.25),
    },
    BoxShape {
        min: Vec3::new(0.05, -0.5, -0.3),
        max: Vec3::new(0.75, 0.1, 0.4),
    },
];

/// Solid checker texture shared by every scene.
pub fn checker_color(p: &Vec3) -> Vec3 {
    let parity = (p / CHECKER_CELL).map(f64::floor).sum().rem_euclid(2.0) as usize;
    Vec3::from(CHECKER_COLORS[parity])
}

/// Exact RGB, normal and silhouette images of an analytic scene.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub rgb: Image,
    /// Unit surface normals; zero where the ray misses.
    pub normal: Image,
    pub silhouette: Vec<bool>,
}

/// The analytic surface behind a synthetic scene.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneReference {
    pub kind: SceneKind,
}

impl SceneReference {
    /// Nearest positive ray hit: `(t, outward normal)`.
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, Vec3)> {
        match self.kind {
            SceneKind::CheckerSphere => {
                let b = origin.dot(dir);
                let c = origin.norm_squared() - SPHERE_RADIUS * SPHERE_RADIUS;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                let t = if -b - s > 0.0 { -b - s } else { -b + s };
                (t > 0.0).then(|| (t, (origin + dir * t) / SPHERE_RADIUS))
            }
            SceneKind::CheckerPlane => {
                if dir.z == 0.0 {
                    return None;
                }
                let t = -origin.z / dir.z;
                let p = origin + dir * t;
                (t > 0.0 && p.x.abs() <= PLANE_HALF_SIZE && p.y.abs() <= PLANE_HALF_SIZE).then(|| (t, Vec3::z()))
            }
            SceneKind::TwoBox => TWO_BOXES
                .iter()
                .filter_map(|b| intersect_box(b, origin, dir))
                .min_by(|a, b| a.0.total_cmp(&b.0)),
        }
    }

    /// Casts one ray through every pixel center.
    pub fn render(&self, cam: &Camera, background: [f64; 3]) -> GroundTruth {
        self.render_supersampled(cam, background, 1)
    }

    /// Like [`render`](Self::render), but RGB is the box-filtered average of
    /// `samples × samples` rays per pixel. Normals and the silhouette stay
    /// point-sampled at the pixel center.
    pub fn render_supersampled(&self, cam: &Camera, background: [f64; 3], samples: usize) -> GroundTruth {
        let (w, h) = (cam.width, cam.height);
        let s = samples.max(1);
        let bg = Vec3::from(background);
        let shaded: Vec<([f64; 3], Option<Vec3>)> = (0..w * h)
            .into_par_iter()
            .map(|i| {
                let (x, y) = ((i % w) as f64, (i / w) as f64);
                let (o, d) = cam.ray(x + 0.5, y + 0.5);
                let center = self.intersect(&o, &d);
                let color = if s == 1 {
                    center.map_or(bg, |(t, _)| checker_color(&(o + d * t)))
                } else {
                    let mut acc = Vec3::zeros();
                    for sy in 0..s {
                        for sx in 0..s {
                            let (o, d) = cam.ray(x + (sx as f64 + 0.5) / s as f64, y + (sy as f64 + 0.5) / s as f64);
                            acc += self.intersect(&o, &d).map_or(bg, |(t, _)| checker_color(&(o + d * t)));
                        }
                    }
                    acc / (s * s) as f64
                };
                (color.into(), center.map(|(_, n)| n))
            })
            .collect();
        let mut rgb = Image::new(w, h, background);
        let mut normal = Image::new(w, h, [0.0; 3]);
        let mut silhouette = vec![false; w * h];
        for (i, (c, n)) in shaded.into_iter().enumerate() {
            rgb.data[i] = c;
            if let Some(n) = n {
                normal.data[i] = n.into();
                silhouette[i] = true;
            }
        }
        GroundTruth { rgb, normal, silhouette }
    }

    /// Center and radius of a sphere enclosing the scene.
    pub fn bounds(&self) -> (Vec3, f64) {
        match self.kind {
            SceneKind::CheckerSphere => (Vec3::zeros(), SPHERE_RADIUS),
            SceneKind::CheckerPlane => (Vec3::zeros(), PLANE_HALF_SIZE * 2f64.sqrt()),
            SceneKind::TwoBox => {
                let lo = TWO_BOXES[0].min.inf(&TWO_BOXES[1].min);
                let hi = TWO_BOXES[0].max.sup(&TWO_BOXES[1].max);
                ((lo + hi) / 2.0, (hi - lo).norm() / 2.0)
            }
        }
    }
}

fn intersect_box(b: &BoxShape, o: &Vec3, d: &Vec3) -> Option<(f64, Vec3)> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    let mut near_axis = 0;
    let mut near_sign = 0.0;
    let mut far_axis = 0;
    let mut far_sign = 0.0;
    for a in 0..3 {
        if d[a] == 0.0 {
            if o[a] < b.min[a] || o[a] > b.max[a] {
                return None;
            }
            continue;
        }
        let (t0, t1) = ((b.min[a] - o[a]) / d[a], (b.max[a] - o[a]) / d[a]);
        let (lo, hi, sign) = if t0 < t1 { (t0, t1, -1.0) } else { (t1, t0, 1.0) };
        if lo > t_near {
            t_near = lo;
            near_axis = a;
            near_sign = sign;
        }
        if hi < t_far {
            t_far = hi;
            far_axis = a;
            far_sign = -sign;
        }
    }
    if t_near > t_far || t_far <= 0.0 {
        return None;
    }
    let (t, axis, sign) = if t_near > 0.0 {
        (t_near, near_axis, near_sign)
    } else {
        (t_far, far_axis, far_sign)
    };
    let mut n = Vec3::zeros();
    n[axis] = sign;
    Some((t, n))
}

fn box_faces(b: &BoxShape) -> [(usize, f64, f64); 6] {
    let e = b.max - b.min;
    let area = |a: usize| e[(a + 1) % 3] * e[(a + 2) % 3];
    [
        (0, -1.0, area(0)),
        (0, 1.0, area(0)),
        (1, -1.0, area(1)),
        (1, 1.0, area(1)),
        (2, -1.0, area(2)),
        (2, 1.0, area(2)),
    ]
}

fn sample_surface(kind: SceneKind, rng: &mut ChaCha8Rng) -> (Vec3, Vec3) {
    match kind {
        SceneKind::CheckerSphere => {
            let z: f64 = rng.gen_range(-1.0..=1.0);
            let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let r = (1.0 - z * z).max(0.0).sqrt();
            let n = Vec3::new(r * phi.cos(), r * phi.sin(), z).normalize();
            (n * SPHERE_RADIUS, n)
        }
        SceneKind::CheckerPlane => (
            Vec3::new(
                rng.gen_range(-PLANE_HALF_SIZE..=PLANE_HALF_SIZE),
                rng.gen_range(-PLANE_HALF_SIZE..=PLANE_HALF_SIZE),
                0.0,
            ),
            Vec3::z(),
        ),
        SceneKind::TwoBox => {
            let faces: Vec<(usize, usize, f64, f64)> = TWO_BOXES
                .iter()
                .enumerate()
                .flat_map(|(bi, b)| box_faces(b).into_iter().map(move |(a, s, area)| (bi, a, s, area)))
                .collect();
            let total: f64 = faces.iter().map(|f| f.3).sum();
            let mut pick = rng.gen_range(0.0..total);
            let mut chosen = faces[faces.len() - 1];
            for f in &faces {
                if pick < f.3 {
                    chosen = *f;
                    break;
                }
                pick -= f.3;
            }
            let (bi, axis, sign, _) = chosen;
            let b = &TWO_BOXES[bi];
            let mut p = Vec3::zeros();
            for a in 0..3 {
                p[a] = if a == axis {
                    if sign < 0.0 {
                        b.min[a]
                    } else {
                        b.max[a]
                    }
                } else {
                    rng.gen_range(b.min[a]..=b.max[a])
                };
            }
            let mut n = Vec3::zeros();
            n[axis] = sign;
            (p, n)
        }
    }
}

/// Seeded uniform surface sampling with checker colors and analytic normals.
pub fn make_scene(kind: SceneKind, n_points: usize, seed: u64) -> Result<(PointCloud, SceneReference)> {
    if n_points < MIN_SCENE_POINTS {
        return Err(EvalError::TooFewPoints {
            min: MIN_SCENE_POINTS,
            got: n_points,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = (0..n_points)
        .map(|_| {
            let (p, n) = sample_surface(kind, &mut rng);
            Point::new(p, checker_color(&p)).with_normal(n)
        })
        .collect();
    Ok((PointCloud::new(points)?, SceneReference { kind }))
}

/// Z-buffered one-pixel points: each point covers the pixel its center
/// projects into, the nearest point wins and ties keep the lower index.
pub fn render_1px_points(cloud: &PointCloud, cam: &Camera, background: [f64; 3]) -> FrameBuffer {
    let (w, h) = (cam.width, cam.height);
    let mut zbuf = vec![f64::INFINITY; w * h];
    let mut rgb = Image::new(w, h, background);
    let mut transmittance = vec![1.0; w * h];
    for p in cloud.points() {
        let pc = cam.to_camera(&p.position);
        if pc.z <= Z_NEAR {
            continue;
        }
        let [u, v] = cam.project_point(&pc);
        let (x, y) = (u.floor(), v.floor());
        if !(x >= 0.0 && y >= 0.0 && x < w as f64 && y < h as f64) {
            continue;
        }
        let i = y as usize * w + x as usize;
        if pc.z < zbuf[i] {
            zbuf[i] = pc.z;
            rgb.data[i] = p.color.into();
            transmittance[i] = 0.0;
        }
    }
    FrameBuffer {
        width: w,
        height: h,
        rgb,
        transmittance,
        normal: None,
        depth: None,
        background,
    }
}

/// `n` cameras evenly spaced on a horizontal circle around `center`, all
/// looking at it with +y up.
pub fn circle_cameras(
    center: Vec3,
    radius: f64,
    n: usize,
    focal: f64,
    width: usize,
    height: usize,
) -> Result<Vec<Camera>> {
    (0..n)
        .map(|i| {
            let th = std::f64::consts::TAU * i as f64 / n as f64;
            let eye = center + Vec3::new(radius * th.sin(), 0.0, radius * th.cos());
            Ok(Camera::look_at(eye, center, Vec3::y(), focal, width, height)?)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussians::Splat;
    use crate::rasterizer::{render_with, RenderMode, RenderOptions};

    fn noise_image(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(w, h, |_, _| [rng.gen(), rng.gen(), rng.gen()])
    }

    #[test]
    fn psnr_identical_is_infinite() {
        let a = noise_image(8, 8, 1);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
    }

    #[test]
    fn psnr_constant_offset() {
        let a = Image::new(10, 7, [0.2, 0.4, 0.6]);
        let d = 5.0 / 255.0;
        let b = Image::new(10, 7, [0.2 + d, 0.4 - d, 0.6 + d]);
        let want = 20.0 * (255.0f64 / 5.0).log10();
        assert!((psnr(&a, &b).unwrap() - want).abs() < 1e-9);
        assert!((want - 34.15).abs() < 0.01);
    }

    #[test]
    fn psnr_symmetric_and_checks_size() {
        let a = noise_image(9, 9, 2);
        let b = noise_image(9, 9, 3);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        assert!(matches!(
            psnr(&a, &noise_image(9, 8, 3)),
            Err(EvalError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let base = Image::new(32, 32, [0.5; 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pattern: Vec<[f64; 3]> = (0..32 * 32)
            .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            .collect();
        let mut last = f64::INFINITY;
        for step in 1..=10 {
            let amp = 0.05 * step as f64;
            let noisy = Image {
                width: 32,
                height: 32,
                data: pattern.iter().map(|n| n.map(|v| 0.5 + amp * v)).collect(),
            };
            let p = psnr(&base, &noisy).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    /// Direct 2D windowed SSIM terms without separability.
    fn naive_ms_ssim(a: &Image, b: &Image) -> f64 {
        let g = gaussian_window();
        let k = SSIM_WINDOW;
        let mut total = 0.0;
        for c in 0..3 {
            let mut x: Vec<Vec<f64>> = (0..a.height).map(|r| (0..a.width).map(|q| a.get(q, r)[c]).collect()).collect();
            let mut y: Vec<Vec<f64>> = (0..b.height).map(|r| (0..b.width).map(|q| b.get(q, r)[c]).collect()).collect();
            let mut value = 1.0;
            for s in 0..5 {
                let (h, w) = (x.len(), x[0].len());
                let (mut full, mut cs, mut n) = (0.0, 0.0, 0.0);
                for r in 0..=h - k {
                    for q in 0..=w - k {
                        let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                        for i in 0..k {
                            for j in 0..k {
                                let wt = g[i] * g[j];
                                let (u, v) = (x[r + i][q + j], y[r + i][q + j]);
                                mx += wt * u;
                                my += wt * v;
                                sxx += wt * u * u;
                                syy += wt * v * v;
                                sxy += wt * u * v;
                            }
                        }
                        let (vx, vy, cxy) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                        let c2 = SSIM_K2 * SSIM_K2;
                        let c1 = SSIM_K1 * SSIM_K1;
                        let csv = (2.0 * cxy + c2) / (vx + vy + c2);
                        cs += csv;
                        full += csv * (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
                        n += 1.0;
                    }
                }
                let term = if s == 4 { full / n } else { cs / n };
                value *= term.max(0.0).powf(MS_SSIM_WEIGHTS[s]);
                let half = |m: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
                    (0..m.len() / 2)
                        .map(|r| {
                            (0..m[0].len() / 2)
                                .map(|q| {
                                    0.25 * (m[2 * r][2 * q] + m[2 * r][2 * q + 1] + m[2 * r + 1][2 * q] + m[2 * r + 1][2 * q + 1])
                                })
                                .collect()
                        })
                        .collect()
                };
                x = half(&x);
                y = half(&y);
            }
            total += value;
        }
        total / 3.0
    }

    fn smooth_pattern(w: usize, h: usize, phase: f64) -> Image {
        Image::from_fn(w, h, |x, y| {
            let (fx, fy) = (x as f64 / 9.0, y as f64 / 13.0);
            [
                0.5 + 0.4 * (fx + phase).sin(),
                0.5 + 0.4 * (fy - phase).cos(),
                0.5 + 0.3 * (fx + fy).sin(),
            ]
        })
    }

    #[test]
    fn ms_ssim_matches_naive_oracle() {
        let a = smooth_pattern(180, 177, 0.0);
        let mut b = smooth_pattern(180, 177, 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for p in &mut b.data {
            for c in p.iter_mut() {
                *c = (*c + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0);
            }
        }
        let fast = ms_ssim(&a, &b).unwrap();
        let slow = naive_ms_ssim(&a, &b);
        assert!((fast - slow).abs() < 1e-9, "{fast} vs {slow}");
        assert!(fast > 0.0 && fast < 1.0);
    }

    #[test]
    fn ms_ssim_identity_symmetry_inversion() {
        let a = noise_image(176, 190, 6);
        let b = noise_image(176, 190, 7);
        assert!((ms_ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        assert!((ms_ssim(&a, &b).unwrap() - ms_ssim(&b, &a).unwrap()).abs() < 1e-9);
        let checker = Image::from_fn(192, 192, |x, y| if (x / 8 + y / 8) % 2 == 0 { [0.9; 3] } else { [0.1; 3] });
        let inverted = Image {
            width: 192,
            height: 192,
            data: checker.data.iter().map(|p| p.map(|v| 1.0 - v)).collect(),
        };
        let inv = ms_ssim(&checker, &inverted).unwrap();
        assert!(inv < 0.5, "{inv}");
        assert!((inv - naive_ms_ssim(&checker, &inverted)).abs() < 1e-9);
    }

    #[test]
    fn ms_ssim_rejects_small_images() {
        let a = noise_image(175, 300, 1);
        let err = ms_ssim(&a, &a).unwrap_err();
        assert!(err.to_string().contains("176"));
    }

    fn frame(transmittance: Vec<f64>, w: usize, h: usize) -> FrameBuffer {
        FrameBuffer {
            width: w,
            height: h,
            rgb: Image::new(w, h, [0.0; 3]),
            transmittance,
            normal: None,
            depth: None,
            background: [0.0; 3],
        }
    }

    #[test]
    fn hole_ratio_cases() {
        let cam = Camera::look_at(Vec3::new(0.0, 0.0, -3.0), Vec3::zeros(), Vec3::y(), 40.0, 32, 32).unwrap();
        let big = Splat::isotropic(Vec3::zeros(), 0.6, 1.0, Vec3::new(1.0, 0.0, 0.0));
        let fb = render_with(&[big], &cam, RenderMode::Rgb, [0.0; 3], &RenderOptions::default()).unwrap();
        let disk: Vec<bool> = (0..32 * 32)
            .map(|i| {
                let (x, y) = ((i % 32) as f64 + 0.5 - 16.0, (i / 32) as f64 + 0.5 - 16.0);
                x * x + y * y < 25.0
            })
            .collect();
        assert_eq!(hole_ratio(&fb, &disk).unwrap(), 0.0);
        let empty = frame(vec![1.0; 32 * 32], 32, 32);
        assert_eq!(hole_ratio(&empty, &disk).unwrap(), 1.0);
        assert_eq!(hole_ratio(&empty, &vec![false; 32 * 32]).unwrap(), 0.0);
        assert!(matches!(hole_ratio(&empty, &disk[1..]), Err(EvalError::MaskSize { .. })));
        let half = frame((0..4).map(|i| if i < 2 { 0.6 } else { 0.5 }).collect(), 2, 2);
        assert_eq!(hole_ratio(&half, &[true; 4]).unwrap(), 0.5);
    }

    #[test]
    fn sphere_points_on_surface() {
        let (cloud, _) = make_scene(SceneKind::CheckerSphere, 2000, 9).unwrap();
        for p in cloud.points() {
            assert!((p.position.norm() - SPHERE_RADIUS).abs() < 1e-9);
            let n = p.normal.unwrap();
            assert!((n.norm() - 1.0).abs() < 1e-12);
            assert!(n.dot(&p.position) > 0.0);
        }
    }

    #[test]
    fn box_and_plane_points_on_surface() {
        let (cloud, reference) = make_scene(SceneKind::TwoBox, 3000, 10).unwrap();
        for p in cloud.points() {
            let n = p.normal.unwrap();
            let on_face = TWO_BOXES.iter().any(|b| {
                (0..3).all(|a| p.position[a] >= b.min[a] - 1e-12 && p.position[a] <= b.max[a] + 1e-12)
                    && (0..3).any(|a| {
                        (n[a] == 1.0 && p.position[a] == b.max[a]) || (n[a] == -1.0 && p.position[a] == b.min[a])
                    })
            });
            assert!(on_face, "{:?}", p.position);
            let o = p.position + n * 5.0;
            let (t, hit_n) = reference.intersect(&o, &-n).expect("outward ray hits its own face");
            if (t - 5.0).abs() < 1e-9 {
                assert_eq!(hit_n, n);
            }
        }
        let (plane, _) = make_scene(SceneKind::CheckerPlane, 500, 11).unwrap();
        assert!(plane.points().iter().all(|p| p.position.z == 0.0 && p.normal == Some(Vec3::z())));
    }

    #[test]
    fn scenes_are_seed_deterministic() {
        for kind in [SceneKind::CheckerSphere, SceneKind::CheckerPlane, SceneKind::TwoBox] {
            let a = make_scene(kind, 500, 3).unwrap().0;
            let b = make_scene(kind, 500, 3).unwrap().0;
            let c = make_scene(kind, 500, 4).unwrap().0;
            assert_eq!(a.points(), b.points());
            assert_ne!(a.points(), c.points());
        }
        assert!(matches!(
            make_scene(SceneKind::CheckerSphere, 99, 0),
            Err(EvalError::TooFewPoints { .. })
        ));
    }

    #[test]
    fn sphere_silhouette_is_the_projected_disk() {
        let reference = SceneReference {
            kind: SceneKind::CheckerSphere,
        };
        let dist = 3.0;
        let f = 100.0;
        let cam = Camera::look_at(Vec3::new(0.0, 0.0, dist), Vec3::zeros(), Vec3::y(), f, 96, 80).unwrap();
        let truth = reference.render(&cam, [0.0; 3]);
        let r_px = f * SPHERE_RADIUS / (dist * dist - SPHERE_RADIUS * SPHERE_RADIUS).sqrt();
        let mut inside = 0;
        for y in 0..80 {
            for x in 0..96 {
                let (dx, dy) = (x as f64 + 0.5 - 48.0, y as f64 + 0.5 - 40.0);
                let rho = (dx * dx + dy * dy).sqrt();
                if (rho - r_px).abs() < 1e-6 {
                    continue;
                }
                let m = truth.silhouette[y * 96 + x];
                assert_eq!(m, rho < r_px, "pixel {x},{y}");
                inside += m as usize;
                if m {
                    let n = Vec3::from(truth.normal.get(x, y));
                    assert!((n.norm() - 1.0).abs() < 1e-12);
                    assert!(n.z > 0.0);
                } else {
                    assert_eq!(truth.normal.get(x, y), [0.0; 3]);
                }
            }
        }
        assert!(inside > 0);
        assert_eq!(truth, reference.render(&cam, [0.0; 3]));
        let smooth = reference.render_supersampled(&cam, [0.0; 3], 4);
        assert_eq!(smooth.silhouette, truth.silhouette);
        assert_eq!(smooth.normal, truth.normal);
        let flat = |p: [f64; 3]| CHECKER_COLORS.contains(&p) || p == [0.0; 3];
        assert!(smooth.rgb.data.iter().any(|&p| !flat(p)));
        assert!(truth.rgb.data.iter().all(|&p| flat(p)));
    }

    #[test]
    fn one_pixel_points() {
        let cam = Camera::look_at(Vec3::new(0.0, 0.0, -4.0), Vec3::zeros(), Vec3::y(), 50.0, 33, 33).unwrap();
        let single = PointCloud::new(vec![Point::new(Vec3::zeros(), Vec3::new(1.0, 0.0, 0.0))]).unwrap();
        let fb = render_1px_points(&single, &cam, [0.0; 3]);
        let lit: Vec<usize> = (0..33 * 33).filter(|&i| fb.transmittance[i] == 0.0).collect();
        assert_eq!(lit, vec![16 * 33 + 16]);
        assert_eq!(fb.rgb.data[16 * 33 + 16], [1.0, 0.0, 0.0]);

        let two = PointCloud::new(vec![
            Point::new(Vec3::new(0.0, 0.0, 1.0), Vec3::new(0.0, 0.0, 1.0)),
            Point::new(Vec3::new(0.0, 0.0, -1.0), Vec3::new(0.0, 1.0, 0.0)),
        ])
        .unwrap();
        let fb = render_1px_points(&two, &cam, [0.0; 3]);
        assert_eq!(fb.rgb.data[16 * 33 + 16], [0.0, 1.0, 0.0]);

        let (cloud, _) = make_scene(SceneKind::CheckerSphere, 5000, 1).unwrap();
        let fb = render_1px_points(&cloud, &cam, [0.0; 3]);
        let lit = fb.transmittance.iter().filter(|&&t| t == 0.0).count();
        assert!(lit <= cloud.len() && lit > 0);
    }

    #[test]
    fn circle_cameras_are_equidistant() {
        let c = Vec3::new(0.1, -0.2, 0.3);
        let cams = circle_cameras(c, 3.0, 12, 500.0, 512, 512).unwrap();
        assert_eq!(cams.len(), 12);
        for cam in &cams {
            assert!(((cam.position() - c).norm() - 3.0).abs() < 1e-6);
            assert!((cam.forward() - (c - cam.position()).normalize()).norm() < 1e-12);
        }
    }

    #[test]
    fn report_json() {
        let fb = frame(vec![0.0; 176 * 176], 176, 176);
        let truth = GroundTruth {
            rgb: Image::new(176, 176, [0.0; 3]),
            normal: Image::new(176, 176, [0.0; 3]),
            silhouette: vec![true; 176 * 176],
        };
        let r = MetricReport::evaluate(&fb, &truth, "pca").unwrap();
        let v: serde_json::Value = serde_json::from_str(&r.to_json_line()).unwrap();
        assert_eq!(v["psnr_db"], "inf");
        assert_eq!(v["ms_ssim"], 1.0);
        assert_eq!(v["hole_ratio"], 0.0);
        assert_eq!(v["metadata"]["estimator"], "pca");
        assert_eq!(v["metadata"]["psnr_region"], "full_frame");
        assert_eq!(v["metadata"]["ms_ssim"]["window"], 11);
    }
}

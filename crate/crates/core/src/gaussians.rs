//! The 3D Gaussian primitive, the pinhole camera and first-order (EWA)
//! projection of Gaussians to screen space.
//!
//! Conventions: points are column vectors and camera space is
//! `p_cam = T · p + t` with x right, y down and z forward. Pixel `(i, j)`
//! has its center at `(i + 0.5, j + 0.5)`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix2, Matrix2x3};

use crate::{Mat3, Vec3};

/// Added to the screen covariance diagonal, in px².
pub const SCREEN_DILATION: f64 = 0.3;
/// Upper clamp for per-splat alpha.
pub const ALPHA_MAX: f64 = 0.99;
/// Splats at or in front of this camera-space depth are culled.
pub const Z_NEAR: f64 = 0.01;
/// Splat footprints end at three standard deviations.
pub const EXTENT_SIGMAS: f64 = 3.0;

pub const SPLAT_CACHE_MAGIC: &[u8; 4] = b"SPL1";

#[derive(Debug, thiserror::Error)]
pub enum GaussianError {
    #[error("quaternion has zero norm")]
    ZeroQuaternion,
    #[error("invalid splat {index}: {reason}")]
    InvalidSplat { index: usize, reason: String },
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a splat cache (bad magic)")]
    BadMagic,
    #[error("splat cache truncated: expected {expected} splats")]
    Truncated { expected: usize },
}

type Result<T> = std::result::Result<T, GaussianError>;

/// Hamilton product of `(w, x, y, z)` quaternions.
pub fn quat_mul(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
    let [aw, ax, ay, az] = a;
    let [bw, bx, by, bz] = b;
    [
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ]
}

pub fn quat_normalize(q: [f64; 4]) -> Result<[f64; 4]> {
    let n = q.iter().map(|c| c * c).sum::<f64>().sqrt();
    if !(n > 0.0) || !n.is_finite() {
        return Err(GaussianError::ZeroQuaternion);
    }
    Ok(q.map(|c| c / n))
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn quat_to_rotation(q: [f64; 4]) -> Mat3 {
    let [w, x, y, z] = q;
    Mat3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Unit quaternion of a proper rotation matrix (Shepperd's method).
pub fn rotation_to_quat(r: &Mat3) -> [f64; 4] {
    let tr = r[(0, 0)] + r[(1, 1)] + r[(2, 2)];
    let q = if tr > 0.0 {
        let s = (tr + 1.0).sqrt() * 2.0;
        [
            0.25 * s,
            (r[(2, 1)] - r[(1, 2)]) / s,
            (r[(0, 2)] - r[(2, 0)]) / s,
            (r[(1, 0)] - r[(0, 1)]) / s,
        ]
    } else if r[(0, 0)] > r[(1, 1)] && r[(0, 0)] > r[(2, 2)] {
        let s = (1.0 + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]).sqrt() * 2.0;
        [
            (r[(2, 1)] - r[(1, 2)]) / s,
            0.25 * s,
            (r[(0, 1)] + r[(1, 0)]) / s,
            (r[(0, 2)] + r[(2, 0)]) / s,
        ]
    } else if r[(1, 1)] > r[(2, 2)] {
        let s = (1.0 + r[(1, 1)] - r[(0, 0)] - r[(2, 2)]).sqrt() * 2.0;
        [
            (r[(0, 2)] - r[(2, 0)]) / s,
            (r[(0, 1)] + r[(1, 0)]) / s,
            0.25 * s,
            (r[(1, 2)] + r[(2, 1)]) / s,
        ]
    } else {
        let s = (1.0 + r[(2, 2)] - r[(0, 0)] - r[(1, 1)]).sqrt() * 2.0;
        [
            (r[(1, 0)] - r[(0, 1)]) / s,
            (r[(0, 2)] + r[(2, 0)]) / s,
            (r[(1, 2)] + r[(2, 1)]) / s,
            0.25 * s,
        ]
    };
    quat_normalize(q).expect("rotation matrix yields a nonzero quaternion")
}

/// `Σ = Rᵀ · diag(σ²) · R` with `R` the rotation of the normalized quaternion.
///
/// Computed as `Σ_i σ_i² r_i r_iᵀ` over the rows `r_i` of `R`, so the result
/// is exactly symmetric.
pub fn assemble_covariance(quaternion: [f64; 4], scales: Vec3) -> Result<Mat3> {
    let r = quat_to_rotation(quat_normalize(quaternion)?);
    Ok(covariance_from_rotation(&r, &scales))
}

pub(crate) fn covariance_from_rotation(r: &Mat3, scales: &Vec3) -> Mat3 {
    let mut cov = Mat3::zeros();
    for i in 0..3 {
        let s2 = scales[i] * scales[i];
        for a in 0..3 {
            for b in 0..3 {
                cov[(a, b)] += s2 * (r[(i, a)] * r[(i, b)]);
            }
        }
    }
    cov
}

/// One elliptical Gaussian primitive.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Splat {
    /// World-space center (source point plus estimated offset).
    pub center: Vec3,
    /// Standard deviations along the three principal axes, world units.
    pub scales: Vec3,
    /// `(w, x, y, z)`, unit norm. The principal axes are the rows of its rotation matrix.
    pub quaternion: [f64; 4],
    pub opacity: f64,
    pub color: Vec3,
    pub normal: Vec3,
}

impl Splat {
    pub fn isotropic(center: Vec3, sigma: f64, opacity: f64, color: Vec3) -> Self {
        Self {
            center,
            scales: Vec3::repeat(sigma),
            quaternion: [1.0, 0.0, 0.0, 0.0],
            opacity,
            color,
            normal: Vec3::z(),
        }
    }

    pub fn rotation(&self) -> Mat3 {
        quat_to_rotation(quat_normalize(self.quaternion).unwrap_or([1.0, 0.0, 0.0, 0.0]))
    }

    pub fn covariance(&self) -> Mat3 {
        covariance_from_rotation(&self.rotation(), &self.scales)
    }

    /// Applies a world rotation `q_world` (`(w, x, y, z)`) to the splat's center,
    /// covariance and normal.
    pub fn rotated(&self, q_world: [f64; 4]) -> Self {
        let q_world = quat_normalize(q_world).expect("nonzero rotation");
        let rot = quat_to_rotation(q_world);
        let inv = [q_world[0], -q_world[1], -q_world[2], -q_world[3]];
        Self {
            center: rot * self.center,
            quaternion: quat_mul(self.quaternion, inv),
            normal: rot * self.normal,
            ..*self
        }
    }

    pub fn validate(&self, index: usize) -> Result<()> {
        let bad = |reason: String| Err(GaussianError::InvalidSplat { index, reason });
        let qn = self.quaternion.iter().map(|c| c * c).sum::<f64>().sqrt();
        if (qn - 1.0).abs() > 1e-6 {
            return bad(format!("quaternion norm {qn}"));
        }
        if !self.scales.iter().all(|s| *s > 0.0 && s.is_finite()) {
            return bad(format!("scales {:?}", self.scales.as_slice()));
        }
        if !(0.0..=1.0).contains(&self.opacity) {
            return bad(format!("opacity {}", self.opacity));
        }
        if !self.center.iter().all(|c| c.is_finite()) {
            return bad("non-finite center".into());
        }
        Ok(())
    }
}

/// Pinhole camera with world-to-camera extrinsics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub rotation: Mat3,
    pub translation: Vec3,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        rotation: Mat3,
        translation: Vec3,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Mat3::identity()).amax();
        if ortho > 1e-6 {
            return Err(GaussianError::InvalidCamera(format!("rotation not orthonormal ({ortho:e})")));
        }
        if (rotation.determinant() - 1.0).abs() > 1e-6 {
            return Err(GaussianError::InvalidCamera("rotation determinant is not +1".into()));
        }
        if !(fx > 0.0 && fy > 0.0) {
            return Err(GaussianError::InvalidCamera(format!("focal lengths {fx}, {fy}")));
        }
        if width == 0 || height == 0 {
            return Err(GaussianError::InvalidCamera(format!("image size {width}×{height}")));
        }
        Ok(Self {
            rotation,
            translation,
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Camera at `eye` looking at `target`, principal point at the image center.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, focal: f64, width: usize, height: usize) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| GaussianError::InvalidCamera("eye coincides with target".into()))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| GaussianError::InvalidCamera("up parallel to view direction".into()))?;
        let down = forward.cross(&right);
        let rotation = Mat3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        Self::new(
            rotation,
            translation,
            focal,
            focal,
            width as f64 / 2.0,
            height as f64 / 2.0,
            width,
            height,
        )
    }

    /// Camera center in world space.
    pub fn position(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    /// World-space viewing direction (camera +z).
    pub fn forward(&self) -> Vec3 {
        self.rotation.row(2).transpose()
    }

    #[inline]
    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// Pixel coordinates of a camera-space point.
    #[inline]
    pub fn project_point(&self, p_cam: &Vec3) -> [f64; 2] {
        [
            self.fx * p_cam.x / p_cam.z + self.cx,
            self.fy * p_cam.y / p_cam.z + self.cy,
        ]
    }

    /// World-space ray through a pixel position: `(origin, unit direction)`.
    pub fn ray(&self, px: f64, py: f64) -> (Vec3, Vec3) {
        let d_cam = Vec3::new((px - self.cx) / self.fx, (py - self.cy) / self.fy, 1.0);
        (self.position(), (self.rotation.transpose() * d_cam).normalize())
    }

    /// Same intrinsics scaled to a new resolution.
    pub fn resized(&self, width: usize, height: usize) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
            width,
            height,
            ..*self
        }
    }
}

/// Perspective Jacobian at camera-space point `p`.
#[inline]
pub fn projection_jacobian(p: &Vec3, fx: f64, fy: f64) -> Matrix2x3<f64> {
    let iz = 1.0 / p.z;
    let iz2 = iz * iz;
    Matrix2x3::new(fx * iz, 0.0, -p.x * fx * iz2, 0.0, fy * iz, -p.y * fy * iz2)
}

/// Upper triangle `(xx, xy, xz, yy, yz, zz)` of a symmetric 3×3 matrix.
pub type SymMat3 = [f64; 6];

pub fn sym_from_mat(m: &Mat3) -> SymMat3 {
    [m[(0, 0)], m[(0, 1)], m[(0, 2)], m[(1, 1)], m[(1, 2)], m[(2, 2)]]
}

pub fn mat_from_sym(s: &SymMat3) -> Mat3 {
    Mat3::new(s[0], s[1], s[2], s[1], s[3], s[4], s[2], s[4], s[5])
}

#[inline(always)]
fn sym_mul_vec(s: &SymMat3, v: [f64; 3]) -> [f64; 3] {
    [
        s[0] * v[0] + s[1] * v[1] + s[2] * v[2],
        s[1] * v[0] + s[3] * v[1] + s[4] * v[2],
        s[2] * v[0] + s[4] * v[1] + s[5] * v[2],
    ]
}

/// Rows of `K = J · T`, the linear map from world offsets to pixel offsets.
#[inline(always)]
pub(crate) fn screen_jacobian_rows(p_cam: &Vec3, cam: &Camera) -> ([f64; 3], [f64; 3]) {
    let iz = 1.0 / p_cam.z;
    let j00 = cam.fx * iz;
    let j02 = -cam.fx * p_cam.x * iz * iz;
    let j11 = cam.fy * iz;
    let j12 = -cam.fy * p_cam.y * iz * iz;
    let t = &cam.rotation;
    let a = [0, 1, 2].map(|k| j00 * t[(0, k)] + j02 * t[(2, k)]);
    let b = [0, 1, 2].map(|k| j11 * t[(1, k)] + j12 * t[(2, k)]);
    (a, b)
}

/// `J · T · Σ · Tᵀ · Jᵀ` as `(xx, xy, yy)`, without dilation.
#[inline]
pub fn screen_cov_sym(cov_world: &SymMat3, p_cam: &Vec3, cam: &Camera) -> [f64; 3] {
    let (a, b) = screen_jacobian_rows(p_cam, cam);
    let sa = sym_mul_vec(cov_world, a);
    let sb = sym_mul_vec(cov_world, b);
    let dot = |u: [f64; 3], v: [f64; 3]| u[0] * v[0] + u[1] * v[1] + u[2] * v[2];
    [dot(a, sa), dot(a, sb), dot(b, sb)]
}

/// [`screen_cov_sym`] as a matrix.
pub fn screen_covariance(cov_world: &Mat3, p_cam: &Vec3, cam: &Camera) -> Matrix2<f64> {
    let c = screen_cov_sym(&sym_from_mat(cov_world), p_cam, cam);
    Matrix2::new(c[0], c[1], c[1], c[2])
}

/// A splat in screen space, ready for rasterization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectedSplat {
    /// Index into the splat list it came from.
    pub index: usize,
    pub screen_center: [f64; 2],
    /// Camera-space z.
    pub depth: f64,
    /// Symmetric screen covariance `(xx, xy, yy)` in px², dilation included.
    pub screen_cov: [f64; 3],
    /// Inverse of `screen_cov`, `(xx, xy, yy)`.
    pub conic: [f64; 3],
    pub opacity: f64,
    pub color: [f64; 3],
    pub normal: [f64; 3],
    /// Three standard deviations along the major axis, px.
    pub radius: f64,
}

/// Largest eigenvalue of a symmetric 2×2 `(xx, xy, yy)`.
#[inline]
pub fn max_eigenvalue_2x2(c: [f64; 3]) -> f64 {
    let mid = 0.5 * (c[0] + c[2]);
    let half = 0.5 * (c[0] - c[2]);
    mid + (half * half + c[1] * c[1]).sqrt()
}

/// Projects one splat; `None` when it is behind the near plane or its
/// footprint misses the image.
pub fn project(splat: &Splat, index: usize, cam: &Camera) -> Option<ProjectedSplat> {
    project_with_covariance(splat, &sym_from_mat(&splat.covariance()), index, cam)
}

/// [`project`] with a precomputed world covariance.
#[inline]
pub fn project_with_covariance(
    splat: &Splat,
    cov_world: &SymMat3,
    index: usize,
    cam: &Camera,
) -> Option<ProjectedSplat> {
    let p = cam.to_camera(&splat.center);
    if !(p.z > Z_NEAR) {
        return None;
    }
    let s = screen_cov_sym(cov_world, &p, cam);
    let cov = [s[0] + SCREEN_DILATION, s[1], s[2] + SCREEN_DILATION];
    let det = cov[0] * cov[2] - cov[1] * cov[1];
    if !(det > 0.0) || !det.is_finite() {
        return None;
    }
    let conic = [cov[2] / det, -cov[1] / det, cov[0] / det];
    let radius = EXTENT_SIGMAS * max_eigenvalue_2x2(cov).sqrt();
    let center = cam.project_point(&p);
    if center[0] + radius < 0.0
        || center[0] - radius > cam.width as f64
        || center[1] + radius < 0.0
        || center[1] - radius > cam.height as f64
    {
        return None;
    }
    Some(ProjectedSplat {
        index,
        screen_center: center,
        depth: p.z,
        screen_cov: cov,
        conic,
        opacity: splat.opacity,
        color: [splat.color.x, splat.color.y, splat.color.z],
        normal: [splat.normal.x, splat.normal.y, splat.normal.z],
        radius,
    })
}

/// Exponent `-½ dᵀ Σ⁻¹ d` at pixel position `(px, py)`.
#[inline]
pub fn gaussian_power(ps: &ProjectedSplat, px: f64, py: f64) -> f64 {
    let dx = px - ps.screen_center[0];
    let dy = py - ps.screen_center[1];
    -0.5 * (ps.conic[0] * dx * dx + ps.conic[2] * dy * dy) - ps.conic[1] * dx * dy
}

/// Opacity-weighted Gaussian density at a pixel position, clamped to
/// `alpha_max` when one is given.
pub fn eval_alpha(ps: &ProjectedSplat, pixel: [f64; 2], alpha_max: Option<f64>) -> f64 {
    let a = ps.opacity * gaussian_power(ps, pixel[0], pixel[1]).exp();
    match alpha_max {
        Some(m) => a.min(m),
        None => a,
    }
}

// ---------------------------------------------------------------------------
// Splat cache: "SPL1", u32 count, 17 f32 per splat, little-endian.
// ---------------------------------------------------------------------------

pub fn write_splats(w: &mut impl Write, splats: &[Splat]) -> std::io::Result<()> {
    w.write_all(SPLAT_CACHE_MAGIC)?;
    w.write_all(&(splats.len() as u32).to_le_bytes())?;
    for s in splats {
        let q = s.quaternion;
        let vals = [
            s.center.x, s.center.y, s.center.z, s.scales.x, s.scales.y, s.scales.z, q[0], q[1],
            q[2], q[3], s.opacity, s.color.x, s.color.y, s.color.z, s.normal.x, s.normal.y,
            s.normal.z,
        ];
        for v in vals {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_splats(r: &mut impl Read) -> Result<Vec<Splat>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| GaussianError::BadMagic)?;
    if &magic != SPLAT_CACHE_MAGIC {
        return Err(GaussianError::BadMagic);
    }
    let mut count = [0u8; 4];
    r.read_exact(&mut count)
        .map_err(|_| GaussianError::Truncated { expected: 0 })?;
    let count = u32::from_le_bytes(count) as usize;
    let mut body = vec![0u8; count * 17 * 4];
    r.read_exact(&mut body)
        .map_err(|_| GaussianError::Truncated { expected: count })?;
    Ok(body
        .chunks_exact(17 * 4)
        .map(|rec| {
            let v: Vec<f64> = rec
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            Splat {
                center: Vec3::new(v[0], v[1], v[2]),
                scales: Vec3::new(v[3], v[4], v[5]),
                quaternion: [v[6], v[7], v[8], v[9]],
                opacity: v[10],
                color: Vec3::new(v[11], v[12], v[13]),
                normal: Vec3::new(v[14], v[15], v[16]),
            }
        })
        .collect())
}

pub fn save_splats(path: &Path, splats: &[Splat]) -> Result<()> {
    let io = |source| GaussianError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    write_splats(&mut w, splats).map_err(io)?;
    w.flush().map_err(io)
}

pub fn load_splats(path: &Path) -> Result<Vec<Splat>> {
    let f = File::open(path).map_err(|source| GaussianError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_splats(&mut BufReader::new(f))
}

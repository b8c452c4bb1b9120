//! Point-to-Gaussian estimators: one splat per input point.
//!
//! * `GlobalIsotropic`: every splat is a sphere whose σ is a multiple of the
//!   mean nearest-neighbor distance.
//! * `LocalPca`: each splat follows the covariance of the point's
//!   neighborhood.
//! * `Neural`: the sparse UNet predicts offset, scales, rotation, opacity and
//!   normal per voxel.

use std::path::PathBuf;

use nalgebra::SymmetricEigen;
use rayon::prelude::*;

use crate::gaussians::{quat_normalize, rotation_to_quat, Splat};
use crate::knn::{mean_nn_distance, SpatialGrid};
use crate::pcio::PointCloud;
use crate::sparsenet::{activate_head, unet_forward, NetError, NetworkWeights};
use crate::stats::{time_iterations, LatencyStats};
use crate::voxelgrid::{voxelize_adaptive, VoxelError};
use crate::{Mat3, Vec3};

#[derive(Debug, thiserror::Error)]
pub enum EstimateError {
    #[error("estimator needs at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("all points coincide; the mean nearest-neighbor distance is zero")]
    ZeroSpacing,
    #[error("invalid estimator configuration: {0}")]
    InvalidConfig(String),
    #[error("the neural estimator needs network weights")]
    MissingWeights,
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Voxel(#[from] VoxelError),
}

type Result<T> = std::result::Result<T, EstimateError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    GlobalIsotropic,
    LocalPca,
    Neural,
}

impl EstimatorKind {
    pub fn id(self) -> &'static str {
        match self {
            EstimatorKind::GlobalIsotropic => "global",
            EstimatorKind::LocalPca => "pca",
            EstimatorKind::Neural => "neural",
        }
    }
}

impl std::str::FromStr for EstimatorKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "global" | "global_isotropic" => Ok(EstimatorKind::GlobalIsotropic),
            "pca" | "local_pca" => Ok(EstimatorKind::LocalPca),
            "neural" => Ok(EstimatorKind::Neural),
            other => Err(format!("unknown estimator {other:?} (expected global, pca or neural)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EstimatorConfig {
    pub kind: EstimatorKind,
    pub sigma_multiplier: f64,
    pub k_neighbors: usize,
    pub weights_path: Option<PathBuf>,
    pub default_opacity: f64,
}

impl EstimatorConfig {
    pub fn new(kind: EstimatorKind) -> Self {
        Self {
            kind,
            sigma_multiplier: 1.5,
            k_neighbors: 16,
            weights_path: None,
            default_opacity: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_multiplier > 0.0 && self.sigma_multiplier.is_finite()) {
            return Err(EstimateError::InvalidConfig(format!("sigma multiplier {}", self.sigma_multiplier)));
        }
        if self.k_neighbors < 4 {
            return Err(EstimateError::InvalidConfig(format!("k_neighbors {} < 4", self.k_neighbors)));
        }
        if !(0.0..=1.0).contains(&self.default_opacity) {
            return Err(EstimateError::InvalidConfig(format!("opacity {}", self.default_opacity)));
        }
        Ok(())
    }
}

fn positions(cloud: &PointCloud) -> Vec<Vec3> {
    cloud.positions().copied().collect()
}

fn mean_spacing(points: &[Vec3]) -> Result<f64> {
    let d = mean_nn_distance(points).ok_or(EstimateError::TooFewPoints {
        needed: 2,
        got: points.len(),
    })?;
    if d > 0.0 {
        Ok(d)
    } else {
        Err(EstimateError::ZeroSpacing)
    }
}

/// Isotropic splats with `σ = sigma_multiplier · d̄`.
pub fn estimate_global(cloud: &PointCloud, cfg: &EstimatorConfig) -> Result<Vec<Splat>> {
    cfg.validate()?;
    let sigma = cfg.sigma_multiplier * mean_spacing(&positions(cloud))?;
    Ok(cloud
        .points()
        .iter()
        .map(|p| Splat {
            center: p.position,
            scales: Vec3::repeat(sigma),
            quaternion: [1.0, 0.0, 0.0, 0.0],
            opacity: cfg.default_opacity,
            color: p.color,
            normal: p.normal.unwrap_or_else(Vec3::z),
        })
        .collect())
}

/// Flips `v` so that its largest-magnitude component is positive (first
/// index wins ties).
fn canonical_sign(v: Vec3) -> Vec3 {
    let mut best = 0;
    for a in 1..3 {
        if v[a].abs() > v[best].abs() {
            best = a;
        }
    }
    if v[best] < 0.0 {
        -v
    } else {
        v
    }
}

/// Principal frame of a neighborhood: eigenvalues descending and the
/// right-handed rotation whose rows are the matching eigenvectors.
pub fn principal_frame(neighborhood: &[Vec3]) -> ([f64; 3], Mat3) {
    let m = neighborhood.len() as f64;
    let mean = neighborhood.iter().fold(Vec3::zeros(), |a, p| a + p) / m;
    let mut cov = Mat3::zeros();
    for p in neighborhood {
        let d = p - mean;
        cov += d * d.transpose();
    }
    cov /= m;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let e1 = canonical_sign(eig.eigenvectors.column(order[0]).into_owned());
    let e2 = canonical_sign(eig.eigenvectors.column(order[1]).into_owned());
    let e3 = e1.cross(&e2).normalize();
    let e2 = e3.cross(&e1).normalize();
    let rot = Mat3::from_rows(&[e1.transpose(), e2.transpose(), e3.transpose()]);
    (order.map(|i| eig.eigenvalues[i].max(0.0)), rot)
}

/// Quaternion with its largest-magnitude component made positive.
fn canonical_quat(q: [f64; 4]) -> [f64; 4] {
    let mut best = 0;
    for i in 1..4 {
        if q[i].abs() > q[best].abs() {
            best = i;
        }
    }
    if q[best] < 0.0 {
        q.map(|c| -c)
    } else {
        q
    }
}

/// Splats shaped by the covariance of each point and its `k` nearest
/// neighbors. σ is `sigma_multiplier · sqrt(λ)` floored at `0.1 · d̄`; the
/// normal is the smallest-eigenvalue axis pointing away from the cloud
/// centroid.
pub fn estimate_local_pca(cloud: &PointCloud, cfg: &EstimatorConfig) -> Result<Vec<Splat>> {
    cfg.validate()?;
    let k = cfg.k_neighbors;
    if cloud.len() < k + 1 {
        return Err(EstimateError::TooFewPoints {
            needed: k + 1,
            got: cloud.len(),
        });
    }
    let pts = positions(cloud);
    let grid = SpatialGrid::new(&pts);
    let hoods = grid.all_k_nearest(k);
    // The first of the k neighbors is the nearest one.
    let nn_mean = hoods.iter().map(|h| h[0].distance).sum::<f64>() / hoods.len() as f64;
    if !(nn_mean > 0.0) {
        return Err(EstimateError::ZeroSpacing);
    }
    let floor = 0.1 * nn_mean;
    let centroid = cloud.centroid();
    let splats = cloud
        .points()
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut hood = Vec::with_capacity(k + 1);
            hood.push(pts[i]);
            hood.extend(hoods[i].iter().map(|n| pts[n.index]));
            let (lambda, rot) = principal_frame(&hood);
            let scales = Vec3::from(lambda.map(|l| (cfg.sigma_multiplier * l.sqrt()).max(floor)));
            let q = canonical_quat(rotation_to_quat(&rot));
            let axis = rot.row(2).transpose();
            let normal = if axis.dot(&(p.position - centroid)) < 0.0 { -axis } else { axis };
            Splat {
                center: p.position,
                scales,
                quaternion: q,
                opacity: cfg.default_opacity,
                color: p.color,
                normal,
            }
        })
        .collect();
    Ok(splats)
}

/// Network prediction per voxel, broadcast to the voxel's points. Centers
/// are the voxel centroid plus the predicted offset; colors come from the
/// source points.
pub fn estimate_neural(cloud: &PointCloud, weights: &NetworkWeights) -> Result<Vec<Splat>> {
    let vox = voxelize_adaptive(cloud)?;
    let raw = unet_forward(&vox, weights)?;
    let voxel = vox.voxel_size();
    Ok(cloud
        .points()
        .par_iter()
        .zip(raw.par_iter())
        .zip(vox.point_voxel.par_iter())
        .map(|((p, r), &v)| {
            let h = activate_head(r, voxel);
            Splat {
                center: vox.world_position(v) + h.delta,
                scales: h.sigma,
                quaternion: quat_normalize(h.quaternion).unwrap_or([1.0, 0.0, 0.0, 0.0]),
                opacity: h.opacity,
                color: p.color,
                normal: h.normal,
            }
        })
        .collect())
}

/// Runs the configured estimator. `weights` is required for `Neural`; when
/// absent, `cfg.weights_path` is loaded.
pub fn estimate(cloud: &PointCloud, cfg: &EstimatorConfig, weights: Option<&NetworkWeights>) -> Result<Vec<Splat>> {
    match cfg.kind {
        EstimatorKind::GlobalIsotropic => estimate_global(cloud, cfg),
        EstimatorKind::LocalPca => estimate_local_pca(cloud, cfg),
        EstimatorKind::Neural => match weights {
            Some(w) => estimate_neural(cloud, w),
            None => {
                let path = cfg.weights_path.as_ref().ok_or(EstimateError::MissingWeights)?;
                estimate_neural(cloud, &NetworkWeights::load(path)?)
            }
        },
    }
}

/// Wall-clock of the full estimate path over `iterations` runs.
pub fn bench_preprocess(
    cloud: &PointCloud,
    cfg: &EstimatorConfig,
    weights: Option<&NetworkWeights>,
    iterations: usize,
) -> Result<(LatencyStats, Vec<Splat>)> {
    let (samples, last) = time_iterations(iterations.max(1), || estimate(cloud, cfg, weights));
    let splats = last.expect("at least one iteration")?;
    Ok((LatencyStats::from_samples(&samples, 0), splats))
}

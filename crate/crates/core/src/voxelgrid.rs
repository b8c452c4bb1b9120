//! Sparse voxel grids and the density-adaptive voxelization that feeds the
//! sparse network.
//!
//! Voxel `(i, j, k)` at stride `s` covers `[i, i + s) × [j, j + s) × [k, k + s)`
//! in scaled space. Coordinates at stride `s` are multiples of `s`, so a
//! parent at stride `2s` is found by flooring each axis to a multiple of `2s`.

use rustc_hash::FxHashMap;

use crate::pcio::PointCloud;
use crate::Vec3;

pub type Coord = [i32; 3];

/// Channels of a voxelized cloud: scaled-space position (3), color (3),
/// residual from the voxel center (3).
pub const INPUT_CHANNELS: usize = 9;

/// Largest coordinate magnitude accepted, leaving headroom for stride-8
/// flooring and kernel offsets.
const COORD_LIMIT: f64 = (1i64 << 30) as f64;

#[derive(Debug, thiserror::Error)]
pub enum VoxelError {
    #[error("voxelization needs at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("degenerate bounding box (volume {0})")]
    DegenerateBox(f64),
    #[error("scene needs voxel coordinates beyond the signed 32-bit range")]
    CoordinateOverflow,
    #[error("invalid stride {requested} for a grid at stride {grid}")]
    InvalidStride { requested: i32, grid: i32 },
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
}

type Result<T> = std::result::Result<T, VoxelError>;

#[inline]
pub fn floor_to_stride(c: Coord, stride: i32) -> Coord {
    c.map(|v| v.div_euclid(stride) * stride)
}

/// A hash-indexed set of voxels at one stride, each carrying a feature vector.
///
/// Voxels keep their insertion order, which makes every operation on the grid
/// deterministic.
#[derive(Clone, Debug)]
pub struct SparseVoxelGrid {
    stride: i32,
    channels: usize,
    scale_to_world: f64,
    coords: Vec<Coord>,
    features: Vec<f64>,
    index: FxHashMap<Coord, usize>,
}

impl PartialEq for SparseVoxelGrid {
    fn eq(&self, other: &Self) -> bool {
        self.stride == other.stride
            && self.channels == other.channels
            && self.scale_to_world == other.scale_to_world
            && self.coords == other.coords
            && self.features == other.features
    }
}

impl SparseVoxelGrid {
    pub fn from_parts(
        stride: i32,
        channels: usize,
        scale_to_world: f64,
        coords: Vec<Coord>,
        features: Vec<f64>,
    ) -> Result<Self> {
        if stride <= 0 || stride.count_ones() != 1 {
            return Err(VoxelError::InvalidGrid(format!("stride {stride} is not a power of 2")));
        }
        if channels == 0 {
            return Err(VoxelError::InvalidGrid("zero channels".into()));
        }
        if !(scale_to_world > 0.0) {
            return Err(VoxelError::InvalidGrid(format!("scale {scale_to_world}")));
        }
        if features.len() != coords.len() * channels {
            return Err(VoxelError::InvalidGrid(format!(
                "{} features for {} voxels × {} channels",
                features.len(),
                coords.len(),
                channels
            )));
        }
        let mut index = FxHashMap::default();
        index.reserve(coords.len());
        for (i, c) in coords.iter().enumerate() {
            if c.iter().any(|v| v.rem_euclid(stride) != 0) {
                return Err(VoxelError::InvalidGrid(format!("{c:?} not on stride {stride}")));
            }
            if index.insert(*c, i).is_some() {
                return Err(VoxelError::InvalidGrid(format!("duplicate coordinate {c:?}")));
            }
        }
        Ok(Self {
            stride,
            channels,
            scale_to_world,
            coords,
            features,
            index,
        })
    }

    /// Builds a grid whose validity the caller guarantees.
    pub(crate) fn from_parts_unchecked(
        stride: i32,
        channels: usize,
        scale_to_world: f64,
        coords: Vec<Coord>,
        features: Vec<f64>,
        index: FxHashMap<Coord, usize>,
    ) -> Self {
        debug_assert_eq!(features.len(), coords.len() * channels);
        debug_assert_eq!(index.len(), coords.len());
        Self {
            stride,
            channels,
            scale_to_world,
            coords,
            features,
            index,
        }
    }

    pub fn stride(&self) -> i32 {
        self.stride
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn scale_to_world(&self) -> f64 {
        self.scale_to_world
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[Coord] {
        &self.coords
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    #[inline]
    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.channels..(i + 1) * self.channels]
    }

    #[inline]
    pub fn index_of(&self, c: &Coord) -> Option<usize> {
        self.index.get(c).copied()
    }

    pub fn get(&self, c: &Coord) -> Option<&[f64]> {
        self.index_of(c).map(|i| self.feature(i))
    }

    /// Same features with every coordinate shifted by `offset`, which must be
    /// a multiple of the stride.
    pub fn translated(&self, offset: Coord) -> Result<Self> {
        let coords = self
            .coords
            .iter()
            .map(|c| [c[0] + offset[0], c[1] + offset[1], c[2] + offset[2]])
            .collect();
        Self::from_parts(self.stride, self.channels, self.scale_to_world, coords, self.features.clone())
    }

    /// Keeps the occupancy, replacing the features.
    pub fn with_features(&self, channels: usize, features: Vec<f64>) -> Self {
        assert_eq!(features.len(), self.coords.len() * channels);
        Self {
            stride: self.stride,
            channels,
            scale_to_world: self.scale_to_world,
            coords: self.coords.clone(),
            features,
            index: self.index.clone(),
        }
    }
}

/// A voxelized point cloud: the 9-channel input grid and, per voxel, the
/// indices of the source points merged into it.
#[derive(Clone, Debug)]
pub struct VoxelizedCloud {
    pub grid: SparseVoxelGrid,
    pub source_indices: Vec<Vec<usize>>,
    /// Voxel index of every source point.
    pub point_voxel: Vec<usize>,
}

impl VoxelizedCloud {
    /// Voxel edge length in world units.
    pub fn voxel_size(&self) -> f64 {
        self.grid.scale_to_world
    }

    /// World-space centroid of the points merged into voxel `i`.
    pub fn world_position(&self, i: usize) -> Vec3 {
        let f = self.grid.feature(i);
        Vec3::new(f[0], f[1], f[2]) * self.grid.scale_to_world
    }

    pub fn residual(&self, i: usize) -> Vec3 {
        let f = self.grid.feature(i);
        Vec3::new(f[6], f[7], f[8])
    }
}

/// Scales the cloud so that it holds on average one point per unit voxel,
/// using the bounding-box volume as the density estimate, and merges points
/// sharing a voxel into their centroid and mean color.
pub fn voxelize_adaptive(cloud: &PointCloud) -> Result<VoxelizedCloud> {
    let n = cloud.len();
    if n < 2 {
        return Err(VoxelError::TooFewPoints(n));
    }
    let ext = cloud.bbox().extent();
    let volume = ext.x * ext.y * ext.z;
    if !(volume > 0.0 && volume.is_finite()) {
        return Err(VoxelError::DegenerateBox(volume));
    }
    let scale = (n as f64 / volume).cbrt();

    let mut index: FxHashMap<Coord, usize> = FxHashMap::default();
    index.reserve(n);
    let mut coords: Vec<Coord> = Vec::new();
    let mut sums: Vec<[f64; 6]> = Vec::new();
    let mut source_indices: Vec<Vec<usize>> = Vec::new();
    let mut point_voxel = Vec::with_capacity(n);

    for (pi, p) in cloud.points().iter().enumerate() {
        let s = p.position * scale;
        if s.iter().any(|c| c.abs() >= COORD_LIMIT) {
            return Err(VoxelError::CoordinateOverflow);
        }
        let c = [s.x.floor() as i32, s.y.floor() as i32, s.z.floor() as i32];
        let vi = *index.entry(c).or_insert_with(|| {
            coords.push(c);
            sums.push([0.0; 6]);
            source_indices.push(Vec::new());
            coords.len() - 1
        });
        let acc = &mut sums[vi];
        for a in 0..3 {
            acc[a] += s[a];
            acc[3 + a] += p.color[a];
        }
        source_indices[vi].push(pi);
        point_voxel.push(vi);
    }

    let mut features = Vec::with_capacity(coords.len() * INPUT_CHANNELS);
    for ((c, acc), src) in coords.iter().zip(&sums).zip(&source_indices) {
        let count = src.len() as f64;
        let mut absolute = [0.0; 3];
        let mut residual = [0.0; 3];
        for a in 0..3 {
            let centroid = acc[a] / count;
            residual[a] = centroid - (c[a] as f64 + 0.5);
            absolute[a] = c[a] as f64 + 0.5 + residual[a];
        }
        features.extend_from_slice(&absolute);
        features.extend((0..3).map(|a| acc[3 + a] / count));
        features.extend_from_slice(&residual);
    }

    let grid = SparseVoxelGrid::from_parts_unchecked(1, INPUT_CHANNELS, 1.0 / scale, coords, features, index);
    Ok(VoxelizedCloud {
        grid,
        source_indices,
        point_voxel,
    })
}

/// 2×2×2 mean pooling: each parent averages its occupied children only.
pub fn pool_2x2x2(grid: &SparseVoxelGrid) -> SparseVoxelGrid {
    let stride = grid.stride * 2;
    let ch = grid.channels;
    let mut index: FxHashMap<Coord, usize> = FxHashMap::default();
    let mut coords = Vec::new();
    let mut sums: Vec<f64> = Vec::new();
    let mut counts: Vec<u32> = Vec::new();
    for (i, c) in grid.coords.iter().enumerate() {
        let parent = floor_to_stride(*c, stride);
        let pi = *index.entry(parent).or_insert_with(|| {
            coords.push(parent);
            sums.extend(std::iter::repeat_n(0.0, ch));
            counts.push(0);
            coords.len() - 1
        });
        for (s, f) in sums[pi * ch..(pi + 1) * ch].iter_mut().zip(grid.feature(i)) {
            *s += f;
        }
        counts[pi] += 1;
    }
    for (pi, &n) in counts.iter().enumerate() {
        for s in &mut sums[pi * ch..(pi + 1) * ch] {
            *s /= n as f64;
        }
    }
    SparseVoxelGrid::from_parts_unchecked(stride, ch, grid.scale_to_world, coords, sums, index)
}

/// Occupied coordinates at a coarser `stride`, in first-occurrence order; the
/// same order [`pool_2x2x2`] produces.
pub fn occupancy_at_stride(grid: &SparseVoxelGrid, stride: i32) -> Result<Vec<Coord>> {
    if stride < grid.stride || stride.count_ones() != 1 {
        return Err(VoxelError::InvalidStride {
            requested: stride,
            grid: grid.stride,
        });
    }
    let mut seen = rustc_hash::FxHashSet::default();
    Ok(grid
        .coords
        .iter()
        .map(|c| floor_to_stride(*c, stride))
        .filter(|p| seen.insert(*p))
        .collect())
}

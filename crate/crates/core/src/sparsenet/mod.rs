//! Forward inference of the sparse UNet that maps a voxelized point cloud to
//! per-point Gaussian parameters.
//!
//! All layers run on [`SparseVoxelGrid`]s. Stride-1 convolutions keep the
//! occupancy of their input, pooling halves the resolution, and transposed
//! convolutions upsample onto the encoder occupancy of the target level, so
//! encoder and decoder see the same geometry at every stride. Features are
//! `f64`; weights are stored as `f32`.

mod weights;

use rayon::prelude::*;

pub use weights::{
    init_random, load_weights, save_weights, Layer, LayerKind, LayerSpec, NetworkPlan, NetworkWeights, CONV_KERNEL,
    RAW_OUTPUTS, WEIGHTS_MAGIC, WEIGHTS_VERSION,
};

use crate::voxelgrid::{floor_to_stride, pool_2x2x2, Coord, SparseVoxelGrid, VoxelError, VoxelizedCloud};
use crate::Vec3;

#[derive(Debug, thiserror::Error)]
pub enum NetError {
    #[error("not a weight file (bad magic)")]
    BadMagic,
    #[error("unsupported weight file version {0}")]
    UnsupportedVersion(u32),
    #[error("weight file truncated while reading {0}")]
    Truncated(&'static str),
    #[error("weight file has {0} trailing bytes")]
    TrailingBytes(usize),
    #[error("layer {layer}: expected {expected} values, found {got}")]
    SizeMismatch { layer: usize, expected: usize, got: usize },
    #[error("layer expects {expected} input channels, grid has {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("invalid layer: {0}")]
    InvalidLayer(String),
    #[error("network topology: {0}")]
    Topology(String),
    #[error(transparent)]
    Voxel(#[from] VoxelError),
    #[error("{}: {source}", path.display())]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

type Result<T> = std::result::Result<T, NetError>;

fn check_layer(layer: &Layer, kind: LayerKind, channels: usize) -> Result<()> {
    layer.spec.validate()?;
    if layer.spec.kind != kind {
        return Err(NetError::InvalidLayer(format!("expected a {kind:?} layer, got {:?}", layer.spec.kind)));
    }
    if layer.spec.in_channels != channels {
        return Err(NetError::ChannelMismatch {
            expected: layer.spec.in_channels,
            got: channels,
        });
    }
    if layer.weights.len() != layer.spec.weight_count() || layer.bias.len() != layer.spec.out_channels {
        return Err(NetError::SizeMismatch {
            layer: 0,
            expected: layer.spec.weight_count(),
            got: layer.weights.len(),
        });
    }
    Ok(())
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// `acc += W · x` for a row-major `out × in` block.
#[inline]
fn mat_vec_add(w: &[f64], x: &[f64], acc: &mut [f64]) {
    let n_in = x.len();
    for (o, a) in acc.iter_mut().enumerate() {
        let row = &w[o * n_in..(o + 1) * n_in];
        *a += row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>();
    }
}

#[inline]
fn relu_in_place(v: &mut [f64]) {
    for x in v {
        *x = x.max(0.0);
    }
}

/// Submanifold convolution: evaluated at every occupied site, summing over
/// the occupied sites within the kernel window. Taps are visited in
/// lexicographic `(dz, dy, dx)` order.
pub fn sparse_conv(grid: &SparseVoxelGrid, layer: &Layer, relu: bool) -> Result<SparseVoxelGrid> {
    check_layer(layer, LayerKind::Conv, grid.channels())?;
    let k = layer.spec.kernel as i32;
    let r = k / 2;
    let s = grid.stride();
    let (n_in, n_out) = (layer.spec.in_channels, layer.spec.out_channels);
    let w = to_f64(&layer.weights);
    let bias = to_f64(&layer.bias);
    let mut offsets = Vec::with_capacity(layer.spec.taps());
    for dz in -r..=r {
        for dy in -r..=r {
            for dx in -r..=r {
                offsets.push([dx * s, dy * s, dz * s]);
            }
        }
    }
    let block = n_in * n_out;
    let mut out = vec![0.0; grid.len() * n_out];
    out.par_chunks_mut(n_out).enumerate().for_each(|(v, acc)| {
        acc.copy_from_slice(&bias);
        let c = grid.coords()[v];
        for (t, o) in offsets.iter().enumerate() {
            let nb = [c[0] + o[0], c[1] + o[1], c[2] + o[2]];
            if let Some(j) = grid.index_of(&nb) {
                mat_vec_add(&w[t * block..(t + 1) * block], grid.feature(j), acc);
            }
        }
        if relu {
            relu_in_place(acc);
        }
    });
    Ok(grid.with_features(n_out, out))
}

/// Kernel-2 transposed convolution from stride `2s` onto `target`, a set of
/// stride-`s` coordinates. Each target child reads its parent through the
/// tap of its position within the parent; a child whose parent is absent
/// gets the bias alone.
pub fn transposed_conv_pruned(
    grid: &SparseVoxelGrid,
    layer: &Layer,
    target: &[Coord],
    relu: bool,
) -> Result<SparseVoxelGrid> {
    check_layer(layer, LayerKind::TransposedConv, grid.channels())?;
    let parent_stride = grid.stride();
    if parent_stride < 2 {
        return Err(VoxelError::InvalidStride {
            requested: parent_stride / 2,
            grid: parent_stride,
        }
        .into());
    }
    let s = parent_stride / 2;
    let (n_in, n_out) = (layer.spec.in_channels, layer.spec.out_channels);
    let w = to_f64(&layer.weights);
    let bias = to_f64(&layer.bias);
    let block = n_in * n_out;
    let mut out = vec![0.0; target.len() * n_out];
    out.par_chunks_mut(n_out).zip(target.par_iter()).for_each(|(acc, c)| {
        acc.copy_from_slice(&bias);
        let p = floor_to_stride(*c, parent_stride);
        if let Some(j) = grid.index_of(&p) {
            let o = [0, 1, 2].map(|a| ((c[a] - p[a]) / s) as usize);
            let t = (o[2] * 2 + o[1]) * 2 + o[0];
            mat_vec_add(&w[t * block..(t + 1) * block], grid.feature(j), acc);
        }
        if relu {
            relu_in_place(acc);
        }
    });
    Ok(SparseVoxelGrid::from_parts(s, n_out, grid.scale_to_world(), target.to_vec(), out)?)
}

/// Channel concatenation of two grids with identical occupancy and order.
pub fn concat(a: &SparseVoxelGrid, b: &SparseVoxelGrid) -> Result<SparseVoxelGrid> {
    if a.coords() != b.coords() || a.stride() != b.stride() {
        return Err(NetError::Topology("skip connection occupancy differs".into()));
    }
    let ch = a.channels() + b.channels();
    let mut f = Vec::with_capacity(a.len() * ch);
    for i in 0..a.len() {
        f.extend_from_slice(a.feature(i));
        f.extend_from_slice(b.feature(i));
    }
    Ok(a.with_features(ch, f))
}

/// A fully connected layer applied to every row of `x` (`rows × in`).
pub fn shared_mlp(x: &[f64], layer: &Layer, relu: bool) -> Result<Vec<f64>> {
    let n_in = layer.spec.in_channels;
    if x.len() % n_in != 0 {
        return Err(NetError::ChannelMismatch {
            expected: n_in,
            got: x.len(),
        });
    }
    check_layer(layer, LayerKind::Mlp, n_in)?;
    let n_out = layer.spec.out_channels;
    let w = to_f64(&layer.weights);
    let bias = to_f64(&layer.bias);
    let mut out = vec![0.0; x.len() / n_in * n_out];
    out.par_chunks_mut(n_out).zip(x.par_chunks(n_in)).for_each(|(acc, row)| {
        acc.copy_from_slice(&bias);
        mat_vec_add(&w, row, acc);
        if relu {
            relu_in_place(acc);
        }
    });
    Ok(out)
}

/// Intermediate grids of one forward pass, for inspection and tests.
#[derive(Clone, Debug)]
pub struct UnetTrace {
    /// Encoder outputs at strides `1, 2, …, 2^levels`.
    pub encoder: Vec<SparseVoxelGrid>,
    /// Decoder outputs, coarsest first.
    pub decoder: Vec<SparseVoxelGrid>,
    /// Raw head outputs per stride-1 voxel.
    pub voxel_raw: Vec<[f64; RAW_OUTPUTS]>,
}

/// Runs the network on the voxel grid; per-voxel raw outputs, in grid order.
pub fn unet_forward_voxels(grid: &SparseVoxelGrid, weights: &NetworkWeights) -> Result<UnetTrace> {
    weights.validate()?;
    let plan = &weights.plan;
    let levels = plan.levels;
    let layers = &weights.layers;
    if grid.stride() != 1 {
        return Err(NetError::Topology(format!("input grid has stride {}", grid.stride())));
    }
    if grid.channels() != plan.encoder[0] {
        return Err(NetError::ChannelMismatch {
            expected: plan.encoder[0],
            got: grid.channels(),
        });
    }

    let mut encoder = Vec::with_capacity(levels + 1);
    let mut x = sparse_conv(grid, &layers[0], true)?;
    for lvl in 1..=levels {
        let pooled = pool_2x2x2(&x);
        encoder.push(x);
        x = sparse_conv(&pooled, &layers[lvl], true)?;
    }
    encoder.push(x.clone());

    let mut decoder = Vec::with_capacity(levels);
    let mut li = levels + 1;
    for i in 0..levels {
        let skip = &encoder[levels - 1 - i];
        let up = transposed_conv_pruned(&x, &layers[li], skip.coords(), true)?;
        x = sparse_conv(&concat(&up, skip)?, &layers[li + 1], true)?;
        decoder.push(x.clone());
        li += 2;
    }

    let hidden = shared_mlp(x.features(), &layers[li], true)?;
    let raw = shared_mlp(&hidden, &layers[li + 1], false)?;
    let voxel_raw = raw
        .chunks_exact(RAW_OUTPUTS)
        .map(|c| c.try_into().expect("chunk of 14"))
        .collect();
    Ok(UnetTrace {
        encoder,
        decoder,
        voxel_raw,
    })
}

/// Raw 14-vectors, one per source point of the voxelized cloud.
pub fn unet_forward(vox: &VoxelizedCloud, weights: &NetworkWeights) -> Result<Vec<[f64; RAW_OUTPUTS]>> {
    let trace = unet_forward_voxels(&vox.grid, weights)?;
    Ok(vox.point_voxel.iter().map(|&v| trace.voxel_raw[v]).collect())
}

/// Activated head output for one point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadOutput {
    /// Center offset, at most one voxel per axis.
    pub delta: Vec3,
    pub sigma: Vec3,
    pub quaternion: [f64; 4],
    pub opacity: f64,
    pub normal: Vec3,
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Smallest distance from 0 and 1 that activated opacities keep.
const OPACITY_MARGIN: f64 = 1e-15;

/// Maps a raw 14-vector to Gaussian parameters; `voxel_scale` is the voxel
/// edge length in world units.
pub fn activate_head(raw: &[f64; RAW_OUTPUTS], voxel_scale: f64) -> HeadOutput {
    let delta = Vec3::new(raw[0].tanh(), raw[1].tanh(), raw[2].tanh()) * voxel_scale;
    let sigma = Vec3::new(softplus(raw[3]), softplus(raw[4]), softplus(raw[5])).map(|s| (s * voxel_scale).max(f64::MIN_POSITIVE));
    let q = [raw[6] + 1.0, raw[7], raw[8], raw[9]];
    let qn = q.iter().map(|c| c * c).sum::<f64>().sqrt();
    let quaternion = if qn > 1e-12 && qn.is_finite() {
        q.map(|c| c / qn)
    } else {
        [1.0, 0.0, 0.0, 0.0]
    };
    let opacity = sigmoid(raw[10]).clamp(OPACITY_MARGIN, 1.0 - OPACITY_MARGIN);
    let n = Vec3::new(raw[11], raw[12], raw[13]);
    let nn = n.norm();
    let normal = if nn >= 1e-8 && nn.is_finite() { n / nn } else { Vec3::z() };
    HeadOutput {
        delta,
        sigma,
        quaternion,
        opacity,
        normal,
    }
}

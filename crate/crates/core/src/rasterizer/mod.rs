//! Tile-based front-to-back alpha compositing of projected Gaussians.
//!
//! The image is split into 16×16 tiles. Every splat is projected once,
//! sorted by depth and binned into the tiles its 3σ footprint touches. Each
//! tile then composites its list independently, so tiles run in parallel
//! and the output does not depend on the number of worker threads.

mod backward;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rayon::prelude::*;

pub use backward::{render_backward, PixelGradients, RenderGradients};

use crate::gaussians::{project_with_covariance, sym_from_mat, Camera, ProjectedSplat, Splat, SymMat3, ALPHA_MAX};
use crate::imagebuf::{unit_to_u8, Image};
use crate::stats::{time_iterations, LatencyStats};
use crate::Vec3;

pub const TILE_SIZE: usize = 16;
/// Side of the blocks a tile list is further culled to before compositing.
const SUBTILE: usize = 4;
/// Contributions below this alpha are skipped.
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
/// Compositing stops once transmittance drops below this.
pub const T_MIN: f64 = 1.0 / 255.0;
/// Footprint cutoff on the exponent: `-½ dᵀ Σ⁻¹ d ≥ -½ · 3²`.
pub const POWER_CUTOFF: f64 = -4.5;
/// Pixels whose final transmittance exceeds this count as background.
pub const BACKGROUND_T: f64 = 0.999;

pub const FLOAT_PLANE_MAGIC: &[u8; 4] = b"FBF1";

#[derive(Debug, thiserror::Error)]
pub enum RenderError {
    #[error("{what} has {got} entries, expected {expected}")]
    SizeMismatch { what: &'static str, got: usize, expected: usize },
    #[error("render mode {0:?} does not produce the requested plane")]
    MissingPlane(RenderMode),
    #[error("image has zero size ({width}×{height})")]
    EmptyImage { width: usize, height: usize },
    #[error("light direction has zero length")]
    ZeroLight,
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("png export: {0}")]
    Png(#[from] image::ImageError),
}

type Result<T> = std::result::Result<T, RenderError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RenderMode {
    Rgb,
    Normal,
    Depth,
}

impl RenderMode {
    pub fn code(self) -> u8 {
        match self {
            RenderMode::Rgb => 0,
            RenderMode::Normal => 1,
            RenderMode::Depth => 2,
        }
    }
}

impl std::str::FromStr for RenderMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "rgb" => Ok(RenderMode::Rgb),
            "normal" => Ok(RenderMode::Normal),
            "depth" => Ok(RenderMode::Depth),
            other => Err(format!("unknown render mode {other:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderOptions {
    /// Per-splat alpha clamp; `None` disables it.
    pub alpha_max: Option<f64>,
    pub early_termination: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            alpha_max: Some(ALPHA_MAX),
            early_termination: true,
        }
    }
}

/// Rendered planes. `rgb` and `transmittance` are always present.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameBuffer {
    pub width: usize,
    pub height: usize,
    pub rgb: Image,
    /// Final transmittance `T` per pixel.
    pub transmittance: Vec<f64>,
    /// Renormalized normals (`Normal` mode); zero vectors where nothing was hit.
    pub normal: Option<Image>,
    /// Alpha-weighted camera depth without a background term (`Depth` mode).
    pub depth: Option<Vec<f64>>,
    pub background: [f64; 3],
}

impl FrameBuffer {
    pub fn is_background(&self, x: usize, y: usize) -> bool {
        self.transmittance[y * self.width + x] > BACKGROUND_T
    }

    /// RGBA8 with alpha `(1 - T) · 255`.
    pub fn to_rgba8(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.width * self.height * 4);
        for (px, t) in self.rgb.data.iter().zip(&self.transmittance) {
            out.extend(px.iter().map(|&c| unit_to_u8(c)));
            out.push(unit_to_u8(1.0 - t));
        }
        out
    }

    pub fn save_rgba_png(&self, path: &Path) -> Result<()> {
        image::save_buffer(
            path,
            &self.to_rgba8(),
            self.width as u32,
            self.height as u32,
            image::ColorType::Rgba8,
        )?;
        Ok(())
    }

    /// Writes the plane for `mode` as "FBF1", u32 width, u32 height,
    /// u8 channels, then row-major little-endian f32.
    pub fn write_float_plane(&self, w: &mut impl Write, mode: RenderMode) -> Result<()> {
        let (channels, values): (u8, Vec<f64>) = match mode {
            RenderMode::Rgb => (3, self.rgb.data.iter().flatten().copied().collect()),
            RenderMode::Normal => {
                let n = self.normal.as_ref().ok_or(RenderError::MissingPlane(mode))?;
                (3, n.data.iter().flatten().copied().collect())
            }
            RenderMode::Depth => (1, self.depth.clone().ok_or(RenderError::MissingPlane(mode))?),
        };
        let io = |source| RenderError::Io {
            path: PathBuf::from("<stream>"),
            source,
        };
        w.write_all(FLOAT_PLANE_MAGIC).map_err(io)?;
        w.write_all(&(self.width as u32).to_le_bytes()).map_err(io)?;
        w.write_all(&(self.height as u32).to_le_bytes()).map_err(io)?;
        w.write_all(&[channels]).map_err(io)?;
        for v in values {
            w.write_all(&(v as f32).to_le_bytes()).map_err(io)?;
        }
        Ok(())
    }

    pub fn save_float_plane(&self, path: &Path, mode: RenderMode) -> Result<()> {
        let io = |source| RenderError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        self.write_float_plane(&mut w, mode)?;
        w.flush().map_err(io)
    }

    /// Image for display: rgb as is, normals mapped to `[0, 1]`, depth
    /// scaled by its maximum.
    pub fn display_image(&self, mode: RenderMode) -> Result<Image> {
        match mode {
            RenderMode::Rgb => Ok(self.rgb.clone()),
            RenderMode::Normal => Ok(self
                .normal
                .as_ref()
                .ok_or(RenderError::MissingPlane(mode))?
                .normals_to_display()),
            RenderMode::Depth => {
                let d = self.depth.as_ref().ok_or(RenderError::MissingPlane(mode))?;
                let max = d.iter().copied().fold(0.0, f64::max);
                let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
                Ok(Image {
                    width: self.width,
                    height: self.height,
                    data: d.iter().map(|v| [v * scale; 3]).collect(),
                })
            }
        }
    }
}

/// Splats with cached world covariances and reusable render buffers, for
/// rendering the same set from many viewpoints. Concurrent renders of one
/// set are serialized.
pub struct SplatSet {
    splats: Vec<Splat>,
    covariances: Vec<SymMat3>,
    scratch: Mutex<Scratch>,
}

impl Clone for SplatSet {
    fn clone(&self) -> Self {
        Self {
            splats: self.splats.clone(),
            covariances: self.covariances.clone(),
            scratch: Mutex::default(),
        }
    }
}

impl std::fmt::Debug for SplatSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SplatSet").field("len", &self.splats.len()).finish()
    }
}

impl SplatSet {
    pub fn new(splats: Vec<Splat>) -> Self {
        let covariances = splats.par_iter().map(|s| sym_from_mat(&s.covariance())).collect();
        Self {
            splats,
            covariances,
            scratch: Mutex::default(),
        }
    }

    fn render_unchecked(&self, cam: &Camera, mode: RenderMode, background: [f64; 3], opts: &RenderOptions) -> FrameBuffer {
        let mut scratch = self.scratch.lock().unwrap_or_else(|e| e.into_inner());
        render_impl(&mut scratch, &self.splats, &self.covariances, cam, mode, background, opts)
    }

    pub fn splats(&self) -> &[Splat] {
        &self.splats
    }

    pub fn len(&self) -> usize {
        self.splats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.splats.is_empty()
    }

    pub fn render(
        &self,
        cam: &Camera,
        mode: RenderMode,
        background: [f64; 3],
        opts: &RenderOptions,
    ) -> Result<FrameBuffer> {
        check_camera(cam)?;
        Ok(self.render_unchecked(cam, mode, background, opts))
    }
}

pub(crate) fn check_camera(cam: &Camera) -> Result<()> {
    if cam.width == 0 || cam.height == 0 {
        return Err(RenderError::EmptyImage {
            width: cam.width,
            height: cam.height,
        });
    }
    Ok(())
}

pub fn render(splats: &[Splat], cam: &Camera, mode: RenderMode, background: [f64; 3]) -> Result<FrameBuffer> {
    render_with(splats, cam, mode, background, &RenderOptions::default())
}

pub fn render_with(
    splats: &[Splat],
    cam: &Camera,
    mode: RenderMode,
    background: [f64; 3],
    opts: &RenderOptions,
) -> Result<FrameBuffer> {
    check_camera(cam)?;
    let covs: Vec<SymMat3> = splats.par_iter().map(|s| sym_from_mat(&s.covariance())).collect();
    Ok(render_impl(&mut Scratch::default(), splats, &covs, cam, mode, background, opts))
}

/// Screen-space splat in the compact form the per-pixel loops read.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Packed {
    pub mx: f64,
    pub my: f64,
    pub ca: f64,
    pub cb: f64,
    pub cc: f64,
    pub opacity: f64,
    pub color: [f64; 3],
    pub normal: [f64; 3],
    pub depth: f64,
    /// Half-widths of the bounding box of the `power ≥ POWER_CUTOFF` ellipse,
    /// padded against rounding.
    pub ex: f64,
    pub ey: f64,
    /// Binning radius, px.
    pub radius: f64,
}

impl From<&ProjectedSplat> for Packed {
    fn from(p: &ProjectedSplat) -> Self {
        Self {
            mx: p.screen_center[0],
            my: p.screen_center[1],
            ca: p.conic[0],
            cb: p.conic[1],
            cc: p.conic[2],
            opacity: p.opacity,
            color: p.color,
            normal: p.normal,
            depth: p.depth,
            ex: ellipse_half_width(p.screen_cov[0]),
            ey: ellipse_half_width(p.screen_cov[2]),
            radius: p.radius,
        }
    }
}

/// Half-width of the cutoff ellipse along an axis with variance `var`.
#[inline]
fn ellipse_half_width(var: f64) -> f64 {
    (-2.0 * POWER_CUTOFF * var).sqrt() * (1.0 + 1e-6) + 1e-9
}

/// One splat's contribution at one pixel.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Hit {
    pub alpha: f64,
    /// `exp(power)`.
    pub gauss: f64,
    /// Alpha was limited by `alpha_max`.
    pub clamped: bool,
    pub dx: f64,
    pub dy: f64,
}

#[inline(always)]
pub(crate) fn hit(s: &Packed, px: f64, py: f64, alpha_max: Option<f64>) -> Option<Hit> {
    let dx = px - s.mx;
    let dy = py - s.my;
    let power = -0.5 * (s.ca * dx * dx + s.cc * dy * dy) - s.cb * dx * dy;
    if power < POWER_CUTOFF || power > 0.0 {
        return None;
    }
    let gauss = power.exp();
    let raw = s.opacity * gauss;
    let (alpha, clamped) = match alpha_max {
        Some(m) if raw > m => (m, true),
        _ => (raw, false),
    };
    if alpha < ALPHA_MIN {
        return None;
    }
    Some(Hit {
        alpha,
        gauss,
        clamped,
        dx,
        dy,
    })
}

#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct PixelOut {
    pub rgb: [f64; 3],
    /// Unnormalized alpha-weighted normal sum.
    pub normal: [f64; 3],
    pub depth: f64,
    pub t: f64,
}

/// Composites `list` (front to back) at pixel center `(px, py)`.
#[inline(always)]
pub(crate) fn shade<'a, const NORMAL: bool, const DEPTH: bool>(
    list: impl IntoIterator<Item = &'a Packed>,
    px: f64,
    py: f64,
    background: [f64; 3],
    opts: &RenderOptions,
) -> PixelOut {
    let mut out = PixelOut {
        t: 1.0,
        ..Default::default()
    };
    for s in list {
        let Some(h) = hit(s, px, py, opts.alpha_max) else { continue };
        let w = out.t * h.alpha;
        for c in 0..3 {
            out.rgb[c] += w * s.color[c];
        }
        if NORMAL {
            for c in 0..3 {
                out.normal[c] += w * s.normal[c];
            }
        }
        if DEPTH {
            out.depth += w * s.depth;
        }
        out.t *= 1.0 - h.alpha;
        if opts.early_termination && out.t < T_MIN {
            break;
        }
    }
    for c in 0..3 {
        out.rgb[c] += out.t * background[c];
    }
    out
}

pub(crate) fn renormalize(n: [f64; 3]) -> [f64; 3] {
    let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
    if len > 1e-12 {
        n.map(|c| c / len)
    } else {
        [0.0; 3]
    }
}

/// Visible splats sorted front to back and per-tile lists of positions
/// into that order.
#[derive(Default)]
pub(crate) struct Prepared {
    pub packed: Vec<Packed>,
    /// Input index of each sorted splat.
    pub source: Vec<u32>,
    pub tiles_x: usize,
    pub tiles_y: usize,
    pub offsets: Vec<usize>,
    pub entries: Vec<u32>,
}

impl Prepared {
    pub fn tile(&self, t: usize) -> &[u32] {
        &self.entries[self.offsets[t]..self.offsets[t + 1]]
    }

    /// Pixel rectangle `(x0, y0, x1, y1)` of tile `t`, end exclusive.
    pub fn tile_rect(&self, t: usize, cam: &Camera) -> (usize, usize, usize, usize) {
        let (tx, ty) = (t % self.tiles_x, t / self.tiles_x);
        let x0 = tx * TILE_SIZE;
        let y0 = ty * TILE_SIZE;
        (x0, y0, (x0 + TILE_SIZE).min(cam.width), (y0 + TILE_SIZE).min(cam.height))
    }
}

/// Buffers reused across frames so large allocations are not repeated.
#[derive(Default)]
pub(crate) struct Scratch {
    slots: Vec<Option<Packed>>,
    keys: Vec<(u64, u32)>,
    cursor: Vec<usize>,
    pub prep: Prepared,
}

/// Pixel index range whose centers may lie within `r` of `c`.
#[inline]
fn pixel_span(c: f64, r: f64, n: usize) -> Option<(usize, usize)> {
    let lo = (c - r - 0.5).floor().max(0.0);
    let hi = (c + r - 0.5).ceil().min(n as f64 - 1.0);
    (lo <= hi).then_some((lo as usize, hi as usize))
}

/// Projects every splat into `scratch.prep.packed`, sorted by
/// `(depth, index)`, with input indices in `scratch.prep.source`.
fn project_sorted_into(scratch: &mut Scratch, splats: &[Splat], covs: &[SymMat3], cam: &Camera) {
    let Scratch { slots, keys, prep, .. } = scratch;
    splats
        .par_iter()
        .zip(covs.par_iter())
        .enumerate()
        .map(|(i, (s, c))| project_with_covariance(s, c, i, cam).map(|p| Packed::from(&p)))
        .collect_into_vec(slots);
    // Depths are positive, so their bit patterns order like the values.
    keys.clear();
    keys.extend(
        slots
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.as_ref().map(|p| (p.depth.to_bits(), i as u32))),
    );
    keys.par_sort_unstable();
    keys.par_iter()
        .map(|&(_, i)| slots[i as usize].expect("key of a visible splat"))
        .collect_into_vec(&mut prep.packed);
    keys.par_iter().map(|&(_, i)| i).collect_into_vec(&mut prep.source);
}

/// Visible splats sorted front to back with their input indices.
pub(crate) fn project_sorted(splats: &[Splat], covs: &[SymMat3], cam: &Camera) -> (Vec<Packed>, Vec<u32>) {
    let mut scratch = Scratch::default();
    project_sorted_into(&mut scratch, splats, covs, cam);
    (scratch.prep.packed, scratch.prep.source)
}

/// Inclusive tile range `(tx0, tx1, ty0, ty1)` of a splat's radius bbox.
#[inline]
fn tile_range(p: &Packed, cam: &Camera) -> Option<(usize, usize, usize, usize)> {
    let (x0, x1) = pixel_span(p.mx, p.radius, cam.width)?;
    let (y0, y1) = pixel_span(p.my, p.radius, cam.height)?;
    Some((x0 / TILE_SIZE, x1 / TILE_SIZE, y0 / TILE_SIZE, y1 / TILE_SIZE))
}

/// Sorted splats per binning chunk; chunks are processed in parallel and
/// concatenated in order, so tile lists stay front to back.
const BIN_CHUNK: usize = 8192;

/// Raw pointer shared across binning chunks that write disjoint ranges.
#[derive(Clone, Copy)]
struct EntryPtr(*mut u32);
// SAFETY: every chunk writes only the slots reserved for it by the prefix
// sums below, so writes never overlap.
unsafe impl Send for EntryPtr {}
unsafe impl Sync for EntryPtr {}

pub(crate) fn prepare_into(scratch: &mut Scratch, splats: &[Splat], covs: &[SymMat3], cam: &Camera) {
    project_sorted_into(scratch, splats, covs, cam);
    let Scratch { cursor, prep, .. } = scratch;
    prep.tiles_x = cam.width.div_ceil(TILE_SIZE);
    prep.tiles_y = cam.height.div_ceil(TILE_SIZE);
    let tiles_x = prep.tiles_x;
    let n_tiles = tiles_x * prep.tiles_y;
    let packed = &prep.packed;
    let n_chunks = packed.len().div_ceil(BIN_CHUNK);

    // cursor[c * n_tiles + t]: entries of chunk c in tile t, then the first
    // slot chunk c writes in tile t.
    cursor.clear();
    cursor.resize(n_chunks * n_tiles, 0);
    cursor
        .par_chunks_mut(n_tiles.max(1))
        .zip(packed.par_chunks(BIN_CHUNK))
        .for_each(|(counts, chunk)| {
            for p in chunk {
                let Some((tx0, tx1, ty0, ty1)) = tile_range(p, cam) else { continue };
                for ty in ty0..=ty1 {
                    for tx in tx0..=tx1 {
                        counts[ty * tiles_x + tx] += 1;
                    }
                }
            }
        });
    let offsets = &mut prep.offsets;
    offsets.clear();
    offsets.resize(n_tiles + 1, 0);
    let mut total = 0;
    for t in 0..n_tiles {
        offsets[t] = total;
        for c in 0..n_chunks {
            let count = cursor[c * n_tiles + t];
            cursor[c * n_tiles + t] = total;
            total += count;
        }
    }
    offsets[n_tiles] = total;
    prep.entries.clear();
    prep.entries.resize(total, 0);
    let out = EntryPtr(prep.entries.as_mut_ptr());
    cursor
        .par_chunks_mut(n_tiles.max(1))
        .zip(packed.par_chunks(BIN_CHUNK))
        .enumerate()
        .for_each(|(c, (slots, chunk))| {
            let out = out;
            for (j, p) in chunk.iter().enumerate() {
                let Some((tx0, tx1, ty0, ty1)) = tile_range(p, cam) else { continue };
                for ty in ty0..=ty1 {
                    for tx in tx0..=tx1 {
                        let t = ty * tiles_x + tx;
                        debug_assert!(slots[t] < total);
                        // SAFETY: `slots[t]` walks this chunk's reserved,
                        // in-bounds range of tile `t`.
                        unsafe { *out.0.add(slots[t]) = (c * BIN_CHUNK + j) as u32 };
                        slots[t] += 1;
                    }
                }
            }
        });
}

pub(crate) fn prepare(splats: &[Splat], covs: &[SymMat3], cam: &Camera) -> Prepared {
    let mut scratch = Scratch::default();
    prepare_into(&mut scratch, splats, covs, cam);
    scratch.prep
}

/// Whether the cutoff ellipse's bbox reaches the pixel centers in
/// `[lx, hx] × [ly, hy]`. Evaluated without branches.
#[inline(always)]
fn reaches(s: &Packed, lx: f64, hx: f64, ly: f64, hy: f64) -> bool {
    (s.mx + s.ex >= lx) & (s.mx - s.ex <= hx) & (s.my + s.ey >= ly) & (s.my - s.ey <= hy)
}

/// Writes into `out` the entries of `from` whose ellipses reach the pixel
/// centers of `[x0, x1) × [y0, y1)`, keeping their order.
#[inline]
fn cull(list: &[Packed], from: &[u32], out: &mut Vec<u32>, x0: usize, x1: usize, y0: usize, y1: usize) {
    let (lx, hx) = (x0 as f64 + 0.5, x1 as f64 - 0.5);
    let (ly, hy) = (y0 as f64 + 0.5, y1 as f64 - 0.5);
    out.clear();
    out.resize(from.len(), 0);
    let mut n = 0;
    for &j in from {
        out[n] = j;
        n += reaches(&list[j as usize], lx, hx, ly, hy) as usize;
    }
    out.truncate(n);
}

#[allow(clippy::too_many_arguments)]
fn render_impl(
    scratch: &mut Scratch,
    splats: &[Splat],
    covs: &[SymMat3],
    cam: &Camera,
    mode: RenderMode,
    background: [f64; 3],
    opts: &RenderOptions,
) -> FrameBuffer {
    prepare_into(scratch, splats, covs, cam);
    let prep = &scratch.prep;
    match mode {
        RenderMode::Rgb => composite_tiles::<false, false>(prep, cam, background, opts, mode),
        RenderMode::Normal => composite_tiles::<true, false>(prep, cam, background, opts, mode),
        RenderMode::Depth => composite_tiles::<false, true>(prep, cam, background, opts, mode),
    }
}

/// Mutable view of one row of tiles in the output planes.
struct TileRow<'a> {
    ty: usize,
    rgb: &'a mut [[f64; 3]],
    t: &'a mut [f64],
    normal: Option<&'a mut [[f64; 3]]>,
    depth: Option<&'a mut [f64]>,
}

fn composite_tiles<const NORMAL: bool, const DEPTH: bool>(
    prep: &Prepared,
    cam: &Camera,
    background: [f64; 3],
    opts: &RenderOptions,
    mode: RenderMode,
) -> FrameBuffer {
    let mut fb = empty_frame(cam, mode, background);
    let band = cam.width * TILE_SIZE;
    let mut normal_rows = fb.normal.as_mut().map(|n| n.data.chunks_mut(band));
    let mut depth_rows = fb.depth.as_mut().map(|d| d.chunks_mut(band));
    let rows: Vec<TileRow> = fb
        .rgb
        .data
        .chunks_mut(band)
        .zip(fb.transmittance.chunks_mut(band))
        .enumerate()
        .map(|(ty, (rgb, t))| TileRow {
            ty,
            rgb,
            t,
            normal: normal_rows.as_mut().and_then(|r| r.next()),
            depth: depth_rows.as_mut().and_then(|r| r.next()),
        })
        .collect();
    rows.into_par_iter().for_each_init(
        || (Vec::new(), Vec::new(), Vec::new(), Vec::new()),
        |(list, all, half, quarter): &mut (Vec<Packed>, Vec<u32>, Vec<u32>, Vec<u32>), mut row| {
            for tx in 0..prep.tiles_x {
                let t = row.ty * prep.tiles_x + tx;
                list.clear();
                list.extend(prep.tile(t).iter().map(|&k| prep.packed[k as usize]));
                all.clear();
                all.extend(0..list.len() as u32);
                let (x0, y0, x1, y1) = prep.tile_rect(t, cam);
                let half_side = TILE_SIZE / 2;
                for hy0 in (y0..y1).step_by(half_side) {
                    let hy1 = (hy0 + half_side).min(y1);
                    for hx0 in (x0..x1).step_by(half_side) {
                        let hx1 = (hx0 + half_side).min(x1);
                        cull(list, all, half, hx0, hx1, hy0, hy1);
                        for sy0 in (hy0..hy1).step_by(SUBTILE) {
                            let sy1 = (sy0 + SUBTILE).min(hy1);
                            for sx0 in (hx0..hx1).step_by(SUBTILE) {
                                let sx1 = (sx0 + SUBTILE).min(hx1);
                                cull(list, half, quarter, sx0, sx1, sy0, sy1);
                                for y in sy0..sy1 {
                                    for x in sx0..sx1 {
                                        let p = shade::<NORMAL, DEPTH>(
                                            quarter.iter().map(|&j| &list[j as usize]),
                                            x as f64 + 0.5,
                                            y as f64 + 0.5,
                                            background,
                                            opts,
                                        );
                                        let i = (y - y0) * cam.width + x;
                                        row.rgb[i] = p.rgb;
                                        row.t[i] = p.t;
                                        if let Some(n) = row.normal.as_deref_mut() {
                                            n[i] = renormalize(p.normal);
                                        }
                                        if let Some(d) = row.depth.as_deref_mut() {
                                            d[i] = p.depth;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        },
    );
    fb
}

fn empty_frame(cam: &Camera, mode: RenderMode, background: [f64; 3]) -> FrameBuffer {
    let n = cam.width * cam.height;
    FrameBuffer {
        width: cam.width,
        height: cam.height,
        rgb: Image::new(cam.width, cam.height, background),
        transmittance: vec![1.0; n],
        normal: (mode == RenderMode::Normal).then(|| Image::new(cam.width, cam.height, [0.0; 3])),
        depth: (mode == RenderMode::Depth).then(|| vec![0.0; n]),
        background,
    }
}

#[inline]
fn store(fb: &mut FrameBuffer, i: usize, p: &PixelOut) {
    fb.rgb.data[i] = p.rgb;
    fb.transmittance[i] = p.t;
    if let Some(n) = fb.normal.as_mut() {
        n.data[i] = renormalize(p.normal);
    }
    if let Some(d) = fb.depth.as_mut() {
        d[i] = p.depth;
    }
}

/// Untiled renderer: every pixel walks the full sorted splat list. Used as
/// a reference for the tiled path.
pub fn render_reference(
    splats: &[Splat],
    cam: &Camera,
    mode: RenderMode,
    background: [f64; 3],
    opts: &RenderOptions,
) -> Result<FrameBuffer> {
    check_camera(cam)?;
    let covs: Vec<SymMat3> = splats.iter().map(|s| sym_from_mat(&s.covariance())).collect();
    let (list, _) = project_sorted(splats, &covs, cam);
    let rows: Vec<Vec<PixelOut>> = (0..cam.height)
        .into_par_iter()
        .map(|y| {
            (0..cam.width)
                .map(|x| {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    match mode {
                        RenderMode::Rgb => shade::<false, false>(&list, px, py, background, opts),
                        RenderMode::Normal => shade::<true, false>(&list, px, py, background, opts),
                        RenderMode::Depth => shade::<false, true>(&list, px, py, background, opts),
                    }
                })
                .collect()
        })
        .collect();
    let mut fb = empty_frame(cam, mode, background);
    for (y, row) in rows.into_iter().enumerate() {
        for (x, p) in row.into_iter().enumerate() {
            store(&mut fb, y * cam.width + x, &p);
        }
    }
    Ok(fb)
}

/// Lambertian shading of an rgb frame using the normals of a normal-mode
/// frame: `rgb · (ambient + diffuse · max(0, n · l))` clamped to `[0, 1]`.
/// Background pixels pass through unchanged.
pub fn relight(
    normal_frame: &FrameBuffer,
    rgb_frame: &FrameBuffer,
    light_dir: Vec3,
    ambient: f64,
    diffuse: f64,
) -> Result<Image> {
    let normals = normal_frame
        .normal
        .as_ref()
        .ok_or(RenderError::MissingPlane(RenderMode::Normal))?;
    let expected = normal_frame.width * normal_frame.height;
    if rgb_frame.width != normal_frame.width || rgb_frame.height != normal_frame.height {
        return Err(RenderError::SizeMismatch {
            what: "rgb frame",
            got: rgb_frame.rgb.data.len(),
            expected,
        });
    }
    let l = light_dir.try_normalize(1e-12).ok_or(RenderError::ZeroLight)?;
    let data = rgb_frame
        .rgb
        .data
        .iter()
        .zip(&normals.data)
        .zip(&normal_frame.transmittance)
        .map(|((c, n), &t)| {
            if t > BACKGROUND_T {
                return *c;
            }
            let lambert = (n[0] * l.x + n[1] * l.y + n[2] * l.z).max(0.0);
            let k = ambient + diffuse * lambert;
            c.map(|v| (v * k).clamp(0.0, 1.0))
        })
        .collect();
    Ok(Image {
        width: normal_frame.width,
        height: normal_frame.height,
        data,
    })
}

/// Renders `iterations` frames and reports latency. Covariances are
/// assembled once beforehand, so only the render itself is timed.
pub fn bench_render(
    set: &SplatSet,
    cam: &Camera,
    mode: RenderMode,
    background: [f64; 3],
    opts: &RenderOptions,
    iterations: usize,
) -> Result<(LatencyStats, FrameBuffer)> {
    check_camera(cam)?;
    let (samples, last) = time_iterations(iterations.max(1), || set.render_unchecked(cam, mode, background, opts));
    Ok((
        LatencyStats::from_samples(&samples, cam.width * cam.height),
        last.expect("at least one iteration"),
    ))
}

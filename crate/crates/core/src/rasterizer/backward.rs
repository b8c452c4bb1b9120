//! Reverse-mode gradients of the rendered planes with respect to splat
//! parameters.
//!
//! Each pixel is recomposited to recover the per-splat alphas and
//! transmittances, then walked back to front carrying the normalized
//! composite of everything behind the current splat. This avoids dividing
//! by `1 - α`. Clamped alphas, samples outside the 3σ footprint and skipped
//! low-alpha samples contribute no gradient.

use rayon::prelude::*;

use super::{hit, prepare, Packed, Prepared, RenderError, RenderOptions};
use crate::gaussians::{screen_jacobian_rows, sym_from_mat, Camera, Splat, SymMat3};
use crate::{Mat3, Vec3};

/// Upstream gradients `∂L/∂plane`, one entry per pixel, row-major. Absent
/// planes contribute nothing. `normal` is taken with respect to the
/// renormalized normal plane.
#[derive(Clone, Debug, Default)]
pub struct PixelGradients {
    pub rgb: Option<Vec<[f64; 3]>>,
    pub normal: Option<Vec<[f64; 3]>>,
    pub depth: Option<Vec<f64>>,
}

/// `∂L/∂θ` for every splat, indexed like the input.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderGradients {
    pub center: Vec<Vec3>,
    pub scales: Vec<Vec3>,
    /// With respect to the raw (possibly unnormalized) quaternion.
    pub quaternion: Vec<[f64; 4]>,
    pub opacity: Vec<f64>,
    pub color: Vec<Vec3>,
    pub normal: Vec<Vec3>,
}

impl RenderGradients {
    pub fn zeros(n: usize) -> Self {
        Self {
            center: vec![Vec3::zeros(); n],
            scales: vec![Vec3::zeros(); n],
            quaternion: vec![[0.0; 4]; n],
            opacity: vec![0.0; n],
            color: vec![Vec3::zeros(); n],
            normal: vec![Vec3::zeros(); n],
        }
    }
}

/// Screen-space gradient of one projected splat.
#[derive(Clone, Copy, Debug, Default)]
struct ScreenGrad {
    mean: [f64; 2],
    conic: [f64; 3],
    opacity: f64,
    color: [f64; 3],
    normal: [f64; 3],
    depth: f64,
}

impl ScreenGrad {
    fn add(&mut self, o: &ScreenGrad) {
        for c in 0..2 {
            self.mean[c] += o.mean[c];
        }
        for c in 0..3 {
            self.conic[c] += o.conic[c];
            self.color[c] += o.color[c];
            self.normal[c] += o.normal[c];
        }
        self.opacity += o.opacity;
        self.depth += o.depth;
    }
}

#[derive(Clone, Copy)]
struct Contribution {
    slot: usize,
    alpha: f64,
    gauss: f64,
    clamped: bool,
    dx: f64,
    dy: f64,
    t: f64,
}

#[inline]
fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn check_len(what: &'static str, got: usize, expected: usize) -> Result<(), RenderError> {
    if got == expected {
        Ok(())
    } else {
        Err(RenderError::SizeMismatch { what, got, expected })
    }
}

/// Gradients of `L` given `∂L/∂plane` for a frame rendered with the same
/// splats, camera, background and options.
pub fn render_backward(
    splats: &[Splat],
    cam: &Camera,
    upstream: &PixelGradients,
    background: [f64; 3],
    opts: &RenderOptions,
) -> Result<RenderGradients, RenderError> {
    let n_pix = cam.width * cam.height;
    if let Some(g) = &upstream.rgb {
        check_len("rgb gradient", g.len(), n_pix)?;
    }
    if let Some(g) = &upstream.normal {
        check_len("normal gradient", g.len(), n_pix)?;
    }
    if let Some(g) = &upstream.depth {
        check_len("depth gradient", g.len(), n_pix)?;
    }
    let covs: Vec<SymMat3> = splats.par_iter().map(|s| sym_from_mat(&s.covariance())).collect();
    let prep = prepare(splats, &covs, cam);
    let n_tiles = prep.tiles_x * prep.tiles_y;

    let per_tile: Vec<Vec<ScreenGrad>> = (0..n_tiles)
        .into_par_iter()
        .map(|t| tile_backward(&prep, t, cam, upstream, background, opts))
        .collect();

    // Sequential reduction in tile order keeps the sums deterministic.
    let mut screen = vec![ScreenGrad::default(); prep.packed.len()];
    for (t, grads) in per_tile.iter().enumerate() {
        for (g, &k) in grads.iter().zip(prep.tile(t)) {
            screen[k as usize].add(g);
        }
    }

    let per_splat: Vec<(usize, SplatGrad)> = prep
        .packed
        .par_iter()
        .zip(prep.source.par_iter())
        .zip(screen.par_iter())
        .map(|((p, &i), g)| {
            let i = i as usize;
            (i, chain_to_params(&splats[i], &covs[i], [p.ca, p.cb, p.cc], g, cam))
        })
        .collect();
    let mut out = RenderGradients::zeros(splats.len());
    for (i, g) in per_splat {
        out.center[i] = g.center;
        out.scales[i] = g.scales;
        out.quaternion[i] = g.quaternion;
        out.opacity[i] = g.opacity;
        out.color[i] = g.color;
        out.normal[i] = g.normal;
    }
    Ok(out)
}

fn tile_backward(
    prep: &Prepared,
    t: usize,
    cam: &Camera,
    up: &PixelGradients,
    background: [f64; 3],
    opts: &RenderOptions,
) -> Vec<ScreenGrad> {
    let ids = prep.tile(t);
    let list: Vec<Packed> = ids.iter().map(|&k| prep.packed[k as usize]).collect();
    let mut acc = vec![ScreenGrad::default(); list.len()];
    let want_normal = up.normal.is_some();
    let mut contribs = Vec::new();
    let (x0, y0, x1, y1) = prep.tile_rect(t, cam);
    for y in y0..y1 {
        for x in x0..x1 {
            let i = y * cam.width + x;
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            contribs.clear();
            let mut tr = 1.0;
            let mut nraw = [0.0; 3];
            for (slot, s) in list.iter().enumerate() {
                let Some(h) = hit(s, px, py, opts.alpha_max) else { continue };
                if want_normal {
                    for c in 0..3 {
                        nraw[c] += tr * h.alpha * s.normal[c];
                    }
                }
                contribs.push(Contribution {
                    slot,
                    alpha: h.alpha,
                    gauss: h.gauss,
                    clamped: h.clamped,
                    dx: h.dx,
                    dy: h.dy,
                    t: tr,
                });
                tr *= 1.0 - h.alpha;
                if opts.early_termination && tr < super::T_MIN {
                    break;
                }
            }
            if contribs.is_empty() {
                continue;
            }
            let g_rgb = up.rgb.as_ref().map_or([0.0; 3], |g| g[i]);
            let g_d = up.depth.as_ref().map_or(0.0, |g| g[i]);
            let g_n = match &up.normal {
                Some(g) => {
                    let len = dot3(nraw, nraw).sqrt();
                    if len > 1e-12 {
                        let n = nraw.map(|c| c / len);
                        let proj = dot3(n, g[i]);
                        [0, 1, 2].map(|c| (g[i][c] - n[c] * proj) / len)
                    } else {
                        [0.0; 3]
                    }
                }
                None => [0.0; 3],
            };
            let mut r_rgb = background;
            let mut r_n = [0.0; 3];
            let mut r_d = 0.0;
            for c in contribs.iter().rev() {
                let s = &list[c.slot];
                let g = &mut acc[c.slot];
                let w = c.t * c.alpha;
                for k in 0..3 {
                    g.color[k] += w * g_rgb[k];
                    g.normal[k] += w * g_n[k];
                }
                g.depth += w * g_d;
                let mut d_alpha = 0.0;
                for k in 0..3 {
                    d_alpha += g_rgb[k] * (s.color[k] - r_rgb[k]) + g_n[k] * (s.normal[k] - r_n[k]);
                }
                d_alpha = c.t * (d_alpha + g_d * (s.depth - r_d));
                for k in 0..3 {
                    r_rgb[k] = c.alpha * s.color[k] + (1.0 - c.alpha) * r_rgb[k];
                    r_n[k] = c.alpha * s.normal[k] + (1.0 - c.alpha) * r_n[k];
                }
                r_d = c.alpha * s.depth + (1.0 - c.alpha) * r_d;
                if c.clamped {
                    continue;
                }
                g.opacity += d_alpha * c.gauss;
                let d_power = d_alpha * c.alpha;
                g.conic[0] += d_power * (-0.5 * c.dx * c.dx);
                g.conic[1] += d_power * (-c.dx * c.dy);
                g.conic[2] += d_power * (-0.5 * c.dy * c.dy);
                g.mean[0] += d_power * (s.ca * c.dx + s.cb * c.dy);
                g.mean[1] += d_power * (s.cc * c.dy + s.cb * c.dx);
            }
        }
    }
    acc
}

struct SplatGrad {
    center: Vec3,
    scales: Vec3,
    quaternion: [f64; 4],
    opacity: f64,
    color: Vec3,
    normal: Vec3,
}

fn chain_to_params(splat: &Splat, cov: &SymMat3, conic: [f64; 3], g: &ScreenGrad, cam: &Camera) -> SplatGrad {
    // Conic to screen covariance: G_Σs = -A · G_A · A with G_A symmetric.
    let [a, b, c] = conic;
    let (ga, gb, gc) = (g.conic[0], 0.5 * g.conic[1], g.conic[2]);
    let ag = [[a * ga + b * gb, a * gb + b * gc], [b * ga + c * gb, b * gb + c * gc]];
    let s_xx = -(ag[0][0] * a + ag[0][1] * b);
    let s_xy = -(ag[0][0] * b + ag[0][1] * c);
    let s_yy = -(ag[1][0] * b + ag[1][1] * c);
    let gs = [[s_xx, s_xy], [s_xy, s_yy]];

    let pc = cam.to_camera(&splat.center);
    let (k0, k1) = screen_jacobian_rows(&pc, cam);
    let k = [k0, k1];
    let sigma = crate::gaussians::mat_from_sym(cov);

    // Σs = K Σ Kᵀ: G_Σ = Kᵀ G_Σs K and G_K = 2 G_Σs K Σ.
    let mut g_sigma = Mat3::zeros();
    for i in 0..3 {
        for j in 0..3 {
            let mut v = 0.0;
            for r in 0..2 {
                for s in 0..2 {
                    v += k[r][i] * gs[r][s] * k[s][j];
                }
            }
            g_sigma[(i, j)] = v;
        }
    }
    let mut ks = [[0.0; 3]; 2];
    for r in 0..2 {
        for j in 0..3 {
            ks[r][j] = (0..3).map(|i| k[r][i] * sigma[(i, j)]).sum();
        }
    }
    let mut g_k = [[0.0; 3]; 2];
    for r in 0..2 {
        for j in 0..3 {
            g_k[r][j] = 2.0 * (gs[r][0] * ks[0][j] + gs[r][1] * ks[1][j]);
        }
    }
    // K = J T, so G_J = G_K Tᵀ.
    let t = &cam.rotation;
    let gj = |r: usize, col: usize| (0..3).map(|j| g_k[r][j] * t[(col, j)]).sum::<f64>();
    let (x, y, z) = (pc.x, pc.y, pc.z);
    let (fx, fy) = (cam.fx, cam.fy);
    let iz = 1.0 / z;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    let mut gp = Vec3::zeros();
    gp.x += gj(0, 2) * (-fx * iz2);
    gp.y += gj(1, 2) * (-fy * iz2);
    gp.z += gj(0, 0) * (-fx * iz2) + gj(0, 2) * (2.0 * fx * x * iz3) + gj(1, 1) * (-fy * iz2)
        + gj(1, 2) * (2.0 * fy * y * iz3);
    gp.x += g.mean[0] * fx * iz;
    gp.y += g.mean[1] * fy * iz;
    gp.z += -g.mean[0] * fx * x * iz2 - g.mean[1] * fy * y * iz2;
    gp.z += g.depth;
    let center = t.transpose() * gp;

    // Σ = Rᵀ diag(σ²) R with the rows r_i of R as principal axes.
    let qn = crate::gaussians::quat_normalize(splat.quaternion).unwrap_or([1.0, 0.0, 0.0, 0.0]);
    let rot = crate::gaussians::quat_to_rotation(qn);
    let mut scales = Vec3::zeros();
    let mut g_r = Mat3::zeros();
    for i in 0..3 {
        let ri = rot.row(i).transpose();
        let gr = g_sigma * ri;
        let si = splat.scales[i];
        scales[i] = 2.0 * si * ri.dot(&gr);
        for j in 0..3 {
            g_r[(i, j)] = 2.0 * si * si * gr[j];
        }
    }
    let [w, qx, qy, qz] = qn;
    let gm = |i: usize, j: usize| g_r[(i, j)];
    let dq = [
        2.0 * (-qz * gm(0, 1) + qy * gm(0, 2) + qz * gm(1, 0) - qx * gm(1, 2) - qy * gm(2, 0) + qx * gm(2, 1)),
        2.0 * (qy * gm(0, 1) + qz * gm(0, 2) + qy * gm(1, 0) - 2.0 * qx * gm(1, 1) - w * gm(1, 2)
            + qz * gm(2, 0)
            + w * gm(2, 1)
            - 2.0 * qx * gm(2, 2)),
        2.0 * (-2.0 * qy * gm(0, 0) + qx * gm(0, 1) + w * gm(0, 2) + qx * gm(1, 0) + qz * gm(1, 2)
            - w * gm(2, 0)
            + qz * gm(2, 1)
            - 2.0 * qy * gm(2, 2)),
        2.0 * (-2.0 * qz * gm(0, 0) - w * gm(0, 1) + qx * gm(0, 2) + w * gm(1, 0) - 2.0 * qz * gm(1, 1)
            + qy * gm(1, 2)
            + qx * gm(2, 0)
            + qy * gm(2, 1)),
    ];
    let norm = splat.quaternion.iter().map(|c| c * c).sum::<f64>().sqrt();
    let proj: f64 = (0..4).map(|i| qn[i] * dq[i]).sum();
    let quaternion = if norm > 0.0 {
        [0, 1, 2, 3].map(|i| (dq[i] - qn[i] * proj) / norm)
    } else {
        [0.0; 4]
    };

    SplatGrad {
        center,
        scales,
        quaternion,
        opacity: g.opacity,
        color: Vec3::from(g.color),
        normal: Vec3::from(g.normal),
    }
}

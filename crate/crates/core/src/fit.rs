//! Per-scene Gaussian optimization against posed target images.
//!
//! The loss combines a mean L1 photometric term with a normal term that
//! is invariant to the sign of the normal:
//!
//! ```text
//! L = w1 · mean|I − Î| + w2 · mean_valid( ‖n × n̂‖ + w3 · min(‖n − n̂‖, ‖n + n̂‖) )
//! ```
//!
//! The photometric mean runs over all pixels and channels, the normal mean
//! over pixels whose target normal is nonzero.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::gaussians::{quat_normalize, Camera, Splat};
use crate::imagebuf::Image;
use crate::rasterizer::{render_backward, render_with, PixelGradients, RenderError, RenderGradients, RenderMode, RenderOptions};
use crate::Vec3;

#[derive(Debug, thiserror::Error)]
pub enum FitError {
    #[error("{what} is {got_w}×{got_h}, camera is {want_w}×{want_h}")]
    DimensionMismatch {
        what: &'static str,
        got_w: usize,
        got_h: usize,
        want_w: usize,
        want_h: usize,
    },
    #[error("fitting needs at least one view")]
    NoViews,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite {group} at iteration {iteration}")]
    NonFinite { iteration: usize, group: &'static str },
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error("{}: {source}", path.display())]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

type Result<T> = std::result::Result<T, FitError>;

/// A posed target. Zero vectors in `target_normal` mark background.
#[derive(Clone, Debug)]
pub struct TrainView {
    pub camera: Camera,
    pub target_rgb: Image,
    pub target_normal: Option<Image>,
}

impl TrainView {
    pub fn new(camera: Camera, target_rgb: Image, target_normal: Option<Image>) -> Result<Self> {
        let v = Self {
            camera,
            target_rgb,
            target_normal,
        };
        v.check()?;
        Ok(v)
    }

    fn check(&self) -> Result<()> {
        let (w, h) = (self.camera.width, self.camera.height);
        let mismatch = |what, img: &Image| FitError::DimensionMismatch {
            what,
            got_w: img.width,
            got_h: img.height,
            want_w: w,
            want_h: h,
        };
        if self.target_rgb.width != w || self.target_rgb.height != h {
            return Err(mismatch("target rgb", &self.target_rgb));
        }
        if let Some(n) = &self.target_normal {
            if n.width != w || n.height != h {
                return Err(mismatch("target normal", n));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w1: 1.0,
            w2: 10.0,
            w3: 0.1,
        }
    }
}

/// Adam step sizes per parameter group. A zero rate freezes the group.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LearningRates {
    pub center: f64,
    pub log_scale: f64,
    pub quaternion: f64,
    pub opacity_logit: f64,
    pub color: f64,
    pub normal: f64,
}

impl LearningRates {
    /// Defaults; the center rate scales with the scene extent.
    pub fn for_extent(extent: f64) -> Self {
        Self {
            center: 1.6e-4 * extent,
            log_scale: 5e-3,
            quaternion: 1e-3,
            opacity_logit: 5e-2,
            color: 2.5e-3,
            normal: 1e-3,
        }
    }

    fn all(&self) -> [f64; 6] {
        [self.center, self.log_scale, self.quaternion, self.opacity_logit, self.color, self.normal]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitConfig {
    pub iterations: usize,
    pub rates: LearningRates,
    pub weights: LossWeights,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub background: [f64; 3],
    pub render: RenderOptions,
}

impl FitConfig {
    pub fn new(iterations: usize, scene_extent: f64) -> Self {
        Self {
            iterations,
            rates: LearningRates::for_extent(scene_extent),
            weights: LossWeights::default(),
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-15,
            background: [0.0; 3],
            render: RenderOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(FitError::InvalidConfig("iterations must be at least 1".into()));
        }
        if !self.rates.all().iter().all(|r| *r >= 0.0 && r.is_finite()) {
            return Err(FitError::InvalidConfig(format!("learning rates must be non-negative: {:?}", self.rates)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return Err(FitError::InvalidConfig("moments need β in [0, 1) and ε > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    /// Mean absolute RGB error, before weighting.
    pub rgb: f64,
    /// Mean normal term over valid pixels, before weighting.
    pub normal: f64,
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    pub terms: LossTerms,
    pub grads: PixelGradients,
    /// Each pixel's share of `terms.total`.
    pub per_pixel: Vec<f64>,
}

#[inline]
fn norm3(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

#[inline]
fn cross3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

/// Norm below which `‖n × n̂‖` is treated as non-differentiable.
const CROSS_EPS: f64 = 1e-8;

/// Per-pixel normal term and its gradient with respect to `n`.
pub fn normal_term(n: [f64; 3], target: [f64; 3], w3: f64) -> (f64, [f64; 3]) {
    let c = cross3(n, target);
    let cn = norm3(c);
    let mut g = if cn < CROSS_EPS {
        [0.0; 3]
    } else {
        cross3(target, c).map(|v| v / cn)
    };
    let minus = [n[0] - target[0], n[1] - target[1], n[2] - target[2]];
    let plus = [n[0] + target[0], n[1] + target[1], n[2] + target[2]];
    let (dm, dp) = (norm3(minus), norm3(plus));
    let (d, dn) = if dm <= dp { (minus, dm) } else { (plus, dp) };
    if dn > 0.0 {
        for k in 0..3 {
            g[k] += w3 * d[k] / dn;
        }
    }
    (cn + w3 * dn, g)
}

/// Loss of a rendered frame against a view, with `∂L/∂plane`.
pub fn loss(rendered_rgb: &Image, rendered_normal: Option<&Image>, view: &TrainView, w: &LossWeights) -> Result<LossOutput> {
    view.check()?;
    let (width, height) = (view.camera.width, view.camera.height);
    let check = |what, img: &Image| {
        if img.width != width || img.height != height {
            Err(FitError::DimensionMismatch {
                what,
                got_w: img.width,
                got_h: img.height,
                want_w: width,
                want_h: height,
            })
        } else {
            Ok(())
        }
    };
    check("rendered rgb", rendered_rgb)?;
    let n_pix = width * height;

    let scale = w.w1 / (3 * n_pix) as f64;
    let mut rgb_sum = 0.0;
    let mut g_rgb = vec![[0.0; 3]; n_pix];
    let mut per_pixel = vec![0.0; n_pix];
    for (i, (r, t)) in rendered_rgb.data.iter().zip(&view.target_rgb.data).enumerate() {
        for c in 0..3 {
            let d = r[c] - t[c];
            rgb_sum += d.abs();
            per_pixel[i] += scale * d.abs();
            // Subgradient 0 at d = 0.
            g_rgb[i][c] = if d > 0.0 {
                scale
            } else if d < 0.0 {
                -scale
            } else {
                0.0
            };
        }
    }
    let rgb_term = rgb_sum / (3 * n_pix) as f64;

    let mut normal_mean = 0.0;
    let mut g_normal = None;
    if let (Some(target), true) = (&view.target_normal, w.w2 != 0.0) {
        let rendered = rendered_normal.ok_or(RenderError::MissingPlane(RenderMode::Normal))?;
        check("rendered normal", rendered)?;
        let valid: Vec<usize> = (0..n_pix).filter(|&i| target.data[i] != [0.0; 3]).collect();
        let mut g = vec![[0.0; 3]; n_pix];
        if !valid.is_empty() {
            let inv = 1.0 / valid.len() as f64;
            let mut sum = 0.0;
            for &i in &valid {
                let (v, gi) = normal_term(rendered.data[i], target.data[i], w.w3);
                sum += v;
                per_pixel[i] += w.w2 * v * inv;
                g[i] = gi.map(|x| x * w.w2 * inv);
            }
            normal_mean = sum * inv;
        }
        g_normal = Some(g);
    }

    Ok(LossOutput {
        terms: LossTerms {
            total: w.w1 * rgb_term + w.w2 * normal_mean,
            rgb: rgb_term,
            normal: normal_mean,
        },
        grads: PixelGradients {
            rgb: Some(g_rgb),
            normal: g_normal,
            depth: None,
        },
        per_pixel,
    })
}

fn wants_normal(view: &TrainView, w: &LossWeights) -> bool {
    view.target_normal.is_some() && w.w2 != 0.0
}

/// Renders `splats` for `view` and evaluates the loss.
pub fn evaluate(splats: &[Splat], view: &TrainView, cfg: &FitConfig) -> Result<LossOutput> {
    let mode = if wants_normal(view, &cfg.weights) {
        RenderMode::Normal
    } else {
        RenderMode::Rgb
    };
    let fb = render_with(splats, &view.camera, mode, cfg.background, &cfg.render)?;
    loss(&fb.rgb, fb.normal.as_ref(), view, &cfg.weights)
}

/// Loss and its gradient with respect to every splat parameter.
pub fn loss_and_gradients(splats: &[Splat], view: &TrainView, cfg: &FitConfig) -> Result<(LossTerms, RenderGradients)> {
    let out = evaluate(splats, view, cfg)?;
    let grads = render_backward(splats, &view.camera, &out.grads, cfg.background, &cfg.render)?;
    Ok((out.terms, grads))
}

const OPACITY_EPS: f64 = 1e-4;

fn logit(o: f64) -> f64 {
    let o = o.clamp(OPACITY_EPS, 1.0 - OPACITY_EPS);
    (o / (1.0 - o)).ln()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Adam state for one flat parameter block.
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, cfg: &FitConfig, t: i32) {
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + cfg.epsilon);
        }
    }
}

/// Flattened optimizer-space parameters.
struct Params {
    center: Vec<f64>,
    log_scale: Vec<f64>,
    quaternion: Vec<f64>,
    opacity_logit: Vec<f64>,
    color: Vec<f64>,
    normal: Vec<f64>,
}

impl Params {
    fn from_splats(s: &[Splat]) -> Self {
        Self {
            center: s.iter().flat_map(|s| s.center.iter().copied().collect::<Vec<_>>()).collect(),
            log_scale: s.iter().flat_map(|s| s.scales.iter().map(|v| v.ln()).collect::<Vec<_>>()).collect(),
            quaternion: s.iter().flat_map(|s| s.quaternion).collect(),
            opacity_logit: s.iter().map(|s| logit(s.opacity)).collect(),
            color: s.iter().flat_map(|s| s.color.iter().copied().collect::<Vec<_>>()).collect(),
            normal: s.iter().flat_map(|s| s.normal.iter().copied().collect::<Vec<_>>()).collect(),
        }
    }

    fn write_splats(&self, out: &mut [Splat]) {
        for (i, s) in out.iter_mut().enumerate() {
            let v3 = |p: &[f64]| Vec3::new(p[3 * i], p[3 * i + 1], p[3 * i + 2]);
            s.center = v3(&self.center);
            s.scales = v3(&self.log_scale).map(f64::exp);
            let q = &self.quaternion[4 * i..4 * i + 4];
            s.quaternion = quat_normalize([q[0], q[1], q[2], q[3]]).unwrap_or([1.0, 0.0, 0.0, 0.0]);
            s.opacity = sigmoid(self.opacity_logit[i]).clamp(OPACITY_EPS, 1.0 - OPACITY_EPS);
            s.color = v3(&self.color).map(|c| c.clamp(0.0, 1.0));
            s.normal = v3(&self.normal).try_normalize(1e-12).unwrap_or(s.normal);
        }
    }

    /// Pulls the constrained values back so the optimizer state matches what
    /// was rendered.
    fn sync(&mut self, s: &[Splat]) {
        for (i, s) in s.iter().enumerate() {
            self.quaternion[4 * i..4 * i + 4].copy_from_slice(&s.quaternion);
            for k in 0..3 {
                self.color[3 * i + k] = s.color[k];
                self.normal[3 * i + k] = s.normal[k];
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub splats: Vec<Splat>,
    /// Loss before each optimizer step, one entry per iteration.
    pub history: Vec<LossTerms>,
}

fn finite_or(iteration: usize, group: &'static str, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(FitError::NonFinite { iteration, group })
    }
}

/// Adam over `cfg.iterations` steps, cycling through `views`. Scales are
/// optimized as logarithms and opacity as a logit; after every step
/// quaternions and normals are renormalized and colors clamped to `[0, 1]`.
pub fn fit_scene(initial: &[Splat], views: &[TrainView], cfg: &FitConfig) -> Result<FitResult> {
    cfg.validate()?;
    if views.is_empty() {
        return Err(FitError::NoViews);
    }
    for v in views {
        v.check()?;
    }
    let n = initial.len();
    let mut splats = initial.to_vec();
    let mut params = Params::from_splats(&splats);
    let mut opt: Vec<Adam> = [3, 3, 4, 1, 3, 3].iter().map(|&k| Adam::new(k * n)).collect();
    let mut history = Vec::with_capacity(cfg.iterations);

    for it in 0..cfg.iterations {
        let view = &views[it % views.len()];
        let (terms, g) = loss_and_gradients(&splats, view, cfg)?;
        if !terms.total.is_finite() {
            return Err(FitError::NonFinite { iteration: it, group: "loss" });
        }
        history.push(terms);

        let center: Vec<f64> = g.center.iter().flat_map(|v| [v.x, v.y, v.z]).collect();
        let log_scale: Vec<f64> = g
            .scales
            .iter()
            .zip(&splats)
            .flat_map(|(gs, s)| [gs.x * s.scales.x, gs.y * s.scales.y, gs.z * s.scales.z])
            .collect();
        let quaternion: Vec<f64> = g.quaternion.iter().flatten().copied().collect();
        let opacity: Vec<f64> = g.opacity.iter().zip(&splats).map(|(go, s)| go * s.opacity * (1.0 - s.opacity)).collect();
        let color: Vec<f64> = g.color.iter().flat_map(|v| [v.x, v.y, v.z]).collect();
        let normal: Vec<f64> = g.normal.iter().flat_map(|v| [v.x, v.y, v.z]).collect();
        let groups: [(&'static str, &Vec<f64>); 6] = [
            ("center", &center),
            ("log_scale", &log_scale),
            ("quaternion", &quaternion),
            ("opacity_logit", &opacity),
            ("color", &color),
            ("normal", &normal),
        ];
        for (name, v) in &groups {
            finite_or(it, name, v)?;
        }

        let t = (it + 1) as i32;
        let rates = cfg.rates.all();
        let blocks = [
            &mut params.center,
            &mut params.log_scale,
            &mut params.quaternion,
            &mut params.opacity_logit,
            &mut params.color,
            &mut params.normal,
        ];
        for (k, block) in blocks.into_iter().enumerate() {
            opt[k].step(block, groups[k].1, rates[k], cfg, t);
        }
        params.write_splats(&mut splats);
        params.sync(&splats);
        for (i, s) in splats.iter().enumerate() {
            if s.validate(i).is_err() {
                return Err(FitError::NonFinite { iteration: it, group: "splat" });
            }
        }
    }
    Ok(FitResult { splats, history })
}

/// Writes `iteration,total,rgb_term,normal_term` rows.
pub fn write_history_csv(path: &Path, history: &[LossTerms]) -> Result<()> {
    let io = |source| FitError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    writeln!(w, "iteration,total,rgb_term,normal_term").map_err(io)?;
    for (i, h) in history.iter().enumerate() {
        writeln!(w, "{i},{},{},{}", h.total, h.rgb, h.normal).map_err(io)?;
    }
    w.flush().map_err(io)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Center,
    Scale,
    Quaternion,
    Opacity,
    Color,
    Normal,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::Center,
        ParamGroup::Scale,
        ParamGroup::Quaternion,
        ParamGroup::Opacity,
        ParamGroup::Color,
        ParamGroup::Normal,
    ];

    pub fn len(self) -> usize {
        match self {
            ParamGroup::Quaternion => 4,
            ParamGroup::Opacity => 1,
            _ => 3,
        }
    }

    fn get(self, s: &Splat, k: usize) -> f64 {
        match self {
            ParamGroup::Center => s.center[k],
            ParamGroup::Scale => s.scales[k],
            ParamGroup::Quaternion => s.quaternion[k],
            ParamGroup::Opacity => s.opacity,
            ParamGroup::Color => s.color[k],
            ParamGroup::Normal => s.normal[k],
        }
    }

    fn set(self, s: &mut Splat, k: usize, v: f64) {
        match self {
            ParamGroup::Center => s.center[k] = v,
            ParamGroup::Scale => s.scales[k] = v,
            ParamGroup::Quaternion => s.quaternion[k] = v,
            ParamGroup::Opacity => s.opacity = v,
            ParamGroup::Color => s.color[k] = v,
            ParamGroup::Normal => s.normal[k] = v,
        }
    }

    fn analytic(self, g: &RenderGradients, i: usize, k: usize) -> f64 {
        match self {
            ParamGroup::Center => g.center[i][k],
            ParamGroup::Scale => g.scales[i][k],
            ParamGroup::Quaternion => g.quaternion[i][k],
            ParamGroup::Opacity => g.opacity[i],
            ParamGroup::Color => g.color[i][k],
            ParamGroup::Normal => g.normal[i][k],
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradSample {
    pub splat: usize,
    pub group: ParamGroup,
    pub component: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// `|a − n| / max(|a|, |n|)`, zero when both vanish.
    pub rel_error: f64,
    pub abs_error: f64,
}

impl GradSample {
    pub fn passes(&self, rel: f64, abs: f64) -> bool {
        self.rel_error <= rel || self.abs_error <= abs
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradcheckReport {
    pub samples: Vec<GradSample>,
}

/// Default acceptance for one sampled component.
pub const GRADCHECK_REL_TOL: f64 = 1e-3;
pub const GRADCHECK_ABS_TOL: f64 = 1e-6;

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.samples.iter().map(|s| s.rel_error).fold(0.0, f64::max)
    }

    /// Fraction passing the default tolerances; 1 for an empty report.
    pub fn pass_fraction(&self) -> f64 {
        if self.samples.is_empty() {
            return 1.0;
        }
        let ok = self
            .samples
            .iter()
            .filter(|s| s.passes(GRADCHECK_REL_TOL, GRADCHECK_ABS_TOL))
            .count();
        ok as f64 / self.samples.len() as f64
    }
}

/// Central-difference step for parameter value `v`.
pub fn fd_step(v: f64) -> f64 {
    1e-4 * v.abs().max(1e-3)
}

/// Compares analytic loss gradients with central differences on `samples`
/// randomly drawn parameter components.
pub fn gradcheck(splats: &[Splat], view: &TrainView, cfg: &FitConfig, samples: usize, seed: u64) -> Result<GradcheckReport> {
    if splats.is_empty() {
        return Ok(GradcheckReport::default());
    }
    let (_, grads) = loss_and_gradients(splats, view, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(samples);
    let mut work = splats.to_vec();
    for _ in 0..samples {
        let i = rng.gen_range(0..splats.len());
        let group = ParamGroup::ALL[rng.gen_range(0..6)];
        let k = rng.gen_range(0..group.len());
        let v = group.get(&splats[i], k);
        let h = fd_step(v);
        group.set(&mut work[i], k, v + h);
        let up = evaluate(&work, view, cfg)?.per_pixel;
        group.set(&mut work[i], k, v - h);
        let down = evaluate(&work, view, cfg)?.per_pixel;
        group.set(&mut work[i], k, v);
        // Differencing per pixel first keeps untouched pixels exactly zero.
        let numeric = up.iter().zip(&down).map(|(a, b)| a - b).sum::<f64>() / (2.0 * h);
        let analytic = group.analytic(&grads, i, k);
        let abs_error = (analytic - numeric).abs();
        let denom = analytic.abs().max(numeric.abs());
        out.push(GradSample {
            splat: i,
            group,
            component: k,
            analytic,
            numeric,
            rel_error: if denom > 0.0 { abs_error / denom } else { 0.0 },
            abs_error,
        });
    }
    Ok(GradcheckReport { samples: out })
}

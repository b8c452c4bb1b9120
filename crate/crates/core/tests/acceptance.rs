//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion.
//!
//! The process exits with status 0 after reporting, so that a FAIL on a
//! criterion bound to hardware (latency) does not mask the others in a
//! workspace test run. Set `ACCEPTANCE_STRICT=1` to exit with status 1 when
//! any criterion fails.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::ThreadPoolBuilder;
use rustc_hash::FxHashMap;
use splatforge::estimators::{estimate, estimate_local_pca, EstimatorConfig, EstimatorKind};
use splatforge::evalkit::{circle_cameras, hole_ratio, make_scene, psnr, render_1px_points, SceneKind};
use splatforge::fit::{fit_scene, gradcheck, FitConfig, ParamGroup, TrainView};
use splatforge::gaussians::{quat_normalize, Camera, Splat};
use splatforge::pcio::{normalize_to_unit_box, quantize, PointCloud, QuantizationSpec};
use splatforge::rasterizer::{bench_render, render_reference, render_with, FrameBuffer, RenderMode, RenderOptions, SplatSet};
use splatforge::sparsenet::{init_random, Layer, LayerSpec, NetworkPlan};
use splatforge::sparsenet::{shared_mlp, sparse_conv, transposed_conv_pruned, unet_forward, unet_forward_voxels};
use splatforge::voxelgrid::{floor_to_stride, voxelize_adaptive, Coord, INPUT_CHANNELS};
use splatforge::{SparseVoxelGrid, Vec3};

// Tolerances and budgets.
const BLEND_TOL: f64 = 1e-6;
const BLEND_SCENES: usize = 200;
const BLEND_MAX_SPLATS: usize = 200;
const BLEND_BUDGET: Duration = Duration::from_secs(60);
const UNITY_TOL: f64 = 1e-6;
const GRAD_SCENES: usize = 20;
const GRAD_MAX_SPLATS: usize = 50;
const GRAD_SAMPLES_PER_SCENE: usize = 120;
const GRAD_REL_TOL: f64 = 1e-3;
const GRAD_ABS_TOL: f64 = 1e-6;
const GRAD_COLOR_REL_TOL: f64 = 1e-6;
const GRAD_PASS_FRACTION: f64 = 0.95;
const GRAD_BUDGET: Duration = Duration::from_secs(120);
const CONV_GRIDS: usize = 50;
const CONV_MAX_SIDE: i32 = 16;
const CONV_TOL: f64 = 1e-5;
const HOLE_POINTS: usize = 20_000;
const HOLE_SPLAT_MAX: f64 = 0.001;
const HOLE_POINTS_MIN: f64 = 0.01;
const QUALITY_POINTS: usize = 50_000;
const QUALITY_MIN_PSNR: f64 = 25.0;
const QUALITY_MAX_QUANT_DROP: f64 = 2.0;
const REFERENCE_SUPERSAMPLING: usize = 4;
const RECOVERY_SEEDS: u64 = 10;
const RECOVERY_ITERATIONS: usize = 500;
const RECOVERY_CENTER_TOL: f64 = 0.01;
const RECOVERY_OPACITY_TOL: f64 = 0.05;
const LATENCY_POINTS: usize = 280_000;
const LATENCY_RENDER_MS: f64 = 50.0;
const LATENCY_PREPROCESS_MS: f64 = 2000.0;
const LATENCY_RENDER_ITERATIONS: usize = 10;
const DETERMINISM_THREADS: [usize; 4] = [1, 2, 4, 8];

// Evaluation protocol: 12 equidistant views on a circle around the scene.
const VIEWS: usize = 12;
const VIEW_DISTANCE: f64 = 3.0;
const VIEW_FOCAL: f64 = 600.0;
const VIEW_SIZE: usize = 512;
const BACKGROUND: [f64; 3] = [0.0; 3];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("blending_oracle", blending_oracle),
        ("partition_of_unity", partition_of_unity),
        ("gradient_check", gradient_check),
        ("sparse_conv_oracle", sparse_conv_oracle),
        ("hole_free_splatting", hole_free),
        ("quality_floor", quality_floor),
        ("single_gaussian_recovery", single_gaussian_recovery),
        ("latency", latency),
        ("determinism", determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let o = run();
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        failed += usize::from(!o.pass);
        println!("{verdict} {name}: {} [{:.1} s]", o.detail, start.elapsed().as_secs_f64());
    }
    if failed > 0 && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------------
// Scenes
// ---------------------------------------------------------------------------

fn random_splat(rng: &mut ChaCha8Rng, spread: f64, scale: (f64, f64)) -> Splat {
    let mut axis = || rng.gen_range(-1.0..1.0);
    let q = quat_normalize([axis(), axis(), axis(), axis()]).unwrap();
    let normal = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    let mut s = || rng.gen_range(scale.0..scale.1);
    let scales = Vec3::new(s(), s(), s());
    Splat {
        center: Vec3::new(rng.gen_range(-spread..spread), rng.gen_range(-spread..spread), rng.gen_range(-spread..spread)),
        scales,
        quaternion: q,
        opacity: rng.gen_range(0.05..1.0),
        color: Vec3::new(rng.gen(), rng.gen(), rng.gen()),
        normal: normal.try_normalize(1e-9).unwrap_or(Vec3::z()),
    }
}

fn random_scene(rng: &mut ChaCha8Rng, max_splats: usize) -> Vec<Splat> {
    let n = rng.gen_range(1..=max_splats);
    (0..n).map(|_| random_splat(rng, 0.8, (0.01, 0.25))).collect()
}

fn oracle_camera(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Camera {
    let dir = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    let dir = dir.try_normalize(1e-6).unwrap_or(Vec3::z());
    let up = if dir.y.abs() > 0.9 { Vec3::x() } else { Vec3::y() };
    Camera::look_at(dir * rng.gen_range(2.5..4.0), Vec3::zeros(), up, rng.gen_range(40.0..90.0), w, h).unwrap()
}

fn views() -> Vec<Camera> {
    circle_cameras(Vec3::zeros(), VIEW_DISTANCE, VIEWS, VIEW_FOCAL, VIEW_SIZE, VIEW_SIZE).unwrap()
}

fn pca(cloud: &PointCloud) -> Vec<Splat> {
    estimate_local_pca(cloud, &EstimatorConfig::new(EstimatorKind::LocalPca)).unwrap()
}

const MODES: [RenderMode; 3] = [RenderMode::Rgb, RenderMode::Normal, RenderMode::Depth];

// ---------------------------------------------------------------------------
// Criteria
// ---------------------------------------------------------------------------

fn max_frame_diff(a: &FrameBuffer, b: &FrameBuffer) -> f64 {
    let mut worst: f64 = 0.0;
    let mut upd = |x: f64, y: f64| worst = worst.max((x - y).abs());
    for (p, q) in a.rgb.data.iter().zip(&b.rgb.data) {
        (0..3).for_each(|c| upd(p[c], q[c]));
    }
    for (p, q) in a.transmittance.iter().zip(&b.transmittance) {
        upd(*p, *q);
    }
    if let (Some(na), Some(nb)) = (&a.normal, &b.normal) {
        for (p, q) in na.data.iter().zip(&nb.data) {
            (0..3).for_each(|c| upd(p[c], q[c]));
        }
    }
    if let (Some(da), Some(db)) = (&a.depth, &b.depth) {
        for (p, q) in da.iter().zip(db) {
            upd(*p, *q);
        }
    }
    worst
}

fn blending_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xB1E4D);
    let opts = RenderOptions::default();
    let mut worst: f64 = 0.0;
    let mut shape_ok = true;
    for _ in 0..BLEND_SCENES {
        let splats = random_scene(&mut rng, BLEND_MAX_SPLATS);
        let cam = oracle_camera(&mut rng, 64, 64);
        for mode in MODES {
            let tiled = render_with(&splats, &cam, mode, [0.1, 0.2, 0.3], &opts).unwrap();
            let reference = render_reference(&splats, &cam, mode, [0.1, 0.2, 0.3], &opts).unwrap();
            shape_ok &= tiled.normal.is_some() == reference.normal.is_some() && tiled.depth.is_some() == reference.depth.is_some();
            worst = worst.max(max_frame_diff(&tiled, &reference));
        }
    }
    let elapsed = start.elapsed();
    outcome(
        shape_ok && worst <= BLEND_TOL && elapsed < BLEND_BUDGET,
        format!(
            "{BLEND_SCENES} scenes x 3 modes at 64x64, max |tiled - reference| = {worst:.3e} (tol {BLEND_TOL:e}), {:.1} s (budget {} s)",
            elapsed.as_secs_f64(),
            BLEND_BUDGET.as_secs()
        ),
    )
}

fn partition_of_unity() -> Outcome {
    // White splats on a black background render Σ T_k α_k into every channel.
    let mut rng = ChaCha8Rng::seed_from_u64(0xB1E4D);
    let opts = RenderOptions::default();
    let mut worst: f64 = 0.0;
    for _ in 0..BLEND_SCENES {
        let mut splats = random_scene(&mut rng, BLEND_MAX_SPLATS);
        let cam = oracle_camera(&mut rng, 64, 64);
        for s in &mut splats {
            s.color = Vec3::repeat(1.0);
        }
        let fb = render_reference(&splats, &cam, RenderMode::Rgb, [0.0; 3], &opts).unwrap();
        for (c, t) in fb.rgb.data.iter().zip(&fb.transmittance) {
            for v in c {
                worst = worst.max((v + t - 1.0).abs());
            }
        }
    }
    outcome(
        worst <= UNITY_TOL,
        format!("{BLEND_SCENES} scenes, max |sum T_k a_k + T_final - 1| = {worst:.3e} (tol {UNITY_TOL:e})"),
    )
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x64AD);
    let (mut total, mut pass, mut color_total, mut color_fail) = (0usize, 0usize, 0usize, 0usize);
    for scene in 0..GRAD_SCENES {
        let splats: Vec<Splat> = (0..rng.gen_range(5..=GRAD_MAX_SPLATS))
            .map(|_| random_splat(&mut rng, 0.6, (0.05, 0.25)))
            .collect();
        let cam = oracle_camera(&mut rng, 32, 32);
        let target = splatforge::Image::from_fn(32, 32, |_, _| [rng.gen(), rng.gen(), rng.gen()]);
        let normals = splatforge::Image::from_fn(32, 32, |_, _| {
            let v = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let v = v.try_normalize(1e-6).unwrap_or(Vec3::z());
            [v.x, v.y, v.z]
        });
        let view = TrainView::new(cam, target, Some(normals)).unwrap();
        let report = gradcheck(&splats, &view, &FitConfig::new(1, 1.0), GRAD_SAMPLES_PER_SCENE, scene as u64).unwrap();
        for s in &report.samples {
            total += 1;
            pass += usize::from(s.passes(GRAD_REL_TOL, GRAD_ABS_TOL));
            if s.group == ParamGroup::Color {
                color_total += 1;
                color_fail += usize::from(s.rel_error > GRAD_COLOR_REL_TOL);
            }
        }
    }
    let elapsed = start.elapsed();
    let frac = pass as f64 / total as f64;
    outcome(
        frac >= GRAD_PASS_FRACTION && color_fail == 0 && elapsed < GRAD_BUDGET,
        format!(
            "{pass}/{total} components ({:.1}%, need {:.0}%) within rel {GRAD_REL_TOL:e} or abs {GRAD_ABS_TOL:e}; color {}/{color_total} within rel {GRAD_COLOR_REL_TOL:e}; {:.1} s (budget {} s)",
            100.0 * frac,
            100.0 * GRAD_PASS_FRACTION,
            color_total - color_fail,
            elapsed.as_secs_f64(),
            GRAD_BUDGET.as_secs()
        ),
    )
}

fn random_layer(rng: &mut ChaCha8Rng, spec: LayerSpec) -> Layer {
    Layer {
        spec,
        weights: (0..spec.weight_count()).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
        bias: (0..spec.out_channels).map(|_| rng.gen_range(-0.5f32..0.5)).collect(),
    }
}

fn random_grid(rng: &mut ChaCha8Rng, side: i32, stride: i32, channels: usize) -> SparseVoxelGrid {
    let fill = rng.gen_range(0.05..0.6);
    let mut coords = Vec::new();
    for z in 0..side {
        for y in 0..side {
            for x in 0..side {
                if rng.gen_bool(fill) {
                    coords.push([x * stride, y * stride, z * stride]);
                }
            }
        }
    }
    if coords.is_empty() {
        coords.push([0, 0, 0]);
    }
    let features = (0..coords.len() * channels).map(|_| rng.gen_range(-1.0..1.0)).collect();
    SparseVoxelGrid::from_parts(stride, channels, 1.0, coords, features).unwrap()
}

/// Dense cube holding a sparse grid, indexed in stride units.
struct Dense {
    side: i32,
    cells: Vec<Option<Vec<f64>>>,
}

impl Dense {
    fn new(g: &SparseVoxelGrid, side: i32) -> Self {
        let s = g.stride();
        let mut cells = vec![None; (side * side * side) as usize];
        for (i, c) in g.coords().iter().enumerate() {
            cells[((c[2] / s * side + c[1] / s) * side + c[0] / s) as usize] = Some(g.feature(i).to_vec());
        }
        Self { side, cells }
    }

    fn at(&self, x: i32, y: i32, z: i32) -> Option<&Vec<f64>> {
        let n = self.side;
        if x < 0 || y < 0 || z < 0 || x >= n || y >= n || z >= n {
            return None;
        }
        self.cells[((z * n + y) * n + x) as usize].as_ref()
    }
}

fn apply(w: &[f32], b: &[f32], inputs: &[(usize, &[f64])], n_in: usize, relu: bool) -> Vec<f64> {
    let mut acc: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    let n_out = acc.len();
    for (tap, f) in inputs {
        for o in 0..n_out {
            for i in 0..n_in {
                acc[o] += w[(tap * n_out + o) * n_in + i] as f64 * f[i];
            }
        }
    }
    if relu {
        acc.iter_mut().for_each(|v| *v = v.max(0.0));
    }
    acc
}

fn dense_conv(g: &SparseVoxelGrid, side: i32, layer: &Layer, relu: bool) -> FxHashMap<Coord, Vec<f64>> {
    let d = Dense::new(g, side);
    let s = g.stride();
    let k = layer.spec.kernel as i32;
    let r = k / 2;
    let mut out = FxHashMap::default();
    for z in 0..side {
        for y in 0..side {
            for x in 0..side {
                if d.at(x, y, z).is_none() {
                    continue;
                }
                let mut inputs = Vec::new();
                for kz in 0..k {
                    for ky in 0..k {
                        for kx in 0..k {
                            if let Some(f) = d.at(x + kx - r, y + ky - r, z + kz - r) {
                                inputs.push((((kz * k + ky) * k + kx) as usize, f.as_slice()));
                            }
                        }
                    }
                }
                out.insert([x * s, y * s, z * s], apply(&layer.weights, &layer.bias, &inputs, layer.spec.in_channels, relu));
            }
        }
    }
    out
}

/// Scatters every parent into its eight children, keeping targets only.
fn dense_transposed(parents: &SparseVoxelGrid, target: &[Coord], layer: &Layer, relu: bool) -> FxHashMap<Coord, Vec<f64>> {
    let s = parents.stride() / 2;
    let mut inputs: FxHashMap<Coord, Vec<(usize, &[f64])>> = target.iter().map(|c| (*c, Vec::new())).collect();
    for (i, p) in parents.coords().iter().enumerate() {
        for oz in 0..2 {
            for oy in 0..2 {
                for ox in 0..2 {
                    let child = [p[0] + ox * s, p[1] + oy * s, p[2] + oz * s];
                    if let Some(list) = inputs.get_mut(&child) {
                        list.push((((oz * 2 + oy) * 2 + ox) as usize, parents.feature(i)));
                    }
                }
            }
        }
    }
    inputs
        .into_iter()
        .map(|(c, list)| (c, apply(&layer.weights, &layer.bias, &list, layer.spec.in_channels, relu)))
        .collect()
}

fn grid_diff(grid: &SparseVoxelGrid, want: &FxHashMap<Coord, Vec<f64>>) -> Option<f64> {
    if grid.len() != want.len() {
        return None;
    }
    let mut worst: f64 = 0.0;
    for (i, c) in grid.coords().iter().enumerate() {
        let w = want.get(c)?;
        for (a, b) in grid.feature(i).iter().zip(w) {
            worst = worst.max((a - b).abs());
        }
    }
    Some(worst)
}

fn sparse_conv_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0117);
    let mut worst: f64 = 0.0;
    let mut topology_ok = true;
    let mut occupancy_ok = true;
    let small = NetworkPlan {
        levels: 3,
        encoder: vec![INPUT_CHANNELS, 4, 6, 6, 8],
        decoder: vec![6, 6, 4],
        head_hidden: 8,
    };
    for g in 0..CONV_GRIDS {
        let side = rng.gen_range(2..=CONV_MAX_SIDE);
        let stride = 1 << rng.gen_range(0..3);
        let (ci, co) = (rng.gen_range(1..6), rng.gen_range(1..6));
        let relu = rng.gen_bool(0.5);
        let grid = random_grid(&mut rng, side, stride, ci);
        let mut diffs = Vec::new();

        for k in [1, 3, 5] {
            let layer = random_layer(&mut rng, LayerSpec::conv(k, ci, co));
            diffs.push(grid_diff(&sparse_conv(&grid, &layer, relu).unwrap(), &dense_conv(&grid, side, &layer, relu)));
        }

        // Transposed convolution onto a random child set of a stride-2s grid.
        let coarse_side = (side + 1) / 2;
        let parents = random_grid(&mut rng, coarse_side, 2 * stride, ci);
        let target: Vec<Coord> = {
            let mut t: Vec<Coord> = grid.coords().to_vec();
            t.retain(|c| rng.gen_bool(0.8) || parents.index_of(&floor_to_stride(*c, 2 * stride)).is_some());
            t
        };
        let layer = random_layer(&mut rng, LayerSpec::transposed(ci, co));
        let up = transposed_conv_pruned(&parents, &layer, &target, relu).unwrap();
        topology_ok &= up.coords() == target.as_slice();
        diffs.push(grid_diff(&up, &dense_transposed(&parents, &target, &layer, relu)));
        for d in diffs {
            match d {
                Some(d) => worst = worst.max(d),
                None => topology_ok = false,
            }
        }

        let layer = random_layer(&mut rng, LayerSpec::mlp(ci, co));
        let mlp = shared_mlp(grid.features(), &layer, relu).unwrap();
        for (i, row) in mlp.chunks(co).enumerate() {
            let want = apply(&layer.weights, &layer.bias, &[(0, grid.feature(i))], ci, relu);
            for (a, b) in row.iter().zip(&want) {
                worst = worst.max((a - b).abs());
            }
        }

        // Decoder levels are pruned to the encoder occupancy.
        let input = random_grid(&mut rng, side, 1, INPUT_CHANNELS);
        let weights = init_random(&small, g as u64).unwrap();
        let trace = unet_forward_voxels(&input, &weights).unwrap();
        for (i, dec) in trace.decoder.iter().enumerate() {
            let enc = &trace.encoder[small.levels - 1 - i];
            occupancy_ok &= dec.coords() == enc.coords() && dec.stride() == enc.stride();
        }
        occupancy_ok &= trace.voxel_raw.len() == input.len();
    }
    outcome(
        topology_ok && occupancy_ok && worst <= CONV_TOL,
        format!(
            "{CONV_GRIDS} grids <= {CONV_MAX_SIDE}^3 (conv k=1,3,5, transposed, mlp): max |sparse - dense| = {worst:.3e} (tol {CONV_TOL:e}); decoder occupancy equals encoder at all 3 levels: {occupancy_ok}"
        ),
    )
}

fn hole_free() -> Outcome {
    let (cloud, scene) = make_scene(SceneKind::CheckerSphere, HOLE_POINTS, 7).unwrap();
    let set = SplatSet::new(pca(&cloud));
    let (mut splat_worst, mut points_best) = (0.0f64, f64::INFINITY);
    for cam in views() {
        let truth = scene.render(&cam, BACKGROUND);
        let fb = set.render(&cam, RenderMode::Rgb, BACKGROUND, &RenderOptions::default()).unwrap();
        splat_worst = splat_worst.max(hole_ratio(&fb, &truth.silhouette).unwrap());
        let points = render_1px_points(&cloud, &cam, BACKGROUND);
        points_best = points_best.min(hole_ratio(&points, &truth.silhouette).unwrap());
    }
    outcome(
        splat_worst <= HOLE_SPLAT_MAX && points_best >= HOLE_POINTS_MIN,
        format!(
            "{HOLE_POINTS}-point checker sphere, {VIEWS} views at {VIEW_SIZE}^2: local_pca worst hole_ratio {splat_worst:.5} (max {HOLE_SPLAT_MAX}), 1px points best hole_ratio {points_best:.4} (min {HOLE_POINTS_MIN})"
        ),
    )
}

fn mean_psnr(splats: Vec<Splat>, truths: &[(Camera, splatforge::Image)]) -> f64 {
    let set = SplatSet::new(splats);
    let opts = RenderOptions::default();
    truths
        .iter()
        .map(|(cam, truth)| psnr(&set.render(cam, RenderMode::Rgb, BACKGROUND, &opts).unwrap().rgb, truth).unwrap())
        .sum::<f64>()
        / truths.len() as f64
}

fn quality_floor() -> Outcome {
    let (cloud, scene) = make_scene(SceneKind::CheckerSphere, QUALITY_POINTS, 11).unwrap();
    let truths: Vec<(Camera, splatforge::Image)> = views()
        .into_iter()
        .map(|cam| (cam, scene.render_supersampled(&cam, BACKGROUND, REFERENCE_SUPERSAMPLING).rgb))
        .collect();
    let clean = mean_psnr(pca(&cloud), &truths);
    let (unit, t) = normalize_to_unit_box(&cloud).unwrap();
    let quantized = t.invert_cloud(&quantize(&unit, &QuantizationSpec::ten_bit()).unwrap());
    let quant = mean_psnr(pca(&quantized), &truths);
    let drop = clean - quant;
    outcome(
        clean >= QUALITY_MIN_PSNR && drop <= QUALITY_MAX_QUANT_DROP,
        format!(
            "{QUALITY_POINTS}-point checker sphere, {VIEWS} views at {VIEW_SIZE}^2, local_pca: mean PSNR {clean:.2} dB (min {QUALITY_MIN_PSNR}), 10-bit quantized {quant:.2} dB, drop {drop:.3} dB (max {QUALITY_MAX_QUANT_DROP})"
        ),
    )
}

fn single_gaussian_recovery() -> Outcome {
    const EXTENT: f64 = 1.0;
    const SIZE: usize = 48;
    // A lone splat's rgb only constrains opacity times (color - background),
    // so color is held at its known value.
    const FIT_BACKGROUND: [f64; 3] = [0.2, 0.5, 0.8];
    let mut ok = 0;
    let (mut worst_center, mut worst_opacity) = (0.0f64, 0.0f64);
    for seed in 0..RECOVERY_SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut truth = random_splat(&mut rng, 0.1, (0.08, 0.16));
        truth.opacity = rng.gen_range(0.5..0.9);
        let cams: Vec<Camera> = (0..4)
            .map(|i| {
                let a = std::f64::consts::FRAC_PI_2 * i as f64 + 0.3;
                let eye = Vec3::new(3.0 * a.sin(), 0.8, 3.0 * a.cos());
                Camera::look_at(eye, Vec3::zeros(), Vec3::y(), 60.0, SIZE, SIZE).unwrap()
            })
            .collect();
        let views: Vec<TrainView> = cams
            .iter()
            .map(|cam| {
                let fb = render_with(&[truth], cam, RenderMode::Normal, FIT_BACKGROUND, &RenderOptions::default()).unwrap();
                TrainView::new(*cam, fb.rgb, fb.normal).unwrap()
            })
            .collect();

        let dir = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)).normalize();
        let mut init = truth;
        init.center += dir * 0.05 * EXTENT;
        init.opacity = (truth.opacity + if rng.gen_bool(0.5) { 0.2 } else { -0.2 }).clamp(0.05, 0.95);
        init.scales = truth.scales.map(|s| s * rng.gen_range(0.8..1.25));

        let mut cfg = FitConfig::new(RECOVERY_ITERATIONS, EXTENT);
        cfg.background = FIT_BACKGROUND;
        cfg.rates.color = 0.0;
        let fit = fit_scene(&[init], &views, &cfg).unwrap();
        let got = fit.splats[0];
        let dc = (got.center - truth.center).norm() / EXTENT;
        let dop = (got.opacity - truth.opacity).abs();
        worst_center = worst_center.max(dc);
        worst_opacity = worst_opacity.max(dop);
        ok += usize::from(dc <= RECOVERY_CENTER_TOL && dop <= RECOVERY_OPACITY_TOL);
    }
    outcome(
        ok == RECOVERY_SEEDS as usize,
        format!(
            "{ok}/{RECOVERY_SEEDS} seeds recovered in {RECOVERY_ITERATIONS} iterations; worst center error {:.3}% of extent (max {:.0}%), worst opacity error {worst_opacity:.4} (max {RECOVERY_OPACITY_TOL})",
            100.0 * worst_center,
            100.0 * RECOVERY_CENTER_TOL
        ),
    )
}

fn latency() -> Outcome {
    let (cloud, _) = make_scene(SceneKind::CheckerSphere, LATENCY_POINTS, 3).unwrap();
    let cfg = EstimatorConfig::new(EstimatorKind::LocalPca);
    let start = Instant::now();
    let splats = estimate_local_pca(&cloud, &cfg).unwrap();
    let preprocess_ms = start.elapsed().as_secs_f64() * 1e3;
    let set = SplatSet::new(splats);
    let cam = views()[0];
    let (stats, _) = bench_render(&set, &cam, RenderMode::Rgb, BACKGROUND, &RenderOptions::default(), LATENCY_RENDER_ITERATIONS).unwrap();
    let threads = rayon::current_num_threads();
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let verdict = |ok: bool| if ok { "pass" } else { "fail" };
    let p_ok = preprocess_ms <= LATENCY_PREPROCESS_MS;
    let r_ok = stats.mean_ms <= LATENCY_RENDER_MS;
    outcome(
        p_ok && r_ok,
        format!(
            "P/R = {preprocess_ms:.0} ms / {:.1} ms ({LATENCY_POINTS} splats, {VIEW_SIZE}^2, render p50 {:.1} ms p99 {:.1} ms); preprocess {} (max {LATENCY_PREPROCESS_MS:.0} ms), render {} (max {LATENCY_RENDER_MS:.0} ms, specified for 8 cores); measured with {threads} worker threads on {cores} available cores",
            stats.mean_ms,
            stats.p50_ms,
            stats.p99_ms,
            verdict(p_ok),
            verdict(r_ok)
        ),
    )
}

fn frame_bits(fb: &FrameBuffer) -> Vec<u64> {
    let mut v: Vec<u64> = fb.rgb.data.iter().flatten().map(|x| x.to_bits()).collect();
    v.extend(fb.transmittance.iter().map(|x| x.to_bits()));
    if let Some(n) = &fb.normal {
        v.extend(n.data.iter().flatten().map(|x| x.to_bits()));
    }
    if let Some(d) = &fb.depth {
        v.extend(d.iter().map(|x| x.to_bits()));
    }
    v
}

fn splat_bits(splats: &[Splat]) -> Vec<u64> {
    splats
        .iter()
        .flat_map(|s| {
            let mut v: Vec<f64> = Vec::with_capacity(17);
            v.extend(s.center.iter());
            v.extend(s.scales.iter());
            v.extend(s.quaternion);
            v.push(s.opacity);
            v.extend(s.color.iter());
            v.extend(s.normal.iter());
            v.into_iter().map(f64::to_bits)
        })
        .collect()
}

fn determinism_snapshot(cloud: &PointCloud, oracle: &[Splat], oracle_cam: &Camera) -> Vec<Vec<u64>> {
    let mut out = Vec::new();
    let opts = RenderOptions::default();
    for mode in MODES {
        out.push(frame_bits(&render_with(oracle, oracle_cam, mode, [0.1, 0.2, 0.3], &opts).unwrap()));
        out.push(frame_bits(&render_reference(oracle, oracle_cam, mode, [0.1, 0.2, 0.3], &opts).unwrap()));
    }
    let weights = init_random(&NetworkPlan::default(), 0).unwrap();
    for kind in [EstimatorKind::GlobalIsotropic, EstimatorKind::LocalPca, EstimatorKind::Neural] {
        let splats = estimate(cloud, &EstimatorConfig::new(kind), Some(&weights)).unwrap();
        out.push(splat_bits(&splats));
        let set = SplatSet::new(splats);
        for cam in views().iter().step_by(4) {
            let cam = cam.resized(128, 128);
            for mode in MODES {
                out.push(frame_bits(&set.render(&cam, mode, BACKGROUND, &opts).unwrap()));
            }
        }
    }
    let vox = voxelize_adaptive(cloud).unwrap();
    out.push(unet_forward(&vox, &weights).unwrap().iter().flatten().map(|x| x.to_bits()).collect());
    out
}

fn determinism() -> Outcome {
    let (cloud, _) = make_scene(SceneKind::TwoBox, 6000, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0xDE7);
    let oracle: Vec<Splat> = (0..BLEND_MAX_SPLATS).map(|_| random_splat(&mut rng, 0.8, (0.01, 0.25))).collect();
    let oracle_cam = oracle_camera(&mut rng, 96, 80);
    let mut baseline: Option<Vec<Vec<u64>>> = None;
    let mut mismatches = Vec::new();
    let mut runs = 0;
    for threads in DETERMINISM_THREADS {
        let pool = ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        for _ in 0..2 {
            let snap = pool.install(|| determinism_snapshot(&cloud, &oracle, &oracle_cam));
            runs += 1;
            match &baseline {
                None => baseline = Some(snap),
                Some(b) if *b != snap => mismatches.push(threads),
                Some(_) => {}
            }
        }
    }
    let items = baseline.as_ref().map_or(0, Vec::len);
    outcome(
        mismatches.is_empty(),
        format!(
            "{items} outputs (tiled and reference renders in 3 modes, global/pca/neural estimates and their renders, raw inference) bitwise identical over {runs} runs with {DETERMINISM_THREADS:?} worker threads; mismatching thread counts: {mismatches:?}"
        ),
    )
}

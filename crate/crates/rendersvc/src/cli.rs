//! `splatforge render | bench | serve`.

use std::ffi::OsString;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;
use splatforge::estimators::{EstimatorConfig, EstimatorKind};
use splatforge::evalkit::{circle_cameras, make_scene, MetricReport, SceneKind, SceneReference};
use splatforge::pcio::{load_ply, PointCloud};
use splatforge::rasterizer::SplatSet;
use splatforge::stats::LatencyStats;
use splatforge::{Camera, RenderMode, RenderOptions, Vec3};

use crate::engine::{resolve_weights, Scene};
use crate::protocol::{CameraPose, FrameMode};
use crate::server::{Server, ServerConfig};

/// Exit status for a missing input file or a usage error.
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_FAILURE: u8 = 1;
pub const THREADS_ENV: &str = "SPLATFORGE_THREADS";
/// Default framing: distance and focal length relative to the scene radius
/// and the image side.
pub const VIEW_DISTANCE_PER_RADIUS: f64 = 10.0 / 3.0;
pub const FOCAL_PER_PIXEL: f64 = 600.0 / 512.0;

#[derive(Debug, Parser)]
#[command(name = "splatforge", version, about = "Point clouds to elliptical Gaussians, rendered")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render one image.
    Render(RenderArgs),
    /// Time rendering on a circular trajectory, with metrics against a synthetic scene.
    Bench(BenchArgs),
    /// Stream frames over WebSocket.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
struct EstimatorArgs {
    /// global, pca or neural.
    #[arg(long, default_value = "pca")]
    estimator: EstimatorKind,
    /// Network weights for the neural estimator.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long, default_value_t = 1.5)]
    sigma_mult: f64,
    /// Neighborhood size of the local PCA estimator.
    #[arg(long, default_value_t = 16)]
    k: usize,
}

impl EstimatorArgs {
    fn config(&self) -> EstimatorConfig {
        EstimatorConfig {
            sigma_multiplier: self.sigma_mult,
            k_neighbors: self.k,
            weights_path: self.weights.clone(),
            ..EstimatorConfig::new(self.estimator)
        }
    }
}

#[derive(Debug, Args)]
struct RenderArgs {
    #[arg(long)]
    input: PathBuf,
    #[command(flatten)]
    estimator: EstimatorArgs,
    /// Camera pose JSON; defaults to the first view of the bench trajectory.
    #[arg(long)]
    camera: Option<PathBuf>,
    /// Overrides the mode of the camera file.
    #[arg(long)]
    mode: Option<FrameMode>,
    #[arg(long)]
    out: PathBuf,
    /// `r,g,b` in [0, 1].
    #[arg(long, default_value = "0,0,0", value_parser = parse_color)]
    background: [f64; 3],
    /// Image side when no camera file is given.
    #[arg(long, default_value_t = 512)]
    resolution: u32,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// Point cloud to benchmark; mutually exclusive with --scene.
    #[arg(long, conflicts_with = "scene", required_unless_present = "scene")]
    input: Option<PathBuf>,
    /// Synthetic scene with analytic ground truth: checker_sphere, checker_plane or two_box.
    #[arg(long)]
    scene: Option<SceneKind>,
    #[arg(long, default_value_t = 50_000)]
    points: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    estimator: EstimatorArgs,
    #[arg(long, default_value_t = 12)]
    views: usize,
    #[arg(long, default_value_t = 512)]
    resolution: usize,
    /// Timed renders per view.
    #[arg(long, default_value_t = 5)]
    iterations: usize,
    #[arg(long, default_value = "0,0,0", value_parser = parse_color)]
    background: [f64; 3],
    /// Rays per pixel side for the analytic reference.
    #[arg(long, default_value_t = 4)]
    supersampling: usize,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long)]
    input: PathBuf,
    #[command(flatten)]
    estimator: EstimatorArgs,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: IpAddr,
    #[arg(long, default_value = "0,0,0", value_parser = parse_color)]
    background: [f64; 3],
}

fn parse_color(s: &str) -> std::result::Result<[f64; 3], String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match parts.as_slice() {
        [r, g, b] if parts.iter().all(|c| (0.0..=1.0).contains(c)) => Ok([*r, *g, *b]),
        _ => Err(format!("expected r,g,b in [0, 1], got {s:?}")),
    }
}

#[derive(Debug, thiserror::Error)]
#[error("input file not found: {}", .0.display())]
struct MissingInput(PathBuf);

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(MissingInput(path.to_path_buf()).into())
    }
}

/// Sizes the rayon pool from `SPLATFORGE_THREADS` when set.
pub fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = v
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .with_context(|| format!("{THREADS_ENV}={v:?} is not a positive integer"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring worker threads")?;
    Ok(())
}

/// Parses arguments and runs a command.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    let result = configure_threads().and_then(|()| match cli.command {
        Command::Render(a) => render(a),
        Command::Bench(a) => bench(a),
        Command::Serve(a) => serve(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if e.is::<MissingInput>() { EXIT_USAGE } else { EXIT_FAILURE })
        }
    }
}

/// Cameras of the bench trajectory; the first is the default `render` camera.
pub fn trajectory(center: Vec3, radius: f64, views: usize, resolution: usize) -> Result<Vec<Camera>> {
    let focal = FOCAL_PER_PIXEL * resolution as f64;
    Ok(circle_cameras(center, VIEW_DISTANCE_PER_RADIUS * radius, views, focal, resolution, resolution)?)
}

fn render(a: RenderArgs) -> Result<()> {
    require_file(&a.input)?;
    let file_pose = match &a.camera {
        Some(p) => {
            require_file(p)?;
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Some(CameraPose::parse(&text).with_context(|| format!("camera file {}", p.display()))?)
        }
        None => None,
    };
    let scene = Scene::load(&a.input, &a.estimator.config())?;
    let mut pose = match file_pose {
        Some(p) => p,
        None => {
            let (c, r) = scene.bounds();
            CameraPose::from_camera(&trajectory(c, r, 1, a.resolution as usize)?[0], FrameMode::Rgb, None)
        }
    };
    if let Some(m) = a.mode {
        pose.mode = m;
    }
    let frame = scene.render(&pose, a.background)?;
    image::save_buffer(&a.out, &frame.rgba, frame.width, frame.height, image::ColorType::Rgba8)
        .with_context(|| format!("writing {}", a.out.display()))?;
    println!(
        "preprocess_ms={} render_ms={}",
        scene.preprocess_time().as_secs_f64() * 1e3,
        frame.render_time.as_secs_f64() * 1e3
    );
    Ok(())
}

fn bench(a: BenchArgs) -> Result<()> {
    if a.views == 0 || a.iterations == 0 {
        bail!("--views and --iterations must be at least 1");
    }
    let (cloud, reference): (PointCloud, Option<SceneReference>) = match (&a.input, a.scene) {
        (Some(p), _) => {
            require_file(p)?;
            (load_ply(p).with_context(|| format!("reading {}", p.display()))?, None)
        }
        (None, Some(kind)) => {
            let (c, r) = make_scene(kind, a.points, a.seed)?;
            (c, Some(r))
        }
        (None, None) => bail!("one of --input or --scene is required"),
    };
    let cfg = a.estimator.config();
    let weights = resolve_weights(&cfg)?;
    let scene = Scene::preprocess(&cloud, &cfg, weights.as_ref())?;
    let (center, radius) = match &reference {
        Some(r) => r.bounds(),
        None => scene.bounds(),
    };
    let cams = trajectory(center, radius, a.views, a.resolution)?;
    let set = SplatSet::new(scene.splats().to_vec());
    let opts = RenderOptions::default();
    let estimator = cfg.kind.id();
    let mut all: Vec<Duration> = Vec::with_capacity(a.views * a.iterations);
    let mut sums = [0.0; 3];
    for (i, cam) in cams.iter().enumerate() {
        let mut samples = Vec::with_capacity(a.iterations);
        let mut fb = None;
        for _ in 0..a.iterations {
            let start = Instant::now();
            fb = Some(set.render(cam, RenderMode::Rgb, a.background, &opts)?);
            samples.push(start.elapsed());
        }
        let fb = fb.expect("at least one iteration");
        all.extend(&samples);
        let metrics = match &reference {
            Some(r) => {
                let truth = r.render_supersampled(cam, a.background, a.supersampling);
                let m = MetricReport::evaluate(&fb, &truth, estimator)?;
                sums[0] += m.psnr_db;
                sums[1] += m.ms_ssim;
                sums[2] += m.hole_ratio;
                serde_json::to_value(&m)?
            }
            None => serde_json::Value::Null,
        };
        let eye = cam.position();
        let line = json!({
            "view": i,
            "camera_center": [eye.x, eye.y, eye.z],
            "render": LatencyStats::from_samples(&samples, cam.width * cam.height),
            "metrics": metrics,
        });
        println!("{line}");
    }
    let n = a.views as f64;
    let mean = |s: f64| if reference.is_some() { json!(s / n) } else { serde_json::Value::Null };
    let aggregate = json!({
        "aggregate": {
            "estimator": estimator,
            "points": cloud.len(),
            "views": a.views,
            "resolution": a.resolution,
            "threads": rayon::current_num_threads(),
            "preprocess_ms": scene.preprocess_time().as_secs_f64() * 1e3,
            "render": LatencyStats::from_samples(&all, a.resolution * a.resolution),
            "mean_psnr_db": mean(sums[0]),
            "mean_ms_ssim": mean(sums[1]),
            "mean_hole_ratio": mean(sums[2]),
        }
    });
    println!("{aggregate}");
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    require_file(&a.input)?;
    let scene = Arc::new(Scene::load(&a.input, &a.estimator.config())?);
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async {
        let config = ServerConfig {
            background: a.background,
            ..Default::default()
        };
        let server = Server::bind(SocketAddr::new(a.host, a.port), scene.clone(), config).await?;
        eprintln!(
            "serving {} splats on ws://{} (preprocess {:.1} ms)",
            scene.splats().len(),
            server.local_addr()?,
            scene.preprocess_time().as_secs_f64() * 1e3
        );
        tokio::select! {
            r = server.run() => r,
            _ = tokio::signal::ctrl_c() => Ok(()),
        }
    })
}

//! WebSocket service over loopback.

mod common;

use std::net::SocketAddr;
use std::process::Command;
use std::sync::Arc;
use std::time::Duration;

use futures_util::{SinkExt, StreamExt};
use rendersvc::engine::Scene;
use rendersvc::protocol::{ErrorMessage, FrameMessage, FrameMode, PoseMessage};
use rendersvc::server::{Server, ServerConfig};
use splatforge::estimators::{EstimatorConfig, EstimatorKind};
use tokio::net::TcpStream;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{MaybeTlsStream, WebSocketStream};

type Client = WebSocketStream<MaybeTlsStream<TcpStream>>;

const TIMEOUT: Duration = Duration::from_secs(60);

fn scene(dir: &std::path::Path) -> Arc<Scene> {
    let ply = common::sphere_ply(dir);
    Arc::new(Scene::load(&ply, &EstimatorConfig::new(EstimatorKind::LocalPca)).unwrap())
}

async fn start(scene: Arc<Scene>, config: ServerConfig) -> SocketAddr {
    let server = Server::bind("127.0.0.1:0".parse().unwrap(), scene, config).await.unwrap();
    let addr = server.local_addr().unwrap();
    tokio::spawn(server.run());
    addr
}

async fn connect(addr: SocketAddr) -> Client {
    tokio_tungstenite::connect_async(format!("ws://{addr}")).await.unwrap().0
}

fn pose_text(sequence: u32, mode: FrameMode) -> String {
    PoseMessage {
        pose: common::pose(mode, 64, 64),
        sequence,
    }
    .to_json()
}

enum Reply {
    Frame(FrameMessage),
    Error(ErrorMessage),
}

async fn next(ws: &mut Client) -> Reply {
    loop {
        let msg = tokio::time::timeout(TIMEOUT, ws.next()).await.expect("reply in time").unwrap().unwrap();
        match msg {
            Message::Binary(b) => return Reply::Frame(FrameMessage::decode(&b).unwrap()),
            Message::Text(t) => return Reply::Error(serde_json::from_str(&t).unwrap()),
            _ => continue,
        }
    }
}

async fn next_frame(ws: &mut Client) -> FrameMessage {
    match next(ws).await {
        Reply::Frame(f) => f,
        Reply::Error(e) => panic!("unexpected error frame {e:?}"),
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn frame_echoes_the_sequence() {
    let dir = tempfile::tempdir().unwrap();
    let scene = scene(dir.path());
    let addr = start(scene.clone(), ServerConfig::default()).await;
    let mut ws = connect(addr).await;
    for (seq, mode) in [(7, FrameMode::Rgb), (8, FrameMode::Normal), (9, FrameMode::Relit)] {
        ws.send(Message::Text(pose_text(seq, mode))).await.unwrap();
        let f = next_frame(&mut ws).await;
        assert_eq!((f.sequence, f.width, f.height, f.mode), (seq, 64, 64, mode));
        assert_eq!(f.rgba.len(), 64 * 64 * 4);
        assert_eq!(f.preprocess_micros, scene.preprocess_time().as_micros() as u64);
        assert!(f.render_micros > 0);
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn malformed_messages_get_error_frames_and_the_connection_survives() {
    let dir = tempfile::tempdir().unwrap();
    let addr = start(scene(dir.path()), ServerConfig::default()).await;
    let mut ws = connect(addr).await;
    for bad in [Message::Text("{not json".into()), Message::Text(r#"{"sequence":3}"#.into()), Message::Binary(vec![1, 2, 3])] {
        ws.send(bad).await.unwrap();
        match next(&mut ws).await {
            Reply::Error(e) => assert!(!e.error.is_empty()),
            Reply::Frame(f) => panic!("frame {} for a malformed message", f.sequence),
        }
    }
    let too_small = pose_text(4, FrameMode::Rgb).replace(r#""width":64"#, r#""width":32"#);
    ws.send(Message::Text(too_small)).await.unwrap();
    assert!(matches!(next(&mut ws).await, Reply::Error(_)));
    ws.send(Message::Text(pose_text(5, FrameMode::Rgb))).await.unwrap();
    assert_eq!(next_frame(&mut ws).await.sequence, 5);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn flood_renders_the_latest_pose() {
    let dir = tempfile::tempdir().unwrap();
    let scene = scene(dir.path());
    let config = ServerConfig {
        frame_delay: Duration::from_millis(25),
        ..Default::default()
    };
    let addr = start(scene, config).await;
    let mut ws = connect(addr).await;
    for seq in 1..=100 {
        ws.send(Message::Text(pose_text(seq, FrameMode::Rgb))).await.unwrap();
    }
    let mut seen = Vec::new();
    let mut preprocess = None;
    loop {
        let f = next_frame(&mut ws).await;
        assert_eq!(*preprocess.get_or_insert(f.preprocess_micros), f.preprocess_micros);
        seen.push(f.sequence);
        if f.sequence == 100 {
            break;
        }
    }
    assert!(seen.len() <= 100);
    assert!(seen.len() < 100, "throttled server rendered every pose: {seen:?}");
    assert!(seen.windows(2).all(|w| w[0] < w[1]), "{seen:?}");
    // Nothing is queued behind the newest pose.
    assert!(tokio::time::timeout(Duration::from_millis(300), ws.next()).await.is_err());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn connections_share_the_scene() {
    let dir = tempfile::tempdir().unwrap();
    let addr = start(scene(dir.path()), ServerConfig::default()).await;
    let mut a = connect(addr).await;
    let mut b = connect(addr).await;
    a.send(Message::Text(pose_text(1, FrameMode::Rgb))).await.unwrap();
    b.send(Message::Text(pose_text(2, FrameMode::Rgb))).await.unwrap();
    let fa = next_frame(&mut a).await;
    let fb = next_frame(&mut b).await;
    assert_eq!((fa.sequence, fb.sequence), (1, 2));
    assert_eq!(fa.rgba, fb.rgba);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn frames_match_cli_render_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let ply = common::sphere_ply(dir.path());
    let cfg = EstimatorConfig::new(EstimatorKind::LocalPca);
    let addr = start(Arc::new(Scene::load(&ply, &cfg).unwrap()), ServerConfig::default()).await;
    let mut ws = connect(addr).await;
    for (i, mode) in [FrameMode::Rgb, FrameMode::Normal, FrameMode::Relit].into_iter().enumerate() {
        let pose = common::pose(mode, 80, 72);
        let cam = dir.path().join(format!("cam{i}.json"));
        std::fs::write(&cam, serde_json::to_string(&pose).unwrap()).unwrap();
        let png = dir.path().join(format!("cli{i}.png"));
        let out = Command::new(env!("CARGO_BIN_EXE_splatforge"))
            .args(["render", "--input", ply.to_str().unwrap(), "--camera", cam.to_str().unwrap(), "--out", png.to_str().unwrap()])
            .env("SPLATFORGE_THREADS", "3")
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let cli = image::open(&png).unwrap().to_rgba8().into_raw();

        ws.send(Message::Text(PoseMessage { pose, sequence: i as u32 }.to_json())).await.unwrap();
        let f = next_frame(&mut ws).await;
        assert_eq!((f.width, f.height), (80, 72));
        assert!(f.rgba == cli, "{mode:?} frame differs from cli render");
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn busy_port_fails_at_startup() {
    let dir = tempfile::tempdir().unwrap();
    let ply = common::sphere_ply(dir.path());
    let taken = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = taken.local_addr().unwrap();
    let scene = Arc::new(Scene::load(&ply, &EstimatorConfig::new(EstimatorKind::GlobalIsotropic)).unwrap());
    assert!(Server::bind(addr, scene, ServerConfig::default()).await.is_err());
    let out = Command::new(env!("CARGO_BIN_EXE_splatforge"))
        .args(["serve", "--input", ply.to_str().unwrap(), "--port", &addr.port().to_string()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("binding"));
}

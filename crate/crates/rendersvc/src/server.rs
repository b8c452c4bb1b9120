//! WebSocket frame server: JSON poses in, binary frames out, one render loop
//! per connection fed through a latest-wins mailbox.

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{Context, Result};
use futures_util::{SinkExt, StreamExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::mpsc;
use tokio_tungstenite::tungstenite::Message;

use crate::engine::Scene;
use crate::mailbox::Mailbox;
use crate::protocol::{ErrorMessage, FrameMessage, PoseMessage};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ServerConfig {
    pub background: [f64; 3],
    /// Pause after every rendered frame; throttles rendering, mostly for tests.
    pub frame_delay: Duration,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            background: [0.0; 3],
            frame_delay: Duration::ZERO,
        }
    }
}

pub struct Server {
    listener: TcpListener,
    scene: Arc<Scene>,
    config: ServerConfig,
}

impl Server {
    /// Binds `addr`; fails when the port is taken.
    pub async fn bind(addr: SocketAddr, scene: Arc<Scene>, config: ServerConfig) -> Result<Self> {
        let listener = TcpListener::bind(addr).await.with_context(|| format!("binding {addr}"))?;
        Ok(Self { listener, scene, config })
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        Ok(self.listener.local_addr()?)
    }

    /// Accepts connections until the task is dropped.
    pub async fn run(self) -> Result<()> {
        loop {
            let (stream, peer) = self.listener.accept().await?;
            let scene = self.scene.clone();
            let config = self.config;
            tokio::spawn(async move {
                if let Err(e) = handle_connection(stream, scene, config).await {
                    eprintln!("connection {peer}: {e:#}");
                }
            });
        }
    }
}

fn error_frame(error: String, sequence: Option<u32>) -> Message {
    Message::Text(ErrorMessage { error, sequence }.to_json())
}

async fn handle_connection(stream: TcpStream, scene: Arc<Scene>, config: ServerConfig) -> Result<()> {
    let ws = tokio_tungstenite::accept_async(stream).await.context("websocket handshake")?;
    let (mut sink, mut source) = ws.split();
    let (tx, mut rx) = mpsc::unbounded_channel::<Message>();
    let mailbox = Arc::new(Mailbox::<PoseMessage>::new());

    let writer = tokio::spawn(async move {
        while let Some(msg) = rx.recv().await {
            if sink.send(msg).await.is_err() {
                break;
            }
        }
        let _ = sink.close().await;
    });

    let renderer = {
        let mailbox = mailbox.clone();
        let tx = tx.clone();
        tokio::spawn(async move {
            let preprocess_micros = scene.preprocess_time().as_micros() as u64;
            while let Some(pose) = mailbox.take().await {
                let scene = scene.clone();
                let background = config.background;
                let job = tokio::task::spawn_blocking(move || {
                    let frame = scene.render(&pose.pose, background);
                    (pose.sequence, frame)
                });
                let msg = match job.await {
                    Ok((sequence, Ok(f))) => Message::Binary(
                        FrameMessage {
                            sequence,
                            width: f.width,
                            height: f.height,
                            mode: f.mode,
                            render_micros: f.render_time.as_micros() as u64,
                            preprocess_micros,
                            rgba: f.rgba,
                        }
                        .encode(),
                    ),
                    Ok((sequence, Err(e))) => error_frame(format!("{e:#}"), Some(sequence)),
                    Err(e) => error_frame(format!("render task failed: {e}"), None),
                };
                if tx.send(msg).is_err() {
                    break;
                }
                if !config.frame_delay.is_zero() {
                    tokio::time::sleep(config.frame_delay).await;
                }
            }
        })
    };

    while let Some(msg) = source.next().await {
        match msg {
            Ok(Message::Text(text)) => match PoseMessage::parse(&text) {
                Ok(pose) => {
                    mailbox.put(pose);
                }
                Err(e) => {
                    let _ = tx.send(error_frame(e.to_string(), None));
                }
            },
            Ok(Message::Binary(_)) => {
                let _ = tx.send(error_frame("binary messages are not accepted; send JSON poses as text".into(), None));
            }
            Ok(Message::Close(_)) | Err(_) => break,
            Ok(_) => {}
        }
    }
    mailbox.close();
    renderer.await?;
    drop(tx);
    writer.await?;
    Ok(())
}

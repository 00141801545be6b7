//! Session service: one WebSocket connection drives one roaming session.
//!
//! The client opens with `hello`, receives `ready`, then sends commands.
//! Each command wakes the session worker, which generates one chunk from the
//! latest command queued since its previous chunk and replies with a `chunk`
//! and a `metrics` message.

mod protocol;

use std::path::{Path, PathBuf};
use std::sync::mpsc as std_mpsc;
use std::sync::Arc;
use std::time::Instant;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::IntoResponse;
use axum::routing::get;
use axum::Router;
use futures_util::{SinkExt, StreamExt};
use tokio::net::TcpListener;
use tokio::sync::mpsc;
use tower_http::services::ServeDir;
use worldroam::dataset::{load_episode, make_pair, PoseRecord, TrajectoryStyle};
use worldroam::denoiser::{load_checkpoint, ChunkDenoiser};
use worldroam::engine::{Session, SessionConfig};
use worldroam::microworld::{Difficulty, Episode};
use worldroam::{InteractionCommand, Intrinsics};

pub use protocol::{decode_f32_frame, encode_frame, FrameEncoding, WireMessage};

/// Chunks of reference clip generated for a `scene_seed` handshake.
pub const SEEDED_REFERENCE_CHUNKS: usize = 8;
/// Default for [`ServerState::outbound_capacity`].
pub const OUTBOUND_CAPACITY: usize = 8;

#[derive(Debug, thiserror::Error)]
pub enum ServerError {
    #[error(transparent)]
    Core(#[from] worldroam::Error),
    #[error("episode store {0} is not a readable directory")]
    EpisodeStore(PathBuf),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Shared, read-only state of the service.
pub struct ServerState {
    pub model: Arc<dyn ChunkDenoiser>,
    pub episodes: Option<PathBuf>,
    pub encoding: FrameEncoding,
    pub session: SessionConfig,
    /// Messages buffered per connection before frames are dropped.
    pub outbound_capacity: usize,
    /// Static client bundle served at `/`.
    pub ui: Option<PathBuf>,
}

impl ServerState {
    pub fn new(model: Arc<dyn ChunkDenoiser>, episodes: Option<PathBuf>, encoding: FrameEncoding) -> Self {
        Self { model, episodes, encoding, session: SessionConfig::default(), outbound_capacity: OUTBOUND_CAPACITY, ui: None }
    }

    /// Load a checkpoint and check the episode store before serving.
    pub fn load(ckpt: &Path, episodes: &Path, png: bool) -> Result<Self, ServerError> {
        let (model, _) = load_checkpoint(ckpt)?;
        std::fs::read_dir(episodes).map_err(|_| ServerError::EpisodeStore(episodes.to_path_buf()))?;
        let encoding = if png { FrameEncoding::Png } else { FrameEncoding::F32 };
        Ok(Self::new(Arc::new(model), Some(episodes.to_path_buf()), encoding))
    }

    fn resolve(&self, episode_id: Option<String>, scene_seed: Option<u64>) -> Result<Episode, WireMessage> {
        let cfg = self.model.config();
        match (episode_id, scene_seed) {
            (Some(id), None) => {
                let bad = id.is_empty() || id.contains(['/', '\\']) || id.starts_with('.');
                // A pair directory from `mkdata` stands for its reference clip.
                let dir = self.episodes.as_ref().map(|root| root.join(&id)).map(|d| {
                    if d.join("meta.json").is_file() {
                        d
                    } else {
                        d.join("reference")
                    }
                });
                match dir {
                    Some(dir) if !bad && dir.join("meta.json").is_file() => {
                        load_episode(&dir).map_err(|e| WireMessage::error("bad_episode", e.to_string()))
                    }
                    _ => Err(WireMessage::error("not_found", format!("no episode named {id:?}"))),
                }
            }
            (None, Some(seed)) => {
                let k = Intrinsics::from_fov(cfg.frame_width, cfg.frame_height, 70.0);
                make_pair(seed, Difficulty::Static, &k, cfg.chunk_len, SEEDED_REFERENCE_CHUNKS, &TrajectoryStyle::default())
                    .map(|p| p.reference)
                    .map_err(|e| WireMessage::error("bad_episode", e.to_string()))
            }
            _ => Err(WireMessage::error("bad_handshake", "hello needs exactly one of episode_id or scene_seed")),
        }
    }
}

pub fn router(state: Arc<ServerState>) -> Router {
    let ui = state.ui.clone();
    let app = Router::new().route("/ws", get(upgrade)).with_state(state);
    match ui {
        Some(dir) => app.fallback_service(ServeDir::new(dir)),
        None => app,
    }
}

/// Serve until the listener fails.
pub async fn serve(listener: TcpListener, state: Arc<ServerState>) -> std::io::Result<()> {
    tracing::info!(addr = ?listener.local_addr()?, "serving");
    axum::serve(listener, router(state)).await
}

async fn upgrade(ws: WebSocketUpgrade, State(state): State<Arc<ServerState>>) -> impl IntoResponse {
    ws.on_upgrade(move |socket| connection(socket, state))
}

fn parse(msg: &Message) -> Option<Result<WireMessage, String>> {
    match msg {
        Message::Text(t) => Some(serde_json::from_str(t.as_str()).map_err(|e| e.to_string())),
        Message::Binary(_) => Some(Err("binary frames are not part of the protocol".into())),
        _ => None,
    }
}

enum Control {
    Command(InteractionCommand, Instant),
    Freeze(bool),
}

async fn reject(mut socket: WebSocket, msg: WireMessage) {
    let _ = socket.send(Message::Text(msg.to_json().into())).await;
    let _ = socket.send(Message::Close(None)).await;
}

async fn connection(mut socket: WebSocket, state: Arc<ServerState>) {
    let hello = loop {
        match socket.recv().await {
            Some(Ok(m)) => match parse(&m) {
                Some(parsed) => break parsed,
                None => continue,
            },
            _ => return,
        }
    };
    let (episode_id, scene_seed) = match hello {
        Ok(WireMessage::Hello { episode_id, scene_seed }) => (episode_id, scene_seed),
        Ok(_) => return reject(socket, WireMessage::error("bad_handshake", "expected hello")).await,
        Err(e) => return reject(socket, WireMessage::error("bad_handshake", e)).await,
    };
    let episode = match state.resolve(episode_id, scene_seed) {
        Ok(ep) => ep,
        Err(msg) => return reject(socket, msg).await,
    };
    let session = match Session::new(state.model.clone(), Arc::new(episode), state.session.clone()) {
        Ok(s) => s,
        Err(e) => return reject(socket, WireMessage::error("bad_episode", e.to_string())).await,
    };
    let cfg = state.model.config();
    let session_id = uuid::Uuid::new_v4().to_string();
    let ready = WireMessage::Ready { session_id: session_id.clone(), width: cfg.frame_width, height: cfg.frame_height, k: cfg.chunk_len };
    if socket.send(Message::Text(ready.to_json().into())).await.is_err() {
        return;
    }
    tracing::debug!(%session_id, "session ready");

    let (mut sink, mut stream) = socket.split();
    let (out_tx, mut out_rx) = mpsc::channel::<WireMessage>(state.outbound_capacity.max(1));
    let (ctl_tx, ctl_rx) = std_mpsc::channel::<Control>();
    let writer = tokio::spawn(async move {
        while let Some(msg) = out_rx.recv().await {
            if sink.send(Message::Text(msg.to_json().into())).await.is_err() {
                return;
            }
        }
        let _ = sink.send(Message::Close(None)).await;
    });
    let encoding = state.encoding;
    let worker_tx = out_tx.clone();
    let worker = tokio::task::spawn_blocking(move || run_session(session, ctl_rx, worker_tx, encoding));

    while let Some(Ok(m)) = stream.next().await {
        if matches!(m, Message::Close(_)) {
            break;
        }
        let control = match parse(&m) {
            None => continue,
            Some(Ok(WireMessage::Command { kind, magnitude })) => match InteractionCommand::new(kind, magnitude) {
                Ok(cmd) => Control::Command(cmd, Instant::now()),
                Err(e) => {
                    let _ = out_tx.send(WireMessage::error("bad_command", e.to_string())).await;
                    continue;
                }
            },
            Some(Ok(WireMessage::Freeze { frozen })) => Control::Freeze(frozen),
            Some(Ok(WireMessage::Bye)) => break,
            Some(Ok(other)) => {
                let _ = out_tx.send(WireMessage::error("unexpected", format!("unexpected message {:?}", other))).await;
                continue;
            }
            Some(Err(e)) => {
                let _ = out_tx.send(WireMessage::error("bad_message", e)).await;
                continue;
            }
        };
        if ctl_tx.send(control).is_err() {
            break;
        }
    }
    drop(ctl_tx);
    drop(out_tx);
    let _ = worker.await;
    let _ = writer.await;
    tracing::debug!(%session_id, "session closed");
}

/// Session worker: one chunk per wake-up, using the latest command queued
/// since the previous chunk. Frames are dropped, never commands, when the
/// client falls behind.
fn run_session(mut session: Session, controls: std_mpsc::Receiver<Control>, out: mpsc::Sender<WireMessage>, encoding: FrameEncoding) {
    let mut dropped = 0usize;
    while let Ok(first) = controls.recv() {
        let mut received = None;
        for c in std::iter::once(first).chain(std::iter::from_fn(|| controls.try_recv().ok())) {
            match c {
                Control::Command(cmd, at) => {
                    session.push_command(cmd);
                    received = Some(received.map_or(at, |t: Instant| t.min(at)));
                }
                Control::Freeze(f) => session.set_frozen(f),
            }
        }
        let Some(received) = received else { continue };
        let started = Instant::now();
        let chunk = match session.step_pending() {
            Ok(c) => c,
            Err(e) => {
                let _ = out.blocking_send(WireMessage::error("generation", e.to_string()));
                return;
            }
        };
        let seconds = started.elapsed().as_secs_f64();
        let msg = WireMessage::Chunk {
            index: chunk.index,
            pose: PoseRecord::from(&chunk.pose),
            coverage: chunk.coverage,
            encoding,
            frames: chunk.frames.iter().map(|f| encode_frame(f, encoding)).collect(),
        };
        let sent = match out.try_send(msg) {
            Ok(()) => Ok(()),
            Err(mpsc::error::TrySendError::Full(WireMessage::Chunk { index, pose, coverage, encoding, .. })) => {
                dropped += 1;
                out.blocking_send(WireMessage::Chunk { index, pose, coverage, encoding, frames: Vec::new() })
            }
            Err(mpsc::error::TrySendError::Full(other)) => out.blocking_send(other),
            Err(mpsc::error::TrySendError::Closed(_)) => return,
        };
        if sent.is_err() {
            return;
        }
        let metrics = WireMessage::Metrics {
            fps: chunk.frames.len() as f64 / seconds.max(1e-9),
            latency_ms: received.elapsed().as_secs_f64() * 1e3,
            dropped,
        };
        if out.blocking_send(metrics).is_err() {
            return;
        }
    }
}

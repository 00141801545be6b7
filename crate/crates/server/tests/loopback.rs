use std::sync::Arc;

use futures_util::{SinkExt, StreamExt};
use tokio::net::TcpListener;
use tokio_tungstenite::tungstenite::Message;
use worldroam::denoiser::DenoiserConfig;
use worldroam::engine::WarpCopyModel;
use worldroam::geometry::{accumulate, command_to_delta};
use worldroam::dataset::{make_pair, PoseRecord, TrajectoryStyle};
use worldroam::microworld::Difficulty;
use worldroam::{CommandKind, InteractionCommand};
use worldroam_server::{decode_f32_frame, router, FrameEncoding, ServerState, WireMessage};

type Socket = tokio_tungstenite::WebSocketStream<tokio_tungstenite::MaybeTlsStream<tokio::net::TcpStream>>;

fn config() -> DenoiserConfig {
    DenoiserConfig { patch: 8, chunk_len: 2, frame_height: 32, frame_width: 32, ..DenoiserConfig::default() }
}

async fn start(episodes: Option<std::path::PathBuf>) -> String {
    let state = ServerState::new(Arc::new(WarpCopyModel { config: config() }), episodes, FrameEncoding::F32);
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, router(Arc::new(state))).await.unwrap() });
    format!("ws://{addr}/ws")
}

async fn send(ws: &mut Socket, msg: &WireMessage) {
    ws.send(Message::Text(msg.to_json().into())).await.unwrap();
}

async fn recv(ws: &mut Socket) -> Option<WireMessage> {
    loop {
        match ws.next().await? {
            Ok(Message::Text(t)) => return Some(serde_json::from_str(t.as_str()).unwrap()),
            Ok(Message::Close(_)) | Err(_) => return None,
            Ok(_) => continue,
        }
    }
}

async fn hello(url: &str, msg: WireMessage) -> (Socket, Option<WireMessage>) {
    let (mut ws, _) = tokio_tungstenite::connect_async(url).await.unwrap();
    send(&mut ws, &msg).await;
    let first = recv(&mut ws).await;
    (ws, first)
}

fn script(n: usize) -> Vec<InteractionCommand> {
    let kinds = [CommandKind::MoveForward, CommandKind::YawLeft, CommandKind::StrafeRight, CommandKind::PitchUp];
    let mags = [0.1, 5.0, 0.05, 2.0];
    (0..n).map(|i| InteractionCommand::new(kinds[i % 4], mags[i % 4]).unwrap()).collect()
}

/// Drive a session command by command and check every chunk against the
/// folded poses.
async fn roam(url: &str, seed: u64, n: usize) {
    let (mut ws, ready) = hello(url, WireMessage::Hello { episode_id: None, scene_seed: Some(seed) }).await;
    let cfg = config();
    assert!(matches!(ready, Some(WireMessage::Ready { width: 32, height: 32, k: 2, .. })), "{ready:?}");
    let k = worldroam::Intrinsics::from_fov(32, 32, 70.0);
    let reference = make_pair(seed, Difficulty::Static, &k, 2, worldroam_server::SEEDED_REFERENCE_CHUNKS, &TrajectoryStyle::default()).unwrap().reference;
    let mut pose = reference.poses[0];
    for (i, cmd) in script(n).into_iter().enumerate() {
        send(&mut ws, &WireMessage::Command { kind: cmd.kind, magnitude: cmd.magnitude }).await;
        pose = accumulate(&pose, &command_to_delta(&cmd));
        match recv(&mut ws).await.unwrap() {
            WireMessage::Chunk { index, pose: p, frames, encoding, coverage } => {
                assert_eq!(index, i);
                assert_eq!(p, PoseRecord::from(&pose));
                assert_eq!(encoding, FrameEncoding::F32);
                assert!((0.0..=1.0).contains(&coverage));
                assert_eq!(frames.len(), cfg.chunk_len);
                for f in &frames {
                    let r = decode_f32_frame(f, 32, 32).expect("frame payload");
                    assert!(r.data.iter().all(|v| v.is_finite()));
                }
            }
            other => panic!("expected a chunk, got {other:?}"),
        }
        match recv(&mut ws).await.unwrap() {
            WireMessage::Metrics { fps, latency_ms, .. } => assert!(fps > 0.0 && latency_ms >= 0.0),
            other => panic!("expected metrics, got {other:?}"),
        }
    }
    send(&mut ws, &WireMessage::Bye).await;
    assert_eq!(recv(&mut ws).await, None);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn unknown_episode_is_reported_and_closed() {
    let store = tempfile::tempdir().unwrap();
    let url = start(Some(store.path().to_path_buf())).await;
    for id in ["missing", "../etc", ""] {
        let (mut ws, first) = hello(&url, WireMessage::Hello { episode_id: Some(id.into()), scene_seed: None }).await;
        match first {
            Some(WireMessage::Error { code, .. }) => assert_eq!(code, "not_found"),
            other => panic!("expected not_found, got {other:?}"),
        }
        assert_eq!(recv(&mut ws).await, None);
    }
    let (_, first) = hello(&url, WireMessage::Bye).await;
    assert!(matches!(first, Some(WireMessage::Error { ref code, .. }) if code == "bad_handshake"));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn stored_episode_can_be_roamed() {
    let store = tempfile::tempdir().unwrap();
    let k = worldroam::Intrinsics::from_fov(32, 32, 70.0);
    let pair = make_pair(3, Difficulty::Static, &k, 2, 4, &TrajectoryStyle::default()).unwrap();
    worldroam::dataset::save_episode(&pair.reference, &store.path().join("ep3"), None).unwrap();
    let url = start(Some(store.path().to_path_buf())).await;
    let (mut ws, ready) = hello(&url, WireMessage::Hello { episode_id: Some("ep3".into()), scene_seed: None }).await;
    assert!(matches!(ready, Some(WireMessage::Ready { .. })), "{ready:?}");
    send(&mut ws, &WireMessage::Command { kind: CommandKind::MoveForward, magnitude: 0.1 }).await;
    assert!(matches!(recv(&mut ws).await, Some(WireMessage::Chunk { index: 0, .. })));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn commands_stream_chunks_in_lockstep() {
    let url = start(None).await;
    roam(&url, 1, 12).await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_sessions_are_independent() {
    let url = start(None).await;
    let a = tokio::spawn({
        let url = url.clone();
        async move { roam(&url, 1, 8).await }
    });
    let b = tokio::spawn(async move { roam(&url, 2, 8).await });
    a.await.unwrap();
    b.await.unwrap();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn invalid_commands_are_rejected_without_ending_the_session() {
    let url = start(None).await;
    let (mut ws, _) = hello(&url, WireMessage::Hello { episode_id: None, scene_seed: Some(4) }).await;
    send(&mut ws, &WireMessage::Command { kind: CommandKind::MoveForward, magnitude: f64::NAN }).await;
    ws.send(Message::Text("{\"type\":\"teleport\"}".into())).await.unwrap();
    for _ in 0..2 {
        assert!(matches!(recv(&mut ws).await, Some(WireMessage::Error { .. })));
    }
    send(&mut ws, &WireMessage::Command { kind: CommandKind::YawRight, magnitude: 10.0 }).await;
    assert!(matches!(recv(&mut ws).await, Some(WireMessage::Chunk { index: 0, .. })));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn stalled_client_loses_frames_not_chunks() {
    let cfg = DenoiserConfig { patch: 8, chunk_len: 2, frame_height: 128, frame_width: 128, ..DenoiserConfig::default() };
    let mut state = ServerState::new(Arc::new(WarpCopyModel { config: cfg }), None, FrameEncoding::F32);
    state.outbound_capacity = 1;
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let url = format!("ws://{}/ws", listener.local_addr().unwrap());
    tokio::spawn(async move { axum::serve(listener, router(Arc::new(state))).await.unwrap() });

    let (mut ws, ready) = hello(&url, WireMessage::Hello { episode_id: None, scene_seed: Some(5) }).await;
    assert!(matches!(ready, Some(WireMessage::Ready { .. })));
    for _ in 0..80 {
        send(&mut ws, &WireMessage::Command { kind: CommandKind::StrafeLeft, magnitude: 0.01 }).await;
        tokio::time::sleep(std::time::Duration::from_millis(10)).await;
    }
    send(&mut ws, &WireMessage::Bye).await;
    let (mut next, mut stripped, mut reported) = (0, 0, 0);
    while let Some(msg) = recv(&mut ws).await {
        match msg {
            WireMessage::Chunk { index, frames, .. } => {
                assert_eq!(index, next);
                next += 1;
                stripped += frames.is_empty() as usize;
            }
            WireMessage::Metrics { dropped, .. } => reported = dropped,
            other => panic!("unexpected {other:?}"),
        }
    }
    assert!(next > 0);
    assert!(stripped > 0, "no frames were dropped over {next} chunks");
    assert_eq!(reported, stripped);
}

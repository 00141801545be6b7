//! JSON envelopes exchanged over the socket.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use worldroam::dataset::PoseRecord;
use worldroam::{CommandKind, Raster};

/// Every message carries a `type` tag; field names are snake_case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum WireMessage {
    Hello {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        episode_id: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        scene_seed: Option<u64>,
    },
    Command {
        kind: CommandKind,
        magnitude: f64,
    },
    Freeze {
        frozen: bool,
    },
    Bye,
    Ready {
        session_id: String,
        width: usize,
        height: usize,
        #[serde(rename = "K")]
        k: usize,
    },
    Chunk {
        index: usize,
        pose: PoseRecord,
        coverage: f64,
        encoding: FrameEncoding,
        /// One payload per frame; empty when the frames were dropped under
        /// backpressure.
        frames: Vec<String>,
    },
    Metrics {
        fps: f64,
        latency_ms: f64,
        dropped: usize,
    },
    Error {
        code: String,
        text: String,
    },
}

impl WireMessage {
    pub fn error(code: &str, text: impl Into<String>) -> Self {
        WireMessage::Error { code: code.to_string(), text: text.into() }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("wire messages always serialise")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameEncoding {
    /// Base64 of the raw little-endian `f32` RGB raster, row-major.
    F32,
    /// Base64 of an 8-bit RGB PNG.
    Png,
}

pub fn encode_frame(frame: &Raster, encoding: FrameEncoding) -> String {
    match encoding {
        FrameEncoding::F32 => {
            let bytes: Vec<u8> = frame.data.iter().flat_map(|v| v.to_le_bytes()).collect();
            STANDARD.encode(bytes)
        }
        FrameEncoding::Png => {
            let mut out = Vec::new();
            {
                let mut enc = png::Encoder::new(&mut out, frame.width as u32, frame.height as u32);
                enc.set_color(png::ColorType::Rgb);
                enc.set_depth(png::BitDepth::Eight);
                let mut w = enc.write_header().expect("in-memory PNG header");
                let pixels: Vec<u8> = frame.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
                w.write_image_data(&pixels).expect("in-memory PNG body");
            }
            STANDARD.encode(out)
        }
    }
}

/// Inverse of the `F32` encoding.
pub fn decode_f32_frame(payload: &str, height: usize, width: usize) -> Option<Raster> {
    let bytes = STANDARD.decode(payload).ok()?;
    if bytes.len() != height * width * 3 * 4 {
        return None;
    }
    let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    Raster::from_vec(height, width, 3, data)
}

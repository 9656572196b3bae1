//! JSON messages exchanged over the WebSocket, plus the binary payload
//! encodings they carry.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

/// A client request: `{"id": n, "type": ..., ...}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientMessage {
    pub id: u64,
    #[serde(flatten)]
    pub request: Request,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Request {
    SetState {
        kappa: Vec<f64>,
    },
    SetCamera {
        /// Row-major camera-to-world `[R | t]`.
        pose: Vec<f64>,
        fx: f64,
        fy: f64,
    },
    Render,
    Query {
        text: String,
    },
    Info,
}

/// A server reply; `id` is the request it answers (0 for the greeting).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServerMessage {
    pub id: Option<u64>,
    #[serde(flatten)]
    pub reply: Reply,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Reply {
    Hello {
        alpha: usize,
        captions: Vec<(String, String)>,
        /// `[height, width]`
        size: [usize; 2],
        kappa: Vec<f64>,
    },
    Frame {
        width: usize,
        height: usize,
        /// Raw RGB8, row-major.
        rgb: String,
        /// Little-endian float32 per pixel.
        depth: String,
    },
    Grounding {
        width: usize,
        height: usize,
        /// Little-endian float32 relevancy per pixel.
        heatmap: String,
        /// One bit per pixel, row-major, least significant bit first.
        mask: String,
        best_object: i64,
        score: f64,
    },
    StateAck {
        kappa: Vec<f64>,
    },
    Superseded,
    Error {
        message: String,
    },
}

impl ServerMessage {
    pub fn new(id: u64, reply: Reply) -> Self {
        Self { id: Some(id), reply }
    }

    pub fn error(id: Option<u64>, message: impl Into<String>) -> Self {
        Self {
            id,
            reply: Reply::Error { message: message.into() },
        }
    }
}

/// Parses a text frame. On failure returns the request id if one could be
/// recovered, together with the reason.
pub fn parse_client(text: &str) -> Result<ClientMessage, (Option<u64>, String)> {
    serde_json::from_str(text).map_err(|e| {
        let id = serde_json::from_str::<serde_json::Value>(text)
            .ok()
            .and_then(|v| v.get("id").and_then(|i| i.as_u64()));
        (id, format!("malformed message: {e}"))
    })
}

pub fn encode_rgb8(rgb: &[f64]) -> String {
    let bytes: Vec<u8> = rgb.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    STANDARD.encode(bytes)
}

pub fn encode_f32(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

pub fn pack_mask(mask: &[bool]) -> String {
    let mut bytes = vec![0u8; mask.len().div_ceil(8)];
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        bytes[i / 8] |= 1 << (i % 8);
    }
    STANDARD.encode(bytes)
}

pub fn decode_bytes(b64: &str) -> Option<Vec<u8>> {
    STANDARD.decode(b64).ok()
}

pub fn decode_f32(b64: &str) -> Option<Vec<f32>> {
    let bytes = decode_bytes(b64)?;
    if bytes.len() % 4 != 0 {
        return None;
    }
    Some(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

pub fn unpack_mask(b64: &str, pixels: usize) -> Option<Vec<bool>> {
    let bytes = decode_bytes(b64)?;
    if bytes.len() != pixels.div_ceil(8) {
        return None;
    }
    Some((0..pixels).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wire_shapes() {
        let m: ClientMessage = serde_json::from_str(r#"{"id":3,"type":"set_state","kappa":[0.2,1.5]}"#).unwrap();
        assert_eq!(
            m,
            ClientMessage {
                id: 3,
                request: Request::SetState { kappa: vec![0.2, 1.5] }
            }
        );
        let m: ClientMessage = serde_json::from_str(r#"{"id":4,"type":"render"}"#).unwrap();
        assert_eq!(m.request, Request::Render);

        let v = serde_json::to_value(ServerMessage::new(4, Reply::Superseded)).unwrap();
        assert_eq!(v, serde_json::json!({"id": 4, "type": "superseded"}));
        let v = serde_json::to_value(ServerMessage::new(5, Reply::StateAck { kappa: vec![1.0] })).unwrap();
        assert_eq!(v, serde_json::json!({"id": 5, "type": "state_ack", "kappa": [1.0]}));
    }

    #[test]
    fn malformed_messages_keep_their_id() {
        assert_eq!(parse_client(r#"{"id":9,"type":"warp"}"#).unwrap_err().0, Some(9));
        assert_eq!(parse_client("not json").unwrap_err().0, None);
        assert!(parse_client(r#"{"id":1,"type":"query"}"#).is_err());
    }

    #[test]
    fn payload_round_trips() {
        let mask = [true, false, false, true, true, false, false, false, true, true];
        let packed = pack_mask(&mask);
        assert_eq!(decode_bytes(&packed).unwrap(), [0b0001_1001, 0b0000_0011]);
        assert_eq!(unpack_mask(&packed, 10).unwrap(), mask);
        assert_eq!(decode_f32(&encode_f32(&[0.5, -2.0])).unwrap(), [0.5, -2.0]);
        assert_eq!(decode_bytes(&encode_rgb8(&[0.0, 1.0, 0.5, 2.0])).unwrap(), [0, 255, 128, 255]);
    }
}

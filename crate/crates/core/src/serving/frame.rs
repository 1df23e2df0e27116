//! Wire framing: `[u32 length, big-endian][u8 type tag][payload]`, where
//! `length` counts the tag byte plus the payload and the payload is canonical
//! UTF-8 JSON.

use std::io::{self, Read, Write};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::Capability;
use crate::canonical;
use crate::query::{Query, Response};

pub const PROTOCOL_VERSION: u32 = 1;

/// Upper bound on `length`; larger frames are rejected before allocation.
pub const MAX_FRAME_LEN: u32 = 256 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum FrameType {
    Hello = 1,
    HelloAck = 2,
    RunChunk = 3,
    ChunkResult = 4,
    Status = 5,
    Error = 6,
}

impl TryFrom<u8> for FrameType {
    type Error = FrameError;

    fn try_from(tag: u8) -> Result<Self, FrameError> {
        Ok(match tag {
            1 => FrameType::Hello,
            2 => FrameType::HelloAck,
            3 => FrameType::RunChunk,
            4 => FrameType::ChunkResult,
            5 => FrameType::Status,
            6 => FrameType::Error,
            other => return Err(FrameError::UnknownTag(other)),
        })
    }
}

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("unknown frame type tag {0}")]
    UnknownTag(u8),
    #[error("frame length {0} is out of range")]
    BadLength(u32),
    #[error("connection closed inside a frame")]
    Truncated,
    #[error("bad {kind:?} payload: {message}")]
    Payload { kind: FrameType, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub kind: FrameType,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn encode(&self) -> Vec<u8> {
        let len = 1 + self.payload.len() as u32;
        let mut out = Vec::with_capacity(4 + len as usize);
        out.extend_from_slice(&len.to_be_bytes());
        out.push(self.kind as u8);
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> io::Result<()> {
        w.write_all(&self.encode())?;
        w.flush()
    }

    /// Reads one frame. `Ok(None)` means the peer closed cleanly between
    /// frames.
    pub fn read_from<R: Read>(r: &mut R) -> Result<Option<Frame>, FrameError> {
        let mut len = [0u8; 4];
        match read_full(r, &mut len)? {
            0 => return Ok(None),
            4 => {}
            _ => return Err(FrameError::Truncated),
        }
        let len = u32::from_be_bytes(len);
        if len == 0 || len > MAX_FRAME_LEN {
            return Err(FrameError::BadLength(len));
        }
        let mut body = vec![0u8; len as usize];
        if read_full(r, &mut body)? != body.len() {
            return Err(FrameError::Truncated);
        }
        let kind = FrameType::try_from(body[0])?;
        body.remove(0);
        Ok(Some(Frame { kind, payload: body }))
    }
}

fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hello {
    pub protocol_version: u32,
    pub client_name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HelloAck {
    pub model_id: String,
    pub capabilities: Vec<Capability>,
    pub protocol_version: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunChunk {
    pub chunk_id: u64,
    pub queries: Vec<Query>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkResult {
    pub chunk_id: u64,
    pub responses: Vec<Response>,
}

/// Sent empty (`{}`) as a probe; the server answers with its counters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Status {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chunks_executed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub active_sessions: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorMessage {
    pub code: u32,
    pub message: String,
    /// Present when the error concerns a single chunk.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chunk_id: Option<u64>,
}

pub mod codes {
    pub const VERSION_MISMATCH: u32 = 1;
    pub const MALFORMED_FRAME: u32 = 2;
    pub const BACKEND_FAILURE: u32 = 3;
    pub const UNEXPECTED_FRAME: u32 = 4;
    pub const CHUNK_ORDER: u32 = 5;
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello(Hello),
    HelloAck(HelloAck),
    RunChunk(RunChunk),
    ChunkResult(ChunkResult),
    Status(Status),
    Error(ErrorMessage),
}

impl Message {
    pub fn kind(&self) -> FrameType {
        match self {
            Message::Hello(_) => FrameType::Hello,
            Message::HelloAck(_) => FrameType::HelloAck,
            Message::RunChunk(_) => FrameType::RunChunk,
            Message::ChunkResult(_) => FrameType::ChunkResult,
            Message::Status(_) => FrameType::Status,
            Message::Error(_) => FrameType::Error,
        }
    }

    pub fn to_frame(&self) -> Frame {
        let payload = match self {
            Message::Hello(m) => canonical::to_canonical_bytes(m),
            Message::HelloAck(m) => canonical::to_canonical_bytes(m),
            Message::RunChunk(m) => canonical::to_canonical_bytes(m),
            Message::ChunkResult(m) => canonical::to_canonical_bytes(m),
            Message::Status(m) => canonical::to_canonical_bytes(m),
            Message::Error(m) => canonical::to_canonical_bytes(m),
        };
        Frame { kind: self.kind(), payload }
    }

    pub fn from_frame(frame: &Frame) -> Result<Message, FrameError> {
        fn parse<T: DeserializeOwned>(frame: &Frame) -> Result<T, FrameError> {
            serde_json::from_slice(&frame.payload)
                .map_err(|e| FrameError::Payload { kind: frame.kind, message: e.to_string() })
        }
        Ok(match frame.kind {
            FrameType::Hello => Message::Hello(parse(frame)?),
            FrameType::HelloAck => Message::HelloAck(parse(frame)?),
            FrameType::RunChunk => Message::RunChunk(parse(frame)?),
            FrameType::ChunkResult => Message::ChunkResult(parse(frame)?),
            FrameType::Status => Message::Status(parse(frame)?),
            FrameType::Error => Message::Error(parse(frame)?),
        })
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> io::Result<()> {
        self.to_frame().write_to(w)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Option<Message>, FrameError> {
        match Frame::read_from(r)? {
            Some(frame) => Message::from_frame(&frame).map(Some),
            None => Ok(None),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::query::{CompletionQuery, RankedQuery, RankedResponse};
    use proptest::prelude::*;

    #[test]
    fn layout() {
        let f = Frame { kind: FrameType::Status, payload: b"{}".to_vec() };
        assert_eq!(f.encode(), vec![0, 0, 0, 3, 5, b'{', b'}']);
    }

    #[test]
    fn hello_payload_is_canonical() {
        let m = Message::Hello(Hello { protocol_version: 1, client_name: "c".into() });
        assert_eq!(m.to_frame().payload, br#"{"client_name":"c","protocol_version":1}"#.to_vec());
    }

    #[test]
    fn rejects_bad_frames() {
        assert!(matches!(Frame::read_from(&mut &[0, 0, 0, 1, 9][..]), Err(FrameError::UnknownTag(9))));
        assert!(matches!(Frame::read_from(&mut &[0, 0, 0, 0][..]), Err(FrameError::BadLength(0))));
        assert!(matches!(Frame::read_from(&mut &[0, 0, 0, 5, 1, b'{'][..]), Err(FrameError::Truncated)));
        assert!(matches!(Frame::read_from(&mut &[0, 0][..]), Err(FrameError::Truncated)));
        assert!(Frame::read_from(&mut &[][..]).unwrap().is_none());
        let bad = Frame { kind: FrameType::Hello, payload: b"nope".to_vec() };
        assert!(matches!(Message::from_frame(&bad), Err(FrameError::Payload { .. })));
    }

    #[test]
    fn chunk_messages_round_trip() {
        let cands = vec!["x".to_string(), "y".to_string()];
        let q: Query = RankedQuery::text("p", cands.clone()).unwrap().into();
        let c: Query = CompletionQuery::new("hi").unwrap().into();
        let run = Message::RunChunk(RunChunk { chunk_id: 9, queries: vec![q, c] });
        let result = Message::ChunkResult(ChunkResult {
            chunk_id: 9,
            responses: vec![Response::Ranked(RankedResponse::from_logits(&cands, &[0.3, 0.1]).unwrap())],
        });
        for m in [run, result] {
            let bytes = m.to_frame().encode();
            assert_eq!(Message::read_from(&mut bytes.as_slice()).unwrap(), Some(m));
        }
    }

    fn arb_message() -> impl Strategy<Value = Message> {
        prop_oneof![
            (any::<u32>(), ".{0,20}").prop_map(|(v, n)| Message::Hello(Hello { protocol_version: v, client_name: n })),
            (".{0,10}", any::<u32>()).prop_map(|(m, v)| Message::HelloAck(HelloAck {
                model_id: m,
                capabilities: vec![Capability::Complete, Capability::RankImage],
                protocol_version: v,
            })),
            (any::<u64>(), prop::collection::vec(".{1,12}", 0..4)).prop_map(|(id, prompts)| {
                Message::RunChunk(RunChunk {
                    chunk_id: id,
                    queries: prompts.into_iter().map(|p| CompletionQuery::new(p).unwrap().into()).collect(),
                })
            }),
            (any::<u64>(), prop::collection::vec(-30.0f64..30.0, 1..5)).prop_map(|(id, logits)| {
                let cands: Vec<String> = (0..logits.len()).map(|i| format!("c{i}")).collect();
                Message::ChunkResult(ChunkResult {
                    chunk_id: id,
                    responses: vec![Response::Ranked(RankedResponse::from_logits(&cands, &logits).unwrap())],
                })
            }),
            Just(Message::Status(Status::default())),
            (any::<u32>(), ".{0,30}", proptest::option::of(any::<u64>()))
                .prop_map(|(code, message, chunk_id)| Message::Error(ErrorMessage { code, message, chunk_id })),
        ]
    }

    proptest! {
        #[test]
        fn frames_round_trip(m in arb_message()) {
            let frame = m.to_frame();
            let bytes = frame.encode();
            prop_assert_eq!(u32::from_be_bytes(bytes[..4].try_into().unwrap()) as usize, 1 + frame.payload.len());
            let back = Frame::read_from(&mut bytes.as_slice()).unwrap().unwrap();
            prop_assert_eq!(&back, &frame);
            prop_assert_eq!(Message::from_frame(&back).unwrap(), m);
        }
    }
}

//! Length-prefixed frames carrying score requests and responses.
//!
//! A frame is a little-endian `u32` byte count followed by that many bytes:
//! a UTF-8 JSON header, a `\n`, then the tensor payload as little-endian
//! floats in channel-first order. View conditioning sends the reference
//! image as a second frame of kind `reference_image`.

use std::io::{self, Read, Write};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Conditioning, Latent, ScoreProvider, ScoreRequest, ScoreResponse, ViewCondition};

pub const PROTOCOL_VERSION: u32 = 1;
/// Frames above this size are rejected before allocation.
pub const DEFAULT_MAX_FRAME_BYTES: usize = 256 << 20;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("connection closed")]
    Closed,
    #[error("timed out waiting for the peer")]
    Timeout,
    #[error("frame of {len} bytes exceeds the limit of {max}")]
    TooLarge { len: usize, max: usize },
    #[error("malformed frame: {0}")]
    Malformed(String),
    #[error("protocol version {found}, expected {expected}")]
    VersionMismatch { expected: u32, found: u64 },
    #[error("payload has {found} bytes, header implies {expected}")]
    PayloadLength { expected: usize, found: usize },
    #[error(transparent)]
    Io(io::Error),
}

impl From<io::Error> for WireError {
    fn from(e: io::Error) -> Self {
        match e.kind() {
            io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => WireError::Timeout,
            io::ErrorKind::UnexpectedEof => WireError::Closed,
            _ => WireError::Io(e),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameKind {
    ScoreRequest,
    ScoreResponse,
    ReferenceImage,
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dtype {
    #[default]
    F32,
    F64,
}

impl Dtype {
    pub fn size(&self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ConditioningHeader {
    Text {
        embedding: Vec<f64>,
    },
    View {
        /// Row-major relative rotation.
        #[serde(rename = "R")]
        rotation: [f64; 9],
        #[serde(rename = "T")]
        translation: [f64; 3],
    },
    Unconditional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameHeader {
    pub version: u32,
    pub kind: FrameKind,
    #[serde(default)]
    pub tensor_shape: Vec<usize>,
    #[serde(default)]
    pub dtype: Dtype,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestep: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guidance_scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conditioning: Option<ConditioningHeader>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guarded: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub code: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

impl FrameHeader {
    pub fn new(kind: FrameKind, tensor_shape: Vec<usize>) -> Self {
        Self {
            version: PROTOCOL_VERSION,
            kind,
            tensor_shape,
            dtype: Dtype::F32,
            timestep: None,
            guidance_scale: None,
            conditioning: None,
            guarded: None,
            code: None,
            message: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub header: FrameHeader,
    pub payload: Vec<f64>,
}

impl Frame {
    pub fn error(code: &str, message: &str) -> Self {
        let mut header = FrameHeader::new(FrameKind::Error, Vec::new());
        header.code = Some(code.to_string());
        header.message = Some(message.to_string());
        Frame {
            header,
            payload: Vec::new(),
        }
    }
}

/// Number of tensor elements; an empty shape means no payload.
fn element_count(shape: &[usize]) -> Option<usize> {
    if shape.is_empty() {
        return Some(0);
    }
    shape.iter().try_fold(1usize, |acc, d| acc.checked_mul(*d))
}

/// Serializes a frame including its length prefix.
pub fn encode_frame(frame: &Frame) -> Result<Vec<u8>, WireError> {
    let count = element_count(&frame.header.tensor_shape)
        .ok_or_else(|| WireError::Malformed("tensor shape overflows".into()))?;
    if count != frame.payload.len() {
        return Err(WireError::PayloadLength {
            expected: count * frame.header.dtype.size(),
            found: frame.payload.len() * frame.header.dtype.size(),
        });
    }
    let json =
        serde_json::to_vec(&frame.header).map_err(|e| WireError::Malformed(e.to_string()))?;
    let body_len = json.len() + 1 + count * frame.header.dtype.size();
    let len = u32::try_from(body_len).map_err(|_| WireError::TooLarge {
        len: body_len,
        max: u32::MAX as usize,
    })?;
    let mut out = Vec::with_capacity(4 + body_len);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&json);
    out.push(b'\n');
    match frame.header.dtype {
        Dtype::F32 => {
            for v in &frame.payload {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        Dtype::F64 => {
            for v in &frame.payload {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn write_frame(w: &mut impl Write, frame: &Frame) -> Result<(), WireError> {
    w.write_all(&encode_frame(frame)?)?;
    Ok(())
}

/// Parses a frame body (everything after the length prefix).
pub fn decode_body(body: &[u8]) -> Result<Frame, WireError> {
    let split = body
        .iter()
        .position(|b| *b == b'\n')
        .ok_or_else(|| WireError::Malformed("missing header terminator".into()))?;
    let value: serde_json::Value = serde_json::from_slice(&body[..split])
        .map_err(|e| WireError::Malformed(format!("header: {e}")))?;
    match value.get("version").and_then(|v| v.as_u64()) {
        Some(v) if v == PROTOCOL_VERSION as u64 => {}
        Some(found) => {
            return Err(WireError::VersionMismatch {
                expected: PROTOCOL_VERSION,
                found,
            })
        }
        None => return Err(WireError::Malformed("header lacks a version".into())),
    }
    let header: FrameHeader =
        serde_json::from_value(value).map_err(|e| WireError::Malformed(format!("header: {e}")))?;
    let payload = &body[split + 1..];
    let count = element_count(&header.tensor_shape)
        .ok_or_else(|| WireError::Malformed("tensor shape overflows".into()))?;
    let expected = count
        .checked_mul(header.dtype.size())
        .ok_or_else(|| WireError::Malformed("tensor shape overflows".into()))?;
    if payload.len() != expected {
        return Err(WireError::PayloadLength {
            expected,
            found: payload.len(),
        });
    }
    let payload = match header.dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect(),
    };
    Ok(Frame { header, payload })
}

/// Reads one frame. A clean end of stream before the prefix is [`WireError::Closed`].
pub fn read_frame(r: &mut impl Read, max_bytes: usize) -> Result<Frame, WireError> {
    let mut prefix = [0u8; 4];
    r.read_exact(&mut prefix)?;
    let len = u32::from_le_bytes(prefix) as usize;
    if len > max_bytes {
        return Err(WireError::TooLarge {
            len,
            max: max_bytes,
        });
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => WireError::Malformed("truncated frame".into()),
        _ => e.into(),
    })?;
    decode_body(&body)
}

fn image_frame(kind: FrameKind, img: &Latent) -> Frame {
    Frame {
        header: FrameHeader::new(kind, img.shape().to_vec()),
        payload: img.to_chw(),
    }
}

fn shape3(shape: &[usize]) -> Result<[usize; 3], WireError> {
    <[usize; 3]>::try_from(shape)
        .map_err(|_| WireError::Malformed(format!("expected [C,H,W], got {shape:?}")))
}

/// Frames for a request: the request itself plus, for view conditioning,
/// the reference image.
pub fn encode_request(req: &ScoreRequest) -> Vec<Frame> {
    let mut first = image_frame(FrameKind::ScoreRequest, &req.latent);
    first.header.timestep = Some(req.timestep as u64);
    first.header.guidance_scale = Some(req.guidance_scale);
    let (cond, extra) = match &req.conditioning {
        Conditioning::Text(e) => (
            ConditioningHeader::Text {
                embedding: e.clone(),
            },
            None,
        ),
        Conditioning::Unconditional => (ConditioningHeader::Unconditional, None),
        Conditioning::View(v) => {
            let r = v.rotation();
            let mut rotation = [0.0; 9];
            for i in 0..3 {
                for j in 0..3 {
                    rotation[i * 3 + j] = r[(i, j)];
                }
            }
            let t = v.translation();
            let reference = Latent::new(v.reference().clone());
            (
                ConditioningHeader::View {
                    rotation,
                    translation: [t.x, t.y, t.z],
                },
                Some(image_frame(FrameKind::ReferenceImage, &reference)),
            )
        }
    };
    first.header.conditioning = Some(cond);
    let mut frames = vec![first];
    frames.extend(extra);
    frames
}

/// Reads a full request (one or two frames).
pub fn read_request(r: &mut impl Read, max_bytes: usize) -> Result<ScoreRequest, WireError> {
    let frame = read_frame(r, max_bytes)?;
    if frame.header.kind != FrameKind::ScoreRequest {
        return Err(WireError::Malformed(format!(
            "expected score_request, got {:?}",
            frame.header.kind
        )));
    }
    let latent = Latent::from_chw(shape3(&frame.header.tensor_shape)?, &frame.payload)
        .map_err(|e| WireError::Malformed(e.to_string()))?;
    let timestep = frame
        .header
        .timestep
        .ok_or_else(|| WireError::Malformed("request lacks a timestep".into()))?;
    let guidance_scale = frame.header.guidance_scale.unwrap_or(1.0);
    let conditioning = match frame.header.conditioning {
        None | Some(ConditioningHeader::Unconditional) => Conditioning::Unconditional,
        Some(ConditioningHeader::Text { embedding }) => Conditioning::Text(embedding),
        Some(ConditioningHeader::View {
            rotation,
            translation,
        }) => {
            let reference = read_frame(r, max_bytes)?;
            if reference.header.kind != FrameKind::ReferenceImage {
                return Err(WireError::Malformed(
                    "view conditioning without a reference_image frame".into(),
                ));
            }
            let image =
                Latent::from_chw(shape3(&reference.header.tensor_shape)?, &reference.payload)
                    .map_err(|e| WireError::Malformed(e.to_string()))?;
            let view = ViewCondition::new(
                image.into_image(),
                Matrix3::from_row_slice(&rotation),
                Vector3::from(translation),
            )
            .map_err(|e| WireError::Malformed(e.to_string()))?;
            Conditioning::View(view)
        }
    };
    Ok(ScoreRequest {
        latent,
        timestep: timestep as usize,
        conditioning,
        guidance_scale,
    })
}

pub fn write_request(w: &mut impl Write, req: &ScoreRequest) -> Result<(), WireError> {
    for frame in encode_request(req) {
        write_frame(w, &frame)?;
    }
    w.flush()?;
    Ok(())
}

pub fn encode_response(resp: &ScoreResponse, dtype: Dtype) -> Frame {
    let mut frame = image_frame(FrameKind::ScoreResponse, &resp.noise);
    frame.header.dtype = dtype;
    if resp.guarded {
        frame.header.guarded = Some(true);
    }
    frame
}

/// Outcome of decoding a response frame.
#[derive(Debug, Clone, PartialEq)]
pub enum Reply {
    Score(ScoreResponse),
    Error { code: String, message: String },
}

pub fn decode_response(frame: &Frame) -> Result<Reply, WireError> {
    match frame.header.kind {
        FrameKind::ScoreResponse => {
            let noise = Latent::from_chw(shape3(&frame.header.tensor_shape)?, &frame.payload)
                .map_err(|e| WireError::Malformed(e.to_string()))?;
            Ok(Reply::Score(ScoreResponse {
                noise,
                guarded: frame.header.guarded.unwrap_or(false),
            }))
        }
        FrameKind::Error => Ok(Reply::Error {
            code: frame.header.code.clone().unwrap_or_default(),
            message: frame.header.message.clone().unwrap_or_default(),
        }),
        other => Err(WireError::Malformed(format!("unexpected {other:?} frame"))),
    }
}

/// Answers requests on `stream` with `provider` until the peer closes it.
/// Malformed input is answered with an error frame; the loop stops after a
/// framing error since the stream can no longer be resynchronized.
pub fn serve<S: Read + Write>(
    stream: &mut S,
    provider: &dyn ScoreProvider,
    max_bytes: usize,
) -> Result<usize, WireError> {
    let mut served = 0;
    loop {
        let reply = match read_request(stream, max_bytes) {
            Ok(req) => match provider.predict(&req) {
                Ok(resp) => encode_response(&resp, Dtype::F32),
                Err(e) => Frame::error("provider_error", &e.to_string()),
            },
            Err(WireError::Closed) => return Ok(served),
            Err(e @ WireError::VersionMismatch { .. }) => {
                Frame::error("version_mismatch", &e.to_string())
            }
            Err(e @ (WireError::Malformed(_) | WireError::PayloadLength { .. })) => {
                Frame::error("bad_frame", &e.to_string())
            }
            Err(e @ WireError::TooLarge { .. }) => {
                write_frame(stream, &Frame::error("bad_frame", &e.to_string()))?;
                stream.flush()?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        write_frame(stream, &reply)?;
        stream.flush()?;
        served += 1;
    }
}

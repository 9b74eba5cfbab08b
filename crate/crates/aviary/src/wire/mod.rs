//! Binary RPC connecting simulators, actors, the replay service and the
//! trainer across processes and machines.
//!
//! Framing: `length` (4-byte big-endian, counting everything after itself),
//! `kind` (1 byte), `request_id` (4-byte big-endian), then a kind-specific
//! payload, so `length = 5 + payload length`. Responses carry the kind and
//! request id of their request; error replies use kind 255. Payload bodies
//! use little-endian scalars, 32-bit little-endian floats, length-prefixed
//! strings and count-prefixed lists (see [`codec`]).
//!
//! Connections are long-lived streams: requests may be pipelined, and
//! responses are matched by request id, not by order.

mod client;
mod codec;
mod server;

pub use client::{get_params_client, Connection};
pub use codec::{
    decode_error_body, decode_request, decode_response, encode_error_body, encode_request_body,
    encode_response_body, EpisodeReport, Request, Response, WireStateTriple,
};
pub use server::{serve, Server, Service, ServiceError};

use thiserror::Error;

/// Hard cap on a single frame; anything larger is a corrupt stream.
pub const MAX_FRAME_LEN: u32 = 64 * 1024 * 1024;

/// Frame header bytes after the length field: kind + request id.
pub const FRAME_HEADER_AFTER_LEN: u32 = 5;

/// Message kinds. Requests and responses share the value; 255 is reserved
/// for error responses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MessageKind {
    GetBatchStates = 1,
    GetStatesNonBatched = 2,
    ApplyActions = 3,
    StepPeriod = 4,
    ResetVehicle = 5,
    ResetAll = 6,
    PushExperiences = 7,
    SampleBatch = 8,
    ReplayStats = 9,
    GetParams = 10,
    ReportEpisode = 11,
    Health = 12,
    ErrorResponse = 255,
}

impl MessageKind {
    pub fn from_u8(v: u8) -> Option<MessageKind> {
        Some(match v {
            1 => MessageKind::GetBatchStates,
            2 => MessageKind::GetStatesNonBatched,
            3 => MessageKind::ApplyActions,
            4 => MessageKind::StepPeriod,
            5 => MessageKind::ResetVehicle,
            6 => MessageKind::ResetAll,
            7 => MessageKind::PushExperiences,
            8 => MessageKind::SampleBatch,
            9 => MessageKind::ReplayStats,
            10 => MessageKind::GetParams,
            11 => MessageKind::ReportEpisode,
            12 => MessageKind::Health,
            255 => MessageKind::ErrorResponse,
            _ => return None,
        })
    }

    pub const ALL_REQUESTS: [MessageKind; 12] = [
        MessageKind::GetBatchStates,
        MessageKind::GetStatesNonBatched,
        MessageKind::ApplyActions,
        MessageKind::StepPeriod,
        MessageKind::ResetVehicle,
        MessageKind::ResetAll,
        MessageKind::PushExperiences,
        MessageKind::SampleBatch,
        MessageKind::ReplayStats,
        MessageKind::GetParams,
        MessageKind::ReportEpisode,
        MessageKind::Health,
    ];
}

/// Error codes carried in ErrorResponse bodies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u16)]
pub enum ErrorCode {
    UnknownKind = 1,
    Malformed = 2,
    BadLength = 3,
    Handler = 4,
    DuplicateRequest = 5,
}

impl ErrorCode {
    pub fn from_u16(v: u16) -> Option<ErrorCode> {
        Some(match v {
            1 => ErrorCode::UnknownKind,
            2 => ErrorCode::Malformed,
            3 => ErrorCode::BadLength,
            4 => ErrorCode::Handler,
            5 => ErrorCode::DuplicateRequest,
            _ => return None,
        })
    }
}

/// Frame- and body-level decode failures, one code per failure class.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodecError {
    #[error("frame shorter than its length field claims")]
    ShortFrame,
    #[error("frame length {0} invalid")]
    BadLength(u32),
    #[error("malformed body: {0}")]
    Malformed(String),
    #[error("{0} trailing bytes after body")]
    TrailingBytes(usize),
    #[error("unknown message kind {0}")]
    UnknownKind(u8),
}

#[derive(Debug, Error)]
pub enum WireError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("request timed out")]
    Timeout,
    #[error("connection closed")]
    ConnectionClosed,
    #[error("remote error {code:?}: {message}")]
    Remote { code: Option<ErrorCode>, message: String },
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("protocol violation: {0}")]
    Protocol(String),
}

/// Assemble a full frame.
pub fn encode_frame(kind: u8, request_id: u32, payload: &[u8]) -> Vec<u8> {
    let len = FRAME_HEADER_AFTER_LEN + payload.len() as u32;
    let mut out = Vec::with_capacity(4 + len as usize);
    out.extend_from_slice(&len.to_be_bytes());
    out.push(kind);
    out.extend_from_slice(&request_id.to_be_bytes());
    out.extend_from_slice(payload);
    out
}

/// Streaming parse: `Ok(None)` when more bytes are needed, otherwise the
/// frame pieces plus the number of bytes consumed. A length below the
/// header size or above [`MAX_FRAME_LEN`] is a corrupt stream.
#[allow(clippy::type_complexity)]
pub fn try_parse_frame(buf: &[u8]) -> Result<Option<(u8, u32, Vec<u8>, usize)>, CodecError> {
    if buf.len() < 4 {
        return Ok(None);
    }
    let len = u32::from_be_bytes(buf[..4].try_into().unwrap());
    if !(FRAME_HEADER_AFTER_LEN..=MAX_FRAME_LEN).contains(&len) {
        return Err(CodecError::BadLength(len));
    }
    let total = 4 + len as usize;
    if buf.len() < total {
        return Ok(None);
    }
    let kind = buf[4];
    let request_id = u32::from_be_bytes(buf[5..9].try_into().unwrap());
    let payload = buf[9..total].to_vec();
    Ok(Some((kind, request_id, payload, total)))
}

/// One-shot frame decode for exactly one complete frame: incomplete input
/// is an error here (unlike the streaming parser), as are trailing bytes.
pub fn decode_frame(bytes: &[u8]) -> Result<(MessageKind, u32, Vec<u8>), CodecError> {
    match try_parse_frame(bytes)? {
        None => Err(CodecError::ShortFrame),
        Some((kind_byte, id, payload, consumed)) => {
            if consumed != bytes.len() {
                return Err(CodecError::TrailingBytes(bytes.len() - consumed));
            }
            let kind = MessageKind::from_u8(kind_byte).ok_or(CodecError::UnknownKind(kind_byte))?;
            Ok((kind, id, payload))
        }
    }
}

//! Typed request/response schemas and their byte-level codecs.
//!
//! Body conventions: integers little-endian, floats 32-bit little-endian
//! (bit patterns preserved), strings as u32 length + UTF-8, lists as u32
//! count + items, depth images as exactly 1024 row-major floats, poses as
//! (x, y, z, yaw) floats.

use super::{CodecError, ErrorCode, MessageKind};
use crate::arena::Pose;
use crate::dqn::{ActionIndex, StackedState};
use crate::math::Vec3;
use crate::replay::Experience;
use crate::simcore::{DepthImage, Terminal, DEPTH_PIXELS};

pub(crate) struct BodyWriter {
    buf: Vec<u8>,
}

impl BodyWriter {
    pub fn new() -> Self {
        Self { buf: Vec::new() }
    }

    pub fn with_capacity(cap: usize) -> Self {
        Self { buf: Vec::with_capacity(cap) }
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.buf.extend_from_slice(b);
    }
}

pub(crate) struct BodyReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn malformed(msg: impl Into<String>) -> CodecError {
    CodecError::Malformed(msg.into())
}

impl<'a> BodyReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        if self.pos + n > self.buf.len() {
            return Err(malformed("body truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16, CodecError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, CodecError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f32, CodecError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn str(&mut self) -> Result<String, CodecError> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| malformed("string is not UTF-8"))
    }

    pub fn bytes(&mut self) -> Result<Vec<u8>, CodecError> {
        let n = self.u32()? as usize;
        Ok(self.take(n)?.to_vec())
    }

    pub fn count(&mut self, item_min_bytes: usize) -> Result<usize, CodecError> {
        let n = self.u32()? as usize;
        if n.saturating_mul(item_min_bytes) > self.buf.len() {
            return Err(malformed(format!("list count {n} exceeds body size")));
        }
        Ok(n)
    }

    /// Every body must be fully consumed; trailing bytes are an error.
    pub fn finish(self) -> Result<(), CodecError> {
        if self.pos != self.buf.len() {
            return Err(CodecError::TrailingBytes(self.buf.len() - self.pos));
        }
        Ok(())
    }
}

fn write_image(w: &mut BodyWriter, img: &DepthImage) {
    let start = w.buf.len();
    w.buf.resize(start + DEPTH_PIXELS * 4, 0);
    for (dst, v) in w.buf[start..].chunks_exact_mut(4).zip(img.depths()) {
        dst.copy_from_slice(&v.to_le_bytes());
    }
}

fn read_image(r: &mut BodyReader) -> Result<DepthImage, CodecError> {
    let raw = r.take(DEPTH_PIXELS * 4)?;
    let depths = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    DepthImage::from_depths(depths).map_err(|e| malformed(e.to_string()))
}

fn write_state(w: &mut BodyWriter, s: &StackedState) {
    write_image(w, &s.image_now);
    write_image(w, &s.image_prev);
    for v in s.velocity {
        w.f32(v);
    }
}

fn read_state(r: &mut BodyReader) -> Result<StackedState, CodecError> {
    let image_now = read_image(r)?;
    let image_prev = read_image(r)?;
    let velocity = [r.f32()?, r.f32()?, r.f32()?];
    Ok(StackedState { image_now, image_prev, velocity })
}

fn write_experience(w: &mut BodyWriter, e: &Experience) {
    write_state(w, &e.state);
    w.u8(e.action.index() as u8);
    write_state(w, &e.next_state);
    w.f32(e.reward);
    w.u8(e.done as u8);
}

fn read_experience(r: &mut BodyReader) -> Result<Experience, CodecError> {
    let state = read_state(r)?;
    let action = ActionIndex::new(r.u8()?).map_err(|e| malformed(e.to_string()))?;
    let next_state = read_state(r)?;
    let reward = r.f32()?;
    let done = match r.u8()? {
        0 => false,
        1 => true,
        v => return Err(malformed(format!("done flag must be 0 or 1, got {v}"))),
    };
    Ok(Experience { state, action, next_state, reward, done })
}

fn write_pose(w: &mut BodyWriter, p: &Pose) {
    w.f32(p.position.x as f32);
    w.f32(p.position.y as f32);
    w.f32(p.position.z as f32);
    w.f32(p.yaw as f32);
}

fn read_pose(r: &mut BodyReader) -> Result<Pose, CodecError> {
    let x = r.f32()? as f64;
    let y = r.f32()? as f64;
    let z = r.f32()? as f64;
    let yaw = r.f32()? as f64;
    Pose::new(Vec3::new(x, y, z), yaw).map_err(|e| malformed(e.to_string()))
}

/// One collected state triple on the wire.
#[derive(Debug, Clone, PartialEq)]
pub struct WireStateTriple {
    pub now: DepthImage,
    pub prev: DepthImage,
    pub velocity: [f32; 3],
}

/// Episode summary reported by actors to the experiment coordinator.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeReport {
    pub agent_id: u32,
    pub episode: u32,
    pub reward: f32,
    pub steps: u32,
    pub epsilon: f32,
    pub t_start_ms: u64,
    pub t_end_ms: u64,
}

/// Typed request bodies, one variant per request kind.
#[derive(Debug, Clone, PartialEq)]
pub enum Request {
    GetBatchStates { agent_ids: Vec<u32> },
    GetStatesNonBatched { agent_ids: Vec<u32> },
    ApplyActions { actions: Vec<(u32, ActionIndex)> },
    StepPeriod,
    ResetVehicle { agent_id: u32, pose: Pose },
    ResetAll,
    PushExperiences { items: Vec<Experience> },
    SampleBatch { n: u32 },
    ReplayStats,
    GetParams { have_version: u64 },
    ReportEpisode(EpisodeReport),
    Health,
}

impl Request {
    pub fn kind(&self) -> MessageKind {
        match self {
            Request::GetBatchStates { .. } => MessageKind::GetBatchStates,
            Request::GetStatesNonBatched { .. } => MessageKind::GetStatesNonBatched,
            Request::ApplyActions { .. } => MessageKind::ApplyActions,
            Request::StepPeriod => MessageKind::StepPeriod,
            Request::ResetVehicle { .. } => MessageKind::ResetVehicle,
            Request::ResetAll => MessageKind::ResetAll,
            Request::PushExperiences { .. } => MessageKind::PushExperiences,
            Request::SampleBatch { .. } => MessageKind::SampleBatch,
            Request::ReplayStats => MessageKind::ReplayStats,
            Request::GetParams { .. } => MessageKind::GetParams,
            Request::ReportEpisode(_) => MessageKind::ReportEpisode,
            Request::Health => MessageKind::Health,
        }
    }
}

/// Typed response bodies. `kind_matches` ties each variant to the request
/// kind(s) it answers.
#[derive(Debug, Clone, PartialEq)]
pub enum Response {
    States(Vec<WireStateTriple>),
    ActionsApplied,
    StepOutcomes(Vec<(u32, f32, Terminal)>),
    VehicleReset,
    AllReset,
    PushOutcome { accepted: u32, rejected_indices: Vec<u32> },
    SampleNotReady,
    Batch(Vec<Experience>),
    ReplayStats { len: u64, capacity: u64, a_t: u64, insert_count: u64 },
    ParamsUpToDate,
    Params { blob: Vec<u8> },
    EpisodeAck { stop: bool },
    HealthOk,
}

impl Response {
    pub fn kind_matches(&self, kind: MessageKind) -> bool {
        matches!(
            (self, kind),
            (Response::States(_), MessageKind::GetBatchStates)
                | (Response::States(_), MessageKind::GetStatesNonBatched)
                | (Response::ActionsApplied, MessageKind::ApplyActions)
                | (Response::StepOutcomes(_), MessageKind::StepPeriod)
                | (Response::VehicleReset, MessageKind::ResetVehicle)
                | (Response::AllReset, MessageKind::ResetAll)
                | (Response::PushOutcome { .. }, MessageKind::PushExperiences)
                | (Response::SampleNotReady, MessageKind::SampleBatch)
                | (Response::Batch(_), MessageKind::SampleBatch)
                | (Response::ReplayStats { .. }, MessageKind::ReplayStats)
                | (Response::ParamsUpToDate, MessageKind::GetParams)
                | (Response::Params { .. }, MessageKind::GetParams)
                | (Response::EpisodeAck { .. }, MessageKind::ReportEpisode)
                | (Response::HealthOk, MessageKind::Health)
        )
    }
}

fn terminal_to_u8(t: Terminal) -> u8 {
    match t {
        Terminal::None => 0,
        Terminal::Collision => 1,
        Terminal::Goal => 2,
    }
}

fn terminal_from_u8(v: u8) -> Result<Terminal, CodecError> {
    Ok(match v {
        0 => Terminal::None,
        1 => Terminal::Collision,
        2 => Terminal::Goal,
        _ => return Err(malformed(format!("terminal kind {v} out of range"))),
    })
}

pub fn encode_request_body(req: &Request) -> Vec<u8> {
    let mut w = BodyWriter::new();
    match req {
        Request::GetBatchStates { agent_ids } | Request::GetStatesNonBatched { agent_ids } => {
            w.u32(agent_ids.len() as u32);
            for id in agent_ids {
                w.u32(*id);
            }
        }
        Request::ApplyActions { actions } => {
            w.u32(actions.len() as u32);
            for (id, a) in actions {
                w.u32(*id);
                w.u8(a.index() as u8);
            }
        }
        Request::StepPeriod | Request::ResetAll | Request::ReplayStats | Request::Health => {}
        Request::ResetVehicle { agent_id, pose } => {
            w.u32(*agent_id);
            write_pose(&mut w, pose);
        }
        Request::PushExperiences { items } => {
            w = BodyWriter::with_capacity(4 + items.len() * 16 * 1024);
            w.u32(items.len() as u32);
            for e in items {
                write_experience(&mut w, e);
            }
        }
        Request::SampleBatch { n } => w.u32(*n),
        Request::GetParams { have_version } => w.u64(*have_version),
        Request::ReportEpisode(r) => {
            w.u32(r.agent_id);
            w.u32(r.episode);
            w.f32(r.reward);
            w.u32(r.steps);
            w.f32(r.epsilon);
            w.u64(r.t_start_ms);
            w.u64(r.t_end_ms);
        }
    }
    w.finish()
}

pub fn decode_request(kind: MessageKind, body: &[u8]) -> Result<Request, CodecError> {
    let mut r = BodyReader::new(body);
    let req = match kind {
        MessageKind::GetBatchStates | MessageKind::GetStatesNonBatched => {
            let n = r.count(4)?;
            let mut agent_ids = Vec::with_capacity(n);
            for _ in 0..n {
                agent_ids.push(r.u32()?);
            }
            if kind == MessageKind::GetBatchStates {
                Request::GetBatchStates { agent_ids }
            } else {
                Request::GetStatesNonBatched { agent_ids }
            }
        }
        MessageKind::ApplyActions => {
            let n = r.count(5)?;
            let mut actions = Vec::with_capacity(n);
            for _ in 0..n {
                let id = r.u32()?;
                let a = ActionIndex::new(r.u8()?).map_err(|e| malformed(e.to_string()))?;
                actions.push((id, a));
            }
            Request::ApplyActions { actions }
        }
        MessageKind::StepPeriod => Request::StepPeriod,
        MessageKind::ResetVehicle => {
            let agent_id = r.u32()?;
            let pose = read_pose(&mut r)?;
            Request::ResetVehicle { agent_id, pose }
        }
        MessageKind::ResetAll => Request::ResetAll,
        MessageKind::PushExperiences => {
            let n = r.count(16_000)?;
            let mut items = Vec::with_capacity(n);
            for _ in 0..n {
                items.push(read_experience(&mut r)?);
            }
            Request::PushExperiences { items }
        }
        MessageKind::SampleBatch => Request::SampleBatch { n: r.u32()? },
        MessageKind::ReplayStats => Request::ReplayStats,
        MessageKind::GetParams => Request::GetParams { have_version: r.u64()? },
        MessageKind::ReportEpisode => Request::ReportEpisode(EpisodeReport {
            agent_id: r.u32()?,
            episode: r.u32()?,
            reward: r.f32()?,
            steps: r.u32()?,
            epsilon: r.f32()?,
            t_start_ms: r.u64()?,
            t_end_ms: r.u64()?,
        }),
        MessageKind::Health => Request::Health,
        MessageKind::ErrorResponse => {
            return Err(malformed("error responses are not valid requests"))
        }
    };
    r.finish()?;
    Ok(req)
}

pub fn encode_response_body(resp: &Response) -> Vec<u8> {
    let mut w = BodyWriter::new();
    match resp {
        Response::States(states) => {
            w = BodyWriter::with_capacity(4 + states.len() * 8 * 1024);
            w.u32(states.len() as u32);
            for s in states {
                write_image(&mut w, &s.now);
                write_image(&mut w, &s.prev);
                for v in s.velocity {
                    w.f32(v);
                }
            }
        }
        Response::ActionsApplied
        | Response::VehicleReset
        | Response::AllReset
        | Response::HealthOk => {}
        Response::StepOutcomes(items) => {
            w.u32(items.len() as u32);
            for (id, reward, terminal) in items {
                w.u32(*id);
                w.f32(*reward);
                w.u8(terminal_to_u8(*terminal));
            }
        }
        Response::PushOutcome { accepted, rejected_indices } => {
            w.u32(*accepted);
            w.u32(rejected_indices.len() as u32);
            for i in rejected_indices {
                w.u32(*i);
            }
        }
        Response::SampleNotReady => w.u8(0),
        Response::Batch(items) => {
            w = BodyWriter::with_capacity(5 + items.len() * 16 * 1024);
            w.u8(1);
            w.u32(items.len() as u32);
            for e in items {
                write_experience(&mut w, e);
            }
        }
        Response::ReplayStats { len, capacity, a_t, insert_count } => {
            w.u64(*len);
            w.u64(*capacity);
            w.u64(*a_t);
            w.u64(*insert_count);
        }
        Response::ParamsUpToDate => w.u8(1),
        Response::Params { blob } => {
            w = BodyWriter::with_capacity(5 + blob.len());
            w.u8(0);
            w.bytes(blob);
        }
        Response::EpisodeAck { stop } => w.u8(*stop as u8),
    }
    w.finish()
}

pub fn decode_response(kind: MessageKind, body: &[u8]) -> Result<Response, CodecError> {
    let mut r = BodyReader::new(body);
    let resp = match kind {
        MessageKind::GetBatchStates | MessageKind::GetStatesNonBatched => {
            let n = r.count(8 * 1024)?;
            let mut states = Vec::with_capacity(n);
            for _ in 0..n {
                let now = read_image(&mut r)?;
                let prev = read_image(&mut r)?;
                let velocity = [r.f32()?, r.f32()?, r.f32()?];
                states.push(WireStateTriple { now, prev, velocity });
            }
            Response::States(states)
        }
        MessageKind::ApplyActions => Response::ActionsApplied,
        MessageKind::StepPeriod => {
            let n = r.count(9)?;
            let mut items = Vec::with_capacity(n);
            for _ in 0..n {
                let id = r.u32()?;
                let reward = r.f32()?;
                let terminal = terminal_from_u8(r.u8()?)?;
                items.push((id, reward, terminal));
            }
            Response::StepOutcomes(items)
        }
        MessageKind::ResetVehicle => Response::VehicleReset,
        MessageKind::ResetAll => Response::AllReset,
        MessageKind::PushExperiences => {
            let accepted = r.u32()?;
            let n = r.count(4)?;
            let mut rejected_indices = Vec::with_capacity(n);
            for _ in 0..n {
                rejected_indices.push(r.u32()?);
            }
            Response::PushOutcome { accepted, rejected_indices }
        }
        MessageKind::SampleBatch => match r.u8()? {
            0 => Response::SampleNotReady,
            1 => {
                let n = r.count(16_000)?;
                let mut items = Vec::with_capacity(n);
                for _ in 0..n {
                    items.push(read_experience(&mut r)?);
                }
                Response::Batch(items)
            }
            v => return Err(malformed(format!("sample readiness flag {v}"))),
        },
        MessageKind::ReplayStats => Response::ReplayStats {
            len: r.u64()?,
            capacity: r.u64()?,
            a_t: r.u64()?,
            insert_count: r.u64()?,
        },
        MessageKind::GetParams => match r.u8()? {
            1 => Response::ParamsUpToDate,
            0 => Response::Params { blob: r.bytes()? },
            v => return Err(malformed(format!("params freshness flag {v}"))),
        },
        MessageKind::ReportEpisode => Response::EpisodeAck {
            stop: match r.u8()? {
                0 => false,
                1 => true,
                v => return Err(malformed(format!("stop flag {v}"))),
            },
        },
        MessageKind::Health => Response::HealthOk,
        MessageKind::ErrorResponse => {
            return Err(malformed("use decode_error_body for error responses"))
        }
    };
    r.finish()?;
    Ok(resp)
}

pub fn encode_error_body(code: ErrorCode, message: &str) -> Vec<u8> {
    let mut w = BodyWriter::new();
    w.u16(code as u16);
    w.str(message);
    w.finish()
}

pub fn decode_error_body(body: &[u8]) -> Result<(Option<ErrorCode>, String), CodecError> {
    let mut r = BodyReader::new(body);
    let code = ErrorCode::from_u16(r.u16()?);
    let message = r.str()?;
    r.finish()?;
    Ok((code, message))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_bodied_kinds_round_trip() {
        for req in [Request::StepPeriod, Request::ResetAll, Request::ReplayStats, Request::Health] {
            let body = encode_request_body(&req);
            assert!(matches!(req, Request::StepPeriod) || body.is_empty() || !body.is_empty());
            let back = decode_request(req.kind(), &body).unwrap();
            assert_eq!(req, back);
        }
    }

    #[test]
    fn trailing_bytes_in_body_rejected() {
        let mut body = encode_request_body(&Request::SampleBatch { n: 32 });
        body.push(9);
        assert!(matches!(
            decode_request(MessageKind::SampleBatch, &body),
            Err(CodecError::TrailingBytes(1))
        ));
    }

    #[test]
    fn float_bit_patterns_survive() {
        let mut w = BodyWriter::new();
        for bits in [0x7fc0_0001u32, 0x0000_0001, 0x8000_0000, 0xff80_0000] {
            w.f32(f32::from_bits(bits));
        }
        let body = w.finish();
        let mut r = BodyReader::new(&body);
        for bits in [0x7fc0_0001u32, 0x0000_0001, 0x8000_0000, 0xff80_0000] {
            assert_eq!(r.f32().unwrap().to_bits(), bits);
        }
    }

    #[test]
    fn error_body_round_trips() {
        let body = encode_error_body(ErrorCode::Malformed, "bad things");
        let (code, msg) = decode_error_body(&body).unwrap();
        assert_eq!(code, Some(ErrorCode::Malformed));
        assert_eq!(msg, "bad things");
    }

    #[test]
    fn absurd_list_counts_rejected_before_allocation() {
        let mut w = BodyWriter::new();
        w.u32(u32::MAX);
        let body = w.finish();
        assert!(decode_request(MessageKind::PushExperiences, &body).is_err());
    }
}

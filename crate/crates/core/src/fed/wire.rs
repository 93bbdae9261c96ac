//! Length-prefixed message framing and the binary form of a gradient update.
//!
//! Frame: `u32` little-endian length of everything after it, then a version
//! byte, a type byte and the payload.
//!
//! Update payload (little-endian): client_id `u32`, round `u32`, weight
//! `f64`, encoding `u8` (0 plain f64, 1 ring u64, 2 Paillier), count `u32`,
//! then `count` values. Paillier values use the ciphertext wire format.

use std::io::{Read, Write};

use crate::secagg::{read_ciphertext, write_ciphertext, Ciphertext};

use super::FedError;

pub const WIRE_VERSION: u8 = 1;
/// Length prefix, version and type.
pub const FRAME_HEADER_LEN: usize = 6;
/// Upper bound on `length`, applied before allocating.
pub const MAX_FRAME_LEN: usize = 1 << 28;
pub const UPDATE_HEADER_LEN: usize = 4 + 4 + 8 + 1 + 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum MsgType {
    Hello = 1,
    GlobalModel = 2,
    Update = 3,
    RoundDone = 4,
    Shutdown = 5,
}

impl MsgType {
    fn from_byte(b: u8) -> Result<Self, FedError> {
        Ok(match b {
            1 => MsgType::Hello,
            2 => MsgType::GlobalModel,
            3 => MsgType::Update,
            4 => MsgType::RoundDone,
            5 => MsgType::Shutdown,
            other => return Err(FedError::Wire(format!("unknown message type {other}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub kind: MsgType,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(kind: MsgType, payload: Vec<u8>) -> Self {
        Frame { kind, payload }
    }

    pub fn hello(client_id: u32) -> Self {
        Frame::new(MsgType::Hello, client_id.to_le_bytes().to_vec())
    }

    pub fn round_done(round: u32) -> Self {
        Frame::new(MsgType::RoundDone, round.to_le_bytes().to_vec())
    }

    pub fn shutdown() -> Self {
        Frame::new(MsgType::Shutdown, vec![])
    }

    /// Size on the wire, header included.
    pub fn wire_len(&self) -> usize {
        FRAME_HEADER_LEN + self.payload.len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.wire_len());
        out.extend_from_slice(&((self.payload.len() + 2) as u32).to_le_bytes());
        out.push(WIRE_VERSION);
        out.push(self.kind as u8);
        out.extend_from_slice(&self.payload);
        out
    }

    /// Decodes exactly one frame occupying all of `bytes`.
    pub fn decode(bytes: &[u8]) -> Result<Frame, FedError> {
        let (frame, used) = Frame::decode_prefix(bytes)?;
        if used != bytes.len() {
            return Err(FedError::Wire(format!("{} trailing bytes after frame", bytes.len() - used)));
        }
        Ok(frame)
    }

    /// Decodes the frame at the start of `bytes`, returning it and the
    /// number of bytes consumed.
    pub fn decode_prefix(bytes: &[u8]) -> Result<(Frame, usize), FedError> {
        if bytes.len() < FRAME_HEADER_LEN {
            return Err(FedError::Wire("truncated frame header".into()));
        }
        let len = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
        check_len(len)?;
        if bytes.len() < 4 + len {
            return Err(FedError::Wire("truncated frame body".into()));
        }
        let frame = Frame::from_body(&bytes[4..4 + len])?;
        Ok((frame, 4 + len))
    }

    fn from_body(body: &[u8]) -> Result<Frame, FedError> {
        if body[0] != WIRE_VERSION {
            return Err(FedError::Wire(format!("unsupported wire version {}", body[0])));
        }
        Ok(Frame { kind: MsgType::from_byte(body[1])?, payload: body[2..].to_vec() })
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Frame, FedError> {
        let mut len = [0u8; 4];
        r.read_exact(&mut len).map_err(|e| FedError::Transport(format!("reading frame length: {e}")))?;
        let len = u32::from_le_bytes(len) as usize;
        check_len(len)?;
        let mut body = vec![0u8; len];
        r.read_exact(&mut body).map_err(|e| FedError::Transport(format!("reading frame body: {e}")))?;
        Frame::from_body(&body)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<usize, FedError> {
        let bytes = self.encode();
        w.write_all(&bytes)
            .and_then(|_| w.flush())
            .map_err(|e| FedError::Transport(format!("writing frame: {e}")))?;
        Ok(bytes.len())
    }

    /// The `u32` carried by HELLO and ROUND_DONE.
    pub fn payload_u32(&self) -> Result<u32, FedError> {
        let bytes: [u8; 4] = self
            .payload
            .as_slice()
            .try_into()
            .map_err(|_| FedError::Wire(format!("expected a 4-byte payload, got {}", self.payload.len())))?;
        Ok(u32::from_le_bytes(bytes))
    }
}

fn check_len(len: usize) -> Result<(), FedError> {
    if len < 2 {
        return Err(FedError::Wire(format!("frame length {len} shorter than its header")));
    }
    if len > MAX_FRAME_LEN {
        return Err(FedError::Wire(format!("frame length {len} exceeds {MAX_FRAME_LEN}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Plain(Vec<f64>),
    /// Fixed-point values in `Z_{2^64}`, masked or not.
    Ring(Vec<u64>),
    Paillier(Vec<Ciphertext>),
}

impl Payload {
    pub fn len(&self) -> usize {
        match self {
            Payload::Plain(v) => v.len(),
            Payload::Ring(v) => v.len(),
            Payload::Paillier(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn tag(&self) -> u8 {
        match self {
            Payload::Plain(_) => 0,
            Payload::Ring(_) => 1,
            Payload::Paillier(_) => 2,
        }
    }
}

/// One client's contribution to one round.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientUpdate {
    pub client_id: u32,
    pub round: u32,
    /// Labeled-node count; public.
    pub weight: f64,
    pub payload: Payload,
}

impl GradientUpdate {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(UPDATE_HEADER_LEN + 8 * self.payload.len());
        out.extend_from_slice(&self.client_id.to_le_bytes());
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&self.weight.to_le_bytes());
        out.push(self.payload.tag());
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        match &self.payload {
            Payload::Plain(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::Ring(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::Paillier(v) => v.iter().for_each(|c| write_ciphertext(c, &mut out)),
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<GradientUpdate, FedError> {
        if bytes.len() < UPDATE_HEADER_LEN {
            return Err(FedError::Wire("truncated update header".into()));
        }
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let client_id = u32_at(0);
        let round = u32_at(4);
        let weight = f64::from_le_bytes(bytes[8..16].try_into().unwrap());
        if !(weight.is_finite() && weight > 0.0) {
            return Err(FedError::Wire(format!("update weight {weight} is not positive")));
        }
        let tag = bytes[16];
        let count = u32_at(17) as usize;
        let body = &bytes[UPDATE_HEADER_LEN..];
        let fixed = |width: usize| -> Result<(), FedError> {
            if count.checked_mul(width) != Some(body.len()) {
                return Err(FedError::Wire(format!("update body has {} bytes for {count} values", body.len())));
            }
            Ok(())
        };
        let payload = match tag {
            0 => {
                fixed(8)?;
                let v: Vec<f64> = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(FedError::Wire("non-finite value in plain update".into()));
                }
                Payload::Plain(v)
            }
            1 => {
                fixed(8)?;
                Payload::Ring(body.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect())
            }
            2 => {
                // each ciphertext takes at least its 4-byte prefix
                if count > body.len() / 4 {
                    return Err(FedError::Wire(format!("update body too short for {count} ciphertexts")));
                }
                let mut rest = body;
                let mut cs = Vec::with_capacity(count);
                for _ in 0..count {
                    let (c, used) = read_ciphertext(rest)?;
                    cs.push(c);
                    rest = &rest[used..];
                }
                if !rest.is_empty() {
                    return Err(FedError::Wire(format!("{} trailing bytes after ciphertexts", rest.len())));
                }
                Payload::Paillier(cs)
            }
            other => return Err(FedError::Wire(format!("unknown payload encoding {other}"))),
        };
        Ok(GradientUpdate { client_id, round, weight, payload })
    }

    /// Serialized size without the frame header.
    pub fn payload_bytes(&self) -> usize {
        UPDATE_HEADER_LEN
            + match &self.payload {
                Payload::Plain(v) => 8 * v.len(),
                Payload::Ring(v) => 8 * v.len(),
                Payload::Paillier(v) => v.iter().map(|c| 4 + c.0.to_bytes_be().len()).sum(),
            }
    }

    /// Serialized size as an UPDATE frame.
    pub fn bytes_on_wire(&self) -> usize {
        FRAME_HEADER_LEN + self.payload_bytes()
    }

    pub fn into_frame(&self) -> Frame {
        Frame::new(MsgType::Update, self.encode())
    }
}

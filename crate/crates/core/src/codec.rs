//! Bit-exact binary encoding of payloads and protocol frames.
//!
//! A payload is a homogeneous typed array encoded as
//! `[tag u8][count u64 LE][elements LE]`, with strings as per-element
//! `[len u32 LE][UTF-8]` and bools as one byte 0/1.
//!
//! A frame is `[magic "MCF2"][opcode u8][body_len u32 LE][body]`, with
//! strings inside bodies as `[len u16 LE][UTF-8]`. Encoded bodies and
//! payloads are capped at 1 GiB; oversize is an error, never truncation.

use std::io::Read;

use thiserror::Error;

use crate::topology::Endpoint;

/// Hard cap on encoded payload size and frame body length.
pub const MAX_BODY_LEN: usize = 1 << 30;

/// Frame magic, first four bytes on the wire.
pub const MAGIC: [u8; 4] = *b"MCF2";

/// Fixed frame header size: magic + opcode + body length.
pub const HEADER_LEN: usize = 9;

pub mod opcode {
    pub const REGISTER: u8 = 0x01;
    pub const REGISTER_ACK: u8 = 0x02;
    pub const LOOKUP: u8 = 0x03;
    pub const LOCATION: u8 = 0x04;
    pub const DEREGISTER: u8 = 0x05;
    pub const DATA: u8 = 0x06;
    pub const ABORT: u8 = 0x07;
    pub const FIN: u8 = 0x08;
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum CodecError {
    #[error("encoded size {size} exceeds the 1 GiB limit")]
    TooLarge { size: usize },
    #[error("bad frame magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unknown opcode {0:#04x}")]
    UnknownOpcode(u8),
    #[error("malformed {context}: {reason}")]
    Malformed {
        context: &'static str,
        reason: String,
    },
}

fn malformed(context: &'static str, reason: impl Into<String>) -> CodecError {
    CodecError::Malformed {
        context,
        reason: reason.into(),
    }
}

/// Element type tag of a payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PayloadType {
    Raw = 0,
    F64 = 1,
    F32 = 2,
    I32 = 3,
    I64 = 4,
    Bool = 5,
    Str = 6,
}

impl PayloadType {
    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(tag: u8) -> Option<PayloadType> {
        match tag {
            0 => Some(PayloadType::Raw),
            1 => Some(PayloadType::F64),
            2 => Some(PayloadType::F32),
            3 => Some(PayloadType::I32),
            4 => Some(PayloadType::I64),
            5 => Some(PayloadType::Bool),
            6 => Some(PayloadType::Str),
            _ => None,
        }
    }
}

/// A homogeneous typed array of message data.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Raw(Vec<u8>),
    F64(Vec<f64>),
    F32(Vec<f32>),
    I32(Vec<i32>),
    I64(Vec<i64>),
    Bool(Vec<bool>),
    Str(Vec<String>),
}

impl Payload {
    pub fn payload_type(&self) -> PayloadType {
        match self {
            Payload::Raw(_) => PayloadType::Raw,
            Payload::F64(_) => PayloadType::F64,
            Payload::F32(_) => PayloadType::F32,
            Payload::I32(_) => PayloadType::I32,
            Payload::I64(_) => PayloadType::I64,
            Payload::Bool(_) => PayloadType::Bool,
            Payload::Str(_) => PayloadType::Str,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Payload::Raw(v) => v.len(),
            Payload::F64(v) => v.len(),
            Payload::F32(v) => v.len(),
            Payload::I32(v) => v.len(),
            Payload::I64(v) => v.len(),
            Payload::Bool(v) => v.len(),
            Payload::Str(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Exact size of the encoded form, header included.
    pub fn encoded_len(&self) -> usize {
        let elements = match self {
            Payload::Raw(v) => v.len(),
            Payload::F64(v) => v.len() * 8,
            Payload::F32(v) => v.len() * 4,
            Payload::I32(v) => v.len() * 4,
            Payload::I64(v) => v.len() * 8,
            Payload::Bool(v) => v.len(),
            Payload::Str(v) => v.iter().map(|s| 4 + s.len()).sum(),
        };
        1 + 8 + elements
    }
}

/// Encodes a payload as `[tag][count u64 LE][elements]`.
pub fn encode_payload(payload: &Payload) -> Result<Vec<u8>, CodecError> {
    let size = payload.encoded_len();
    if size > MAX_BODY_LEN {
        return Err(CodecError::TooLarge { size });
    }
    let mut out = Vec::with_capacity(size);
    encode_payload_into(payload, &mut out);
    Ok(out)
}

fn encode_payload_into(payload: &Payload, out: &mut Vec<u8>) {
    out.push(payload.payload_type().tag());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    match payload {
        Payload::Raw(v) => out.extend_from_slice(v),
        Payload::F64(v) => {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Payload::F32(v) => {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Payload::I32(v) => {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Payload::I64(v) => {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Payload::Bool(v) => out.extend(v.iter().map(|&b| b as u8)),
        Payload::Str(v) => {
            for s in v {
                out.extend_from_slice(&(s.len() as u32).to_le_bytes());
                out.extend_from_slice(s.as_bytes());
            }
        }
    }
}

/// Decodes a payload, consuming the input exactly.
pub fn decode_payload(bytes: &[u8]) -> Result<Payload, CodecError> {
    let mut cursor = Cursor::new(bytes);
    let payload = cursor.payload()?;
    cursor.finish("payload")?;
    Ok(payload)
}

/// A protocol frame: one control or data message.
#[derive(Debug, Clone, PartialEq)]
pub enum Frame {
    Register {
        name: String,
        host: String,
        port: u16,
    },
    RegisterAck {
        ok: bool,
    },
    Lookup {
        name: String,
    },
    Location {
        name: String,
        host: String,
        port: u16,
    },
    Deregister {
        name: String,
    },
    Data {
        src: Endpoint,
        dst: Endpoint,
        timestamp: f64,
        payload: Payload,
    },
    Abort {
        reason: String,
    },
    Fin,
}

impl Frame {
    pub fn opcode(&self) -> u8 {
        match self {
            Frame::Register { .. } => opcode::REGISTER,
            Frame::RegisterAck { .. } => opcode::REGISTER_ACK,
            Frame::Lookup { .. } => opcode::LOOKUP,
            Frame::Location { .. } => opcode::LOCATION,
            Frame::Deregister { .. } => opcode::DEREGISTER,
            Frame::Data { .. } => opcode::DATA,
            Frame::Abort { .. } => opcode::ABORT,
            Frame::Fin => opcode::FIN,
        }
    }
}

fn put_str16(out: &mut Vec<u8>, s: &str) -> Result<(), CodecError> {
    if s.len() > u16::MAX as usize {
        return Err(CodecError::TooLarge { size: s.len() });
    }
    out.extend_from_slice(&(s.len() as u16).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

/// Encodes a frame as `[magic][opcode][body_len u32 LE][body]`.
pub fn encode_frame(frame: &Frame) -> Result<Vec<u8>, CodecError> {
    let mut body = Vec::new();
    match frame {
        Frame::Register { name, host, port } | Frame::Location { name, host, port } => {
            put_str16(&mut body, name)?;
            put_str16(&mut body, host)?;
            body.extend_from_slice(&port.to_le_bytes());
        }
        Frame::RegisterAck { ok } => body.push(*ok as u8),
        Frame::Lookup { name } | Frame::Deregister { name } => put_str16(&mut body, name)?,
        Frame::Data {
            src,
            dst,
            timestamp,
            payload,
        } => {
            put_str16(&mut body, &src.instance)?;
            put_str16(&mut body, &src.port)?;
            put_str16(&mut body, &dst.instance)?;
            put_str16(&mut body, &dst.port)?;
            body.extend_from_slice(&timestamp.to_le_bytes());
            let size = payload.encoded_len();
            if size > MAX_BODY_LEN {
                return Err(CodecError::TooLarge { size });
            }
            body.reserve(size);
            encode_payload_into(payload, &mut body);
        }
        Frame::Abort { reason } => put_str16(&mut body, reason)?,
        Frame::Fin => {}
    }
    if body.len() > MAX_BODY_LEN {
        return Err(CodecError::TooLarge { size: body.len() });
    }
    let mut out = Vec::with_capacity(HEADER_LEN + body.len());
    out.extend_from_slice(&MAGIC);
    out.push(frame.opcode());
    out.extend_from_slice(&(body.len() as u32).to_le_bytes());
    out.extend_from_slice(&body);
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize, context: &'static str) -> Result<&'a [u8], CodecError> {
        if self.remaining() < n {
            return Err(malformed(
                context,
                format!("truncated: need {n} bytes, have {}", self.remaining()),
            ));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self, context: &'static str) -> Result<u8, CodecError> {
        Ok(self.take(1, context)?[0])
    }

    fn u16(&mut self, context: &'static str) -> Result<u16, CodecError> {
        Ok(u16::from_le_bytes(self.take(2, context)?.try_into().unwrap()))
    }

    fn u32(&mut self, context: &'static str) -> Result<u32, CodecError> {
        Ok(u32::from_le_bytes(self.take(4, context)?.try_into().unwrap()))
    }

    fn u64(&mut self, context: &'static str) -> Result<u64, CodecError> {
        Ok(u64::from_le_bytes(self.take(8, context)?.try_into().unwrap()))
    }

    fn f64(&mut self, context: &'static str) -> Result<f64, CodecError> {
        Ok(f64::from_le_bytes(self.take(8, context)?.try_into().unwrap()))
    }

    fn str16(&mut self, context: &'static str) -> Result<String, CodecError> {
        let len = self.u16(context)? as usize;
        let bytes = self.take(len, context)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| malformed(context, "invalid UTF-8 in string"))
    }

    fn finish(&self, context: &'static str) -> Result<(), CodecError> {
        if self.remaining() != 0 {
            return Err(malformed(
                context,
                format!("{} trailing bytes", self.remaining()),
            ));
        }
        Ok(())
    }

    fn payload(&mut self) -> Result<Payload, CodecError> {
        const CTX: &str = "payload";
        let tag = self.u8(CTX)?;
        let ptype = PayloadType::from_tag(tag)
            .ok_or_else(|| malformed(CTX, format!("bad type tag {tag}")))?;
        let count = self.u64(CTX)? as usize;
        let fixed = |elem: usize, cursor: &mut Cursor<'a>| -> Result<&'a [u8], CodecError> {
            let need = count
                .checked_mul(elem)
                .ok_or_else(|| malformed(CTX, "element count overflows"))?;
            if cursor.remaining() < need {
                return Err(malformed(
                    CTX,
                    format!(
                        "count {count} needs {need} bytes, have {}",
                        cursor.remaining()
                    ),
                ));
            }
            cursor.take(need, CTX)
        };
        match ptype {
            PayloadType::Raw => Ok(Payload::Raw(fixed(1, self)?.to_vec())),
            PayloadType::F64 => {
                let bytes = fixed(8, self)?;
                Ok(Payload::F64(
                    bytes
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ))
            }
            PayloadType::F32 => {
                let bytes = fixed(4, self)?;
                Ok(Payload::F32(
                    bytes
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ))
            }
            PayloadType::I32 => {
                let bytes = fixed(4, self)?;
                Ok(Payload::I32(
                    bytes
                        .chunks_exact(4)
                        .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ))
            }
            PayloadType::I64 => {
                let bytes = fixed(8, self)?;
                Ok(Payload::I64(
                    bytes
                        .chunks_exact(8)
                        .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ))
            }
            PayloadType::Bool => {
                let bytes = fixed(1, self)?;
                let mut values = Vec::with_capacity(bytes.len());
                for &b in bytes {
                    match b {
                        0 => values.push(false),
                        1 => values.push(true),
                        other => {
                            return Err(malformed(CTX, format!("bool byte {other} not 0 or 1")))
                        }
                    }
                }
                Ok(Payload::Bool(values))
            }
            PayloadType::Str => {
                let mut values = Vec::with_capacity(count.min(4096));
                for _ in 0..count {
                    let len = self.u32(CTX)? as usize;
                    let bytes = self.take(len, CTX)?;
                    let s = String::from_utf8(bytes.to_vec())
                        .map_err(|_| malformed(CTX, "invalid UTF-8 in string element"))?;
                    values.push(s);
                }
                Ok(Payload::Str(values))
            }
        }
    }
}

fn decode_body(op: u8, body: &[u8]) -> Result<Frame, CodecError> {
    let mut c = Cursor::new(body);
    let frame = match op {
        opcode::REGISTER => Frame::Register {
            name: c.str16("REGISTER body")?,
            host: c.str16("REGISTER body")?,
            port: c.u16("REGISTER body")?,
        },
        opcode::REGISTER_ACK => {
            let ok = match c.u8("REGISTER_ACK body")? {
                0 => false,
                1 => true,
                other => {
                    return Err(malformed(
                        "REGISTER_ACK body",
                        format!("ok byte {other} not 0 or 1"),
                    ))
                }
            };
            Frame::RegisterAck { ok }
        }
        opcode::LOOKUP => Frame::Lookup {
            name: c.str16("LOOKUP body")?,
        },
        opcode::LOCATION => Frame::Location {
            name: c.str16("LOCATION body")?,
            host: c.str16("LOCATION body")?,
            port: c.u16("LOCATION body")?,
        },
        opcode::DEREGISTER => Frame::Deregister {
            name: c.str16("DEREGISTER body")?,
        },
        opcode::DATA => Frame::Data {
            src: Endpoint::new(c.str16("DATA body")?, c.str16("DATA body")?),
            dst: Endpoint::new(c.str16("DATA body")?, c.str16("DATA body")?),
            timestamp: c.f64("DATA body")?,
            payload: c.payload()?,
        },
        opcode::ABORT => Frame::Abort {
            reason: c.str16("ABORT body")?,
        },
        opcode::FIN => Frame::Fin,
        other => return Err(CodecError::UnknownOpcode(other)),
    };
    c.finish("frame body")?;
    Ok(frame)
}

/// Incremental frame decoder. Feed bytes in arbitrary chunks; a frame is
/// produced once its 9-byte header and full body have arrived, consuming
/// exactly `9 + body_len` bytes.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
}

impl FrameDecoder {
    pub fn new() -> Self {
        FrameDecoder::default()
    }

    pub fn feed(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Number of buffered, not yet consumed bytes.
    pub fn buffered(&self) -> usize {
        self.buf.len()
    }

    /// Returns the next complete frame, or `None` if more bytes are needed.
    /// Header errors (bad magic, unknown opcode, oversize body) are
    /// reported as soon as the header is available.
    pub fn try_decode(&mut self) -> Result<Option<Frame>, CodecError> {
        if self.buf.len() < HEADER_LEN {
            return Ok(None);
        }
        let magic: [u8; 4] = self.buf[0..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(CodecError::BadMagic(magic));
        }
        let op = self.buf[4];
        if op < opcode::REGISTER || op > opcode::FIN {
            return Err(CodecError::UnknownOpcode(op));
        }
        let body_len = u32::from_le_bytes(self.buf[5..9].try_into().unwrap()) as usize;
        if body_len > MAX_BODY_LEN {
            return Err(CodecError::TooLarge { size: body_len });
        }
        let total = HEADER_LEN + body_len;
        if self.buf.len() < total {
            return Ok(None);
        }
        let frame = decode_body(op, &self.buf[HEADER_LEN..total])?;
        self.buf.drain(..total);
        Ok(Some(frame))
    }
}

/// Decodes exactly one frame from a slice, returning it with the number of
/// bytes consumed.
pub fn decode_frame(bytes: &[u8]) -> Result<Option<(Frame, usize)>, CodecError> {
    let mut decoder = FrameDecoder::new();
    decoder.feed(bytes);
    let before = bytes.len();
    Ok(decoder
        .try_decode()?
        .map(|frame| (frame, before - decoder.buffered())))
}

/// Blocking read of one frame from a stream. Returns `Ok(None)` on clean
/// end of stream at a frame boundary.
pub fn read_frame<R: Read>(
    reader: &mut R,
    decoder: &mut FrameDecoder,
) -> Result<Option<Frame>, FrameReadError> {
    let mut chunk = [0u8; 64 * 1024];
    loop {
        if let Some(frame) = decoder.try_decode()? {
            return Ok(Some(frame));
        }
        let n = reader.read(&mut chunk)?;
        if n == 0 {
            if decoder.buffered() == 0 {
                return Ok(None);
            }
            return Err(FrameReadError::Codec(malformed(
                "frame stream",
                "connection closed mid-frame",
            )));
        }
        decoder.feed(&chunk[..n]);
    }
}

#[derive(Debug, Error)]
pub enum FrameReadError {
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("i/o error reading frame: {0}")]
    Io(#[from] std::io::Error),
}

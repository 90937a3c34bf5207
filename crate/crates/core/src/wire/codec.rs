//! Length-prefixed binary framing.
//!
//! Every frame starts with a 21-byte little-endian header:
//!
//! | offset | size | field                                  |
//! |-------:|-----:|----------------------------------------|
//! | 0      | 2    | magic `0x54 0x54`                      |
//! | 2      | 1    | version (1)                            |
//! | 3      | 1    | message type                           |
//! | 4      | 1    | flags (bit 0: CRC32 trailer present)   |
//! | 5      | 4    | sequence number (u32)                  |
//! | 9      | 8    | source timestamp, ns (u64)             |
//! | 17     | 4    | payload length (u32, ≤ 16 MiB)         |
//!
//! The payload follows, then, when flagged, the IEEE CRC32 of the payload.
//! Unknown message types decode to [`Message::Unknown`] so that receivers can
//! skip them.

use std::io::{self, Read};

use thiserror::Error;

pub const MAGIC: [u8; 2] = [0x54, 0x54];
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 21;
pub const CRC_LEN: usize = 4;
pub const MAX_PAYLOAD: usize = 16 * 1024 * 1024;
pub const FLAG_CRC: u8 = 0x01;
pub const HAPTIC_FINGERS: usize = 5;

pub mod msg_type {
    pub const SENSOR_FRAME: u8 = 0x01;
    pub const FLOW_FIELD: u8 = 0x02;
    pub const FORCE: u8 = 0x03;
    pub const HAPTIC_CMD: u8 = 0x04;
    pub const GRIP_CMD: u8 = 0x05;
    pub const RIG_TELEMETRY: u8 = 0x06;
    pub const CONTROL: u8 = 0x07;
    pub const HEARTBEAT: u8 = 0x08;
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("bad magic {0:#04x} {1:#04x}")]
    BadMagic(u8, u8),
    #[error("unsupported protocol version {0}")]
    BadVersion(u8),
    #[error("truncated frame: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("payload CRC mismatch: header says {expected:#010x}, computed {actual:#010x}")]
    CrcMismatch { expected: u32, actual: u32 },
    #[error("payload of {0} bytes exceeds the {MAX_PAYLOAD}-byte limit")]
    Oversize(usize),
    #[error("malformed {kind} payload: {reason}")]
    Malformed { kind: &'static str, reason: String },
    #[error("{0} trailing bytes after frame")]
    TrailingBytes(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum ControlCode {
    Start = 0,
    Stop = 1,
    FeedbackOn = 2,
    FeedbackOff = 3,
}

impl ControlCode {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Self::Start),
            1 => Some(Self::Stop),
            2 => Some(Self::FeedbackOn),
            3 => Some(Self::FeedbackOff),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WireFlowEntry {
    pub bx: f32,
    pub by: f32,
    pub dx: f32,
    pub dy: f32,
    pub valid: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    SensorFrame {
        width: u16,
        height: u16,
        /// Pixel format; only 0 (gray8) is defined.
        format: u8,
        pixels: Vec<u8>,
    },
    FlowField(Vec<WireFlowEntry>),
    Force {
        fx: f32,
        fy: f32,
        fn_: f32,
        tau: f32,
        total: f32,
        quality_percent: u8,
    },
    /// Fixed-point intensities, `round(intensity · 65535)`.
    HapticCmd([u16; HAPTIC_FINGERS]),
    GripCmd {
        aperture: f32,
        max_rate: f32,
    },
    /// time, motor_pos, object_pos, tension, normal, regime (0 stuck / 1 slipping).
    RigTelemetry([f32; 6]),
    Control(ControlCode),
    Heartbeat,
    Unknown {
        msg_type: u8,
        payload: Vec<u8>,
    },
}

impl Message {
    pub fn msg_type(&self) -> u8 {
        use msg_type::*;
        match self {
            Message::SensorFrame { .. } => SENSOR_FRAME,
            Message::FlowField(_) => FLOW_FIELD,
            Message::Force { .. } => FORCE,
            Message::HapticCmd(_) => HAPTIC_CMD,
            Message::GripCmd { .. } => GRIP_CMD,
            Message::RigTelemetry(_) => RIG_TELEMETRY,
            Message::Control(_) => CONTROL,
            Message::Heartbeat => HEARTBEAT,
            Message::Unknown { msg_type, .. } => *msg_type,
        }
    }

    pub fn haptic_from_intensities(intensities: &[f64; HAPTIC_FINGERS]) -> Message {
        let mut fixed = [0u16; HAPTIC_FINGERS];
        for (f, i) in fixed.iter_mut().zip(intensities) {
            *f = intensity_to_fixed(*i);
        }
        Message::HapticCmd(fixed)
    }

    pub fn payload_len(&self) -> usize {
        match self {
            Message::SensorFrame { pixels, .. } => 5 + pixels.len(),
            Message::FlowField(entries) => 2 + 17 * entries.len(),
            Message::Force { .. } => 21,
            Message::HapticCmd(_) => 1 + 2 * HAPTIC_FINGERS,
            Message::GripCmd { .. } => 8,
            Message::RigTelemetry(_) => 24,
            Message::Control(_) => 1,
            Message::Heartbeat => 0,
            Message::Unknown { payload, .. } => payload.len(),
        }
    }

    fn write_payload(&self, out: &mut Vec<u8>) -> Result<(), WireError> {
        match self {
            Message::SensorFrame {
                width,
                height,
                format,
                pixels,
            } => {
                if pixels.len() != *width as usize * *height as usize {
                    return Err(malformed(
                        "SENSOR_FRAME",
                        format!("{} pixels for {width}x{height}", pixels.len()),
                    ));
                }
                out.extend_from_slice(&width.to_le_bytes());
                out.extend_from_slice(&height.to_le_bytes());
                out.push(*format);
                out.extend_from_slice(pixels);
            }
            Message::FlowField(entries) => {
                let n = u16::try_from(entries.len())
                    .map_err(|_| malformed("FLOW_FIELD", format!("{} entries", entries.len())))?;
                out.extend_from_slice(&n.to_le_bytes());
                for e in entries {
                    for v in [e.bx, e.by, e.dx, e.dy] {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                    out.push(u8::from(e.valid));
                }
            }
            Message::Force {
                fx,
                fy,
                fn_,
                tau,
                total,
                quality_percent,
            } => {
                for v in [fx, fy, fn_, tau, total] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                out.push(*quality_percent);
            }
            Message::HapticCmd(values) => {
                out.push(HAPTIC_FINGERS as u8);
                for v in values {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            Message::GripCmd { aperture, max_rate } => {
                out.extend_from_slice(&aperture.to_le_bytes());
                out.extend_from_slice(&max_rate.to_le_bytes());
            }
            Message::RigTelemetry(values) => {
                for v in values {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            Message::Control(code) => out.push(*code as u8),
            Message::Heartbeat => {}
            Message::Unknown { payload, .. } => out.extend_from_slice(payload),
        }
        Ok(())
    }
}

pub fn intensity_to_fixed(intensity: f64) -> u16 {
    (intensity.clamp(0.0, 1.0) * 65535.0).round() as u16
}

pub fn fixed_to_intensity(fixed: u16) -> f64 {
    fixed as f64 / 65535.0
}

fn malformed(kind: &'static str, reason: String) -> WireError {
    WireError::Malformed { kind, reason }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub seq: u32,
    pub timestamp_ns: u64,
    pub with_crc: bool,
    pub message: Message,
}

impl Frame {
    pub fn new(message: Message, seq: u32, timestamp_ns: u64) -> Self {
        Self {
            seq,
            timestamp_ns,
            with_crc: false,
            message,
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>, WireError> {
        encode(&self.message, self.seq, self.timestamp_ns, self.with_crc)
    }
}

pub fn encode(msg: &Message, seq: u32, timestamp_ns: u64, with_crc: bool) -> Result<Vec<u8>, WireError> {
    let len = msg.payload_len();
    if len > MAX_PAYLOAD {
        return Err(WireError::Oversize(len));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + len + CRC_LEN);
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(msg.msg_type());
    out.push(if with_crc { FLAG_CRC } else { 0 });
    out.extend_from_slice(&seq.to_le_bytes());
    out.extend_from_slice(&timestamp_ns.to_le_bytes());
    out.extend_from_slice(&(len as u32).to_le_bytes());
    msg.write_payload(&mut out)?;
    debug_assert_eq!(out.len(), HEADER_LEN + len);
    if with_crc {
        let crc = crc32fast::hash(&out[HEADER_LEN..]);
        out.extend_from_slice(&crc.to_le_bytes());
    }
    Ok(out)
}

/// Parsed fixed header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub msg_type: u8,
    pub flags: u8,
    pub seq: u32,
    pub timestamp_ns: u64,
    pub payload_len: usize,
}

impl Header {
    pub fn parse(bytes: &[u8]) -> Result<Header, WireError> {
        if bytes.len() < HEADER_LEN {
            // Report a bad magic as early as possible, even on short input.
            if bytes.len() >= 2 && bytes[..2] != MAGIC {
                return Err(WireError::BadMagic(bytes[0], bytes[1]));
            }
            return Err(WireError::Truncated {
                needed: HEADER_LEN,
                have: bytes.len(),
            });
        }
        if bytes[..2] != MAGIC {
            return Err(WireError::BadMagic(bytes[0], bytes[1]));
        }
        if bytes[2] != VERSION {
            return Err(WireError::BadVersion(bytes[2]));
        }
        let flags = bytes[4];
        if flags & !FLAG_CRC != 0 {
            return Err(malformed("header", format!("unknown flag bits {flags:#04x}")));
        }
        let payload_len = u32::from_le_bytes(bytes[17..21].try_into().unwrap()) as usize;
        if payload_len > MAX_PAYLOAD {
            return Err(WireError::Oversize(payload_len));
        }
        Ok(Header {
            msg_type: bytes[3],
            flags,
            seq: u32::from_le_bytes(bytes[5..9].try_into().unwrap()),
            timestamp_ns: u64::from_le_bytes(bytes[9..17].try_into().unwrap()),
            payload_len,
        })
    }

    pub fn has_crc(&self) -> bool {
        self.flags & FLAG_CRC != 0
    }

    /// Bytes following the header: payload plus optional CRC trailer.
    pub fn body_len(&self) -> usize {
        self.payload_len + if self.has_crc() { CRC_LEN } else { 0 }
    }
}

/// Decodes exactly one frame occupying all of `bytes`.
pub fn decode(bytes: &[u8]) -> Result<Frame, WireError> {
    let (frame, used) = decode_prefix(bytes)?;
    if used != bytes.len() {
        return Err(WireError::TrailingBytes(bytes.len() - used));
    }
    Ok(frame)
}

/// Decodes the frame at the start of `bytes`, returning it with the number
/// of bytes it occupied. [`WireError::Truncated`] means more input is needed.
pub fn decode_prefix(bytes: &[u8]) -> Result<(Frame, usize), WireError> {
    let header = Header::parse(bytes)?;
    let total = HEADER_LEN + header.body_len();
    if bytes.len() < total {
        return Err(WireError::Truncated {
            needed: total,
            have: bytes.len(),
        });
    }
    let frame = decode_body(&header, &bytes[HEADER_LEN..total])?;
    Ok((frame, total))
}

/// Decodes a frame body (payload plus optional CRC) against its header.
pub fn decode_body(header: &Header, body: &[u8]) -> Result<Frame, WireError> {
    if body.len() != header.body_len() {
        return Err(WireError::Truncated {
            needed: header.body_len(),
            have: body.len(),
        });
    }
    let payload = &body[..header.payload_len];
    if header.has_crc() {
        let expected = u32::from_le_bytes(body[header.payload_len..].try_into().unwrap());
        let actual = crc32fast::hash(payload);
        if expected != actual {
            return Err(WireError::CrcMismatch { expected, actual });
        }
    }
    Ok(Frame {
        seq: header.seq,
        timestamp_ns: header.timestamp_ns,
        with_crc: header.has_crc(),
        message: decode_payload(header.msg_type, payload)?,
    })
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> &'a [u8] {
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        s
    }
    fn u8(&mut self) -> u8 {
        self.take(1)[0]
    }
    fn u16(&mut self) -> u16 {
        u16::from_le_bytes(self.take(2).try_into().unwrap())
    }
    fn f32(&mut self) -> f32 {
        f32::from_le_bytes(self.take(4).try_into().unwrap())
    }
}

fn expect_len(kind: &'static str, payload: &[u8], want: usize) -> Result<(), WireError> {
    if payload.len() != want {
        return Err(malformed(kind, format!("length {} != {want}", payload.len())));
    }
    Ok(())
}

fn decode_payload(kind: u8, payload: &[u8]) -> Result<Message, WireError> {
    use msg_type::*;
    let mut c = Cursor { buf: payload, pos: 0 };
    let msg = match kind {
        SENSOR_FRAME => {
            if payload.len() < 5 {
                return Err(malformed("SENSOR_FRAME", "short header".into()));
            }
            let width = c.u16();
            let height = c.u16();
            let format = c.u8();
            if format != 0 {
                return Err(malformed("SENSOR_FRAME", format!("pixel format {format}")));
            }
            expect_len("SENSOR_FRAME", payload, 5 + width as usize * height as usize)?;
            Message::SensorFrame {
                width,
                height,
                format,
                pixels: payload[5..].to_vec(),
            }
        }
        FLOW_FIELD => {
            if payload.len() < 2 {
                return Err(malformed("FLOW_FIELD", "short header".into()));
            }
            let n = c.u16() as usize;
            expect_len("FLOW_FIELD", payload, 2 + 17 * n)?;
            let mut entries = Vec::with_capacity(n);
            for _ in 0..n {
                let (bx, by, dx, dy) = (c.f32(), c.f32(), c.f32(), c.f32());
                let valid = match c.u8() {
                    0 => false,
                    1 => true,
                    v => return Err(malformed("FLOW_FIELD", format!("valid flag {v}"))),
                };
                entries.push(WireFlowEntry { bx, by, dx, dy, valid });
            }
            Message::FlowField(entries)
        }
        FORCE => {
            expect_len("FORCE", payload, 21)?;
            Message::Force {
                fx: c.f32(),
                fy: c.f32(),
                fn_: c.f32(),
                tau: c.f32(),
                total: c.f32(),
                quality_percent: c.u8(),
            }
        }
        HAPTIC_CMD => {
            expect_len("HAPTIC_CMD", payload, 1 + 2 * HAPTIC_FINGERS)?;
            let n = c.u8();
            if n as usize != HAPTIC_FINGERS {
                return Err(malformed("HAPTIC_CMD", format!("{n} fingers")));
            }
            let mut values = [0u16; HAPTIC_FINGERS];
            for v in &mut values {
                *v = c.u16();
            }
            Message::HapticCmd(values)
        }
        GRIP_CMD => {
            expect_len("GRIP_CMD", payload, 8)?;
            Message::GripCmd {
                aperture: c.f32(),
                max_rate: c.f32(),
            }
        }
        RIG_TELEMETRY => {
            expect_len("RIG_TELEMETRY", payload, 24)?;
            let mut values = [0f32; 6];
            for v in &mut values {
                *v = c.f32();
            }
            Message::RigTelemetry(values)
        }
        CONTROL => {
            expect_len("CONTROL", payload, 1)?;
            let code = c.u8();
            Message::Control(ControlCode::from_u8(code).ok_or_else(|| malformed("CONTROL", format!("code {code}")))?)
        }
        HEARTBEAT => {
            expect_len("HEARTBEAT", payload, 0)?;
            Message::Heartbeat
        }
        other => Message::Unknown {
            msg_type: other,
            payload: payload.to_vec(),
        },
    };
    Ok(msg)
}

/// Reads one frame from a byte stream. Allocation is bounded by the header's
/// payload length, which is checked against [`MAX_PAYLOAD`] first.
pub fn read_frame<R: Read>(reader: &mut R) -> io::Result<Result<Frame, WireError>> {
    let mut header = [0u8; HEADER_LEN];
    reader.read_exact(&mut header)?;
    let header = match Header::parse(&header) {
        Ok(h) => h,
        Err(e) => return Ok(Err(e)),
    };
    let mut body = vec![0u8; header.body_len()];
    reader.read_exact(&mut body)?;
    Ok(decode_body(&header, &body))
}

/// Incremental decoder for a byte stream of back-to-back frames, for readers
/// that may be interrupted partway through a frame.
#[derive(Debug, Default)]
pub struct FrameReader {
    buf: Vec<u8>,
}

impl FrameReader {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn extend(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Bytes received but not yet consumed.
    pub fn buffered(&self) -> usize {
        self.buf.len()
    }

    /// `Ok(None)` means more bytes are needed. `Ok(Some(Err(_)))` is a frame
    /// whose body was rejected; it has been skipped and the stream is still in
    /// sync. An outer `Err` is a broken header after which the stream cannot
    /// be resynchronized.
    pub fn next_frame(&mut self) -> Result<Option<Result<Frame, WireError>>, WireError> {
        let header = match Header::parse(&self.buf) {
            Ok(h) => h,
            Err(WireError::Truncated { .. }) => return Ok(None),
            Err(e) => return Err(e),
        };
        let total = HEADER_LEN + header.body_len();
        if self.buf.len() < total {
            return Ok(None);
        }
        let result = decode_body(&header, &self.buf[HEADER_LEN..total]);
        self.buf.drain(..total);
        Ok(Some(result))
    }
}

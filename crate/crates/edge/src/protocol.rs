//! CKMP framing: `u32 magic | u8 type | u32 length | payload`, little-endian.

use std::io::{self, Read, Write};

use crate::error::{EdgeError, Result};

pub const CKMP_MAGIC: u32 = 0x434B_4D50;
pub const HEADER_LEN: usize = 9;
/// Largest payload either side will accept.
pub const MAX_PAYLOAD: u32 = 256 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum FrameType {
    ListReq = 0x01,
    ListResp = 0x02,
    GetManifest = 0x03,
    Manifest = 0x04,
    GetWeights = 0x05,
    Weights = 0x06,
    Error = 0x7F,
}

impl FrameType {
    pub fn from_u8(b: u8) -> Option<Self> {
        Some(match b {
            0x01 => FrameType::ListReq,
            0x02 => FrameType::ListResp,
            0x03 => FrameType::GetManifest,
            0x04 => FrameType::Manifest,
            0x05 => FrameType::GetWeights,
            0x06 => FrameType::Weights,
            0x7F => FrameType::Error,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub kind: FrameType,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(kind: FrameType, payload: impl Into<Vec<u8>>) -> Self {
        Frame {
            kind,
            payload: payload.into(),
        }
    }

    pub fn error(msg: &str) -> Self {
        Frame::new(FrameType::Error, msg.as_bytes())
    }

    /// Bytes this frame occupies on the wire.
    pub fn wire_len(&self) -> u64 {
        (HEADER_LEN + self.payload.len()) as u64
    }

    pub fn text(&self) -> Result<&str> {
        std::str::from_utf8(&self.payload)
            .map_err(|_| EdgeError::protocol(format!("{:?} payload is not UTF-8", self.kind)))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        out.extend_from_slice(&CKMP_MAGIC.to_le_bytes());
        out.push(self.kind as u8);
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }
}

pub fn write_frame<W: Write>(w: &mut W, frame: &Frame) -> Result<()> {
    if frame.payload.len() > MAX_PAYLOAD as usize {
        return Err(EdgeError::protocol(format!(
            "payload of {} bytes exceeds frame limit",
            frame.payload.len()
        )));
    }
    let mut header = [0u8; HEADER_LEN];
    header[..4].copy_from_slice(&CKMP_MAGIC.to_le_bytes());
    header[4] = frame.kind as u8;
    header[5..].copy_from_slice(&(frame.payload.len() as u32).to_le_bytes());
    w.write_all(&header)?;
    w.write_all(&frame.payload)?;
    w.flush()?;
    Ok(())
}

/// Reads one frame; `Ok(None)` on a clean end of stream before any header byte.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<Frame>> {
    let mut header = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        match r.read(&mut header[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(EdgeError::protocol("stream ended inside a frame header")),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let magic = u32::from_le_bytes(header[..4].try_into().expect("4 bytes"));
    if magic != CKMP_MAGIC {
        return Err(EdgeError::protocol(format!("bad magic 0x{magic:08X}")));
    }
    let kind = FrameType::from_u8(header[4])
        .ok_or_else(|| EdgeError::protocol(format!("unknown frame type 0x{:02X}", header[4])))?;
    let len = u32::from_le_bytes(header[5..].try_into().expect("4 bytes"));
    if len > MAX_PAYLOAD {
        return Err(EdgeError::protocol(format!(
            "frame length {len} exceeds limit"
        )));
    }
    let mut payload = vec![0u8; len as usize];
    r.read_exact(&mut payload).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => EdgeError::protocol("stream ended inside a frame payload"),
        _ => e.into(),
    })?;
    Ok(Some(Frame { kind, payload }))
}

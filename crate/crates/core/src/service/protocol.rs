//! Wire messages: `type u8 | payload length u32 LE | payload`.

use std::io::{self, Read, Write};

use crate::error::{Error, Result};
use crate::keys::KeyBlock;

pub const MAX_MESSAGE_BYTES: usize = 64 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum MsgType {
    Handshake = 0x01,
    HandshakeResp = 0x02,
    Query = 0x03,
    Response = 0x04,
    Error = 0x7F,
}

impl MsgType {
    pub fn from_byte(b: u8) -> Option<Self> {
        Some(match b {
            0x01 => MsgType::Handshake,
            0x02 => MsgType::HandshakeResp,
            0x03 => MsgType::Query,
            0x04 => MsgType::Response,
            0x7F => MsgType::Error,
            _ => return None,
        })
    }
}

/// Error codes carried in `Error` messages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum ErrorCode {
    Protocol = 1,
    Rejected = 2,
    Internal = 3,
    Expired = 4,
}

impl ErrorCode {
    fn from_byte(b: u8) -> Self {
        match b {
            2 => ErrorCode::Rejected,
            3 => ErrorCode::Internal,
            4 => ErrorCode::Expired,
            _ => ErrorCode::Protocol,
        }
    }
}

pub fn write_message<W: Write>(w: &mut W, ty: MsgType, payload: &[u8]) -> Result<()> {
    if payload.len() > MAX_MESSAGE_BYTES {
        return Err(Error::protocol("message too large"));
    }
    let mut head = [0u8; 5];
    head[0] = ty as u8;
    head[1..].copy_from_slice(&(payload.len() as u32).to_le_bytes());
    w.write_all(&head)?;
    w.write_all(payload)?;
    w.flush()?;
    Ok(())
}

/// `None` on a clean end of stream before a message starts.
pub fn read_message<R: Read>(r: &mut R) -> Result<Option<(MsgType, Vec<u8>)>> {
    let mut head = [0u8; 5];
    let mut got = 0;
    while got < head.len() {
        match r.read(&mut head[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(Error::protocol("connection closed inside a message header")),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let ty = MsgType::from_byte(head[0]).ok_or_else(|| Error::protocol(format!("unknown message type 0x{:02x}", head[0])))?;
    let len = u32::from_le_bytes(head[1..].try_into().unwrap()) as usize;
    if len > MAX_MESSAGE_BYTES {
        return Err(Error::protocol(format!("message of {len} bytes exceeds limit")));
    }
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::protocol("connection closed inside a message"),
        _ => e.into(),
    })?;
    Ok(Some((ty, payload)))
}

pub fn error_payload(code: ErrorCode, message: &str) -> Vec<u8> {
    let mut p = Vec::with_capacity(1 + message.len());
    p.push(code as u8);
    p.extend_from_slice(message.as_bytes());
    p
}

pub fn parse_error_payload(p: &[u8]) -> (ErrorCode, String) {
    match p.split_first() {
        Some((&c, rest)) => (ErrorCode::from_byte(c), String::from_utf8_lossy(rest).into_owned()),
        None => (ErrorCode::Protocol, String::new()),
    }
}

/// Query plaintext: `key_count u32 | key_length u16 | keys`.
pub fn encode_query(keys: &KeyBlock) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + keys.as_bytes().len());
    out.extend_from_slice(&(keys.len() as u32).to_le_bytes());
    out.extend_from_slice(&(keys.width() as u16).to_le_bytes());
    out.extend_from_slice(keys.as_bytes());
    out
}

pub fn decode_query(p: &[u8]) -> Result<KeyBlock> {
    if p.len() < 6 {
        return Err(Error::protocol("query payload too short"));
    }
    let count = u32::from_le_bytes(p[..4].try_into().unwrap()) as usize;
    let width = u16::from_le_bytes([p[4], p[5]]) as usize;
    if (p.len() - 6) as u128 != count as u128 * width as u128 {
        return Err(Error::protocol("query payload length does not match its header"));
    }
    if width == 0 {
        return Err(Error::protocol("zero-length query keys"));
    }
    KeyBlock::from_bytes(width, p[6..].to_vec())
}

//! Byte-level framing for everything that crosses a socket.
//!
//! Signaling travels as length-prefixed envelopes over a reliable stream:
//!
//! ```text
//! 0..4    length of everything after this field (u32, big-endian)
//! 4       kind
//! 5..13   envelope id (u64)
//! 13..21  sent-at, ms since the Unix epoch, UTC (u64)
//! 21..    from: u16 length + UTF-8, to: u16 length + UTF-8, then body
//! ```
//!
//! Voice travels as datagrams with a fixed 16-byte header:
//!
//! ```text
//! 0       version (high nibble) | payload type (low nibble)
//! 1       reserved, always 0
//! 2..4    sequence (u16)
//! 4..8    timestamp (u32, sample clock)
//! 8..12   source id (u32)
//! 12..14  authentication tag length (u16)
//! 14..16  flags (u16)
//! 16..    ciphertext, tag included
//! ```
//!
//! All integers are big-endian.

use std::collections::HashMap;
use std::fmt;
use std::io;

use thiserror::Error;
use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt};

use crate::clock::UtcMillis;

/// Upper bound on an envelope body.
pub const MAX_BODY_LEN: usize = 256 * 1024;
/// Upper bound on the encoded `from`/`to` identifiers, in bytes.
pub const MAX_ID_LEN: usize = 256;
/// Bytes preceding the variable part of a signal frame, length prefix included.
pub const SIGNAL_FIXED_LEN: usize = 21;
/// Largest value the length prefix may legally carry.
pub const MAX_FRAME_PAYLOAD: usize = SIGNAL_FIXED_LEN - 4 + 2 * (2 + MAX_ID_LEN) + MAX_BODY_LEN;

pub const MEDIA_HEADER_LEN: usize = 16;
/// Datagram ceiling; keeps media below common path MTUs.
pub const MAX_DATAGRAM_LEN: usize = 1400;
pub const MEDIA_VERSION: u8 = 1;
pub const PAYLOAD_PCM16_MONO: u8 = 0;
/// Flag bit set on the first frame of a call.
pub const FLAG_MARKER: u16 = 0x0001;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("body of {len} bytes exceeds the {max} byte limit", max = MAX_BODY_LEN)]
    BodyTooLarge { len: usize },
    #[error("identifier of {len} bytes exceeds the {max} byte limit", max = MAX_ID_LEN)]
    IdTooLong { len: usize },
    #[error("datagram of {len} bytes exceeds the {max} byte limit", max = MAX_DATAGRAM_LEN)]
    FrameTooLarge { len: usize },
    #[error("media frame has an empty ciphertext")]
    EmptyCiphertext,
    #[error("malformed frame: {0}")]
    Malformed(&'static str),
}

#[derive(Debug, Error)]
pub enum ReadError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Wire(#[from] WireError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Kind {
    Login = 1,
    Signup = 2,
    Presence = 3,
    Roster = 4,
    Chat = 5,
    CallInvite = 6,
    CallAccept = 7,
    CallReject = 8,
    CallEnd = 9,
    KeyExchange = 10,
    FileOffer = 11,
    FileAccept = 12,
    FileChunk = 13,
    Error = 14,
    Ping = 15,
    Pong = 16,
}

impl Kind {
    pub const ALL: [Kind; 16] = [
        Kind::Login,
        Kind::Signup,
        Kind::Presence,
        Kind::Roster,
        Kind::Chat,
        Kind::CallInvite,
        Kind::CallAccept,
        Kind::CallReject,
        Kind::CallEnd,
        Kind::KeyExchange,
        Kind::FileOffer,
        Kind::FileAccept,
        Kind::FileChunk,
        Kind::Error,
        Kind::Ping,
        Kind::Pong,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            Kind::Login => "LOGIN",
            Kind::Signup => "SIGNUP",
            Kind::Presence => "PRESENCE",
            Kind::Roster => "ROSTER",
            Kind::Chat => "CHAT",
            Kind::CallInvite => "CALL_INVITE",
            Kind::CallAccept => "CALL_ACCEPT",
            Kind::CallReject => "CALL_REJECT",
            Kind::CallEnd => "CALL_END",
            Kind::KeyExchange => "KEY_EXCHANGE",
            Kind::FileOffer => "FILE_OFFER",
            Kind::FileAccept => "FILE_ACCEPT",
            Kind::FileChunk => "FILE_CHUNK",
            Kind::Error => "ERROR",
            Kind::Ping => "PING",
            Kind::Pong => "PONG",
        }
    }
}

impl TryFrom<u8> for Kind {
    type Error = WireError;

    fn try_from(code: u8) -> Result<Self, WireError> {
        Kind::ALL
            .get(code.wrapping_sub(1) as usize)
            .copied()
            .ok_or(WireError::Malformed("unknown kind"))
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A typed signaling message. An empty `to` addresses the hop endpoint
/// (the server, or the peer on a direct connection); an empty `from` marks a
/// message originated by that endpoint.
#[derive(Clone, PartialEq, Eq)]
pub struct SignalEnvelope {
    pub kind: Kind,
    pub from: String,
    pub to: String,
    pub id: u64,
    pub sent_at: UtcMillis,
    pub body: Vec<u8>,
}

impl SignalEnvelope {
    pub fn new(kind: Kind, from: impl Into<String>, to: impl Into<String>, id: u64, body: Vec<u8>) -> Self {
        Self {
            kind,
            from: from.into(),
            to: to.into(),
            id,
            sent_at: UtcMillis::now(),
            body,
        }
    }
}

impl fmt::Debug for SignalEnvelope {
    // bodies can carry chat text and credentials, so only their size is shown
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SignalEnvelope")
            .field("kind", &self.kind)
            .field("from", &self.from)
            .field("to", &self.to)
            .field("id", &self.id)
            .field("sent_at", &self.sent_at.0)
            .field("body_len", &self.body.len())
            .finish()
    }
}

pub fn encode_envelope(env: &SignalEnvelope) -> Result<Vec<u8>, WireError> {
    if env.body.len() > MAX_BODY_LEN {
        return Err(WireError::BodyTooLarge { len: env.body.len() });
    }
    for id in [&env.from, &env.to] {
        if id.len() > MAX_ID_LEN {
            return Err(WireError::IdTooLong { len: id.len() });
        }
    }
    let payload_len = SIGNAL_FIXED_LEN - 4 + 2 + env.from.len() + 2 + env.to.len() + env.body.len();
    let mut out = Vec::with_capacity(4 + payload_len);
    out.extend_from_slice(&(payload_len as u32).to_be_bytes());
    out.push(env.kind.code());
    out.extend_from_slice(&env.id.to_be_bytes());
    out.extend_from_slice(&env.sent_at.0.to_be_bytes());
    for id in [&env.from, &env.to] {
        out.extend_from_slice(&(id.len() as u16).to_be_bytes());
        out.extend_from_slice(id.as_bytes());
    }
    out.extend_from_slice(&env.body);
    Ok(out)
}

/// Validates a length prefix, returning the number of payload bytes that follow it.
pub fn frame_payload_len(prefix: [u8; 4]) -> Result<usize, WireError> {
    let len = u32::from_be_bytes(prefix) as usize;
    if len < SIGNAL_FIXED_LEN - 4 + 4 {
        return Err(WireError::Malformed("length below minimum frame"));
    }
    if len > MAX_FRAME_PAYLOAD {
        return Err(WireError::Malformed("length above maximum frame"));
    }
    Ok(len)
}

/// Decodes exactly one frame. Trailing bytes are a protocol violation.
pub fn decode_envelope(bytes: &[u8]) -> Result<SignalEnvelope, WireError> {
    if bytes.len() < 4 {
        return Err(WireError::Malformed("truncated length prefix"));
    }
    let len = frame_payload_len([bytes[0], bytes[1], bytes[2], bytes[3]])?;
    let rest = &bytes[4..];
    if rest.len() < len {
        return Err(WireError::Malformed("truncated frame"));
    }
    if rest.len() > len {
        return Err(WireError::Malformed("trailing bytes after frame"));
    }
    decode_payload(rest)
}

/// Decodes the bytes that follow a validated length prefix.
pub fn decode_payload(p: &[u8]) -> Result<SignalEnvelope, WireError> {
    let mut cur = Cursor { buf: p, pos: 0 };
    let kind = Kind::try_from(cur.u8()?)?;
    let id = cur.u64()?;
    let sent_at = UtcMillis(cur.u64()?);
    let from = cur.ident()?;
    let to = cur.ident()?;
    let body = cur.rest();
    if body.len() > MAX_BODY_LEN {
        return Err(WireError::Malformed("body above limit"));
    }
    Ok(SignalEnvelope {
        kind,
        from,
        to,
        id,
        sent_at,
        body: body.to_vec(),
    })
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or(WireError::Malformed("truncated field"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, WireError> {
        let b = self.take(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn u64(&mut self) -> Result<u64, WireError> {
        let b = self.take(8)?;
        Ok(u64::from_be_bytes(b.try_into().expect("8 bytes")))
    }

    fn ident(&mut self) -> Result<String, WireError> {
        let len = self.u16()? as usize;
        if len > MAX_ID_LEN {
            return Err(WireError::Malformed("identifier above limit"));
        }
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| WireError::Malformed("identifier is not UTF-8"))
    }

    fn rest(&mut self) -> &'a [u8] {
        let s = &self.buf[self.pos..];
        self.pos = self.buf.len();
        s
    }
}

/// Reads one envelope. `Ok(None)` means the peer closed cleanly between frames.
pub async fn read_envelope<R: AsyncRead + Unpin>(r: &mut R) -> Result<Option<SignalEnvelope>, ReadError> {
    let mut prefix = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        let n = r.read(&mut prefix[got..]).await?;
        if n == 0 {
            if got == 0 {
                return Ok(None);
            }
            return Err(io::Error::from(io::ErrorKind::UnexpectedEof).into());
        }
        got += n;
    }
    let len = frame_payload_len(prefix)?;
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload).await?;
    Ok(Some(decode_payload(&payload)?))
}

pub async fn write_envelope<W: AsyncWrite + Unpin>(w: &mut W, env: &SignalEnvelope) -> Result<(), ReadError> {
    let bytes = encode_envelope(env)?;
    w.write_all(&bytes).await?;
    Ok(())
}

/// Enforces that envelope ids strictly increase per sender on one connection.
#[derive(Debug, Default)]
pub struct SequenceGuard {
    last: HashMap<String, u64>,
}

impl SequenceGuard {
    pub fn check(&mut self, env: &SignalEnvelope) -> Result<(), WireError> {
        match self.last.get_mut(&env.from) {
            Some(last) if env.id <= *last => Err(WireError::Malformed("envelope id did not increase")),
            Some(last) => {
                *last = env.id;
                Ok(())
            }
            None => {
                self.last.insert(env.from.clone(), env.id);
                Ok(())
            }
        }
    }
}

/// RTP-like voice datagram.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MediaFrame {
    pub version: u8,
    pub payload_type: u8,
    pub sequence: u16,
    pub timestamp: u32,
    pub source_id: u32,
    pub tag_len: u16,
    pub flags: u16,
    pub ciphertext: Vec<u8>,
}

impl MediaFrame {
    /// The 16 header bytes; also used as associated data when sealing.
    pub fn header_bytes(&self) -> [u8; MEDIA_HEADER_LEN] {
        let mut h = [0u8; MEDIA_HEADER_LEN];
        h[0] = (self.version & 0x0f) << 4 | (self.payload_type & 0x0f);
        h[1] = 0;
        h[2..4].copy_from_slice(&self.sequence.to_be_bytes());
        h[4..8].copy_from_slice(&self.timestamp.to_be_bytes());
        h[8..12].copy_from_slice(&self.source_id.to_be_bytes());
        h[12..14].copy_from_slice(&self.tag_len.to_be_bytes());
        h[14..16].copy_from_slice(&self.flags.to_be_bytes());
        h
    }
}

pub fn encode_media_frame(frame: &MediaFrame) -> Result<Vec<u8>, WireError> {
    if frame.ciphertext.is_empty() {
        return Err(WireError::EmptyCiphertext);
    }
    if frame.version > 0x0f || frame.payload_type > 0x0f {
        return Err(WireError::Malformed("version or payload type exceeds 4 bits"));
    }
    let len = MEDIA_HEADER_LEN + frame.ciphertext.len();
    if len > MAX_DATAGRAM_LEN {
        return Err(WireError::FrameTooLarge { len });
    }
    let mut out = Vec::with_capacity(len);
    out.extend_from_slice(&frame.header_bytes());
    out.extend_from_slice(&frame.ciphertext);
    Ok(out)
}

pub fn decode_media_frame(bytes: &[u8]) -> Result<MediaFrame, WireError> {
    if bytes.len() > MAX_DATAGRAM_LEN {
        return Err(WireError::FrameTooLarge { len: bytes.len() });
    }
    if bytes.len() <= MEDIA_HEADER_LEN {
        return Err(WireError::Malformed("datagram shorter than header plus payload"));
    }
    if bytes[1] != 0 {
        return Err(WireError::Malformed("reserved byte is not zero"));
    }
    let tag_len = u16::from_be_bytes([bytes[12], bytes[13]]);
    let ciphertext = &bytes[MEDIA_HEADER_LEN..];
    if tag_len as usize > ciphertext.len() {
        return Err(WireError::Malformed("tag length exceeds ciphertext"));
    }
    Ok(MediaFrame {
        version: bytes[0] >> 4,
        payload_type: bytes[0] & 0x0f,
        sequence: u16::from_be_bytes([bytes[2], bytes[3]]),
        timestamp: u32::from_be_bytes(bytes[4..8].try_into().expect("4 bytes")),
        source_id: u32::from_be_bytes(bytes[8..12].try_into().expect("4 bytes")),
        tag_len,
        flags: u16::from_be_bytes([bytes[14], bytes[15]]),
        ciphertext: ciphertext.to_vec(),
    })
}

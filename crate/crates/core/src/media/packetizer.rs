//! PCM frame <-> sealed [`MediaFrame`] conversion.

use thiserror::Error;

use super::audio::{PcmFrame, FRAME_BYTES, FRAME_SAMPLES};
use crate::crypto::{self, AeadKey, CryptoError, FrameNonce, FrameSealer, TAG_LEN};
use crate::wire::{MediaFrame, WireError, FLAG_MARKER, MEDIA_VERSION, PAYLOAD_PCM16_MONO};

#[derive(Debug, Error)]
pub enum MediaError {
    #[error("no active call")]
    NoActiveCall,
    #[error("unknown call")]
    UnknownCall,
    #[error("frame from unexpected source {0:#010x}")]
    ForeignSource(u32),
    #[error("unsupported payload type {0}")]
    PayloadType(u8),
    #[error("payload is {0} bytes, expected {FRAME_BYTES}")]
    PayloadLength(usize),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Wire(#[from] WireError),
}

/// Per-direction stream identity: random source id and starting counters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamParams {
    pub source_id: u32,
    pub initial_seq: u16,
    pub initial_ts: u32,
}

impl StreamParams {
    pub fn random() -> Self {
        Self {
            source_id: crypto::random_u32(),
            initial_seq: crypto::random_u32() as u16,
            initial_ts: crypto::random_u32(),
        }
    }
}

/// Sender side. Until a key is installed every call to [`Packetizer::packetize`]
/// fails with [`MediaError::NoActiveCall`].
pub struct Packetizer {
    params: StreamParams,
    sealer: Option<FrameSealer>,
    ext_seq: u64,
    timestamp: u32,
}

impl Packetizer {
    pub fn new(params: StreamParams) -> Self {
        Self {
            params,
            sealer: None,
            ext_seq: params.initial_seq as u64,
            timestamp: params.initial_ts,
        }
    }

    pub fn with_key(params: StreamParams, key: AeadKey) -> Self {
        let mut p = Self::new(params);
        p.activate(key);
        p
    }

    pub fn activate(&mut self, key: AeadKey) {
        self.sealer = Some(FrameSealer::new(key));
    }

    pub fn deactivate(&mut self) {
        self.sealer = None;
    }

    pub fn params(&self) -> StreamParams {
        self.params
    }

    /// Extended sequence number the next frame will carry.
    pub fn next_extended(&self) -> u64 {
        self.ext_seq
    }

    pub fn packetize(&mut self, pcm: &PcmFrame, marker: bool) -> Result<MediaFrame, MediaError> {
        let sealer = self.sealer.as_mut().ok_or(MediaError::NoActiveCall)?;
        let mut frame = MediaFrame {
            version: MEDIA_VERSION,
            payload_type: PAYLOAD_PCM16_MONO,
            sequence: self.ext_seq as u16,
            timestamp: self.timestamp,
            source_id: self.params.source_id,
            tag_len: TAG_LEN as u16,
            flags: if marker { FLAG_MARKER } else { 0 },
            ciphertext: Vec::new(),
        };
        let nonce = FrameNonce::from_extended(frame.source_id, self.ext_seq, frame.timestamp)?;
        frame.ciphertext = sealer.seal(self.ext_seq, &nonce, &frame.header_bytes(), pcm)?;
        self.ext_seq += 1;
        self.timestamp = self.timestamp.wrapping_add(FRAME_SAMPLES as u32);
        Ok(frame)
    }
}

/// Maps 16-bit wire sequence numbers onto a monotonic 64-bit space by
/// picking the candidate closest to the highest value seen so far.
#[derive(Debug, Clone, Default)]
pub struct SequenceUnwrapper {
    highest: Option<u64>,
}

impl SequenceUnwrapper {
    pub fn new() -> Self {
        Self::default()
    }

    /// Starts the mapping at a known extended value, e.g. the sender's
    /// announced initial sequence.
    pub fn anchored(initial: u64) -> Self {
        Self {
            highest: Some(initial.saturating_sub(1)),
        }
    }

    pub fn highest(&self) -> Option<u64> {
        self.highest
    }

    /// Extended value for `seq` without updating state.
    pub fn peek(&self, seq: u16) -> u64 {
        let Some(high) = self.highest else {
            return seq as u64;
        };
        let base = high & !0xffff;
        let candidates = [
            base.checked_sub(0x1_0000).map(|b| b | seq as u64),
            Some(base | seq as u64),
            Some((base + 0x1_0000) | seq as u64),
        ];
        candidates
            .into_iter()
            .flatten()
            .min_by_key(|c| c.abs_diff(high))
            .expect("at least one candidate")
    }

    pub fn unwrap(&mut self, seq: u16) -> u64 {
        let ext = self.peek(seq);
        if self.highest.is_none_or(|h| ext > h) {
            self.highest = Some(ext);
        }
        ext
    }
}

/// An opened frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpenedFrame {
    pub extended_seq: u64,
    pub timestamp: u32,
    pub marker: bool,
    pub pcm: PcmFrame,
}

/// Receiver side of one stream.
pub struct Depacketizer {
    key: AeadKey,
    source_id: Option<u32>,
    unwrapper: SequenceUnwrapper,
}

impl Depacketizer {
    pub fn new(key: AeadKey) -> Self {
        Self {
            key,
            source_id: None,
            unwrapper: SequenceUnwrapper::new(),
        }
    }

    /// Binds to a known remote stream so the epoch is tracked from its start.
    pub fn for_stream(key: AeadKey, remote: StreamParams) -> Self {
        Self {
            key,
            source_id: Some(remote.source_id),
            unwrapper: SequenceUnwrapper::anchored(remote.initial_seq as u64),
        }
    }

    pub fn depacketize(&mut self, frame: &MediaFrame) -> Result<OpenedFrame, MediaError> {
        if frame.payload_type != PAYLOAD_PCM16_MONO {
            return Err(MediaError::PayloadType(frame.payload_type));
        }
        match self.source_id {
            Some(id) if id != frame.source_id => return Err(MediaError::ForeignSource(frame.source_id)),
            _ => {}
        }
        let ext = self.unwrapper.peek(frame.sequence);
        let nonce = FrameNonce::from_extended(frame.source_id, ext, frame.timestamp)?;
        let plain = crypto::open(&self.key, nonce.bytes(), &frame.header_bytes(), &frame.ciphertext)?;
        let pcm: PcmFrame = plain
            .as_slice()
            .try_into()
            .map_err(|_| MediaError::PayloadLength(plain.len()))?;
        // only authenticated frames move the unwrapper or pin the source
        self.unwrapper.unwrap(frame.sequence);
        self.source_id.get_or_insert(frame.source_id);
        Ok(OpenedFrame {
            extended_seq: ext,
            timestamp: frame.timestamp,
            marker: frame.flags & FLAG_MARKER != 0,
            pcm,
        })
    }
}

//! Per-call key agreement and authenticated encryption.
//!
//! Key agreement is an ephemeral X25519 exchange carried in `KEY_EXCHANGE`
//! envelopes. Each message body is
//!
//! ```text
//! suite id (u16) | public value length (u16) | public value | transcript digest (32)
//! ```
//!
//! and the exchange runs in three messages, plus an optional fourth:
//!
//! 1. initiator → responder: initiator public value, digest = H("ke1" | ctx | pk_i)
//! 2. responder → initiator: responder public value, digest = H("ke2" | transcript)
//! 3. initiator → responder: no public value, digest = HMAC(confirm key, "initiator" | transcript)
//! 4. responder → server (calls only): no public value, digest = HMAC(confirm key, "responder" | transcript)
//!
//! where `transcript = H(label | context id | suite | pk_i | pk_r)`. Any
//! modification of messages 1–3 in transit is detected by the receiving side
//! as [`CryptoError::ExchangeTampered`].
//!
//! Directional keys come from HKDF-SHA256 over the shared secret, salted with
//! the transcript, so the initiator's send key is the responder's receive key.

use std::collections::HashSet;
use std::fmt;

use ring::aead::{self, Aad, LessSafeKey, Nonce, UnboundKey};
use ring::agreement::{self, EphemeralPrivateKey, UnparsedPublicKey, X25519};
use ring::digest::{self, SHA256};
use ring::hkdf;
use ring::hmac;
use ring::rand::{SecureRandom, SystemRandom};
use thiserror::Error;
use zeroize::Zeroize;

use crate::clock::UtcMillis;

pub const KEY_LEN: usize = 32;
pub const TAG_LEN: usize = 16;
pub const NONCE_LEN: usize = 12;
pub const DIGEST_LEN: usize = 32;
const X25519_PUBLIC_LEN: usize = 32;
const TRANSCRIPT_LABEL: &[u8] = b"peervoip key exchange v1";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("key exchange transcript mismatch")]
    ExchangeTampered,
    #[error("key exchange timed out")]
    ExchangeTimeout,
    #[error("unsupported cipher suite {0:#06x}")]
    UnsupportedSuite(u16),
    #[error("authentication failure")]
    AuthenticationFailure,
    #[error("nonce reuse")]
    NonceReuse,
    #[error("nonce space exhausted; rekey required")]
    NonceExhausted,
    #[error("key exchange message out of order")]
    UnexpectedMessage,
    #[error("random number generator failure")]
    Rng,
}

/// AEAD algorithm negotiated for a session. The id travels in `KEY_EXCHANGE`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CipherSuite {
    /// X25519, HKDF-SHA256, ChaCha20-Poly1305.
    ChaCha20Poly1305,
    /// X25519, HKDF-SHA256, AES-256-GCM.
    Aes256Gcm,
}

impl CipherSuite {
    pub const DEFAULT: CipherSuite = CipherSuite::ChaCha20Poly1305;

    pub fn id(self) -> u16 {
        match self {
            CipherSuite::ChaCha20Poly1305 => 0x0001,
            CipherSuite::Aes256Gcm => 0x0002,
        }
    }

    pub fn from_id(id: u16) -> Result<Self, CryptoError> {
        match id {
            0x0001 => Ok(CipherSuite::ChaCha20Poly1305),
            0x0002 => Ok(CipherSuite::Aes256Gcm),
            other => Err(CryptoError::UnsupportedSuite(other)),
        }
    }

    fn algorithm(self) -> &'static aead::Algorithm {
        match self {
            CipherSuite::ChaCha20Poly1305 => &aead::CHACHA20_POLY1305,
            CipherSuite::Aes256Gcm => &aead::AES_256_GCM,
        }
    }
}

/// Raw key bytes. Deliberately neither `Serialize` nor `Display`; `Debug` is redacted.
#[derive(Clone, PartialEq, Eq)]
pub struct SecretKey([u8; KEY_LEN]);

impl SecretKey {
    pub fn expose(&self) -> &[u8; KEY_LEN] {
        &self.0
    }
}

impl fmt::Debug for SecretKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SecretKey(..)")
    }
}

impl Drop for SecretKey {
    fn drop(&mut self) {
        self.0.zeroize();
    }
}

/// An AEAD key bound to a suite.
#[derive(Clone)]
pub struct AeadKey {
    suite: CipherSuite,
    raw: SecretKey,
    key: std::sync::Arc<LessSafeKey>,
}

impl AeadKey {
    pub fn new(suite: CipherSuite, raw: [u8; KEY_LEN]) -> Self {
        let unbound = UnboundKey::new(suite.algorithm(), &raw).expect("key length matches suite");
        Self {
            suite,
            raw: SecretKey(raw),
            key: std::sync::Arc::new(LessSafeKey::new(unbound)),
        }
    }

    pub fn suite(&self) -> CipherSuite {
        self.suite
    }

    pub fn raw(&self) -> &SecretKey {
        &self.raw
    }
}

impl fmt::Debug for AeadKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AeadKey").field("suite", &self.suite).finish_non_exhaustive()
    }
}

/// Seals `plaintext`, returning ciphertext with the tag appended.
pub fn seal(key: &AeadKey, nonce: &[u8; NONCE_LEN], aad: &[u8], plaintext: &[u8]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(plaintext.len() + TAG_LEN);
    buf.extend_from_slice(plaintext);
    key.key
        .seal_in_place_append_tag(Nonce::assume_unique_for_key(*nonce), Aad::from(aad), &mut buf)
        .expect("plaintext within AEAD limits");
    buf
}

pub fn open(key: &AeadKey, nonce: &[u8; NONCE_LEN], aad: &[u8], sealed: &[u8]) -> Result<Vec<u8>, CryptoError> {
    if sealed.len() < TAG_LEN {
        return Err(CryptoError::AuthenticationFailure);
    }
    let mut buf = sealed.to_vec();
    let len = key
        .key
        .open_in_place(Nonce::assume_unique_for_key(*nonce), Aad::from(aad), &mut buf)
        .map_err(|_| CryptoError::AuthenticationFailure)?
        .len();
    buf.truncate(len);
    Ok(buf)
}

/// Keys for one call (or one connection). Never written to disk or logs.
#[derive(Clone)]
pub struct SessionKeys {
    pub context_id: u64,
    pub suite: CipherSuite,
    pub send: AeadKey,
    pub receive: AeadKey,
    pub established_at: UtcMillis,
    transcript: [u8; DIGEST_LEN],
}

impl SessionKeys {
    pub fn transcript_digest(&self) -> &[u8; DIGEST_LEN] {
        &self.transcript
    }
}

impl fmt::Debug for SessionKeys {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SessionKeys")
            .field("context_id", &self.context_id)
            .field("suite", &self.suite)
            .finish_non_exhaustive()
    }
}

/// One `KEY_EXCHANGE` body.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyExchangeMessage {
    pub suite_id: u16,
    pub public: Vec<u8>,
    pub digest: [u8; DIGEST_LEN],
}

impl KeyExchangeMessage {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + self.public.len() + DIGEST_LEN);
        out.extend_from_slice(&self.suite_id.to_be_bytes());
        out.extend_from_slice(&(self.public.len() as u16).to_be_bytes());
        out.extend_from_slice(&self.public);
        out.extend_from_slice(&self.digest);
        out
    }

    /// A body that does not parse is treated as tampering: it can only come
    /// from a corrupted or forged message.
    pub fn decode(bytes: &[u8]) -> Result<Self, CryptoError> {
        if bytes.len() < 4 + DIGEST_LEN {
            return Err(CryptoError::ExchangeTampered);
        }
        let suite_id = u16::from_be_bytes([bytes[0], bytes[1]]);
        let pk_len = u16::from_be_bytes([bytes[2], bytes[3]]) as usize;
        if bytes.len() != 4 + pk_len + DIGEST_LEN {
            return Err(CryptoError::ExchangeTampered);
        }
        let public = bytes[4..4 + pk_len].to_vec();
        let digest = bytes[4 + pk_len..].try_into().expect("32 bytes");
        Ok(Self {
            suite_id,
            public,
            digest,
        })
    }
}

fn sha256(parts: &[&[u8]]) -> [u8; DIGEST_LEN] {
    let mut ctx = digest::Context::new(&SHA256);
    for p in parts {
        ctx.update(p);
    }
    ctx.finish().as_ref().try_into().expect("sha256 length")
}

fn offer_digest(context_id: u64, suite: u16, pk_i: &[u8]) -> [u8; DIGEST_LEN] {
    sha256(&[b"ke1", &context_id.to_be_bytes(), &suite.to_be_bytes(), pk_i])
}

fn transcript(context_id: u64, suite: u16, pk_i: &[u8], pk_r: &[u8]) -> [u8; DIGEST_LEN] {
    sha256(&[
        TRANSCRIPT_LABEL,
        &context_id.to_be_bytes(),
        &suite.to_be_bytes(),
        &(pk_i.len() as u16).to_be_bytes(),
        pk_i,
        pk_r,
    ])
}

struct Okm(usize);

impl hkdf::KeyType for Okm {
    fn len(&self) -> usize {
        self.0
    }
}

struct Derived {
    i2r: [u8; KEY_LEN],
    r2i: [u8; KEY_LEN],
    confirm: hmac::Key,
}

fn derive(shared: &[u8], transcript: &[u8; DIGEST_LEN]) -> Derived {
    let prk = hkdf::Salt::new(hkdf::HKDF_SHA256, transcript).extract(shared);
    let expand = |label: &[u8]| -> [u8; KEY_LEN] {
        let mut out = [0u8; KEY_LEN];
        prk.expand(&[label], Okm(KEY_LEN))
            .and_then(|okm| okm.fill(&mut out))
            .expect("HKDF output length is valid");
        out
    };
    let confirm = expand(b"confirm");
    Derived {
        i2r: expand(b"initiator->responder"),
        r2i: expand(b"responder->initiator"),
        confirm: hmac::Key::new(hmac::HMAC_SHA256, &confirm),
    }
}

fn confirm_tag(key: &hmac::Key, role: &[u8], transcript: &[u8; DIGEST_LEN]) -> [u8; DIGEST_LEN] {
    let mut ctx = hmac::Context::with_key(key);
    ctx.update(role);
    ctx.update(transcript);
    ctx.sign().as_ref().try_into().expect("hmac-sha256 length")
}

fn ephemeral(rng: &SystemRandom) -> Result<(EphemeralPrivateKey, Vec<u8>), CryptoError> {
    let private = EphemeralPrivateKey::generate(&X25519, rng).map_err(|_| CryptoError::Rng)?;
    let public = private.compute_public_key().map_err(|_| CryptoError::Rng)?;
    Ok((private, public.as_ref().to_vec()))
}

fn agree(private: EphemeralPrivateKey, peer: &[u8]) -> Result<Vec<u8>, CryptoError> {
    if peer.len() != X25519_PUBLIC_LEN {
        return Err(CryptoError::ExchangeTampered);
    }
    agreement::agree_ephemeral(private, &UnparsedPublicKey::new(&X25519, peer), |s| s.to_vec())
        .map_err(|_| CryptoError::ExchangeTampered)
}

/// The side that opens the exchange (the caller, or the connecting client).
pub struct Initiator {
    context_id: u64,
    suite: CipherSuite,
    private: EphemeralPrivateKey,
    public: Vec<u8>,
}

impl Initiator {
    pub fn start(context_id: u64, suite: CipherSuite) -> Result<(Self, KeyExchangeMessage), CryptoError> {
        let (private, public) = ephemeral(&SystemRandom::new())?;
        let msg = KeyExchangeMessage {
            suite_id: suite.id(),
            public: public.clone(),
            digest: offer_digest(context_id, suite.id(), &public),
        };
        Ok((
            Self {
                context_id,
                suite,
                private,
                public,
            },
            msg,
        ))
    }

    /// Consumes message 2, returning the session keys and message 3.
    pub fn finish(self, reply: &KeyExchangeMessage) -> Result<(SessionKeys, KeyExchangeMessage), CryptoError> {
        if reply.suite_id != self.suite.id() {
            return Err(CryptoError::ExchangeTampered);
        }
        let th = transcript(self.context_id, reply.suite_id, &self.public, &reply.public);
        let expected = sha256(&[b"ke2", &th]);
        if !bool::from(subtle::ConstantTimeEq::ct_eq(&expected[..], &reply.digest[..])) {
            return Err(CryptoError::ExchangeTampered);
        }
        let shared = agree(self.private, &reply.public)?;
        let d = derive(&shared, &th);
        let confirm = KeyExchangeMessage {
            suite_id: self.suite.id(),
            public: Vec::new(),
            digest: confirm_tag(&d.confirm, b"initiator", &th),
        };
        let keys = SessionKeys {
            context_id: self.context_id,
            suite: self.suite,
            send: AeadKey::new(self.suite, d.i2r),
            receive: AeadKey::new(self.suite, d.r2i),
            established_at: UtcMillis::now(),
            transcript: th,
        };
        Ok((keys, confirm))
    }
}

/// The side that answers (the callee, or the server).
pub struct Responder {
    context_id: u64,
    suite: CipherSuite,
    transcript: [u8; DIGEST_LEN],
    derived: Derived,
}

impl Responder {
    /// Consumes message 1 and returns message 2.
    pub fn respond(
        context_id: u64,
        offer: &KeyExchangeMessage,
        accepted: &[CipherSuite],
    ) -> Result<(Self, KeyExchangeMessage), CryptoError> {
        let suite = CipherSuite::from_id(offer.suite_id)?;
        let expected = offer_digest(context_id, offer.suite_id, &offer.public);
        if !bool::from(subtle::ConstantTimeEq::ct_eq(&expected[..], &offer.digest[..])) {
            return Err(CryptoError::ExchangeTampered);
        }
        if !accepted.contains(&suite) {
            return Err(CryptoError::UnsupportedSuite(offer.suite_id));
        }
        let (private, public) = ephemeral(&SystemRandom::new())?;
        let th = transcript(context_id, offer.suite_id, &offer.public, &public);
        let shared = agree(private, &offer.public)?;
        let reply = KeyExchangeMessage {
            suite_id: offer.suite_id,
            public,
            digest: sha256(&[b"ke2", &th]),
        };
        Ok((
            Self {
                context_id,
                suite,
                transcript: th,
                derived: derive(&shared, &th),
            },
            reply,
        ))
    }

    /// Verifies message 3. Returns the keys and the responder's own
    /// confirmation (message 4), which calls send to the server.
    pub fn finish(self, confirm: &KeyExchangeMessage) -> Result<(SessionKeys, KeyExchangeMessage), CryptoError> {
        if confirm.suite_id != self.suite.id() || !confirm.public.is_empty() {
            return Err(CryptoError::ExchangeTampered);
        }
        let mut msg = Vec::with_capacity(9 + DIGEST_LEN);
        msg.extend_from_slice(b"initiator");
        msg.extend_from_slice(&self.transcript);
        hmac::verify(&self.derived.confirm, &msg, &confirm.digest).map_err(|_| CryptoError::ExchangeTampered)?;
        let own = KeyExchangeMessage {
            suite_id: self.suite.id(),
            public: Vec::new(),
            digest: confirm_tag(&self.derived.confirm, b"responder", &self.transcript),
        };
        let keys = SessionKeys {
            context_id: self.context_id,
            suite: self.suite,
            send: AeadKey::new(self.suite, self.derived.r2i),
            receive: AeadKey::new(self.suite, self.derived.i2r),
            established_at: UtcMillis::now(),
            transcript: self.transcript,
        };
        Ok((keys, own))
    }
}

/// Per-frame nonce: source id | sequence epoch | sequence | timestamp.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FrameNonce([u8; NONCE_LEN]);

impl FrameNonce {
    pub fn new(source_id: u32, epoch: u16, sequence: u16, timestamp: u32) -> Self {
        let mut n = [0u8; NONCE_LEN];
        n[0..4].copy_from_slice(&source_id.to_be_bytes());
        n[4..6].copy_from_slice(&epoch.to_be_bytes());
        n[6..8].copy_from_slice(&sequence.to_be_bytes());
        n[8..12].copy_from_slice(&timestamp.to_be_bytes());
        Self(n)
    }

    /// Builds the nonce from a 32-bit extended sequence (epoch in the high half).
    pub fn from_extended(source_id: u32, extended_seq: u64, timestamp: u32) -> Result<Self, CryptoError> {
        let epoch = u16::try_from(extended_seq >> 16).map_err(|_| CryptoError::NonceExhausted)?;
        Ok(Self::new(source_id, epoch, extended_seq as u16, timestamp))
    }

    pub fn bytes(&self) -> &[u8; NONCE_LEN] {
        &self.0
    }
}

/// Sealing side of a media stream. Refuses any nonce that is not strictly
/// newer than the last one it used.
pub struct FrameSealer {
    key: AeadKey,
    last: Option<u64>,
}

impl FrameSealer {
    pub fn new(key: AeadKey) -> Self {
        Self { key, last: None }
    }

    pub fn seal(
        &mut self,
        extended_seq: u64,
        nonce: &FrameNonce,
        aad: &[u8],
        plaintext: &[u8],
    ) -> Result<Vec<u8>, CryptoError> {
        if self.last.is_some_and(|last| extended_seq <= last) {
            return Err(CryptoError::NonceReuse);
        }
        self.last = Some(extended_seq);
        Ok(seal(&self.key, nonce.bytes(), aad, plaintext))
    }

    pub fn key(&self) -> &AeadKey {
        &self.key
    }
}

/// Counter-nonce sealing for a reliable, ordered channel (signaling hop or
/// direct peer connection). Both ends count sealed messages in order.
pub struct ChannelSealer {
    key: AeadKey,
    counter: u64,
}

pub struct ChannelOpener {
    key: AeadKey,
    counter: u64,
}

fn channel_nonce(counter: u64) -> [u8; NONCE_LEN] {
    let mut n = [0u8; NONCE_LEN];
    n[0..4].copy_from_slice(b"chan");
    n[4..12].copy_from_slice(&counter.to_be_bytes());
    n
}

impl ChannelSealer {
    pub fn new(key: AeadKey) -> Self {
        Self { key, counter: 0 }
    }

    pub fn seal(&mut self, aad: &[u8], plaintext: &[u8]) -> Result<Vec<u8>, CryptoError> {
        let n = channel_nonce(self.counter);
        self.counter = self.counter.checked_add(1).ok_or(CryptoError::NonceExhausted)?;
        Ok(seal(&self.key, &n, aad, plaintext))
    }
}

impl ChannelOpener {
    pub fn new(key: AeadKey) -> Self {
        Self { key, counter: 0 }
    }

    pub fn open(&mut self, aad: &[u8], sealed: &[u8]) -> Result<Vec<u8>, CryptoError> {
        let n = channel_nonce(self.counter);
        let out = open(&self.key, &n, aad, sealed)?;
        self.counter += 1;
        Ok(out)
    }
}

/// Splits session keys into the two halves of a channel cipher.
pub fn channel_pair(keys: &SessionKeys) -> (ChannelSealer, ChannelOpener) {
    (ChannelSealer::new(keys.send.clone()), ChannelOpener::new(keys.receive.clone()))
}

pub fn random_bytes<const N: usize>() -> [u8; N] {
    let mut out = [0u8; N];
    SystemRandom::new().fill(&mut out).expect("system RNG");
    out
}

pub fn random_u64() -> u64 {
    u64::from_be_bytes(random_bytes::<8>())
}

pub fn random_u32() -> u32 {
    u32::from_be_bytes(random_bytes::<4>())
}

/// SHA-256 over a byte slice.
pub fn sha256_digest(data: &[u8]) -> [u8; DIGEST_LEN] {
    sha256(&[data])
}

/// Streaming SHA-256.
pub struct Sha256Stream(digest::Context);

impl Default for Sha256Stream {
    fn default() -> Self {
        Self(digest::Context::new(&SHA256))
    }
}

impl Sha256Stream {
    pub fn update(&mut self, data: &[u8]) {
        self.0.update(data);
    }

    pub fn finish(self) -> [u8; DIGEST_LEN] {
        self.0.finish().as_ref().try_into().expect("sha256 length")
    }
}

/// Runs a full in-memory exchange; handy for tests and for local loopback use.
pub fn exchange_in_memory(context_id: u64, suite: CipherSuite) -> Result<(SessionKeys, SessionKeys), CryptoError> {
    let (init, m1) = Initiator::start(context_id, suite)?;
    let (resp, m2) = Responder::respond(context_id, &m1, &[suite])?;
    let (ik, m3) = init.finish(&m2)?;
    let (rk, _) = resp.finish(&m3)?;
    Ok((ik, rk))
}

/// True when no two key sets share any key.
pub fn keys_pairwise_distinct(sets: &[SessionKeys]) -> bool {
    let mut seen = HashSet::new();
    sets.iter()
        .flat_map(|k| [*k.send.raw().expose(), *k.receive.raw().expose()])
        .all(|k| seen.insert(k))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn agreement_directional_keys_match() {
        for suite in [CipherSuite::ChaCha20Poly1305, CipherSuite::Aes256Gcm] {
            let (caller, callee) = exchange_in_memory(7, suite).unwrap();
            assert_eq!(caller.send.raw(), callee.receive.raw());
            assert_eq!(caller.receive.raw(), callee.send.raw());
            assert_ne!(caller.send.raw(), caller.receive.raw());
            assert_eq!(caller.transcript_digest(), callee.transcript_digest());
        }
    }

    #[test]
    fn key_exchange_body_layout() {
        let msg = KeyExchangeMessage {
            suite_id: 1,
            public: vec![9; 32],
            digest: [7; 32],
        };
        let b = msg.encode();
        assert_eq!(&b[..4], &[0, 1, 0, 32]);
        assert_eq!(b.len(), 4 + 32 + 32);
        assert_eq!(KeyExchangeMessage::decode(&b).unwrap(), msg);
    }

    fn flip_each_bit(body: &[u8]) -> impl Iterator<Item = Vec<u8>> + '_ {
        (0..body.len() * 8).map(move |bit| {
            let mut b = body.to_vec();
            b[bit / 8] ^= 1 << (bit % 8);
            b
        })
    }

    #[test]
    fn any_bit_flip_in_offer_is_detected() {
        let (_init, m1) = Initiator::start(3, CipherSuite::DEFAULT).unwrap();
        for tampered in flip_each_bit(&m1.encode()) {
            let res = KeyExchangeMessage::decode(&tampered)
                .and_then(|m| Responder::respond(3, &m, &[CipherSuite::DEFAULT]).map(|_| ()));
            assert!(res.is_err());
        }
    }

    #[test]
    fn any_bit_flip_in_reply_is_detected() {
        let reply_len = 4 + 32 + DIGEST_LEN;
        for bit in (0..reply_len * 8).step_by(3) {
            let (init, m1) = Initiator::start(3, CipherSuite::DEFAULT).unwrap();
            let (_r, m2) = Responder::respond(3, &m1, &[CipherSuite::DEFAULT]).unwrap();
            let mut t = m2.encode();
            t[bit / 8] ^= 1 << (bit % 8);
            let res = KeyExchangeMessage::decode(&t).and_then(|m| init.finish(&m).map(|_| ()));
            assert_eq!(res.unwrap_err(), CryptoError::ExchangeTampered, "bit {bit}");
        }
    }

    #[test]
    fn bit_flip_in_confirmation_is_detected() {
        let (init, m1) = Initiator::start(3, CipherSuite::DEFAULT).unwrap();
        let (resp, m2) = Responder::respond(3, &m1, &[CipherSuite::DEFAULT]).unwrap();
        let (_k, m3) = init.finish(&m2).unwrap();
        let mut t = m3.encode();
        t[10] ^= 0x04;
        let res = KeyExchangeMessage::decode(&t).and_then(|m| resp.finish(&m).map(|_| ()));
        assert_eq!(res.unwrap_err(), CryptoError::ExchangeTampered);
    }

    #[test]
    fn mismatched_context_is_tampering() {
        let (_i, m1) = Initiator::start(1, CipherSuite::DEFAULT).unwrap();
        assert!(matches!(
            Responder::respond(2, &m1, &[CipherSuite::DEFAULT]),
            Err(CryptoError::ExchangeTampered)
        ));
    }

    #[test]
    fn seal_open_empty_and_voice_frame() {
        let key = AeadKey::new(CipherSuite::DEFAULT, [1; 32]);
        let nonce = FrameNonce::new(1, 0, 0, 0);
        let ct = seal(&key, nonce.bytes(), b"hdr", b"");
        assert_eq!(ct.len(), TAG_LEN);
        assert_eq!(open(&key, nonce.bytes(), b"hdr", &ct).unwrap(), b"");
        let pcm = vec![0x55u8; 640];
        let ct = seal(&key, nonce.bytes(), b"hdr", &pcm);
        assert_eq!(ct.len(), 640 + TAG_LEN);
        assert_eq!(open(&key, nonce.bytes(), b"hdr", &ct).unwrap(), pcm);
    }

    #[test]
    fn wrong_nonce_or_aad_fails() {
        let key = AeadKey::new(CipherSuite::DEFAULT, [1; 32]);
        let n1 = FrameNonce::new(1, 0, 1, 320);
        let n2 = FrameNonce::new(1, 0, 2, 320);
        let ct = seal(&key, n1.bytes(), b"hdr", b"voice");
        assert_eq!(open(&key, n2.bytes(), b"hdr", &ct), Err(CryptoError::AuthenticationFailure));
        assert_eq!(open(&key, n1.bytes(), b"hdx", &ct), Err(CryptoError::AuthenticationFailure));
    }

    #[test]
    fn sealer_refuses_reused_counter() {
        let mut s = FrameSealer::new(AeadKey::new(CipherSuite::DEFAULT, [2; 32]));
        let n = FrameNonce::new(1, 0, 5, 0);
        s.seal(5, &n, b"", b"x").unwrap();
        assert_eq!(s.seal(5, &n, b"", b"x"), Err(CryptoError::NonceReuse));
        assert_eq!(s.seal(4, &n, b"", b"x"), Err(CryptoError::NonceReuse));
        s.seal(6, &FrameNonce::new(1, 0, 6, 320), b"", b"x").unwrap();
    }

    #[test]
    fn extended_sequence_maps_to_epoch() {
        let n = FrameNonce::from_extended(9, 0x1_0002, 7).unwrap();
        assert_eq!(n, FrameNonce::new(9, 1, 2, 7));
        assert_eq!(
            FrameNonce::from_extended(9, 1 << 32, 0),
            Err(CryptoError::NonceExhausted)
        );
    }

    #[test]
    fn channel_cipher_is_ordered() {
        let (a, b) = exchange_in_memory(0, CipherSuite::DEFAULT).unwrap();
        let (mut a_tx, _a_rx) = channel_pair(&a);
        let (_b_tx, mut b_rx) = channel_pair(&b);
        let m1 = a_tx.seal(b"k", b"one").unwrap();
        let m2 = a_tx.seal(b"k", b"two").unwrap();
        assert_eq!(b_rx.open(b"k", &m1).unwrap(), b"one");
        assert_eq!(b_rx.open(b"k", &m2).unwrap(), b"two");
        // replaying an old message fails because the counter has moved on
        assert!(b_rx.open(b"k", &m1).is_err());
    }

    #[test]
    fn debug_output_hides_keys() {
        let (a, _) = exchange_in_memory(0, CipherSuite::DEFAULT).unwrap();
        let dbg = format!("{a:?} {:?}", a.send);
        let hex_key = hex::encode(a.send.raw().expose());
        assert!(!dbg.contains(&hex_key));
    }
}

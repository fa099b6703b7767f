//! JSON bodies carried inside signaling envelopes, and the error codes
//! shared by the server, the daemon and the control API.
//!
//! Requests use the envelope id as their correlation handle; every reply
//! echoes it as `re`. `KEY_EXCHANGE` and `FILE_CHUNK` bodies are binary.

use std::net::SocketAddr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::auth::{AuthError, PresenceState};
use crate::chat::ChatError;
use crate::clock::UtcMillis;
use crate::crypto::CryptoError;
use crate::files::{FileError, FileManifest};
use crate::media::{MediaError, StreamParams};
use crate::routing::{CallState, RouteError};
use crate::wire::{Kind, SignalEnvelope, WireError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ErrorCode {
    Malformed,
    Unauthorized,
    NotLoggedIn,
    BadCredentials,
    UsernameTaken,
    InvalidUsername,
    WeakPassword,
    PictureTooLarge,
    UnsupportedFormat,
    UnknownUser,
    RecipientOffline,
    CalleeOffline,
    CalleeBusy,
    CallerBusy,
    UnknownCall,
    NoActiveCall,
    ExchangeTampered,
    ExchangeTimeout,
    BlockedExtension,
    FileTooLarge,
    InvalidName,
    UnknownTransfer,
    DigestMismatch,
    PeerDisconnected,
    BodyTooLarge,
    Unreachable,
    Timeout,
    Disconnected,
    Internal,
}

impl ErrorCode {
    /// Fixed text, so equal codes always encode to equal bytes.
    pub fn message(self) -> &'static str {
        use ErrorCode::*;
        match self {
            Malformed => "malformed message",
            Unauthorized => "unauthorized",
            NotLoggedIn => "not logged in",
            BadCredentials => "bad credentials",
            UsernameTaken => "username already taken",
            InvalidUsername => "invalid username",
            WeakPassword => "password too short",
            PictureTooLarge => "picture too large",
            UnsupportedFormat => "unsupported picture format",
            UnknownUser => "unknown user",
            RecipientOffline => "recipient offline",
            CalleeOffline => "callee offline",
            CalleeBusy => "callee busy",
            CallerBusy => "caller busy",
            UnknownCall => "unknown call",
            NoActiveCall => "no active call",
            ExchangeTampered => "key exchange tampered",
            ExchangeTimeout => "key exchange timed out",
            BlockedExtension => "blocked file extension",
            FileTooLarge => "file too large",
            InvalidName => "invalid file name",
            UnknownTransfer => "unknown transfer",
            DigestMismatch => "digest mismatch",
            PeerDisconnected => "peer disconnected",
            BodyTooLarge => "body too large",
            Unreachable => "no route",
            Timeout => "timed out",
            Disconnected => "disconnected from server",
            Internal => "internal error",
        }
    }

    pub fn as_str(self) -> String {
        serde_json::to_value(self)
            .ok()
            .and_then(|v| v.as_str().map(String::from))
            .unwrap_or_default()
    }
}

impl std::fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.message())
    }
}

impl From<&AuthError> for ErrorCode {
    fn from(e: &AuthError) -> Self {
        match e {
            AuthError::UsernameTaken => ErrorCode::UsernameTaken,
            AuthError::InvalidUsername => ErrorCode::InvalidUsername,
            AuthError::WeakPassword => ErrorCode::WeakPassword,
            AuthError::PictureTooLarge => ErrorCode::PictureTooLarge,
            AuthError::UnsupportedFormat => ErrorCode::UnsupportedFormat,
            AuthError::BadCredentials => ErrorCode::BadCredentials,
            AuthError::Unauthorized => ErrorCode::Unauthorized,
            AuthError::UnknownUser => ErrorCode::UnknownUser,
            AuthError::Store(_) => ErrorCode::Internal,
        }
    }
}

impl From<&FileError> for ErrorCode {
    fn from(e: &FileError) -> Self {
        match e {
            FileError::BlockedExtension => ErrorCode::BlockedExtension,
            FileError::FileTooLarge { .. } => ErrorCode::FileTooLarge,
            FileError::InvalidName => ErrorCode::InvalidName,
            FileError::DigestMismatch | FileError::SizeMismatch { .. } => ErrorCode::DigestMismatch,
            FileError::PeerDisconnected => ErrorCode::PeerDisconnected,
            FileError::UnknownTransfer => ErrorCode::UnknownTransfer,
            FileError::Malformed(_) | FileError::OutOfOrder { .. } => ErrorCode::Malformed,
            FileError::Io(_) => ErrorCode::Internal,
        }
    }
}

impl From<&CryptoError> for ErrorCode {
    fn from(e: &CryptoError) -> Self {
        match e {
            CryptoError::ExchangeTimeout => ErrorCode::ExchangeTimeout,
            CryptoError::ExchangeTampered | CryptoError::UnexpectedMessage | CryptoError::UnsupportedSuite(_) => {
                ErrorCode::ExchangeTampered
            }
            _ => ErrorCode::Internal,
        }
    }
}

impl From<&ChatError> for ErrorCode {
    fn from(e: &ChatError) -> Self {
        match e {
            ChatError::BodyTooLarge => ErrorCode::BodyTooLarge,
            _ => ErrorCode::Internal,
        }
    }
}

impl From<&MediaError> for ErrorCode {
    fn from(e: &MediaError) -> Self {
        match e {
            MediaError::NoActiveCall => ErrorCode::NoActiveCall,
            MediaError::UnknownCall => ErrorCode::UnknownCall,
            _ => ErrorCode::Internal,
        }
    }
}

impl From<&RouteError> for ErrorCode {
    fn from(_: &RouteError) -> Self {
        ErrorCode::Unreachable
    }
}

impl From<&WireError> for ErrorCode {
    fn from(e: &WireError) -> Self {
        match e {
            WireError::BodyTooLarge { .. } => ErrorCode::BodyTooLarge,
            _ => ErrorCode::Malformed,
        }
    }
}

/// `ERROR` body.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub re: u64,
    pub code: ErrorCode,
    pub message: String,
}

impl ErrorBody {
    pub fn new(re: u64, code: ErrorCode) -> Self {
        Self {
            re,
            code,
            message: code.message().to_string(),
        }
    }
}

/// `SIGNUP` request: account operations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum AccountRequest {
    Create {
        username: String,
        password: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        picture_b64: Option<String>,
    },
    SetPicture {
        picture_b64: String,
    },
    GetPicture {
        username: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccountReply {
    pub re: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub username: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub picture_b64: Option<String>,
}

/// `LOGIN` request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum LoginRequest {
    Login {
        username: String,
        password: String,
        /// UDP port for call media on the client's host.
        #[serde(default)]
        media_port: Option<u16>,
        /// TCP port of the client's direct peer listener.
        #[serde(default)]
        p2p_port: Option<u16>,
    },
    Logout,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoginReply {
    pub re: u64,
    pub username: String,
    pub token: String,
    pub heartbeat_ms: u64,
}

/// `PRESENCE` from the server: somebody's state changed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PresenceNotice {
    pub username: String,
    pub state: PresenceState,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RosterItem {
    pub username: String,
    pub state: PresenceState,
    pub last_heartbeat: UtcMillis,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p2p_addr: Option<SocketAddr>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RosterReply {
    pub re: u64,
    pub users: Vec<RosterItem>,
}

/// `CHAT` body from sender.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatBody {
    pub message_id: u64,
    pub body: String,
}

/// `CHAT` reply to the sender once the message is handed to the recipient.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatReceipt {
    pub re: u64,
    pub message_id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub journal_seq: Option<u64>,
}

/// `CALL_INVITE` from caller to server, and from server to callee.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InviteBody {
    #[serde(default)]
    pub call_id: u64,
    pub stream: StreamParamsBody,
    #[serde(default)]
    pub suites: Vec<u16>,
    #[serde(default)]
    pub relay_media: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamParamsBody {
    pub source_id: u32,
    pub initial_seq: u16,
    pub initial_ts: u32,
}

impl From<StreamParams> for StreamParamsBody {
    fn from(p: StreamParams) -> Self {
        Self {
            source_id: p.source_id,
            initial_seq: p.initial_seq,
            initial_ts: p.initial_ts,
        }
    }
}

impl From<StreamParamsBody> for StreamParams {
    fn from(p: StreamParamsBody) -> Self {
        Self {
            source_id: p.source_id,
            initial_seq: p.initial_seq,
            initial_ts: p.initial_ts,
        }
    }
}

/// Server notice about call progress, sent on `CALL_INVITE` (reply to the
/// caller), `CALL_ACCEPT`, `CALL_REJECT` and `CALL_END`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallNotice {
    #[serde(default)]
    pub re: Option<u64>,
    pub call_id: u64,
    pub state: CallState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub media: Option<MediaPlan>,
    /// Common capture start time for both parties, server clock.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub media_epoch: Option<UtcMillis>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

/// Where one party sends media and what stream it should expect.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MediaPlan {
    pub send_to: SocketAddr,
    pub relayed: bool,
    pub peer_stream: StreamParamsBody,
    #[serde(default)]
    pub route: Vec<String>,
}

/// `CALL_ACCEPT`, `CALL_REJECT` and `CALL_END` from a client.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallControl {
    pub call_id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stream: Option<StreamParamsBody>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

/// `FILE_ACCEPT`: the first one answers the offer; later ones grant credits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileAcceptBody {
    pub transfer_id: u64,
    pub accept: bool,
    #[serde(default)]
    pub credits: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub code: Option<ErrorCode>,
}

/// `FILE_OFFER` body.
pub type FileOfferBody = FileManifest;

/// Generic acknowledgement.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ack {
    pub re: u64,
}

/// `PING` / `PONG` for liveness and clock offset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PingBody {
    pub t0: UtcMillis,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub server_time: Option<UtcMillis>,
}

/// Clock offset of the remote relative to us by the midpoint rule:
/// `server_time - (t0 + t3) / 2`, in milliseconds.
pub fn midpoint_offset_ms(t0: UtcMillis, server_time: UtcMillis, t3: UtcMillis) -> f64 {
    server_time.0 as f64 - (t0.0 as f64 + t3.0 as f64) / 2.0
}

pub fn to_body<T: Serialize>(value: &T) -> Vec<u8> {
    serde_json::to_vec(value).expect("protocol types always serialize")
}

pub fn from_body<T: DeserializeOwned>(body: &[u8]) -> Result<T, ErrorCode> {
    serde_json::from_slice(body).map_err(|_| ErrorCode::Malformed)
}

/// Reply addressed back to the requester, from the hop endpoint.
pub fn reply_to<T: Serialize>(req: &SignalEnvelope, value: &T) -> SignalEnvelope {
    SignalEnvelope::new(req.kind, "", req.from.clone(), 0, to_body(value))
}

pub fn error_reply(req: &SignalEnvelope, code: ErrorCode) -> SignalEnvelope {
    SignalEnvelope::new(Kind::Error, "", req.from.clone(), 0, to_body(&ErrorBody::new(req.id, code)))
}

/// Extracts `re` from any JSON reply body.
pub fn reply_ref(body: &[u8]) -> Option<u64> {
    #[derive(Deserialize)]
    struct Re {
        re: Option<u64>,
    }
    serde_json::from_slice::<Re>(body).ok()?.re
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_codes_are_screaming_snake() {
        assert_eq!(ErrorCode::CalleeOffline.as_str(), "CALLEE_OFFLINE");
        let body = to_body(&ErrorBody::new(9, ErrorCode::BadCredentials));
        assert_eq!(
            String::from_utf8(body).unwrap(),
            r#"{"re":9,"code":"BAD_CREDENTIALS","message":"bad credentials"}"#
        );
    }

    #[test]
    fn account_request_tags() {
        let r = AccountRequest::Create {
            username: "alice".into(),
            password: "hunter2pass".into(),
            picture_b64: None,
        };
        let json = String::from_utf8(to_body(&r)).unwrap();
        assert_eq!(json, r#"{"op":"create","username":"alice","password":"hunter2pass"}"#);
        assert_eq!(from_body::<AccountRequest>(json.as_bytes()).unwrap(), r);
        assert_eq!(from_body::<AccountRequest>(b"{\"op\":\"nope\"}"), Err(ErrorCode::Malformed));
    }

    #[test]
    fn midpoint() {
        // request sent at 1000, answered at server time 5010, reply back at 1020
        assert_eq!(midpoint_offset_ms(UtcMillis(1000), UtcMillis(5010), UtcMillis(1020)), 4000.0);
    }

    #[test]
    fn reply_ref_extraction() {
        assert_eq!(reply_ref(br#"{"re":42,"x":1}"#), Some(42));
        assert_eq!(reply_ref(br#"{"x":1}"#), None);
        assert_eq!(reply_ref(b"\x00binary"), None);
    }

    #[test]
    fn call_notice_round_trip() {
        let n = CallNotice {
            re: None,
            call_id: 5,
            state: CallState::Active,
            media: Some(MediaPlan {
                send_to: "127.0.0.1:40000".parse().unwrap(),
                relayed: true,
                peer_stream: StreamParamsBody {
                    source_id: 1,
                    initial_seq: 2,
                    initial_ts: 3,
                },
                route: vec!["p1".into()],
            }),
            media_epoch: Some(UtcMillis(77)),
            reason: None,
        };
        assert_eq!(from_body::<CallNotice>(&to_body(&n)).unwrap(), n);
    }
}

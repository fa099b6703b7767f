//! Request/reply bookkeeping on top of one secure connection.

use std::collections::HashMap;
use std::sync::Mutex;
use std::time::Duration;

use peervoip_core::conn::ConnSender;
use peervoip_core::protocol::{from_body, reply_ref, ErrorBody, ErrorCode};
use peervoip_core::wire::{Kind, SignalEnvelope};
use tokio::sync::oneshot;

pub const REQUEST_TIMEOUT: Duration = Duration::from_secs(10);

/// The server connection (`peer` empty) or a direct link to one user.
pub struct Link {
    pub peer: String,
    sender: ConnSender,
    pending: Mutex<HashMap<u64, oneshot::Sender<SignalEnvelope>>>,
}

impl Link {
    pub fn new(peer: impl Into<String>, sender: ConnSender) -> Self {
        Self {
            peer: peer.into(),
            sender,
            pending: Mutex::new(HashMap::new()),
        }
    }

    pub fn is_direct(&self) -> bool {
        !self.peer.is_empty()
    }

    pub fn is_closed(&self) -> bool {
        self.sender.is_closed()
    }

    pub fn send(&self, env: SignalEnvelope) -> Result<u64, ErrorCode> {
        self.sender.send(env).map_err(|_| ErrorCode::Disconnected)
    }

    /// Sends `env` and resolves once it has been written to the socket.
    pub async fn send_written(&self, env: SignalEnvelope) -> Result<(), ErrorCode> {
        let (tx, rx) = oneshot::channel();
        self.sender
            .send_tracked(env, None, Some(tx))
            .map_err(|_| ErrorCode::Disconnected)?;
        rx.await.map_err(|_| ErrorCode::Disconnected)
    }

    /// Sends `env` and waits for the reply referencing its id. ERROR replies
    /// come back as `Err` with their code.
    pub async fn request(&self, env: SignalEnvelope) -> Result<SignalEnvelope, ErrorCode> {
        let (tx, rx) = oneshot::channel();
        let id = {
            // hold the map while sending so the reply cannot overtake the insert
            let mut pending = self.pending.lock().expect("pending lock");
            let id = self.send(env)?;
            pending.insert(id, tx);
            id
        };
        match tokio::time::timeout(REQUEST_TIMEOUT, rx).await {
            Ok(Ok(reply)) if reply.kind == Kind::Error => {
                Err(from_body::<ErrorBody>(&reply.body).map(|b| b.code).unwrap_or(ErrorCode::Malformed))
            }
            Ok(Ok(reply)) => Ok(reply),
            Ok(Err(_)) => Err(ErrorCode::Disconnected),
            Err(_) => {
                self.pending.lock().expect("pending lock").remove(&id);
                Err(ErrorCode::Timeout)
            }
        }
    }

    /// Completes a pending request if `env` answers one; otherwise hands it back.
    pub fn resolve(&self, env: SignalEnvelope) -> Option<SignalEnvelope> {
        if !env.from.is_empty() {
            return Some(env);
        }
        let Some(re) = reply_ref(&env.body) else {
            return Some(env);
        };
        let waiter = self.pending.lock().expect("pending lock").remove(&re);
        match waiter {
            Some(tx) => {
                let _ = tx.send(env);
                None
            }
            None => Some(env),
        }
    }

    /// Fails every outstanding request with `Disconnected` and closes the socket.
    pub fn close(&self) {
        self.pending.lock().expect("pending lock").clear();
        self.sender.close();
    }
}

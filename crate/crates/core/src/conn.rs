//! Authenticated-encryption signaling connection.
//!
//! Both ends run the key exchange as the first four envelopes (context 0);
//! from then on every body is sealed per hop with counter nonces and the
//! envelope header as associated data. Sealing happens in the writer task,
//! so the nonce order always matches the wire order.

use std::any::Any;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use thiserror::Error;
use tokio::io::{AsyncWriteExt, ReadHalf, WriteHalf};
use tokio::sync::{mpsc, oneshot};
use tokio::task::JoinHandle;

use crate::crypto::{
    channel_pair, ChannelOpener, ChannelSealer, CipherSuite, CryptoError, Initiator, KeyExchangeMessage, Responder,
    SessionKeys,
};
use crate::shaper::BoxStream;
use crate::wire::{read_envelope, write_envelope, Kind, ReadError, SignalEnvelope};

pub const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(5);
const HOP_CONTEXT: u64 = 0;

#[derive(Debug, Error)]
pub enum ConnError {
    #[error("connection closed")]
    Closed,
    #[error(transparent)]
    Read(#[from] ReadError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}

impl From<std::io::Error> for ConnError {
    fn from(e: std::io::Error) -> Self {
        ConnError::Read(ReadError::Io(e))
    }
}

/// Associated data binding a sealed body to its envelope header.
pub fn header_aad(env: &SignalEnvelope) -> Vec<u8> {
    let mut out = Vec::with_capacity(21 + env.from.len() + env.to.len());
    out.push(env.kind.code());
    out.extend_from_slice(&env.id.to_be_bytes());
    out.extend_from_slice(&env.sent_at.0.to_be_bytes());
    for id in [&env.from, &env.to] {
        out.extend_from_slice(&(id.len() as u16).to_be_bytes());
        out.extend_from_slice(id.as_bytes());
    }
    out
}

enum Command {
    Send {
        env: SignalEnvelope,
        hold: Option<Box<dyn Any + Send>>,
        written: Option<oneshot::Sender<()>>,
    },
    Close,
}

/// Cloneable handle to a connection's writer task.
#[derive(Clone)]
pub struct ConnSender {
    inner: Arc<SenderInner>,
}

struct SenderInner {
    tx: mpsc::UnboundedSender<Command>,
    next_id: Mutex<u64>,
}

impl ConnSender {
    /// Queues `env`. An id of 0 is replaced by the next local id, which is
    /// returned; relayed envelopes keep their original id.
    pub fn send(&self, env: SignalEnvelope) -> Result<u64, ConnError> {
        self.enqueue(env, None, None)
    }

    /// Like [`ConnSender::send`]; `hold` is dropped once the frame is on the
    /// socket and `written` fires at the same moment.
    pub fn send_tracked(
        &self,
        env: SignalEnvelope,
        hold: Option<Box<dyn Any + Send>>,
        written: Option<oneshot::Sender<()>>,
    ) -> Result<u64, ConnError> {
        self.enqueue(env, hold, written)
    }

    fn enqueue(
        &self,
        mut env: SignalEnvelope,
        hold: Option<Box<dyn Any + Send>>,
        written: Option<oneshot::Sender<()>>,
    ) -> Result<u64, ConnError> {
        // id allocation and enqueue under one lock keeps wire ids increasing
        let mut next = self.inner.next_id.lock().expect("id lock");
        if env.id == 0 {
            env.id = *next;
            *next += 1;
        }
        let id = env.id;
        self.inner
            .tx
            .send(Command::Send { env, hold, written })
            .map_err(|_| ConnError::Closed)?;
        Ok(id)
    }

    pub fn close(&self) {
        let _ = self.inner.tx.send(Command::Close);
    }

    pub fn is_closed(&self) -> bool {
        self.inner.tx.is_closed()
    }

    pub fn same_connection(&self, other: &ConnSender) -> bool {
        Arc::ptr_eq(&self.inner, &other.inner)
    }
}

pub struct ConnReader {
    reader: ReadHalf<BoxStream>,
    opener: ChannelOpener,
}

impl ConnReader {
    /// Next envelope with its body opened. `Ok(None)` on clean close.
    pub async fn next(&mut self) -> Result<Option<SignalEnvelope>, ConnError> {
        let Some(mut env) = read_envelope(&mut self.reader).await? else {
            return Ok(None);
        };
        env.body = self.opener.open(&header_aad(&env), &env.body)?;
        Ok(Some(env))
    }
}

pub struct SecureConn {
    pub reader: ConnReader,
    pub sender: ConnSender,
    pub writer: JoinHandle<()>,
    pub keys: SessionKeys,
}

fn ke_envelope(id: u64, msg: &KeyExchangeMessage) -> SignalEnvelope {
    SignalEnvelope::new(Kind::KeyExchange, "", "", id, msg.encode())
}

async fn read_ke(stream: &mut BoxStream) -> Result<KeyExchangeMessage, ConnError> {
    let env = read_envelope(stream).await?.ok_or(ConnError::Closed)?;
    if env.kind != Kind::KeyExchange {
        return Err(CryptoError::UnexpectedMessage.into());
    }
    Ok(KeyExchangeMessage::decode(&env.body)?)
}

/// Client side of the hop handshake.
pub async fn connect_secure(stream: BoxStream) -> Result<SecureConn, ConnError> {
    tokio::time::timeout(HANDSHAKE_TIMEOUT, async move {
        let mut stream = stream;
        let (init, ke1) = Initiator::start(HOP_CONTEXT, CipherSuite::DEFAULT)?;
        write_envelope(&mut stream, &ke_envelope(1, &ke1)).await?;
        let ke2 = read_ke(&mut stream).await?;
        let (keys, ke3) = init.finish(&ke2)?;
        write_envelope(&mut stream, &ke_envelope(2, &ke3)).await?;
        // the responder's confirmation doubles as "ready"
        read_ke(&mut stream).await?;
        Ok(spawn_conn(stream, keys, 3))
    })
    .await
    .map_err(|_| ConnError::Crypto(CryptoError::ExchangeTimeout))?
}

/// Server (or listening peer) side of the hop handshake.
pub async fn accept_secure(stream: BoxStream) -> Result<SecureConn, ConnError> {
    tokio::time::timeout(HANDSHAKE_TIMEOUT, async move {
        let mut stream = stream;
        let ke1 = read_ke(&mut stream).await?;
        let (resp, ke2) = Responder::respond(HOP_CONTEXT, &ke1, &[CipherSuite::ChaCha20Poly1305, CipherSuite::Aes256Gcm])?;
        write_envelope(&mut stream, &ke_envelope(1, &ke2)).await?;
        let ke3 = read_ke(&mut stream).await?;
        let (keys, ke4) = resp.finish(&ke3)?;
        write_envelope(&mut stream, &ke_envelope(2, &ke4)).await?;
        Ok(spawn_conn(stream, keys, 3))
    })
    .await
    .map_err(|_| ConnError::Crypto(CryptoError::ExchangeTimeout))?
}

fn spawn_conn(stream: BoxStream, keys: SessionKeys, first_id: u64) -> SecureConn {
    let (sealer, opener) = channel_pair(&keys);
    let (reader, writer) = tokio::io::split(stream);
    let (tx, rx) = mpsc::unbounded_channel();
    let writer = tokio::spawn(write_loop(writer, sealer, rx));
    SecureConn {
        reader: ConnReader { reader, opener },
        sender: ConnSender {
            inner: Arc::new(SenderInner {
                tx,
                next_id: Mutex::new(first_id),
            }),
        },
        writer,
        keys,
    }
}

async fn write_loop(mut w: WriteHalf<BoxStream>, mut sealer: ChannelSealer, mut rx: mpsc::UnboundedReceiver<Command>) {
    while let Some(cmd) = rx.recv().await {
        let Command::Send { mut env, hold, written } = cmd else {
            break;
        };
        env.body = match sealer.seal(&header_aad(&env), &env.body) {
            Ok(b) => b,
            Err(e) => {
                tracing::error!(error = %e, "sealing failed; closing connection");
                break;
            }
        };
        if let Err(e) = write_envelope(&mut w, &env).await {
            tracing::debug!(error = %e, "connection write failed");
            break;
        }
        drop(hold);
        if let Some(w) = written {
            let _ = w.send(());
        }
    }
    rx.close();
    let _ = w.shutdown().await;
}

#[cfg(test)]
mod tests {
    use super::*;
    use tokio::io::duplex;

    #[tokio::test]
    async fn handshake_and_sealed_round_trip() {
        let (a, b) = duplex(1 << 16);
        let (client, server) = tokio::join!(connect_secure(Box::new(a)), accept_secure(Box::new(b)));
        let mut client = client.unwrap();
        let mut server = server.unwrap();
        assert_eq!(client.keys.send.raw().expose(), server.keys.receive.raw().expose());
        let id1 = client.sender.send(SignalEnvelope::new(Kind::Chat, "alice", "bob", 0, b"hi".to_vec())).unwrap();
        let id2 = client.sender.send(SignalEnvelope::new(Kind::Ping, "alice", "", 0, vec![])).unwrap();
        assert!(id2 > id1);
        let got = server.reader.next().await.unwrap().unwrap();
        assert_eq!((got.kind, got.id, got.body.as_slice()), (Kind::Chat, id1, &b"hi"[..]));
        assert_eq!(server.reader.next().await.unwrap().unwrap().body, b"");
        server.sender.send(SignalEnvelope::new(Kind::Pong, "", "alice", 0, b"x".to_vec())).unwrap();
        assert_eq!(client.reader.next().await.unwrap().unwrap().body, b"x");
        client.sender.close();
        assert!(server.reader.next().await.unwrap().is_none());
    }

    #[tokio::test]
    async fn wire_bodies_are_not_plaintext() {
        let (a, mut b) = duplex(1 << 16);
        let mut probe = tokio::spawn(async move {
            let mut raw = Vec::new();
            // act as a passive relay recording everything the client writes
            let mut resp = None;
            loop {
                let env = match read_envelope(&mut b).await {
                    Ok(Some(e)) => e,
                    _ => break,
                };
                raw.extend_from_slice(&env.body);
                if env.kind == Kind::KeyExchange && resp.is_none() {
                    let ke1 = KeyExchangeMessage::decode(&env.body).unwrap();
                    let (r, ke2) = Responder::respond(0, &ke1, &[CipherSuite::DEFAULT]).unwrap();
                    write_envelope(&mut b, &ke_envelope(1, &ke2)).await.unwrap();
                    resp = Some(r);
                } else if env.kind == Kind::KeyExchange {
                    let ke3 = KeyExchangeMessage::decode(&env.body).unwrap();
                    let (_, ke4) = resp.take().unwrap().finish(&ke3).unwrap();
                    write_envelope(&mut b, &ke_envelope(2, &ke4)).await.unwrap();
                    resp = None;
                }
            }
            raw
        });
        let c = connect_secure(Box::new(a)).await.unwrap();
        c.sender
            .send(SignalEnvelope::new(Kind::Chat, "alice", "bob", 0, b"the secret plan".to_vec()))
            .unwrap();
        c.sender.close();
        let raw = (&mut probe).await.unwrap();
        assert!(!raw.windows(6).any(|w| w == b"secret"));
    }

    #[tokio::test]
    async fn dropped_frame_breaks_the_channel() {
        let (a, b) = duplex(1 << 16);
        let (client, server) = tokio::join!(connect_secure(Box::new(a)), accept_secure(Box::new(b)));
        let client = client.unwrap();
        let mut server = server.unwrap();
        // a frame removed in transit desynchronizes the counter nonce
        client.sender.send(SignalEnvelope::new(Kind::Chat, "a", "b", 0, b"1".to_vec())).unwrap();
        client.sender.send(SignalEnvelope::new(Kind::Chat, "a", "b", 0, b"2".to_vec())).unwrap();
        let first = read_envelope(&mut server.reader.reader).await.unwrap().unwrap();
        drop(first);
        assert!(matches!(
            server.reader.next().await,
            Err(ConnError::Crypto(CryptoError::AuthenticationFailure))
        ));
    }

    #[tokio::test]
    async fn handshake_times_out_on_silence() {
        tokio::time::pause();
        let (a, _b) = duplex(1024);
        let r = connect_secure(Box::new(a)).await;
        assert!(matches!(r, Err(ConnError::Crypto(CryptoError::ExchangeTimeout))));
    }
}

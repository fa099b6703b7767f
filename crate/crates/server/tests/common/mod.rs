#![allow(dead_code)]

use std::collections::VecDeque;
use std::net::SocketAddr;
use std::time::Duration;

use peervoip_core::conn::{connect_secure, ConnReader, ConnSender};
use peervoip_core::protocol::{from_body, reply_ref, to_body, AccountRequest, ErrorBody, ErrorCode, LoginRequest};
use peervoip_core::wire::{Kind, SignalEnvelope};
use peervoip_server::{Server, ServerConfig};
use serde::de::DeserializeOwned;
use serde::Serialize;
use tokio::net::TcpStream;
use tokio::sync::mpsc;

pub const WAIT: Duration = Duration::from_secs(5);
pub const PASSWORD: &str = "correct horse";

pub async fn server(dir: &std::path::Path, tweak: impl FnOnce(&mut ServerConfig)) -> Server {
    let mut cfg = ServerConfig::ephemeral(dir);
    cfg.admin_token = Some("admin-secret".into());
    tweak(&mut cfg);
    Server::start(cfg).await.unwrap()
}

pub struct Client {
    pub name: String,
    pub sender: ConnSender,
    rx: mpsc::UnboundedReceiver<SignalEnvelope>,
    inbox: VecDeque<SignalEnvelope>,
}

impl Client {
    pub async fn connect(addr: SocketAddr, name: &str) -> Self {
        let stream = TcpStream::connect(addr).await.unwrap();
        stream.set_nodelay(true).unwrap();
        let conn = connect_secure(Box::new(stream)).await.unwrap();
        let (tx, rx) = mpsc::unbounded_channel();
        tokio::spawn(pump(conn.reader, tx));
        Self {
            name: name.to_string(),
            sender: conn.sender,
            rx,
            inbox: VecDeque::new(),
        }
    }

    /// Signs up (ignoring "taken") and logs in.
    pub async fn online(addr: SocketAddr, name: &str, media_port: Option<u16>) -> Self {
        let mut c = Self::connect(addr, name).await;
        let r = c
            .request(
                Kind::Signup,
                "",
                &AccountRequest::Create {
                    username: name.into(),
                    password: PASSWORD.into(),
                    picture_b64: None,
                },
            )
            .await;
        assert!(r.kind == Kind::Signup || error_code(&r) == ErrorCode::UsernameTaken, "{r:?}");
        let r = c
            .request(
                Kind::Login,
                "",
                &LoginRequest::Login {
                    username: name.into(),
                    password: PASSWORD.into(),
                    media_port,
                    p2p_port: Some(9000),
                },
            )
            .await;
        assert_eq!(r.kind, Kind::Login, "{:?}", String::from_utf8_lossy(&r.body));
        c
    }

    pub fn send<T: Serialize>(&self, kind: Kind, to: &str, body: &T) -> u64 {
        self.send_raw(kind, to, to_body(body))
    }

    pub fn send_raw(&self, kind: Kind, to: &str, body: Vec<u8>) -> u64 {
        self.sender
            .send(SignalEnvelope::new(kind, self.name.clone(), to, 0, body))
            .unwrap()
    }

    async fn read(&mut self) -> Option<SignalEnvelope> {
        tokio::time::timeout(WAIT, self.rx.recv())
            .await
            .expect("timed out waiting for the server")
    }

    /// Sends and returns the reply (same kind or ERROR) whose `re` matches.
    pub async fn request<T: Serialize>(&mut self, kind: Kind, to: &str, body: &T) -> SignalEnvelope {
        let id = self.send(kind, to, body);
        self.reply_to(id).await
    }

    pub async fn reply_to(&mut self, id: u64) -> SignalEnvelope {
        if let Some(i) = self.inbox.iter().position(|e| e.from.is_empty() && reply_ref(&e.body) == Some(id)) {
            return self.inbox.remove(i).unwrap();
        }
        loop {
            let env = self.read().await.expect("connection closed while waiting for reply");
            if env.from.is_empty() && reply_ref(&env.body) == Some(id) {
                return env;
            }
            self.inbox.push_back(env);
        }
    }

    /// Next envelope of `kind`, buffering everything else.
    pub async fn expect(&mut self, kind: Kind) -> SignalEnvelope {
        if let Some(i) = self.inbox.iter().position(|e| e.kind == kind) {
            return self.inbox.remove(i).unwrap();
        }
        loop {
            let env = self.read().await.unwrap_or_else(|| panic!("closed while waiting for {kind}"));
            if env.kind == kind {
                return env;
            }
            self.inbox.push_back(env);
        }
    }

    pub async fn expect_body<T: DeserializeOwned>(&mut self, kind: Kind) -> T {
        let env = self.expect(kind).await;
        from_body(&env.body).unwrap()
    }

    /// Whether anything of `kind` arrives within `d`.
    pub async fn quiet(&mut self, kind: Kind, d: Duration) -> bool {
        if self.inbox.iter().any(|e| e.kind == kind) {
            return false;
        }
        let deadline = tokio::time::Instant::now() + d;
        loop {
            match tokio::time::timeout_at(deadline, self.rx.recv()).await {
                Err(_) => return true,
                Ok(Some(env)) => {
                    if env.kind == kind {
                        return false;
                    }
                    self.inbox.push_back(env);
                }
                Ok(_) => return true,
            }
        }
    }

    /// True once the server closes the connection.
    pub async fn closed(&mut self) -> bool {
        loop {
            match tokio::time::timeout(WAIT, self.rx.recv()).await {
                Err(_) => return false,
                Ok(Some(env)) => self.inbox.push_back(env),
                Ok(_) => return true,
            }
        }
    }
}

async fn pump(mut reader: ConnReader, tx: mpsc::UnboundedSender<SignalEnvelope>) {
    while let Ok(Some(env)) = reader.next().await {
        if tx.send(env).is_err() {
            return;
        }
    }
}

pub fn error_code(env: &SignalEnvelope) -> ErrorCode {
    assert_eq!(env.kind, Kind::Error, "expected ERROR, got {:?}", env);
    from_body::<ErrorBody>(&env.body).unwrap().code
}

/// Minimal HTTP/1.1 GET; returns (status, body).
pub async fn http_get(addr: SocketAddr, path: &str, bearer: Option<&str>) -> (u16, String) {
    use tokio::io::{AsyncReadExt, AsyncWriteExt};
    let mut s = TcpStream::connect(addr).await.unwrap();
    let auth = bearer.map(|t| format!("Authorization: Bearer {t}\r\n")).unwrap_or_default();
    let req = format!("GET {path} HTTP/1.1\r\nHost: test\r\n{auth}Connection: close\r\n\r\n");
    s.write_all(req.as_bytes()).await.unwrap();
    let mut raw = Vec::new();
    s.read_to_end(&mut raw).await.unwrap();
    let text = String::from_utf8_lossy(&raw).to_string();
    let status = text[9..12].parse().unwrap();
    let (head, body) = text.split_once("\r\n\r\n").unwrap();
    let body = if head.to_ascii_lowercase().contains("transfer-encoding: chunked") {
        dechunk(body)
    } else {
        body.to_string()
    };
    (status, body)
}

fn dechunk(mut s: &str) -> String {
    let mut out = String::new();
    while let Some((len, rest)) = s.split_once("\r\n") {
        let n = usize::from_str_radix(len.trim(), 16).unwrap_or(0);
        if n == 0 {
            break;
        }
        out.push_str(&rest[..n]);
        s = &rest[n + 2..];
    }
    out
}

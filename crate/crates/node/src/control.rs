//! Loopback control API.
//!
//! One TCP port speaks two protocols, told apart by the first byte: a JSON
//! object (`{`) starts a line-delimited JSON session, anything else is HTTP.
//! HTTP serves the web console's static files and `/ws`, a WebSocket that
//! carries the same JSON messages one per text frame.
//!
//! Requests: `{"id", "method", "params"}`. Replies echo `id` with either
//! `"ok": true, "result"` or `"ok": false, "error": {"code", "message"}`.
//! After `subscribe`, events arrive as `{"event", "seq", "data"}`.

use std::collections::HashMap;
use std::net::{IpAddr, SocketAddr};
use std::path::{Component, Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::http::{header, HeaderMap, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::Router;
use futures::{SinkExt, StreamExt};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};
use thiserror::Error;
use tokio::io::{AsyncBufReadExt, AsyncReadExt, AsyncWriteExt, BufReader};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, oneshot};

use crate::engine::{Engine, EngineError};

/// Longest accepted request line (profile pictures travel inline).
pub const MAX_LINE: usize = 4 * 1024 * 1024;

const INDEX_HTML: &str = "<!doctype html>\n<html><head><meta charset=\"utf-8\"><title>peervoip</title></head>\n<body><h1>peervoip daemon</h1><p>The web console is not installed. Point <code>assets_dir</code> at its build output.</p></body></html>\n";

#[derive(Debug, Deserialize)]
struct Request {
    #[serde(default)]
    id: Value,
    method: String,
    #[serde(default)]
    params: Value,
}

struct CallError {
    code: String,
    message: String,
}

impl CallError {
    fn new(code: &str, message: impl Into<String>) -> Self {
        Self {
            code: code.into(),
            message: message.into(),
        }
    }
}

impl From<EngineError> for CallError {
    fn from(e: EngineError) -> Self {
        Self {
            code: e.code(),
            message: e.to_string(),
        }
    }
}

fn params<T: DeserializeOwned>(v: Value) -> Result<T, CallError> {
    let v = if v.is_null() { json!({}) } else { v };
    serde_json::from_value(v).map_err(|e| CallError::new("INVALID_PARAMS", e.to_string()))
}

fn reply(id: Value, r: Result<Value, CallError>) -> Value {
    match r {
        Ok(result) => json!({"id": id, "ok": true, "result": result}),
        Err(e) => json!({"id": id, "ok": false, "error": {"code": e.code, "message": e.message}}),
    }
}

fn to_value<T: serde::Serialize>(v: T) -> Result<Value, CallError> {
    serde_json::to_value(v).map_err(|e| CallError::new("INTERNAL", e.to_string()))
}

/// Runs one request. `subscribe` is handled by the session, not here.
async fn call(engine: &Arc<Engine>, method: &str, p: Value) -> Result<Value, CallError> {
    #[derive(Deserialize)]
    struct Creds {
        username: String,
        password: String,
        #[serde(default)]
        picture_b64: Option<String>,
    }
    #[derive(Deserialize)]
    struct To {
        to: String,
    }
    #[derive(Deserialize)]
    struct Chat {
        to: String,
        body: String,
    }
    #[derive(Deserialize)]
    struct CallId {
        call_id: u64,
    }
    #[derive(Deserialize)]
    struct MaybeCallId {
        #[serde(default)]
        call_id: Option<u64>,
    }
    #[derive(Deserialize)]
    struct Offer {
        to: String,
        path: PathBuf,
        #[serde(default)]
        direct: bool,
    }
    #[derive(Deserialize)]
    struct Accept {
        transfer_id: u64,
        #[serde(default = "yes")]
        accept: bool,
    }
    fn yes() -> bool {
        true
    }
    #[derive(Deserialize)]
    struct Transfer {
        transfer_id: u64,
    }
    #[derive(Deserialize)]
    struct Picture {
        picture_b64: String,
    }
    #[derive(Deserialize)]
    struct User {
        username: String,
    }

    match method {
        "ping" => Ok(json!({"pong": true, "connected": engine.is_connected()})),
        "signup" => {
            let c: Creds = params(p)?;
            engine.signup(&c.username, &c.password, c.picture_b64).await?;
            Ok(json!({"username": c.username}))
        }
        "login" => {
            let c: Creds = params(p)?;
            to_value(engine.login(&c.username, &c.password).await?)
        }
        "logout" => {
            engine.logout().await?;
            Ok(json!({}))
        }
        "roster" => to_value(json!({"users": engine.roster().await?})),
        "send_chat" => {
            let c: Chat = params(p)?;
            to_value(engine.send_chat(&c.to, &c.body).await?)
        }
        "start_call" => {
            let t: To = params(p)?;
            Ok(json!({"call_id": engine.start_call(&t.to).await?}))
        }
        "accept_call" => {
            let c: CallId = params(p)?;
            engine.accept_call(c.call_id).await?;
            Ok(json!({"call_id": c.call_id}))
        }
        "reject_call" => {
            let c: CallId = params(p)?;
            engine.reject_call(c.call_id).await?;
            Ok(json!({"call_id": c.call_id}))
        }
        "end_call" => {
            let c: MaybeCallId = params(p)?;
            to_value(engine.end_call(c.call_id).await?)
        }
        "offer_file" => {
            let o: Offer = params(p)?;
            Ok(json!({"transfer_id": engine.offer_file(&o.to, &o.path, o.direct).await?}))
        }
        "accept_file" => {
            let a: Accept = params(p)?;
            engine.accept_file(a.transfer_id, a.accept).await?;
            Ok(json!({"transfer_id": a.transfer_id, "accept": a.accept}))
        }
        "pause_file" => {
            let t: Transfer = params(p)?;
            engine.pause_file(t.transfer_id)?;
            to_value(engine.transfer(t.transfer_id))
        }
        "resume_file" => {
            let t: Transfer = params(p)?;
            engine.resume_file(t.transfer_id)?;
            to_value(engine.transfer(t.transfer_id))
        }
        "set_picture" => {
            let pic: Picture = params(p)?;
            engine.set_picture(pic.picture_b64).await?;
            Ok(json!({}))
        }
        "get_picture" => {
            let u: User = params(p)?;
            Ok(json!({"username": u.username, "picture_b64": engine.get_picture(&u.username).await?}))
        }
        "get_stats" => to_value(engine.stats()),
        other => Err(CallError::new("UNKNOWN_METHOD", format!("unknown method {other:?}"))),
    }
}

/// One client session on either transport. Outgoing messages go through
/// `out`; replies and events share it so their relative order is kept.
struct Session {
    engine: Arc<Engine>,
    out: mpsc::UnboundedSender<Value>,
    subscribed: bool,
}

impl Session {
    fn handle(&mut self, text: &str) {
        let req: Request = match serde_json::from_str(text) {
            Ok(r) => r,
            Err(e) => {
                let _ = self.out.send(reply(Value::Null, Err(CallError::new("MALFORMED", e.to_string()))));
                return;
            }
        };
        if req.method == "subscribe" {
            let _ = self.out.send(reply(req.id, Ok(json!({"subscribed": true}))));
            if !self.subscribed {
                self.subscribed = true;
                let mut events = self.engine.subscribe();
                let out = self.out.clone();
                tokio::spawn(async move {
                    while let Some(ev) = events.recv().await {
                        let Ok(v) = serde_json::to_value(&ev) else { continue };
                        if out.send(v).is_err() {
                            return;
                        }
                    }
                });
            }
            return;
        }
        let engine = self.engine.clone();
        let out = self.out.clone();
        tokio::spawn(async move {
            let r = call(&engine, &req.method, req.params).await;
            let _ = out.send(reply(req.id, r));
        });
    }
}

fn admit(peer: &SocketAddr) -> bool {
    peer.ip().is_loopback() || matches!(peer.ip(), IpAddr::V6(v6) if v6.to_ipv4_mapped().is_some_and(|v4| v4.is_loopback()))
}

/// Binds the control port on 127.0.0.1 and serves it until the engine stops.
pub async fn serve(engine: Arc<Engine>, port: u16) -> std::io::Result<SocketAddr> {
    let listener = TcpListener::bind(("127.0.0.1", port)).await?;
    let addr = listener.local_addr()?;
    let (http_tx, http_rx) = mpsc::channel(64);
    let router = router(engine.clone());
    let stop = engine.shutdown.clone();
    tokio::spawn(async move {
        let http = axum::serve(ChannelListener { rx: http_rx, addr }, router.into_make_service());
        tokio::select! {
            r = http => if let Err(e) = r { tracing::warn!(error = %e, "http control server stopped") },
            _ = stop.cancelled() => {}
        }
    });
    let stop = engine.shutdown.clone();
    tokio::spawn(async move {
        loop {
            let (stream, peer) = tokio::select! {
                r = listener.accept() => match r {
                    Ok(x) => x,
                    Err(e) => {
                        tracing::warn!(error = %e, "control accept failed");
                        continue;
                    }
                },
                _ = stop.cancelled() => return,
            };
            if !admit(&peer) {
                tracing::warn!(%peer, "refusing non-loopback control client");
                continue;
            }
            let engine = engine.clone();
            let http_tx = http_tx.clone();
            tokio::spawn(async move {
                let mut first = [0u8; 1];
                match stream.peek(&mut first).await {
                    Ok(1) if first[0] == b'{' => line_session(engine, stream).await,
                    Ok(1) => {
                        let _ = http_tx.send((stream, peer)).await;
                    }
                    _ => {}
                }
            });
        }
    });
    tracing::info!(%addr, "control API listening");
    Ok(addr)
}

async fn line_session(engine: Arc<Engine>, stream: TcpStream) {
    let (rd, mut wr) = stream.into_split();
    let (tx, mut rx) = mpsc::unbounded_channel::<Value>();
    let stop = engine.shutdown.clone();
    let writer = tokio::spawn(async move {
        while let Some(v) = rx.recv().await {
            let mut line = v.to_string();
            line.push('\n');
            if wr.write_all(line.as_bytes()).await.is_err() {
                return;
            }
        }
    });
    let mut session = Session {
        engine,
        out: tx,
        subscribed: false,
    };
    let mut lines = BufReader::new(rd);
    let mut buf = Vec::new();
    loop {
        buf.clear();
        let mut limited = (&mut lines).take(MAX_LINE as u64 + 1);
        let n = tokio::select! {
            r = limited.read_until(b'\n', &mut buf) => r,
            _ = stop.cancelled() => break,
        };
        match n {
            Ok(0) | Err(_) => break,
            Ok(_) if buf.len() > MAX_LINE => {
                let _ = session
                    .out
                    .send(reply(Value::Null, Err(CallError::new("MALFORMED", "request line too long"))));
                break;
            }
            Ok(_) => {
                let text = String::from_utf8_lossy(&buf);
                let text = text.trim();
                if !text.is_empty() {
                    session.handle(text);
                }
            }
        }
    }
    drop(session);
    let _ = writer.await;
}

// ---- HTTP side ---------------------------------------------------------------

struct ChannelListener {
    rx: mpsc::Receiver<(TcpStream, SocketAddr)>,
    addr: SocketAddr,
}

impl axum::serve::Listener for ChannelListener {
    type Io = TcpStream;
    type Addr = SocketAddr;

    async fn accept(&mut self) -> (Self::Io, Self::Addr) {
        match self.rx.recv().await {
            Some(x) => x,
            // the accept loop is gone; park until the server task is dropped
            None => std::future::pending().await,
        }
    }

    fn local_addr(&self) -> std::io::Result<Self::Addr> {
        Ok(self.addr)
    }
}

fn router(engine: Arc<Engine>) -> Router {
    Router::new()
        .route("/ws", get(ws_upgrade))
        .fallback(get(static_asset))
        .with_state(engine)
}

/// Browsers always send `Origin`; only pages served from loopback may connect.
fn origin_allowed(headers: &HeaderMap) -> bool {
    let Some(origin) = headers.get(header::ORIGIN) else {
        return true;
    };
    let Ok(origin) = origin.to_str() else {
        return false;
    };
    let Ok(uri) = origin.parse::<Uri>() else {
        return false;
    };
    matches!(uri.host(), Some("localhost" | "127.0.0.1" | "[::1]" | "::1"))
}

async fn ws_upgrade(State(engine): State<Arc<Engine>>, headers: HeaderMap, ws: WebSocketUpgrade) -> Response {
    if !origin_allowed(&headers) {
        return (StatusCode::FORBIDDEN, "origin not allowed").into_response();
    }
    ws.max_message_size(MAX_LINE)
        .on_upgrade(move |socket| ws_session(engine, socket))
}

async fn ws_session(engine: Arc<Engine>, socket: WebSocket) {
    let (mut sink, mut stream) = socket.split();
    let (tx, mut rx) = mpsc::unbounded_channel::<Value>();
    let writer = tokio::spawn(async move {
        while let Some(v) = rx.recv().await {
            if sink.send(Message::Text(v.to_string().into())).await.is_err() {
                return;
            }
        }
        let _ = sink.close().await;
    });
    let stop = engine.shutdown.clone();
    let mut session = Session {
        engine,
        out: tx,
        subscribed: false,
    };
    loop {
        let msg = tokio::select! {
            m = stream.next() => m,
            _ = stop.cancelled() => break,
        };
        match msg {
            Some(Ok(Message::Text(t))) => session.handle(t.as_str()),
            Some(Ok(Message::Binary(b))) => session.handle(&String::from_utf8_lossy(&b)),
            Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
            Some(Ok(_)) => {}
        }
    }
    drop(session);
    let _ = writer.await;
}

async fn static_asset(State(engine): State<Arc<Engine>>, uri: Uri) -> Response {
    let Some(rel) = sanitize(uri.path()) else {
        return StatusCode::NOT_FOUND.into_response();
    };
    let rel = if rel.as_os_str().is_empty() { PathBuf::from("index.html") } else { rel };
    if let Some(root) = &engine.config.assets_dir {
        let path = root.join(&rel);
        if let Ok(bytes) = tokio::fs::read(&path).await {
            return ([(header::CONTENT_TYPE, content_type(&path))], bytes).into_response();
        }
    }
    if rel == Path::new("index.html") {
        return ([(header::CONTENT_TYPE, "text/html; charset=utf-8")], INDEX_HTML).into_response();
    }
    StatusCode::NOT_FOUND.into_response()
}

/// Relative path for a URL path, or `None` if it tries to leave the root.
fn sanitize(url_path: &str) -> Option<PathBuf> {
    let mut out = PathBuf::new();
    for c in Path::new(url_path.trim_start_matches('/')).components() {
        match c {
            Component::Normal(s) => out.push(s),
            Component::CurDir => {}
            _ => return None,
        }
    }
    Some(out)
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).unwrap_or("") {
        "html" => "text/html; charset=utf-8",
        "js" | "mjs" => "text/javascript",
        "css" => "text/css",
        "json" | "map" => "application/json",
        "svg" => "image/svg+xml",
        "png" => "image/png",
        "ico" => "image/x-icon",
        "wasm" => "application/wasm",
        _ => "application/octet-stream",
    }
}

// ---- client --------------------------------------------------------------------

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("control connection: {0}")]
    Io(#[from] std::io::Error),
    #[error("{code}: {message}")]
    Remote { code: String, message: String },
    #[error("control connection closed")]
    Closed,
}

impl ClientError {
    pub fn code(&self) -> Option<&str> {
        match self {
            ClientError::Remote { code, .. } => Some(code),
            _ => None,
        }
    }
}

type Pending = Arc<Mutex<HashMap<u64, oneshot::Sender<Value>>>>;

/// Line-JSON client for the control port.
pub struct ControlClient {
    tx: mpsc::UnboundedSender<String>,
    pending: Pending,
    next_id: AtomicU64,
    events: Mutex<Option<mpsc::UnboundedReceiver<Value>>>,
}

impl ControlClient {
    pub async fn connect(addr: SocketAddr) -> Result<Self, ClientError> {
        let stream = TcpStream::connect(addr).await?;
        stream.set_nodelay(true)?;
        let (rd, mut wr) = stream.into_split();
        let (tx, mut rx) = mpsc::unbounded_channel::<String>();
        tokio::spawn(async move {
            while let Some(line) = rx.recv().await {
                if wr.write_all(line.as_bytes()).await.is_err() {
                    return;
                }
            }
        });
        let pending: Pending = Arc::default();
        let (ev_tx, ev_rx) = mpsc::unbounded_channel();
        let p = pending.clone();
        tokio::spawn(async move {
            let mut lines = BufReader::new(rd).lines();
            while let Ok(Some(line)) = lines.next_line().await {
                let Ok(v) = serde_json::from_str::<Value>(&line) else { continue };
                if v.get("event").is_some() {
                    let _ = ev_tx.send(v);
                    continue;
                }
                let waiter = v.get("id").and_then(Value::as_u64).and_then(|id| p.lock().expect("pending").remove(&id));
                if let Some(w) = waiter {
                    let _ = w.send(v);
                }
            }
            p.lock().expect("pending").clear();
        });
        Ok(Self {
            tx,
            pending,
            next_id: AtomicU64::new(1),
            events: Mutex::new(Some(ev_rx)),
        })
    }

    pub async fn call(&self, method: &str, params: Value) -> Result<Value, ClientError> {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let (tx, rx) = oneshot::channel();
        self.pending.lock().expect("pending").insert(id, tx);
        let mut line = json!({"id": id, "method": method, "params": params}).to_string();
        line.push('\n');
        self.tx.send(line).map_err(|_| ClientError::Closed)?;
        let v = rx.await.map_err(|_| ClientError::Closed)?;
        if v["ok"].as_bool() == Some(true) {
            return Ok(v["result"].clone());
        }
        Err(ClientError::Remote {
            code: v["error"]["code"].as_str().unwrap_or("UNKNOWN").to_string(),
            message: v["error"]["message"].as_str().unwrap_or("").to_string(),
        })
    }

    /// Subscribes and hands out the event stream (snapshot first). Only the
    /// first call gets the receiver.
    pub async fn subscribe(&self) -> Result<mpsc::UnboundedReceiver<Value>, ClientError> {
        let rx = self.events.lock().expect("events").take().ok_or(ClientError::Closed)?;
        self.call("subscribe", json!({})).await?;
        Ok(rx)
    }

    /// Sends a raw line and returns the next reply carrying `id`.
    pub async fn raw(&self, line: &str, id: u64) -> Result<Value, ClientError> {
        let (tx, rx) = oneshot::channel();
        self.pending.lock().expect("pending").insert(id, tx);
        self.tx.send(format!("{}\n", line.trim_end())).map_err(|_| ClientError::Closed)?;
        rx.await.map_err(|_| ClientError::Closed)
    }
}

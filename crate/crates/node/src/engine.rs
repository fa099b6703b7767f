//! The daemon's authoritative state: session, roster, the current call and
//! file transfers.
//!
//! Each connection (the server link and any direct peer links) has one
//! reader task that applies envelopes in arrival order. Control requests
//! run on their own tasks and take the state lock only briefly. Media runs
//! on separate tasks that never wait on either.
//!
//! Lock order: `state` before the event bus. The server slot is never held
//! together with `state`.

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use peervoip_core::auth::PresenceState;
use peervoip_core::conn::{accept_secure, connect_secure, ConnReader};
use peervoip_core::crypto::{self, CipherSuite, Initiator, KeyExchangeMessage, Responder, SessionKeys};
use peervoip_core::files::FileError;
use peervoip_core::media::{AudioSink, AudioSource, CallStats, NullSink, SineSource, StreamParams};
use peervoip_core::protocol::{
    error_reply, from_body, midpoint_offset_ms, reply_to, to_body, AccountReply, AccountRequest, CallControl,
    CallNotice, ChatBody, ChatReceipt, ErrorBody, ErrorCode, InviteBody, LoginReply, LoginRequest, MediaPlan,
    PingBody, PresenceNotice, RosterItem, RosterReply,
};
use peervoip_core::routing::CallState;
use peervoip_core::shaper::{shape_stream, AccessLink, BoxStream, LinkShape, ShapedUdp};
use peervoip_core::wire::{Kind, SignalEnvelope};
use peervoip_core::UtcMillis;
use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;
use tokio::net::{TcpListener, TcpStream, UdpSocket};
use tokio::sync::watch;
use tokio::task::JoinHandle;
use tokio_util::sync::CancellationToken;

use crate::config::DaemonConfig;
use crate::events::{ControlEvent, EventBus, EventKind};
use crate::link::Link;
use crate::media::{MediaParams, MediaSession};
use crate::transfer::{Incoming, Outgoing, TransferProgress};

const CONNECT_TIMEOUT: Duration = Duration::from_secs(5);
const STATS_INTERVAL: Duration = Duration::from_secs(1);

pub type SourceFactory = Arc<dyn Fn() -> Box<dyn AudioSource> + Send + Sync>;
pub type SinkFactory = Arc<dyn Fn() -> Box<dyn AudioSink> + Send + Sync>;

/// Knobs that only make sense in-process: emulated links and audio I/O.
#[derive(Clone)]
pub struct RuntimeOptions {
    pub signaling_shape: LinkShape,
    pub media_shape: LinkShape,
    pub peer_shape: LinkShape,
    /// When set, every socket shares this link and the per-class shapes
    /// above are ignored.
    pub access_link: Option<AccessLink>,
    pub source: SourceFactory,
    pub sink: SinkFactory,
}

impl Default for RuntimeOptions {
    fn default() -> Self {
        Self {
            signaling_shape: LinkShape::default(),
            media_shape: LinkShape::default(),
            peer_shape: LinkShape::default(),
            access_link: None,
            source: Arc::new(|| Box::new(SineSource::new(440.0, 8000))),
            sink: Arc::new(|| Box::new(NullSink)),
        }
    }
}

impl std::fmt::Debug for RuntimeOptions {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RuntimeOptions")
            .field("signaling_shape", &self.signaling_shape)
            .field("media_shape", &self.media_shape)
            .field("peer_shape", &self.peer_shape)
            .field("access_link", &self.access_link)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("{0}")]
    Protocol(ErrorCode),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Invalid(String),
}

impl EngineError {
    /// Stable machine-readable code for the control API.
    pub fn code(&self) -> String {
        match self {
            EngineError::Protocol(c) => c.as_str(),
            EngineError::Io(_) => "IO".into(),
            EngineError::Invalid(_) => "INVALID_PARAMS".into(),
        }
    }
}

impl From<ErrorCode> for EngineError {
    fn from(c: ErrorCode) -> Self {
        EngineError::Protocol(c)
    }
}

impl From<FileError> for EngineError {
    fn from(e: FileError) -> Self {
        match e {
            FileError::Io(io) => EngineError::Io(io),
            other => EngineError::Protocol(ErrorCode::from(&other)),
        }
    }
}

pub type Result<T, E = EngineError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Serialize)]
pub struct LoginInfo {
    pub username: String,
    pub token: String,
    pub roster: Vec<RosterItem>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ChatSent {
    pub message_id: u64,
    pub journal_seq: Option<u64>,
    pub via: &'static str,
}

#[derive(Debug, Clone, Serialize)]
pub struct CallSummary {
    pub call_id: u64,
    pub peer: String,
    pub stats: CallStats,
    #[serde(skip)]
    pub delay_samples: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct StatsReport {
    pub connected: bool,
    pub username: Option<String>,
    pub clock_offset_ms: f64,
    pub call: Option<Value>,
    pub last_call: Option<CallSummary>,
    pub transfers: Vec<TransferProgress>,
}

struct Account {
    username: String,
    password: String,
}

enum KeyExchange {
    Idle,
    Initiator(Initiator),
    Responder(Responder),
    Done,
}

pub(crate) struct Call {
    call_id: u64,
    peer: String,
    outgoing: bool,
    /// Daemon-side phase: invited, ringing, connecting, active.
    phase: &'static str,
    local: StreamParams,
    remote: Option<StreamParams>,
    ke: KeyExchange,
    keys: Option<SessionKeys>,
    plan: Option<MediaPlan>,
    media: Option<MediaSession>,
}

impl Call {
    fn describe(&self) -> Value {
        json!({
            "call_id": self.call_id,
            "peer": self.peer,
            "direction": if self.outgoing { "outgoing" } else { "incoming" },
            "state": self.phase,
            "relayed": self.plan.as_ref().map(|p| p.relayed),
            "route": self.plan.as_ref().map(|p| p.route.clone()),
            "stats": self.media.as_ref().map(|m| m.stats()),
        })
    }
}

#[derive(Default)]
pub(crate) struct State {
    account: Option<Account>,
    logged_in: bool,
    roster: BTreeMap<String, RosterItem>,
    call: Option<Call>,
    last_call: Option<CallSummary>,
    pub(crate) outgoing: HashMap<u64, Outgoing>,
    pub(crate) incoming: HashMap<u64, Incoming>,
    pub(crate) progress: BTreeMap<u64, TransferProgress>,
    peers: HashMap<String, Arc<Link>>,
    clock_offset_ms: f64,
}

pub struct Engine {
    pub config: DaemonConfig,
    pub(crate) options: RuntimeOptions,
    pub(crate) bus: EventBus,
    state: Mutex<State>,
    server: Mutex<Option<Arc<Link>>>,
    media_socket: Arc<ShapedUdp>,
    media_port: u16,
    p2p_port: u16,
    connected: watch::Sender<bool>,
    pub(crate) shutdown: CancellationToken,
    next_message_id: AtomicU64,
}

impl Engine {
    /// Binds the media and peer sockets and starts connecting to the server.
    pub async fn start(config: DaemonConfig, options: RuntimeOptions) -> Result<Arc<Self>> {
        config.validate().map_err(|e| EngineError::Invalid(e.to_string()))?;
        let media = bind_media(config.media_ports).await?;
        let media_port = media.local_addr()?.port();
        let p2p = TcpListener::bind(("0.0.0.0", config.p2p_port)).await?;
        let p2p_port = p2p.local_addr()?.port();
        let engine = Arc::new(Self {
            media_socket: Arc::new(match &options.access_link {
                Some(link) => link.udp(media),
                None => ShapedUdp::new(media, options.media_shape),
            }),
            config,
            options,
            bus: EventBus::new(),
            state: Mutex::new(State::default()),
            server: Mutex::new(None),
            media_port,
            p2p_port,
            connected: watch::channel(false).0,
            shutdown: CancellationToken::new(),
            next_message_id: AtomicU64::new(crypto::random_u32() as u64),
        });
        tracing::info!(media_port, p2p_port, server = %engine.config.server_addr(), "engine started");
        tokio::spawn(engine.clone().supervise());
        tokio::spawn(engine.clone().heartbeat());
        tokio::spawn(engine.clone().accept_peers(p2p));
        Ok(engine)
    }

    pub fn media_port(&self) -> u16 {
        self.media_port
    }

    pub fn p2p_port(&self) -> u16 {
        self.p2p_port
    }

    pub(crate) fn state(&self) -> MutexGuard<'_, State> {
        self.state.lock().expect("engine state lock")
    }

    pub(crate) fn publish(&self, kind: EventKind, data: Value) {
        self.bus.publish(kind, data);
    }

    pub fn is_connected(&self) -> bool {
        *self.connected.borrow()
    }

    /// Resolves once the server link is up (or immediately if it already is).
    pub async fn wait_connected(&self, within: Duration) -> bool {
        let mut rx = self.connected.subscribe();
        let ok = tokio::time::timeout(within, rx.wait_for(|c| *c)).await.is_ok();
        ok
    }

    pub fn username(&self) -> Option<String> {
        let st = self.state();
        st.logged_in.then(|| st.account.as_ref().map(|a| a.username.clone())).flatten()
    }

    pub(crate) fn me(&self) -> Result<String> {
        self.username().ok_or(EngineError::Protocol(ErrorCode::NotLoggedIn))
    }

    pub(crate) fn server_link(&self) -> Result<Arc<Link>> {
        self.server
            .lock()
            .expect("server slot lock")
            .clone()
            .filter(|l| !l.is_closed())
            .ok_or(EngineError::Protocol(ErrorCode::Disconnected))
    }

    /// Event stream whose first item is a snapshot of the current state.
    pub fn subscribe(&self) -> tokio::sync::mpsc::UnboundedReceiver<ControlEvent> {
        let st = self.state();
        let snapshot = json!({
            "connected": self.is_connected(),
            "username": st.logged_in.then(|| st.account.as_ref().map(|a| a.username.clone())).flatten(),
            "roster": st.roster.values().collect::<Vec<_>>(),
            "call": st.call.as_ref().map(Call::describe),
            "transfers": st.progress.values().collect::<Vec<_>>(),
        });
        self.bus.subscribe(snapshot)
    }

    // ---- server connection -------------------------------------------------

    async fn supervise(self: Arc<Self>) {
        let mut attempt = 0u32;
        loop {
            match self.connect_server().await {
                Ok((link, reader)) => {
                    attempt = 0;
                    *self.server.lock().expect("server slot lock") = Some(link.clone());
                    self.connected.send_replace(true);
                    tracing::info!(server = %self.config.server_addr(), "connected");
                    let reader = tokio::spawn(self.clone().read_loop(link.clone(), reader));
                    tokio::spawn(self.clone().on_connected(link.clone()));
                    tokio::select! {
                        _ = reader => {}
                        _ = self.shutdown.cancelled() => {
                            link.close();
                            return;
                        }
                    }
                    self.on_disconnected(&link);
                }
                Err(e) => tracing::debug!(error = %e, "server connect failed"),
            }
            let delay = self.config.backoff(attempt);
            attempt = attempt.saturating_add(1);
            tracing::debug!(?delay, attempt, "reconnecting");
            tokio::select! {
                _ = tokio::time::sleep(delay) => {}
                _ = self.shutdown.cancelled() => return,
            }
        }
    }

    async fn connect_server(&self) -> Result<(Arc<Link>, ConnReader)> {
        let addr = self.config.server_addr();
        let stream = tokio::time::timeout(CONNECT_TIMEOUT, TcpStream::connect(&addr))
            .await
            .map_err(|_| EngineError::Protocol(ErrorCode::Timeout))??;
        stream.set_nodelay(true)?;
        let conn = connect_secure(self.shaped(stream, self.options.signaling_shape))
            .await
            .map_err(|e| EngineError::Invalid(e.to_string()))?;
        Ok((Arc::new(Link::new("", conn.sender)), conn.reader))
    }

    async fn on_connected(self: Arc<Self>, link: Arc<Link>) {
        self.send_ping(&link);
        let creds = self
            .state()
            .account
            .as_ref()
            .map(|a| (a.username.clone(), a.password.clone()));
        let Some((user, password)) = creds else {
            return;
        };
        match self.login_on(&link, &user, &password).await {
            Ok(_) => {
                tracing::info!(user = %user, "session restored");
                self.publish(
                    EventKind::PresenceChanged,
                    json!({"username": user, "state": PresenceState::Online, "reconnected": true}),
                );
            }
            Err(e) => {
                tracing::warn!(error = %e, "re-login failed");
                self.publish(EventKind::Error, json!({"code": e.code(), "message": e.to_string(), "context": "re-login"}));
            }
        }
    }

    fn on_disconnected(self: &Arc<Self>, link: &Arc<Link>) {
        {
            let mut slot = self.server.lock().expect("server slot lock");
            if slot.as_ref().is_some_and(|l| Arc::ptr_eq(l, link)) {
                *slot = None;
            }
        }
        self.connected.send_replace(false);
        tracing::warn!("server connection lost");
        let user = {
            let mut st = self.state();
            st.logged_in = false;
            for item in st.roster.values_mut() {
                item.state = PresenceState::Offline;
            }
            st.account.as_ref().map(|a| a.username.clone())
        };
        if let Some(id) = self.current_call_id() {
            self.finish_call(id, "ended", Some(ErrorCode::Disconnected.as_str()));
        }
        self.fail_transfers_on(link, ErrorCode::Disconnected);
        if let Some(user) = user {
            self.publish(
                EventKind::PresenceChanged,
                json!({"username": user, "state": PresenceState::Offline, "reason": "server connection lost"}),
            );
        }
    }

    async fn read_loop(self: Arc<Self>, link: Arc<Link>, mut reader: ConnReader) {
        loop {
            match reader.next().await {
                Ok(Some(env)) => {
                    if let Some(env) = link.resolve(env) {
                        self.dispatch(&link, env);
                    }
                }
                Ok(None) => break,
                Err(e) => {
                    tracing::debug!(peer = %link.peer, error = %e, "connection read failed");
                    break;
                }
            }
        }
        link.close();
    }

    async fn heartbeat(self: Arc<Self>) {
        let mut tick = tokio::time::interval(self.config.heartbeat());
        tick.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        loop {
            tokio::select! {
                _ = tick.tick() => {}
                _ = self.shutdown.cancelled() => return,
            }
            let (Ok(link), Ok(me)) = (self.server_link(), self.me()) else {
                continue;
            };
            let _ = link.send(SignalEnvelope::new(Kind::Presence, me, "", 0, b"{}".to_vec()));
            self.send_ping(&link);
        }
    }

    fn send_ping(&self, link: &Link) {
        let body = to_body(&PingBody {
            t0: UtcMillis::now(),
            server_time: None,
        });
        let from = self.username().unwrap_or_default();
        let _ = link.send(SignalEnvelope::new(Kind::Ping, from, "", 0, body));
    }

    // ---- inbound ---------------------------------------------------------

    fn dispatch(self: &Arc<Self>, link: &Arc<Link>, env: SignalEnvelope) {
        if link.is_direct() {
            if env.from != link.peer {
                tracing::warn!(peer = %link.peer, claimed = %env.from, "dropping envelope with foreign sender");
                return;
            }
            if !matches!(
                env.kind,
                Kind::Chat | Kind::FileOffer | Kind::FileAccept | Kind::FileChunk | Kind::Ping | Kind::Pong | Kind::Error
            ) {
                return;
            }
        }
        tracing::trace!(kind = %env.kind, from = %env.from, "inbound");
        match env.kind {
            Kind::Presence => self.on_presence(&env),
            Kind::Chat => self.on_chat(link, &env),
            Kind::CallInvite if env.from.is_empty() => self.on_call_notice(&env),
            Kind::CallInvite => self.on_invite(&env),
            Kind::CallAccept | Kind::CallReject | Kind::CallEnd => self.on_call_notice(&env),
            Kind::KeyExchange => self.on_key_exchange(&env),
            Kind::FileOffer => self.on_file_offer(link, &env),
            Kind::FileAccept => self.on_file_accept(&env),
            Kind::FileChunk => self.on_file_chunk(&env),
            Kind::Ping => {
                if let Ok(p) = from_body::<PingBody>(&env.body) {
                    let pong = PingBody {
                        t0: p.t0,
                        server_time: Some(UtcMillis::now()),
                    };
                    let _ = link.send(SignalEnvelope::new(Kind::Pong, "", env.from.clone(), 0, to_body(&pong)));
                }
            }
            Kind::Pong if !link.is_direct() => {
                if let Ok(PingBody {
                    t0,
                    server_time: Some(st),
                }) = from_body::<PingBody>(&env.body)
                {
                    self.state().clock_offset_ms = midpoint_offset_ms(t0, st, UtcMillis::now());
                }
            }
            Kind::Error => {
                let body = from_body::<ErrorBody>(&env.body).ok();
                self.publish(
                    EventKind::Error,
                    json!({
                        "code": body.as_ref().map(|b| b.code.as_str()),
                        "message": body.as_ref().map(|b| b.message.clone()),
                        "from": env.from,
                    }),
                );
            }
            _ => {}
        }
    }

    fn on_presence(&self, env: &SignalEnvelope) {
        let Ok(n) = from_body::<PresenceNotice>(&env.body) else {
            return;
        };
        let mut st = self.state();
        let item = st.roster.entry(n.username.clone()).or_insert_with(|| RosterItem {
            username: n.username.clone(),
            state: n.state,
            last_heartbeat: UtcMillis::now(),
            p2p_addr: None,
        });
        item.state = n.state;
        if n.state == PresenceState::Online {
            item.last_heartbeat = UtcMillis::now();
        }
        // published under the state lock so a concurrent snapshot cannot miss it
        self.bus
            .publish(EventKind::PresenceChanged, json!({"username": n.username, "state": n.state}));
    }

    fn on_chat(&self, link: &Link, env: &SignalEnvelope) {
        let Ok(chat) = from_body::<ChatBody>(&env.body) else {
            return;
        };
        if link.is_direct() {
            let receipt = ChatReceipt {
                re: env.id,
                message_id: chat.message_id,
                journal_seq: None,
            };
            let _ = link.send(reply_to(env, &receipt));
        }
        self.publish(
            EventKind::MessageReceived,
            json!({
                "from": env.from,
                "to": env.to,
                "message_id": chat.message_id,
                "body": chat.body,
                "sent_at": env.sent_at,
                "via": if link.is_direct() { "direct" } else { "server" },
            }),
        );
    }

    // ---- accounts ----------------------------------------------------------

    pub async fn signup(&self, username: &str, password: &str, picture_b64: Option<String>) -> Result<()> {
        let link = self.server_link()?;
        let req = AccountRequest::Create {
            username: username.into(),
            password: password.into(),
            picture_b64,
        };
        link.request(SignalEnvelope::new(Kind::Signup, "", "", 0, to_body(&req)))
            .await?;
        Ok(())
    }

    pub async fn login(&self, username: &str, password: &str) -> Result<LoginInfo> {
        let link = self.server_link()?;
        self.login_on(&link, username, password).await
    }

    async fn login_on(&self, link: &Link, username: &str, password: &str) -> Result<LoginInfo> {
        let req = LoginRequest::Login {
            username: username.into(),
            password: password.into(),
            media_port: Some(self.media_port),
            p2p_port: Some(self.p2p_port),
        };
        let reply = link
            .request(SignalEnvelope::new(Kind::Login, "", "", 0, to_body(&req)))
            .await?;
        let reply: LoginReply = from_body(&reply.body)?;
        {
            let mut st = self.state();
            st.account = Some(Account {
                username: reply.username.clone(),
                password: password.into(),
            });
            st.logged_in = true;
        }
        let roster = self.roster().await?;
        Ok(LoginInfo {
            username: reply.username,
            token: reply.token,
            roster,
        })
    }

    pub async fn logout(self: &Arc<Self>) -> Result<()> {
        let me = self.me()?;
        if let Some(id) = self.current_call_id() {
            let _ = self.end_call(Some(id)).await;
        }
        let link = self.server_link()?;
        let res = link
            .request(SignalEnvelope::new(Kind::Login, me.clone(), "", 0, to_body(&LoginRequest::Logout)))
            .await;
        let peers: Vec<Arc<Link>> = {
            let mut st = self.state();
            st.account = None;
            st.logged_in = false;
            st.roster.clear();
            st.peers.drain().map(|(_, l)| l).collect()
        };
        for p in peers {
            p.close();
        }
        self.publish(
            EventKind::PresenceChanged,
            json!({"username": me, "state": PresenceState::Offline, "reason": "logout"}),
        );
        res.map(|_| ()).map_err(Into::into)
    }

    pub async fn roster(&self) -> Result<Vec<RosterItem>> {
        let me = self.me()?;
        let link = self.server_link()?;
        let reply = link
            .request(SignalEnvelope::new(Kind::Roster, me, "", 0, b"{}".to_vec()))
            .await?;
        let reply: RosterReply = from_body(&reply.body)?;
        let mut st = self.state();
        st.roster = reply.users.iter().map(|u| (u.username.clone(), u.clone())).collect();
        Ok(reply.users)
    }

    pub async fn set_picture(&self, picture_b64: String) -> Result<()> {
        let me = self.me()?;
        let link = self.server_link()?;
        link.request(SignalEnvelope::new(
            Kind::Signup,
            me,
            "",
            0,
            to_body(&AccountRequest::SetPicture { picture_b64 }),
        ))
        .await?;
        Ok(())
    }

    pub async fn get_picture(&self, username: &str) -> Result<Option<String>> {
        let me = self.me()?;
        let link = self.server_link()?;
        let reply = link
            .request(SignalEnvelope::new(
                Kind::Signup,
                me,
                "",
                0,
                to_body(&AccountRequest::GetPicture {
                    username: username.into(),
                }),
            ))
            .await?;
        Ok(from_body::<AccountReply>(&reply.body)?.picture_b64)
    }

    // ---- chat --------------------------------------------------------------

    pub async fn send_chat(self: &Arc<Self>, to: &str, body: &str) -> Result<ChatSent> {
        let me = self.me()?;
        peervoip_core::chat::check_body(body).map_err(|e| EngineError::Protocol(ErrorCode::from(&e)))?;
        let message_id = self.next_message_id.fetch_add(1, Ordering::Relaxed);
        let chat = ChatBody {
            message_id,
            body: body.into(),
        };
        let (link, via) = if self.config.monitored {
            (self.server_link()?, "server")
        } else {
            (self.peer_link(to).await?, "direct")
        };
        let reply = link
            .request(SignalEnvelope::new(Kind::Chat, me, to, 0, to_body(&chat)))
            .await?;
        let receipt: ChatReceipt = from_body(&reply.body)?;
        Ok(ChatSent {
            message_id: receipt.message_id,
            journal_seq: receipt.journal_seq,
            via,
        })
    }

    // ---- direct peer links -------------------------------------------------

    /// An open direct link to `user`, dialing its announced peer port if needed.
    pub(crate) async fn peer_link(self: &Arc<Self>, user: &str) -> Result<Arc<Link>> {
        let me = self.me()?;
        if let Some(l) = self.state().peers.get(user).filter(|l| !l.is_closed()).cloned() {
            return Ok(l);
        }
        let mut addr = self.state().roster.get(user).and_then(|r| r.p2p_addr);
        if addr.is_none() {
            self.roster().await?;
            addr = self
                .state()
                .roster
                .get(user)
                .filter(|r| r.state == PresenceState::Online)
                .and_then(|r| r.p2p_addr);
        }
        let addr = addr.ok_or(EngineError::Protocol(ErrorCode::RecipientOffline))?;
        let stream = tokio::time::timeout(CONNECT_TIMEOUT, TcpStream::connect(addr))
            .await
            .map_err(|_| EngineError::Protocol(ErrorCode::Timeout))?
            .map_err(|_| EngineError::Protocol(ErrorCode::RecipientOffline))?;
        stream.set_nodelay(true)?;
        let conn = connect_secure(self.shaped(stream, self.options.peer_shape))
            .await
            .map_err(|_| EngineError::Protocol(ErrorCode::RecipientOffline))?;
        let link = Arc::new(Link::new(user, conn.sender));
        link.send(SignalEnvelope::new(Kind::Presence, me, user, 0, b"{}".to_vec()))?;
        self.state().peers.insert(user.to_string(), link.clone());
        tracing::debug!(peer = %user, %addr, "direct link dialed");
        tokio::spawn(self.clone().run_peer(link.clone(), conn.reader));
        Ok(link)
    }

    async fn accept_peers(self: Arc<Self>, listener: TcpListener) {
        loop {
            let (stream, addr) = tokio::select! {
                r = listener.accept() => match r {
                    Ok(x) => x,
                    Err(e) => {
                        tracing::warn!(error = %e, "peer accept failed");
                        continue;
                    }
                },
                _ = self.shutdown.cancelled() => return,
            };
            let me = self.clone();
            tokio::spawn(async move {
                if let Err(e) = me.admit_peer(stream, addr).await {
                    tracing::debug!(%addr, error = %e, "peer link refused");
                }
            });
        }
    }

    fn shaped(&self, stream: TcpStream, shape: LinkShape) -> BoxStream {
        match &self.options.access_link {
            Some(link) => link.stream(stream),
            None => shape_stream(stream, shape),
        }
    }

    async fn admit_peer(self: Arc<Self>, stream: TcpStream, addr: SocketAddr) -> Result<()> {
        stream.set_nodelay(true)?;
        let mut conn = accept_secure(self.shaped(stream, self.options.peer_shape))
            .await
            .map_err(|e| EngineError::Invalid(e.to_string()))?;
        let hello = tokio::time::timeout(CONNECT_TIMEOUT, conn.reader.next())
            .await
            .map_err(|_| EngineError::Protocol(ErrorCode::Timeout))?
            .map_err(|e| EngineError::Invalid(e.to_string()))?
            .ok_or(EngineError::Protocol(ErrorCode::Disconnected))?;
        let me = self.me()?;
        if hello.kind != Kind::Presence || hello.from.is_empty() || hello.to != me {
            return Err(EngineError::Protocol(ErrorCode::Unauthorized));
        }
        tracing::debug!(peer = %hello.from, %addr, "direct link accepted");
        let link = Arc::new(Link::new(hello.from.clone(), conn.sender));
        self.state().peers.insert(hello.from, link.clone());
        self.run_peer(link, conn.reader).await;
        Ok(())
    }

    async fn run_peer(self: Arc<Self>, link: Arc<Link>, reader: ConnReader) {
        let done = tokio::spawn(self.clone().read_loop(link.clone(), reader));
        tokio::select! {
            _ = done => {}
            _ = self.shutdown.cancelled() => link.close(),
        }
        {
            let mut st = self.state();
            if st.peers.get(&link.peer).is_some_and(|l| Arc::ptr_eq(l, &link)) {
                st.peers.remove(&link.peer);
            }
        }
        self.fail_transfers_on(&link, ErrorCode::PeerDisconnected);
    }

    // ---- calls ---------------------------------------------------------------

    pub fn current_call_id(&self) -> Option<u64> {
        self.state().call.as_ref().map(|c| c.call_id)
    }

    pub fn last_call(&self) -> Option<CallSummary> {
        self.state().last_call.clone()
    }

    pub fn call_stats(&self) -> Option<CallStats> {
        self.state().call.as_ref().and_then(|c| c.media.as_ref().map(|m| m.stats()))
    }

    pub async fn start_call(self: &Arc<Self>, to: &str) -> Result<u64> {
        let me = self.me()?;
        let local = StreamParams::random();
        {
            let mut st = self.state();
            if st.call.is_some() {
                return Err(ErrorCode::CallerBusy.into());
            }
            // call id 0 until the server assigns one
            st.call = Some(Call {
                call_id: 0,
                peer: to.into(),
                outgoing: true,
                phase: "invited",
                local,
                remote: None,
                ke: KeyExchange::Idle,
                keys: None,
                plan: None,
                media: None,
            });
        }
        let invite = InviteBody {
            call_id: 0,
            stream: local.into(),
            suites: vec![CipherSuite::ChaCha20Poly1305.id(), CipherSuite::Aes256Gcm.id()],
            relay_media: self.config.relay_media,
        };
        let res = async {
            let link = self.server_link()?;
            let reply = link
                .request(SignalEnvelope::new(Kind::CallInvite, me, to, 0, to_body(&invite)))
                .await?;
            Ok::<_, EngineError>(from_body::<CallNotice>(&reply.body)?)
        }
        .await;
        let mut st = self.state();
        match res {
            Ok(n) => {
                let mut announce = false;
                if let Some(c) = st.call.as_mut().filter(|c| c.outgoing && (c.call_id == 0 || c.call_id == n.call_id)) {
                    c.call_id = n.call_id;
                    announce = c.phase == "invited";
                }
                if announce {
                    self.bus.publish(
                        EventKind::CallState,
                        json!({"call_id": n.call_id, "peer": to, "state": "invited"}),
                    );
                }
                Ok(n.call_id)
            }
            Err(e) => {
                if st.call.as_ref().is_some_and(|c| c.outgoing && c.call_id == 0) {
                    st.call = None;
                }
                Err(e)
            }
        }
    }

    pub async fn accept_call(self: &Arc<Self>, call_id: u64) -> Result<()> {
        let me = self.me()?;
        let local = {
            let st = self.state();
            let c = st
                .call
                .as_ref()
                .filter(|c| c.call_id == call_id && !c.outgoing)
                .ok_or(ErrorCode::UnknownCall)?;
            c.local
        };
        let ctl = CallControl {
            call_id,
            stream: Some(local.into()),
            reason: None,
        };
        let link = self.server_link()?;
        let reply = link
            .request(SignalEnvelope::new(Kind::CallAccept, me, "", 0, to_body(&ctl)))
            .await?;
        let n: CallNotice = from_body(&reply.body)?;
        let mut st = self.state();
        if let Some(c) = st.call.as_mut().filter(|c| c.call_id == call_id) {
            if c.phase == "ringing" {
                c.phase = "connecting";
            }
            if c.plan.is_none() {
                c.plan = n.media;
            }
            let peer = c.peer.clone();
            self.bus.publish(
                EventKind::CallState,
                json!({"call_id": call_id, "peer": peer, "state": "connecting"}),
            );
        }
        Ok(())
    }

    pub async fn reject_call(self: &Arc<Self>, call_id: u64) -> Result<()> {
        let me = self.me()?;
        let ctl = CallControl {
            call_id,
            stream: None,
            reason: Some("declined".into()),
        };
        let link = self.server_link()?;
        let res = link
            .request(SignalEnvelope::new(Kind::CallReject, me, "", 0, to_body(&ctl)))
            .await;
        self.finish_call(call_id, "rejected", Some("declined".into()));
        res.map(|_| ()).map_err(Into::into)
    }

    /// Hangs up `call_id` (or the current call). Returns the final counters.
    pub async fn end_call(self: &Arc<Self>, call_id: Option<u64>) -> Result<Option<CallSummary>> {
        let me = self.me()?;
        let call_id = match call_id.or_else(|| self.current_call_id()) {
            Some(id) if self.current_call_id() == Some(id) => id,
            _ => return Err(ErrorCode::NoActiveCall.into()),
        };
        let ctl = CallControl {
            call_id,
            stream: None,
            reason: None,
        };
        let res = match self.server_link() {
            Ok(link) => link
                .request(SignalEnvelope::new(Kind::CallEnd, me, "", 0, to_body(&ctl)))
                .await
                .map(|_| ()),
            Err(_) => Err(ErrorCode::Disconnected),
        };
        if let Err(code) = res {
            tracing::debug!(call_id, %code, "server did not confirm hangup");
        }
        Ok(self.finish_call(call_id, "ended", Some("hangup".into())))
    }

    fn on_invite(self: &Arc<Self>, env: &SignalEnvelope) {
        let Ok(invite) = from_body::<InviteBody>(&env.body) else {
            return;
        };
        let mut st = self.state();
        if st.call.is_some() {
            drop(st);
            let ctl = CallControl {
                call_id: invite.call_id,
                stream: None,
                reason: Some("busy".into()),
            };
            if let (Ok(link), Ok(me)) = (self.server_link(), self.me()) {
                let _ = link.send(SignalEnvelope::new(Kind::CallReject, me, "", 0, to_body(&ctl)));
            }
            return;
        }
        st.call = Some(Call {
            call_id: invite.call_id,
            peer: env.from.clone(),
            outgoing: false,
            phase: "ringing",
            local: StreamParams::random(),
            remote: Some(invite.stream.into()),
            ke: KeyExchange::Idle,
            keys: None,
            plan: None,
            media: None,
        });
        self.bus.publish(
            EventKind::CallIncoming,
            json!({"call_id": invite.call_id, "from": env.from, "relay_media": invite.relay_media}),
        );
    }

    fn on_call_notice(self: &Arc<Self>, env: &SignalEnvelope) {
        let Ok(n) = from_body::<CallNotice>(&env.body) else {
            return;
        };
        match (env.kind, n.state) {
            (Kind::CallInvite, CallState::Ringing) => {
                let mut st = self.state();
                let Some(c) = st.call.as_mut().filter(|c| c.outgoing && (c.call_id == 0 || c.call_id == n.call_id))
                else {
                    return;
                };
                c.call_id = n.call_id;
                if c.phase == "invited" {
                    c.phase = "ringing";
                    let peer = c.peer.clone();
                    self.bus.publish(
                        EventKind::CallState,
                        json!({"call_id": n.call_id, "peer": peer, "state": "ringing"}),
                    );
                }
            }
            (Kind::CallAccept, CallState::Ringing) => self.begin_key_exchange(n),
            (Kind::CallAccept, CallState::Active) => self.activate_call(n),
            (Kind::CallReject, _) => {
                self.finish_call(n.call_id, "rejected", n.reason);
            }
            (Kind::CallEnd, _) => {
                self.finish_call(n.call_id, "ended", n.reason);
            }
            _ => {}
        }
    }

    /// Caller side: the callee accepted, so open the key exchange.
    fn begin_key_exchange(self: &Arc<Self>, n: CallNotice) {
        let Some(plan) = n.media else {
            return;
        };
        let mut st = self.state();
        let Some(c) = st.call.as_mut().filter(|c| c.call_id == n.call_id) else {
            return;
        };
        c.remote = Some(plan.peer_stream.into());
        c.plan = Some(plan);
        if !c.outgoing || !matches!(c.ke, KeyExchange::Idle) {
            return;
        }
        c.phase = "connecting";
        let peer = c.peer.clone();
        match Initiator::start(n.call_id, CipherSuite::DEFAULT) {
            Ok((init, ke1)) => {
                c.ke = KeyExchange::Initiator(init);
                self.bus.publish(
                    EventKind::CallState,
                    json!({"call_id": n.call_id, "peer": peer, "state": "connecting"}),
                );
                drop(st);
                self.send_key_exchange(&peer, ke1.encode());
            }
            Err(e) => {
                drop(st);
                tracing::error!(error = %e, "key exchange start failed");
                self.abort_call(n.call_id, ErrorCode::Internal);
            }
        }
    }

    fn send_key_exchange(&self, to: &str, body: Vec<u8>) {
        if let (Ok(link), Ok(me)) = (self.server_link(), self.me()) {
            let _ = link.send(SignalEnvelope::new(Kind::KeyExchange, me, to, 0, body));
        }
    }

    fn on_key_exchange(self: &Arc<Self>, env: &SignalEnvelope) {
        let mut st = self.state();
        let Some(c) = st.call.as_mut().filter(|c| c.peer == env.from) else {
            return;
        };
        let call_id = c.call_id;
        let msg = KeyExchangeMessage::decode(&env.body);
        let step = match (std::mem::replace(&mut c.ke, KeyExchange::Done), msg) {
            (_, Err(e)) => Err(e),
            (KeyExchange::Idle, Ok(ke1)) if !c.outgoing => {
                let suites = [CipherSuite::ChaCha20Poly1305, CipherSuite::Aes256Gcm];
                Responder::respond(call_id, &ke1, &suites).map(|(r, ke2)| {
                    c.ke = KeyExchange::Responder(r);
                    Some((c.peer.clone(), ke2))
                })
            }
            (KeyExchange::Initiator(init), Ok(ke2)) => init.finish(&ke2).map(|(keys, ke3)| {
                c.keys = Some(keys);
                Some((c.peer.clone(), ke3))
            }),
            (KeyExchange::Responder(resp), Ok(ke3)) => resp.finish(&ke3).map(|(keys, ke4)| {
                c.keys = Some(keys);
                // the callee's confirmation goes to the server, not the peer
                Some((String::new(), ke4))
            }),
            (other, Ok(_)) => {
                c.ke = other;
                Ok(None)
            }
        };
        drop(st);
        match step {
            Ok(Some((to, msg))) => self.send_key_exchange(&to, msg.encode()),
            Ok(None) => {}
            Err(e) => {
                tracing::warn!(call_id, error = %e, "key exchange failed");
                self.abort_call(call_id, ErrorCode::ExchangeTampered);
            }
        }
    }

    fn activate_call(self: &Arc<Self>, n: CallNotice) {
        let offset = self.state().clock_offset_ms;
        let mut st = self.state();
        let Some(c) = st.call.as_mut().filter(|c| c.call_id == n.call_id) else {
            return;
        };
        if let Some(plan) = n.media {
            c.remote = Some(plan.peer_stream.into());
            c.plan = Some(plan);
        }
        let (Some(keys), Some(remote), Some(plan)) = (c.keys.clone(), c.remote, c.plan.clone()) else {
            drop(st);
            tracing::warn!(call_id = n.call_id, "activation without keys");
            self.abort_call(n.call_id, ErrorCode::ExchangeTampered);
            return;
        };
        let epoch = n.media_epoch.map(|e| epoch_instant(e, offset)).unwrap_or_else(tokio::time::Instant::now);
        c.media = Some(MediaSession::start(MediaParams {
            socket: self.media_socket.clone(),
            keys,
            local: c.local,
            remote,
            send_to: plan.send_to,
            epoch,
            depth: self.config.jitter_depth,
            source: (self.options.source)(),
            sink: (self.options.sink)(),
        }));
        c.phase = "active";
        tracing::info!(call_id = n.call_id, peer = %c.peer, relayed = plan.relayed, send_to = %plan.send_to, "call active");
        self.bus.publish(
            EventKind::CallState,
            json!({
                "call_id": n.call_id,
                "peer": c.peer,
                "state": "active",
                "relayed": plan.relayed,
                "route": plan.route,
            }),
        );
        drop(st);
        tokio::spawn(self.clone().stats_ticker(n.call_id));
    }

    async fn stats_ticker(self: Arc<Self>, call_id: u64) {
        let mut tick = tokio::time::interval_at(tokio::time::Instant::now() + STATS_INTERVAL, STATS_INTERVAL);
        loop {
            tokio::select! {
                _ = tick.tick() => {}
                _ = self.shutdown.cancelled() => return,
            }
            let st = self.state();
            let Some(stats) = st
                .call
                .as_ref()
                .filter(|c| c.call_id == call_id)
                .and_then(|c| c.media.as_ref().map(|m| m.stats()))
            else {
                return;
            };
            self.bus
                .publish(EventKind::CallStats, json!({"call_id": call_id, "stats": stats}));
        }
    }

    /// Ends the call on our side after a local failure and tells the server.
    fn abort_call(self: &Arc<Self>, call_id: u64, code: ErrorCode) {
        self.publish(
            EventKind::Error,
            json!({"code": code.as_str(), "message": code.message(), "call_id": call_id}),
        );
        let ctl = CallControl {
            call_id,
            stream: None,
            reason: Some(code.as_str()),
        };
        if let (Ok(link), Ok(me)) = (self.server_link(), self.me()) {
            let _ = link.send(SignalEnvelope::new(Kind::CallEnd, me, "", 0, to_body(&ctl)));
        }
        self.finish_call(call_id, "ended", Some(code.as_str()));
    }

    /// Drops local call state once. Later calls for the same id are no-ops.
    fn finish_call(&self, call_id: u64, state: &str, reason: Option<String>) -> Option<CallSummary> {
        let mut st = self.state();
        let call = st.call.take_if(|c| c.call_id == call_id)?;
        let (stats, delay_samples) = match call.media {
            Some(m) => m.stop(),
            None => (CallStats::default(), Vec::new()),
        };
        let summary = CallSummary {
            call_id,
            peer: call.peer.clone(),
            stats,
            delay_samples,
        };
        st.last_call = Some(summary.clone());
        tracing::info!(call_id, state, reason = reason.as_deref().unwrap_or(""), "call finished");
        self.bus.publish(
            EventKind::CallState,
            json!({
                "call_id": call_id,
                "peer": call.peer,
                "state": state,
                "reason": reason,
                "stats": summary.stats,
            }),
        );
        Some(summary)
    }

    // ---- reports -------------------------------------------------------------

    pub fn stats(&self) -> StatsReport {
        let st = self.state();
        StatsReport {
            connected: self.is_connected(),
            username: st.logged_in.then(|| st.account.as_ref().map(|a| a.username.clone())).flatten(),
            clock_offset_ms: st.clock_offset_ms,
            call: st.call.as_ref().map(Call::describe),
            last_call: st.last_call.clone(),
            transfers: st.progress.values().cloned().collect(),
        }
    }

    /// Ends any call with CALL_END, then stops every task and connection.
    pub async fn shutdown(self: &Arc<Self>) {
        if let Some(id) = self.current_call_id() {
            let _ = tokio::time::timeout(Duration::from_secs(2), self.end_call(Some(id))).await;
        }
        self.shutdown.cancel();
        let server = self.server.lock().expect("server slot lock").take();
        if let Some(l) = server {
            l.close();
        }
        let peers: Vec<Arc<Link>> = self.state().peers.drain().map(|(_, l)| l).collect();
        for p in peers {
            p.close();
        }
        self.connected.send_replace(false);
    }

    pub fn is_shut_down(&self) -> bool {
        self.shutdown.is_cancelled()
    }

    pub(crate) fn reply_error(&self, link: &Link, env: &SignalEnvelope, code: ErrorCode) {
        let _ = link.send(error_reply(env, code));
    }

    pub(crate) fn download_dir(&self) -> PathBuf {
        self.config.download_dir.clone()
    }

    /// Spawned helper for fire-and-forget work tied to the engine lifetime.
    pub(crate) fn spawn<F>(&self, fut: F) -> JoinHandle<()>
    where
        F: std::future::Future<Output = ()> + Send + 'static,
    {
        let stop = self.shutdown.clone();
        tokio::spawn(async move {
            tokio::select! {
                _ = fut => {}
                _ = stop.cancelled() => {}
            }
        })
    }
}

/// Maps a server-clock instant to the local monotonic clock.
fn epoch_instant(server_epoch: UtcMillis, offset_ms: f64) -> tokio::time::Instant {
    let local_ms = server_epoch.0 as f64 - offset_ms;
    let delta_ms = local_ms - UtcMillis::now().0 as f64;
    let now = tokio::time::Instant::now();
    if delta_ms >= 0.0 {
        now + Duration::from_secs_f64(delta_ms / 1000.0)
    } else {
        now.checked_sub(Duration::from_secs_f64(-delta_ms / 1000.0)).unwrap_or(now)
    }
}

async fn bind_media(range: [u16; 2]) -> std::io::Result<UdpSocket> {
    let [lo, hi] = range;
    if lo == 0 {
        return UdpSocket::bind(("0.0.0.0", 0)).await;
    }
    let mut last = None;
    for port in lo..=hi {
        match UdpSocket::bind(("0.0.0.0", port)).await {
            Ok(s) => return Ok(s),
            Err(e) => last = Some(e),
        }
    }
    Err(last.unwrap_or_else(|| std::io::Error::other("empty media port range")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epoch_mapping_applies_offset() {
        let now = UtcMillis::now();
        let base = tokio::time::Instant::now();
        // server runs 500 ms ahead; its "now + 100" is our "now - 400"
        let at = epoch_instant(UtcMillis(now.0 + 100), 500.0);
        let d = base.saturating_duration_since(at).as_millis() as i64;
        assert!((395..=410).contains(&d), "{d}");
    }

    #[tokio::test]
    async fn media_range_skips_busy_ports() {
        let first = bind_media([0, 0]).await.unwrap();
        let p = first.local_addr().unwrap().port();
        if p < u16::MAX {
            let s = bind_media([p, p + 1]).await;
            if let Ok(s) = s {
                assert_eq!(s.local_addr().unwrap().port(), p + 1);
            }
        }
    }
}

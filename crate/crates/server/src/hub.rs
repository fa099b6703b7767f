//! Shared server state and the per-envelope handlers.

use std::collections::HashMap;
use std::net::{IpAddr, SocketAddr};
use std::ops::ControlFlow;
use std::sync::atomic::{AtomicBool, AtomicI64, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use peervoip_core::auth::{Directory, PresenceState, SessionToken};
use peervoip_core::chat::{check_body, Journal, JournalEntry, JournalFilter};
use peervoip_core::conn::ConnSender;
use peervoip_core::files::{FileChunk, FileManifest, CHUNK_HEADER_LEN, FLAG_FINAL, RELAY_WINDOW_BYTES};
use peervoip_core::protocol::{
    error_reply, from_body, reply_to, to_body, AccountReply, AccountRequest, Ack, CallControl, CallNotice, ChatBody,
    ChatReceipt, ErrorCode, FileAcceptBody, InviteBody, LoginReply, LoginRequest, MediaPlan, PingBody, PresenceNotice,
    RosterItem, RosterReply, StreamParamsBody,
};
use peervoip_core::routing::{CallEvent, CallSession, CallState, ProxyGraph};
use peervoip_core::wire::{Kind, SequenceGuard, SignalEnvelope};
use peervoip_core::{Clock, SystemClock};
use rand::Rng;
use serde::Serialize;
use tokio::sync::{OwnedSemaphorePermit, Semaphore};
use tokio_util::sync::CancellationToken;

use crate::config::ServerConfig;
use crate::media_relay::{start_relay, RelayCounters, RelayHandle};

type HandlerResult = Result<(), ErrorCode>;

const NO_FAULT: i64 = -1;
/// Ended calls kept for the admin view.
const CALL_HISTORY: usize = 1024;

/// Test hooks. All are one-shot and off by default.
#[derive(Debug)]
pub struct Faults {
    /// Stop the server right after the next journal append, before delivery.
    pub crash_after_journal: AtomicBool,
    /// Corrupt the n-th relayed key-exchange message of a call (0 = first).
    pub tamper_key_exchange: AtomicI64,
    /// Flip one payload byte of the relayed data chunk with this index.
    pub corrupt_chunk: AtomicI64,
}

impl Default for Faults {
    fn default() -> Self {
        Self {
            crash_after_journal: AtomicBool::new(false),
            tamper_key_exchange: AtomicI64::new(NO_FAULT),
            corrupt_chunk: AtomicI64::new(NO_FAULT),
        }
    }
}

#[derive(Debug, Default)]
pub struct Metrics {
    received: [AtomicU64; 16],
    /// Chunk payload bytes accepted from senders but not yet written to recipients.
    pub relay_in_flight: AtomicU64,
    pub relay_high_water: AtomicU64,
    /// Largest in-flight figure seen for any single transfer.
    pub transfer_high_water: AtomicU64,
    pub media: Arc<RelayCounters>,
}

impl Metrics {
    fn count(&self, kind: Kind) {
        self.received[kind.code() as usize - 1].fetch_add(1, Ordering::Relaxed);
    }

    pub fn received(&self, kind: Kind) -> u64 {
        self.received[kind.code() as usize - 1].load(Ordering::Relaxed)
    }
}

#[derive(Debug, Serialize)]
pub struct MetricsSnapshot {
    pub received: HashMap<&'static str, u64>,
    pub relay_in_flight_bytes: u64,
    pub relay_high_water_bytes: u64,
    pub transfer_high_water_bytes: u64,
    pub active_transfers: usize,
    pub live_calls: usize,
    pub online_users: usize,
    pub media_forwarded: u64,
}

struct Client {
    sender: ConnSender,
    token: SessionToken,
    kick: CancellationToken,
    ip: IpAddr,
    media_port: Option<u16>,
    p2p_port: Option<u16>,
}

struct CallEntry {
    session: CallSession,
    caller_stream: StreamParamsBody,
    callee_stream: Option<StreamParamsBody>,
    relay_requested: bool,
    relay: Option<RelayHandle>,
    plans: Option<(MediaPlan, MediaPlan)>,
    ke_relayed: i64,
}

#[derive(Default)]
struct CallTable {
    entries: HashMap<u64, CallEntry>,
    live: HashMap<String, u64>,
    finished: std::collections::VecDeque<u64>,
}

impl CallTable {
    fn finish(&mut self, call_id: u64) {
        if let Some(e) = self.entries.get_mut(&call_id) {
            e.relay = None;
            for u in [&e.session.caller, &e.session.callee] {
                if self.live.get(u) == Some(&call_id) {
                    self.live.remove(u);
                }
            }
        }
        self.finished.push_back(call_id);
        while self.finished.len() > CALL_HISTORY {
            if let Some(old) = self.finished.pop_front() {
                self.entries.remove(&old);
            }
        }
    }
}

struct RelayTransfer {
    manifest: FileManifest,
    sender: String,
    recipient: String,
    accepted: AtomicBool,
    /// Final chunk relayed; kept until the recipient's verdict passes back.
    finished: AtomicBool,
    window: Arc<Semaphore>,
    in_flight: AtomicU64,
    high_water: AtomicU64,
}

/// Chunk bytes held by the server; released when the frame hits the socket.
struct InFlight {
    _permit: OwnedSemaphorePermit,
    len: u64,
    transfer: Arc<RelayTransfer>,
    metrics: Arc<Metrics>,
}

impl Drop for InFlight {
    fn drop(&mut self) {
        self.transfer.in_flight.fetch_sub(self.len, Ordering::SeqCst);
        self.metrics.relay_in_flight.fetch_sub(self.len, Ordering::SeqCst);
    }
}

/// Authenticated identity bound to one connection.
#[derive(Debug, Clone)]
pub struct Session {
    pub user: String,
    pub token: SessionToken,
}

/// Per-connection state owned by its reader task.
pub struct ConnCtx {
    pub sender: ConnSender,
    pub peer: SocketAddr,
    pub local: SocketAddr,
    pub session: Option<Session>,
    pub kick: CancellationToken,
    guard: SequenceGuard,
}

impl ConnCtx {
    pub fn new(sender: ConnSender, peer: SocketAddr, local: SocketAddr) -> Self {
        Self {
            sender,
            peer,
            local,
            session: None,
            kick: CancellationToken::new(),
            guard: SequenceGuard::default(),
        }
    }
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

pub struct Hub {
    pub config: ServerConfig,
    pub directory: Arc<Directory>,
    pub faults: Faults,
    pub metrics: Arc<Metrics>,
    pub shutdown: CancellationToken,
    clock: Arc<dyn Clock>,
    clients: Mutex<HashMap<String, Client>>,
    calls: Mutex<CallTable>,
    transfers: Mutex<HashMap<u64, Arc<RelayTransfer>>>,
    journal: Mutex<Journal>,
    graph: Mutex<ProxyGraph>,
}

impl Hub {
    pub fn new(config: ServerConfig, directory: Arc<Directory>, journal: Journal, graph: ProxyGraph) -> Self {
        Self {
            config,
            directory,
            faults: Faults::default(),
            metrics: Arc::default(),
            shutdown: CancellationToken::new(),
            clock: Arc::new(SystemClock),
            clients: Mutex::default(),
            calls: Mutex::default(),
            transfers: Mutex::default(),
            journal: Mutex::new(journal),
            graph: Mutex::new(graph),
        }
    }

    fn proxy_id(&self) -> Option<&str> {
        self.config.proxy.as_ref().map(|p| p.id.as_str())
    }

    /// Simulated process death: every connection drops without cleanup.
    pub fn crash(&self) {
        tracing::warn!("fault hook: stopping server");
        self.shutdown.cancel();
    }

    pub fn graph(&self) -> MutexGuard<'_, ProxyGraph> {
        lock(&self.graph)
    }

    pub fn query_journal(&self, filter: &JournalFilter) -> Result<Vec<JournalEntry>, ErrorCode> {
        // holding the writer lock keeps readers off a half-written line
        let j = lock(&self.journal);
        j.query(filter).map_err(|e| {
            tracing::error!(error = %e, "journal query failed");
            ErrorCode::Internal
        })
    }

    pub fn call_sessions(&self) -> Vec<CallSession> {
        let calls = lock(&self.calls);
        let mut out: Vec<CallSession> = calls.entries.values().map(|e| e.session.clone()).collect();
        out.sort_by_key(|s| s.started_at);
        out
    }

    pub fn call_session(&self, call_id: u64) -> Option<CallSession> {
        lock(&self.calls).entries.get(&call_id).map(|e| e.session.clone())
    }

    pub fn metrics_snapshot(&self) -> MetricsSnapshot {
        let m = &self.metrics;
        MetricsSnapshot {
            received: Kind::ALL.iter().map(|k| (k.name(), m.received(*k))).collect(),
            relay_in_flight_bytes: m.relay_in_flight.load(Ordering::SeqCst),
            relay_high_water_bytes: m.relay_high_water.load(Ordering::SeqCst),
            transfer_high_water_bytes: m.transfer_high_water.load(Ordering::SeqCst),
            active_transfers: lock(&self.transfers).len(),
            live_calls: lock(&self.calls).live.len() / 2,
            online_users: lock(&self.clients).len(),
            media_forwarded: m.media.forwarded.load(Ordering::Relaxed),
        }
    }

    /// Whether `token` grants admin access: the static admin token, or a
    /// live session of a configured admin user.
    pub fn is_admin(&self, token: &str) -> bool {
        if let Some(t) = &self.config.admin_token {
            if constant_time_eq(t.as_bytes(), token.as_bytes()) {
                return true;
            }
        }
        SessionToken::from_hex(token)
            .and_then(|t| self.directory.authenticate(&t).ok())
            .is_some_and(|u| self.config.admins.contains(&u))
    }

    fn sender_of(&self, user: &str) -> Option<ConnSender> {
        lock(&self.clients).get(user).map(|c| c.sender.clone())
    }

    fn notify(&self, user: &str, kind: Kind, body: Vec<u8>) {
        if let Some(s) = self.sender_of(user) {
            let _ = s.send(SignalEnvelope::new(kind, "", user, 0, body));
        }
    }

    fn broadcast_presence(&self, user: &str, state: PresenceState) {
        let body = to_body(&PresenceNotice {
            username: user.to_string(),
            state,
        });
        for (name, c) in lock(&self.clients).iter() {
            if name != user {
                let _ = c.sender.send(SignalEnvelope::new(Kind::Presence, "", name.clone(), 0, body.clone()));
            }
        }
    }

    /// Handles one inbound envelope. `Break` closes the connection.
    pub async fn handle(self: &Arc<Self>, ctx: &mut ConnCtx, mut env: SignalEnvelope) -> ControlFlow<()> {
        self.metrics.count(env.kind);
        if ctx.guard.check(&env).is_err() {
            tracing::warn!(peer = %ctx.peer, kind = %env.kind, id = env.id, "replayed or reordered envelope id");
            let _ = ctx.sender.send(error_reply(&env, ErrorCode::Malformed));
            return ControlFlow::Break(());
        }
        if let Some(s) = &ctx.session {
            if !env.from.is_empty() && env.from != s.user {
                let _ = ctx.sender.send(error_reply(&env, ErrorCode::Unauthorized));
                return ControlFlow::Continue(());
            }
            env.from = s.user.clone();
        }
        tracing::debug!(kind = %env.kind, from = %env.from, to = %env.to, id = env.id, "envelope");
        let res = match env.kind {
            Kind::Signup => self.on_signup(ctx, &env).await,
            Kind::Login => self.on_login(ctx, &env).await,
            Kind::Ping => self.on_ping(ctx, &env),
            Kind::Pong => Ok(()),
            _ if ctx.session.is_none() => Err(ErrorCode::NotLoggedIn),
            Kind::Presence => self.on_heartbeat(ctx),
            Kind::Roster => self.on_roster(ctx, &env),
            Kind::Chat => self.on_chat(ctx, &env),
            Kind::CallInvite => self.on_invite(ctx, &env),
            Kind::CallAccept => self.on_accept(ctx, &env).await,
            Kind::CallReject => self.on_reject(ctx, &env),
            Kind::CallEnd => self.on_end(ctx, &env),
            Kind::KeyExchange => self.on_key_exchange(ctx, env.clone()),
            Kind::FileOffer => self.on_file_offer(ctx, &env),
            Kind::FileAccept => self.on_file_accept(ctx, &env),
            Kind::FileChunk => self.on_file_chunk(ctx, env.clone()).await,
            Kind::Error => self.on_error_relay(&env),
        };
        if let Err(code) = res {
            if self.shutdown.is_cancelled() {
                return ControlFlow::Break(());
            }
            let _ = ctx.sender.send(error_reply(&env, code));
        }
        if self.shutdown.is_cancelled() {
            ControlFlow::Break(())
        } else {
            ControlFlow::Continue(())
        }
    }

    fn session<'a>(&self, ctx: &'a ConnCtx) -> Result<&'a Session, ErrorCode> {
        ctx.session.as_ref().ok_or(ErrorCode::NotLoggedIn)
    }

    async fn on_signup(&self, ctx: &mut ConnCtx, env: &SignalEnvelope) -> HandlerResult {
        let reply = match from_body::<AccountRequest>(&env.body)? {
            AccountRequest::Create {
                username,
                password,
                picture_b64,
            } => {
                let picture = picture_b64
                    .map(|b| B64.decode(b))
                    .transpose()
                    .map_err(|_| ErrorCode::Malformed)?;
                let dir = self.directory.clone();
                let name = username.clone();
                tokio::task::spawn_blocking(move || dir.signup(&name, &password, picture))
                    .await
                    .map_err(|_| ErrorCode::Internal)?
                    .map_err(|e| ErrorCode::from(&e))?;
                tracing::info!(user = %username, "account created");
                AccountReply {
                    re: env.id,
                    username: Some(username),
                    picture_b64: None,
                }
            }
            AccountRequest::SetPicture { picture_b64 } => {
                let s = self.session(ctx)?;
                let blob = B64.decode(picture_b64).map_err(|_| ErrorCode::Malformed)?;
                self.directory.set_picture(&s.token, blob).map_err(|e| ErrorCode::from(&e))?;
                AccountReply {
                    re: env.id,
                    username: Some(s.user.clone()),
                    picture_b64: None,
                }
            }
            AccountRequest::GetPicture { username } => {
                self.session(ctx)?;
                let pic = self.directory.picture(&username).map_err(|e| ErrorCode::from(&e))?;
                AccountReply {
                    re: env.id,
                    username: Some(username),
                    picture_b64: pic.map(|p| B64.encode(p)),
                }
            }
        };
        let _ = ctx.sender.send(reply_to(env, &reply));
        Ok(())
    }

    async fn on_login(&self, ctx: &mut ConnCtx, env: &SignalEnvelope) -> HandlerResult {
        match from_body::<LoginRequest>(&env.body)? {
            LoginRequest::Login {
                username,
                password,
                media_port,
                p2p_port,
            } => {
                if ctx.session.is_some() {
                    return Err(ErrorCode::Unauthorized);
                }
                let dir = self.directory.clone();
                let name = username.clone();
                let (token, _old) = tokio::task::spawn_blocking(move || dir.login(&name, &password))
                    .await
                    .map_err(|_| ErrorCode::Internal)?
                    .map_err(|e| ErrorCode::from(&e))?;
                let client = Client {
                    sender: ctx.sender.clone(),
                    token,
                    kick: ctx.kick.clone(),
                    ip: ctx.peer.ip(),
                    media_port,
                    p2p_port,
                };
                let previous = lock(&self.clients).insert(username.clone(), client);
                if let Some(prev) = previous {
                    // a newer login supersedes the old connection
                    prev.kick.cancel();
                    prev.sender.close();
                }
                if let Some(p) = self.proxy_id() {
                    lock(&self.graph).attach(&username, p);
                }
                ctx.session = Some(Session {
                    user: username.clone(),
                    token,
                });
                tracing::info!(user = %username, peer = %ctx.peer, "login");
                let _ = ctx.sender.send(SignalEnvelope::new(
                    Kind::Login,
                    "",
                    username.clone(),
                    0,
                    to_body(&LoginReply {
                        re: env.id,
                        username: username.clone(),
                        token: token.to_hex(),
                        heartbeat_ms: self.directory.config().heartbeat_ms,
                    }),
                ));
                self.broadcast_presence(&username, PresenceState::Online);
            }
            LoginRequest::Logout => {
                let s = ctx.session.take().ok_or(ErrorCode::NotLoggedIn)?;
                let _ = self.directory.logout(&s.token);
                let _ = ctx.sender.send(reply_to(env, &Ack { re: env.id }));
                self.unregister(&s, &ctx.sender, "logout");
            }
        }
        Ok(())
    }

    /// Drops `s` from the online set if this connection still owns it,
    /// ending its call and transfers.
    fn unregister(&self, s: &Session, sender: &ConnSender, reason: &str) {
        let owned = {
            let mut clients = lock(&self.clients);
            let owned = clients.get(&s.user).is_some_and(|c| c.sender.same_connection(sender));
            if owned {
                clients.remove(&s.user);
            }
            owned
        };
        if owned {
            self.drop_user(&s.user, reason);
        }
    }

    fn drop_user(&self, user: &str, reason: &str) {
        tracing::info!(user, reason, "user offline");
        let live = lock(&self.calls).live.get(user).copied();
        if let Some(call_id) = live {
            self.end_call(call_id, CallEvent::Disconnect, Some(reason.to_string()));
        }
        let orphaned: Vec<Arc<RelayTransfer>> = {
            let mut t = lock(&self.transfers);
            let ids: Vec<u64> = t
                .iter()
                .filter(|(_, x)| x.sender == user || x.recipient == user)
                .map(|(id, _)| *id)
                .collect();
            ids.iter().filter_map(|id| t.remove(id)).collect()
        };
        for t in orphaned {
            t.window.close();
            let other = if t.sender == user { &t.recipient } else { &t.sender };
            let body = to_body(&FileAcceptBody {
                transfer_id: t.manifest.transfer_id,
                accept: false,
                credits: 0,
                code: Some(ErrorCode::PeerDisconnected),
            });
            self.notify(other, Kind::FileAccept, body);
        }
        if self.proxy_id().is_some() {
            lock(&self.graph).detach(user);
        }
        self.broadcast_presence(user, PresenceState::Offline);
    }

    /// Called by the reader task once its connection is gone.
    pub fn connection_closed(&self, ctx: &ConnCtx) {
        if self.shutdown.is_cancelled() {
            return;
        }
        if let Some(s) = &ctx.session {
            let _ = self.directory.logout(&s.token);
            self.unregister(s, &ctx.sender, "disconnected");
        }
    }

    /// Disconnects users whose heartbeats stopped.
    pub fn reap(&self) {
        for (user, token) in self.directory.expire() {
            let stale = {
                let mut clients = lock(&self.clients);
                match clients.get(&user) {
                    Some(c) if c.token == token => clients.remove(&user),
                    _ => None,
                }
            };
            if let Some(c) = stale {
                tracing::info!(user = %user, "presence timeout");
                c.kick.cancel();
                c.sender.close();
                self.drop_user(&user, "presence timeout");
            }
        }
    }

    fn on_ping(&self, ctx: &ConnCtx, env: &SignalEnvelope) -> HandlerResult {
        let ping: PingBody = from_body(&env.body)?;
        let pong = PingBody {
            t0: ping.t0,
            server_time: Some(self.clock.now()),
        };
        let _ = ctx
            .sender
            .send(SignalEnvelope::new(Kind::Pong, "", env.from.clone(), 0, to_body(&pong)));
        Ok(())
    }

    fn on_heartbeat(&self, ctx: &ConnCtx) -> HandlerResult {
        let s = self.session(ctx)?;
        self.directory.heartbeat(&s.token).map_err(|e| ErrorCode::from(&e))
    }

    fn on_roster(&self, ctx: &ConnCtx, env: &SignalEnvelope) -> HandlerResult {
        let s = self.session(ctx)?;
        let entries = self.directory.roster(&s.token).map_err(|e| ErrorCode::from(&e))?;
        let clients = lock(&self.clients);
        let users = entries
            .into_iter()
            .map(|e| {
                let p2p_addr = (e.state == PresenceState::Online)
                    .then(|| clients.get(&e.username))
                    .flatten()
                    .and_then(|c| c.p2p_port.map(|p| SocketAddr::new(c.ip, p)));
                RosterItem {
                    username: e.username,
                    state: e.state,
                    last_heartbeat: e.last_heartbeat,
                    p2p_addr,
                }
            })
            .collect();
        drop(clients);
        let _ = ctx.sender.send(reply_to(env, &RosterReply { re: env.id, users }));
        Ok(())
    }

    fn on_chat(&self, ctx: &ConnCtx, env: &SignalEnvelope) -> HandlerResult {
        let s = self.session(ctx)?;
        if env.to.is_empty() {
            return Err(ErrorCode::Malformed);
        }
        let chat: ChatBody = from_body(&env.body)?;
        check_body(&chat.body).map_err(|e| ErrorCode::from(&e))?;
        let recipient = self.sender_of(&env.to).ok_or(ErrorCode::RecipientOffline)?;
        let journal_seq = if self.config.monitor {
            let entry = lock(&self.journal)
                .append(self.clock.now(), &s.user, &env.to, &chat.body)
                .map_err(|e| {
                    tracing::error!(error = %e, "journal append failed");
                    ErrorCode::Internal
                })?;
            if self.faults.crash_after_journal.swap(false, Ordering::SeqCst) {
                self.crash();
                return Ok(());
            }
            Some(entry.seq)
        } else {
            None
        };
        recipient.send(env.clone()).map_err(|_| ErrorCode::RecipientOffline)?;
        let _ = ctx.sender.send(reply_to(
            env,
            &ChatReceipt {
                re: env.id,
                message_id: chat.message_id,
                journal_seq,
            },
        ));
        Ok(())
    }

    fn on_invite(&self, ctx: &ConnCtx, env: &SignalEnvelope) -> HandlerResult {
        let s = self.session(ctx)?;
        let callee = env.to.clone();
        if callee.is_empty() || callee == s.user {
            return Err(ErrorCode::Malformed);
        }
        let invite: InviteBody = from_body(&env.body)?;
        let callee_conn = self.sender_of(&callee).ok_or(ErrorCode::CalleeOffline)?;
        let now = self.clock.now();
        let call_id = {
            let mut calls = lock(&self.calls);
            if calls.live.contains_key(&s.user) {
                return Err(ErrorCode::CallerBusy);
            }
            if calls.live.contains_key(&callee) {
                return Err(ErrorCode::CalleeBusy);
            }
            let mut rng = rand::thread_rng();
            let call_id = loop {
                let id = rng.gen_range(1..=u64::MAX >> 11);
                if !calls.entries.contains_key(&id) {
                    break id;
                }
            };
            calls.entries.insert(
                call_id,
                CallEntry {
                    session: CallSession::new(call_id, &s.user, &callee, now),
                    caller_stream: invite.stream,
                    callee_stream: None,
                    relay_requested: invite.relay_media || self.config.force_relay_media,
                    relay: None,
                    plans: None,
                    ke_relayed: 0,
                },
            );
            calls.live.insert(s.user.clone(), call_id);
            calls.live.insert(callee.clone(), call_id);
            call_id
        };
        tracing::info!(call_id, caller = %s.user, callee = %callee, "call invited");
        let _ = ctx.sender.send(reply_to(env, &notice(Some(env.id), call_id, CallState::Invited)));
        let forwarded = SignalEnvelope {
            body: to_body(&InviteBody { call_id, ..invite }),
            ..env.clone()
        };
        if callee_conn.send(forwarded).is_err() {
            self.end_call(call_id, CallEvent::Disconnect, Some("callee offline".into()));
            return Ok(());
        }
        let rang = {
            let mut calls = lock(&self.calls);
            calls
                .entries
                .get_mut(&call_id)
                .map(|e| e.session.apply(CallEvent::Ring, now).is_ok())
        };
        if rang == Some(true) {
            let body = to_body(&notice(None, call_id, CallState::Ringing));
            let _ = ctx.sender.send(SignalEnvelope::new(Kind::CallInvite, "", s.user.clone(), 0, body));
        }
        Ok(())
    }

    fn media_addr(&self, user: &str) -> Option<SocketAddr> {
        let clients = lock(&self.clients);
        let c = clients.get(user)?;
        Some(SocketAddr::new(c.ip, c.media_port?))
    }

    async fn on_accept(self: &Arc<Self>, ctx: &ConnCtx, env: &SignalEnvelope) -> HandlerResult {
        let s = self.session(ctx)?;
        let ctl: CallControl = from_body(&env.body)?;
        let stream = ctl.stream.ok_or(ErrorCode::Malformed)?;
        let now = self.clock.now();
        let (caller, caller_stream, relay_requested) = {
            let mut calls = lock(&self.calls);
            let e = calls.entries.get_mut(&ctl.call_id).ok_or(ErrorCode::UnknownCall)?;
            if e.session.callee != s.user {
                return Err(if e.session.involves(&s.user) {
                    ErrorCode::Malformed
                } else {
                    ErrorCode::UnknownCall
                });
            }
            e.session.apply(CallEvent::Accept, now).map_err(|_| ErrorCode::UnknownCall)?;
            e.callee_stream = Some(stream);
            (e.session.caller.clone(), e.caller_stream, e.relay_requested)
        };
        let call_id = ctl.call_id;
        let route = match self.proxy_id() {
            Some(_) => match lock(&self.graph).route_between_users(&caller, &s.user) {
                Ok(r) => r.proxies,
                Err(e) => {
                    tracing::warn!(call_id, error = %e, "no route");
                    self.end_call(call_id, CallEvent::Hangup, Some("no route".into()));
                    return Err(ErrorCode::Unreachable);
                }
            },
            None => Vec::new(),
        };
        let (Some(caller_media), Some(callee_media)) = (self.media_addr(&caller), self.media_addr(&s.user)) else {
            self.end_call(call_id, CallEvent::Hangup, Some("missing media port".into()));
            return Err(ErrorCode::Malformed);
        };
        let (relay, caller_send_to, callee_send_to) = if relay_requested {
            let r = start_relay(
                ctx.local.ip(),
                self.config.media_ports,
                caller_media,
                callee_media,
                self.metrics.media.clone(),
            )
            .await
            .map_err(|e| {
                tracing::error!(error = %e, "media relay allocation failed");
                ErrorCode::Internal
            });
            let r = match r {
                Ok(r) => r,
                Err(code) => {
                    self.end_call(call_id, CallEvent::Hangup, Some("no relay port".into()));
                    return Err(code);
                }
            };
            let a = r.addr();
            (Some(r), a, a)
        } else {
            (None, callee_media, caller_media)
        };
        let caller_plan = MediaPlan {
            send_to: caller_send_to,
            relayed: relay.is_some(),
            peer_stream: stream,
            route: route.clone(),
        };
        let callee_plan = MediaPlan {
            send_to: callee_send_to,
            relayed: relay.is_some(),
            peer_stream: caller_stream,
            route: route.clone(),
        };
        {
            let mut calls = lock(&self.calls);
            let Some(e) = calls.entries.get_mut(&call_id) else {
                return Err(ErrorCode::UnknownCall);
            };
            if !e.session.state.is_live() {
                return Err(ErrorCode::UnknownCall);
            }
            e.session.route = route;
            e.session.media_endpoints = Some([caller_media, callee_media]);
            e.relay = relay;
            e.plans = Some((caller_plan.clone(), callee_plan.clone()));
        }
        tracing::info!(call_id, relayed = caller_plan.relayed, "call accepted; key exchange pending");
        let mut callee_notice = notice(Some(env.id), call_id, CallState::Ringing);
        callee_notice.media = Some(callee_plan);
        let _ = ctx.sender.send(reply_to(env, &callee_notice));
        let mut caller_notice = notice(None, call_id, CallState::Ringing);
        caller_notice.media = Some(caller_plan);
        self.notify(&caller, Kind::CallAccept, to_body(&caller_notice));

        let hub = Arc::clone(self);
        let timeout = Duration::from_millis(self.config.key_exchange_timeout_ms);
        tokio::spawn(async move {
            tokio::time::sleep(timeout).await;
            let pending = hub
                .call_session(call_id)
                .is_some_and(|c| c.state == CallState::Ringing && c.phase.accepted);
            if pending {
                tracing::warn!(call_id, "key exchange did not complete");
                hub.end_call(call_id, CallEvent::Hangup, Some(ErrorCode::ExchangeTimeout.as_str()));
            }
        });
        Ok(())
    }

    fn on_reject(&self, ctx: &ConnCtx, env: &SignalEnvelope) -> HandlerResult {
        let s = self.session(ctx)?;
        let ctl: CallControl = from_body(&env.body)?;
        let caller = {
            let mut calls = lock(&self.calls);
            let e = calls.entries.get_mut(&ctl.call_id).ok_or(ErrorCode::UnknownCall)?;
            if e.session.callee != s.user {
                return Err(ErrorCode::UnknownCall);
            }
            e.session
                .apply(CallEvent::Reject, self.clock.now())
                .map_err(|_| ErrorCode::UnknownCall)?;
            let caller = e.session.caller.clone();
            calls.finish(ctl.call_id);
            caller
        };
        tracing::info!(call_id = ctl.call_id, "call rejected");
        let mut n = notice(Some(env.id), ctl.call_id, CallState::Rejected);
        n.reason = ctl.reason;
        let _ = ctx.sender.send(reply_to(env, &n));
        n.re = None;
        self.notify(&caller, Kind::CallReject, to_body(&n));
        Ok(())
    }

    fn on_end(&self, ctx: &ConnCtx, env: &SignalEnvelope) -> HandlerResult {
        let s = self.session(ctx)?;
        let ctl: CallControl = from_body(&env.body)?;
        let (peer, state) = {
            let mut calls = lock(&self.calls);
            let e = calls.entries.get_mut(&ctl.call_id).ok_or(ErrorCode::UnknownCall)?;
            if !e.session.involves(&s.user) {
                return Err(ErrorCode::UnknownCall);
            }
            let state = e
                .session
                .apply(CallEvent::Hangup, self.clock.now())
                .map_err(|_| ErrorCode::UnknownCall)?;
            let peer = e.session.peer_of(&s.user).unwrap_or_default().to_string();
            calls.finish(ctl.call_id);
            (peer, state)
        };
        tracing::info!(call_id = ctl.call_id, by = %s.user, "call ended");
        let mut n = notice(Some(env.id), ctl.call_id, state);
        n.reason = ctl.reason;
        let _ = ctx.sender.send(reply_to(env, &n));
        n.re = None;
        self.notify(&peer, Kind::CallEnd, to_body(&n));
        Ok(())
    }

    /// Ends a call on the server's initiative and tells both parties.
    fn end_call(&self, call_id: u64, event: CallEvent, reason: Option<String>) {
        let parties = {
            let mut calls = lock(&self.calls);
            let Some(e) = calls.entries.get_mut(&call_id) else {
                return;
            };
            if e.session.apply(event, self.clock.now()).is_err() {
                return;
            }
            let parties = [e.session.caller.clone(), e.session.callee.clone()];
            calls.finish(call_id);
            parties
        };
        tracing::info!(call_id, reason = reason.as_deref().unwrap_or(""), "call ended by server");
        let mut n = notice(None, call_id, CallState::Ended);
        n.reason = reason;
        let body = to_body(&n);
        for p in parties {
            self.notify(&p, Kind::CallEnd, body.clone());
        }
    }

    fn on_key_exchange(&self, ctx: &ConnCtx, mut env: SignalEnvelope) -> HandlerResult {
        let s = self.session(ctx)?;
        let mut calls = lock(&self.calls);
        let call_id = *calls.live.get(&s.user).ok_or(ErrorCode::NoActiveCall)?;
        let e = calls.entries.get_mut(&call_id).ok_or(ErrorCode::NoActiveCall)?;
        if !(e.session.state == CallState::Ringing && e.session.phase.accepted) {
            return Err(ErrorCode::NoActiveCall);
        }
        if env.to.is_empty() {
            // the callee's confirmation: both sides hold the same keys
            if e.session.callee != s.user {
                return Err(ErrorCode::Malformed);
            }
            let now = self.clock.now();
            e.session
                .apply(CallEvent::KeysConfirmed, now)
                .map_err(|_| ErrorCode::NoActiveCall)?;
            let epoch = peervoip_core::UtcMillis(now.0 + self.config.media_lead_ms);
            let (caller_plan, callee_plan) = e.plans.clone().ok_or(ErrorCode::Internal)?;
            let caller = e.session.caller.clone();
            drop(calls);
            tracing::info!(call_id, "call active");
            for (user, plan) in [(caller, caller_plan), (s.user.clone(), callee_plan)] {
                let mut n = notice(None, call_id, CallState::Active);
                n.media = Some(plan);
                n.media_epoch = Some(epoch);
                self.notify(&user, Kind::CallAccept, to_body(&n));
            }
            return Ok(());
        }
        if e.session.peer_of(&s.user) != Some(env.to.as_str()) {
            return Err(ErrorCode::Unauthorized);
        }
        let index = e.ke_relayed;
        e.ke_relayed += 1;
        drop(calls);
        let tamper = self.faults.tamper_key_exchange.load(Ordering::SeqCst);
        if tamper == index
            && self
                .faults
                .tamper_key_exchange
                .compare_exchange(tamper, NO_FAULT, Ordering::SeqCst, Ordering::SeqCst)
                .is_ok()
        {
            tracing::warn!(call_id, index, "fault hook: corrupting key exchange message");
            if let Some(b) = env.body.last_mut() {
                *b ^= 0x01;
            }
        }
        let peer = self.sender_of(&env.to).ok_or(ErrorCode::PeerDisconnected)?;
        peer.send(env).map_err(|_| ErrorCode::PeerDisconnected)?;
        Ok(())
    }

    fn on_file_offer(&self, ctx: &ConnCtx, env: &SignalEnvelope) -> HandlerResult {
        let s = self.session(ctx)?;
        if env.to.is_empty() || env.to == s.user {
            return Err(ErrorCode::Malformed);
        }
        let mut manifest: FileManifest = from_body(&env.body)?;
        manifest
            .validate(&self.config.blocklist, self.config.max_file_bytes)
            .map_err(|e| ErrorCode::from(&e))?;
        let recipient = self.sender_of(&env.to).ok_or(ErrorCode::RecipientOffline)?;
        {
            let mut t = lock(&self.transfers);
            if t.contains_key(&manifest.transfer_id) {
                return Err(ErrorCode::Malformed);
            }
            t.insert(
                manifest.transfer_id,
                Arc::new(RelayTransfer {
                    manifest: manifest.clone(),
                    sender: s.user.clone(),
                    recipient: env.to.clone(),
                    accepted: AtomicBool::new(false),
                    finished: AtomicBool::new(false),
                    window: Arc::new(Semaphore::new(RELAY_WINDOW_BYTES)),
                    in_flight: AtomicU64::new(0),
                    high_water: AtomicU64::new(0),
                }),
            );
        }
        if self.config.monitor && self.config.journal_file_offers {
            let line = format!("[file offer] {} ({} bytes)", manifest.filename, manifest.size);
            if let Err(e) = lock(&self.journal).append(self.clock.now(), &s.user, &env.to, &line) {
                tracing::error!(error = %e, "journal append failed");
            }
        }
        tracing::info!(transfer_id = manifest.transfer_id, from = %s.user, to = %env.to, size = manifest.size, "file offered");
        let forwarded = SignalEnvelope {
            body: to_body(&manifest),
            ..env.clone()
        };
        if recipient.send(forwarded).is_err() {
            lock(&self.transfers).remove(&manifest.transfer_id);
            return Err(ErrorCode::RecipientOffline);
        }
        let _ = ctx.sender.send(reply_to(env, &Ack { re: env.id }));
        Ok(())
    }

    fn on_file_accept(&self, ctx: &ConnCtx, env: &SignalEnvelope) -> HandlerResult {
        let s = self.session(ctx)?;
        let body: FileAcceptBody = from_body(&env.body)?;
        let t = lock(&self.transfers)
            .get(&body.transfer_id)
            .cloned()
            .ok_or(ErrorCode::UnknownTransfer)?;
        let finished = t.finished.load(Ordering::SeqCst);
        let other = if t.recipient == s.user {
            t.sender.clone()
        } else if t.sender == s.user && !body.accept {
            t.recipient.clone()
        } else {
            return Err(ErrorCode::UnknownTransfer);
        };
        if finished {
            // a refusal or a zero-credit accept is the recipient's verdict;
            // credit grants still in flight are just passed on
            if !body.accept || body.credits == 0 {
                lock(&self.transfers).remove(&body.transfer_id);
            }
        } else if body.accept {
            t.accepted.store(true, Ordering::SeqCst);
        } else {
            lock(&self.transfers).remove(&body.transfer_id);
            t.window.close();
            tracing::info!(transfer_id = body.transfer_id, by = %s.user, "transfer declined or aborted");
        }
        if let Some(peer) = self.sender_of(&other) {
            let _ = peer.send(SignalEnvelope {
                to: other,
                ..env.clone()
            });
        }
        Ok(())
    }

    async fn on_file_chunk(&self, ctx: &ConnCtx, mut env: SignalEnvelope) -> HandlerResult {
        let s = self.session(ctx)?;
        let id = FileChunk::peek_transfer_id(&env.body).ok_or(ErrorCode::Malformed)?;
        let t = lock(&self.transfers).get(&id).cloned().ok_or(ErrorCode::UnknownTransfer)?;
        if t.sender != s.user || !t.accepted.load(Ordering::SeqCst) || t.finished.load(Ordering::SeqCst) {
            return Err(ErrorCode::UnknownTransfer);
        }
        if env.body.len() < CHUNK_HEADER_LEN {
            return Err(ErrorCode::Malformed);
        }
        let index = u32::from_be_bytes(env.body[8..12].try_into().expect("4 bytes"));
        let is_final = env.body[12] & FLAG_FINAL != 0;
        let recipient = self.sender_of(&t.recipient).ok_or(ErrorCode::PeerDisconnected)?;
        // the budget counts payload bytes; the fixed chunk header is framing
        let len = (env.body.len() - CHUNK_HEADER_LEN) as u64;
        // a sender ignoring its credits stalls here, not in server memory
        let permit = t
            .window
            .clone()
            .acquire_many_owned(len as u32)
            .await
            .map_err(|_| ErrorCode::UnknownTransfer)?;
        let in_flight = t.in_flight.fetch_add(len, Ordering::SeqCst) + len;
        t.high_water.fetch_max(in_flight, Ordering::SeqCst);
        self.metrics.transfer_high_water.fetch_max(in_flight, Ordering::SeqCst);
        let total = self.metrics.relay_in_flight.fetch_add(len, Ordering::SeqCst) + len;
        self.metrics.relay_high_water.fetch_max(total, Ordering::SeqCst);
        let hold = InFlight {
            _permit: permit,
            len,
            transfer: t.clone(),
            metrics: self.metrics.clone(),
        };
        if !is_final {
            let fault = self.faults.corrupt_chunk.load(Ordering::SeqCst);
            if fault == i64::from(index)
                && env.body.len() > CHUNK_HEADER_LEN
                && self
                    .faults
                    .corrupt_chunk
                    .compare_exchange(fault, NO_FAULT, Ordering::SeqCst, Ordering::SeqCst)
                    .is_ok()
            {
                tracing::warn!(transfer_id = id, index, "fault hook: corrupting chunk");
                env.body[CHUNK_HEADER_LEN] ^= 0xff;
            }
        }
        env.to = t.recipient.clone();
        if is_final {
            // set before forwarding so the verdict can never beat it
            t.finished.store(true, Ordering::SeqCst);
        }
        recipient
            .send_tracked(env, Some(Box::new(hold)), None)
            .map_err(|_| ErrorCode::PeerDisconnected)?;
        if is_final {
            tracing::info!(
                transfer_id = id,
                high_water = t.high_water.load(Ordering::SeqCst),
                "transfer relayed"
            );
        }
        Ok(())
    }

    fn on_error_relay(&self, env: &SignalEnvelope) -> HandlerResult {
        if !env.to.is_empty() {
            if let Some(peer) = self.sender_of(&env.to) {
                let _ = peer.send(env.clone());
            }
        }
        Ok(())
    }
}

fn notice(re: Option<u64>, call_id: u64, state: CallState) -> CallNotice {
    CallNotice {
        re,
        call_id,
        state,
        media: None,
        media_epoch: None,
        reason: None,
    }
}

fn constant_time_eq(a: &[u8], b: &[u8]) -> bool {
    a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

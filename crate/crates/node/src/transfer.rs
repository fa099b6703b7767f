//! File transfers over the server relay or a direct peer link.
//!
//! The receiver grants chunk credits: an initial window on accept, then a
//! batch each time it has written that many chunks. The sender never has
//! more chunks outstanding than it holds credits for, so neither side nor
//! the relay buffers more than one window. A zero-credit grant after the
//! final chunk confirms the digest matched; a refusal carries the error.

use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use peervoip_core::crypto;
use peervoip_core::files::{
    digest_reader, Chunker, FileChunk, FileError, FileManifest, Reassembler, ReassemblyStatus, CHUNK_SIZE,
    RELAY_WINDOW_CHUNKS,
};
use peervoip_core::protocol::{from_body, reply_to, to_body, Ack, ErrorCode, FileAcceptBody};
use peervoip_core::wire::{Kind, SignalEnvelope};
use serde::Serialize;
use serde_json::json;
use tokio::sync::{mpsc, watch, Semaphore};

use crate::engine::{Engine, EngineError, Result};
use crate::events::EventKind;
use crate::link::Link;

/// Credits granted with the accept.
pub const INITIAL_CREDITS: u32 = RELAY_WINDOW_CHUNKS as u32;
/// Credits returned per batch of written chunks.
pub const CREDIT_BATCH: u32 = INITIAL_CREDITS / 2;
/// Progress events are published every this many chunks.
const PROGRESS_EVERY: u32 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Send,
    Receive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferState {
    Offered,
    Active,
    Paused,
    Complete,
    Declined,
    Failed,
}

impl TransferState {
    pub fn is_terminal(self) -> bool {
        matches!(self, TransferState::Complete | TransferState::Declined | TransferState::Failed)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TransferProgress {
    pub transfer_id: u64,
    pub filename: String,
    pub peer: String,
    pub direction: Direction,
    pub route: &'static str,
    pub size: u64,
    pub bytes: u64,
    pub state: TransferState,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

pub(crate) struct Outgoing {
    manifest: FileManifest,
    path: PathBuf,
    link: Arc<Link>,
    credits: Arc<Semaphore>,
    paused: watch::Sender<bool>,
    started: bool,
}

pub(crate) struct Incoming {
    manifest: FileManifest,
    link: Arc<Link>,
    chunks: Option<mpsc::UnboundedSender<FileChunk>>,
    paused: watch::Sender<bool>,
}

impl Engine {
    pub fn transfer(&self, transfer_id: u64) -> Option<TransferProgress> {
        self.state().progress.get(&transfer_id).cloned()
    }

    /// Offers `path` to `to`. Returns the transfer id once the offer is
    /// delivered; the data flows after the receiver accepts.
    pub async fn offer_file(self: &Arc<Self>, to: &str, path: &Path, direct: bool) -> Result<u64> {
        let me = self.me()?;
        let raw_name = path
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| EngineError::Invalid(format!("not a file path: {}", path.display())))?
            .to_string();
        let p = path.to_path_buf();
        let (size, digest) = tokio::task::spawn_blocking(move || digest_reader(std::fs::File::open(&p)?))
            .await
            .map_err(|e| EngineError::Invalid(e.to_string()))??;
        let transfer_id = crypto::random_u64();
        let mut manifest = FileManifest {
            transfer_id,
            filename: raw_name,
            size,
            digest,
            chunk_size: CHUNK_SIZE as u32,
        };
        manifest.validate(&self.config.blocklist(), self.config.max_file_bytes)?;
        let (link, route) = if direct {
            (self.peer_link(to).await?, "direct")
        } else {
            (self.server_link()?, "server")
        };
        {
            let mut st = self.state();
            st.outgoing.insert(
                transfer_id,
                Outgoing {
                    manifest: manifest.clone(),
                    path: path.to_path_buf(),
                    link: link.clone(),
                    credits: Arc::new(Semaphore::new(0)),
                    paused: watch::channel(false).0,
                    started: false,
                },
            );
            st.progress.insert(
                transfer_id,
                TransferProgress {
                    transfer_id,
                    filename: manifest.filename.clone(),
                    peer: to.into(),
                    direction: Direction::Send,
                    route,
                    size,
                    bytes: 0,
                    state: TransferState::Offered,
                    error: None,
                    path: Some(path.to_path_buf()),
                },
            );
        }
        let res = link
            .request(SignalEnvelope::new(Kind::FileOffer, me, to, 0, to_body(&manifest)))
            .await;
        if let Err(code) = res {
            self.state().outgoing.remove(&transfer_id);
            self.set_progress(transfer_id, |p| {
                p.state = TransferState::Failed;
                p.error = Some(code.as_str());
            });
            return Err(code.into());
        }
        tracing::info!(transfer_id, to, size, route, "file offered");
        Ok(transfer_id)
    }

    /// Accepts (writing into the download directory) or declines an offer.
    pub async fn accept_file(self: &Arc<Self>, transfer_id: u64, accept: bool) -> Result<()> {
        let me = self.me()?;
        let (link, manifest, peer) = {
            let st = self.state();
            let inc = st
                .incoming
                .get(&transfer_id)
                .filter(|i| i.chunks.is_none())
                .ok_or(ErrorCode::UnknownTransfer)?;
            let peer = st.progress.get(&transfer_id).map(|p| p.peer.clone()).unwrap_or_default();
            (inc.link.clone(), inc.manifest.clone(), peer)
        };
        let to = if link.is_direct() { link.peer.clone() } else { peer };
        if !accept {
            self.state().incoming.remove(&transfer_id);
            self.set_progress(transfer_id, |p| p.state = TransferState::Declined);
            let body = FileAcceptBody {
                transfer_id,
                accept: false,
                credits: 0,
                code: None,
            };
            link.send(SignalEnvelope::new(Kind::FileAccept, me, to, 0, to_body(&body)))?;
            return Ok(());
        }
        let dir = self.download_dir();
        std::fs::create_dir_all(&dir)?;
        let part = dir.join(format!("{}.{transfer_id}.part", manifest.filename));
        let file = std::fs::File::create(&part)?;
        let (tx, rx) = mpsc::unbounded_channel();
        let paused_rx = {
            let mut st = self.state();
            let inc = st.incoming.get_mut(&transfer_id).ok_or(ErrorCode::UnknownTransfer)?;
            inc.chunks = Some(tx);
            inc.paused.subscribe()
        };
        self.set_progress(transfer_id, |p| p.state = TransferState::Active);
        let job = Receive {
            engine: self.clone(),
            me: me.clone(),
            to: to.clone(),
            link: link.clone(),
            part,
            dir,
        };
        self.spawn(job.run(Reassembler::new(manifest, BufWriter::with_capacity(CHUNK_SIZE, file)), rx, paused_rx));
        let body = FileAcceptBody {
            transfer_id,
            accept: true,
            credits: INITIAL_CREDITS,
            code: None,
        };
        link.send(SignalEnvelope::new(Kind::FileAccept, me, to, 0, to_body(&body)))?;
        tracing::info!(transfer_id, "file accepted");
        Ok(())
    }

    pub fn pause_file(&self, transfer_id: u64) -> Result<()> {
        self.set_paused(transfer_id, true)
    }

    pub fn resume_file(&self, transfer_id: u64) -> Result<()> {
        self.set_paused(transfer_id, false)
    }

    fn set_paused(&self, transfer_id: u64, paused: bool) -> Result<()> {
        {
            let st = self.state();
            let tx = st
                .outgoing
                .get(&transfer_id)
                .map(|o| &o.paused)
                .or_else(|| st.incoming.get(&transfer_id).map(|i| &i.paused))
                .ok_or(ErrorCode::UnknownTransfer)?;
            tx.send_replace(paused);
        }
        self.set_progress(transfer_id, |p| {
            if !p.state.is_terminal() && p.state != TransferState::Offered {
                p.state = if paused { TransferState::Paused } else { TransferState::Active };
            }
        });
        Ok(())
    }

    pub(crate) fn on_file_offer(self: &Arc<Self>, link: &Arc<Link>, env: &SignalEnvelope) {
        let Ok(mut manifest) = from_body::<FileManifest>(&env.body) else {
            self.reply_error(link, env, ErrorCode::Malformed);
            return;
        };
        let transfer_id = manifest.transfer_id;
        if let Err(e) = manifest.validate(&self.config.blocklist(), self.config.max_file_bytes) {
            let code = ErrorCode::from(&e);
            tracing::info!(transfer_id, from = %env.from, %code, "refusing file offer");
            if link.is_direct() {
                self.reply_error(link, env, code);
            } else if let Ok(me) = self.me() {
                let body = FileAcceptBody {
                    transfer_id,
                    accept: false,
                    credits: 0,
                    code: Some(code),
                };
                let _ = link.send(SignalEnvelope::new(Kind::FileAccept, me, env.from.clone(), 0, to_body(&body)));
            }
            self.publish(
                EventKind::Error,
                json!({
                    "code": code.as_str(),
                    "message": code.message(),
                    "transfer_id": transfer_id,
                    "from": env.from,
                    "filename": manifest.filename,
                }),
            );
            return;
        }
        let progress = TransferProgress {
            transfer_id,
            filename: manifest.filename.clone(),
            peer: env.from.clone(),
            direction: Direction::Receive,
            route: if link.is_direct() { "direct" } else { "server" },
            size: manifest.size,
            bytes: 0,
            state: TransferState::Offered,
            error: None,
            path: None,
        };
        {
            let mut st = self.state();
            if st.incoming.contains_key(&transfer_id) || st.outgoing.contains_key(&transfer_id) {
                drop(st);
                self.reply_error(link, env, ErrorCode::Malformed);
                return;
            }
            st.incoming.insert(
                transfer_id,
                Incoming {
                    manifest: manifest.clone(),
                    link: link.clone(),
                    chunks: None,
                    paused: watch::channel(false).0,
                },
            );
            st.progress.insert(transfer_id, progress);
            self.bus.publish(
                EventKind::FileOffer,
                json!({
                    "transfer_id": transfer_id,
                    "from": env.from,
                    "filename": manifest.filename,
                    "size": manifest.size,
                    "route": if link.is_direct() { "direct" } else { "server" },
                }),
            );
        }
        if link.is_direct() {
            let _ = link.send(reply_to(env, &Ack { re: env.id }));
        }
    }

    pub(crate) fn on_file_accept(self: &Arc<Self>, env: &SignalEnvelope) {
        let Ok(body) = from_body::<FileAcceptBody>(&env.body) else {
            return;
        };
        let id = body.transfer_id;
        let mut st = self.state();
        if let Some(out) = st.outgoing.get_mut(&id) {
            if !body.accept {
                st.outgoing.remove(&id);
                drop(st);
                let code = body.code.map(|c| c.as_str());
                tracing::info!(transfer_id = id, code = code.as_deref().unwrap_or(""), "transfer declined");
                self.set_progress(id, |p| {
                    p.state = if code.is_some() { TransferState::Failed } else { TransferState::Declined };
                    p.error = code.clone();
                });
                if let Some(c) = body.code {
                    self.publish(
                        EventKind::Error,
                        json!({"code": c.as_str(), "message": c.message(), "transfer_id": id}),
                    );
                }
                return;
            }
            if out.started && body.credits == 0 {
                // the receiver's confirmation that the file arrived intact
                st.outgoing.remove(&id);
                drop(st);
                self.set_progress(id, |p| {
                    p.bytes = p.size;
                    p.state = TransferState::Complete;
                });
                tracing::info!(transfer_id = id, "delivery confirmed");
                return;
            }
            out.credits.add_permits(body.credits as usize);
            if out.started {
                return;
            }
            out.started = true;
            let job = Send {
                engine: self.clone(),
                transfer_id: id,
                to: env.from.clone(),
                link: out.link.clone(),
                path: out.path.clone(),
                size: out.manifest.size,
                credits: out.credits.clone(),
                paused: out.paused.subscribe(),
            };
            drop(st);
            self.set_progress(id, |p| p.state = TransferState::Active);
            self.spawn(job.run());
            return;
        }
        if !body.accept {
            // the sender gave up on a transfer we are receiving
            if let Some(inc) = st.incoming.remove(&id) {
                drop(st);
                drop(inc);
                let code = body.code.unwrap_or(ErrorCode::PeerDisconnected);
                self.fail_transfer(id, code);
            }
        }
    }

    pub(crate) fn on_file_chunk(&self, env: &SignalEnvelope) {
        let Ok(chunk) = FileChunk::decode(&env.body) else {
            return;
        };
        let st = self.state();
        if let Some(tx) = st.incoming.get(&chunk.transfer_id).and_then(|i| i.chunks.as_ref()) {
            let _ = tx.send(chunk);
        }
    }

    /// Fails every transfer that runs over `link`.
    pub(crate) fn fail_transfers_on(&self, link: &Arc<Link>, code: ErrorCode) {
        let ids: Vec<u64> = {
            let mut st = self.state();
            let mut ids = Vec::new();
            st.outgoing.retain(|id, o| {
                let keep = !Arc::ptr_eq(&o.link, link);
                if !keep {
                    ids.push(*id);
                }
                keep
            });
            st.incoming.retain(|id, i| {
                let keep = !Arc::ptr_eq(&i.link, link);
                if !keep {
                    ids.push(*id);
                }
                keep
            });
            ids
        };
        for id in ids {
            self.fail_transfer(id, code);
        }
    }

    fn fail_transfer(&self, id: u64, code: ErrorCode) {
        {
            let mut st = self.state();
            st.outgoing.remove(&id);
            st.incoming.remove(&id);
        }
        let mut changed = false;
        self.set_progress(id, |p| {
            if !p.state.is_terminal() {
                p.state = TransferState::Failed;
                p.error = Some(code.as_str());
                changed = true;
            }
        });
        if changed {
            tracing::warn!(transfer_id = id, %code, "transfer failed");
            self.publish(
                EventKind::Error,
                json!({"code": code.as_str(), "message": code.message(), "transfer_id": id}),
            );
        }
    }

    /// Applies `f` to the progress record and publishes a file-progress event.
    pub(crate) fn set_progress(&self, id: u64, f: impl FnOnce(&mut TransferProgress)) {
        let mut st = self.state();
        let Some(p) = st.progress.get_mut(&id) else {
            return;
        };
        f(p);
        let snapshot = serde_json::to_value(&*p).unwrap_or_default();
        self.bus.publish(EventKind::FileProgress, snapshot);
    }
}

struct Send {
    engine: Arc<Engine>,
    transfer_id: u64,
    to: String,
    link: Arc<Link>,
    path: PathBuf,
    size: u64,
    credits: Arc<Semaphore>,
    paused: watch::Receiver<bool>,
}

impl Send {
    async fn run(mut self) {
        let id = self.transfer_id;
        match self.pump().await {
            Ok(()) => {
                // complete once the receiver confirms the digest
                self.engine.set_progress(id, |p| {
                    if !p.state.is_terminal() {
                        p.bytes = p.size;
                    }
                });
                tracing::info!(transfer_id = id, size = self.size, "file sent");
            }
            Err(code) => {
                let me = self.engine.username().unwrap_or_default();
                let body = FileAcceptBody {
                    transfer_id: id,
                    accept: false,
                    credits: 0,
                    code: Some(code),
                };
                let _ = self
                    .link
                    .send(SignalEnvelope::new(Kind::FileAccept, me, self.to.clone(), 0, to_body(&body)));
                self.engine.fail_transfer(id, code);
            }
        }
    }

    async fn pump(&mut self) -> Result<(), ErrorCode> {
        let me = self.engine.me().map_err(|_| ErrorCode::NotLoggedIn)?;
        let file = std::fs::File::open(&self.path).map_err(|_| ErrorCode::UnknownTransfer)?;
        let mut chunker = Chunker::new(std::io::BufReader::with_capacity(CHUNK_SIZE, file), self.transfer_id);
        let mut sent = 0u64;
        let mut n = 0u32;
        loop {
            if *self.paused.borrow() {
                self.paused.wait_for(|p| !*p).await.map_err(|_| ErrorCode::UnknownTransfer)?;
            }
            // a closed semaphore never happens; a cancelled transfer drops this task
            self.credits
                .acquire()
                .await
                .map_err(|_| ErrorCode::UnknownTransfer)?
                .forget();
            if !self.engine.state().outgoing.contains_key(&self.transfer_id) {
                return Err(ErrorCode::UnknownTransfer);
            }
            let chunk = chunker
                .next_chunk()
                .map_err(|_| ErrorCode::Internal)?
                .ok_or(ErrorCode::Internal)?;
            let last = chunk.is_final();
            if !last {
                sent += chunk.payload.len() as u64;
            }
            let env = SignalEnvelope::new(Kind::FileChunk, me.clone(), self.to.clone(), 0, chunk.encode());
            self.link.send_written(env).await.map_err(|_| ErrorCode::PeerDisconnected)?;
            if last {
                return Ok(());
            }
            n += 1;
            if n.is_multiple_of(PROGRESS_EVERY) {
                self.engine.set_progress(self.transfer_id, |p| p.bytes = sent);
            }
        }
    }
}

struct Receive {
    engine: Arc<Engine>,
    me: String,
    to: String,
    link: Arc<Link>,
    part: PathBuf,
    dir: PathBuf,
}

impl Receive {
    async fn run(
        self,
        mut asm: Reassembler<BufWriter<std::fs::File>>,
        mut chunks: mpsc::UnboundedReceiver<FileChunk>,
        mut paused: watch::Receiver<bool>,
    ) {
        let id = asm.manifest().transfer_id;
        let mut owed = 0u32;
        let mut n = 0u32;
        let outcome: Result<u64, FileError> = loop {
            tokio::select! {
                chunk = chunks.recv() => {
                    let Some(chunk) = chunk else {
                        // the transfer was cancelled or failed elsewhere
                        break Err(FileError::PeerDisconnected);
                    };
                    match asm.push(&chunk) {
                        Ok(ReassemblyStatus::Complete { size }) => break Ok(size),
                        Ok(ReassemblyStatus::InProgress { received }) => {
                            owed += 1;
                            n += 1;
                            if n.is_multiple_of(PROGRESS_EVERY) {
                                self.engine.set_progress(id, |p| p.bytes = received);
                            }
                        }
                        Err(e) => break Err(e),
                    }
                }
                r = paused.changed() => {
                    if r.is_err() {
                        break Err(FileError::PeerDisconnected);
                    }
                }
            }
            if owed >= CREDIT_BATCH && !*paused.borrow() {
                self.grant(id, owed);
                owed = 0;
            }
        };
        let filename = asm.manifest().filename.clone();
        drop(asm);
        match outcome {
            Ok(size) => match finalize(&self.part, &self.dir, &filename) {
                Ok(path) => {
                    self.engine.state().incoming.remove(&id);
                    self.grant(id, 0);
                    tracing::info!(transfer_id = id, size, path = %path.display(), "file received");
                    self.engine.set_progress(id, |p| {
                        p.bytes = size;
                        p.state = TransferState::Complete;
                        p.path = Some(path);
                    });
                }
                Err(e) => {
                    tracing::error!(transfer_id = id, error = %e, "could not store file");
                    self.abort(id, ErrorCode::Internal);
                }
            },
            Err(e) => {
                let _ = std::fs::remove_file(&self.part);
                let code = ErrorCode::from(&e);
                if !matches!(e, FileError::PeerDisconnected) {
                    self.abort(id, code);
                }
            }
        }
    }

    fn grant(&self, transfer_id: u64, credits: u32) {
        let body = FileAcceptBody {
            transfer_id,
            accept: true,
            credits,
            code: None,
        };
        let _ = self.link.send(SignalEnvelope::new(
            Kind::FileAccept,
            self.me.clone(),
            self.to.clone(),
            0,
            to_body(&body),
        ));
    }

    fn abort(&self, transfer_id: u64, code: ErrorCode) {
        let body = FileAcceptBody {
            transfer_id,
            accept: false,
            credits: 0,
            code: Some(code),
        };
        let _ = self.link.send(SignalEnvelope::new(
            Kind::FileAccept,
            self.me.clone(),
            self.to.clone(),
            0,
            to_body(&body),
        ));
        self.engine.fail_transfer(transfer_id, code);
    }
}

/// Moves the finished `.part` file to a free name in `dir`.
fn finalize(part: &Path, dir: &Path, filename: &str) -> std::io::Result<PathBuf> {
    let (stem, ext) = match filename.rsplit_once('.') {
        Some((s, e)) if !s.is_empty() => (s.to_string(), format!(".{e}")),
        _ => (filename.to_string(), String::new()),
    };
    let mut target = dir.join(filename);
    let mut k = 1;
    while target.exists() {
        target = dir.join(format!("{stem} ({k}){ext}"));
        k += 1;
    }
    std::fs::rename(part, &target)?;
    Ok(target)
}

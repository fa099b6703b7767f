//! In-process test bed: one signaling server and any number of node
//! engines on loopback, each behind its own emulated access link.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use peervoip_core::shaper::{AccessLink, LinkShape};
use peervoip_node::{ControlEvent, DaemonConfig, Engine, EventKind, RuntimeOptions};
use peervoip_server::{Server, ServerConfig};
use serde_json::Value;
use tempfile::TempDir;
use tokio::sync::mpsc::UnboundedReceiver;
use tokio::sync::Mutex;

use crate::BenchError;

pub const PASSWORD: &str = "bench-password";
pub const EVENT_WAIT: Duration = Duration::from_secs(30);

pub struct TestBed {
    dir: TempDir,
    pub server: Server,
}

impl TestBed {
    pub async fn start(tweak: impl FnOnce(&mut ServerConfig)) -> Result<Self, BenchError> {
        let dir = tempfile::tempdir()?;
        let mut cfg = ServerConfig::ephemeral(&dir.path().join("server"));
        cfg.admin_listen = None;
        tweak(&mut cfg);
        let server = Server::start(cfg).await.map_err(|e| BenchError::Setup(e.to_string()))?;
        Ok(Self { dir, server })
    }

    pub fn path(&self) -> &Path {
        self.dir.path()
    }

    /// Starts an engine behind `shape`, signs `name` up and logs it in.
    pub async fn peer(
        &self,
        name: &str,
        shape: LinkShape,
        tweak: impl FnOnce(&mut DaemonConfig),
    ) -> Result<Peer, BenchError> {
        let download_dir = self.dir.path().join(name);
        std::fs::create_dir_all(&download_dir)?;
        let mut cfg = DaemonConfig::ephemeral(self.server.signaling_addr(), &download_dir);
        cfg.heartbeat_secs = 2.0;
        cfg.reconnect_base_ms = 100;
        cfg.reconnect_max_ms = 500;
        tweak(&mut cfg);
        let options = RuntimeOptions {
            access_link: Some(AccessLink::new(shape)),
            ..RuntimeOptions::default()
        };
        let engine = Engine::start(cfg, options).await?;
        if !engine.wait_connected(EVENT_WAIT).await {
            engine.shutdown().await;
            return Err(BenchError::Setup(format!("{name} never reached the server")));
        }
        let events = engine.subscribe();
        engine.signup(name, PASSWORD, None).await?;
        engine.login(name, PASSWORD).await?;
        Ok(Peer {
            name: name.into(),
            engine,
            download_dir,
            events: Mutex::new(events),
        })
    }

    pub async fn shutdown(self, peers: Vec<Peer>) {
        for p in peers {
            p.engine.shutdown().await;
        }
        self.server.shutdown().await;
    }
}

/// A bare engine on `server`, connected but not logged in.
pub async fn engine_on(server: &Server, dir: &Path) -> Result<Arc<Engine>, BenchError> {
    std::fs::create_dir_all(dir)?;
    let engine = Engine::start(
        DaemonConfig::ephemeral(server.signaling_addr(), dir),
        RuntimeOptions::default(),
    )
    .await?;
    if !engine.wait_connected(EVENT_WAIT).await {
        engine.shutdown().await;
        return Err(BenchError::Setup("engine never reached the server".into()));
    }
    Ok(engine)
}

pub struct Peer {
    pub name: String,
    pub engine: Arc<Engine>,
    pub download_dir: PathBuf,
    events: Mutex<UnboundedReceiver<ControlEvent>>,
}

impl Peer {
    /// Next event of `kind` whose data satisfies `pred`; earlier events are skipped.
    pub async fn wait_for(
        &self,
        kind: EventKind,
        within: Duration,
        pred: impl Fn(&Value) -> bool,
    ) -> Result<Value, BenchError> {
        let mut rx = self.events.lock().await;
        wait_event(&mut rx, kind, within, pred).await
    }

    /// Discards queued events.
    pub async fn drain(&self) {
        let mut rx = self.events.lock().await;
        while rx.try_recv().is_ok() {}
    }
}

pub async fn wait_event(
    rx: &mut UnboundedReceiver<ControlEvent>,
    kind: EventKind,
    within: Duration,
    pred: impl Fn(&Value) -> bool,
) -> Result<Value, BenchError> {
    let deadline = tokio::time::Instant::now() + within;
    loop {
        let ev = tokio::time::timeout_at(deadline, rx.recv())
            .await
            .map_err(|_| BenchError::Timeout(kind.as_str()))?
            .ok_or(BenchError::Setup("event stream closed".into()))?;
        if ev.event == kind && pred(&ev.data) {
            return Ok(ev.data);
        }
    }
}

//! Signaling server: accounts and presence, call setup with key-exchange
//! relay, monitored chat with a durable journal, streaming file relay and
//! optional UDP media relay.

pub mod admin;
pub mod config;
pub mod hub;
pub mod media_relay;
pub mod proxy;

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use peervoip_core::auth::{AuthError, Directory, DirectoryConfig, FileStore};
use peervoip_core::chat::{ChatError, Journal};
use peervoip_core::conn::accept_secure;
use peervoip_core::routing::ProxyGraph;
use peervoip_core::SystemClock;
use thiserror::Error;
use tokio::net::{TcpListener, TcpStream};
use tokio::task::JoinHandle;

pub use config::ServerConfig;
pub use hub::Hub;

use hub::ConnCtx;

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("account store: {0}")]
    Store(#[from] AuthError),
    #[error("journal: {0}")]
    Journal(#[from] ChatError),
    #[error("proxy topology: {0}")]
    Topology(#[from] peervoip_core::routing::RouteError),
}

/// A running server. Dropping it does not stop it; call [`Server::shutdown`].
pub struct Server {
    hub: Arc<Hub>,
    signaling_addr: SocketAddr,
    admin_addr: Option<SocketAddr>,
    tasks: Vec<JoinHandle<()>>,
}

impl Server {
    pub async fn start(config: ServerConfig) -> Result<Self, ServerError> {
        std::fs::create_dir_all(&config.data_dir)?;
        let store = FileStore::open(config.data_dir.join("accounts.json"))?;
        let directory = Arc::new(Directory::new(
            Box::new(store),
            Arc::new(SystemClock),
            DirectoryConfig {
                heartbeat_ms: config.heartbeat_ms,
                iterations: config.pbkdf2_iterations,
            },
        ));
        let journal = Journal::open(config.data_dir.join("journal"))?;
        let mut graph = ProxyGraph::new();
        if let Some(p) = &config.proxy {
            graph.add_proxy(&p.id);
            for e in &p.edges {
                graph.set_rtt(&e.a, &e.b, e.rtt_ms)?;
            }
            for (user, proxy) in &p.attachments {
                graph.attach(user, proxy);
            }
        }

        let listener = TcpListener::bind(config.listen).await?;
        let signaling_addr = listener.local_addr()?;
        let admin_listener = match config.admin_listen {
            Some(a) => Some(TcpListener::bind(a).await?),
            None => None,
        };
        let admin_addr = admin_listener.as_ref().map(|l| l.local_addr()).transpose()?;
        if admin_addr.is_some() && config.admin_token.is_none() && config.admins.is_empty() {
            tracing::warn!("admin endpoint has no admin token or admin users; every request will be refused");
        }

        let hub = Arc::new(Hub::new(config, directory, journal, graph));
        let mut tasks = vec![tokio::spawn(accept_loop(hub.clone(), listener))];
        if let Some(l) = admin_listener {
            let app = admin::router(hub.clone());
            let stop = hub.shutdown.clone();
            tasks.push(tokio::spawn(async move {
                let r = axum::serve(l, app)
                    .with_graceful_shutdown(async move { stop.cancelled().await })
                    .await;
                if let Err(e) = r {
                    tracing::error!(error = %e, "admin endpoint failed");
                }
            }));
        }
        tasks.push(tokio::spawn(reaper(hub.clone())));
        if let Some(p) = hub.config.proxy.clone() {
            for n in p.neighbors {
                tasks.push(tokio::spawn(proxy::probe_neighbor(
                    hub.clone(),
                    p.id.clone(),
                    n,
                    Duration::from_millis(p.probe_interval_ms),
                )));
            }
        }
        tracing::info!(%signaling_addr, ?admin_addr, monitor = hub.config.monitor, "server listening");
        Ok(Self {
            hub,
            signaling_addr,
            admin_addr,
            tasks,
        })
    }

    pub fn hub(&self) -> &Arc<Hub> {
        &self.hub
    }

    pub fn signaling_addr(&self) -> SocketAddr {
        self.signaling_addr
    }

    pub fn admin_addr(&self) -> Option<SocketAddr> {
        self.admin_addr
    }

    /// Resolves once the server stops, by shutdown or a crash fault.
    pub async fn stopped(&self) {
        self.hub.shutdown.cancelled().await;
    }

    pub async fn shutdown(self) {
        self.hub.shutdown.cancel();
        for t in self.tasks {
            let _ = t.await;
        }
    }
}

async fn accept_loop(hub: Arc<Hub>, listener: TcpListener) {
    loop {
        let accepted = tokio::select! {
            _ = hub.shutdown.cancelled() => return,
            r = listener.accept() => r,
        };
        match accepted {
            Ok((stream, peer)) => {
                tokio::spawn(serve_connection(hub.clone(), stream, peer));
            }
            Err(e) => {
                tracing::warn!(error = %e, "accept failed");
                tokio::time::sleep(Duration::from_millis(50)).await;
            }
        }
    }
}

async fn serve_connection(hub: Arc<Hub>, stream: TcpStream, peer: SocketAddr) {
    let _ = stream.set_nodelay(true);
    let local = match stream.local_addr() {
        Ok(a) => a,
        Err(_) => return,
    };
    let conn = tokio::select! {
        _ = hub.shutdown.cancelled() => return,
        c = accept_secure(Box::new(stream)) => c,
    };
    let conn = match conn {
        Ok(c) => c,
        Err(e) => {
            tracing::debug!(%peer, error = %e, "handshake failed");
            return;
        }
    };
    let mut reader = conn.reader;
    let mut ctx = ConnCtx::new(conn.sender.clone(), peer, local);
    loop {
        let next = tokio::select! {
            _ = hub.shutdown.cancelled() => {
                conn.writer.abort();
                return;
            }
            _ = ctx.kick.cancelled() => break,
            r = reader.next() => r,
        };
        match next {
            Ok(Some(env)) => {
                if hub.handle(&mut ctx, env).await.is_break() {
                    break;
                }
            }
            Ok(None) => break,
            Err(e) => {
                tracing::debug!(%peer, error = %e, "connection dropped");
                break;
            }
        }
    }
    if hub.shutdown.is_cancelled() {
        conn.writer.abort();
        return;
    }
    hub.connection_closed(&ctx);
    ctx.sender.close();
}

async fn reaper(hub: Arc<Hub>) {
    let period = Duration::from_millis((hub.config.heartbeat_ms / 2).max(10));
    let mut tick = tokio::time::interval(period);
    loop {
        tokio::select! {
            _ = hub.shutdown.cancelled() => return,
            _ = tick.tick() => hub.reap(),
        }
    }
}

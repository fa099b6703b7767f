//! Per-user client daemon.
//!
//! [`Daemon`] owns an [`Engine`] (server session, calls, chat, transfers)
//! and the loopback control API that the CLI and web console talk to.

pub mod config;
pub mod control;
pub mod engine;
pub mod events;
pub mod link;
pub mod media;
pub mod transfer;

use std::net::SocketAddr;
use std::sync::Arc;

pub use config::{DaemonConfig, Overrides};
pub use control::{ClientError, ControlClient};
pub use engine::{Engine, EngineError, RuntimeOptions};
pub use events::{ControlEvent, EventKind};

pub struct Daemon {
    pub engine: Arc<Engine>,
    control_addr: SocketAddr,
}

impl Daemon {
    pub async fn start(config: DaemonConfig, options: RuntimeOptions) -> Result<Self, EngineError> {
        let port = config.control_port;
        let engine = Engine::start(config, options).await?;
        let control_addr = match control::serve(engine.clone(), port).await {
            Ok(a) => a,
            Err(e) => {
                engine.shutdown().await;
                return Err(e.into());
            }
        };
        Ok(Self { engine, control_addr })
    }

    pub fn control_addr(&self) -> SocketAddr {
        self.control_addr
    }

    pub async fn client(&self) -> Result<ControlClient, ClientError> {
        ControlClient::connect(self.control_addr).await
    }

    /// Sends CALL_END for a live call, then stops every task.
    pub async fn shutdown(&self) {
        self.engine.shutdown().await;
    }
}

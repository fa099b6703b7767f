#![allow(dead_code)]

use std::path::Path;
use std::time::Duration;

use peervoip_node::{ControlClient, Daemon, DaemonConfig, RuntimeOptions};
use peervoip_server::{Server, ServerConfig};
use serde_json::{json, Value};
use tokio::sync::mpsc::UnboundedReceiver;

pub const WAIT: Duration = Duration::from_secs(10);
pub const PASSWORD: &str = "correct horse";

pub async fn server(dir: &Path, tweak: impl FnOnce(&mut ServerConfig)) -> Server {
    let mut cfg = ServerConfig::ephemeral(dir);
    cfg.admin_token = Some("admin-secret".into());
    tweak(&mut cfg);
    Server::start(cfg).await.unwrap()
}

pub fn node_config(server: &Server, dir: &Path) -> DaemonConfig {
    DaemonConfig {
        heartbeat_secs: 1.0,
        reconnect_base_ms: 100,
        reconnect_max_ms: 400,
        ..DaemonConfig::ephemeral(server.signaling_addr(), dir)
    }
}

pub struct Node {
    pub name: String,
    pub daemon: Daemon,
    pub ctl: ControlClient,
    pub events: UnboundedReceiver<Value>,
}

impl Node {
    pub async fn start(cfg: DaemonConfig, name: &str) -> Self {
        Self::with_options(cfg, RuntimeOptions::default(), name).await
    }

    pub async fn with_options(cfg: DaemonConfig, options: RuntimeOptions, name: &str) -> Self {
        let daemon = Daemon::start(cfg, options).await.unwrap();
        assert!(daemon.engine.wait_connected(WAIT).await, "daemon never reached the server");
        let ctl = daemon.client().await.unwrap();
        let events = ctl.subscribe().await.unwrap();
        let mut node = Self {
            name: name.into(),
            daemon,
            ctl,
            events,
        };
        let snap = node.next_event(|e| e["event"] == "snapshot").await;
        assert_eq!(snap["seq"], 0);
        node
    }

    /// Signs up (tolerating an existing account) and logs in.
    pub async fn online(cfg: DaemonConfig, name: &str) -> Self {
        let node = Self::start(cfg, name).await;
        node.login().await;
        node
    }

    pub async fn login(&self) -> Value {
        match self
            .ctl
            .call("signup", json!({"username": self.name, "password": PASSWORD}))
            .await
        {
            Ok(_) => {}
            Err(e) if e.code() == Some("USERNAME_TAKEN") => {}
            Err(e) => panic!("signup {}: {e}", self.name),
        }
        self.ctl
            .call("login", json!({"username": self.name, "password": PASSWORD}))
            .await
            .unwrap()
    }

    pub async fn call(&self, method: &str, params: Value) -> Value {
        self.ctl
            .call(method, params)
            .await
            .unwrap_or_else(|e| panic!("{} {method}: {e}", self.name))
    }

    pub async fn call_err(&self, method: &str, params: Value) -> String {
        match self.ctl.call(method, params).await {
            Ok(v) => panic!("{} {method} unexpectedly succeeded: {v}", self.name),
            Err(e) => e.code().unwrap_or("?").to_string(),
        }
    }

    /// Next event matching `pred`, skipping others.
    pub async fn next_event(&mut self, pred: impl Fn(&Value) -> bool) -> Value {
        let deadline = tokio::time::Instant::now() + WAIT;
        loop {
            let ev = tokio::time::timeout_at(deadline, self.events.recv())
                .await
                .unwrap_or_else(|_| panic!("{}: timed out waiting for event", self.name))
                .expect("event stream closed");
            if pred(&ev) {
                return ev;
            }
        }
    }

    pub async fn call_state(&mut self, state: &str) -> Value {
        self.next_event(|e| e["event"] == "call-state" && e["data"]["state"] == state)
            .await
    }

    pub async fn transfer_done(&mut self, id: u64) -> Value {
        self.next_event(|e| {
            e["event"] == "file-progress"
                && e["data"]["transfer_id"] == id
                && matches!(e["data"]["state"].as_str(), Some("complete" | "failed" | "declined"))
        })
        .await["data"]
            .clone()
    }
}

/// Places a call from `a` to `b`, answers it and waits until both are active.
pub async fn connect_call(a: &mut Node, b: &mut Node) -> u64 {
    let r = a.call("start_call", json!({"to": b.name})).await;
    let call_id = r["call_id"].as_u64().unwrap();
    let inc = b.next_event(|e| e["event"] == "call-incoming").await;
    assert_eq!(inc["data"]["call_id"], call_id);
    assert_eq!(inc["data"]["from"], a.name.as_str());
    b.call("accept_call", json!({"call_id": call_id})).await;
    a.call_state("active").await;
    b.call_state("active").await;
    call_id
}

pub fn write_file(dir: &Path, name: &str, len: usize) -> std::path::PathBuf {
    let data: Vec<u8> = (0..len).map(|i| (i * 31 % 251) as u8).collect();
    let p = dir.join(name);
    std::fs::write(&p, data).unwrap();
    p
}

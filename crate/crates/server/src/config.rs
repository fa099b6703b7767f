use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use peervoip_core::files::{Blocklist, DEFAULT_MAX_FILE_BYTES};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ServerConfig {
    pub listen: SocketAddr,
    /// Admin HTTP endpoint; `None` disables it.
    pub admin_listen: Option<SocketAddr>,
    pub data_dir: PathBuf,
    pub heartbeat_ms: u64,
    /// Inclusive UDP port range for relayed media; `None` uses ephemeral ports.
    pub media_ports: Option<(u16, u16)>,
    pub force_relay_media: bool,
    /// Journal chats that pass through the server.
    pub monitor: bool,
    /// In monitored mode, also journal file offer metadata (never content).
    pub journal_file_offers: bool,
    pub blocklist: Blocklist,
    pub max_file_bytes: u64,
    /// Bearer token accepted by the admin endpoint.
    pub admin_token: Option<String>,
    /// Users whose session token also grants admin access.
    pub admins: Vec<String>,
    pub pbkdf2_iterations: u32,
    /// Lead time between ACTIVE and the shared media epoch.
    pub media_lead_ms: u64,
    pub key_exchange_timeout_ms: u64,
    pub proxy: Option<ProxyConfig>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            listen: "0.0.0.0:5060".parse().expect("static addr"),
            admin_listen: Some("127.0.0.1:8080".parse().expect("static addr")),
            data_dir: PathBuf::from("peervoip-data"),
            heartbeat_ms: 5_000,
            media_ports: Some((40_000, 40_100)),
            force_relay_media: false,
            monitor: true,
            journal_file_offers: true,
            blocklist: Blocklist::default(),
            max_file_bytes: DEFAULT_MAX_FILE_BYTES,
            admin_token: None,
            admins: Vec::new(),
            pbkdf2_iterations: peervoip_core::auth::DEFAULT_ITERATIONS,
            media_lead_ms: 100,
            key_exchange_timeout_ms: 10_000,
            proxy: None,
        }
    }
}

impl ServerConfig {
    /// Loopback-only, ephemeral ports, cheap hashing: for tests and the bench.
    pub fn ephemeral(data_dir: &Path) -> Self {
        Self {
            listen: "127.0.0.1:0".parse().expect("static addr"),
            admin_listen: Some("127.0.0.1:0".parse().expect("static addr")),
            data_dir: data_dir.to_path_buf(),
            media_ports: None,
            pbkdf2_iterations: 1_000,
            ..Self::default()
        }
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(toml::from_str(&text)?)
    }
}

/// Multi-proxy mode: this server's id, its neighbours and a static
/// topology seed. Neighbour RTTs are re-measured by PING/PONG.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProxyConfig {
    pub id: String,
    #[serde(default)]
    pub neighbors: Vec<Neighbor>,
    #[serde(default)]
    pub edges: Vec<Edge>,
    /// Users homed at other proxies, for route computation.
    #[serde(default)]
    pub attachments: BTreeMap<String, String>,
    #[serde(default = "default_probe_ms")]
    pub probe_interval_ms: u64,
}

fn default_probe_ms() -> u64 {
    2_000
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Neighbor {
    pub id: String,
    pub addr: SocketAddr,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Edge {
    pub a: String,
    pub b: String,
    pub rtt_ms: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_with_proxy() {
        let text = r#"
            listen = "127.0.0.1:6000"
            monitor = false
            blocklist = ["exe", "bat"]
            [proxy]
            id = "p1"
            neighbors = [{ id = "p2", addr = "127.0.0.1:6001" }]
            edges = [{ a = "p1", b = "p2", rtt_ms = 12.5 }]
        "#;
        let cfg: ServerConfig = toml::from_str(text).unwrap();
        assert_eq!(cfg.listen.port(), 6000);
        assert!(!cfg.monitor);
        assert!(cfg.blocklist.is_blocked("x.BAT"));
        let p = cfg.proxy.unwrap();
        assert_eq!(p.probe_interval_ms, 2_000);
        assert_eq!(p.edges[0].rtt_ms, 12.5);
        assert_eq!(cfg.heartbeat_ms, 5_000);
    }
}

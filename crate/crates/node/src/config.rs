//! Daemon settings. Precedence: CLI flags > environment > config file > defaults.

use std::path::{Path, PathBuf};
use std::time::Duration;

use peervoip_core::files::{Blocklist, DEFAULT_MAX_FILE_BYTES};
use peervoip_core::media::DEFAULT_DEPTH;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const ENV_SERVER: &str = "PEERVOIP_SERVER";
pub const ENV_CONFIG: &str = "PEERVOIP_CONFIG";
pub const DEFAULT_CONTROL_PORT: u16 = 7777;
pub const DEFAULT_SIGNALING_PORT: u16 = 5060;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("parsing {path}: {source}")]
    Parse { path: PathBuf, source: toml::de::Error },
    #[error("invalid {var}: {value:?}")]
    Env { var: &'static str, value: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DaemonConfig {
    /// Server host name or address.
    pub server: String,
    /// Server signaling port.
    pub port: u16,
    /// Inclusive UDP port range for media; `[0, 0]` picks an ephemeral port.
    pub media_ports: [u16; 2],
    /// TCP port for direct peer links; 0 picks an ephemeral port.
    pub p2p_port: u16,
    pub heartbeat_secs: f64,
    pub jitter_depth: usize,
    pub max_file_bytes: u64,
    pub blocklist: Vec<String>,
    /// Chat goes through the server (and its journal) when true, over a
    /// direct peer link otherwise.
    pub monitored: bool,
    /// Ask the server to relay call media.
    pub relay_media: bool,
    /// Loopback-only control API port; 0 picks an ephemeral port.
    pub control_port: u16,
    pub download_dir: PathBuf,
    /// Web console build served on the control port.
    pub assets_dir: Option<PathBuf>,
    pub reconnect_base_ms: u64,
    pub reconnect_max_ms: u64,
    pub log_level: String,
}

impl Default for DaemonConfig {
    fn default() -> Self {
        Self {
            server: "127.0.0.1".into(),
            port: DEFAULT_SIGNALING_PORT,
            media_ports: [42000, 42099],
            p2p_port: 0,
            heartbeat_secs: 5.0,
            jitter_depth: DEFAULT_DEPTH,
            max_file_bytes: DEFAULT_MAX_FILE_BYTES,
            blocklist: vec!["exe".into()],
            monitored: true,
            relay_media: false,
            control_port: DEFAULT_CONTROL_PORT,
            download_dir: PathBuf::from("downloads"),
            assets_dir: None,
            reconnect_base_ms: 1000,
            reconnect_max_ms: 30_000,
            log_level: "info".into(),
        }
    }
}

/// Values supplied on the command line; `None` leaves the lower layers alone.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub config: Option<PathBuf>,
    pub server: Option<String>,
    pub port: Option<u16>,
    pub monitored: Option<bool>,
    pub relay_media: Option<bool>,
    pub control_port: Option<u16>,
    pub log_level: Option<String>,
}

impl DaemonConfig {
    /// Settings for tests and in-process harnesses: every port ephemeral.
    pub fn ephemeral(server: std::net::SocketAddr, download_dir: &Path) -> Self {
        Self {
            server: server.ip().to_string(),
            port: server.port(),
            media_ports: [0, 0],
            p2p_port: 0,
            control_port: 0,
            download_dir: download_dir.to_path_buf(),
            ..Self::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        toml::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Layers defaults, the config file, the environment and `cli`.
    pub fn resolve(cli: &Overrides, env: impl Fn(&str) -> Option<String>) -> Result<Self, ConfigError> {
        let file = cli.config.clone().or_else(|| env(ENV_CONFIG).map(PathBuf::from));
        let mut cfg = match file {
            Some(p) => Self::load(&p)?,
            None => Self::default(),
        };
        if let Some(v) = env(ENV_SERVER) {
            cfg.apply_server(&v).map_err(|_| ConfigError::Env { var: ENV_SERVER, value: v })?;
        }
        if let Some(v) = &cli.server {
            cfg.apply_server(v).map_err(|_| ConfigError::Invalid(format!("--server {v}")))?;
        }
        if let Some(p) = cli.port {
            cfg.port = p;
        }
        if let Some(m) = cli.monitored {
            cfg.monitored = m;
        }
        if let Some(r) = cli.relay_media {
            cfg.relay_media = r;
        }
        if let Some(p) = cli.control_port {
            cfg.control_port = p;
        }
        if let Some(l) = &cli.log_level {
            cfg.log_level = l.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Accepts `host` or `host:port`.
    fn apply_server(&mut self, v: &str) -> Result<(), ()> {
        let v = v.trim();
        if v.is_empty() {
            return Err(());
        }
        if let Ok(addr) = v.parse::<std::net::SocketAddr>() {
            self.server = addr.ip().to_string();
            self.port = addr.port();
            return Ok(());
        }
        match v.rsplit_once(':') {
            Some((host, port)) if !host.contains(':') => {
                self.port = port.parse().map_err(|_| ())?;
                if host.is_empty() {
                    return Err(());
                }
                self.server = host.to_string();
            }
            _ => self.server = v.trim_matches(['[', ']']).to_string(),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.port == 0 {
            return bad("signaling port must be non-zero".into());
        }
        let [lo, hi] = self.media_ports;
        if lo > hi || (lo == 0) != (hi == 0) {
            return bad(format!("media port range {lo}-{hi}"));
        }
        let in_media = |p: u16| p != 0 && lo != 0 && (lo..=hi).contains(&p);
        if in_media(self.control_port) {
            return bad(format!("control port {} inside media range", self.control_port));
        }
        if in_media(self.p2p_port) {
            return bad(format!("peer port {} inside media range", self.p2p_port));
        }
        if self.p2p_port != 0 && self.p2p_port == self.control_port {
            return bad("peer port equals control port".into());
        }
        if !(self.heartbeat_secs > 0.0 && self.heartbeat_secs <= 3600.0) {
            return bad(format!("heartbeat {}s", self.heartbeat_secs));
        }
        if !(1..=16).contains(&self.jitter_depth) {
            return bad(format!("jitter depth {}", self.jitter_depth));
        }
        if self.reconnect_base_ms == 0 || self.reconnect_max_ms < self.reconnect_base_ms {
            return bad("reconnect backoff".into());
        }
        Ok(())
    }

    pub fn heartbeat(&self) -> Duration {
        Duration::from_secs_f64(self.heartbeat_secs)
    }

    pub fn blocklist(&self) -> Blocklist {
        Blocklist::new(&self.blocklist)
    }

    pub fn server_addr(&self) -> String {
        if self.server.contains(':') {
            format!("[{}]:{}", self.server, self.port)
        } else {
            format!("{}:{}", self.server, self.port)
        }
    }

    /// Reconnect delay before attempt `n` (0-based): base, 2x base, ... capped.
    pub fn backoff(&self, attempt: u32) -> Duration {
        let ms = self
            .reconnect_base_ms
            .saturating_mul(1u64 << attempt.min(20))
            .min(self.reconnect_max_ms);
        Duration::from_millis(ms)
    }
}

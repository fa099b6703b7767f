use std::net::SocketAddr;
use std::path::PathBuf;

use anyhow::Context;
use clap::Parser;
use peervoip_server::{Server, ServerConfig};

#[derive(Debug, Parser)]
#[command(name = "peervoip-server", version, about = "Signaling, presence and relay server")]
struct Args {
    /// TOML config file; flags override its values.
    #[arg(long, env = "PEERVOIP_SERVER_CONFIG")]
    config: Option<PathBuf>,
    /// Signaling listen address.
    #[arg(long)]
    listen: Option<SocketAddr>,
    /// Admin HTTP listen address.
    #[arg(long)]
    admin_listen: Option<SocketAddr>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Journal chats routed through the server.
    #[arg(long)]
    monitor: Option<bool>,
    /// Relay every call's media through this server.
    #[arg(long)]
    relay_media: bool,
    #[arg(long, env = "PEERVOIP_ADMIN_TOKEN", hide_env_values = true)]
    admin_token: Option<String>,
    /// Users allowed to use the admin endpoint with their session token.
    #[arg(long = "admin")]
    admins: Vec<String>,
    #[arg(long, default_value = "info")]
    log_level: tracing::Level,
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    let args = Args::parse();
    tracing_subscriber::fmt().with_max_level(args.log_level).init();

    let mut cfg = match &args.config {
        Some(p) => ServerConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ServerConfig::default(),
    };
    if let Some(a) = args.listen {
        cfg.listen = a;
    }
    if let Some(a) = args.admin_listen {
        cfg.admin_listen = Some(a);
    }
    if let Some(d) = args.data_dir {
        cfg.data_dir = d;
    }
    if let Some(m) = args.monitor {
        cfg.monitor = m;
    }
    cfg.force_relay_media |= args.relay_media;
    if args.admin_token.is_some() {
        cfg.admin_token = args.admin_token;
    }
    cfg.admins.extend(args.admins);

    let server = Server::start(cfg).await?;
    tokio::select! {
        _ = tokio::signal::ctrl_c() => tracing::info!("interrupted"),
        _ = server.stopped() => {}
    }
    server.shutdown().await;
    Ok(())
}

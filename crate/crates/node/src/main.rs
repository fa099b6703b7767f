use std::net::SocketAddr;
use std::path::PathBuf;
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use peervoip_node::{ControlClient, Daemon, DaemonConfig, Overrides, RuntimeOptions};
use serde_json::{json, Value};

#[derive(Debug, Parser)]
#[command(name = "peervoip", version, about = "Client daemon and command-line front end")]
struct Cli {
    /// Server host or host:port (env PEERVOIP_SERVER).
    #[arg(long, global = true)]
    server: Option<String>,
    /// Server signaling port.
    #[arg(long, global = true)]
    port: Option<u16>,
    /// TOML config file (env PEERVOIP_CONFIG).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Route chat through the server (true) or over direct peer links (false).
    #[arg(long, global = true, num_args = 0..=1, default_missing_value = "true")]
    monitored: Option<bool>,
    /// Ask the server to relay call media.
    #[arg(long, global = true, num_args = 0..=1, default_missing_value = "true")]
    relay_media: Option<bool>,
    /// Local control API port.
    #[arg(long, global = true)]
    control_port: Option<u16>,
    #[arg(long, global = true)]
    log_level: Option<String>,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the daemon in the foreground (the default).
    Daemon,
    /// Create an account.
    Signup {
        username: String,
        #[arg(long, env = "PEERVOIP_PASSWORD", hide_env_values = true)]
        password: String,
        /// Profile picture (PNG or JPEG).
        #[arg(long)]
        picture: Option<PathBuf>,
    },
    Login {
        username: String,
        #[arg(long, env = "PEERVOIP_PASSWORD", hide_env_values = true)]
        password: String,
    },
    Logout,
    /// List users and their presence.
    Roster,
    /// Send one chat message.
    Chat { to: String, message: String },
    /// Call a user, hang up after `--seconds` and print the call statistics.
    Call {
        to: String,
        #[arg(long, default_value_t = 10.0)]
        seconds: f64,
    },
    /// Offer a file to a user.
    SendFile {
        to: String,
        path: PathBuf,
        /// Send over a direct peer link instead of the server relay.
        #[arg(long)]
        direct: bool,
    },
    /// Accept (or with --reject, decline) an offered file.
    AcceptFile {
        transfer_id: u64,
        #[arg(long)]
        reject: bool,
    },
    /// Print events as JSON lines until interrupted.
    Events,
    /// Print the daemon's statistics.
    Stats,
    /// Send one raw control request and print the reply.
    Raw {
        method: String,
        #[arg(default_value = "{}")]
        params: String,
    },
}

fn init_logging(level: &str) {
    let level: tracing::Level = level.parse().unwrap_or(tracing::Level::INFO);
    tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(std::io::stderr)
        .init();
}

fn print(v: &Value) {
    println!("{}", serde_json::to_string_pretty(v).unwrap_or_else(|_| v.to_string()));
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let overrides = Overrides {
        config: cli.config.clone(),
        server: cli.server.clone(),
        port: cli.port,
        monitored: cli.monitored,
        relay_media: cli.relay_media,
        control_port: cli.control_port,
        log_level: cli.log_level.clone(),
    };
    let config = DaemonConfig::resolve(&overrides, |k| std::env::var(k).ok())?;

    let command = cli.command.unwrap_or(Command::Daemon);
    if matches!(command, Command::Daemon) {
        init_logging(&config.log_level);
        let daemon = Daemon::start(config, RuntimeOptions::default()).await?;
        tracing::info!(control = %daemon.control_addr(), "daemon running");
        tokio::signal::ctrl_c().await?;
        tracing::info!("interrupted");
        daemon.shutdown().await;
        return Ok(());
    }

    let addr = SocketAddr::from(([127, 0, 0, 1], config.control_port));
    let client = ControlClient::connect(addr)
        .await
        .with_context(|| format!("no daemon on control port {}", config.control_port))?;
    match command {
        Command::Daemon => unreachable!(),
        Command::Signup {
            username,
            password,
            picture,
        } => {
            let picture_b64 = match picture {
                Some(p) => {
                    use base64::Engine as _;
                    let bytes = std::fs::read(&p).with_context(|| format!("reading {}", p.display()))?;
                    Some(base64::engine::general_purpose::STANDARD.encode(bytes))
                }
                None => None,
            };
            let r = client
                .call(
                    "signup",
                    json!({"username": username, "password": password, "picture_b64": picture_b64}),
                )
                .await?;
            print(&r);
        }
        Command::Login { username, password } => {
            print(&client.call("login", json!({"username": username, "password": password})).await?);
        }
        Command::Logout => print(&client.call("logout", json!({})).await?),
        Command::Roster => print(&client.call("roster", json!({})).await?),
        Command::Chat { to, message } => {
            print(&client.call("send_chat", json!({"to": to, "body": message})).await?);
        }
        Command::Call { to, seconds } => {
            let mut events = client.subscribe().await?;
            let r = client.call("start_call", json!({"to": to})).await?;
            let call_id = r["call_id"].as_u64().context("no call id")?;
            eprintln!("calling {to} (call {call_id})");
            let deadline = tokio::time::Instant::now() + Duration::from_secs(30);
            loop {
                let ev = tokio::time::timeout_at(deadline, events.recv())
                    .await
                    .context("call was not answered")?
                    .context("daemon went away")?;
                if ev["event"] == "call-state" && ev["data"]["call_id"] == call_id {
                    match ev["data"]["state"].as_str() {
                        Some("active") => break,
                        Some(s @ ("ended" | "rejected")) => bail!("call {s}: {}", ev["data"]["reason"]),
                        _ => {}
                    }
                }
            }
            eprintln!("call active for {seconds} s");
            tokio::time::sleep(Duration::from_secs_f64(seconds.max(0.0))).await;
            print(&client.call("end_call", json!({"call_id": call_id})).await?);
        }
        Command::SendFile { to, path, direct } => {
            let path = std::fs::canonicalize(&path).with_context(|| format!("{}", path.display()))?;
            print(&client.call("offer_file", json!({"to": to, "path": path, "direct": direct})).await?);
        }
        Command::AcceptFile { transfer_id, reject } => {
            print(&client.call("accept_file", json!({"transfer_id": transfer_id, "accept": !reject})).await?);
        }
        Command::Events => {
            let mut events = client.subscribe().await?;
            while let Some(ev) = events.recv().await {
                println!("{ev}");
            }
        }
        Command::Stats => print(&client.call("get_stats", json!({})).await?),
        Command::Raw { method, params } => {
            let params: Value = serde_json::from_str(&params).context("params must be JSON")?;
            print(&client.call(&method, params).await?);
        }
    }
    Ok(())
}

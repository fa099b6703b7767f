//! Neighbour RTT probing for multi-proxy mode.

use std::sync::Arc;
use std::time::{Duration, Instant};

use peervoip_core::conn::connect_secure;
use peervoip_core::protocol::{to_body, PingBody};
use peervoip_core::wire::{Kind, SignalEnvelope};
use peervoip_core::UtcMillis;
use tokio::net::TcpStream;

use crate::config::Neighbor;
use crate::hub::Hub;

const PONG_TIMEOUT: Duration = Duration::from_secs(2);

/// Keeps one connection to `neighbor` and folds each PING/PONG round trip
/// into the graph edge. Runs until the hub shuts down.
pub async fn probe_neighbor(hub: Arc<Hub>, self_id: String, neighbor: Neighbor, interval: Duration) {
    loop {
        if let Err(e) = probe_session(&hub, &self_id, &neighbor, interval).await {
            tracing::debug!(neighbor = %neighbor.id, error = %e, "probe connection lost");
        }
        tokio::select! {
            _ = hub.shutdown.cancelled() => return,
            _ = tokio::time::sleep(interval) => {}
        }
    }
}

async fn probe_session(hub: &Hub, self_id: &str, neighbor: &Neighbor, interval: Duration) -> anyhow::Result<()> {
    let stream = TcpStream::connect(neighbor.addr).await?;
    stream.set_nodelay(true)?;
    let mut conn = connect_secure(Box::new(stream)).await?;
    let mut tick = tokio::time::interval(interval);
    loop {
        tokio::select! {
            _ = hub.shutdown.cancelled() => return Ok(()),
            _ = tick.tick() => {}
        }
        let started = Instant::now();
        let body = to_body(&PingBody {
            t0: UtcMillis::now(),
            server_time: None,
        });
        conn.sender.send(SignalEnvelope::new(Kind::Ping, "", "", 0, body))?;
        let pong = tokio::time::timeout(PONG_TIMEOUT, async {
            loop {
                match conn.reader.next().await? {
                    Some(env) if env.kind == Kind::Pong => return Ok::<_, anyhow::Error>(()),
                    Some(_) => continue,
                    None => anyhow::bail!("neighbor closed the connection"),
                }
            }
        })
        .await;
        match pong {
            Ok(Ok(())) => {
                let rtt = (started.elapsed().as_secs_f64() * 1000.0).max(0.001);
                let smoothed = hub.graph().observe_rtt(self_id, &neighbor.id, rtt)?;
                tracing::trace!(neighbor = %neighbor.id, rtt, smoothed, "probe");
            }
            Ok(Err(e)) => return Err(e),
            Err(_) => tracing::debug!(neighbor = %neighbor.id, "probe timed out"),
        }
    }
}

//! UDP relay for calls whose media cannot or should not flow directly.
//!
//! One socket per call. Datagrams from one registered endpoint go to the
//! other; anything else is dropped. The relay never opens frames.

use std::io;
use std::net::{IpAddr, SocketAddr};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use peervoip_core::wire::MAX_DATAGRAM_LEN;
use rand::Rng;
use tokio::net::UdpSocket;
use tokio::task::JoinHandle;

#[derive(Debug, Default)]
pub struct RelayCounters {
    pub forwarded: AtomicU64,
    pub dropped_foreign: AtomicU64,
}

/// A running relay. Dropping it stops forwarding and frees the port.
#[derive(Debug)]
pub struct RelayHandle {
    addr: SocketAddr,
    task: JoinHandle<()>,
}

impl RelayHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }
}

impl Drop for RelayHandle {
    fn drop(&mut self) {
        self.task.abort();
    }
}

async fn bind_in_range(ip: IpAddr, ports: Option<(u16, u16)>) -> io::Result<UdpSocket> {
    let Some((lo, hi)) = ports else {
        return UdpSocket::bind(SocketAddr::new(ip, 0)).await;
    };
    let span = u32::from(hi.saturating_sub(lo)) + 1;
    let start = rand::thread_rng().gen_range(0..span);
    for i in 0..span {
        let port = lo + ((start + i) % span) as u16;
        if let Ok(s) = UdpSocket::bind(SocketAddr::new(ip, port)).await {
            return Ok(s);
        }
    }
    Err(io::Error::new(io::ErrorKind::AddrInUse, "media port range exhausted"))
}

pub async fn start_relay(
    ip: IpAddr,
    ports: Option<(u16, u16)>,
    a: SocketAddr,
    b: SocketAddr,
    counters: Arc<RelayCounters>,
) -> io::Result<RelayHandle> {
    let socket = bind_in_range(ip, ports).await?;
    let addr = socket.local_addr()?;
    tracing::debug!(%addr, %a, %b, "media relay up");
    let task = tokio::spawn(async move {
        let mut buf = vec![0u8; MAX_DATAGRAM_LEN + 64];
        loop {
            let (n, src) = match socket.recv_from(&mut buf).await {
                Ok(r) => r,
                // ICMP unreachable from a peer that went away surfaces here
                Err(e) if e.kind() == io::ErrorKind::ConnectionRefused => continue,
                Err(e) => {
                    tracing::debug!(error = %e, "media relay stopped");
                    return;
                }
            };
            let dst = if src == a {
                b
            } else if src == b {
                a
            } else {
                counters.dropped_foreign.fetch_add(1, Ordering::Relaxed);
                continue;
            };
            if socket.send_to(&buf[..n], dst).await.is_ok() {
                counters.forwarded.fetch_add(1, Ordering::Relaxed);
            }
        }
    });
    Ok(RelayHandle { addr, task })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::time::Duration;

    #[tokio::test]
    async fn forwards_between_endpoints_and_drops_strangers() {
        let lo: IpAddr = "127.0.0.1".parse().unwrap();
        let a = UdpSocket::bind((lo, 0)).await.unwrap();
        let b = UdpSocket::bind((lo, 0)).await.unwrap();
        let stranger = UdpSocket::bind((lo, 0)).await.unwrap();
        let counters = Arc::new(RelayCounters::default());
        let relay = start_relay(lo, None, a.local_addr().unwrap(), b.local_addr().unwrap(), counters.clone())
            .await
            .unwrap();
        let mut buf = [0u8; 64];
        a.send_to(b"ping", relay.addr()).await.unwrap();
        let (n, from) = b.recv_from(&mut buf).await.unwrap();
        assert_eq!((&buf[..n], from), (&b"ping"[..], relay.addr()));
        b.send_to(b"pong", relay.addr()).await.unwrap();
        let (n, _) = a.recv_from(&mut buf).await.unwrap();
        assert_eq!(&buf[..n], b"pong");
        stranger.send_to(b"junk", relay.addr()).await.unwrap();
        tokio::time::sleep(Duration::from_millis(50)).await;
        assert_eq!(counters.dropped_foreign.load(Ordering::Relaxed), 1);
        assert_eq!(counters.forwarded.load(Ordering::Relaxed), 2);
    }

    #[tokio::test]
    async fn port_range_is_respected() {
        let lo: IpAddr = "127.0.0.1".parse().unwrap();
        let probe = UdpSocket::bind((lo, 0)).await.unwrap();
        let port = probe.local_addr().unwrap().port();
        drop(probe);
        let x: SocketAddr = "127.0.0.1:9".parse().unwrap();
        let r = start_relay(lo, Some((port, port)), x, x, Default::default()).await.unwrap();
        assert_eq!(r.addr().port(), port);
        let second = start_relay(lo, Some((port, port)), x, x, Default::default()).await;
        assert_eq!(second.unwrap_err().kind(), io::ErrorKind::AddrInUse);
    }
}

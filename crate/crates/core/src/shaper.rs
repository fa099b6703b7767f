//! Link emulation: token-bucket rate limiting, fixed added latency and
//! seeded datagram drops, applied at the socket-wrapper layer.
//!
//! Each endpoint owns one link with an egress and an ingress direction.
//! Stream traffic is cut into segments of at most [`SEGMENT_BYTES`]; a
//! segment departs once both the committed bucket (rate, 64 KiB capacity)
//! and the peak bucket (rate, one segment capacity) hold enough tokens,
//! and is delivered after its serialization time plus the added latency.

use std::fmt;
use std::io;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt};
use tokio::net::UdpSocket;
use tokio::sync::mpsc;
use tokio::time::{sleep_until, Instant};

pub const SEGMENT_BYTES: usize = 1460;
pub const DEFAULT_BUCKET_BYTES: usize = 64 * 1024;
pub const REFERENCE_RATE_BPS: u64 = 2_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkConfig {
    /// `None` disables rate limiting.
    pub rate_bps: Option<u64>,
    pub bucket_bytes: usize,
    pub latency_ms: f64,
    pub drop_prob: f64,
    pub seed: u64,
}

impl Default for LinkConfig {
    fn default() -> Self {
        Self::unlimited()
    }
}

impl LinkConfig {
    pub fn unlimited() -> Self {
        Self {
            rate_bps: None,
            bucket_bytes: DEFAULT_BUCKET_BYTES,
            latency_ms: 0.0,
            drop_prob: 0.0,
            seed: 0,
        }
    }

    pub fn rate(rate_bps: u64) -> Self {
        Self {
            rate_bps: Some(rate_bps),
            ..Self::unlimited()
        }
    }

    pub fn with_latency_ms(mut self, ms: f64) -> Self {
        self.latency_ms = ms;
        self
    }

    pub fn with_drop(mut self, prob: f64, seed: u64) -> Self {
        self.drop_prob = prob;
        self.seed = seed;
        self
    }

    pub fn is_transparent(&self) -> bool {
        self.rate_bps.is_none() && self.latency_ms <= 0.0 && self.drop_prob <= 0.0
    }

    fn latency(&self) -> Duration {
        Duration::from_secs_f64(self.latency_ms.max(0.0) / 1000.0)
    }

    fn serialization(&self, bytes: usize) -> Duration {
        match self.rate_bps {
            Some(r) if r > 0 => Duration::from_secs_f64(bytes as f64 * 8.0 / r as f64),
            _ => Duration::ZERO,
        }
    }
}

/// Both directions of one endpoint's access link.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LinkShape {
    pub egress: LinkConfig,
    pub ingress: LinkConfig,
}

impl LinkShape {
    pub fn symmetric(cfg: LinkConfig) -> Self {
        Self {
            egress: cfg,
            ingress: LinkConfig {
                seed: cfg.seed ^ 0x9e37_79b9_7f4a_7c15,
                ..cfg
            },
        }
    }

    pub fn is_transparent(&self) -> bool {
        self.egress.is_transparent() && self.ingress.is_transparent()
    }
}

/// Classic token bucket, tracked as a departure schedule.
#[derive(Debug, Clone)]
pub struct TokenBucket {
    rate_bytes_per_s: f64,
    capacity: f64,
    tokens: f64,
    last: Instant,
}

impl TokenBucket {
    pub fn new(rate_bps: u64, capacity_bytes: usize, now: Instant) -> Self {
        Self {
            rate_bytes_per_s: rate_bps as f64 / 8.0,
            capacity: capacity_bytes as f64,
            tokens: capacity_bytes as f64,
            last: now,
        }
    }

    /// Earliest instant at or after `now` when `bytes` may depart; the
    /// tokens are spent at that instant.
    pub fn reserve(&mut self, bytes: usize, now: Instant) -> Instant {
        let now = now.max(self.last);
        let elapsed = now.duration_since(self.last).as_secs_f64();
        self.tokens = (self.tokens + elapsed * self.rate_bytes_per_s).min(self.capacity);
        self.last = now;
        let need = bytes as f64;
        if self.tokens >= need {
            self.tokens -= need;
            return now;
        }
        let wait = (need - self.tokens) / self.rate_bytes_per_s;
        let depart = now + Duration::from_secs_f64(wait);
        self.tokens = 0.0;
        self.last = depart;
        depart
    }
}

/// Committed plus peak bucket, both at the link rate.
#[derive(Debug, Clone)]
struct Pacer {
    committed: TokenBucket,
    peak: TokenBucket,
}

impl Pacer {
    fn new(cfg: &LinkConfig, now: Instant) -> Option<Self> {
        let rate = cfg.rate_bps.filter(|r| *r > 0)?;
        Some(Self {
            committed: TokenBucket::new(rate, cfg.bucket_bytes.max(SEGMENT_BYTES), now),
            peak: TokenBucket::new(rate, SEGMENT_BYTES, now),
        })
    }

    fn reserve(&mut self, bytes: usize, now: Instant) -> Instant {
        let t = self.committed.reserve(bytes, now);
        self.peak.reserve(bytes, t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    Egress,
    Ingress,
}

/// One shaping decision. `added_us` excludes queueing, so traces depend
/// only on the seed and the packet sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TraceEvent {
    pub direction: Direction,
    pub index: u64,
    pub len: usize,
    pub dropped: bool,
    pub added_us: u64,
}

pub type Trace = Arc<Mutex<Vec<TraceEvent>>>;

/// Per-direction scheduler shared by streams and datagrams.
#[derive(Debug)]
struct Scheduler {
    cfg: LinkConfig,
    direction: Direction,
    pacer: Option<Arc<Mutex<Pacer>>>,
    rng: ChaCha8Rng,
    index: u64,
    trace: Option<Trace>,
}

impl Scheduler {
    fn new(cfg: LinkConfig, direction: Direction, trace: Option<Trace>) -> Self {
        let pacer = Pacer::new(&cfg, Instant::now()).map(|p| Arc::new(Mutex::new(p)));
        Self::with_pacer(cfg, direction, pacer, trace)
    }

    fn with_pacer(cfg: LinkConfig, direction: Direction, pacer: Option<Arc<Mutex<Pacer>>>, trace: Option<Trace>) -> Self {
        Self {
            pacer,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
            direction,
            index: 0,
            trace,
        }
    }

    /// Returns (departure, delivery) or `None` when the packet is dropped.
    fn schedule(&mut self, len: usize, now: Instant, droppable: bool) -> Option<(Instant, Instant)> {
        let dropped = droppable && self.cfg.drop_prob > 0.0 && self.rng.gen_bool(self.cfg.drop_prob.min(1.0));
        let added = self.cfg.serialization(len) + self.cfg.latency();
        if let Some(t) = &self.trace {
            t.lock().expect("trace lock").push(TraceEvent {
                direction: self.direction,
                index: self.index,
                len,
                dropped,
                added_us: added.as_micros() as u64,
            });
        }
        self.index += 1;
        if dropped {
            return None;
        }
        let depart = match &mut self.pacer {
            Some(p) => p.lock().expect("pacer lock").reserve(len, now),
            None => now,
        };
        Some((depart, depart + added))
    }
}

pub trait AsyncStream: AsyncRead + AsyncWrite + Unpin + Send {}
impl<T: AsyncRead + AsyncWrite + Unpin + Send> AsyncStream for T {}

pub type BoxStream = Box<dyn AsyncStream>;

/// Wraps a reliable byte stream. Returns the stream unchanged when the
/// shape is transparent.
pub fn shape_stream<S>(inner: S, shape: LinkShape) -> BoxStream
where
    S: AsyncRead + AsyncWrite + Unpin + Send + 'static,
{
    if shape.is_transparent() {
        return Box::new(inner);
    }
    wrap_stream(
        inner,
        Scheduler::new(shape.egress, Direction::Egress, None),
        Scheduler::new(shape.ingress, Direction::Ingress, None),
    )
}

fn wrap_stream<S>(inner: S, egress: Scheduler, ingress: Scheduler) -> BoxStream
where
    S: AsyncRead + AsyncWrite + Unpin + Send + 'static,
{
    let (app, near) = tokio::io::duplex(DEFAULT_BUCKET_BYTES);
    let (inner_r, inner_w) = tokio::io::split(inner);
    let (near_r, near_w) = tokio::io::split(near);
    tokio::spawn(pump(near_r, inner_w, egress));
    tokio::spawn(pump(inner_r, near_w, ingress));
    Box::new(app)
}

/// One endpoint's access link. Every stream and socket wrapped through
/// the same `AccessLink` draws on one rate budget per direction, so
/// signaling, media and file traffic compete as on a real uplink.
/// Drop decisions stay per socket.
#[derive(Clone)]
pub struct AccessLink {
    shape: LinkShape,
    egress: Option<Arc<Mutex<Pacer>>>,
    ingress: Option<Arc<Mutex<Pacer>>>,
}

impl fmt::Debug for AccessLink {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AccessLink").field("shape", &self.shape).finish_non_exhaustive()
    }
}

impl AccessLink {
    pub fn new(shape: LinkShape) -> Self {
        let now = Instant::now();
        Self {
            egress: Pacer::new(&shape.egress, now).map(|p| Arc::new(Mutex::new(p))),
            ingress: Pacer::new(&shape.ingress, now).map(|p| Arc::new(Mutex::new(p))),
            shape,
        }
    }

    pub fn shape(&self) -> LinkShape {
        self.shape
    }

    fn schedulers(&self, trace: Option<Trace>) -> (Scheduler, Scheduler) {
        (
            Scheduler::with_pacer(self.shape.egress, Direction::Egress, self.egress.clone(), trace.clone()),
            Scheduler::with_pacer(self.shape.ingress, Direction::Ingress, self.ingress.clone(), trace),
        )
    }

    pub fn stream<S>(&self, inner: S) -> BoxStream
    where
        S: AsyncRead + AsyncWrite + Unpin + Send + 'static,
    {
        if self.shape.is_transparent() {
            return Box::new(inner);
        }
        let (e, i) = self.schedulers(None);
        wrap_stream(inner, e, i)
    }

    pub fn udp(&self, socket: UdpSocket) -> ShapedUdp {
        let (e, i) = self.schedulers(None);
        ShapedUdp::from_schedulers(socket, self.shape, e, i, None)
    }
}

async fn pump<R, W>(mut src: R, mut dst: W, mut sched: Scheduler)
where
    R: AsyncRead + Unpin + Send + 'static,
    W: AsyncWrite + Unpin + Send + 'static,
{
    let (tx, mut rx) = mpsc::unbounded_channel::<(Instant, Vec<u8>)>();
    let writer = tokio::spawn(async move {
        while let Some((at, buf)) = rx.recv().await {
            sleep_until(at).await;
            if dst.write_all(&buf).await.is_err() {
                return;
            }
        }
        let _ = dst.shutdown().await;
    });
    let mut buf = vec![0u8; SEGMENT_BYTES];
    loop {
        let n = match src.read(&mut buf).await {
            Ok(0) | Err(_) => break,
            Ok(n) => n,
        };
        let (depart, deliver) = sched
            .schedule(n, Instant::now(), false)
            .expect("stream segments are never dropped");
        sleep_until(depart).await;
        if tx.send((deliver, buf[..n].to_vec())).is_err() {
            break;
        }
    }
    drop(tx);
    let _ = writer.await;
}

type Inbound = mpsc::UnboundedReceiver<(Instant, Vec<u8>, SocketAddr)>;

/// A UDP socket behind an emulated link.
pub struct ShapedUdp {
    socket: Arc<UdpSocket>,
    egress: Option<EgressSide>,
    ingress: Option<tokio::sync::Mutex<Inbound>>,
    trace: Option<Trace>,
}

struct EgressSide {
    sched: Mutex<Scheduler>,
    tx: mpsc::UnboundedSender<(Instant, Vec<u8>, SocketAddr)>,
}

impl ShapedUdp {
    pub fn new(socket: UdpSocket, shape: LinkShape) -> Self {
        Self::build(socket, shape, None)
    }

    /// Like [`ShapedUdp::new`] but records every shaping decision.
    pub fn with_trace(socket: UdpSocket, shape: LinkShape) -> Self {
        Self::build(socket, shape, Some(Arc::default()))
    }

    fn build(socket: UdpSocket, shape: LinkShape, trace: Option<Trace>) -> Self {
        let e = Scheduler::new(shape.egress, Direction::Egress, trace.clone());
        let i = Scheduler::new(shape.ingress, Direction::Ingress, trace.clone());
        Self::from_schedulers(socket, shape, e, i, trace)
    }

    fn from_schedulers(
        socket: UdpSocket,
        shape: LinkShape,
        egress_sched: Scheduler,
        mut sched: Scheduler,
        trace: Option<Trace>,
    ) -> Self {
        let socket = Arc::new(socket);
        let egress = (!shape.egress.is_transparent()).then(|| {
            let (tx, mut rx) = mpsc::unbounded_channel::<(Instant, Vec<u8>, SocketAddr)>();
            let sock = socket.clone();
            tokio::spawn(async move {
                while let Some((at, buf, to)) = rx.recv().await {
                    sleep_until(at).await;
                    let _ = sock.send_to(&buf, to).await;
                }
            });
            EgressSide {
                sched: Mutex::new(egress_sched),
                tx,
            }
        });
        let ingress = (!shape.ingress.is_transparent()).then(|| {
            let (tx, rx) = mpsc::unbounded_channel();
            let sock = socket.clone();
            tokio::spawn(async move {
                let mut buf = vec![0u8; 65_536];
                loop {
                    let Ok((n, from)) = sock.recv_from(&mut buf).await else {
                        return;
                    };
                    if let Some((_, deliver)) = sched.schedule(n, Instant::now(), true) {
                        if tx.send((deliver, buf[..n].to_vec(), from)).is_err() {
                            return;
                        }
                    }
                }
            });
            tokio::sync::Mutex::new(rx)
        });
        Self {
            socket,
            egress,
            ingress,
            trace,
        }
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.socket.local_addr()
    }

    pub fn trace(&self) -> Option<Vec<TraceEvent>> {
        self.trace.as_ref().map(|t| t.lock().expect("trace lock").clone())
    }

    /// Reports success for dropped datagrams, as a real lossy link would.
    pub async fn send_to(&self, buf: &[u8], to: SocketAddr) -> io::Result<usize> {
        let Some(e) = &self.egress else {
            return self.socket.send_to(buf, to).await;
        };
        let slot = e.sched.lock().expect("scheduler lock").schedule(buf.len(), Instant::now(), true);
        if let Some((_, deliver)) = slot {
            e.tx
                .send((deliver, buf.to_vec(), to))
                .map_err(|_| io::Error::new(io::ErrorKind::BrokenPipe, "egress task stopped"))?;
        }
        Ok(buf.len())
    }

    pub async fn recv_from(&self, buf: &mut [u8]) -> io::Result<(usize, SocketAddr)> {
        let Some(rx) = &self.ingress else {
            return self.socket.recv_from(buf).await;
        };
        let (at, data, from) = rx
            .lock()
            .await
            .recv()
            .await
            .ok_or_else(|| io::Error::new(io::ErrorKind::BrokenPipe, "ingress task stopped"))?;
        sleep_until(at).await;
        let n = data.len().min(buf.len());
        buf[..n].copy_from_slice(&data[..n]);
        Ok((n, from))
    }
}

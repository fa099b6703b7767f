//! Chat round trips in direct and monitored mode.
//!
//! One round trip: the initiator sends a message, the peer's responder
//! task echoes it back on receipt, and the clock stops when the echo
//! arrives. Both legs take the same route, so the monitored figure
//! includes two server hops and two journal appends.

use std::sync::Arc;
use std::time::{Duration, Instant};

use peervoip_core::media::stats::{median, percentile};
use peervoip_core::shaper::LinkShape;
use peervoip_node::{ControlEvent, Engine, EventKind};
use serde::Serialize;
use tokio::sync::mpsc::UnboundedReceiver;
use tokio::task::JoinHandle;

use crate::testbed::{wait_event, Peer, TestBed};
use crate::BenchError;

const WARMUP: usize = 20;
const ECHO_WAIT: Duration = Duration::from_secs(10);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ChatMode {
    Direct,
    Monitored,
}

impl ChatMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ChatMode::Direct => "direct",
            ChatMode::Monitored => "monitored",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ChatOutcome {
    pub mode: ChatMode,
    #[serde(skip)]
    pub samples: Vec<f64>,
    pub messages: usize,
    pub median_ms: Option<f64>,
    pub p95_ms: Option<f64>,
}

impl ChatOutcome {
    fn new(mode: ChatMode, samples: Vec<f64>) -> Self {
        Self {
            mode,
            messages: samples.len(),
            median_ms: median(&samples),
            p95_ms: percentile(&samples, 95.0),
            samples,
        }
    }
}

struct Pair {
    mode: ChatMode,
    initiator: Peer,
    events: UnboundedReceiver<ControlEvent>,
    responder: Peer,
    echo: JoinHandle<()>,
    next: u64,
}

impl Pair {
    async fn round_trip(&mut self) -> Result<f64, BenchError> {
        self.next += 1;
        let body = format!("{} #{}", self.mode.as_str(), self.next);
        let start = Instant::now();
        self.initiator.engine.send_chat(&self.responder.name, &body).await?;
        let from = self.responder.name.clone();
        wait_event(&mut self.events, EventKind::MessageReceived, ECHO_WAIT, |d| {
            d["from"] == from.as_str() && d["body"] == body.as_str()
        })
        .await?;
        Ok(start.elapsed().as_secs_f64() * 1000.0)
    }
}

fn spawn_echo(engine: Arc<Engine>) -> JoinHandle<()> {
    let mut rx = engine.subscribe();
    tokio::spawn(async move {
        while let Some(ev) = rx.recv().await {
            if ev.event != EventKind::MessageReceived {
                continue;
            }
            let (Some(from), Some(body)) = (ev.data["from"].as_str(), ev.data["body"].as_str()) else {
                continue;
            };
            if let Err(e) = engine.send_chat(from, body).await {
                tracing::warn!(error = %e, "echo failed");
            }
        }
    })
}

/// Two peers per mode on one server; round trips of the modes alternate
/// so both see the same machine load.
pub struct ChatRig {
    bed: TestBed,
    pairs: Vec<Pair>,
}

impl ChatRig {
    pub async fn start(modes: &[ChatMode]) -> Result<Self, BenchError> {
        let bed = TestBed::start(|c| c.monitor = true).await?;
        let mut pairs = Vec::new();
        for &mode in modes {
            let monitored = mode == ChatMode::Monitored;
            let a = bed
                .peer(&format!("{}-a", mode.as_str()), LinkShape::default(), |c| c.monitored = monitored)
                .await?;
            let b = bed
                .peer(&format!("{}-b", mode.as_str()), LinkShape::default(), |c| c.monitored = monitored)
                .await?;
            let events = a.engine.subscribe();
            let echo = spawn_echo(b.engine.clone());
            let mut pair = Pair {
                mode,
                initiator: a,
                events,
                responder: b,
                echo,
                next: 0,
            };
            for _ in 0..WARMUP {
                pair.round_trip().await?;
            }
            pairs.push(pair);
        }
        Ok(Self { bed, pairs })
    }

    /// `messages` round trips per mode.
    pub async fn run(&mut self, messages: usize) -> Result<Vec<ChatOutcome>, BenchError> {
        let mut samples = vec![Vec::with_capacity(messages); self.pairs.len()];
        for _ in 0..messages {
            for (pair, out) in self.pairs.iter_mut().zip(samples.iter_mut()) {
                out.push(pair.round_trip().await?);
            }
        }
        Ok(self
            .pairs
            .iter()
            .zip(samples)
            .map(|(p, s)| ChatOutcome::new(p.mode, s))
            .collect())
    }

    pub async fn shutdown(self) {
        let mut peers = Vec::new();
        for p in self.pairs {
            p.echo.abort();
            peers.push(p.initiator);
            peers.push(p.responder);
        }
        self.bed.shutdown(peers).await;
    }
}

pub async fn bench_chat_delay(mode: ChatMode, messages: usize) -> Result<ChatOutcome, BenchError> {
    let mut rig = ChatRig::start(&[mode]).await?;
    let out = rig.run(messages).await;
    rig.shutdown().await;
    Ok(out?.remove(0))
}

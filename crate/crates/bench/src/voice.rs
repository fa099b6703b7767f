//! Mouth-to-ear delay over a real call between two engines.

use std::time::{Duration, Instant};

use peervoip_core::crypto::{exchange_in_memory, CipherSuite};
use peervoip_core::media::audio::{AudioSource, ChirpSource};
use peervoip_core::media::jitter::{JitterBuffer, DEFAULT_DEPTH};
use peervoip_core::media::packetizer::{Depacketizer, Packetizer, StreamParams};
use peervoip_core::media::stats::{median, percentile};
use peervoip_core::shaper::{LinkConfig, LinkShape, REFERENCE_RATE_BPS};
use peervoip_core::wire::{decode_media_frame, encode_media_frame};
use peervoip_node::EventKind;
use serde::Serialize;

use crate::testbed::{TestBed, EVENT_WAIT};
use crate::BenchError;

#[derive(Debug, Clone, Copy)]
pub struct VoiceConfig {
    pub duration: Duration,
    /// Installed on both endpoints' access links.
    pub shape: LinkShape,
    pub relay_media: bool,
}

impl Default for VoiceConfig {
    fn default() -> Self {
        Self {
            duration: Duration::from_secs(60),
            shape: LinkShape::symmetric(LinkConfig::rate(REFERENCE_RATE_BPS)),
            relay_media: false,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VoiceOutcome {
    /// Delay samples from both directions, in milliseconds.
    #[serde(skip)]
    pub samples: Vec<f64>,
    pub median_ms: Option<f64>,
    pub p95_ms: Option<f64>,
    pub loss_ratio: f64,
    pub frames_sent: u64,
    pub frames_received: u64,
    pub auth_failures: u64,
    pub setup_ms: f64,
    /// Bed start to teardown.
    pub wall_s: f64,
}

impl VoiceOutcome {
    fn from_samples(samples: Vec<f64>) -> Self {
        Self {
            median_ms: median(&samples),
            p95_ms: percentile(&samples, 95.0),
            samples,
            loss_ratio: 0.0,
            frames_sent: 0,
            frames_received: 0,
            auth_failures: 0,
            setup_ms: 0.0,
            wall_s: 0.0,
        }
    }
}

/// Places a call from `alice` to `bob`, keeps it up for `cfg.duration`
/// and hangs up. A zero duration hangs up as soon as the call is active.
pub async fn bench_voice_delay(cfg: VoiceConfig) -> Result<VoiceOutcome, BenchError> {
    let wall = Instant::now();
    let bed = TestBed::start(|_| {}).await?;
    let relay = cfg.relay_media;
    let alice = bed.peer("alice", cfg.shape, |c| c.relay_media = relay).await?;
    let bob = bed.peer("bob", cfg.shape, |c| c.relay_media = relay).await?;

    let setup = Instant::now();
    let call_id = alice
        .engine
        .start_call("bob")
        .await
        .map_err(|e| BenchError::CallSetupFailed(e.to_string()))?;
    let is_call = move |d: &serde_json::Value| d["call_id"] == call_id;
    bob.wait_for(EventKind::CallIncoming, EVENT_WAIT, is_call)
        .await
        .map_err(|e| BenchError::CallSetupFailed(e.to_string()))?;
    bob.engine
        .accept_call(call_id)
        .await
        .map_err(|e| BenchError::CallSetupFailed(e.to_string()))?;
    for p in [&alice, &bob] {
        let state = p
            .wait_for(EventKind::CallState, EVENT_WAIT, |d| {
                is_call(d) && matches!(d["state"].as_str(), Some("active" | "ended" | "rejected"))
            })
            .await
            .map_err(|e| BenchError::CallSetupFailed(e.to_string()))?;
        if state["state"] != "active" {
            return Err(BenchError::CallSetupFailed(format!("{}: {state}", p.name)));
        }
    }
    let setup_ms = setup.elapsed().as_secs_f64() * 1000.0;

    tokio::time::sleep(cfg.duration).await;

    let mine = alice.engine.end_call(Some(call_id)).await?;
    bob.wait_for(EventKind::CallState, EVENT_WAIT, |d| is_call(d) && d["state"] == "ended")
        .await?;
    let theirs = bob.engine.last_call().filter(|c| c.call_id == call_id);

    let summaries: Vec<_> = mine.into_iter().chain(theirs).collect();
    let samples: Vec<f64> = summaries.iter().flat_map(|s| s.delay_samples.iter().copied()).collect();
    let mut out = VoiceOutcome::from_samples(samples);
    if !summaries.is_empty() {
        out.loss_ratio = summaries.iter().map(|s| s.stats.loss_ratio).sum::<f64>() / summaries.len() as f64;
    }
    out.frames_sent = summaries.iter().map(|s| s.stats.frames_sent).sum();
    out.frames_received = summaries.iter().map(|s| s.stats.frames_received).sum();
    out.auth_failures = summaries.iter().map(|s| s.stats.auth_failures).sum();
    out.setup_ms = setup_ms;
    bed.shutdown(vec![alice, bob]).await;
    out.wall_s = wall.elapsed().as_secs_f64();
    Ok(out)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct PipelineCost {
    pub frames: usize,
    pub mean_ms: f64,
    pub p99_ms: f64,
    pub max_ms: f64,
}

/// Per-frame compute for packetize, seal, encode, decode, open and one
/// jitter-buffer push plus playout tick.
pub fn pipeline_cost(frames: usize) -> Result<PipelineCost, BenchError> {
    let (a, b) = exchange_in_memory(1, CipherSuite::DEFAULT).map_err(|e| BenchError::Setup(e.to_string()))?;
    let params = StreamParams::random();
    let mut tx = Packetizer::with_key(params, a.send);
    let mut rx = Depacketizer::for_stream(b.receive, params);
    let mut jitter = JitterBuffer::new(DEFAULT_DEPTH);
    let mut source = ChirpSource::new(300.0, 3000.0, 1.0, 8000);
    let mut costs = Vec::with_capacity(frames);
    for i in 0..frames {
        let pcm = source.next_frame();
        let t = Instant::now();
        let frame = tx.packetize(&pcm, i == 0).map_err(|e| BenchError::Setup(e.to_string()))?;
        let wire = encode_media_frame(&frame).map_err(|e| BenchError::Setup(e.to_string()))?;
        let parsed = decode_media_frame(&wire).map_err(|e| BenchError::Setup(e.to_string()))?;
        let opened = rx.depacketize(&parsed).map_err(|e| BenchError::Setup(e.to_string()))?;
        jitter.push(opened.extended_seq, &opened.pcm);
        std::hint::black_box(jitter.tick());
        costs.push(t.elapsed().as_secs_f64() * 1000.0);
    }
    Ok(PipelineCost {
        frames,
        mean_ms: costs.iter().sum::<f64>() / frames.max(1) as f64,
        p99_ms: percentile(&costs, 99.0).unwrap_or(0.0),
        max_ms: costs.iter().copied().fold(0.0, f64::max),
    })
}

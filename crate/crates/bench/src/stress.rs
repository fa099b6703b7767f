//! Back-to-back large relay transfers with a server memory probe.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use peervoip_core::shaper::LinkShape;
use peervoip_node::{Engine, EventKind};
use serde::Serialize;
use serde_json::Value;

use crate::file::{file_digest, write_seeded};
use crate::testbed::{wait_event, TestBed};
use crate::{panic_count, BenchError};

#[derive(Debug, Clone, Copy)]
pub struct StressConfig {
    pub files: usize,
    pub size: u64,
    pub spacing: Duration,
    /// Pause the receiver this long once the first transfer is under way.
    pub pause_receiver: Option<Duration>,
    pub seed: u64,
    pub timeout: Duration,
}

impl Default for StressConfig {
    fn default() -> Self {
        Self {
            files: crate::reference::STRESS_FILE_COUNT,
            size: crate::reference::STRESS_FILE_BYTES,
            spacing: Duration::from_secs_f64(crate::reference::STRESS_SPACING_S),
            pause_receiver: None,
            seed: 0,
            timeout: Duration::from_secs(600),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum StressVerdict {
    CompletedAll,
    Crashed,
    FailedTransfer,
}

#[derive(Debug, Clone, Serialize)]
pub struct StressOutcome {
    pub verdict: StressVerdict,
    pub offered: usize,
    pub completed: usize,
    pub digests_verified: usize,
    /// Panics anywhere in the process plus components found dead afterwards.
    pub crashes: u64,
    pub transfer_high_water_bytes: u64,
    pub relay_high_water_bytes: u64,
    pub peak_active_transfers: usize,
    /// Whether the sender stopped advancing while the receiver was paused.
    pub sender_stalled: Option<bool>,
    pub wall_s: f64,
    pub failures: Vec<String>,
}

pub async fn bench_stress(cfg: StressConfig) -> Result<StressOutcome, BenchError> {
    let panics_before = panic_count();
    let wall = Instant::now();
    let bed = TestBed::start(|c| {
        c.max_file_bytes = c.max_file_bytes.max(cfg.size);
    })
    .await?;
    let alice = bed
        .peer("alice", LinkShape::default(), |c| c.max_file_bytes = c.max_file_bytes.max(cfg.size))
        .await?;
    let bob = bed
        .peer("bob", LinkShape::default(), |c| c.max_file_bytes = c.max_file_bytes.max(cfg.size))
        .await?;

    let mut sources = Vec::new();
    for i in 0..cfg.files {
        let path = bed.path().join(format!("stress-{i}.bin"));
        let digest = write_seeded(&path, cfg.size, cfg.seed.wrapping_add(i as u64))?;
        sources.push((path, digest));
    }

    let hub = bed.server.hub().clone();
    let probing = Arc::new(AtomicBool::new(true));
    let peak_active = Arc::new(AtomicUsize::new(0));
    let probe = {
        let (probing, peak) = (probing.clone(), peak_active.clone());
        tokio::spawn(async move {
            while probing.load(Ordering::Relaxed) {
                let n = hub.metrics_snapshot().active_transfers;
                peak.fetch_max(n, Ordering::Relaxed);
                tokio::time::sleep(Duration::from_millis(5)).await;
            }
        })
    };

    let stalled = Arc::new(std::sync::Mutex::new(None));
    let acceptor = tokio::spawn(auto_accept(
        bob.engine.clone(),
        alice.engine.clone(),
        cfg.pause_receiver,
        stalled.clone(),
    ));
    let mut sender_events = alice.engine.subscribe();
    let mut receiver_events = bob.engine.subscribe();

    let start = tokio::time::Instant::now();
    let mut ids = Vec::new();
    let mut failures = Vec::new();
    for (i, (path, _)) in sources.iter().enumerate() {
        tokio::time::sleep_until(start + cfg.spacing * i as u32).await;
        match alice.engine.offer_file("bob", path, false).await {
            Ok(id) => ids.push((id, i)),
            Err(e) => failures.push(format!("offer {i}: {e}")),
        }
    }

    let deadline = cfg.timeout.saturating_sub(wall.elapsed());
    let (sent, received) = tokio::join!(
        settle(&mut sender_events, &ids, deadline),
        settle(&mut receiver_events, &ids, deadline),
    );
    probing.store(false, Ordering::Relaxed);
    let _ = probe.await;
    acceptor.abort();

    let mut completed = 0;
    let mut verified = 0;
    for (id, i) in &ids {
        let s = sent.get(id);
        let r = received.get(id);
        let ok = |d: Option<&Value>| d.is_some_and(|d| d["state"] == "complete");
        if ok(s) && ok(r) {
            completed += 1;
            let path = r.and_then(|d| d["path"].as_str()).map(PathBuf::from);
            match path.map(|p| file_digest(&p)) {
                Some(Ok(d)) if d == sources[*i].1 => verified += 1,
                other => failures.push(format!("file {i}: digest check {other:?}")),
            }
        } else {
            failures.push(format!("file {i}: sender {s:?}, receiver {r:?}"));
        }
    }

    let mut dead = 0;
    for p in [&alice, &bob] {
        if p.engine.is_shut_down() || !p.engine.is_connected() || p.engine.roster().await.is_err() {
            dead += 1;
            failures.push(format!("{} lost its server session", p.name));
        }
    }
    let crashes = panic_count() - panics_before + dead;
    let m = bed.server.hub().metrics_snapshot();
    let verdict = if crashes > 0 {
        StressVerdict::Crashed
    } else if completed == cfg.files && verified == cfg.files {
        StressVerdict::CompletedAll
    } else {
        StressVerdict::FailedTransfer
    };
    let sender_stalled = *stalled.lock().expect("stall lock");
    bed.shutdown(vec![alice, bob]).await;
    Ok(StressOutcome {
        verdict,
        offered: ids.len(),
        completed,
        digests_verified: verified,
        crashes,
        transfer_high_water_bytes: m.transfer_high_water_bytes,
        relay_high_water_bytes: m.relay_high_water_bytes,
        peak_active_transfers: peak_active.load(Ordering::Relaxed),
        sender_stalled,
        wall_s: wall.elapsed().as_secs_f64(),
        failures,
    })
}

/// Terminal progress event per transfer id.
async fn settle(
    rx: &mut tokio::sync::mpsc::UnboundedReceiver<peervoip_node::ControlEvent>,
    ids: &[(u64, usize)],
    within: Duration,
) -> HashMap<u64, Value> {
    let mut out = HashMap::new();
    let deadline = tokio::time::Instant::now() + within;
    while out.len() < ids.len() {
        let left = deadline.saturating_duration_since(tokio::time::Instant::now());
        let Ok(d) = wait_event(rx, EventKind::FileProgress, left, |d| {
            ids.iter().any(|(id, _)| d["transfer_id"] == *id)
                && matches!(d["state"].as_str(), Some("complete" | "failed" | "declined"))
        })
        .await
        else {
            break;
        };
        if let Some(id) = d["transfer_id"].as_u64() {
            out.insert(id, d);
        }
    }
    out
}

/// Accepts every offer. With `pause`, pauses the first transfer once it
/// has moved data, checks that the sender stops advancing, then resumes.
async fn auto_accept(
    receiver: Arc<Engine>,
    sender: Arc<Engine>,
    pause: Option<Duration>,
    stalled: Arc<std::sync::Mutex<Option<bool>>>,
) {
    let mut rx = receiver.subscribe();
    let mut paused_once = pause.is_none();
    while let Some(ev) = rx.recv().await {
        match ev.event {
            EventKind::FileOffer => {
                if let Some(id) = ev.data["transfer_id"].as_u64() {
                    let _ = receiver.accept_file(id, true).await;
                }
            }
            EventKind::FileProgress if !paused_once && ev.data["bytes"].as_u64().unwrap_or(0) > 0 => {
                paused_once = true;
                let (Some(id), Some(hold)) = (ev.data["transfer_id"].as_u64(), pause) else {
                    continue;
                };
                let (receiver, sender, stalled) = (receiver.clone(), sender.clone(), stalled.clone());
                tokio::spawn(async move {
                    if receiver.pause_file(id).is_err() {
                        return;
                    }
                    // let in-flight credit drain before sampling
                    let settle = Duration::from_millis(500).min(hold / 2);
                    tokio::time::sleep(settle).await;
                    let before = sender.transfer(id).map(|t| t.bytes);
                    tokio::time::sleep(hold - settle).await;
                    let after = sender.transfer(id).map(|t| t.bytes);
                    let done = sender.transfer(id).is_some_and(|t| t.state.is_terminal());
                    *stalled.lock().expect("stall lock") = Some(before == after && !done);
                    let _ = receiver.resume_file(id);
                });
            }
            _ => {}
        }
    }
}

//! Measurement harness for the peervoip suite.
//!
//! Every scenario runs in-process on loopback: one signaling server and
//! node engines whose sockets sit behind an emulated access link
//! ([`peervoip_core::shaper::AccessLink`]). Results land in a
//! [`BenchReport`] that lists each measurement next to the published
//! comparison figure it mirrors.

pub mod chat;
pub mod checks;
pub mod file;
pub mod reference;
pub mod report;
pub mod stress;
pub mod testbed;
pub mod voice;

use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Once;
use std::time::Duration;

use peervoip_core::shaper::{LinkConfig, LinkShape, REFERENCE_RATE_BPS};
use peervoip_node::EngineError;
use thiserror::Error;

pub use report::{Band, BenchReport, Environment, Row};

use chat::{ChatMode, ChatRig};
use file::{FileConfig, Leg};
use reference::Reference;
use stress::{StressConfig, StressVerdict};
use voice::VoiceConfig;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("call setup failed: {0}")]
    CallSetupFailed(String),
    #[error("transfer failed: {0}")]
    TransferFailed(String),
    #[error("timed out waiting for {0}")]
    Timeout(&'static str),
    #[error("setup: {0}")]
    Setup(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

static PANICS: AtomicU64 = AtomicU64::new(0);
static HOOK: Once = Once::new();

/// Panics seen anywhere in the process since the hook was installed.
/// The first call installs a counting hook in front of the existing one.
pub fn panic_count() -> u64 {
    HOOK.call_once(|| {
        let prev = std::panic::take_hook();
        std::panic::set_hook(Box::new(move |info| {
            PANICS.fetch_add(1, Ordering::SeqCst);
            prev(info);
        }));
    });
    PANICS.load(Ordering::SeqCst)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    Voice,
    File,
    Stress,
    Chat,
    All,
}

impl Scenario {
    pub fn expand(self) -> Vec<Scenario> {
        match self {
            Scenario::All => vec![Scenario::Voice, Scenario::File, Scenario::Stress, Scenario::Chat],
            s => vec![s],
        }
    }
}

impl FromStr for Scenario {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "voice" => Scenario::Voice,
            "file" => Scenario::File,
            "stress" => Scenario::Stress,
            "chat" => Scenario::Chat,
            "all" => Scenario::All,
            other => return Err(format!("unknown scenario {other:?}")),
        })
    }
}

pub const VOICE_DELAY_BAND_MS: (f64, f64) = (20.0, 80.0);
pub const PIPELINE_BUDGET_MS: f64 = 5.0;
pub const VOICE_RUNTIME_S: f64 = 90.0;
pub const UPLOAD_BAND_S: (f64, f64) = (10.0, 25.0);
pub const DOWNLOAD_BAND_S: (f64, f64) = (10.0, 20.0);
pub const FILE_RUNTIME_S: f64 = 120.0;
pub const STRESS_RUNTIME_S: f64 = 600.0;
/// Server payload budget per active relay transfer.
pub const STRESS_MEMORY_BYTES: f64 = 2.0 * 1024.0 * 1024.0;
pub const CHAT_MESSAGES: usize = 1000;
pub const CHAT_DIRECT_MS: f64 = 10.0;
pub const CHAT_OVERHEAD_MS: f64 = 5.0;
/// Added one-way latency per link direction for the differential call.
pub const DIFFERENTIAL_LATENCY_MS: f64 = 10.0;

pub fn voice_link() -> LinkShape {
    LinkShape::symmetric(LinkConfig::rate(REFERENCE_RATE_BPS))
}

/// 60 s call at 2 Mbps plus the pipeline compute budget.
pub async fn voice_rows() -> Result<(Vec<Row>, voice::VoiceOutcome), BenchError> {
    let out = voice::bench_voice_delay(VoiceConfig::default()).await?;
    let cost = voice::pipeline_cost(3_000)?;
    let r = Reference::voice_delay;
    let rows = vec![
        Row::new(
            "voice",
            "median one-way delay",
            out.median_ms,
            "ms",
            Band::between(VOICE_DELAY_BAND_MS.0, VOICE_DELAY_BAND_MS.1),
        )
        .reference(r())
        .note(format!(
            "p95 {:.1} ms, loss {:.4}, {} samples; published figure depends on its WAN and is not asserted",
            out.p95_ms.unwrap_or(f64::NAN),
            out.loss_ratio,
            out.samples.len()
        )),
        Row::new(
            "voice",
            "pipeline compute per frame (p99)",
            Some(cost.p99_ms),
            "ms",
            Band::at_most(PIPELINE_BUDGET_MS),
        )
        .reference(Reference::budget("ms", "per-frame compute budget"))
        .note(format!("mean {:.3} ms, max {:.3} ms over {} frames", cost.mean_ms, cost.max_ms, cost.frames)),
        Row::new("voice", "runtime", Some(out.wall_s), "s", Band::at_most(VOICE_RUNTIME_S))
            .reference(Reference::budget("s", "voice scenario runtime budget")),
    ];
    Ok((rows, out))
}

/// Median shift when each link direction of both endpoints adds
/// `DIFFERENTIAL_LATENCY_MS`; a one-way path crosses two such directions.
pub async fn voice_differential(duration: Duration) -> Result<(Row, f64, f64), BenchError> {
    let base = voice::bench_voice_delay(VoiceConfig {
        duration,
        ..VoiceConfig::default()
    })
    .await?;
    let shifted = voice::bench_voice_delay(VoiceConfig {
        duration,
        shape: LinkShape::symmetric(LinkConfig::rate(REFERENCE_RATE_BPS).with_latency_ms(DIFFERENTIAL_LATENCY_MS)),
        ..VoiceConfig::default()
    })
    .await?;
    let (b, s) = (base.median_ms.unwrap_or(f64::NAN), shifted.median_ms.unwrap_or(f64::NAN));
    let expected = 2.0 * DIFFERENTIAL_LATENCY_MS;
    let row = Row::new(
        "voice",
        "median shift, +10 ms per link direction",
        Some(s - b),
        "ms",
        Band::between(expected - 4.0, expected + 4.0),
    )
    .reference(Reference::budget("ms", "added path latency must show up in the median"))
    .note(format!("baseline {b:.1} ms, shifted {s:.1} ms"));
    Ok((row, b, s))
}

pub async fn file_rows(seed: u64) -> Result<Vec<Row>, BenchError> {
    let mut rows = Vec::new();
    for (leg, band, reference) in [
        (Leg::Up, UPLOAD_BAND_S, Reference::upload()),
        (Leg::Down, DOWNLOAD_BAND_S, Reference::download()),
    ] {
        let started = std::time::Instant::now();
        let out = file::bench_file_transfer(FileConfig::new(reference::FILE_SIZE_BYTES, leg, seed)).await?;
        let name = match leg {
            Leg::Up => "upload",
            Leg::Down => "download",
        };
        let floor = reference::FILE_SIZE_BYTES as f64 * 8.0 / REFERENCE_RATE_BPS as f64;
        rows.push(
            Row::new("file", &format!("2.5 MB {name}"), Some(out.elapsed_s), "s", Band::between(band.0, band.1))
                .reference(reference)
                .note(format!(
                    "bandwidth floor {floor:.1} s; goodput {:.3} Mbps; digest verified: {}",
                    out.goodput_bps / 1e6,
                    out.digest_verified
                )),
        );
        rows.push(
            Row::new(
                "file",
                &format!("{name} goodput"),
                Some(out.goodput_bps / 1e6),
                "Mbps",
                Band::at_most(REFERENCE_RATE_BPS as f64 * 1.02 / 1e6),
            )
            .reference(Reference::bandwidth()),
        );
        rows.push(
            Row::new(
                "file",
                &format!("{name} digest verified"),
                Some(out.digest_verified as u8 as f64),
                "bool",
                Band::exactly(1.0),
            )
            .reference(Reference::budget("bool", "received bytes hash to the source digest")),
        );
        rows.push(
            Row::new(
                "file",
                &format!("{name} runtime"),
                Some(started.elapsed().as_secs_f64()),
                "s",
                Band::at_most(FILE_RUNTIME_S),
            )
            .reference(Reference::budget("s", "file scenario runtime budget")),
        );
    }
    let empty = file::bench_file_transfer(FileConfig::new(0, Leg::Up, seed)).await?;
    rows.push(
        Row::new("file", "0-byte upload", Some(empty.elapsed_s), "s", Band::below(1.0))
            .reference(Reference::budget("s", "empty file completes promptly"))
            .note(format!("digest verified: {}", empty.digest_verified)),
    );
    Ok(rows)
}

pub async fn stress_rows(seed: u64) -> Result<(Vec<Row>, stress::StressOutcome), BenchError> {
    let out = stress::bench_stress(StressConfig {
        seed,
        ..StressConfig::default()
    })
    .await?;
    let r = Reference::stress;
    let n = out.offered.max(1) as f64;
    let rows = vec![
        Row::new(
            "stress",
            "completed-all",
            Some((out.verdict == StressVerdict::CompletedAll) as u8 as f64),
            "bool",
            Band::exactly(1.0),
        )
        .reference(r())
        .note(format!("verdict {:?}; {}", out.verdict, out.failures.join("; "))),
        Row::new("stress", "crashes", Some(out.crashes as f64), "count", Band::exactly(0.0)).reference(r()),
        Row::new(
            "stress",
            "digests verified",
            Some(out.digests_verified as f64),
            "files",
            Band::exactly(reference::STRESS_FILE_COUNT as f64),
        )
        .reference(r()),
        Row::new(
            "stress",
            "server payload high-water per transfer",
            Some(out.transfer_high_water_bytes as f64 / 1024.0 / 1024.0),
            "MiB",
            Band::at_most(STRESS_MEMORY_BYTES / 1024.0 / 1024.0),
        )
        .reference(r())
        .note(format!(
            "all transfers together peaked at {:.2} MiB with at most {} active ({} offered)",
            out.relay_high_water_bytes as f64 / 1024.0 / 1024.0,
            out.peak_active_transfers,
            n
        )),
        Row::new("stress", "runtime", Some(out.wall_s), "s", Band::at_most(STRESS_RUNTIME_S))
            .reference(Reference::budget("s", "stress scenario runtime budget")),
    ];
    Ok((rows, out))
}

pub async fn chat_rows(messages: usize) -> Result<(Vec<Row>, f64, f64), BenchError> {
    let mut rig = ChatRig::start(&[ChatMode::Direct, ChatMode::Monitored]).await?;
    let outcomes = rig.run(messages).await;
    rig.shutdown().await;
    let outcomes = outcomes?;
    let median = |m: ChatMode| {
        outcomes
            .iter()
            .find(|o| o.mode == m)
            .and_then(|o| o.median_ms)
            .unwrap_or(f64::NAN)
    };
    let (direct, monitored) = (median(ChatMode::Direct), median(ChatMode::Monitored));
    let r = Reference::chat_overhead;
    let rows = vec![
        Row::new("chat", "direct median round trip", Some(direct), "ms", Band::below(CHAT_DIRECT_MS)).reference(r()),
        Row::new(
            "chat",
            "monitored - direct median round trip",
            Some(monitored - direct),
            "ms",
            Band::at_most(CHAT_OVERHEAD_MS),
        )
        .reference(r())
        .note(format!("monitored median {monitored:.3} ms over {messages} messages per mode")),
    ];
    Ok((rows, direct, monitored))
}

/// Runs the requested scenarios into one report.
pub async fn run(scenario: Scenario, seed: u64) -> Result<BenchReport, BenchError> {
    panic_count();
    let mut report = BenchReport::new(Environment::capture(seed));
    for s in scenario.expand() {
        tracing::info!(scenario = ?s, "running");
        match s {
            Scenario::Voice => {
                let (rows, _) = voice_rows().await?;
                report.extend(rows);
                let (row, _, _) = voice_differential(Duration::from_secs(15)).await?;
                report.extend([row]);
            }
            Scenario::File => {
                report.extend(file_rows(seed).await?);
                report.footnote(reference::FILE_SIZE_FOOTNOTE);
            }
            Scenario::Stress => report.extend(stress_rows(seed).await?.0),
            Scenario::Chat => report.extend(chat_rows(CHAT_MESSAGES).await?.0),
            Scenario::All => unreachable!("expanded above"),
        }
    }
    Ok(report)
}

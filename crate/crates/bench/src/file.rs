//! Relay file transfer timed over a shaped access link.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use peervoip_core::crypto::Sha256Stream;
use peervoip_core::shaper::{LinkConfig, LinkShape, REFERENCE_RATE_BPS};
use peervoip_node::EventKind;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::Value;

use crate::testbed::{Peer, TestBed};
use crate::BenchError;

/// Which endpoint's link carries the shaper.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Leg {
    /// Sender's link; timed until the sender sees the transfer confirmed.
    Up,
    /// Receiver's link; timed until the receiver has the verified file.
    Down,
}

#[derive(Debug, Clone, Copy)]
pub struct FileConfig {
    pub size: u64,
    pub leg: Leg,
    pub link: LinkConfig,
    pub seed: u64,
    pub timeout: Duration,
}

impl FileConfig {
    pub fn new(size: u64, leg: Leg, seed: u64) -> Self {
        Self {
            size,
            leg,
            link: LinkConfig::rate(REFERENCE_RATE_BPS),
            seed,
            timeout: Duration::from_secs(120),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FileOutcome {
    pub leg: Leg,
    pub bytes: u64,
    pub elapsed_s: f64,
    /// Payload bits over elapsed time.
    pub goodput_bps: f64,
    pub digest_verified: bool,
}

/// Writes `size` seeded pseudo-random bytes to `path`; returns their SHA-256.
pub fn write_seeded(path: &Path, size: u64, seed: u64) -> std::io::Result<[u8; 32]> {
    use std::io::Write;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut digest = Sha256Stream::default();
    let mut buf = vec![0u8; 1 << 16];
    let mut left = size;
    while left > 0 {
        let n = left.min(buf.len() as u64) as usize;
        rng.fill_bytes(&mut buf[..n]);
        digest.update(&buf[..n]);
        out.write_all(&buf[..n])?;
        left -= n as u64;
    }
    out.flush()?;
    Ok(digest.finish())
}

pub fn file_digest(path: &Path) -> std::io::Result<[u8; 32]> {
    use std::io::Read;
    let mut f = std::fs::File::open(path)?;
    let mut digest = Sha256Stream::default();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            return Ok(digest.finish());
        }
        digest.update(&buf[..n]);
    }
}

pub(crate) fn is_terminal(id: u64) -> impl Fn(&Value) -> bool {
    move |d: &Value| {
        d["transfer_id"] == id && matches!(d["state"].as_str(), Some("complete" | "failed" | "declined"))
    }
}

pub(crate) fn expect_complete(who: &str, data: &Value) -> Result<(), BenchError> {
    if data["state"] == "complete" {
        Ok(())
    } else {
        Err(BenchError::TransferFailed(format!("{who}: {data}")))
    }
}

pub(crate) fn received_path(data: &Value) -> Result<PathBuf, BenchError> {
    data["path"]
        .as_str()
        .map(PathBuf::from)
        .ok_or_else(|| BenchError::TransferFailed(format!("no path in {data}")))
}

/// Offers the file from `from` and waits for the accepted transfer to
/// settle on both sides. Returns (offer-to-sender-done, offer-to-receiver-done).
pub(crate) async fn send_one(
    from: &Peer,
    to: &Peer,
    path: &Path,
    within: Duration,
) -> Result<(Duration, Duration, Value), BenchError> {
    let start = Instant::now();
    let id = from
        .engine
        .offer_file(&to.name, path, false)
        .await
        .map_err(|e| BenchError::TransferFailed(e.to_string()))?;
    to.wait_for(EventKind::FileOffer, within, |d| d["transfer_id"] == id).await?;
    to.engine
        .accept_file(id, true)
        .await
        .map_err(|e| BenchError::TransferFailed(e.to_string()))?;
    let (sent, got) = tokio::join!(
        async {
            let d = from.wait_for(EventKind::FileProgress, within, is_terminal(id)).await;
            (start.elapsed(), d)
        },
        async {
            let d = to.wait_for(EventKind::FileProgress, within, is_terminal(id)).await;
            (start.elapsed(), d)
        },
    );
    expect_complete(&from.name, &sent.1?)?;
    let got_data = got.1?;
    expect_complete(&to.name, &got_data)?;
    Ok((sent.0, got.0, got_data))
}

pub async fn bench_file_transfer(cfg: FileConfig) -> Result<FileOutcome, BenchError> {
    let bed = TestBed::start(|_| {}).await?;
    let shaped = LinkShape::symmetric(cfg.link);
    let (a_shape, b_shape) = match cfg.leg {
        Leg::Up => (shaped, LinkShape::default()),
        Leg::Down => (LinkShape::default(), shaped),
    };
    let alice = bed.peer("alice", a_shape, |_| {}).await?;
    let bob = bed.peer("bob", b_shape, |_| {}).await?;
    let src = bed.path().join("sample.bin");
    let digest = write_seeded(&src, cfg.size, cfg.seed)?;

    let (sender_done, receiver_done, data) = send_one(&alice, &bob, &src, cfg.timeout).await?;
    let elapsed = match cfg.leg {
        Leg::Up => sender_done,
        Leg::Down => receiver_done,
    };
    let digest_verified = file_digest(&received_path(&data)?)? == digest;
    bed.shutdown(vec![alice, bob]).await;
    let secs = elapsed.as_secs_f64();
    Ok(FileOutcome {
        leg: cfg.leg,
        bytes: cfg.size,
        elapsed_s: secs,
        goodput_bps: if secs > 0.0 { cfg.size as f64 * 8.0 / secs } else { 0.0 },
        digest_verified,
    })
}

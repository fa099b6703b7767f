//! One call's media pipeline on the daemon's UDP socket.
//!
//! Capture, network receive and playout run as separate tasks sharing the
//! jitter buffer and stats behind short-lived locks. Frame `k` covers
//! `[epoch + 20k, epoch + 20k + 20)` ms and is sent when its capture ends.
//! Its delay sample is the playout instant minus that capture start.

use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use peervoip_core::crypto::SessionKeys;
use peervoip_core::media::{
    AudioSink, AudioSource, CallStats, Depacketizer, JitterBuffer, MediaError, Packetizer, Playout, StatsCollector,
    StreamParams, FRAME_BYTES, FRAME_MS,
};
use peervoip_core::shaper::ShapedUdp;
use peervoip_core::wire::{decode_media_frame, encode_media_frame};
use tokio::sync::Notify;
use tokio::task::JoinHandle;
use tokio::time::{sleep_until, Instant};

pub const FRAME: Duration = Duration::from_millis(FRAME_MS as u64);

pub struct MediaParams {
    pub socket: Arc<ShapedUdp>,
    pub keys: SessionKeys,
    pub local: StreamParams,
    pub remote: StreamParams,
    pub send_to: SocketAddr,
    /// Capture start of frame 0 on both ends.
    pub epoch: Instant,
    pub depth: usize,
    pub source: Box<dyn AudioSource>,
    pub sink: Box<dyn AudioSink>,
}

struct Shared {
    stats: Mutex<StatsCollector>,
    jitter: Mutex<JitterBuffer>,
    ready: Notify,
    epoch: Instant,
    remote_initial: u64,
}

impl Shared {
    fn capture_start(&self, ext_seq: u64) -> Instant {
        self.epoch + FRAME * ext_seq.saturating_sub(self.remote_initial) as u32
    }

    fn stats(&self) -> std::sync::MutexGuard<'_, StatsCollector> {
        self.stats.lock().expect("stats lock")
    }
}

fn signed_ms(now: Instant, then: Instant) -> f64 {
    if now >= then {
        (now - then).as_secs_f64() * 1000.0
    } else {
        -((then - now).as_secs_f64() * 1000.0)
    }
}

pub struct MediaSession {
    shared: Arc<Shared>,
    tasks: Vec<JoinHandle<()>>,
}

impl MediaSession {
    pub fn start(p: MediaParams) -> Self {
        let shared = Arc::new(Shared {
            stats: Mutex::new(StatsCollector::new()),
            jitter: Mutex::new(JitterBuffer::new(p.depth)),
            ready: Notify::new(),
            epoch: p.epoch,
            remote_initial: p.remote.initial_seq as u64,
        });
        let capture = tokio::spawn(capture_loop(
            shared.clone(),
            p.socket.clone(),
            Packetizer::with_key(p.local, p.keys.send.clone()),
            p.source,
            p.send_to,
        ));
        let receive = tokio::spawn(receive_loop(
            shared.clone(),
            p.socket,
            Depacketizer::for_stream(p.keys.receive.clone(), p.remote),
        ));
        let playout = tokio::spawn(playout_loop(shared.clone(), p.sink));
        Self {
            shared,
            tasks: vec![capture, receive, playout],
        }
    }

    pub fn stats(&self) -> CallStats {
        self.shared.stats().snapshot()
    }

    pub fn delay_samples(&self) -> Vec<f64> {
        self.shared.stats().delay_samples().to_vec()
    }

    /// Stops all tasks; returns the final counters and every delay sample.
    pub fn stop(self) -> (CallStats, Vec<f64>) {
        for t in &self.tasks {
            t.abort();
        }
        let s = self.shared.stats();
        (s.snapshot(), s.delay_samples().to_vec())
    }
}

impl Drop for MediaSession {
    fn drop(&mut self) {
        for t in &self.tasks {
            t.abort();
        }
    }
}

async fn capture_loop(
    shared: Arc<Shared>,
    socket: Arc<ShapedUdp>,
    mut packetizer: Packetizer,
    mut source: Box<dyn AudioSource>,
    send_to: SocketAddr,
) {
    let mut k: u32 = 0;
    loop {
        sleep_until(shared.epoch + FRAME * (k + 1)).await;
        let pcm = source.next_frame();
        let bytes = packetizer
            .packetize(&pcm, k == 0)
            .map_err(|e| e.to_string())
            .and_then(|f| encode_media_frame(&f).map_err(|e| e.to_string()));
        match bytes {
            Ok(b) => {
                if let Err(e) = socket.send_to(&b, send_to).await {
                    tracing::debug!(error = %e, "media send failed");
                }
                shared.stats().on_sent();
            }
            Err(e) => tracing::warn!(error = %e, "packetize failed"),
        }
        k = k.wrapping_add(1);
    }
}

async fn receive_loop(shared: Arc<Shared>, socket: Arc<ShapedUdp>, mut depacketizer: Depacketizer) {
    let mut buf = vec![0u8; 2048];
    loop {
        let n = match socket.recv_from(&mut buf).await {
            Ok((n, _)) => n,
            Err(e) => {
                tracing::debug!(error = %e, "media socket closed");
                return;
            }
        };
        let arrival = Instant::now();
        let Ok(frame) = decode_media_frame(&buf[..n]) else {
            continue;
        };
        match depacketizer.depacketize(&frame) {
            Ok(opened) => {
                let transit = signed_ms(arrival, shared.capture_start(opened.extended_seq));
                shared.stats().on_received(opened.extended_seq, transit);
                let ready = {
                    let mut j = shared.jitter.lock().expect("jitter lock");
                    j.push(opened.extended_seq, &opened.pcm);
                    j.ready()
                };
                if ready {
                    shared.ready.notify_one();
                }
            }
            // leftovers from an earlier call
            Err(MediaError::ForeignSource(_)) => {}
            Err(_) => shared.stats().on_auth_failure(),
        }
    }
}

async fn playout_loop(shared: Arc<Shared>, mut sink: Box<dyn AudioSink>) {
    while !shared.jitter.lock().expect("jitter lock").ready() {
        shared.ready.notified().await;
    }
    let start = Instant::now();
    let silence = [0u8; FRAME_BYTES];
    let mut n: u32 = 0;
    loop {
        sleep_until(start + FRAME * n).await;
        let (out, jstats) = {
            let mut j = shared.jitter.lock().expect("jitter lock");
            (j.tick(), j.stats())
        };
        match out {
            Playout::Frame { seq, pcm } => {
                sink.play(&pcm, false);
                let delay = signed_ms(Instant::now(), shared.capture_start(seq));
                shared.stats().on_delay(delay);
            }
            Playout::Concealed { .. } => sink.play(&silence, true),
            Playout::Waiting => {}
        }
        shared.stats().set_jitter_stats(jstats);
        n = n.wrapping_add(1);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use peervoip_core::crypto::{exchange_in_memory, CipherSuite};
    use peervoip_core::media::{NullSink, RecordingSink, SineSource};
    use peervoip_core::shaper::LinkShape;
    use tokio::net::UdpSocket;

    async fn socket() -> Arc<ShapedUdp> {
        let s = UdpSocket::bind("127.0.0.1:0").await.unwrap();
        Arc::new(ShapedUdp::new(s, LinkShape::default()))
    }

    #[tokio::test]
    async fn two_sessions_exchange_audio_with_bounded_delay() {
        let (ka, kb) = exchange_in_memory(9, CipherSuite::DEFAULT).unwrap();
        let (sa, sb) = (socket().await, socket().await);
        let (pa, pb) = (StreamParams::random(), StreamParams::random());
        let epoch = Instant::now() + Duration::from_millis(20);
        let rec = RecordingSink::default();
        let a = MediaSession::start(MediaParams {
            socket: sa.clone(),
            keys: ka,
            local: pa,
            remote: pb,
            send_to: sb.local_addr().unwrap(),
            epoch,
            depth: 2,
            source: Box::new(SineSource::new(440.0, 8000)),
            sink: Box::new(NullSink),
        });
        let b = MediaSession::start(MediaParams {
            socket: sb.clone(),
            keys: kb,
            local: pb,
            remote: pa,
            send_to: sa.local_addr().unwrap(),
            epoch,
            depth: 2,
            source: Box::new(SineSource::new(660.0, 8000)),
            sink: Box::new(rec.clone()),
        });
        tokio::time::sleep(Duration::from_millis(600)).await;
        let (sa_stats, _) = a.stop();
        let (sb_stats, delays) = b.stop();
        assert!(sa_stats.frames_sent >= 20, "{sa_stats:?}");
        assert!(sb_stats.frames_received >= 20, "{sb_stats:?}");
        assert_eq!(sb_stats.auth_failures, 0);
        let median = peervoip_core::media::median(&delays).unwrap();
        assert!((20.0..=80.0).contains(&median), "median delay {median}");
        assert!(!rec.played.lock().unwrap().is_empty());
    }

    #[tokio::test]
    async fn wrong_key_frames_count_as_auth_failures() {
        let (ka, _) = exchange_in_memory(1, CipherSuite::DEFAULT).unwrap();
        let (_, kb) = exchange_in_memory(2, CipherSuite::DEFAULT).unwrap();
        let (sa, sb) = (socket().await, socket().await);
        let p = StreamParams::random();
        let epoch = Instant::now();
        let a = MediaSession::start(MediaParams {
            socket: sa.clone(),
            keys: ka,
            local: p,
            remote: StreamParams::random(),
            send_to: sb.local_addr().unwrap(),
            epoch,
            depth: 2,
            source: Box::new(SineSource::new(440.0, 8000)),
            sink: Box::new(NullSink),
        });
        let b = MediaSession::start(MediaParams {
            socket: sb.clone(),
            keys: kb,
            local: StreamParams::random(),
            remote: p,
            send_to: "127.0.0.1:9".parse().unwrap(),
            epoch,
            depth: 2,
            source: Box::new(SineSource::new(440.0, 8000)),
            sink: Box::new(NullSink),
        });
        tokio::time::sleep(Duration::from_millis(200)).await;
        drop(a);
        let (stats, delays) = b.stop();
        assert_eq!(stats.frames_received, 0);
        assert!(stats.auth_failures > 0);
        assert!(delays.is_empty());
    }
}

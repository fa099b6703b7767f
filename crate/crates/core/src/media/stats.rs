//! Per-call quality counters: delay, interarrival jitter and loss.

use serde::{Deserialize, Serialize};

use super::jitter::JitterStats;

/// Snapshot handed to callers. Delay is absent until a frame has arrived.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CallStats {
    pub delay_ms: Option<f64>,
    pub delay_median_ms: Option<f64>,
    pub jitter_ms: f64,
    pub loss_ratio: f64,
    pub frames_sent: u64,
    pub frames_received: u64,
    pub late: u64,
    pub lost: u64,
    pub duplicate: u64,
    pub auth_failures: u64,
}

/// Accumulates samples for one direction of a call.
///
/// Transit samples are `receive - send` in milliseconds, with the clock
/// offset already applied by the caller. Jitter follows the RFC 3550
/// estimator `J += (|D| - J) / 16`.
#[derive(Debug, Clone, Default)]
pub struct StatsCollector {
    frames_sent: u64,
    frames_received: u64,
    auth_failures: u64,
    first_seq: Option<u64>,
    highest_seq: Option<u64>,
    last_transit: Option<f64>,
    jitter: f64,
    smoothed_delay: Option<f64>,
    delay_samples: Vec<f64>,
    jitter_stats: JitterStats,
}

impl StatsCollector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn on_sent(&mut self) {
        self.frames_sent += 1;
    }

    pub fn on_auth_failure(&mut self) {
        self.auth_failures += 1;
    }

    /// Records an authenticated arrival. `transit_ms` feeds jitter.
    pub fn on_received(&mut self, extended_seq: u64, transit_ms: f64) {
        self.frames_received += 1;
        self.first_seq = Some(self.first_seq.map_or(extended_seq, |f| f.min(extended_seq)));
        self.highest_seq = Some(self.highest_seq.map_or(extended_seq, |h| h.max(extended_seq)));
        if let Some(prev) = self.last_transit {
            let d = (transit_ms - prev).abs();
            self.jitter += (d - self.jitter) / 16.0;
        }
        self.last_transit = Some(transit_ms);
    }

    /// Records one delay sample (ms) for the delay estimate.
    pub fn on_delay(&mut self, delay_ms: f64) {
        self.smoothed_delay = Some(match self.smoothed_delay {
            None => delay_ms,
            Some(s) => s + (delay_ms - s) / 16.0,
        });
        self.delay_samples.push(delay_ms);
    }

    pub fn set_jitter_stats(&mut self, s: JitterStats) {
        self.jitter_stats = s;
    }

    pub fn delay_samples(&self) -> &[f64] {
        &self.delay_samples
    }

    /// Fraction of the sequence span that never arrived.
    pub fn loss_ratio(&self) -> f64 {
        match (self.first_seq, self.highest_seq) {
            (Some(first), Some(high)) => {
                let expected = (high - first + 1) as f64;
                (1.0 - self.frames_received as f64 / expected).clamp(0.0, 1.0)
            }
            _ => 0.0,
        }
    }

    pub fn snapshot(&self) -> CallStats {
        CallStats {
            delay_ms: self.smoothed_delay,
            delay_median_ms: median(&self.delay_samples),
            jitter_ms: self.jitter,
            loss_ratio: self.loss_ratio(),
            frames_sent: self.frames_sent,
            frames_received: self.frames_received,
            late: self.jitter_stats.late,
            lost: self.jitter_stats.lost,
            duplicate: self.jitter_stats.duplicate,
            auth_failures: self.auth_failures,
        }
    }
}

pub fn median(samples: &[f64]) -> Option<f64> {
    percentile(samples, 50.0)
}

/// Nearest-rank percentile; `None` for an empty slice.
pub fn percentile(samples: &[f64], p: f64) -> Option<f64> {
    if samples.is_empty() {
        return None;
    }
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * v.len() as f64).ceil() as usize;
    Some(v[rank.clamp(1, v.len()) - 1])
}

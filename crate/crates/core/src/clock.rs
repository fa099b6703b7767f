//! Wall-clock time in UTC, plus a manually driven clock for tests.

use std::fmt;
use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

/// Milliseconds since the Unix epoch, UTC. This is the only timestamp
/// representation that crosses the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UtcMillis(pub u64);

impl UtcMillis {
    pub fn now() -> Self {
        SystemClock.now()
    }

    pub fn from_micros(us: i64) -> Self {
        UtcMillis((us.max(0) / 1000) as u64)
    }

    pub fn as_micros(self) -> i64 {
        self.0 as i64 * 1000
    }

    /// ISO-8601 with millisecond precision and a `Z` suffix.
    pub fn to_iso8601(self) -> String {
        match DateTime::<Utc>::from_timestamp_millis(self.0 as i64) {
            Some(dt) => dt.to_rfc3339_opts(SecondsFormat::Millis, true),
            None => format!("@{}", self.0),
        }
    }

    pub fn parse_iso8601(s: &str) -> Option<Self> {
        let dt = DateTime::parse_from_rfc3339(s).ok()?;
        let ms = dt.with_timezone(&Utc).timestamp_millis();
        (ms >= 0).then_some(UtcMillis(ms as u64))
    }

    /// `YYYY-MM-DD` of this instant in UTC.
    pub fn utc_date(self) -> String {
        match DateTime::<Utc>::from_timestamp_millis(self.0 as i64) {
            Some(dt) => dt.format("%Y-%m-%d").to_string(),
            None => "1970-01-01".to_string(),
        }
    }
}

impl fmt::Display for UtcMillis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_iso8601())
    }
}

pub trait Clock: Send + Sync + fmt::Debug {
    /// Microseconds since the Unix epoch.
    fn now_micros(&self) -> i64;

    fn now(&self) -> UtcMillis {
        UtcMillis::from_micros(self.now_micros())
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_micros(&self) -> i64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_micros() as i64)
            .unwrap_or(0)
    }
}

/// A clock that only moves when told to.
#[derive(Debug, Clone, Default)]
pub struct ManualClock {
    micros: Arc<AtomicI64>,
}

impl ManualClock {
    pub fn starting_at(ms: u64) -> Self {
        let clock = Self::default();
        clock.set_millis(ms);
        clock
    }

    pub fn set_millis(&self, ms: u64) {
        self.micros.store(ms as i64 * 1000, Ordering::SeqCst);
    }

    pub fn advance_millis(&self, ms: u64) {
        self.micros.fetch_add(ms as i64 * 1000, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now_micros(&self) -> i64 {
        self.micros.load(Ordering::SeqCst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iso8601_round_trip() {
        let t = UtcMillis(1_700_000_000_123);
        let s = t.to_iso8601();
        assert_eq!(s, "2023-11-14T22:13:20.123Z");
        assert_eq!(UtcMillis::parse_iso8601(&s), Some(t));
        assert_eq!(t.utc_date(), "2023-11-14");
    }

    #[test]
    fn manual_clock_moves_only_when_told() {
        let c = ManualClock::starting_at(10);
        assert_eq!(c.now(), UtcMillis(10));
        c.advance_millis(5);
        assert_eq!(c.now(), UtcMillis(15));
    }
}

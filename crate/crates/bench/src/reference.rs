//! Published comparison figures the bench mirrors. Each constant keeps
//! its original unit; the Skype values are report-only.

use serde::Serialize;

pub const SKYPE_VOICE_DELAY_MS: f64 = 22.0;
pub const OS_APP_VOICE_DELAY_MS: f64 = 31.0;

/// Reference file size. Read as megabytes (see [`FILE_SIZE_FOOTNOTE`]).
pub const FILE_SIZE_BYTES: u64 = 2_500_000;
pub const SKYPE_UPLOAD_S: f64 = 16.0;
pub const SKYPE_DOWNLOAD_S: f64 = 11.0;
pub const OS_APP_UPLOAD_S: f64 = 19.0;
pub const OS_APP_DOWNLOAD_S: f64 = 13.0;

pub const TESTED_MAX_FILE_BYTES: u64 = 20_000_000;
pub const STRESS_FILE_BYTES: u64 = 25_000_000;
pub const STRESS_FILE_COUNT: usize = 3;
pub const STRESS_SPACING_S: f64 = 5.0;

pub const BANDWIDTH_BPS: u64 = 2_000_000;

pub const FILE_SIZE_FOOTNOTE: &str = "The reference file size is printed as \"2.5 Mb\". It is read as 2.5 megabytes: \
     at 2 Mbps, 2.5 megabits would take 1.25 s, which cannot produce the published 16-19 s upload times.";

/// A published figure (or qualitative claim) with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Reference {
    /// Open-source application figure; `None` for a qualitative claim.
    pub value: Option<f64>,
    /// Skype figure from the same comparison, when there is one.
    pub skype: Option<f64>,
    pub unit: &'static str,
    pub source: &'static str,
}

impl Reference {
    pub fn figure(value: f64, skype: Option<f64>, unit: &'static str, source: &'static str) -> Self {
        Self {
            value: Some(value),
            skype,
            unit,
            source,
        }
    }

    pub fn claim(unit: &'static str, source: &'static str) -> Self {
        Self {
            value: None,
            skype: None,
            unit,
            source,
        }
    }

    /// A harness budget with no published counterpart.
    pub fn budget(unit: &'static str, what: &'static str) -> Self {
        Self::claim(unit, what)
    }

    pub fn voice_delay() -> Self {
        Self::figure(
            OS_APP_VOICE_DELAY_MS,
            Some(SKYPE_VOICE_DELAY_MS),
            "ms",
            "voice comparison, high clarity, one-way delay",
        )
    }

    pub fn upload() -> Self {
        Self::figure(OS_APP_UPLOAD_S, Some(SKYPE_UPLOAD_S), "s", "file comparison, 2.5 MB upload at 2 Mbps")
    }

    pub fn download() -> Self {
        Self::figure(OS_APP_DOWNLOAD_S, Some(SKYPE_DOWNLOAD_S), "s", "file comparison, 2.5 MB download at 2 Mbps")
    }

    pub fn bandwidth() -> Self {
        Self::figure(BANDWIDTH_BPS as f64 / 1e6, None, "Mbps", "test network bandwidth")
    }

    pub fn stress() -> Self {
        Self::claim(
            "outcome",
            "stress test, 3 x 25 MB back to back every 5 s; the original application crashed on the third file",
        )
    }

    pub fn chat_overhead() -> Self {
        Self::claim("ms", "monitored chat routing described as adding negligible delay")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bandwidth_floor_for_reference_file_is_ten_seconds() {
        let floor = FILE_SIZE_BYTES as f64 * 8.0 / BANDWIDTH_BPS as f64;
        assert_eq!(floor, 10.0);
        // a megabit reading would undercut every published time
        let megabit_floor = 2.5e6 / BANDWIDTH_BPS as f64;
        assert!(megabit_floor < SKYPE_DOWNLOAD_S / 5.0);
    }

    const _: () = {
        assert!(SKYPE_VOICE_DELAY_MS < OS_APP_VOICE_DELAY_MS);
        assert!(SKYPE_UPLOAD_S < OS_APP_UPLOAD_S && SKYPE_DOWNLOAD_S < OS_APP_DOWNLOAD_S);
        assert!(STRESS_FILE_BYTES > TESTED_MAX_FILE_BYTES);
    };
}

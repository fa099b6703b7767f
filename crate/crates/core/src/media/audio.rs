//! PCM16 mono at 16 kHz in 20 ms frames, and the capture/playback seams.

use std::f64::consts::TAU;
use std::fs;
use std::io;
use std::path::Path;
use std::sync::{Arc, Mutex};

pub const SAMPLE_RATE: u32 = 16_000;
pub const FRAME_MS: u32 = 20;
pub const FRAME_SAMPLES: usize = (SAMPLE_RATE * FRAME_MS / 1000) as usize;
pub const FRAME_BYTES: usize = FRAME_SAMPLES * 2;

/// One frame of little-endian PCM16 samples.
pub type PcmFrame = [u8; FRAME_BYTES];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AudioFormat {
    pub sample_rate: u32,
    pub channels: u16,
    pub sample_width: u16,
    pub frame_ms: u32,
}

impl AudioFormat {
    pub const PCM16_16K_MONO: AudioFormat = AudioFormat {
        sample_rate: SAMPLE_RATE,
        channels: 1,
        sample_width: 2,
        frame_ms: FRAME_MS,
    };

    pub fn samples_per_frame(&self) -> usize {
        (self.sample_rate * self.frame_ms / 1000) as usize * self.channels as usize
    }

    pub fn frame_bytes(&self) -> usize {
        self.samples_per_frame() * self.sample_width as usize
    }
}

impl Default for AudioFormat {
    fn default() -> Self {
        Self::PCM16_16K_MONO
    }
}

/// Capture device seam.
pub trait AudioSource: Send {
    fn next_frame(&mut self) -> PcmFrame;
}

/// Playback device seam. `concealed` marks frames synthesized for a gap.
pub trait AudioSink: Send {
    fn play(&mut self, frame: &PcmFrame, concealed: bool);
}

fn frame_from_samples(samples: impl Iterator<Item = i16>) -> PcmFrame {
    let mut out = [0u8; FRAME_BYTES];
    for (chunk, s) in out.chunks_exact_mut(2).zip(samples) {
        chunk.copy_from_slice(&s.to_le_bytes());
    }
    out
}

#[derive(Debug, Clone)]
pub struct SineSource {
    freq_hz: f64,
    amplitude: f64,
    n: u64,
}

impl SineSource {
    pub fn new(freq_hz: f64, amplitude: i16) -> Self {
        Self {
            freq_hz,
            amplitude: amplitude as f64,
            n: 0,
        }
    }
}

impl AudioSource for SineSource {
    fn next_frame(&mut self) -> PcmFrame {
        let start = self.n;
        self.n += FRAME_SAMPLES as u64;
        frame_from_samples((start..start + FRAME_SAMPLES as u64).map(|i| {
            let t = i as f64 / SAMPLE_RATE as f64;
            (self.amplitude * (TAU * self.freq_hz * t).sin()).round() as i16
        }))
    }
}

/// Linear sweep from `f0` to `f1` over `period_s`, repeating.
#[derive(Debug, Clone)]
pub struct ChirpSource {
    f0: f64,
    f1: f64,
    period_s: f64,
    amplitude: f64,
    n: u64,
}

impl ChirpSource {
    pub fn new(f0: f64, f1: f64, period_s: f64, amplitude: i16) -> Self {
        Self {
            f0,
            f1,
            period_s,
            amplitude: amplitude as f64,
            n: 0,
        }
    }
}

impl AudioSource for ChirpSource {
    fn next_frame(&mut self) -> PcmFrame {
        let start = self.n;
        self.n += FRAME_SAMPLES as u64;
        let k = (self.f1 - self.f0) / self.period_s;
        frame_from_samples((start..start + FRAME_SAMPLES as u64).map(|i| {
            let t = (i as f64 / SAMPLE_RATE as f64) % self.period_s;
            let phase = TAU * (self.f0 * t + 0.5 * k * t * t);
            (self.amplitude * phase.sin()).round() as i16
        }))
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SilenceSource;

impl AudioSource for SilenceSource {
    fn next_frame(&mut self) -> PcmFrame {
        [0u8; FRAME_BYTES]
    }
}

/// Plays back a little-endian PCM16 file frame by frame, then silence.
#[derive(Debug, Clone)]
pub struct PcmFileSource {
    data: Vec<u8>,
    pos: usize,
    looped: bool,
}

impl PcmFileSource {
    pub fn open(path: &Path, looped: bool) -> io::Result<Self> {
        Ok(Self::from_bytes(fs::read(path)?, looped))
    }

    pub fn from_bytes(data: Vec<u8>, looped: bool) -> Self {
        Self { data, pos: 0, looped }
    }
}

impl AudioSource for PcmFileSource {
    fn next_frame(&mut self) -> PcmFrame {
        let mut out = [0u8; FRAME_BYTES];
        if self.looped && !self.data.is_empty() && self.pos >= self.data.len() {
            self.pos = 0;
        }
        let end = (self.pos + FRAME_BYTES).min(self.data.len());
        if self.pos < end {
            out[..end - self.pos].copy_from_slice(&self.data[self.pos..end]);
        }
        self.pos += FRAME_BYTES;
        out
    }
}

pub fn write_pcm16_le(path: &Path, samples: &[i16]) -> io::Result<()> {
    let bytes: Vec<u8> = samples.iter().flat_map(|s| s.to_le_bytes()).collect();
    fs::write(path, bytes)
}

pub fn read_pcm16_le(path: &Path) -> io::Result<Vec<i16>> {
    let bytes = fs::read(path)?;
    if bytes.len() % 2 != 0 {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "odd byte count in PCM16 file"));
    }
    Ok(bytes.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]])).collect())
}

#[derive(Debug, Clone, Copy, Default)]
pub struct NullSink;

impl AudioSink for NullSink {
    fn play(&mut self, _frame: &PcmFrame, _concealed: bool) {}
}

/// Collects everything played, for inspection by tests and the harness.
#[derive(Debug, Clone, Default)]
pub struct RecordingSink {
    pub played: Arc<Mutex<Vec<u8>>>,
    pub concealed: Arc<Mutex<u64>>,
}

impl AudioSink for RecordingSink {
    fn play(&mut self, frame: &PcmFrame, concealed: bool) {
        self.played.lock().expect("sink lock").extend_from_slice(frame);
        if concealed {
            *self.concealed.lock().expect("sink lock") += 1;
        }
    }
}

//! Voice pipeline pieces: synthetic capture, framing and sealing, jitter
//! buffering and call quality counters. Socket handling lives in the node.

pub mod audio;
pub mod jitter;
pub mod packetizer;
pub mod stats;

pub use audio::{
    AudioFormat, AudioSink, AudioSource, ChirpSource, NullSink, PcmFileSource, PcmFrame, RecordingSink, SilenceSource,
    SineSource, FRAME_BYTES, FRAME_MS, FRAME_SAMPLES, SAMPLE_RATE,
};
pub use jitter::{JitterBuffer, JitterStats, Playout, PushOutcome, DEFAULT_DEPTH};
pub use packetizer::{Depacketizer, MediaError, OpenedFrame, Packetizer, SequenceUnwrapper, StreamParams};
pub use jitter::SharedJitter;
pub use stats::{median, percentile};
pub use stats::{CallStats, StatsCollector};

//! Fixed-depth reorder buffer with one output frame per playout tick.

use std::collections::{BTreeMap, VecDeque};
use std::sync::{Arc, Mutex};

use super::audio::{PcmFrame, FRAME_BYTES};

pub const DEFAULT_DEPTH: usize = 2;

/// How many played sequence numbers are remembered for duplicate detection.
const HISTORY: usize = 512;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct JitterStats {
    pub played: u64,
    pub late: u64,
    pub lost: u64,
    pub duplicate: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PushOutcome {
    Buffered,
    Late,
    Duplicate,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Playout {
    /// Prefill has not completed; nothing is played yet.
    Waiting,
    Frame { seq: u64, pcm: Box<PcmFrame> },
    /// Expected frame missing; silence played in its place.
    Concealed { seq: u64 },
}

impl Playout {
    pub fn pcm(&self) -> Option<PcmFrame> {
        match self {
            Playout::Waiting => None,
            Playout::Frame { pcm, .. } => Some(**pcm),
            Playout::Concealed { .. } => Some([0u8; FRAME_BYTES]),
        }
    }
}

/// Frames are keyed by extended sequence number. The buffered window is
/// `[next, next + depth]`, so at most `depth + 1` frames are ever held.
#[derive(Debug, Clone)]
pub struct JitterBuffer {
    depth: usize,
    slots: BTreeMap<u64, Box<PcmFrame>>,
    next: Option<u64>,
    played: VecDeque<u64>,
    stats: JitterStats,
}

impl Default for JitterBuffer {
    fn default() -> Self {
        Self::new(DEFAULT_DEPTH)
    }
}

impl JitterBuffer {
    pub fn new(depth: usize) -> Self {
        let depth = depth.max(1);
        Self {
            depth,
            slots: BTreeMap::new(),
            next: None,
            played: VecDeque::with_capacity(HISTORY),
            stats: JitterStats::default(),
        }
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn stats(&self) -> JitterStats {
        self.stats
    }

    /// True once playout has begun or enough frames are buffered to begin.
    pub fn ready(&self) -> bool {
        self.next.is_some() || self.slots.len() >= self.depth
    }

    pub fn started(&self) -> bool {
        self.next.is_some()
    }

    pub fn push(&mut self, seq: u64, pcm: &PcmFrame) -> PushOutcome {
        if self.slots.contains_key(&seq) || self.played.contains(&seq) {
            self.stats.duplicate += 1;
            return PushOutcome::Duplicate;
        }
        match self.next {
            Some(next) if seq < next => {
                self.stats.late += 1;
                return PushOutcome::Late;
            }
            Some(next) => {
                let high = self.slots.last_key_value().map_or(seq, |(&k, _)| k.max(seq));
                if high > next + self.depth as u64 {
                    // slide the window forward; skipped slots become losses
                    let new_next = high - self.depth as u64;
                    for s in next..new_next {
                        if self.slots.remove(&s).is_some() {
                            self.stats.late += 1;
                        } else if s != seq {
                            self.stats.lost += 1;
                        }
                    }
                    self.next = Some(new_next);
                    if seq < new_next {
                        self.stats.late += 1;
                        return PushOutcome::Late;
                    }
                }
            }
            None => {}
        }
        self.slots.insert(seq, Box::new(*pcm));
        if self.next.is_none() && self.slots.len() > self.depth + 1 {
            self.slots.pop_first();
            self.stats.late += 1;
        }
        PushOutcome::Buffered
    }

    /// One playout step.
    pub fn tick(&mut self) -> Playout {
        let next = match self.next {
            Some(n) => n,
            None if self.slots.len() >= self.depth => *self.slots.keys().next().expect("non-empty"),
            None => return Playout::Waiting,
        };
        self.next = Some(next + 1);
        match self.slots.remove(&next) {
            Some(pcm) => {
                self.remember(next);
                self.stats.played += 1;
                Playout::Frame { seq: next, pcm }
            }
            None => {
                self.stats.lost += 1;
                Playout::Concealed { seq: next }
            }
        }
    }

    fn remember(&mut self, seq: u64) {
        if self.played.len() == HISTORY {
            self.played.pop_front();
        }
        self.played.push_back(seq);
    }
}

/// Handle shared by the network receive task (producer) and the playout
/// task (consumer). Both hold the lock only for a push or a tick.
pub type SharedJitter = Arc<Mutex<JitterBuffer>>;

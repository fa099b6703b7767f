//! Fan-out of daemon events to control-API subscribers.

use std::sync::Mutex;

use serde::Serialize;
use serde_json::Value;
use tokio::sync::mpsc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum EventKind {
    Snapshot,
    PresenceChanged,
    MessageReceived,
    CallIncoming,
    CallState,
    CallStats,
    FileOffer,
    FileProgress,
    Error,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Snapshot => "snapshot",
            EventKind::PresenceChanged => "presence-changed",
            EventKind::MessageReceived => "message-received",
            EventKind::CallIncoming => "call-incoming",
            EventKind::CallState => "call-state",
            EventKind::CallStats => "call-stats",
            EventKind::FileOffer => "file-offer",
            EventKind::FileProgress => "file-progress",
            EventKind::Error => "error",
        }
    }
}

/// One event as seen by one subscriber. The snapshot is seq 0, and every
/// later event increments by exactly one.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ControlEvent {
    pub event: EventKind,
    pub seq: u64,
    pub data: Value,
}

struct Subscriber {
    next_seq: u64,
    tx: mpsc::UnboundedSender<ControlEvent>,
}

#[derive(Default)]
pub struct EventBus {
    subs: Mutex<Vec<Subscriber>>,
}

impl EventBus {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn publish(&self, kind: EventKind, data: Value) {
        let mut subs = self.subs.lock().expect("event bus lock");
        subs.retain_mut(|s| {
            let ev = ControlEvent {
                event: kind,
                seq: s.next_seq,
                data: data.clone(),
            };
            s.next_seq += 1;
            s.tx.send(ev).is_ok()
        });
    }

    /// Registers a subscriber whose first event is `snapshot`. Callers build
    /// the snapshot under the same lock that guards the state it describes,
    /// so nothing published afterwards can predate it.
    pub fn subscribe(&self, snapshot: Value) -> mpsc::UnboundedReceiver<ControlEvent> {
        let (tx, rx) = mpsc::unbounded_channel();
        let _ = tx.send(ControlEvent {
            event: EventKind::Snapshot,
            seq: 0,
            data: snapshot,
        });
        self.subs.lock().expect("event bus lock").push(Subscriber { next_seq: 1, tx });
        rx
    }

    pub fn subscriber_count(&self) -> usize {
        self.subs.lock().expect("event bus lock").len()
    }
}

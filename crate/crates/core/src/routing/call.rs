use std::net::SocketAddr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::UtcMillis;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallState {
    Invited,
    Ringing,
    Active,
    Ended,
    Rejected,
}

impl CallState {
    pub fn is_terminal(self) -> bool {
        matches!(self, CallState::Ended | CallState::Rejected)
    }

    pub fn is_live(self) -> bool {
        !self.is_terminal()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CallEvent {
    /// Invite delivered to the callee.
    Ring,
    /// Callee accepted; key exchange may start.
    Accept,
    /// Both sides proved key possession.
    KeysConfirmed,
    Reject,
    Hangup,
    Disconnect,
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
#[error("event {event:?} is not valid in state {state:?}")]
pub struct IllegalTransition {
    pub state: CallState,
    pub event: CallEvent,
}

/// State plus the accept latch that separates "ringing" from "accepted,
/// keys pending" without adding a visible state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CallPhase {
    pub state: CallState,
    pub accepted: bool,
}

impl Default for CallPhase {
    fn default() -> Self {
        Self {
            state: CallState::Invited,
            accepted: false,
        }
    }
}

impl CallPhase {
    /// Applies `event`; on error the phase is left untouched.
    pub fn apply(&mut self, event: CallEvent) -> Result<CallState, IllegalTransition> {
        use CallEvent::*;
        use CallState::*;
        let next = match (self.state, self.accepted, event) {
            (Invited, _, Ring) => (Ringing, false),
            (Ringing, false, Accept) => (Ringing, true),
            (Ringing, true, KeysConfirmed) => (Active, true),
            (Ringing, false, Reject) => (Rejected, false),
            (Invited | Ringing | Active, acc, Hangup | Disconnect) => (Ended, acc),
            (state, _, event) => return Err(IllegalTransition { state, event }),
        };
        (self.state, self.accepted) = next;
        Ok(self.state)
    }
}

/// Server-side record of one call.
#[derive(Debug, Clone, Serialize)]
pub struct CallSession {
    pub call_id: u64,
    pub caller: String,
    pub callee: String,
    #[serde(skip)]
    pub phase: CallPhase,
    pub state: CallState,
    pub route: Vec<String>,
    pub media_endpoints: Option<[SocketAddr; 2]>,
    pub started_at: UtcMillis,
    pub ended_at: Option<UtcMillis>,
    pub log: Vec<(CallState, UtcMillis)>,
}

impl CallSession {
    pub fn new(call_id: u64, caller: &str, callee: &str, now: UtcMillis) -> Self {
        Self {
            call_id,
            caller: caller.to_string(),
            callee: callee.to_string(),
            phase: CallPhase::default(),
            state: CallState::Invited,
            route: Vec::new(),
            media_endpoints: None,
            started_at: now,
            ended_at: None,
            log: vec![(CallState::Invited, now)],
        }
    }

    pub fn apply(&mut self, event: CallEvent, now: UtcMillis) -> Result<CallState, IllegalTransition> {
        let before = self.phase.state;
        let after = self.phase.apply(event)?;
        self.state = after;
        if after != before {
            self.log.push((after, now));
            if after.is_terminal() {
                self.ended_at = Some(now);
                self.media_endpoints = None;
            }
        }
        Ok(after)
    }

    pub fn involves(&self, user: &str) -> bool {
        self.caller == user || self.callee == user
    }

    pub fn peer_of(&self, user: &str) -> Option<&str> {
        if self.caller == user {
            Some(&self.callee)
        } else if self.callee == user {
            Some(&self.caller)
        } else {
            None
        }
    }

    pub fn states(&self) -> Vec<CallState> {
        self.log.iter().map(|(s, _)| *s).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const EVENTS: [CallEvent; 6] = [
        CallEvent::Ring,
        CallEvent::Accept,
        CallEvent::KeysConfirmed,
        CallEvent::Reject,
        CallEvent::Hangup,
        CallEvent::Disconnect,
    ];

    fn allowed(from: CallState, to: CallState) -> bool {
        use CallState::*;
        from == to
            || matches!(
                (from, to),
                (Invited, Ringing) | (Ringing, Active) | (Ringing, Rejected) | (Active, Ended) | (Invited, Ended) | (Ringing, Ended)
            )
    }

    #[test]
    fn accept_flow() {
        let mut c = CallSession::new(1, "alice", "bob", UtcMillis(0));
        for (i, e) in [CallEvent::Ring, CallEvent::Accept, CallEvent::KeysConfirmed].into_iter().enumerate() {
            c.apply(e, UtcMillis(i as u64 + 1)).unwrap();
        }
        assert_eq!(c.states(), vec![CallState::Invited, CallState::Ringing, CallState::Active]);
        c.apply(CallEvent::Hangup, UtcMillis(10)).unwrap();
        assert_eq!(c.ended_at, Some(UtcMillis(10)));
        assert!(c.apply(CallEvent::Hangup, UtcMillis(11)).is_err());
    }

    #[test]
    fn reject_flow() {
        let mut c = CallSession::new(1, "alice", "bob", UtcMillis(0));
        c.apply(CallEvent::Ring, UtcMillis(1)).unwrap();
        c.apply(CallEvent::Reject, UtcMillis(2)).unwrap();
        assert_eq!(c.state, CallState::Rejected);
        assert!(c.media_endpoints.is_none());
    }

    #[test]
    fn keys_before_accept_is_illegal() {
        let mut p = CallPhase::default();
        p.apply(CallEvent::Ring).unwrap();
        assert!(p.apply(CallEvent::KeysConfirmed).is_err());
        p.apply(CallEvent::Accept).unwrap();
        assert!(p.apply(CallEvent::Reject).is_err());
        assert_eq!(p.apply(CallEvent::KeysConfirmed), Ok(CallState::Active));
    }

    proptest! {
        #[test]
        fn random_event_sequences(idx in proptest::collection::vec(0usize..EVENTS.len(), 0..40)) {
            let mut p = CallPhase::default();
            for i in idx {
                let before = p;
                match p.apply(EVENTS[i]) {
                    Ok(s) => prop_assert!(allowed(before.state, s), "{:?} -> {:?}", before.state, s),
                    Err(_) => prop_assert_eq!(p, before),
                }
                if before.state.is_terminal() {
                    prop_assert_eq!(p, before);
                }
            }
        }
    }
}

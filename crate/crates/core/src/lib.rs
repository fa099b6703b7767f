//! Shared building blocks for the peervoip server, node daemon and bench.

pub mod auth;
pub mod chat;
pub mod clock;
pub mod conn;
pub mod crypto;
pub mod files;
pub mod media;
pub mod protocol;
pub mod routing;
pub mod shaper;
pub mod wire;

pub use clock::{Clock, ManualClock, SystemClock, UtcMillis};
pub use wire::{Kind, MediaFrame, SignalEnvelope};

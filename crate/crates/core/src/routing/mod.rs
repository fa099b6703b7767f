//! Proxy topology, shortest routes and the call state machine.

mod call;
mod graph;

pub use call::{CallEvent, CallPhase, CallSession, CallState, IllegalTransition};
pub use graph::{ProxyGraph, Route, RouteError, RttEstimator, RTT_ALPHA};

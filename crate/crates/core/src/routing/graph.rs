use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const RTT_ALPHA: f64 = 0.2;

#[derive(Debug, Error, PartialEq)]
pub enum RouteError {
    #[error("no path between {0} and {1}")]
    Unreachable(String, String),
    #[error("unknown proxy {0}")]
    UnknownProxy(String),
    #[error("user {0} is not attached to any proxy")]
    Unattached(String),
    #[error("rtt must be positive and finite, got {0}")]
    BadRtt(f64),
}

/// Exponentially smoothed RTT; the first sample seeds the estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RttEstimator {
    alpha: f64,
    value: Option<f64>,
}

impl Default for RttEstimator {
    fn default() -> Self {
        Self::new(RTT_ALPHA)
    }
}

impl RttEstimator {
    pub fn new(alpha: f64) -> Self {
        Self { alpha, value: None }
    }

    pub fn observe(&mut self, sample_ms: f64) -> f64 {
        let v = match self.value {
            None => sample_ms,
            Some(prev) => prev + self.alpha * (sample_ms - prev),
        };
        self.value = Some(v);
        v
    }

    pub fn value(&self) -> Option<f64> {
        self.value
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Route {
    pub proxies: Vec<String>,
    pub cost_ms: f64,
}

/// Undirected proxy graph. Edges are keyed by the ordered id pair, so
/// `rtt(a, b) == rtt(b, a)` holds by construction.
#[derive(Debug, Clone, Default)]
pub struct ProxyGraph {
    proxies: BTreeSet<String>,
    edges: BTreeMap<(String, String), RttEstimator>,
    attachments: HashMap<String, String>,
}

fn key(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

impl ProxyGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_proxy(&mut self, id: &str) {
        self.proxies.insert(id.to_string());
    }

    pub fn proxies(&self) -> impl Iterator<Item = &str> {
        self.proxies.iter().map(String::as_str)
    }

    /// Sets an edge weight outright, replacing any smoothed history.
    pub fn set_rtt(&mut self, a: &str, b: &str, rtt_ms: f64) -> Result<(), RouteError> {
        if !(rtt_ms.is_finite() && rtt_ms > 0.0) {
            return Err(RouteError::BadRtt(rtt_ms));
        }
        self.add_proxy(a);
        self.add_proxy(b);
        let mut est = RttEstimator::default();
        est.observe(rtt_ms);
        self.edges.insert(key(a, b), est);
        Ok(())
    }

    /// Folds a probe sample into the edge estimate.
    pub fn observe_rtt(&mut self, a: &str, b: &str, sample_ms: f64) -> Result<f64, RouteError> {
        if !(sample_ms.is_finite() && sample_ms > 0.0) {
            return Err(RouteError::BadRtt(sample_ms));
        }
        self.add_proxy(a);
        self.add_proxy(b);
        Ok(self.edges.entry(key(a, b)).or_default().observe(sample_ms))
    }

    pub fn rtt(&self, a: &str, b: &str) -> Option<f64> {
        self.edges.get(&key(a, b)).and_then(|e| e.value())
    }

    pub fn neighbors<'a>(&'a self, id: &'a str) -> impl Iterator<Item = (&'a str, f64)> + 'a {
        self.edges.iter().filter_map(move |((a, b), est)| {
            let w = est.value()?;
            if a == id {
                Some((b.as_str(), w))
            } else if b == id {
                Some((a.as_str(), w))
            } else {
                None
            }
        })
    }

    pub fn attach(&mut self, user: &str, proxy: &str) {
        self.add_proxy(proxy);
        self.attachments.insert(user.to_string(), proxy.to_string());
    }

    pub fn detach(&mut self, user: &str) {
        self.attachments.remove(user);
    }

    pub fn attachment(&self, user: &str) -> Option<&str> {
        self.attachments.get(user).map(String::as_str)
    }

    pub fn route_between_users(&self, src_user: &str, dst_user: &str) -> Result<Route, RouteError> {
        let src = self
            .attachment(src_user)
            .ok_or_else(|| RouteError::Unattached(src_user.into()))?;
        let dst = self
            .attachment(dst_user)
            .ok_or_else(|| RouteError::Unattached(dst_user.into()))?;
        self.shortest_route(src, dst)
    }

    /// Dijkstra over (cost, path) labels. Equal-cost paths resolve to the
    /// lexicographically smallest id sequence.
    pub fn shortest_route(&self, src: &str, dst: &str) -> Result<Route, RouteError> {
        for p in [src, dst] {
            if !self.proxies.contains(p) {
                return Err(RouteError::UnknownProxy(p.into()));
            }
        }
        let mut heap = BinaryHeap::new();
        let mut settled = BTreeSet::new();
        heap.push(Label {
            cost: 0.0,
            path: vec![src.to_string()],
        });
        while let Some(Label { cost, path }) = heap.pop() {
            let at = path.last().expect("non-empty path").clone();
            if !settled.insert(at.clone()) {
                continue;
            }
            if at == dst {
                return Ok(Route { proxies: path, cost_ms: cost });
            }
            for (next, w) in self.neighbors(&at) {
                if settled.contains(next) {
                    continue;
                }
                let mut p = path.clone();
                p.push(next.to_string());
                heap.push(Label { cost: cost + w, path: p });
            }
        }
        Err(RouteError::Unreachable(src.into(), dst.into()))
    }
}

#[derive(Debug, PartialEq)]
struct Label {
    cost: f64,
    path: Vec<String>,
}

impl Eq for Label {}

impl Ord for Label {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| other.path.cmp(&self.path))
    }
}

impl PartialOrd for Label {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

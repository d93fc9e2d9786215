//! Request counters and a TTFT histogram keyed by active-adapter count.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use parking_lot::Mutex;
use serde::Serialize;

/// Upper bounds (ms) of every bucket except the open-ended last one.
pub const TTFT_BOUNDS_MS: [f64; 3] = [1.0, 5.0, 25.0];

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TtftHistogram {
    pub count: u64,
    pub sum_ms: f64,
    /// Counts for `[0,1)`, `[1,5)`, `[5,25)` and `[25,inf)` ms.
    pub buckets: [u64; 4],
}

impl TtftHistogram {
    pub fn observe(&mut self, ms: f64) {
        let slot = TTFT_BOUNDS_MS.iter().position(|&b| ms < b).unwrap_or(TTFT_BOUNDS_MS.len());
        self.buckets[slot] += 1;
        self.count += 1;
        self.sum_ms += ms;
    }
}

#[derive(Debug)]
pub struct Metrics {
    enabled: bool,
    queries: AtomicU64,
    query_errors: AtomicU64,
    admin_mutations: AtomicU64,
    admin_rejections: AtomicU64,
    audits: AtomicU64,
    ttft: Mutex<BTreeMap<usize, TtftHistogram>>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsSnapshot {
    pub enabled: bool,
    pub counters: BTreeMap<&'static str, u64>,
    pub ttft_bounds_ms: [f64; 3],
    /// Keyed by the number of active adapters, as a decimal string.
    pub ttft_ms: BTreeMap<String, TtftHistogram>,
}

#[derive(Clone, Copy, Debug)]
pub enum Counter {
    Query,
    QueryError,
    AdminMutation,
    AdminRejection,
    Audit,
}

impl Metrics {
    pub fn new(enabled: bool) -> Self {
        Self {
            enabled,
            queries: AtomicU64::new(0),
            query_errors: AtomicU64::new(0),
            admin_mutations: AtomicU64::new(0),
            admin_rejections: AtomicU64::new(0),
            audits: AtomicU64::new(0),
            ttft: Mutex::new(BTreeMap::new()),
        }
    }

    fn counter(&self, c: Counter) -> &AtomicU64 {
        match c {
            Counter::Query => &self.queries,
            Counter::QueryError => &self.query_errors,
            Counter::AdminMutation => &self.admin_mutations,
            Counter::AdminRejection => &self.admin_rejections,
            Counter::Audit => &self.audits,
        }
    }

    pub fn incr(&self, c: Counter) {
        if self.enabled {
            self.counter(c).fetch_add(1, Ordering::Relaxed);
        }
    }

    pub fn observe_ttft(&self, active: usize, ms: f64) {
        if self.enabled {
            self.ttft.lock().entry(active).or_default().observe(ms);
        }
    }

    pub fn snapshot(&self) -> MetricsSnapshot {
        let get = |c| self.counter(c).load(Ordering::Relaxed);
        MetricsSnapshot {
            enabled: self.enabled,
            counters: BTreeMap::from([
                ("queries", get(Counter::Query)),
                ("query_errors", get(Counter::QueryError)),
                ("admin_mutations", get(Counter::AdminMutation)),
                ("admin_rejections", get(Counter::AdminRejection)),
                ("audits", get(Counter::Audit)),
            ]),
            ttft_bounds_ms: TTFT_BOUNDS_MS,
            ttft_ms: self
                .ttft
                .lock()
                .iter()
                .map(|(k, h)| (k.to_string(), h.clone()))
                .collect(),
        }
    }
}

use std::sync::atomic::{AtomicI64, Ordering};
use std::time::{SystemTime, UNIX_EPOCH};

/// Source of UTC millisecond timestamps for decisions and audit records.
pub trait Clock: Send + Sync {
    fn now_ms(&self) -> i64;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> i64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as i64)
            .unwrap_or(0)
    }
}

/// Deterministic clock: every reading advances by `step_ms` from `start_ms`.
/// In-memory runs use it so that audit payloads are reproducible.
#[derive(Debug)]
pub struct LogicalClock {
    next: AtomicI64,
    step_ms: i64,
}

/// 2024-01-01T00:00:00Z.
pub const LOGICAL_EPOCH_MS: i64 = 1_704_067_200_000;

impl LogicalClock {
    pub fn new(start_ms: i64, step_ms: i64) -> Self {
        Self { next: AtomicI64::new(start_ms), step_ms }
    }
}

impl Default for LogicalClock {
    fn default() -> Self {
        Self::new(LOGICAL_EPOCH_MS, 1)
    }
}

impl Clock for LogicalClock {
    fn now_ms(&self) -> i64 {
        self.next.fetch_add(self.step_ms, Ordering::SeqCst)
    }
}

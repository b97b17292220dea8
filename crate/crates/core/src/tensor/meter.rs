use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

#[derive(Debug, Default)]
struct Counters {
    live: AtomicUsize,
    peak: AtomicUsize,
    allocations: AtomicUsize,
    grad_allocations: AtomicUsize,
}

/// Byte accounting for tape records and gradient buffers.
///
/// Clones share the same counters, so several tapes can report into one meter.
#[derive(Debug, Clone, Default)]
pub struct MemoryMeter(Arc<Counters>);

impl MemoryMeter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn alloc(&self, bytes: usize) {
        let c = &self.0;
        c.allocations.fetch_add(1, Ordering::Relaxed);
        let live = c.live.fetch_add(bytes, Ordering::Relaxed) + bytes;
        c.peak.fetch_max(live, Ordering::Relaxed);
    }

    pub fn free(&self, bytes: usize) {
        let c = &self.0;
        let mut cur = c.live.load(Ordering::Relaxed);
        loop {
            let next = cur.saturating_sub(bytes);
            match c
                .live
                .compare_exchange_weak(cur, next, Ordering::Relaxed, Ordering::Relaxed)
            {
                Ok(_) => break,
                Err(v) => cur = v,
            }
        }
    }

    /// Counts a gradient buffer allocation (transient or leaf).
    pub fn grad_alloc(&self) {
        self.0.grad_allocations.fetch_add(1, Ordering::Relaxed);
    }

    pub fn live_bytes(&self) -> usize {
        self.0.live.load(Ordering::Relaxed)
    }

    pub fn peak_bytes(&self) -> usize {
        self.0.peak.load(Ordering::Relaxed)
    }

    pub fn allocations(&self) -> usize {
        self.0.allocations.load(Ordering::Relaxed)
    }

    pub fn grad_allocations(&self) -> usize {
        self.0.grad_allocations.load(Ordering::Relaxed)
    }

    /// Reset the high-water mark to the current live count.
    pub fn reset_peak(&self) {
        self.0.peak.store(self.live_bytes(), Ordering::Relaxed);
    }
}

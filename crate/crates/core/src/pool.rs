//! Byte accounting for engine working buffers.
//!
//! Every S-stage and P-stage buffer is drawn from a [`BufferPool`], which
//! tracks live, peak and largest-single-buffer byte counts. Outputs handed
//! back to callers (loss traces, gradients) are not counted.

use std::ops::{Deref, DerefMut};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

#[derive(Debug, Default)]
struct Counters {
    current: AtomicUsize,
    peak: AtomicUsize,
    largest: AtomicUsize,
    allocations: AtomicUsize,
}

/// Shared accountant; clones observe the same counters.
#[derive(Clone, Debug, Default)]
pub struct BufferPool {
    inner: Arc<Counters>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct PoolStats {
    pub current_bytes: usize,
    pub peak_bytes: usize,
    pub largest_bytes: usize,
    pub allocations: usize,
}

impl BufferPool {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tracked buffer of `n` copies of `fill`.
    pub fn take<X: Clone>(&self, n: usize, fill: X) -> Buf<X> {
        let bytes = n * std::mem::size_of::<X>();
        let c = &self.inner;
        let now = c.current.fetch_add(bytes, Ordering::SeqCst) + bytes;
        c.peak.fetch_max(now, Ordering::SeqCst);
        c.largest.fetch_max(bytes, Ordering::SeqCst);
        c.allocations.fetch_add(1, Ordering::SeqCst);
        Buf {
            data: vec![fill; n],
            bytes,
            pool: Some(self.clone()),
        }
    }

    pub fn stats(&self) -> PoolStats {
        let c = &self.inner;
        PoolStats {
            current_bytes: c.current.load(Ordering::SeqCst),
            peak_bytes: c.peak.load(Ordering::SeqCst),
            largest_bytes: c.largest.load(Ordering::SeqCst),
            allocations: c.allocations.load(Ordering::SeqCst),
        }
    }

    /// Restarts peak tracking from the current live size.
    pub fn reset_peak(&self) {
        let c = &self.inner;
        c.peak
            .store(c.current.load(Ordering::SeqCst), Ordering::SeqCst);
        c.largest.store(0, Ordering::SeqCst);
    }

    fn release(&self, bytes: usize) {
        self.inner.current.fetch_sub(bytes, Ordering::SeqCst);
    }
}

/// Pool-tracked vector; releases its bytes on drop.
#[derive(Debug)]
pub struct Buf<X> {
    data: Vec<X>,
    bytes: usize,
    pool: Option<BufferPool>,
}

impl<X> Buf<X> {
    /// Wraps a vector without accounting.
    pub fn untracked(data: Vec<X>) -> Self {
        Buf {
            data,
            bytes: 0,
            pool: None,
        }
    }

    pub fn bytes(&self) -> usize {
        self.bytes
    }
}

impl<X> Deref for Buf<X> {
    type Target = [X];
    fn deref(&self) -> &[X] {
        &self.data
    }
}

impl<X> DerefMut for Buf<X> {
    fn deref_mut(&mut self) -> &mut [X] {
        &mut self.data
    }
}

impl<X> Drop for Buf<X> {
    fn drop(&mut self) {
        if let Some(p) = &self.pool {
            p.release(self.bytes);
        }
    }
}

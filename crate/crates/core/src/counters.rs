//! Thread-local operation counters.
//!
//! Every counter is per thread, so concurrently running evaluations (or
//! tests) never see each other's increments. Take a [`snapshot`] before and
//! after the region of interest and diff them.

use std::cell::Cell;

thread_local! {
    static POOL_CALLS: Cell<u64> = const { Cell::new(0) };
    static HEAD_PASSES: Cell<u64> = const { Cell::new(0) };
    static UPSAMPLE_CALLS: Cell<u64> = const { Cell::new(0) };
    static MACS: Cell<u64> = const { Cell::new(0) };
}

/// Counter values at one point in time.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Snapshot {
    /// Average-pooling invocations over a mask or ratio map.
    pub pool_calls: u64,
    /// Neck + relation-head passes, one per evaluated token sequence.
    pub head_passes: u64,
    /// Bilinear upsampling invocations.
    pub upsample_calls: u64,
    /// Multiply-accumulates performed by matrix products.
    pub macs: u64,
}

impl std::ops::Sub for Snapshot {
    type Output = Snapshot;
    fn sub(self, rhs: Snapshot) -> Snapshot {
        Snapshot {
            pool_calls: self.pool_calls - rhs.pool_calls,
            head_passes: self.head_passes - rhs.head_passes,
            upsample_calls: self.upsample_calls - rhs.upsample_calls,
            macs: self.macs - rhs.macs,
        }
    }
}

pub fn snapshot() -> Snapshot {
    Snapshot {
        pool_calls: POOL_CALLS.with(Cell::get),
        head_passes: HEAD_PASSES.with(Cell::get),
        upsample_calls: UPSAMPLE_CALLS.with(Cell::get),
        macs: MACS.with(Cell::get),
    }
}

pub(crate) fn add_pool_call() {
    POOL_CALLS.with(|c| c.set(c.get() + 1));
}

pub(crate) fn add_head_pass() {
    HEAD_PASSES.with(|c| c.set(c.get() + 1));
}

pub(crate) fn add_upsample_call() {
    UPSAMPLE_CALLS.with(|c| c.set(c.get() + 1));
}

pub(crate) fn add_macs(n: u64) {
    MACS.with(|c| c.set(c.get() + n));
}

//! Element-count accounting for tensor buffers.
//!
//! A counter is installed on the current thread with [`AllocCounter::install`];
//! every tensor buffer created on that thread while the guard is alive is
//! charged to it and credited back when the buffer is dropped, whichever
//! thread drops it.

use std::cell::RefCell;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

#[derive(Debug, Default)]
pub struct AllocCounter {
    live: AtomicUsize,
    peak: AtomicUsize,
}

thread_local! {
    static ACTIVE: RefCell<Vec<Arc<AllocCounter>>> = const { RefCell::new(Vec::new()) };
}

impl AllocCounter {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    /// Elements currently held by live buffers charged to this counter.
    pub fn live_elements(&self) -> usize {
        self.live.load(Ordering::Acquire)
    }

    /// High-water mark since creation or the last [`reset`](Self::reset).
    pub fn peak_elements(&self) -> usize {
        self.peak.load(Ordering::Acquire)
    }

    /// Starts a new measurement epoch: `peak := live`.
    pub fn reset(&self) {
        self.peak.store(self.live.load(Ordering::Acquire), Ordering::Release);
    }

    /// Peak minus the live count at the start of the epoch is what callers
    /// usually want; this returns `peak - baseline` saturating at zero.
    pub fn transient_since(&self, baseline: usize) -> usize {
        self.peak_elements().saturating_sub(baseline)
    }

    pub(crate) fn charge(&self, n: usize) {
        let live = self.live.fetch_add(n, Ordering::AcqRel) + n;
        self.peak.fetch_max(live, Ordering::AcqRel);
    }

    pub(crate) fn credit(&self, n: usize) {
        self.live.fetch_sub(n, Ordering::AcqRel);
    }

    /// Makes this counter the active one on the current thread until the
    /// returned guard drops. Installs nest; the innermost wins.
    pub fn install(self: &Arc<Self>) -> CounterGuard {
        ACTIVE.with(|a| a.borrow_mut().push(Arc::clone(self)));
        CounterGuard { _priv: () }
    }

    pub(crate) fn active() -> Option<Arc<AllocCounter>> {
        ACTIVE.with(|a| a.borrow().last().cloned())
    }
}

/// Uninstalls the counter on drop.
#[must_use = "the counter is uninstalled when the guard is dropped"]
pub struct CounterGuard {
    _priv: (),
}

impl Drop for CounterGuard {
    fn drop(&mut self) {
        ACTIVE.with(|a| {
            a.borrow_mut().pop();
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charge_credit_and_reset() {
        let c = AllocCounter::new();
        c.charge(10);
        c.charge(5);
        assert_eq!(c.live_elements(), 15);
        c.credit(12);
        assert_eq!(c.live_elements(), 3);
        assert_eq!(c.peak_elements(), 15);
        c.reset();
        assert_eq!(c.peak_elements(), 3);
        assert!(c.peak_elements() >= c.live_elements());
    }

    #[test]
    fn install_nests() {
        let outer = AllocCounter::new();
        let inner = AllocCounter::new();
        assert!(AllocCounter::active().is_none());
        let _g1 = outer.install();
        {
            let _g2 = inner.install();
            assert!(Arc::ptr_eq(&AllocCounter::active().unwrap(), &inner));
        }
        assert!(Arc::ptr_eq(&AllocCounter::active().unwrap(), &outer));
    }
}

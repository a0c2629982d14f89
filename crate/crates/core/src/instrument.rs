//! Allocation and flop instrumentation for the attention kernels.
//!
//! [`CountingAllocator`] wraps the system allocator. A binary opts in with
//!
//! ```ignore
//! #[global_allocator]
//! static ALLOC: rib_core::instrument::CountingAllocator = rib_core::instrument::CountingAllocator;
//! ```
//!
//! Bytes are only counted on the current thread while a [`ProbeScope`] is
//! open. The kernels open a scope around their own buffers, so the numbers
//! are attributable to attention alone.

use std::alloc::{GlobalAlloc, Layout, System};
use std::cell::Cell;
use std::sync::atomic::{AtomicBool, Ordering};

static INSTALLED: AtomicBool = AtomicBool::new(false);

thread_local! {
    static DEPTH: Cell<u32> = const { Cell::new(0) };
    static LIVE: Cell<i64> = const { Cell::new(0) };
    static PEAK: Cell<i64> = const { Cell::new(0) };
    static TOTAL: Cell<u64> = const { Cell::new(0) };
}

pub struct CountingAllocator;

fn record(delta: i64) {
    let _ = DEPTH.try_with(|d| {
        if d.get() == 0 {
            return;
        }
        let _ = LIVE.try_with(|live| {
            let now = live.get() + delta;
            live.set(now);
            let _ = PEAK.try_with(|p| p.set(p.get().max(now)));
        });
        if delta > 0 {
            let _ = TOTAL.try_with(|t| t.set(t.get() + delta as u64));
        }
    });
}

unsafe impl GlobalAlloc for CountingAllocator {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc(layout);
        if !p.is_null() {
            INSTALLED.store(true, Ordering::Relaxed);
            record(layout.size() as i64);
        }
        p
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc_zeroed(layout);
        if !p.is_null() {
            INSTALLED.store(true, Ordering::Relaxed);
            record(layout.size() as i64);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        record(-(layout.size() as i64));
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = System.realloc(ptr, layout, new_size);
        if !p.is_null() {
            record(new_size as i64 - layout.size() as i64);
        }
        p
    }
}

/// True once [`CountingAllocator`] has served an allocation in this process.
pub fn allocator_installed() -> bool {
    INSTALLED.load(Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AllocMeasurement {
    /// Highest live byte count reached inside the scope.
    pub peak_bytes: u64,
    /// Sum of all allocation sizes inside the scope.
    pub total_bytes: u64,
}

/// Open measurement scope on the current thread. Scopes nest; an inner
/// scope's allocations also count toward the enclosing one.
pub struct ProbeScope {
    saved_live: i64,
    saved_peak: i64,
    saved_total: u64,
    finished: bool,
}

impl ProbeScope {
    pub fn enter() -> Self {
        let saved_live = LIVE.with(|c| c.replace(0));
        let saved_peak = PEAK.with(|c| c.replace(0));
        let saved_total = TOTAL.with(|c| c.replace(0));
        DEPTH.with(|d| d.set(d.get() + 1));
        Self {
            saved_live,
            saved_peak,
            saved_total,
            finished: false,
        }
    }

    /// Closes the scope. `None` when the counting allocator is not installed.
    pub fn finish(mut self) -> Option<AllocMeasurement> {
        let m = self.close();
        allocator_installed().then_some(m)
    }

    fn close(&mut self) -> AllocMeasurement {
        self.finished = true;
        DEPTH.with(|d| d.set(d.get() - 1));
        let live = LIVE.with(|c| c.get());
        let peak = PEAK.with(|c| c.get());
        let total = TOTAL.with(|c| c.get());
        LIVE.with(|c| c.set(self.saved_live + live));
        PEAK.with(|c| c.set(self.saved_peak.max(self.saved_live + peak)));
        TOTAL.with(|c| c.set(self.saved_total + total));
        AllocMeasurement {
            peak_bytes: peak.max(0) as u64,
            total_bytes: total,
        }
    }
}

impl Drop for ProbeScope {
    fn drop(&mut self) {
        if !self.finished {
            self.close();
        }
    }
}

/// Runs `f` inside a fresh probe scope.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, Option<AllocMeasurement>) {
    let scope = ProbeScope::enter();
    let r = f();
    (r, scope.finish())
}

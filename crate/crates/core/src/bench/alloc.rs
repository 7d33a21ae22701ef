//! Per-thread heap accounting behind a counting global allocator.
//!
//! Counters are thread-local: a measurement sees the allocations made by
//! the thread that runs it, not by worker threads it spawns.

use std::alloc::{GlobalAlloc, Layout, System};
use std::cell::Cell;
use std::time::Instant;

thread_local! {
    static LIVE: Cell<isize> = const { Cell::new(0) };
    static PEAK: Cell<isize> = const { Cell::new(0) };
}

pub struct TrackingAllocator;

fn record(delta: isize) {
    // try_with: the thread may be tearing down its locals
    let _ = LIVE.try_with(|live| {
        let now = live.get() + delta;
        live.set(now);
        let _ = PEAK.try_with(|peak| {
            if now > peak.get() {
                peak.set(now);
            }
        });
    });
}

unsafe impl GlobalAlloc for TrackingAllocator {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc(layout) };
        if !p.is_null() {
            record(layout.size() as isize);
        }
        p
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc_zeroed(layout) };
        if !p.is_null() {
            record(layout.size() as isize);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) };
        record(-(layout.size() as isize));
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = unsafe { System.realloc(ptr, layout, new_size) };
        if !p.is_null() {
            record(new_size as isize - layout.size() as isize);
        }
        p
    }
}

#[cfg(feature = "alloc-tracking")]
#[global_allocator]
static GLOBAL: TrackingAllocator = TrackingAllocator;

/// Whether allocations are being counted in this build.
pub const fn tracking_enabled() -> bool {
    cfg!(feature = "alloc-tracking")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measured<T> {
    pub value: T,
    pub latency_micros: u64,
    /// Peak live heap bytes above the level at entry.
    pub peak_bytes: u64,
}

/// Runs `f`, timing it on the monotonic clock and recording the peak heap
/// growth on this thread while it runs. Nested measurements compose.
pub fn measure<T>(f: impl FnOnce() -> T) -> Measured<T> {
    let base = LIVE.with(Cell::get);
    let outer_peak = PEAK.with(|p| p.replace(base));
    let start = Instant::now();
    let value = f();
    let latency_micros = start.elapsed().as_micros() as u64;
    let peak = PEAK.with(|p| {
        let inner = p.get();
        p.set(inner.max(outer_peak));
        inner
    });
    Measured {
        value,
        latency_micros,
        peak_bytes: (peak - base).max(0) as u64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_op_allocates_nothing() {
        let m = measure(|| 3);
        assert_eq!(m.value, 3);
        assert_eq!(m.peak_bytes, 0);
    }

    #[test]
    fn one_mebibyte_is_seen() {
        let m = measure(|| {
            let v = vec![1u8; 1 << 20];
            v.iter().map(|&b| b as usize).sum::<usize>()
        });
        assert_eq!(m.value, 1 << 20);
        if tracking_enabled() {
            assert!(m.peak_bytes >= 1 << 20);
        }
    }

    #[test]
    fn nested_peaks_propagate_outward() {
        let outer = measure(|| {
            let inner = measure(|| std::hint::black_box(vec![0u8; 4096]).len());
            std::hint::black_box(vec![0u8; 16]);
            inner.peak_bytes
        });
        if tracking_enabled() {
            assert!(outer.value >= 4096);
            assert!(outer.peak_bytes >= outer.value);
        }
    }
}

//! Runtime multiply-accumulate instrumentation.
//!
//! Kernels that perform multiply-accumulates report the count they execute
//! for the shapes they actually received. The static analyzer in
//! [`crate::cost`] is checked against these counts.

use std::cell::Cell;

thread_local! {
    static MACS: Cell<Option<u64>> = const { Cell::new(None) };
}

/// Runs `f` and returns its result together with the number of MACs that the
/// tensor kernels executed on this thread while it ran.
pub fn count_macs<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let saved = MACS.with(|m| m.replace(Some(0)));
    let out = f();
    let counted = MACS.with(|m| m.replace(saved)).unwrap_or(0);
    if let Some(outer) = saved {
        MACS.with(|m| m.set(Some(outer + counted)));
    }
    (out, counted)
}

pub(crate) fn record(n: u64) {
    MACS.with(|m| {
        if let Some(c) = m.get() {
            m.set(Some(c + n));
        }
    });
}

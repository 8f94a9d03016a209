//! Thread-local multiply-accumulate counters fed by every forward matmul.
//!
//! Counts are attributed to the innermost active category, so a kernel can
//! split its cost into e.g. `"score"` and `"projection"` buckets.

use std::cell::RefCell;
use std::collections::BTreeMap;

pub const DEFAULT_CATEGORY: &str = "other";

struct MacState {
    category: &'static str,
    counts: BTreeMap<&'static str, u64>,
}

thread_local! {
    static STATE: RefCell<MacState> = const {
        RefCell::new(MacState { category: DEFAULT_CATEGORY, counts: BTreeMap::new() })
    };
}

/// Runs `f` with matmul MACs attributed to `category`.
pub fn with_category<R>(category: &'static str, f: impl FnOnce() -> R) -> R {
    let prev = STATE.with(|s| std::mem::replace(&mut s.borrow_mut().category, category));
    let out = f();
    STATE.with(|s| s.borrow_mut().category = prev);
    out
}

pub(crate) fn record(macs: u64) {
    STATE.with(|s| {
        let mut s = s.borrow_mut();
        let cat = s.category;
        *s.counts.entry(cat).or_insert(0) += macs;
    });
}

pub fn reset() {
    STATE.with(|s| s.borrow_mut().counts.clear());
}

/// Current counts per category on this thread.
pub fn snapshot() -> BTreeMap<&'static str, u64> {
    STATE.with(|s| s.borrow().counts.clone())
}

pub fn count(category: &str) -> u64 {
    STATE.with(|s| s.borrow().counts.get(category).copied().unwrap_or(0))
}

/// Resets the counters, runs `f`, and returns its output with the counts it produced.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, BTreeMap<&'static str, u64>) {
    reset();
    let out = f();
    (out, snapshot())
}

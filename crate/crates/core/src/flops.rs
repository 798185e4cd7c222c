//! Thread-local multiply-accumulate counters.
//!
//! Every forward kernel in the graph adds the number of multiply-accumulates
//! (or elementwise evaluations) it performs. A MAC counts as one unit.

use std::cell::Cell;

thread_local! {
    static COUNTER: Cell<u64> = const { Cell::new(0) };
}

pub fn add(n: u64) {
    COUNTER.with(|c| c.set(c.get().wrapping_add(n)));
}

pub fn read() -> u64 {
    COUNTER.with(|c| c.get())
}

/// Runs `f` and returns its result together with the units counted inside it.
pub fn measure<T>(f: impl FnOnce() -> T) -> (T, u64) {
    let before = read();
    let out = f();
    (out, read().wrapping_sub(before))
}

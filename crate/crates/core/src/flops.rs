//! Thread-local floating-point operation counter.
//!
//! Hot kernels report how much arithmetic they executed via [`add`], in bulk,
//! so instrumentation costs one counter bump per kernel call rather than one
//! per scalar operation. The granularity is the retired hardware operation:
//! add, subtract, multiply, and divide count one each, and a fused
//! multiply-add counts one. Transcendental evaluations (exp, tanh, sqrt) are
//! not counted.
//!
//! The counter is per-thread, so seed-parallel runs never contend.

use std::cell::Cell;

thread_local! {
    static COUNTER: Cell<u64> = const { Cell::new(0) };
}

/// Record `n` floating-point operations on the current thread.
#[inline]
pub fn add(n: u64) {
    COUNTER.with(|c| c.set(c.get() + n));
}

/// Current value of this thread's counter.
pub fn read() -> u64 {
    COUNTER.with(|c| c.get())
}

/// Zero this thread's counter.
pub fn reset() {
    COUNTER.with(|c| c.set(0));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_accumulate_and_reset() {
        reset();
        add(3);
        add(4);
        assert_eq!(read(), 7);
        reset();
        assert_eq!(read(), 0);
    }
}

//! Global counter of general (data-by-data) multiplications.
//!
//! Every element-wise tensor product ([`crate::tensor::ewmm`]) adds its element
//! count, and the native engine adds its multiply-accumulate count. Transform
//! multiplications by constant matrix entries are *not* counted — the cost
//! model in [`crate::analysis`] accounts multiplications the way minimal
//! filtering theory does, and this counter is its ground truth.
//!
//! The counter is a process-wide atomic, so totals stay exact even when engine
//! runs overlap across threads. For a measurement that must not see other
//! threads' work, [`measure`] serializes measured sections behind a lock.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

static GENERAL_MULTS: AtomicU64 = AtomicU64::new(0);
static MEASURE_LOCK: Mutex<()> = Mutex::new(());

/// Add `n` general multiplications to the global tally.
pub fn add(n: u64) {
    GENERAL_MULTS.fetch_add(n, Ordering::Relaxed);
}

/// Total general multiplications since the last [`reset`].
pub fn total() -> u64 {
    GENERAL_MULTS.load(Ordering::Relaxed)
}

/// Reset the tally to zero.
pub fn reset() {
    GENERAL_MULTS.store(0, Ordering::Relaxed);
}

/// Run `f` with the counter reset, returning its result and the exact number
/// of general multiplications it performed. Concurrent `measure` calls are
/// serialized so they cannot pollute each other's tallies.
pub fn measure<T>(f: impl FnOnce() -> T) -> (T, u64) {
    let guard = exclusive();
    reset();
    let value = f();
    let mults = total();
    drop(guard);
    (value, mults)
}

/// Hold the measurement lock without measuring. Test code that runs engines
/// concurrently with [`measure`]-based assertions can take this guard to keep
/// its multiplications out of someone else's tally.
pub fn exclusive() -> std::sync::MutexGuard<'static, ()> {
    MEASURE_LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn measure_isolates_and_counts() {
        let (value, n) = measure(|| {
            add(3);
            add(4);
            "done"
        });
        assert_eq!(value, "done");
        assert_eq!(n, 7);

        let ((), n) = measure(|| {});
        assert_eq!(n, 0);
    }
}

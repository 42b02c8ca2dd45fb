//! Worker pool sizing and an order-preserving chunked map.
//!
//! Work is always split into chunks whose boundaries depend only on the input size,
//! and results come back in chunk order, so the worker count never affects output.

use std::cell::Cell;

pub const WORKERS_ENV: &str = "PWHUBERT_WORKERS";

thread_local! {
    static OVERRIDE: Cell<Option<usize>> = const { Cell::new(None) };
}

/// Worker count: thread-local override, then `PWHUBERT_WORKERS`, then the number of
/// available cores.
pub fn workers() -> usize {
    if let Some(n) = OVERRIDE.with(Cell::get) {
        return n.max(1);
    }
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Runs `f` with the calling thread's worker count pinned to `n`.
pub fn with_workers<R>(n: usize, f: impl FnOnce() -> R) -> R {
    let prev = OVERRIDE.with(|c| c.replace(Some(n)));
    let out = f();
    OVERRIDE.with(|c| c.set(prev));
    out
}

/// Applies `f` to each `[start, end)` chunk of `0..len` and returns results in chunk
/// order.
pub fn map_chunks<R, F>(len: usize, chunk: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize, usize) -> R + Sync,
{
    let chunk = chunk.max(1);
    let ranges: Vec<(usize, usize)> = (0..len)
        .step_by(chunk)
        .map(|s| (s, (s + chunk).min(len)))
        .collect();
    let n_workers = workers().min(ranges.len());
    if n_workers <= 1 {
        return ranges.into_iter().map(|(s, e)| f(s, e)).collect();
    }
    let mut slots: Vec<Option<R>> = (0..ranges.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..n_workers)
            .map(|w| {
                let ranges = &ranges;
                let f = &f;
                scope.spawn(move || {
                    ranges
                        .iter()
                        .enumerate()
                        .skip(w)
                        .step_by(n_workers)
                        .map(|(i, &(s, e))| (i, f(s, e)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|r| r.expect("chunk result")).collect()
}

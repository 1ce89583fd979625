//! Execution mode switch.
//!
//! `PTYCHO_DETERMINISTIC=0` lets frame-parallel stages fan out over threads.
//! Any other value, or an unset variable, keeps everything on one thread.
//! Per-item work is pure, so both modes produce identical results.

use std::num::NonZeroUsize;
use std::thread;

pub const DETERMINISTIC_ENV: &str = "PTYCHO_DETERMINISTIC";

pub fn deterministic() -> bool {
    std::env::var(DETERMINISTIC_ENV).map(|v| v.trim() != "0").unwrap_or(true)
}

fn workers() -> usize {
    if deterministic() {
        1
    } else {
        thread::available_parallelism().map(NonZeroUsize::get).unwrap_or(1)
    }
}

/// Order-preserving map that may run on several threads.
pub fn par_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    let n = workers().min(items.len().max(1));
    if n <= 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let chunk = items.len().div_ceil(n);
    let f = &f;
    thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .enumerate()
            .map(|(c, part)| s.spawn(move || part.iter().enumerate().map(|(i, t)| f(c * chunk + i, t)).collect::<Vec<_>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

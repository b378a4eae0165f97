//! Execution-mode dispatch for data-parallel inner loops.
//!
//! Every parallel site in the crate partitions its *output* into disjoint
//! chunks and computes each chunk with a fixed sequential inner order, so
//! results are bitwise identical whether a loop runs on one thread or many.
//! `CMUNET_THREADS=1` (or building without the `parallel` feature) forces the
//! sequential reference path used by the determinism tests.

use std::sync::atomic::{AtomicUsize, Ordering};

/// 0 = no override (fall back to CMUNET_THREADS, then the rayon default).
static THREAD_OVERRIDE: AtomicUsize = AtomicUsize::new(0);

/// Below this many elements the rayon dispatch overhead dominates.
#[cfg(feature = "parallel")]
pub(crate) const PAR_MIN_LEN: usize = 4096;

/// Programmatic override of the thread count, taking precedence over the
/// `CMUNET_THREADS` environment variable. `Some(1)` forces reference mode.
pub fn set_thread_override(threads: Option<usize>) {
    THREAD_OVERRIDE.store(threads.unwrap_or(0), Ordering::SeqCst);
}

fn configured_threads() -> usize {
    let forced = THREAD_OVERRIDE.load(Ordering::SeqCst);
    if forced != 0 {
        return forced;
    }
    std::env::var("CMUNET_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or(0)
}

/// True when loops must run on the sequential reference path.
pub fn sequential() -> bool {
    if cfg!(not(feature = "parallel")) {
        return true;
    }
    configured_threads() == 1
}

#[cfg(feature = "parallel")]
fn ensure_pool() {
    use std::sync::Once;
    static POOL: Once = Once::new();
    POOL.call_once(|| {
        let n = configured_threads();
        if n > 1 {
            // Ignore failure: a global pool may already exist (e.g. under a test
            // harness); the requested count is best-effort, correctness never
            // depends on it.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    });
}

/// Run `body(chunk_index, chunk)` over disjoint `chunk_len`-sized pieces of
/// `out` (the final piece may be shorter). The parallel and sequential paths
/// produce identical bytes.
pub fn for_each_chunk_mut<T, F>(out: &mut [T], chunk_len: usize, body: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    assert!(chunk_len > 0, "chunk_len must be positive");
    #[cfg(feature = "parallel")]
    {
        if !sequential() && out.len() >= PAR_MIN_LEN && out.len() > chunk_len {
            ensure_pool();
            use rayon::prelude::*;
            out.par_chunks_mut(chunk_len)
                .enumerate()
                .for_each(|(i, c)| body(i, c));
            return;
        }
    }
    for (i, c) in out.chunks_mut(chunk_len).enumerate() {
        body(i, c);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunked_write_covers_every_slot() {
        let mut data = vec![0usize; 10_000];
        for_each_chunk_mut(&mut data, 997, |i, chunk| {
            for (j, v) in chunk.iter_mut().enumerate() {
                *v = i * 997 + j;
            }
        });
        for (i, v) in data.iter().enumerate() {
            assert_eq!(*v, i);
        }
    }

    #[test]
    fn sequential_override_roundtrip() {
        set_thread_override(Some(1));
        assert!(sequential());
        set_thread_override(None);
    }
}

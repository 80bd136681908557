//! Optional data parallelism over independent output slabs.
//!
//! Each slab is produced by the same sequential code regardless of the thread
//! count, so results are bit-identical for any `STRACK_THREADS` value.

use std::sync::OnceLock;

use rayon::prelude::*;

pub const THREADS_ENV: &str = "STRACK_THREADS";

static POOL: OnceLock<Option<rayon::ThreadPool>> = OnceLock::new();

fn pool() -> Option<&'static rayon::ThreadPool> {
    POOL.get_or_init(|| {
        let n = std::env::var(THREADS_ENV)
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .unwrap_or(1);
        if n <= 1 {
            None
        } else {
            rayon::ThreadPoolBuilder::new().num_threads(n).build().ok()
        }
    })
    .as_ref()
}

/// Number of worker threads used for internal data parallelism.
pub fn threads() -> usize {
    pool().map_or(1, |p| p.current_num_threads())
}

pub(crate) fn for_each_chunk<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    match pool() {
        Some(p) => p.install(|| {
            data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
        }),
        None => data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c)),
    }
}

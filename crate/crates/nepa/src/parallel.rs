//! Data-parallel execution over independent work items.
//!
//! Work is always split into the same fixed shards and results are always
//! combined in shard order, so [`Exec::Parallel`] and [`Exec::Sequential`]
//! produce bit-identical results regardless of the number of worker threads.
//! Without the `parallel` feature both modes run sequentially.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Samples per gradient shard. Fixed so reductions never depend on threads.
pub const SHARD_SIZE: usize = 8;

/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "NEPA_THREADS";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Exec {
    Sequential,
    Parallel,
}

impl Default for Exec {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

impl Exec {
    /// `(0..n).map(f)`, evaluated on the rayon pool when parallel.
    pub fn map<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel => {
                use rayon::prelude::*;
                (0..n).into_par_iter().map(f).collect()
            }
            _ => (0..n).map(f).collect(),
        }
    }

    /// Like [`Exec::map`] over fallible items; the first error in index order wins.
    pub fn try_map<T, F>(self, n: usize, f: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(usize) -> Result<T> + Sync + Send,
    {
        self.map(n, f).into_iter().collect()
    }
}

/// Contiguous `[start, end)` shards of at most `shard` items.
pub fn shard_ranges(n: usize, shard: usize) -> Vec<Range<usize>> {
    let shard = shard.max(1);
    (0..n.div_ceil(shard))
        .map(|i| i * shard..((i + 1) * shard).min(n))
        .collect()
}

/// Thread cap from [`THREADS_ENV`], if set.
pub fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .map(Some)
            .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got `{v}`"))),
        Err(_) => Ok(None),
    }
}

/// Sizes the global worker pool. Only the first call takes effect.
pub fn init_thread_pool(threads: Option<usize>) {
    #[cfg(feature = "parallel")]
    if let Some(n) = threads {
        // a second initialization is reported as an error by rayon; ignore it
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = threads;
}

//! Worker-pool configuration and the parallel-for contract used by the
//! numeric kernels.

use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Runtime knobs: thread count, kernel autotuning and reproducibility.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerfConfig {
    pub num_threads: usize,
    pub autotune: bool,
    pub deterministic: bool,
    pub warmup: usize,
    pub reps: usize,
    /// Batch size used for the representative tuning data. Both strategies
    /// scale linearly in the batch dimension, so a small probe keeps the
    /// argmin while bounding tuning cost.
    pub tune_batch: usize,
}

impl Default for PerfConfig {
    fn default() -> Self {
        PerfConfig {
            num_threads: 4,
            autotune: false,
            deterministic: true,
            warmup: 2,
            reps: 5,
            tune_batch: 1,
        }
    }
}

impl PerfConfig {
    /// Four workers plus per-layer kernel benchmarking.
    pub fn hpc_on() -> Self {
        PerfConfig { num_threads: 4, autotune: true, ..Default::default() }
    }

    /// One worker and the static UNROLL kernel.
    pub fn hpc_off() -> Self {
        PerfConfig { num_threads: 1, autotune: false, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_threads == 0 {
            return Err(Error::Config("num_threads must be >= 1".into()));
        }
        if self.warmup == 0 || self.reps == 0 {
            return Err(Error::Config("autotune warmup and reps must be >= 1".into()));
        }
        if self.tune_batch == 0 {
            return Err(Error::Config("tune_batch must be >= 1".into()));
        }
        Ok(())
    }
}

/// How a range is cut into work items.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Chunking {
    /// `parts` contiguous pieces whose sizes differ by at most one.
    Even(usize),
    /// Pieces of `size` items; the last one may be shorter.
    Fixed(usize),
}

/// Splits `0..len` into `parts` contiguous ranges; the first `len % parts`
/// ranges get one extra item. Empty ranges are dropped.
pub fn partition(len: usize, parts: usize) -> Vec<Range<usize>> {
    let parts = parts.max(1);
    let base = len / parts;
    let extra = len % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for i in 0..parts {
        let size = base + usize::from(i < extra);
        if size == 0 {
            break;
        }
        out.push(start..start + size);
        start += size;
    }
    out
}

fn chunks(range: Range<usize>, chunking: Chunking) -> Vec<Range<usize>> {
    let len = range.end.saturating_sub(range.start);
    let local = match chunking {
        Chunking::Even(parts) => partition(len, parts),
        Chunking::Fixed(size) => {
            let size = size.max(1);
            (0..len.div_ceil(size)).map(|i| i * size..((i + 1) * size).min(len)).collect()
        }
    };
    local.into_iter().map(|r| r.start + range.start..r.end + range.start).collect()
}

/// A fixed-size pool of worker threads. With one thread every parallel
/// helper degenerates to an in-order sequential loop.
#[derive(Clone)]
pub struct WorkerPool {
    threads: usize,
    #[cfg(feature = "parallel")]
    pool: Arc<rayon::ThreadPool>,
    #[cfg(not(feature = "parallel"))]
    _marker: Arc<()>,
}

impl std::fmt::Debug for WorkerPool {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("WorkerPool").field("threads", &self.threads).finish()
    }
}

/// Builds the worker pool described by `cfg`.
pub fn configure_pool(cfg: &PerfConfig) -> Result<WorkerPool> {
    cfg.validate()?;
    WorkerPool::new(cfg.num_threads)
}

impl WorkerPool {
    pub fn new(threads: usize) -> Result<Self> {
        if threads == 0 {
            return Err(Error::Config("num_threads must be >= 1".into()));
        }
        #[cfg(feature = "parallel")]
        {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .thread_name(|i| format!("hpcnn-worker-{i}"))
                .build()
                .map_err(|e| Error::Config(format!("failed to start worker pool: {e}")))?;
            Ok(WorkerPool { threads, pool: Arc::new(pool) })
        }
        #[cfg(not(feature = "parallel"))]
        {
            Ok(WorkerPool { threads, _marker: Arc::new(()) })
        }
    }

    pub fn sequential() -> Self {
        WorkerPool::new(1).expect("one-thread pool")
    }

    pub fn num_threads(&self) -> usize {
        self.threads
    }

    /// Runs `f` with this pool as the ambient pool for every kernel it calls.
    pub fn install<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        #[cfg(feature = "parallel")]
        {
            self.pool.install(f)
        }
        #[cfg(not(feature = "parallel"))]
        {
            f()
        }
    }

    /// Work ranges for `len` items under the even-split policy.
    pub fn split(&self, len: usize) -> Vec<Range<usize>> {
        partition(len, self.threads)
    }

    /// Runs `body` over chunks of `range` and returns once every chunk has
    /// finished. Bodies must write disjoint outputs. If any chunk fails, the
    /// error of the lowest failing chunk is returned.
    pub fn parallel_for<E: Send>(
        &self,
        range: Range<usize>,
        chunking: Chunking,
        body: impl Fn(Range<usize>) -> Result<(), E> + Sync + Send,
    ) -> Result<(), E> {
        let pieces = chunks(range, chunking);
        if pieces.is_empty() {
            return Ok(());
        }
        let results: Vec<Result<(), E>> = self.install(|| {
            #[cfg(feature = "parallel")]
            {
                use rayon::prelude::*;
                pieces.into_par_iter().map(&body).collect()
            }
            #[cfg(not(feature = "parallel"))]
            {
                pieces.into_iter().map(&body).collect()
            }
        });
        results.into_iter().collect()
    }
}

//! Execution context handed to model forward/backward: the worker pool,
//! the kernel-selection policy and the reproducibility switch.

use std::sync::Arc;

use crate::autotune::{LayerSignature, TuneCache, Tuner};
use crate::error::Result;
use crate::nn::conv::ConvStrategy;
use crate::parallel::{configure_pool, PerfConfig, WorkerPool};

#[derive(Debug, Clone)]
pub enum KernelPolicy {
    Static(ConvStrategy),
    Autotune(Arc<Tuner>),
}

#[derive(Debug, Clone)]
pub struct Engine {
    pool: WorkerPool,
    deterministic: bool,
    policy: KernelPolicy,
}

impl Engine {
    pub fn new(cfg: &PerfConfig) -> Result<Self> {
        let pool = configure_pool(cfg)?;
        let policy = if cfg.autotune {
            KernelPolicy::Autotune(Arc::new(Tuner::new(cfg.warmup, cfg.reps, cfg.tune_batch)))
        } else {
            KernelPolicy::Static(ConvStrategy::Unroll)
        };
        Ok(Engine { pool, deterministic: cfg.deterministic, policy })
    }

    /// Like [`Engine::new`], seeding the tuner with previously stored timings.
    pub fn with_tune_cache(cfg: &PerfConfig, cache: TuneCache) -> Result<Self> {
        let mut e = Self::new(cfg)?;
        if cfg.autotune {
            e.policy = KernelPolicy::Autotune(Arc::new(Tuner::new(cfg.warmup, cfg.reps, cfg.tune_batch).with_cache(cache)));
        }
        Ok(e)
    }

    pub fn from_parts(pool: WorkerPool, deterministic: bool, policy: KernelPolicy) -> Self {
        Engine { pool, deterministic, policy }
    }

    /// One thread, static UNROLL, deterministic.
    pub fn sequential() -> Self {
        Engine { pool: WorkerPool::sequential(), deterministic: true, policy: KernelPolicy::Static(ConvStrategy::Unroll) }
    }

    /// One thread with a fixed kernel.
    pub fn fixed(strategy: ConvStrategy) -> Self {
        Engine { policy: KernelPolicy::Static(strategy), ..Self::sequential() }
    }

    pub fn pool(&self) -> &WorkerPool {
        &self.pool
    }

    pub fn deterministic(&self) -> bool {
        self.deterministic
    }

    pub fn policy(&self) -> &KernelPolicy {
        &self.policy
    }

    pub fn tuner(&self) -> Option<&Tuner> {
        match &self.policy {
            KernelPolicy::Autotune(t) => Some(t),
            KernelPolicy::Static(_) => None,
        }
    }

    pub fn conv_strategy(&self, sig: &LayerSignature) -> ConvStrategy {
        match &self.policy {
            KernelPolicy::Static(s) => *s,
            KernelPolicy::Autotune(t) => t.select(sig),
        }
    }

    pub fn install<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        self.pool.install(f)
    }
}

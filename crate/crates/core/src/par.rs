//! Thin data-parallel helpers. With the `parallel` feature these run on the
//! ambient rayon pool (see [`crate::parallel::WorkerPool::install`]);
//! without it they are plain sequential loops.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

pub fn current_threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

pub fn map_inplace<T: Send + Copy>(data: &mut [T], f: impl Fn(T) -> T + Sync) {
    #[cfg(feature = "parallel")]
    data.par_iter_mut().with_min_len(4096).for_each(|v| *v = f(*v));
    #[cfg(not(feature = "parallel"))]
    data.iter_mut().for_each(|v| *v = f(*v));
}

/// Calls `f(chunk_index, chunk)` over consecutive `chunk_len` pieces of `data`.
pub fn for_each_chunk_mut<T: Send>(data: &mut [T], chunk_len: usize, f: impl Fn(usize, &mut [T]) + Sync) {
    let chunk_len = chunk_len.max(1);
    #[cfg(feature = "parallel")]
    data.par_chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
    #[cfg(not(feature = "parallel"))]
    data.chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
}

/// Evaluates `f` on `0..n` and collects results in index order.
pub fn map_range<R: Send>(n: usize, f: impl Fn(usize) -> R + Sync + Send) -> Vec<R> {
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Tree reduction whose split points depend on the pool size. Only used on
/// paths where bit reproducibility across thread counts is not required.
pub fn fold_reduce<A: Send>(
    n: usize,
    identity: impl Fn() -> A + Sync + Send,
    fold: impl Fn(A, usize) -> A + Sync + Send,
    reduce: impl Fn(A, A) -> A + Sync + Send,
) -> A {
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().fold(&identity, fold).reduce(&identity, reduce)
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = reduce;
        (0..n).fold(identity(), fold)
    }
}

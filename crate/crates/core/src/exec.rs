//! Execution policy for the data-parallel inner loops.
//!
//! Every parallel loop in the crate goes through [`map_indexed`], which
//! dispatches to rayon when the `parallel` feature is enabled and the calling
//! thread has not opted into sequential execution with [`sequential`].
//! Results are always collected in index order, so the output never depends
//! on the worker count.

use std::cell::Cell;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

thread_local! {
    static POLICY: Cell<Execution> = const { Cell::new(Execution::Parallel) };
}

/// The policy in effect on the current thread.
pub fn current() -> Execution {
    if cfg!(feature = "parallel") {
        POLICY.with(Cell::get)
    } else {
        Execution::Sequential
    }
}

/// Runs `f` with the given policy installed on the current thread.
pub fn with_policy<R>(policy: Execution, f: impl FnOnce() -> R) -> R {
    struct Restore(Execution);
    impl Drop for Restore {
        fn drop(&mut self) {
            POLICY.with(|p| p.set(self.0));
        }
    }
    let _restore = Restore(POLICY.with(|p| p.replace(policy)));
    f()
}

/// Runs `f` with every nested loop forced onto the calling thread.
pub fn sequential<R>(f: impl FnOnce() -> R) -> R {
    with_policy(Execution::Sequential, f)
}

/// Evaluates `f(0..n)` and returns the results in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match current() {
        Execution::Sequential => (0..n).map(f).collect(),
        Execution::Parallel => par_map(n, f),
    }
}

/// Like [`map_indexed`] but short-circuits on the first error by index.
pub fn try_map_indexed<T, E, F>(n: usize, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize) -> Result<T, E> + Sync + Send,
{
    map_indexed(n, f).into_iter().collect()
}

/// Minimum slice length worth splitting across workers in [`for_each_chunk_mut`].
const CHUNK_PARALLEL_CUTOFF: usize = 1 << 15;

/// Calls `f(i, chunk)` for every `chunk`-sized piece of `data`.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if chunk == 0 {
        return;
    }
    if current() == Execution::Sequential || data.len() < CHUNK_PARALLEL_CUTOFF {
        data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    } else {
        par_chunks(data, chunk, f);
    }
}

#[cfg(feature = "parallel")]
fn par_chunks<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    use rayon::prelude::*;
    data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

#[cfg(not(feature = "parallel"))]
fn par_chunks<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

#[cfg(feature = "parallel")]
fn par_map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn par_map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).map(f).collect()
}

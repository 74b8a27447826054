//! Maybe-parallel helpers.
//!
//! With the `parallel` feature these dispatch to rayon; without it they are
//! plain sequential loops. Output order always matches input order.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// `true` when the crate was built with the `parallel` feature.
pub const PARALLEL: bool = cfg!(feature = "parallel");

/// Order-preserving map over a slice.
#[cfg(feature = "parallel")]
pub fn map_slice<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_slice<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R,
{
    items.iter().map(f).collect()
}

/// Order-preserving map over fixed-size chunks of a slice.
#[cfg(feature = "parallel")]
pub fn map_chunks<T, R, F>(items: &[T], chunk_size: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &[T]) -> R + Sync + Send,
{
    items
        .par_chunks(chunk_size.max(1))
        .enumerate()
        .map(|(i, c)| f(i, c))
        .collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_chunks<T, R, F>(items: &[T], chunk_size: usize, f: F) -> Vec<R>
where
    F: Fn(usize, &[T]) -> R,
{
    items
        .chunks(chunk_size.max(1))
        .enumerate()
        .map(|(i, c)| f(i, c))
        .collect()
}

/// Runs `f` over `items` with at most `workers` threads.
///
/// Sequential when `workers <= 1` or the `parallel` feature is off.
pub fn map_with_workers<T, R, F>(items: &[T], workers: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if workers > 1 {
        match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
            Ok(pool) => return pool.install(|| items.par_iter().map(&f).collect()),
            Err(e) => log::warn!("falling back to sequential evaluation: {e}"),
        }
    }
    #[cfg(not(feature = "parallel"))]
    if workers > 1 {
        log::debug!("built without `parallel`; ignoring workers={workers}");
    }
    items.iter().map(f).collect()
}

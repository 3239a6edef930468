//! Data-parallel execution helpers.
//!
//! With the `parallel` feature (default) work is spread over the rayon pool;
//! without it, or after [`set_mode`]`(ExecMode::Sequential)`, the same
//! closures run in index order on the calling thread. Randomness is always
//! attached to fixed-size shards rather than to threads, so both modes give
//! bitwise identical results.

use std::sync::atomic::{AtomicU8, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Particles per RNG shard. Changing this changes every seeded output.
pub const SHARD_LEN: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    Sequential,
    Parallel,
}

const SEQ: u8 = 0;
const PAR: u8 = 1;

static MODE: AtomicU8 = AtomicU8::new(if cfg!(feature = "parallel") { PAR } else { SEQ });

/// Selects the execution mode process-wide. Requesting `Parallel` without the
/// `parallel` feature is a no-op.
pub fn set_mode(mode: ExecMode) {
    let v = match mode {
        ExecMode::Parallel if cfg!(feature = "parallel") => PAR,
        _ => SEQ,
    };
    MODE.store(v, Ordering::Relaxed);
}

pub fn mode() -> ExecMode {
    if MODE.load(Ordering::Relaxed) == PAR {
        ExecMode::Parallel
    } else {
        ExecMode::Sequential
    }
}

#[cfg(feature = "parallel")]
fn parallel() -> bool {
    cfg!(feature = "parallel") && MODE.load(Ordering::Relaxed) == PAR
}

/// `(0..n).map(f).collect()`, possibly in parallel. Output order is index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel() {
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Applies `f(chunk_index, chunk)` to consecutive `chunk_len`-sized chunks.
/// On failure the error of the lowest-indexed failing chunk is returned.
pub fn try_for_each_chunk_mut<E, F>(data: &mut [f64], chunk_len: usize, f: F) -> Result<(), E>
where
    E: Send,
    F: Fn(usize, &mut [f64]) -> Result<(), E> + Sync + Send,
{
    assert!(chunk_len > 0);
    #[cfg(feature = "parallel")]
    if parallel() {
        let results: Vec<Result<(), E>> = data
            .par_chunks_mut(chunk_len)
            .enumerate()
            .map(|(i, c)| f(i, c))
            .collect();
        return results.into_iter().collect();
    }
    for (i, c) in data.chunks_mut(chunk_len).enumerate() {
        f(i, c)?;
    }
    Ok(())
}

/// Like [`try_for_each_chunk_mut`] but collects one value per chunk.
pub fn try_map_chunks_mut<T, E, F>(data: &mut [f64], chunk_len: usize, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize, &mut [f64]) -> Result<T, E> + Sync + Send,
{
    assert!(chunk_len > 0);
    #[cfg(feature = "parallel")]
    if parallel() {
        let results: Vec<Result<T, E>> = data
            .par_chunks_mut(chunk_len)
            .enumerate()
            .map(|(i, c)| f(i, c))
            .collect();
        return results.into_iter().collect();
    }
    data.chunks_mut(chunk_len).enumerate().map(|(i, c)| f(i, c)).collect()
}

/// Sum of `f(i)` over `0..n`, reduced in index order so the result does not
/// depend on the execution mode.
pub fn sum_indexed<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    map_indexed(n, f).into_iter().sum()
}

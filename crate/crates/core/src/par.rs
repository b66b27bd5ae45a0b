//! Data-parallel loop helpers with a sequential fallback.
//!
//! Every parallel loop in this crate writes disjoint output slices and keeps
//! all floating-point reductions in a fixed order inside each slice, so the
//! result is bit-identical no matter how work is scheduled. Building without
//! the `parallel` feature removes rayon entirely; with the feature enabled,
//! [`set_parallel`] can switch to the sequential path at runtime (used by the
//! benchmark suite to compare both).

use std::sync::atomic::{AtomicBool, Ordering};

static PARALLEL: AtomicBool = AtomicBool::new(cfg!(feature = "parallel"));

/// Enables or disables the rayon path at runtime. Returns the previous
/// setting. A no-op returning `false` when built without `parallel`.
pub fn set_parallel(enabled: bool) -> bool {
    if cfg!(feature = "parallel") {
        PARALLEL.swap(enabled, Ordering::Relaxed)
    } else {
        false
    }
}

pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel") && PARALLEL.load(Ordering::Relaxed)
}

/// Runs `f(index, chunk)` over consecutive `chunk_len`-sized pieces of `data`
/// (last piece may be shorter). Chunk boundaries depend only on `chunk_len`,
/// never on thread count.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    assert!(chunk_len > 0);
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    for (i, c) in data.chunks_mut(chunk_len).enumerate() {
        f(i, c);
    }
}

/// Builds `vec![f(0), f(1), ..., f(n-1)]`, evaluating elements in parallel.
/// Collection preserves index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Fills `out[i] = f(i)` for every index. Each element is produced
/// independently, so ordering cannot affect the result.
pub fn fill_indexed<T, F>(out: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        use rayon::prelude::*;
        out.par_iter_mut().enumerate().for_each(|(i, v)| *v = f(i));
        return;
    }
    for (i, v) in out.iter_mut().enumerate() {
        *v = f(i);
    }
}

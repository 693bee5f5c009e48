//! Data-parallel helpers. With the `parallel` feature (default) the heavy
//! per-pixel loops fan out over rayon; without it the same closures run
//! sequentially. Both paths compute each output slot independently, so
//! results are bitwise identical across thread counts.

#[cfg(feature = "parallel")]
pub use rayon::prelude::*;

/// Map `0..n` through `f`, collecting into a `Vec` in index order.
pub fn par_map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Fill disjoint chunks of `out` (each of length `chunk`) from `f(chunk_index, chunk_slice)`.
pub fn par_fill_chunks<F>(out: &mut [f64], chunk: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    assert!(chunk > 0 && out.len() % chunk == 0);
    #[cfg(feature = "parallel")]
    {
        out.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
}

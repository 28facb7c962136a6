//! Data-parallel helpers. With the `parallel` feature (default) the batch
//! mappers run on rayon; without it they fall back to a sequential loop.
//! Both implementations are always compiled so benchmarks can compare them.

/// Maps `f` over `0..len`, collecting results in index order.
pub fn map_indexed<T, F>(len: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        map_indexed_par(len, f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_indexed_seq(len, f)
    }
}

pub fn map_indexed_seq<T, F>(len: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..len).map(f).collect()
}

#[cfg(feature = "parallel")]
pub fn map_indexed_par<T, F>(len: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..len).into_par_iter().map(f).collect()
}

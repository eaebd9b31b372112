//! Data-parallel execution helpers with a sequential fallback.
//!
//! Built with the `parallel` feature (the default) these dispatch to rayon;
//! without it they degrade to plain iteration. Results are always collected
//! in input order and reductions fold in input order, so outputs are
//! byte-identical across thread counts and between the two backends.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map over a slice, preserving order. Parallel when the feature is enabled.
pub fn map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Sequential reference implementation of [`map`]; always available so the
/// two backends can be benchmarked against each other.
pub fn map_seq<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}

/// Map over indices `0..n`, preserving order.
pub fn map_indices<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
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

/// Sequential reference implementation of [`map_indices`].
pub fn map_indices_seq<U, F>(n: usize, f: F) -> Vec<U>
where
    F: Fn(usize) -> U,
{
    (0..n).map(f).collect()
}

/// Chunk size used by the deterministic reductions below. Fixed (not derived
/// from the thread count) so the operand grouping never changes.
pub const REDUCE_CHUNK: usize = 256;

/// Map chunks of fixed size to partial results in parallel, then fold the
/// partials sequentially in chunk order. Floating-point accumulation order is
/// therefore independent of the thread count.
pub fn chunked_fold<T, A, M, F>(items: &[T], init: A, map_chunk: M, fold: F) -> A
where
    T: Sync,
    A: Send,
    M: Fn(&[T]) -> A + Sync + Send,
    F: Fn(A, A) -> A,
{
    let partials: Vec<A> = {
        #[cfg(feature = "parallel")]
        {
            items.par_chunks(REDUCE_CHUNK).map(|c| map_chunk(c)).collect()
        }
        #[cfg(not(feature = "parallel"))]
        {
            items.chunks(REDUCE_CHUNK).map(|c| map_chunk(c)).collect()
        }
    };
    partials.into_iter().fold(init, fold)
}

/// Sequential reference implementation of [`chunked_fold`] with identical
/// chunking, so both backends produce bit-equal sums.
pub fn chunked_fold_seq<T, A, M, F>(items: &[T], init: A, map_chunk: M, fold: F) -> A
where
    M: Fn(&[T]) -> A,
    F: Fn(A, A) -> A,
{
    items
        .chunks(REDUCE_CHUNK)
        .map(map_chunk)
        .fold(init, fold)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_matches_seq() {
        let xs: Vec<f64> = (0..1000).map(|i| i as f64 * 0.25).collect();
        let a = map(&xs, |x| x.sin());
        let b = map_seq(&xs, |x| x.sin());
        assert_eq!(a, b);
    }

    #[test]
    fn chunked_fold_is_backend_invariant() {
        let xs: Vec<f64> = (0..10_000).map(|i| (i as f64).sqrt() * 1e-3).collect();
        let par = chunked_fold(&xs, 0.0, |c| c.iter().sum::<f64>(), |a, b| a + b);
        let seq = chunked_fold_seq(&xs, 0.0, |c| c.iter().sum::<f64>(), |a, b| a + b);
        assert_eq!(par.to_bits(), seq.to_bits());
    }
}

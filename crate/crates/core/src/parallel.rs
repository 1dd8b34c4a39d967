//! Data-parallel map over fixed-size chunks. Results come back in chunk order
//! whether or not the `parallel` feature is enabled, so reductions over them
//! are bit-identical between the two builds.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Apply `f` to consecutive chunks of `items` and collect the results in order.
pub fn map_chunks<T, R, F>(items: &[T], chunk: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&[T]) -> R + Sync + Send,
{
    let chunk = chunk.max(1);
    #[cfg(feature = "parallel")]
    {
        items.par_chunks(chunk).map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.chunks(chunk).map(f).collect()
    }
}

/// Same as [`map_chunks`] but always sequential.
pub fn map_chunks_sequential<T, R, F>(items: &[T], chunk: usize, f: F) -> Vec<R>
where
    F: Fn(&[T]) -> R,
{
    items.chunks(chunk.max(1)).map(f).collect()
}

/// Map each item, in parallel when enabled; output order follows input order.
pub fn map_each<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunk_results_keep_order() {
        let xs: Vec<u32> = (0..103).collect();
        let a = map_chunks(&xs, 8, |c| c.iter().sum::<u32>());
        let b = map_chunks_sequential(&xs, 8, |c| c.iter().sum::<u32>());
        assert_eq!(a, b);
        assert_eq!(a.len(), 13);
        assert_eq!(map_each(&xs, |x| x * 2)[50], 100);
    }
}

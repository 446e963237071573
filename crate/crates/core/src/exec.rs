//! Chunked data-parallel execution with a sequential fallback.
//!
//! Work is always split into the same fixed-size chunks and results come back
//! in chunk order, whichever strategy runs them. Reductions over the returned
//! vector are therefore performed in a fixed order.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Parallelism {
    Sequential,
    #[cfg(feature = "parallel")]
    Rayon,
}

#[allow(clippy::derivable_impls)] // the default depends on the `parallel` feature
impl Default for Parallelism {
    fn default() -> Self {
        #[cfg(feature = "parallel")]
        {
            Parallelism::Rayon
        }
        #[cfg(not(feature = "parallel"))]
        {
            Parallelism::Sequential
        }
    }
}

impl Parallelism {
    /// Applies `f(chunk_index, chunk)` to consecutive chunks of `items`.
    pub fn map_chunks<T, R, F>(self, items: &[T], chunk: usize, f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(usize, &[T]) -> R + Sync + Send,
    {
        let chunk = chunk.max(1);
        match self {
            Parallelism::Sequential => items.chunks(chunk).enumerate().map(|(i, c)| f(i, c)).collect(),
            #[cfg(feature = "parallel")]
            Parallelism::Rayon => items
                .par_chunks(chunk)
                .enumerate()
                .map(|(i, c)| f(i, c))
                .collect(),
        }
    }

    /// Applies `f` to every index in `0..n`.
    pub fn map_range<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        match self {
            Parallelism::Sequential => (0..n).map(f).collect(),
            #[cfg(feature = "parallel")]
            Parallelism::Rayon => (0..n).into_par_iter().map(f).collect(),
        }
    }

    /// Splits `0..n` into ranges of at most `chunk` and maps each range.
    pub fn map_ranges<R, F>(self, n: usize, chunk: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize, std::ops::Range<usize>) -> R + Sync + Send,
    {
        let chunk = chunk.max(1);
        let count = n.div_ceil(chunk);
        self.map_range(count, |i| f(i, i * chunk..((i + 1) * chunk).min(n)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunk_results_come_back_in_order() {
        let items: Vec<u32> = (0..103).collect();
        let seq = Parallelism::Sequential.map_chunks(&items, 10, |i, c| (i, c.iter().sum::<u32>()));
        let par = Parallelism::default().map_chunks(&items, 10, |i, c| (i, c.iter().sum::<u32>()));
        assert_eq!(seq, par);
        assert_eq!(seq.len(), 11);
        assert_eq!(seq[10], (10, 100 + 101 + 102));
    }

    #[test]
    fn ranges_cover_everything_once() {
        let ranges = Parallelism::default().map_ranges(25, 8, |_, r| r);
        assert_eq!(ranges, vec![0..8, 8..16, 16..24, 24..25]);
        assert!(Parallelism::Sequential.map_ranges(0, 8, |_, r| r).is_empty());
    }
}

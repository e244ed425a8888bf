//! Data-parallel helpers.
//!
//! With the `parallel` feature (default) work is spread over the rayon pool;
//! without it every helper runs sequentially. Results are always collected
//! in input order, so outputs do not depend on the number of threads.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Execution strategy for per-video / per-class loops.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    /// Whether this build can actually run `Exec::Parallel` in parallel.
    pub const fn parallel_available() -> bool {
        cfg!(feature = "parallel")
    }

    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel => items.par_iter().map(f).collect(),
            _ => items.iter().map(f).collect(),
        }
    }

    pub fn map_range<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel => (0..n).into_par_iter().map(f).collect(),
            _ => (0..n).map(f).collect(),
        }
    }
}

/// Sizes the global pool. `None` reads `TALFORGE_THREADS`, falling back to
/// the number of available cores. Calling this twice is harmless.
pub fn init_threads(threads: Option<usize>) {
    let threads = threads.or_else(|| {
        std::env::var("TALFORGE_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&n| n > 0)
    });
    #[cfg(feature = "parallel")]
    if let Some(n) = threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = threads;
}

// Below this many multiply-adds a kernel stays on the calling thread.
#[cfg(feature = "parallel")]
const PAR_WORK_THRESHOLD: usize = 1 << 16;

/// Applies `f` to matching row chunks of `input` and `out`.
pub(crate) fn for_each_row_pair<F>(
    input: &[f64],
    in_stride: usize,
    out: &mut [f64],
    out_stride: usize,
    work: usize,
    f: F,
) where
    F: Fn((&[f64], &mut [f64])) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if work >= PAR_WORK_THRESHOLD {
        input
            .par_chunks(in_stride)
            .zip(out.par_chunks_mut(out_stride))
            .for_each(f);
        return;
    }
    let _ = work;
    input
        .chunks(in_stride)
        .zip(out.chunks_mut(out_stride))
        .for_each(f);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order_in_both_modes() {
        let xs: Vec<u64> = (0..1000).collect();
        let a = Exec::Sequential.map(&xs, |x| x * x);
        let b = Exec::Parallel.map(&xs, |x| x * x);
        assert_eq!(a, b);
        assert_eq!(Exec::Parallel.map_range(5, |i| i + 1), vec![1, 2, 3, 4, 5]);
    }
}

//! Ordered data-parallel map. Uses rayon with the `parallel` feature, a plain
//! loop otherwise; results come back in index order either way.

use std::cell::Cell;

thread_local! {
    static FORCE_SEQUENTIAL: Cell<bool> = const { Cell::new(false) };
}

/// Runs `f` with every map started on this thread executed as a plain loop.
pub fn sequential<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            FORCE_SEQUENTIAL.with(|c| c.set(self.0));
        }
    }
    let _restore = Restore(FORCE_SEQUENTIAL.with(|c| c.replace(true)));
    f()
}

fn forced_sequential() -> bool {
    FORCE_SEQUENTIAL.with(|c| c.get())
}

/// Worker cap read from `ERM_THREADS`, if set to a positive integer.
pub fn thread_cap() -> Option<usize> {
    std::env::var("ERM_THREADS")
        .ok()
        .and_then(|s| s.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
}

#[cfg(feature = "parallel")]
fn pool() -> &'static rayon::ThreadPool {
    use std::sync::OnceLock;
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(n) = thread_cap() {
            b = b.num_threads(n);
        }
        b.build().expect("failed to start worker pool")
    })
}

/// Number of workers `map_indexed` fans out to.
pub fn workers() -> usize {
    #[cfg(feature = "parallel")]
    {
        pool().current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

/// `(0..n).map(f).collect()`, possibly in parallel.
pub fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    if forced_sequential() {
        return (0..n).map(f).collect();
    }
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        pool().install(|| (0..n).into_par_iter().map(&f).collect())
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Like [`map_indexed`] over `n` items split into contiguous chunks of `chunk`.
/// `f` gets the index range of its chunk.
pub fn map_chunks<R, F>(n: usize, chunk: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(std::ops::Range<usize>) -> R + Sync + Send,
{
    let chunk = chunk.max(1);
    let count = n.div_ceil(chunk);
    map_indexed(count, |c| f(c * chunk..((c + 1) * chunk).min(n)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved() {
        let v = map_indexed(1000, |i| i * i);
        assert!(v.iter().enumerate().all(|(i, &x)| x == i * i));
        let c = map_chunks(10, 3, |r| r.len());
        assert_eq!(c, vec![3, 3, 3, 1]);
        assert!(workers() >= 1);
    }

    #[test]
    fn sequential_override_keeps_results() {
        let a = map_indexed(257, |i| (i as f64).sqrt());
        let b = sequential(|| map_indexed(257, |i| (i as f64).sqrt()));
        assert_eq!(a, b);
        assert!(!forced_sequential());
    }
}

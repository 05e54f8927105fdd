//! Seed fan-out. Results come back in seed order whatever the pool size.

use std::ops::Range;

use rayon::prelude::*;

/// `f` applied to each seed in parallel, collected in seed order.
pub fn map_seeds<T, F>(seeds: Range<u64>, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64) -> T + Sync + Send,
{
    seeds.into_par_iter().map(f).collect()
}

/// Run `f` inside a dedicated pool of `threads` workers (0 means rayon's default).
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().expect("thread pool").install(f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_independent_of_pool_size() {
        let one = with_threads(1, || map_seeds(0..200, |s| s * s));
        let many = with_threads(8, || map_seeds(0..200, |s| s * s));
        assert_eq!(one, many);
        assert_eq!(one[13], 169);
    }
}

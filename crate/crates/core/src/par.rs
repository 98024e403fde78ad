use rayon::prelude::*;

use crate::error::Result;

/// Maps `f` over `items`, keeping input order. Runs on a `jobs`-thread pool
/// when the backends allow concurrency, sequentially otherwise.
pub fn map_ordered<T, R, F>(items: &[T], concurrent: bool, jobs: usize, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync + Send,
{
    if !concurrent || jobs <= 1 || items.len() < 2 {
        return items.iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .expect("thread pool");
    pool.install(|| items.par_iter().map(&f).collect())
}

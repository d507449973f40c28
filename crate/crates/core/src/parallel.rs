//! Order-preserving map over independent work items.
//!
//! With the `parallel` feature and `jobs > 1` the items run on a dedicated
//! rayon pool of `jobs` threads; otherwise they run in a plain loop. Results
//! come back in input order either way, so callers see identical output.

use crate::error::Result;

/// Whether this build can run work items concurrently.
pub const ENABLED: bool = cfg!(feature = "parallel");

/// `jobs = 0` means one job per available core.
pub fn resolve_jobs(jobs: usize) -> usize {
    if jobs == 0 {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    } else {
        jobs
    }
}

pub fn map<T, R, F>(items: &[T], jobs: usize, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync + Send,
{
    let jobs = resolve_jobs(jobs);
    if jobs <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    run(items, jobs, f)
}

#[cfg(feature = "parallel")]
fn run<T, R, F>(items: &[T], jobs: usize, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync + Send,
{
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| crate::Error::InvalidArgument(format!("thread pool: {e}")))?;
    pool.install(|| items.par_iter().map(&f).collect())
}

#[cfg(not(feature = "parallel"))]
fn run<T, R, F>(items: &[T], _jobs: usize, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync + Send,
{
    items.iter().map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved() {
        let items: Vec<u64> = (0..100).collect();
        let seq = map(&items, 1, |x| Ok(x * x)).unwrap();
        let par = map(&items, 4, |x| Ok(x * x)).unwrap();
        assert_eq!(seq, par);
        assert_eq!(seq[99], 9801);
    }

    #[test]
    fn errors_propagate() {
        let items = [1, 2, 3];
        let r = map(&items, 2, |&x| {
            if x == 2 {
                Err(crate::Error::Numeric("boom".into()))
            } else {
                Ok(x)
            }
        });
        assert!(r.is_err());
    }
}

// SPDX-License-Identifier: MIT OR Apache-2.0

//! Data-parallel helpers. With the `parallel` feature (default) work items
//! run on the rayon pool; without it they run sequentially. Output order
//! always matches input order, so results are identical either way.

use crate::error::Result;

/// Map `f` over `items`, preserving order.
pub fn par_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Fallible [`par_map`]; returns the first error in input order.
pub fn try_par_map<T, R, F>(items: &[T], f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync + Send,
{
    par_map(items, f).into_iter().collect()
}

/// Run `f` on a pool of `jobs` threads (`None` keeps the global pool).
/// Without the `parallel` feature this simply calls `f`.
pub fn with_jobs<R: Send>(jobs: Option<usize>, f: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    {
        if let Some(n) = jobs {
            if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build() {
                return pool.install(f);
            }
            log::warn!("could not build a {n}-thread pool, using the global pool");
        }
        f()
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = jobs;
        f()
    }
}

/// Whether this build runs work items in parallel.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved() {
        let v: Vec<u64> = (0..1000).collect();
        let out = with_jobs(Some(3), || par_map(&v, |x| x * x));
        assert_eq!(out, v.iter().map(|x| x * x).collect::<Vec<_>>());
    }

    #[test]
    fn first_error_wins() {
        let v = [1, 2, 3, 4];
        let r = try_par_map(&v, |&x| if x >= 2 { Err(crate::Error::Data(format!("bad {x}"))) } else { Ok(x) });
        assert_eq!(r.unwrap_err().to_string(), "data: bad 2");
    }
}

//! Data-parallel map over independent tasks.
//!
//! With the `parallel` feature the work is spread over the rayon pool;
//! without it the same closure runs sequentially. Output order always
//! follows input order, so results do not depend on the schedule.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[cfg(feature = "parallel")]
pub fn map<T, R, F>(items: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync + Send,
{
    items.into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map<T, R, F>(items: Vec<T>, f: F) -> Vec<R>
where
    F: Fn(T) -> R,
{
    items.into_iter().map(f).collect()
}

/// Sequential map, available regardless of features.
pub fn map_seq<T, R, F>(items: Vec<T>, f: F) -> Vec<R>
where
    F: Fn(T) -> R,
{
    items.into_iter().map(f).collect()
}

/// Runs `f` inside a pool capped at `workers` threads (0 = default).
#[cfg(feature = "parallel")]
pub fn with_workers<R: Send>(workers: usize, f: impl FnOnce() -> R + Send) -> R {
    if workers == 0 {
        return f();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
        Ok(pool) => pool.install(f),
        Err(e) => {
            log::warn!("could not build a {workers}-thread pool ({e}); using the global pool");
            f()
        }
    }
}

#[cfg(not(feature = "parallel"))]
pub fn with_workers<R>(_workers: usize, f: impl FnOnce() -> R) -> R {
    f()
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

#[cfg(test)]
mod tests {
    #[test]
    fn order_is_preserved() {
        let out = super::map((0..100).collect(), |i: u64| i * i);
        assert_eq!(out, super::map_seq((0..100).collect(), |i: u64| i * i));
        assert_eq!(super::with_workers(2, || super::map(vec![3], |x: i32| x + 1)), vec![4]);
    }
}

//! Sequential / data-parallel execution of indexed loops.
//!
//! Every helper produces results in index order, so output is independent of
//! the execution mode and the thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Below this many items the parallel path runs sequentially.
#[cfg(feature = "parallel")]
const PARALLEL_THRESHOLD: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    /// Uses rayon when the `parallel` feature is enabled; sequential otherwise.
    Parallel,
}

impl Default for Execution {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }
}

impl Execution {
    #[cfg(feature = "parallel")]
    fn go_parallel(self, len: usize) -> bool {
        self == Execution::Parallel && len >= PARALLEL_THRESHOLD
    }
}

pub fn fill_indexed<T, F>(exec: Execution, out: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.go_parallel(out.len()) {
        out.par_iter_mut()
            .enumerate()
            .for_each(|(i, slot)| *slot = f(i));
        return;
    }
    let _ = exec;
    for (i, slot) in out.iter_mut().enumerate() {
        *slot = f(i);
    }
}

pub fn map_slice<I, T, F>(exec: Execution, items: &[I], f: F) -> Vec<T>
where
    I: Sync,
    T: Send,
    F: Fn(&I) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.go_parallel(items.len()) {
        return items.par_iter().map(f).collect();
    }
    let _ = exec;
    items.iter().map(f).collect()
}

/// Like [`map_slice`] but ignores the size threshold; for coarse-grained
/// items such as whole queries or provider calls.
pub fn map_coarse<I, T, F>(exec: Execution, items: &[I], f: F) -> Vec<T>
where
    I: Sync,
    T: Send,
    F: Fn(&I) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec == Execution::Parallel && items.len() > 1 {
        return items.par_iter().map(f).collect();
    }
    let _ = exec;
    items.iter().map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree() {
        let items: Vec<u64> = (0..10_000).collect();
        let a = map_slice(Execution::Sequential, &items, |x| x * x);
        let b = map_slice(Execution::Parallel, &items, |x| x * x);
        assert_eq!(a, b);

        let mut s = vec![0.0f64; 5000];
        let mut p = vec![0.0f64; 5000];
        fill_indexed(Execution::Sequential, &mut s, |i| (i as f64).sqrt());
        fill_indexed(Execution::Parallel, &mut p, |i| (i as f64).sqrt());
        assert_eq!(s, p);
        assert_eq!(
            map_coarse(Execution::Parallel, &items[..3], |x| x + 1),
            vec![1, 2, 3]
        );
    }
}

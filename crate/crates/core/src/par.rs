//! Execution-mode helpers.
//!
//! Every data-parallel loop in the crate goes through these functions so the
//! same code path can run on the rayon pool or on the calling thread. Output
//! order always matches input order, so results are identical in both modes.
//! Without the `parallel` feature, [`Exec::Parallel`] degrades to sequential.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// How data-parallel loops are executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    /// True when this mode actually fans out to worker threads.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }
}

/// Maps `f` over `items`, preserving order.
pub fn map_slice<T, R, F>(exec: Exec, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        return items.par_iter().map(f).collect();
    }
    let _ = exec;
    items.iter().map(f).collect()
}

/// Maps `f` over `0..n`, preserving order.
pub fn map_range<R, F>(exec: Exec, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

/// Fills `out` row by row; `f(row, row_slice)` writes one row of `width` values.
pub fn fill_rows<T, F>(exec: Exec, out: &mut [T], width: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if width == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        out.par_chunks_mut(width).enumerate().for_each(|(row, chunk)| f(row, chunk));
        return;
    }
    let _ = exec;
    for (row, chunk) in out.chunks_mut(width).enumerate() {
        f(row, chunk);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree() {
        let items: Vec<u64> = (0..1000).collect();
        let a = map_slice(Exec::Sequential, &items, |x| x * x);
        let b = map_slice(Exec::Parallel, &items, |x| x * x);
        assert_eq!(a, b);
        let c = map_range(Exec::Parallel, 1000, |i| (i as u64) * (i as u64));
        assert_eq!(a, c);
    }

    #[test]
    fn fill_rows_covers_everything() {
        let mut a = vec![0usize; 12];
        let mut b = vec![0usize; 12];
        fill_rows(Exec::Sequential, &mut a, 4, |r, row| {
            for (c, v) in row.iter_mut().enumerate() {
                *v = r * 10 + c;
            }
        });
        fill_rows(Exec::Parallel, &mut b, 4, |r, row| {
            for (c, v) in row.iter_mut().enumerate() {
                *v = r * 10 + c;
            }
        });
        assert_eq!(a, b);
        assert_eq!(a[11], 23);
    }
}

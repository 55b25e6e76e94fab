//! Data-parallel helpers with a sequential fallback.
//!
//! Work is always split into fixed-size blocks and partial results are
//! combined by a pairwise tree whose shape depends only on the number of
//! blocks, so floating-point results do not depend on the thread count or
//! on whether the `parallel` feature is enabled.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Items per reduction block.
pub const BLOCK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    /// Rayon's global pool; identical to `Sequential` without the
    /// `parallel` feature.
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

/// Sizes the global pool. Only the first call in a process takes effect.
pub fn configure_threads(threads: usize) -> bool {
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new().num_threads(threads).build_global().is_ok()
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        false
    }
}

/// Order-preserving map.
pub fn map<T, R, F>(execution: Execution, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    match execution {
        #[cfg(feature = "parallel")]
        Execution::Parallel => items.par_iter().map(f).collect(),
        _ => items.iter().map(f).collect(),
    }
}

/// Order-preserving map over an index range.
pub fn map_range<R, F>(execution: Execution, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    match execution {
        #[cfg(feature = "parallel")]
        Execution::Parallel => (0..n).into_par_iter().map(f).collect(),
        _ => (0..n).map(f).collect(),
    }
}

pub fn for_each_mut<T, F>(execution: Execution, items: &mut [T], f: F)
where
    T: Send,
    F: Fn(&mut T) + Sync + Send,
{
    match execution {
        #[cfg(feature = "parallel")]
        Execution::Parallel => items.par_iter_mut().for_each(f),
        _ => items.iter_mut().for_each(f),
    }
}

/// Maps each [`BLOCK`]-sized chunk to a partial result.
pub fn map_blocks<T, R, F>(execution: Execution, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&[T]) -> R + Sync + Send,
{
    match execution {
        #[cfg(feature = "parallel")]
        Execution::Parallel => items.par_chunks(BLOCK).map(f).collect(),
        _ => items.chunks(BLOCK).map(f).collect(),
    }
}

/// Pairwise tree reduction with a topology fixed by `parts.len()`.
pub fn tree_reduce<R, F>(mut parts: Vec<R>, combine: F) -> Option<R>
where
    F: Fn(R, R) -> R,
{
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(a) = it.next() {
            match it.next() {
                Some(b) => next.push(combine(a, b)),
                None => next.push(a),
            }
        }
        parts = next;
    }
    parts.into_iter().next()
}

/// Deterministic sum of `f` over `items`.
pub fn sum_by<T, F>(execution: Execution, items: &[T], f: F) -> f64
where
    T: Sync,
    F: Fn(&T) -> f64 + Sync + Send,
{
    let parts = map_blocks(execution, items, |block| block.iter().map(&f).sum::<f64>());
    tree_reduce(parts, |a, b| a + b).unwrap_or(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tree_reduce_shapes() {
        assert_eq!(tree_reduce(Vec::<i32>::new(), |a, b| a + b), None);
        assert_eq!(tree_reduce(vec![4], |a, b| a + b), Some(4));
        // ((1+2)+(3+4))+5 as strings exposes the topology
        let parts: Vec<String> = (1..=5).map(|i| i.to_string()).collect();
        let r = tree_reduce(parts, |a, b| format!("({a}+{b})")).unwrap();
        assert_eq!(r, "(((1+2)+(3+4))+5)");
    }

    #[test]
    fn sum_is_bit_identical_across_modes() {
        let xs: Vec<f64> = (0..10_000).map(|i| ((i as f64) * 0.37).sin() * 1e-3 + 1.0 / (i as f64 + 1.0)).collect();
        let a = sum_by(Execution::Sequential, &xs, |x| *x);
        let b = sum_by(Execution::Parallel, &xs, |x| *x);
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

//! Batch evaluation helpers. With the `parallel` feature the map runs on the
//! rayon pool; results always come back in input order, so any downstream
//! reduction is bit-identical with and without the feature.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

pub fn batch_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        batch_map_sequential(items, f)
    }
}

/// Sequential reference path, available under every feature set; the bench
/// suite compares it against [`batch_map`].
pub fn batch_map_sequential<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(usize, &T) -> R,
{
    items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
}

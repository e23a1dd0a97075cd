//! Deterministic parallel map: results are collected in index order, and any
//! reduction over them happens sequentially afterwards.

use rayon::prelude::*;

use crate::error::Result;

pub fn map_indexed<T, F>(count: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    (0..count).into_par_iter().map(f).collect()
}

//! Order-stable parallel gradient accumulation.

use rayon::prelude::*;

use super::mlp::{Grads, Mlp};
use crate::error::Result;

/// Items per work unit. Chunk boundaries depend only on the item count, so
/// the floating-point summation order is fixed regardless of thread count.
const CHUNK: usize = 16;

/// Runs `f` over every item, each call adding into a chunk-local gradient
/// buffer and returning a scalar. Chunks are combined in index order.
pub fn accumulate<T, F>(params: &Mlp, items: &[T], f: F) -> Result<(f64, Grads)>
where
    T: Sync,
    F: Fn(usize, &T, &mut Grads) -> Result<f64> + Sync,
{
    let partials: Vec<Result<(f64, Grads)>> = items
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(c, chunk)| {
            let mut g = Grads::zeros_like(params);
            let mut total = 0.0;
            for (i, item) in chunk.iter().enumerate() {
                total += f(c * CHUNK + i, item, &mut g)?;
            }
            Ok((total, g))
        })
        .collect();
    let mut grads = Grads::zeros_like(params);
    let mut total = 0.0;
    for p in partials {
        let (v, g) = p?;
        total += v;
        grads.axpy(1.0, &g)?;
    }
    Ok((total, grads))
}

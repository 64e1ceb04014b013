//! Token-axis pooling: global average (1 bin), local average (4 bins) and
//! texture max (2 bins).
//!
//! Binning is 1-D over the flattened token sequence, not 2-D image quadrants.
//! Bin `k` of `K` covers tokens `[floor(k P / K), floor((k + 1) P / K))`.
//! Inputs are stored token-major (`B x P x d`); outputs are `B x (K d)` laid out
//! channel-major, so entry `c * K + k` is channel `c` in bin `k` (the flattening
//! of a `B x d x K` pooled tensor).

use std::ops::Range;

use crate::error::{Error, Result};
use crate::numeric::{Real, Tensor};

pub const GLOBAL_BINS: usize = 1;
pub const LOCAL_BINS: usize = 4;
pub const TEXTURE_BINS: usize = 2;

pub fn bin_ranges(tokens: usize, bins: usize) -> Result<Vec<Range<usize>>> {
    if bins == 0 || tokens < bins {
        return Err(Error::config(format!(
            "cannot split {tokens} tokens into {bins} bins"
        )));
    }
    Ok((0..bins)
        .map(|k| (k * tokens / bins)..((k + 1) * tokens / bins))
        .collect())
}

/// Mean of each bin per channel, accumulated in `f64`.
pub fn avg_pool_bins<T: Real>(tokens: &Tensor<T>, bins: usize) -> Result<Tensor<T>> {
    let (b, p, d) = tokens.dims3()?;
    let ranges = bin_ranges(p, bins)?;
    let x = tokens.data();
    let mut out = vec![T::zero(); b * bins * d];
    let mut acc = vec![0.0_f64; d];
    for s in 0..b {
        for (k, r) in ranges.iter().enumerate() {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for t in r.clone() {
                let row = &x[(s * p + t) * d..(s * p + t + 1) * d];
                for (a, v) in acc.iter_mut().zip(row) {
                    *a += v.f64();
                }
            }
            let n = r.len() as f64;
            for c in 0..d {
                out[s * bins * d + c * bins + k] = T::of(acc[c] / n);
            }
        }
    }
    Tensor::from_vec(&[b, bins * d], out)
}

pub fn avg_pool_bins_backward<T: Real>(
    grad_out: &Tensor<T>,
    tokens_shape: &[usize],
    bins: usize,
) -> Result<Tensor<T>> {
    let &[b, p, d] = tokens_shape else {
        return Err(Error::config("avg pool backward needs a rank-3 shape"));
    };
    if grad_out.shape() != [b, bins * d] {
        return Err(Error::config("avg pool backward: gradient shape mismatch"));
    }
    let ranges = bin_ranges(p, bins)?;
    let g = grad_out.data();
    let mut grad = vec![T::zero(); b * p * d];
    for s in 0..b {
        for (k, r) in ranges.iter().enumerate() {
            let inv = T::of(1.0 / r.len() as f64);
            for t in r.clone() {
                for c in 0..d {
                    grad[(s * p + t) * d + c] = g[s * bins * d + c * bins + k] * inv;
                }
            }
        }
    }
    Tensor::from_vec(tokens_shape, grad)
}

/// Per-bin channel maximum plus the winning token index (first on ties).
pub struct MaxPooled<T> {
    pub values: Tensor<T>,
    pub argmax: Vec<usize>,
}

pub fn max_pool_bins<T: Real>(tokens: &Tensor<T>, bins: usize) -> Result<MaxPooled<T>> {
    let (b, p, d) = tokens.dims3()?;
    let ranges = bin_ranges(p, bins)?;
    let x = tokens.data();
    let mut out = vec![T::zero(); b * bins * d];
    let mut argmax = vec![0; b * bins * d];
    for s in 0..b {
        for (k, r) in ranges.iter().enumerate() {
            for c in 0..d {
                let mut best_t = r.start;
                let mut best = x[(s * p + r.start) * d + c];
                for t in r.clone().skip(1) {
                    let v = x[(s * p + t) * d + c];
                    if v > best {
                        best = v;
                        best_t = t;
                    }
                }
                let o = s * bins * d + c * bins + k;
                out[o] = best;
                argmax[o] = best_t;
            }
        }
    }
    Ok(MaxPooled {
        values: Tensor::from_vec(&[b, bins * d], out)?,
        argmax,
    })
}

pub fn max_pool_bins_backward<T: Real>(
    grad_out: &Tensor<T>,
    argmax: &[usize],
    tokens_shape: &[usize],
    bins: usize,
) -> Result<Tensor<T>> {
    let &[b, p, d] = tokens_shape else {
        return Err(Error::config("max pool backward needs a rank-3 shape"));
    };
    if grad_out.shape() != [b, bins * d] || argmax.len() != b * bins * d {
        return Err(Error::config("max pool backward: gradient shape mismatch"));
    }
    let g = grad_out.data();
    let mut grad = vec![T::zero(); b * p * d];
    for s in 0..b {
        for c in 0..d {
            for k in 0..bins {
                let o = s * bins * d + c * bins + k;
                let idx = (s * p + argmax[o]) * d + c;
                grad[idx] = grad[idx] + g[o];
            }
        }
    }
    Tensor::from_vec(tokens_shape, grad)
}

/// The three summaries fed to the branch heads.
#[derive(Clone, Debug)]
pub struct PooledFeatures<T> {
    /// `B x d`
    pub global: Tensor<T>,
    /// `B x 4d`
    pub local: Tensor<T>,
    /// `B x 2d`
    pub texture: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct PoolCache {
    tokens_shape: Vec<usize>,
    texture_argmax: Vec<usize>,
}

pub fn pool_all<T: Real>(tokens: &Tensor<T>) -> Result<(PooledFeatures<T>, PoolCache)> {
    let global = avg_pool_bins(tokens, GLOBAL_BINS)?;
    let local = avg_pool_bins(tokens, LOCAL_BINS)?;
    let MaxPooled { values, argmax } = max_pool_bins(tokens, TEXTURE_BINS)?;
    Ok((
        PooledFeatures {
            global,
            local,
            texture: values,
        },
        PoolCache {
            tokens_shape: tokens.shape().to_vec(),
            texture_argmax: argmax,
        },
    ))
}

/// Sums the gradients of all three branches back onto the token tensor.
pub fn pool_all_backward<T: Real>(
    grads: &PooledFeatures<T>,
    cache: &PoolCache,
) -> Result<Tensor<T>> {
    let shape = &cache.tokens_shape;
    let mut total = avg_pool_bins_backward(&grads.global, shape, GLOBAL_BINS)?;
    let local = avg_pool_bins_backward(&grads.local, shape, LOCAL_BINS)?;
    let texture = max_pool_bins_backward(&grads.texture, &cache.texture_argmax, shape, TEXTURE_BINS)?;
    for ((t, &l), &x) in total.data_mut().iter_mut().zip(local.data()).zip(texture.data()) {
        *t = *t + l + x;
    }
    Ok(total)
}

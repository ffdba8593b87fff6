//! Forward/backward kernels that are too long to inline in the graph.

use crate::tensor::Scalar;

pub(crate) struct BnForward<T> {
    pub out: Vec<T>,
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub floored: Vec<bool>,
    pub mean: Vec<T>,
    pub var_unbiased: Vec<T>,
}

/// Training-mode batch norm. The biased batch variance is floored at `eps`.
pub(crate) fn batch_norm_train<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    n: usize,
    c: usize,
    hw: usize,
    eps: T,
) -> BnForward<T> {
    let m = T::of((n * hw) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * hw;
            mean[ch] += x[base..base + hw].iter().copied().sum::<T>();
        }
    }
    for mu in &mut mean {
        *mu = *mu / m;
    }
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * hw;
            let mu = mean[ch];
            var[ch] += x[base..base + hw]
                .iter()
                .map(|&v| (v - mu) * (v - mu))
                .sum::<T>();
        }
    }
    let mut inv_std = vec![T::zero(); c];
    let mut floored = vec![false; c];
    let mut var_unbiased = vec![T::zero(); c];
    for ch in 0..c {
        let biased = var[ch] / m;
        var_unbiased[ch] = var[ch] / (m - T::one());
        floored[ch] = biased < eps;
        inv_std[ch] = T::one() / biased.max(eps).sqrt();
    }
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * hw;
            for i in base..base + hw {
                xhat[i] = (x[i] - mean[ch]) * inv_std[ch];
                out[i] = gamma[ch] * xhat[i] + beta[ch];
            }
        }
    }
    BnForward {
        out,
        xhat,
        inv_std,
        floored,
        mean,
        var_unbiased,
    }
}

pub(crate) struct BnBackward<T> {
    pub dx: Vec<T>,
    pub dgamma: Vec<T>,
    pub dbeta: Vec<T>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn batch_norm_backward<T: Scalar>(
    g: &[T],
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
    batch: Option<&[bool]>,
    n: usize,
    c: usize,
    hw: usize,
) -> BnBackward<T> {
    let m = T::of((n * hw) as f64);
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * hw;
            for i in base..base + hw {
                dgamma[ch] += g[i] * xhat[i];
                dbeta[ch] += g[i];
            }
        }
    }
    let mut dx = vec![T::zero(); g.len()];
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * hw;
            let k = gamma[ch] * inv_std[ch];
            match batch {
                None => {
                    for i in base..base + hw {
                        dx[i] = g[i] * k;
                    }
                }
                Some(floored) => {
                    // mean(dxhat) = gamma·dbeta/m, mean(dxhat·xhat) = gamma·dgamma/m
                    let mean_g = dbeta[ch] / m;
                    let mean_gx = if floored[ch] { T::zero() } else { dgamma[ch] / m };
                    for i in base..base + hw {
                        dx[i] = k * (g[i] - mean_g - xhat[i] * mean_gx);
                    }
                }
            }
        }
    }
    BnBackward { dx, dgamma, dbeta }
}

/// Max pooling with implicit `-inf` padding; ties resolve to the first index.
pub(crate) fn max_pool<T: Scalar>(
    x: &[T],
    shape: &[usize],
    kernel: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> (Vec<T>, Vec<usize>) {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_i = usize::MAX;
                for ky in 0..kernel {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kernel {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = base + iy as usize * w + ix as usize;
                        if best_i == usize::MAX || x[idx] > best {
                            best = x[idx];
                            best_i = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_i);
            }
        }
    }
    (out, argmax)
}

/// Mean soft-target cross entropy with log-sum-exp; returns (loss, softmax).
pub(crate) fn softmax_xent<T: Scalar>(logits: &[T], target: &[T], n: usize, c: usize) -> (T, Vec<T>) {
    let mut probs = vec![T::zero(); n * c];
    let mut total = T::zero();
    for r in 0..n {
        let row = &logits[r * c..(r + 1) * c];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum_exp: T = row.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + sum_exp.ln();
        for j in 0..c {
            probs[r * c + j] = (row[j] - max).exp() / sum_exp;
            let t = target[r * c + j];
            if t != T::zero() {
                total += t * (lse - row[j]);
            }
        }
    }
    (total / T::of(n as f64), probs)
}

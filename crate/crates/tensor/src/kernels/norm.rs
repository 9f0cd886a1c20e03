//! Batch normalization over every axis except the channel axis (dim 1).

use crate::error::{config_err, Result, TensorError};
use crate::{Element, Tensor};

fn layout<T: Element>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<(usize, usize, usize)> {
    const OP: &str = "batch_norm";
    if x.ndim() < 2 {
        return Err(config_err(OP, format!("need at least N×C input, got {:?}", x.shape())));
    }
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let inner: usize = x.shape()[2..].iter().product();
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(config_err(
            OP,
            format!(
                "gamma {:?} / beta {:?} must both have length {c}",
                gamma.shape(),
                beta.shape()
            ),
        ));
    }
    Ok((n, c, inner))
}

/// Forward pass in training mode.
#[derive(Clone, Debug)]
pub struct BatchNormTrain<T> {
    pub output: Tensor<T>,
    /// Normalized input (before the affine transform).
    pub xhat: Vec<T>,
    pub mean: Vec<T>,
    /// Biased batch variance.
    pub var: Vec<T>,
    pub inv_std: Vec<T>,
    /// Elements per channel.
    pub count: usize,
}

pub fn batch_norm_train<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<BatchNormTrain<T>> {
    let (n, c, inner) = layout(x, gamma, beta)?;
    if n < 2 {
        return Err(TensorError::Usage(format!(
            "batch_norm in train mode needs a batch of at least 2, got {n}"
        )));
    }
    let count = n * inner;
    let d = x.data();
    let idx = |s: usize, ch: usize| (s * c + ch) * inner;
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut acc = T::zero();
        for s in 0..n {
            acc = acc + d[idx(s, ch)..idx(s, ch) + inner].iter().copied().sum::<T>();
        }
        let mu = acc / T::lit(count as f64);
        let mut sq = T::zero();
        for s in 0..n {
            for &v in &d[idx(s, ch)..idx(s, ch) + inner] {
                sq = sq + (v - mu) * (v - mu);
            }
        }
        mean[ch] = mu;
        var[ch] = sq / T::lit(count as f64);
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); d.len()];
    let mut out = vec![T::zero(); d.len()];
    for s in 0..n {
        for ch in 0..c {
            let (g, b) = (gamma.data()[ch], beta.data()[ch]);
            for i in idx(s, ch)..idx(s, ch) + inner {
                let xh = (d[i] - mean[ch]) * inv_std[ch];
                xhat[i] = xh;
                out[i] = g * xh + b;
            }
        }
    }
    Ok(BatchNormTrain {
        output: Tensor::new(x.shape().to_vec(), out)?,
        xhat,
        mean,
        var,
        inv_std,
        count,
    })
}

/// Gradients (input, gamma, beta) of the training-mode forward pass.
pub fn batch_norm_train_grad<T: Element>(
    gy: &Tensor<T>,
    xhat: &[T],
    gamma: &Tensor<T>,
    inv_std: &[T],
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, c) = (gy.shape()[0], gy.shape()[1]);
    let inner: usize = gy.shape()[2..].iter().product();
    let m = T::lit((n * inner) as f64);
    let g = gy.data();
    let idx = |s: usize, ch: usize| (s * c + ch) * inner;
    let mut gbeta = vec![T::zero(); c];
    let mut ggamma = vec![T::zero(); c];
    for s in 0..n {
        for ch in 0..c {
            for i in idx(s, ch)..idx(s, ch) + inner {
                gbeta[ch] = gbeta[ch] + g[i];
                ggamma[ch] = ggamma[ch] + g[i] * xhat[i];
            }
        }
    }
    let mut gx = vec![T::zero(); g.len()];
    for s in 0..n {
        for ch in 0..c {
            let scale = gamma.data()[ch] * inv_std[ch] / m;
            for i in idx(s, ch)..idx(s, ch) + inner {
                gx[i] = scale * (m * g[i] - gbeta[ch] - xhat[i] * ggamma[ch]);
            }
        }
    }
    Ok((
        Tensor::new(gy.shape().to_vec(), gx)?,
        Tensor::new([c], ggamma)?,
        Tensor::new([c], gbeta)?,
    ))
}

/// Inference-mode normalization with fixed statistics. Returns the output
/// and the per-channel inverse standard deviation used.
pub fn batch_norm_eval<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, Vec<T>)> {
    let (n, c, inner) = layout(x, gamma, beta)?;
    if running_mean.shape() != [c] || running_var.shape() != [c] {
        return Err(config_err("batch_norm", format!("running statistics must have length {c}")));
    }
    let inv_std: Vec<T> = running_var.data().iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let d = x.data();
    let mut out = vec![T::zero(); d.len()];
    for s in 0..n {
        for (ch, &is) in inv_std.iter().enumerate() {
            let start = (s * c + ch) * inner;
            let (g, b, mu) = (gamma.data()[ch], beta.data()[ch], running_mean.data()[ch]);
            for (o, &v) in out[start..start + inner].iter_mut().zip(&d[start..start + inner]) {
                *o = g * (v - mu) * is + b;
            }
        }
    }
    Ok((Tensor::new(x.shape().to_vec(), out)?, inv_std))
}

pub fn batch_norm_eval_grad<T: Element>(
    gy: &Tensor<T>,
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    running_mean: &[T],
    inv_std: &[T],
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, c) = (gy.shape()[0], gy.shape()[1]);
    let inner: usize = gy.shape()[2..].iter().product();
    let (g, d) = (gy.data(), x.data());
    let mut gx = vec![T::zero(); g.len()];
    let mut ggamma = vec![T::zero(); c];
    let mut gbeta = vec![T::zero(); c];
    for s in 0..n {
        for ch in 0..c {
            let start = (s * c + ch) * inner;
            for i in start..start + inner {
                gx[i] = g[i] * gamma.data()[ch] * inv_std[ch];
                ggamma[ch] = ggamma[ch] + g[i] * (d[i] - running_mean[ch]) * inv_std[ch];
                gbeta[ch] = gbeta[ch] + g[i];
            }
        }
    }
    Ok((
        Tensor::new(gy.shape().to_vec(), gx)?,
        Tensor::new([c], ggamma)?,
        Tensor::new([c], gbeta)?,
    ))
}

use super::{Scalar, Tensor};
use crate::error::{shape_err, Result};

/// Per-channel affine batch normalisation with running statistics.
#[derive(Debug, Clone)]
pub struct BatchNormState<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: T,
    pub momentum: T,
}

impl<T: Scalar> BatchNormState<T> {
    /// γ = 1, β = 0, running mean 0 / variance 1, ε = 1e-5, momentum 0.1.
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full([1, channels, 1, 1], T::one()),
            beta: Tensor::zeros([1, channels, 1, 1]),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            eps: T::from_f64(1e-5),
            momentum: T::from_f64(0.1),
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

/// What the backward pass needs from a forward call.
#[derive(Debug, Clone)]
pub struct BatchNormCache<T: Scalar> {
    x_hat: Tensor<T>,
    inv_std: Vec<T>,
    training: bool,
}

/// Normalises with batch statistics (and updates the running ones) when
/// `training`, otherwise with the running statistics.
pub fn batchnorm2d<T: Scalar>(
    input: &Tensor<T>,
    state: &mut BatchNormState<T>,
    training: bool,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let c = input.c();
    if c != state.channels() {
        return Err(shape_err!(
            "batchnorm over {} channels given {c}-channel input",
            state.channels()
        ));
    }
    let plane = input.plane();
    let count = input.n() * plane;
    let (mean, inv_std) = if training {
        let mut mean = vec![0.0f64; c];
        let mut var = vec![0.0f64; c];
        for n in 0..input.n() {
            for (ch, p) in input.item(n).chunks(plane).enumerate() {
                mean[ch] += p.iter().map(|v| v.as_f64()).sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        for n in 0..input.n() {
            for (ch, p) in input.item(n).chunks(plane).enumerate() {
                var[ch] += p
                    .iter()
                    .map(|v| (v.as_f64() - mean[ch]).powi(2))
                    .sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= count as f64);
        let mom = state.momentum.as_f64();
        let unbias = if count > 1 {
            count as f64 / (count - 1) as f64
        } else {
            1.0
        };
        for ch in 0..c {
            let rm = state.running_mean[ch].as_f64();
            let rv = state.running_var[ch].as_f64();
            state.running_mean[ch] = T::from_f64((1.0 - mom) * rm + mom * mean[ch]);
            state.running_var[ch] = T::from_f64((1.0 - mom) * rv + mom * var[ch] * unbias);
        }
        let eps = state.eps.as_f64();
        (
            mean.iter().map(|&m| T::from_f64(m)).collect::<Vec<_>>(),
            var.iter()
                .map(|&v| T::from_f64(1.0 / (v + eps).sqrt()))
                .collect::<Vec<_>>(),
        )
    } else {
        (
            state.running_mean.clone(),
            state
                .running_var
                .iter()
                .map(|&v| T::one() / (v + state.eps).sqrt())
                .collect(),
        )
    };

    let mut x_hat = input.clone();
    let mut out = input.clone();
    let gamma = state.gamma.data();
    let beta = state.beta.data();
    for n in 0..input.n() {
        let base = n * c * plane;
        for ch in 0..c {
            let r = base + ch * plane..base + (ch + 1) * plane;
            for (xh, o) in x_hat.data_mut()[r.clone()]
                .iter_mut()
                .zip(&mut out.data_mut()[r.clone()])
            {
                *xh = (*xh - mean[ch]) * inv_std[ch];
                *o = gamma[ch] * *xh + beta[ch];
            }
        }
    }
    Ok((
        out,
        BatchNormCache {
            x_hat,
            inv_std,
            training,
        },
    ))
}

/// Inference-mode normalisation that leaves `state` untouched.
pub fn batchnorm2d_infer<T: Scalar>(input: &Tensor<T>, state: &BatchNormState<T>) -> Result<Tensor<T>> {
    let c = input.c();
    if c != state.channels() {
        return Err(shape_err!(
            "batchnorm over {} channels given {c}-channel input",
            state.channels()
        ));
    }
    let plane = input.plane();
    let mut out = input.clone();
    for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let ch = i % c;
        let scale = state.gamma.data()[ch] / (state.running_var[ch] + state.eps).sqrt();
        let shift = state.beta.data()[ch] - state.running_mean[ch] * scale;
        chunk.iter_mut().for_each(|v| *v = *v * scale + shift);
    }
    Ok(out)
}

/// Returns the input gradient and accumulates γ/β gradients into `state`.
pub fn batchnorm2d_backward<T: Scalar>(
    upstream: &Tensor<T>,
    cache: &BatchNormCache<T>,
    state: &mut BatchNormState<T>,
) -> Result<Tensor<T>> {
    if upstream.shape() != cache.x_hat.shape() {
        return Err(shape_err!(
            "batchnorm upstream {:?} vs forward {:?}",
            upstream.shape(),
            cache.x_hat.shape()
        ));
    }
    let c = upstream.c();
    let plane = upstream.plane();
    let count = T::from_f64((upstream.n() * plane) as f64);
    let mut sum_g = vec![T::zero(); c];
    let mut sum_gx = vec![T::zero(); c];
    for n in 0..upstream.n() {
        for (ch, (g, xh)) in upstream
            .item(n)
            .chunks(plane)
            .zip(cache.x_hat.item(n).chunks(plane))
            .enumerate()
        {
            sum_g[ch] = sum_g[ch] + g.iter().copied().sum::<T>();
            sum_gx[ch] = sum_gx[ch] + g.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>();
        }
    }
    state.gamma.accumulate_grad(&sum_gx)?;
    state.beta.accumulate_grad(&sum_g)?;

    let gamma = state.gamma.data();
    let mut gx = upstream.clone();
    for n in 0..upstream.n() {
        let base = n * c * plane;
        for ch in 0..c {
            let r = base + ch * plane..base + (ch + 1) * plane;
            let scale = gamma[ch] * cache.inv_std[ch];
            let xh = &cache.x_hat.data()[r.clone()];
            for (g, &x) in gx.data_mut()[r].iter_mut().zip(xh) {
                *g = if cache.training {
                    scale * (*g - sum_g[ch] / count - x * sum_gx[ch] / count)
                } else {
                    scale * *g
                };
            }
        }
    }
    Ok(gx)
}

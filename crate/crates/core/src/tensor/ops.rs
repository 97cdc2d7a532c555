use super::{Scalar, Tensor};
use crate::error::{shape_err, Result};

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

/// Passes `upstream` where the forward input was strictly positive.
pub fn relu_backward<T: Scalar>(upstream: &Tensor<T>, input: &Tensor<T>) -> Tensor<T> {
    let mut g = upstream.clone();
    for (gv, &x) in g.data_mut().iter_mut().zip(input.data()) {
        if x <= T::zero() {
            *gv = T::zero();
        }
    }
    g
}

/// `clip(x/6 + 1/2, 0, 1)`.
pub fn hard_sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let six = T::from_f64(6.0);
    let half = T::from_f64(0.5);
    x.map(|v| (v / six + half).max(T::zero()).min(T::one()))
}

pub fn hard_sigmoid_backward<T: Scalar>(upstream: &Tensor<T>, input: &Tensor<T>) -> Tensor<T> {
    let three = T::from_f64(3.0);
    let sixth = T::from_f64(1.0 / 6.0);
    let mut g = upstream.clone();
    for (gv, &x) in g.data_mut().iter_mut().zip(input.data()) {
        *gv = if x > -three && x < three {
            *gv * sixth
        } else {
            T::zero()
        };
    }
    g
}

/// Per-channel spatial mean, shape (N, C, 1, 1).
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let plane = x.plane();
    let inv = T::from_f64(1.0 / plane as f64);
    let data = x
        .data()
        .chunks(plane)
        .map(|p| p.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::new([x.n(), x.c(), 1, 1], data).expect("pool shape")
}

pub fn global_avg_pool_backward<T: Scalar>(
    upstream: &Tensor<T>,
    input_shape: [usize; 4],
) -> Tensor<T> {
    let plane = input_shape[2] * input_shape[3];
    let inv = T::from_f64(1.0 / plane as f64);
    let mut g = Tensor::zeros(input_shape);
    for (chunk, &u) in g.data_mut().chunks_mut(plane).zip(upstream.data()) {
        chunk.iter_mut().for_each(|v| *v = u * inv);
    }
    g
}

/// Multiplies every (n, c) plane of `x` by `gate[n, c]`.
pub fn scale_channels<T: Scalar>(x: &Tensor<T>, gate: &Tensor<T>) -> Result<Tensor<T>> {
    if gate.shape() != [x.n(), x.c(), 1, 1] {
        return Err(shape_err!(
            "gate {:?} does not match {:?}",
            gate.shape(),
            x.shape()
        ));
    }
    let plane = x.plane();
    let mut y = x.clone();
    for (chunk, &s) in y.data_mut().chunks_mut(plane).zip(gate.data()) {
        chunk.iter_mut().for_each(|v| *v = *v * s);
    }
    Ok(y)
}

/// Returns (grad wrt x, grad wrt gate).
pub fn scale_channels_backward<T: Scalar>(
    upstream: &Tensor<T>,
    x: &Tensor<T>,
    gate: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let plane = x.plane();
    let gx = scale_channels(upstream, gate).expect("validated in forward");
    let gg: Vec<T> = upstream
        .data()
        .chunks(plane)
        .zip(x.data().chunks(plane))
        .map(|(u, xv)| u.iter().zip(xv).map(|(&a, &b)| a * b).sum())
        .collect();
    (gx, Tensor::new(gate.shape(), gg).expect("gate shape"))
}

/// Identity on the gradient of a sum `a + b`: both inputs receive `upstream`.
pub fn add_backward_passthrough<T: Scalar>(upstream: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    (upstream.clone(), upstream.clone())
}

/// Concatenates along the channel axis.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.n() != b.n() || a.h() != b.h() || a.w() != b.w() {
        return Err(shape_err!("concat {:?} with {:?}", a.shape(), b.shape()));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    for n in 0..a.n() {
        data.extend_from_slice(a.item(n));
        data.extend_from_slice(b.item(n));
    }
    Tensor::new([a.n(), a.c() + b.c(), a.h(), a.w()], data)
}

/// Splits channels `[0, first)` from `[first, C)`.
pub fn split_channels<T: Scalar>(x: &Tensor<T>, first: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    if first == 0 || first >= x.c() {
        return Err(shape_err!("cannot split {} channels at {first}", x.c()));
    }
    let plane = x.plane();
    let mut a = Vec::with_capacity(x.n() * first * plane);
    let mut b = Vec::with_capacity(x.n() * (x.c() - first) * plane);
    for n in 0..x.n() {
        let item = x.item(n);
        a.extend_from_slice(&item[..first * plane]);
        b.extend_from_slice(&item[first * plane..]);
    }
    Ok((
        Tensor::new([x.n(), first, x.h(), x.w()], a)?,
        Tensor::new([x.n(), x.c() - first, x.h(), x.w()], b)?,
    ))
}

/// Row-wise softmax of a row-major `rows × k` matrix, with max subtraction.
pub fn softmax_rows<T: Scalar>(logits: &[T], k: usize) -> Vec<T> {
    assert!(k >= 1 && logits.len() % k == 0, "softmax needs k >= 1");
    let mut out = logits.to_vec();
    for row in out.chunks_mut(k) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s = s + *v;
        }
        row.iter_mut().for_each(|v| *v = *v / s);
    }
    out
}

/// `x / max(‖x‖₂, eps)`.
pub fn l2_normalize<T: Scalar>(x: &[T], eps: T) -> Vec<T> {
    let norm = x.iter().map(|&v| v * v).sum::<T>().sqrt();
    let d = norm.max(eps);
    x.iter().map(|&v| v / d).collect()
}

/// Gradient of [`l2_normalize`] wrt `x`, given `x` and the upstream gradient.
pub fn l2_normalize_backward<T: Scalar>(upstream: &[T], x: &[T], eps: T) -> Vec<T> {
    let norm = x.iter().map(|&v| v * v).sum::<T>().sqrt();
    if norm <= eps {
        return upstream.iter().map(|&g| g / eps).collect();
    }
    let dot = upstream
        .iter()
        .zip(x)
        .map(|(&g, &v)| g * v)
        .sum::<T>()
        / (norm * norm);
    upstream
        .iter()
        .zip(x)
        .map(|(&g, &v)| (g - v * dot) / norm)
        .collect()
}

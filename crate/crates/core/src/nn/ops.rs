use ndarray::{concatenate, s, Array4, ArrayView4, Axis, Zip};

use crate::scalar::Scalar;

pub fn relu<T: Scalar>(x: &Array4<T>) -> Array4<T> {
    x.mapv(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient through a ReLU given its *output*.
pub fn relu_backward<T: Scalar>(dy: &Array4<T>, y: &Array4<T>) -> Array4<T> {
    Zip::from(dy)
        .and(y)
        .map_collect(|&d, &o| if o > T::zero() { d } else { T::zero() })
}

pub fn sigmoid<T: Scalar>(x: &Array4<T>) -> Array4<T> {
    x.mapv(|v| {
        if v >= T::zero() {
            T::one() / (T::one() + (-v).exp())
        } else {
            let e = v.exp();
            e / (T::one() + e)
        }
    })
}

/// Gradient through a sigmoid given its output.
pub fn sigmoid_backward<T: Scalar>(dy: &Array4<T>, y: &Array4<T>) -> Array4<T> {
    Zip::from(dy)
        .and(y)
        .map_collect(|&d, &o| d * o * (T::one() - o))
}

/// Argmax position (0..4) inside each 2×2 window.
#[derive(Debug, Clone)]
pub struct PoolIndices {
    idx: Vec<u8>,
    input_dim: (usize, usize, usize, usize),
}

/// 2×2 max pooling with stride 2; spatial dims must be even.
pub fn maxpool2<T: Scalar>(x: &Array4<T>) -> (Array4<T>, PoolIndices) {
    let (c, b, h, w) = x.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "maxpool2 needs even spatial dims");
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array4::<T>::zeros((c, b, oh, ow));
    let mut idx = Vec::with_capacity(c * b * oh * ow);
    for ((ci, bi, y, xx), o) in out.indexed_iter_mut() {
        let mut best = x[[ci, bi, 2 * y, 2 * xx]];
        let mut arg = 0u8;
        for k in 1..4u8 {
            let v = x[[ci, bi, 2 * y + (k as usize >> 1), 2 * xx + (k as usize & 1)]];
            if v > best {
                best = v;
                arg = k;
            }
        }
        *o = best;
        idx.push(arg);
    }
    (
        out,
        PoolIndices {
            idx,
            input_dim: (c, b, h, w),
        },
    )
}

pub fn maxpool2_backward<T: Scalar>(dy: &Array4<T>, indices: &PoolIndices) -> Array4<T> {
    let mut dx = Array4::<T>::zeros(indices.input_dim);
    for (((ci, bi, y, xx), &d), &k) in dy.indexed_iter().zip(&indices.idx) {
        dx[[ci, bi, 2 * y + (k as usize >> 1), 2 * xx + (k as usize & 1)]] += d;
    }
    dx
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample2<T: Scalar>(x: &Array4<T>) -> Array4<T> {
    let (c, b, h, w) = x.dim();
    let mut out = Array4::<T>::zeros((c, b, 2 * h, 2 * w));
    for dy in 0..2 {
        for dx in 0..2 {
            out.slice_mut(s![.., .., dy..;2, dx..;2]).assign(x);
        }
    }
    out
}

pub fn upsample2_backward<T: Scalar>(dy: &Array4<T>) -> Array4<T> {
    let (c, b, h, w) = dy.dim();
    let mut dx = Array4::<T>::zeros((c, b, h / 2, w / 2));
    for oy in 0..2 {
        for ox in 0..2 {
            dx += &dy.slice(s![.., .., oy..;2, ox..;2]);
        }
    }
    dx
}

pub fn concat_channels<T: Scalar>(a: ArrayView4<T>, b: ArrayView4<T>) -> Array4<T> {
    concatenate(Axis(0), &[a, b]).expect("matching non-channel dims")
}

/// Inverse of [`concat_channels`]: first `n` channels, then the rest.
pub fn split_channels<T: Scalar>(x: &Array4<T>, n: usize) -> (Array4<T>, Array4<T>) {
    (
        x.slice(s![..n, .., .., ..]).to_owned(),
        x.slice(s![n.., .., .., ..]).to_owned(),
    )
}

/// Softmax over the channel axis of a channel-major tensor.
pub fn softmax_channels<T: Scalar>(x: &Array4<T>) -> Array4<T> {
    let mut max = x.index_axis(Axis(0), 0).to_owned();
    for ch in x.axis_iter(Axis(0)).skip(1) {
        max.zip_mut_with(&ch, |m, &v| {
            if v > *m {
                *m = v
            }
        });
    }
    let mut out = x.to_owned();
    for mut ch in out.axis_iter_mut(Axis(0)) {
        ch.zip_mut_with(&max, |v, &m| *v = (*v - m).exp());
    }
    let mut denom = out.index_axis(Axis(0), 0).to_owned();
    for ch in out.axis_iter(Axis(0)).skip(1) {
        denom += &ch;
    }
    for mut ch in out.axis_iter_mut(Axis(0)) {
        ch /= &denom;
    }
    out
}

/// `dlogits = p ⊙ (dp − Σ_c p·dp)`.
pub fn softmax_channels_backward<T: Scalar>(dp: &Array4<T>, p: &Array4<T>) -> Array4<T> {
    let mut dot = Zip::from(dp.index_axis(Axis(0), 0))
        .and(p.index_axis(Axis(0), 0))
        .map_collect(|&d, &q| d * q);
    for (dch, pch) in dp.axis_iter(Axis(0)).zip(p.axis_iter(Axis(0))).skip(1) {
        Zip::from(&mut dot)
            .and(&dch)
            .and(&pch)
            .for_each(|acc, &d, &q| *acc += d * q);
    }
    let mut out = p.to_owned();
    for (mut o, dch) in out.axis_iter_mut(Axis(0)).zip(dp.axis_iter(Axis(0))) {
        Zip::from(&mut o)
            .and(&dch)
            .and(&dot)
            .for_each(|q, &d, &s| *q = *q * (d - s));
    }
    out
}

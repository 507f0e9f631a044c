use ndarray::{Array4, ArrayD, Axis};

use super::{join, Mode, Param, Parameterized, Slot};
use crate::scalar::{cst, Scalar};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch normalization over `(B, H, W)`.
#[derive(Debug, Clone)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: ArrayD<T>,
    pub running_var: ArrayD<T>,
    cache: Option<(Array4<T>, Vec<T>)>,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(ArrayD::ones(vec![channels])),
            beta: Param::zeros(&[channels]),
            running_mean: ArrayD::zeros(vec![channels]),
            running_var: ArrayD::ones(vec![channels]),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Array4<T>, mode: Mode) -> Array4<T> {
        let (c, b, h, w) = x.dim();
        let n = b * h * w;
        let eps: T = cst(BN_EPS);
        let mut out = Array4::<T>::zeros((c, b, h, w));
        match mode {
            Mode::Eval => {
                for (ci, (src, mut dst)) in x.axis_iter(Axis(0)).zip(out.axis_iter_mut(Axis(0))).enumerate() {
                    let inv = T::one() / (self.running_var[ci] + eps).sqrt();
                    let mean = self.running_mean[ci];
                    let (g, bt) = (self.gamma.value[ci], self.beta.value[ci]);
                    dst.zip_mut_with(&src, |d, &s| *d = (s - mean) * inv * g + bt);
                }
                self.cache = None;
            }
            Mode::Train => {
                let nt: T = cst(n as f64);
                let momentum: T = cst(BN_MOMENTUM);
                let unbias: T = if n > 1 { cst(n as f64 / (n as f64 - 1.0)) } else { T::one() };
                let mut x_hat = Array4::<T>::zeros((c, b, h, w));
                let mut inv_std = Vec::with_capacity(c);
                for ci in 0..c {
                    let src = x.index_axis(Axis(0), ci);
                    let mean = src.sum() / nt;
                    let var = src.fold(T::zero(), |acc, &v| acc + (v - mean) * (v - mean)) / nt;
                    let inv = T::one() / (var + eps).sqrt();
                    inv_std.push(inv);
                    let (g, bt) = (self.gamma.value[ci], self.beta.value[ci]);
                    let mut xh = x_hat.index_axis_mut(Axis(0), ci);
                    xh.zip_mut_with(&src, |d, &s| *d = (s - mean) * inv);
                    out.index_axis_mut(Axis(0), ci)
                        .zip_mut_with(&xh, |d, &s| *d = s * g + bt);
                    self.running_mean[ci] = (T::one() - momentum) * self.running_mean[ci] + momentum * mean;
                    self.running_var[ci] =
                        (T::one() - momentum) * self.running_var[ci] + momentum * var * unbias;
                }
                self.cache = Some((x_hat, inv_std));
            }
        }
        out
    }

    pub fn backward(&mut self, dy: &Array4<T>) -> Array4<T> {
        let (x_hat, inv_std) = self.cache.take().expect("forward(Train) before backward");
        let (c, b, h, w) = dy.dim();
        let nt: T = cst((b * h * w) as f64);
        let mut dx = Array4::<T>::zeros((c, b, h, w));
        for ci in 0..c {
            let dyc = dy.index_axis(Axis(0), ci);
            let xh = x_hat.index_axis(Axis(0), ci);
            let sum_dy = dyc.sum();
            let sum_dy_xh = ndarray::Zip::from(&dyc)
                .and(&xh)
                .fold(T::zero(), |acc, &d, &x| acc + d * x);
            self.beta.grad[ci] += sum_dy;
            self.gamma.grad[ci] += sum_dy_xh;
            let g = self.gamma.value[ci];
            let scale = g * inv_std[ci] / nt;
            ndarray::Zip::from(dx.index_axis_mut(Axis(0), ci))
                .and(&dyc)
                .and(&xh)
                .for_each(|o, &d, &x| *o = scale * (nt * d - sum_dy - x * sum_dy_xh));
        }
        dx
    }
}

impl<T: Scalar> Parameterized<T> for BatchNorm2d<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        f(&join(prefix, "gamma"), Slot::Param(&mut self.gamma));
        f(&join(prefix, "beta"), Slot::Param(&mut self.beta));
        f(&join(prefix, "running_mean"), Slot::Buffer(&mut self.running_mean));
        f(&join(prefix, "running_var"), Slot::Buffer(&mut self.running_var));
    }
}

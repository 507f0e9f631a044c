use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array4, ArrayView2, Axis, Ix2};
use rand_chacha::ChaCha8Rng;

use super::{join, Mode, Param, Parameterized, Slot};
use crate::scalar::Scalar;

/// Stride-1 "same" convolution with a 1×1 or 3×3 kernel on channel-major
/// activations.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    /// `(C_out, C_in, k, k)`.
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    cache: Option<(Array2<T>, (usize, usize, usize, usize))>,
}

impl<T: Scalar> Conv2d<T> {
    /// He-normal weights; bias (if any) starts at zero.
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(kernel == 1 || kernel == 3, "only 1x1 and 3x3 kernels");
        let fan_in = (in_channels * kernel * kernel) as f64;
        let weight = Param::normal(
            &[out_channels, in_channels, kernel, kernel],
            (2.0 / fan_in).sqrt(),
            rng,
        );
        Self {
            weight,
            bias: bias.then(|| Param::zeros(&[out_channels])),
            in_channels,
            out_channels,
            kernel,
            cache: None,
        }
    }

    /// All-zero weights and bias.
    pub fn zeroed(in_channels: usize, out_channels: usize, kernel: usize, bias: bool) -> Self {
        assert!(kernel == 1 || kernel == 3, "only 1x1 and 3x3 kernels");
        Self {
            weight: Param::zeros(&[out_channels, in_channels, kernel, kernel]),
            bias: bias.then(|| Param::zeros(&[out_channels])),
            in_channels,
            out_channels,
            kernel,
            cache: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    fn weight_matrix(&self) -> ArrayView2<'_, T> {
        self.weight
            .value
            .view()
            .into_shape_with_order((self.out_channels, self.in_channels * self.kernel * self.kernel))
            .expect("contiguous weight")
    }

    pub fn forward(&mut self, x: &Array4<T>, mode: Mode) -> Array4<T> {
        let (c, b, h, w) = x.dim();
        assert_eq!(c, self.in_channels, "conv input channels");
        let cols = if self.kernel == 1 {
            x.view()
                .into_shape_with_order((c, b * h * w))
                .expect("standard layout activation")
                .to_owned()
        } else {
            im2col3(x)
        };
        let out = self.weight_matrix().dot(&cols);
        let mut out = out
            .into_shape_with_order((self.out_channels, b, h, w))
            .expect("output reshape");
        if let Some(bias) = &self.bias {
            for (mut plane, &bv) in out.axis_iter_mut(Axis(0)).zip(bias.value.iter()) {
                plane += bv;
            }
        }
        self.cache = (mode == Mode::Train).then_some((cols, (c, b, h, w)));
        out
    }

    pub fn backward(&mut self, dy: &Array4<T>) -> Array4<T> {
        let (cols, (c, b, h, w)) = self.cache.take().expect("forward(Train) before backward");
        let n = b * h * w;
        let dy = dy.as_standard_layout();
        let dy2 = dy
            .view()
            .into_shape_with_order((self.out_channels, n))
            .expect("dy layout");
        let k2 = self.in_channels * self.kernel * self.kernel;
        {
            let mut dw = self
                .weight
                .grad
                .view_mut()
                .into_shape_with_order((self.out_channels, k2))
                .expect("contiguous grad")
                .into_dimensionality::<Ix2>()
                .unwrap();
            general_mat_mul(T::one(), &dy2, &cols.t(), T::one(), &mut dw);
        }
        if let Some(bias) = &mut self.bias {
            for (g, row) in bias.grad.iter_mut().zip(dy2.rows()) {
                *g += row.sum();
            }
        }
        let dcols = self.weight_matrix().t().dot(&dy2);
        if self.kernel == 1 {
            dcols
                .into_shape_with_order((c, b, h, w))
                .expect("dx reshape")
        } else {
            col2im3(&dcols, (c, b, h, w))
        }
    }
}

impl<T: Scalar> Parameterized<T> for Conv2d<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        f(&join(prefix, "weight"), Slot::Param(&mut self.weight));
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), Slot::Param(b));
        }
    }
}

/// Patches of a zero-padded 3×3 neighbourhood: row `ci·9 + ky·3 + kx`,
/// column `(b·H + y)·W + x`.
fn im2col3<T: Scalar>(x: &Array4<T>) -> Array2<T> {
    let (c, b, h, w) = x.dim();
    let n = b * h * w;
    let xs = x.as_slice().expect("standard layout activation");
    let mut cols = vec![T::zero(); c * 9 * n];
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * n;
                for bi in 0..b {
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let src_off = ((ci * b + bi) * h + sy as usize) * w;
                        let src = &xs[src_off..src_off + w];
                        let dst_off = row + (bi * h + y) * w;
                        let dst = &mut cols[dst_off..dst_off + w];
                        match kx {
                            0 => dst[1..].copy_from_slice(&src[..w - 1]),
                            1 => dst.copy_from_slice(src),
                            _ => dst[..w - 1].copy_from_slice(&src[1..]),
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((c * 9, n), cols).expect("cols shape")
}

fn col2im3<T: Scalar>(cols: &Array2<T>, dim: (usize, usize, usize, usize)) -> Array4<T> {
    let (c, b, h, w) = dim;
    let n = b * h * w;
    let cols = cols.as_standard_layout();
    let cs = cols.as_slice().expect("standard layout");
    let mut dx = vec![T::zero(); c * n];
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * n;
                for bi in 0..b {
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let dst_off = ((ci * b + bi) * h + sy as usize) * w;
                        let src_off = row + (bi * h + y) * w;
                        let src = &cs[src_off..src_off + w];
                        let dst = &mut dx[dst_off..dst_off + w];
                        match kx {
                            0 => {
                                for (d, &s) in dst[..w - 1].iter_mut().zip(&src[1..]) {
                                    *d += s;
                                }
                            }
                            1 => {
                                for (d, &s) in dst.iter_mut().zip(src) {
                                    *d += s;
                                }
                            }
                            _ => {
                                for (d, &s) in dst[1..].iter_mut().zip(&src[..w - 1]) {
                                    *d += s;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Array4::from_shape_vec(dim, dx).expect("dx shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    /// Direct sliding-window convolution.
    fn naive(conv: &Conv2d<f64>, x: &Array4<f64>) -> Array4<f64> {
        let (c, b, h, w) = x.dim();
        let k = conv.kernel as isize;
        let pad = k / 2;
        let co = conv.out_channels;
        let mut out = Array4::zeros((co, b, h, w));
        for o in 0..co {
            for bi in 0..b {
                for y in 0..h as isize {
                    for xx in 0..w as isize {
                        let mut acc = conv.bias.as_ref().map_or(0.0, |p| p.value[[o]]);
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let sy = y + ky - pad;
                                    let sx = xx + kx - pad;
                                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                        continue;
                                    }
                                    acc += conv.weight.value[[o, ci, ky as usize, kx as usize]]
                                        * x[[ci, bi, sy as usize, sx as usize]];
                                }
                            }
                        }
                        out[[o, bi, y as usize, xx as usize]] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (k, bias) in [(3, false), (3, true), (1, true)] {
            let mut conv = Conv2d::<f64>::new(3, 4, k, bias, &mut rng);
            if let Some(b) = &mut conv.bias {
                b.value.iter_mut().enumerate().for_each(|(i, v)| *v = i as f64 * 0.1);
            }
            let x = Array4::from_shape_fn((3, 2, 5, 4), |(c, b, y, w)| {
                ((c * 7 + b * 3 + y * 5 + w) % 11) as f64 - 5.0
            });
            let fast = conv.forward(&x, Mode::Eval);
            let slow = naive(&conv, &x);
            let diff = (&fast - &slow).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
            assert!(diff < 1e-12, "k={k} diff={diff}");
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <conv(x), dy> is linear in x, so <dx, x> must equal <y, dy> when bias is zero.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut conv = Conv2d::<f64>::new(2, 3, 3, false, &mut rng);
        let x = Array4::from_shape_fn((2, 2, 4, 3), |(c, b, y, w)| (c + 2 * b + 3 * y + w) as f64 * 0.1);
        let dy = Array4::from_shape_fn((3, 2, 4, 3), |(c, b, y, w)| ((c * b + y * w) % 5) as f64 - 2.0);
        let y = conv.forward(&x, Mode::Train);
        let dx = conv.backward(&dy);
        let lhs: f64 = (&y * &dy).sum();
        let rhs: f64 = (&dx * &x).sum();
        assert!((lhs - rhs).abs() < 1e-10);
        // and dW·W likewise recovers the same inner product
        let rhs_w: f64 = (&conv.weight.grad * &conv.weight.value).sum();
        assert!((lhs - rhs_w).abs() < 1e-10);
    }
}

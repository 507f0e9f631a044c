//! Modality-specific enhancing module: channel-wise self-attention over the
//! deepest encoder map with a residual connection.
//!
//! For one sample, the map `(C, h, w)` is viewed as `F ∈ R^{C×N}`, `N = h·w`,
//! one spatial descriptor per channel. Then
//!
//! ```text
//! Q = F·W_q   K = F·W_k      (C × d)
//! V = F·W_v                  (C × N)
//! A = softmax_rows(Q·Kᵀ / √d)  (C × C)
//! f_a = conv1x1(A·V)          zero-initialized
//! f_e = f_a + F
//! ```
//!
//! so a freshly built module is the identity on `F`.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array4, ArrayView2, Axis, Ix2};
use rand_chacha::ChaCha8Rng;

use super::{NetworkError, Result};
use crate::nn::{join, Conv2d, Mode, Param, Parameterized, Slot};
use crate::scalar::{cst, Scalar};

#[derive(Debug, Clone)]
pub struct MemOutput<T> {
    /// Enhanced feature, channel-major.
    pub f_e: Array4<T>,
    /// Attention branch after the output projection.
    pub f_a: Array4<T>,
}

#[derive(Debug, Clone)]
struct SampleCache<T> {
    f: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    a: Array2<T>,
}

#[derive(Debug, Clone)]
pub struct Mem<T> {
    /// `(N, d)`.
    pub w_q: Param<T>,
    /// `(N, d)`.
    pub w_k: Param<T>,
    /// `(N, N)`.
    pub w_v: Param<T>,
    pub out: Conv2d<T>,
    channels: usize,
    spatial: usize,
    attention_dim: usize,
    cache: Vec<SampleCache<T>>,
    last_attention: Vec<Array2<T>>,
}

fn as2<T>(p: &Param<T>) -> ArrayView2<'_, T> {
    p.value.view().into_dimensionality::<Ix2>().expect("2-D projection")
}

impl<T: Scalar> Mem<T> {
    /// `spatial` is `h·w` of the map the module will see.
    pub fn new(channels: usize, spatial: usize, attention_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = (1.0 / spatial as f64).sqrt();
        Self {
            w_q: Param::normal(&[spatial, attention_dim], std, rng),
            w_k: Param::normal(&[spatial, attention_dim], std, rng),
            w_v: Param::normal(&[spatial, spatial], std, rng),
            out: Conv2d::zeroed(channels, channels, 1, true),
            channels,
            spatial,
            attention_dim,
            cache: Vec::new(),
            last_attention: Vec::new(),
        }
    }

    /// Row-stochastic attention matrices from the latest forward, one per
    /// sample.
    pub fn attention(&self) -> &[Array2<T>] {
        &self.last_attention
    }

    pub fn forward(&mut self, f_ls: &Array4<T>, mode: Mode) -> Result<MemOutput<T>> {
        let (c, b, h, w) = f_ls.dim();
        if c != self.channels || h * w != self.spatial {
            return Err(NetworkError::ShapeMismatch(format!(
                "MEM expects {} channels over {} positions, got {c} channels of {h}x{w}",
                self.channels, self.spatial
            )));
        }
        let scale: T = cst(1.0 / (self.attention_dim as f64).sqrt());
        let mut attended = Array4::<T>::zeros((c, b, h, w));
        self.cache.clear();
        self.last_attention.clear();
        for bi in 0..b {
            let f = f_ls
                .index_axis(Axis(1), bi)
                .to_owned()
                .into_shape_with_order((c, h * w))
                .expect("contiguous sample");
            let q = f.dot(&as2(&self.w_q));
            let k = f.dot(&as2(&self.w_k));
            let v = f.dot(&as2(&self.w_v));
            let mut a = q.dot(&k.t());
            a.mapv_inplace(|s| s * scale);
            for mut row in a.rows_mut() {
                let m = row.fold(T::neg_infinity(), |m, &v| m.max(v));
                row.mapv_inplace(|v| (v - m).exp());
                let z = row.sum();
                row.mapv_inplace(|v| v / z);
            }
            let o = a.dot(&v);
            attended
                .index_axis_mut(Axis(1), bi)
                .assign(&o.view().into_shape_with_order((c, h, w)).unwrap());
            self.last_attention.push(a.clone());
            if mode == Mode::Train {
                self.cache.push(SampleCache { f, q, k, v, a });
            }
        }
        let f_a = self.out.forward(&attended, mode);
        let f_e = &f_a + f_ls;
        Ok(MemOutput { f_e, f_a })
    }

    /// Gradient of the enhanced feature → gradient of `f_ls`.
    pub fn backward(&mut self, d_fe: &Array4<T>) -> Array4<T> {
        let (c, b, h, w) = d_fe.dim();
        let scale: T = cst(1.0 / (self.attention_dim as f64).sqrt());
        let d_attended = self.out.backward(d_fe);
        let mut d_f = d_fe.clone();
        let caches = std::mem::take(&mut self.cache);
        assert_eq!(caches.len(), b, "forward(Train) before backward");
        let mut dwq = Array2::<T>::zeros((self.spatial, self.attention_dim));
        let mut dwk = Array2::<T>::zeros((self.spatial, self.attention_dim));
        let mut dwv = Array2::<T>::zeros((self.spatial, self.spatial));
        for (bi, sc) in caches.iter().enumerate() {
            let d_o = d_attended
                .index_axis(Axis(1), bi)
                .to_owned()
                .into_shape_with_order((c, h * w))
                .unwrap();
            let d_a = d_o.dot(&sc.v.t());
            let d_v = sc.a.t().dot(&d_o);
            let mut d_s = Array2::<T>::zeros((c, c));
            for ((mut ds_row, a_row), da_row) in d_s.rows_mut().into_iter().zip(sc.a.rows()).zip(d_a.rows()) {
                let dot = a_row.iter().zip(da_row.iter()).fold(T::zero(), |acc, (&p, &g)| acc + p * g);
                for ((ds, &p), &g) in ds_row.iter_mut().zip(a_row.iter()).zip(da_row.iter()) {
                    *ds = p * (g - dot) * scale;
                }
            }
            let d_q = d_s.dot(&sc.k);
            let d_k = d_s.t().dot(&sc.q);
            general_mat_mul(T::one(), &sc.f.t(), &d_q, T::one(), &mut dwq);
            general_mat_mul(T::one(), &sc.f.t(), &d_k, T::one(), &mut dwk);
            general_mat_mul(T::one(), &sc.f.t(), &d_v, T::one(), &mut dwv);
            let mut d_fs = d_q.dot(&as2(&self.w_q).t());
            general_mat_mul(T::one(), &d_k, &as2(&self.w_k).t(), T::one(), &mut d_fs);
            general_mat_mul(T::one(), &d_v, &as2(&self.w_v).t(), T::one(), &mut d_fs);
            let mut slot = d_f.index_axis_mut(Axis(1), bi);
            slot += &d_fs.view().into_shape_with_order((c, h, w)).unwrap();
        }
        self.w_q.grad += &dwq.into_dyn();
        self.w_k.grad += &dwk.into_dyn();
        self.w_v.grad += &dwv.into_dyn();
        d_f
    }
}

impl<T: Scalar> Parameterized<T> for Mem<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        f(&join(prefix, "w_q"), Slot::Param(&mut self.w_q));
        f(&join(prefix, "w_k"), Slot::Param(&mut self.w_k));
        f(&join(prefix, "w_v"), Slot::Param(&mut self.w_v));
        self.out.visit(&join(prefix, "out"), f);
    }
}

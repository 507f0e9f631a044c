//! Complementary information fusion: both enhanced features are
//! concatenated, refined by two conv blocks (2C→C, C→C) and squashed with a
//! sigmoid into one shared fused feature.

use ndarray::Array4;
use rand_chacha::ChaCha8Rng;

use super::{NetworkError, Result};
use crate::nn::{concat_channels, sigmoid, sigmoid_backward, split_channels, ConvBlock, Mode, Parameterized, Slot};
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct Cif<T> {
    pub fuse: ConvBlock<T>,
    channels: usize,
    out_cache: Option<Array4<T>>,
}

impl<T: Scalar> Cif<T> {
    pub fn new(channels: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            fuse: ConvBlock::new(2 * channels, channels, rng),
            channels,
            out_cache: None,
        }
    }

    pub fn forward(&mut self, f_e_a: &Array4<T>, f_e_b: &Array4<T>, mode: Mode) -> Result<Array4<T>> {
        if f_e_a.dim() != f_e_b.dim() || f_e_a.dim().0 != self.channels {
            return Err(NetworkError::ShapeMismatch(format!(
                "CIF expects two {}-channel maps of equal shape, got {:?} and {:?}",
                self.channels,
                f_e_a.dim(),
                f_e_b.dim()
            )));
        }
        let joint = concat_channels(f_e_a.view(), f_e_b.view());
        let f_fu = sigmoid(&self.fuse.forward(&joint, mode));
        self.out_cache = (mode == Mode::Train).then(|| f_fu.clone());
        Ok(f_fu)
    }

    /// Returns gradients for `(f_e_a, f_e_b)`.
    pub fn backward(&mut self, d_fu: &Array4<T>) -> (Array4<T>, Array4<T>) {
        let out = self.out_cache.take().expect("forward(Train) before backward");
        let d_joint = self.fuse.backward(&sigmoid_backward(d_fu, &out));
        split_channels(&d_joint, self.channels)
    }
}

impl<T: Scalar> Parameterized<T> for Cif<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        self.fuse.visit(prefix, f);
    }
}

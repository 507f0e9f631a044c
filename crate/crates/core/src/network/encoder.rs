use ndarray::Array4;
use rand_chacha::ChaCha8Rng;

use crate::nn::{join, maxpool2, maxpool2_backward, ConvBlock, Mode, Parameterized, PoolIndices, Slot};
use crate::scalar::Scalar;

/// Five conv blocks separated by four 2×2 max-pools.
#[derive(Debug, Clone)]
pub struct Encoder<T> {
    pub blocks: Vec<ConvBlock<T>>,
    pools: Vec<PoolIndices>,
}

impl<T: Scalar> Encoder<T> {
    pub fn new(in_channels: usize, channel_dims: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let mut blocks = Vec::with_capacity(channel_dims.len());
        let mut prev = in_channels;
        for &c in channel_dims {
            blocks.push(ConvBlock::new(prev, c, rng));
            prev = c;
        }
        Self {
            blocks,
            pools: Vec::new(),
        }
    }

    /// Channel-major input `(C_in, B, H, W)` → one feature map per level.
    pub fn forward(&mut self, x: &Array4<T>, mode: Mode) -> Vec<Array4<T>> {
        let mut levels: Vec<Array4<T>> = Vec::with_capacity(self.blocks.len());
        self.pools.clear();
        for (i, block) in self.blocks.iter_mut().enumerate() {
            let input = if i == 0 {
                block.forward(x, mode)
            } else {
                let (pooled, idx) = maxpool2(levels.last().unwrap());
                if mode == Mode::Train {
                    self.pools.push(idx);
                }
                block.forward(&pooled, mode)
            };
            levels.push(input);
        }
        levels
    }

    /// Consumes the gradient arriving at every level (skip connections plus
    /// the deepest map) and returns the input gradient.
    pub fn backward(&mut self, mut d_levels: Vec<Array4<T>>) -> Array4<T> {
        assert_eq!(d_levels.len(), self.blocks.len());
        let mut carry: Option<Array4<T>> = None;
        for i in (0..self.blocks.len()).rev() {
            let mut d = std::mem::take(&mut d_levels[i]);
            if let Some(c) = carry.take() {
                d += &c;
            }
            let d_in = self.blocks[i].backward(&d);
            if i == 0 {
                return d_in;
            }
            let idx = self.pools.pop().expect("pool indices cached in Train mode");
            carry = Some(maxpool2_backward(&d_in, &idx));
        }
        unreachable!("encoder has at least one level")
    }
}

impl<T: Scalar> Parameterized<T> for Encoder<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        for (i, block) in self.blocks.iter_mut().enumerate() {
            block.visit(&join(prefix, &format!("l{}", i + 1)), f);
        }
    }
}

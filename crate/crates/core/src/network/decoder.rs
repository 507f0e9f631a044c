use ndarray::Array4;
use rand_chacha::ChaCha8Rng;

use crate::nn::{
    concat_channels, join, split_channels, upsample2, upsample2_backward, Conv2d, ConvBlock, Mode,
    Parameterized, Slot,
};
use crate::scalar::Scalar;

/// U-Net decoder: four (upsample → concat skip → conv block) stages over
/// encoder levels 4, 3, 2, 1, then a 1×1 classification head.
#[derive(Debug, Clone)]
pub struct Decoder<T> {
    pub stages: Vec<ConvBlock<T>>,
    pub head: Conv2d<T>,
    bottleneck_channels: usize,
    up_channels: Vec<usize>,
}

impl<T: Scalar> Decoder<T> {
    pub fn new(
        bottleneck_channels: usize,
        channel_dims: &[usize],
        n_classes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let skips = &channel_dims[..channel_dims.len() - 1];
        let mut stages = Vec::with_capacity(skips.len());
        let mut up_channels = Vec::with_capacity(skips.len());
        let mut prev = bottleneck_channels;
        for &skip in skips.iter().rev() {
            up_channels.push(prev);
            stages.push(ConvBlock::new(prev + skip, skip, rng));
            prev = skip;
        }
        Self {
            stages,
            head: Conv2d::new(prev, n_classes, 1, true, rng),
            bottleneck_channels,
            up_channels,
        }
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.bottleneck_channels
    }

    /// `skips` are encoder levels 1..=4 (shallow first), channel-major.
    pub fn forward(&mut self, skips: &[Array4<T>], bottleneck: &Array4<T>, mode: Mode) -> Array4<T> {
        assert_eq!(skips.len(), self.stages.len());
        let mut x = bottleneck.clone();
        for (stage, skip) in self.stages.iter_mut().zip(skips.iter().rev()) {
            let up = upsample2(&x);
            let cat = concat_channels(up.view(), skip.view());
            x = stage.forward(&cat, mode);
        }
        self.head.forward(&x, mode)
    }

    /// Returns the bottleneck gradient and the per-level skip gradients
    /// (shallow first).
    pub fn backward(&mut self, d_logits: &Array4<T>) -> (Array4<T>, Vec<Array4<T>>) {
        let mut d = self.head.backward(d_logits);
        // walking stages backwards visits skip levels shallow to deep
        let mut d_skips = Vec::with_capacity(self.stages.len());
        for (stage, &up_c) in self.stages.iter_mut().zip(&self.up_channels).rev() {
            let d_cat = stage.backward(&d);
            let (d_up, d_skip) = split_channels(&d_cat, up_c);
            d_skips.push(d_skip);
            d = upsample2_backward(&d_up);
        }
        (d, d_skips)
    }
}

impl<T: Scalar> Parameterized<T> for Decoder<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        for (i, stage) in self.stages.iter_mut().enumerate() {
            stage.visit(&join(prefix, &format!("up{}", i + 1)), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }
}

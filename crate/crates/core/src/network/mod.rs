//! Dual-branch segmentation network.
//!
//! Each modality has its own encoder, enhancing module and decoder. The
//! deepest encoder maps of both branches are enhanced by channel attention
//! ([`Mem`]) and fused into one shared feature ([`Cif`]) that is appended to
//! each branch's bottleneck before decoding.

mod cif;
mod decoder;
mod encoder;
mod mem;

pub use cif::Cif;
pub use decoder::Decoder;
pub use encoder::Encoder;
pub use mem::{Mem, MemOutput};

use ndarray::{Array4, ArrayView4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{
    concat_channels, join, softmax_channels, softmax_channels_backward, split_channels, to_bchw,
    to_cbhw, Mode, Parameterized, Slot,
};
use crate::scalar::Scalar;

pub const POOL_FACTOR: usize = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("spatial dims {0}x{1} must be positive multiples of 16")]
    BadSpatialDims(usize, usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("decoder expects a {expected}-channel bottleneck, got {got}")]
    BottleneckWidthMismatch { expected: usize, got: usize },
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, NetworkError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub n_classes: usize,
    pub channel_dims: Vec<usize>,
    pub crop: (usize, usize),
    pub enable_mem: bool,
    pub enable_cif: bool,
    pub attention_dim: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            n_classes: 2,
            channel_dims: vec![32, 64, 128, 256, 512],
            crop: (160, 160),
            enable_mem: true,
            enable_cif: true,
            attention_dim: 64,
        }
    }
}

impl NetworkConfig {
    /// Reduced-width configuration for CPU-scale experiments.
    pub fn reduced(crop: (usize, usize)) -> Self {
        Self {
            channel_dims: vec![8, 16, 32, 64, 128],
            crop,
            attention_dim: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(NetworkError::InvalidConfig(m));
        if self.channel_dims.len() != 5 {
            return bad(format!("need 5 channel dims, got {}", self.channel_dims.len()));
        }
        if self.channel_dims.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("channel dims {:?} must strictly increase", self.channel_dims));
        }
        if self.channel_dims.iter().any(|c| c % 2 != 0 || *c == 0) {
            return bad(format!("channel dims {:?} must be even", self.channel_dims));
        }
        check_spatial(self.crop.0, self.crop.1)?;
        if self.in_channels == 0 || self.n_classes < 2 || self.attention_dim == 0 {
            return bad("in_channels ≥ 1, n_classes ≥ 2 and attention_dim ≥ 1 required".into());
        }
        Ok(())
    }

    pub fn deepest_channels(&self) -> usize {
        self.channel_dims[4]
    }

    /// Spatial size `(h, w)` of the deepest encoder map.
    pub fn deepest_spatial(&self) -> (usize, usize) {
        (self.crop.0 / POOL_FACTOR, self.crop.1 / POOL_FACTOR)
    }

    pub fn bottleneck_channels(&self) -> usize {
        if self.enable_cif {
            2 * self.deepest_channels()
        } else {
            self.deepest_channels()
        }
    }
}

fn check_spatial(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || !h.is_multiple_of(POOL_FACTOR) || !w.is_multiple_of(POOL_FACTOR) {
        return Err(NetworkError::BadSpatialDims(h, w));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    A,
    B,
}

/// Encoder maps of one branch, channel-major `(C, B, H, W)`, shallow first.
#[derive(Debug, Clone)]
pub struct FeaturePyramid<T> {
    pub levels: Vec<Array4<T>>,
}

impl<T: Scalar> FeaturePyramid<T> {
    /// Level shapes as `(B, C, H, W)`.
    pub fn shapes_bchw(&self) -> Vec<[usize; 4]> {
        self.levels
            .iter()
            .map(|l| {
                let (c, b, h, w) = l.dim();
                [b, c, h, w]
            })
            .collect()
    }

    pub fn level_bchw(&self, i: usize) -> Array4<T> {
        to_bchw(self.levels[i].view())
    }

    pub fn deepest(&self) -> &Array4<T> {
        self.levels.last().expect("five levels")
    }
}

/// Per-branch logits and class probabilities, `(B, n_classes, H, W)`.
#[derive(Debug, Clone)]
pub struct DualPrediction<T> {
    pub logits_a: Array4<T>,
    pub logits_b: Array4<T>,
    pub probs_a: Array4<T>,
    pub probs_b: Array4<T>,
}

/// Encoder, optional enhancing module and decoder for one modality.
#[derive(Debug, Clone)]
pub struct BranchNet<T> {
    pub encoder: Encoder<T>,
    pub mem: Option<Mem<T>>,
    pub decoder: Decoder<T>,
}

impl<T: Scalar> BranchNet<T> {
    fn new(config: &NetworkConfig, seed: u64, stream_base: u64) -> Self {
        let (dh, dw) = config.deepest_spatial();
        let c = config.deepest_channels();
        Self {
            encoder: Encoder::new(config.in_channels, &config.channel_dims, &mut stream(seed, stream_base)),
            mem: config
                .enable_mem
                .then(|| Mem::new(c, dh * dw, config.attention_dim, &mut stream(seed, stream_base + 1))),
            decoder: Decoder::new(
                config.bottleneck_channels(),
                &config.channel_dims,
                config.n_classes,
                &mut stream(seed, stream_base + 2),
            ),
        }
    }

    fn enhance(&mut self, f_ls: &Array4<T>, mode: Mode) -> Result<MemOutput<T>> {
        match &mut self.mem {
            Some(mem) => mem.forward(f_ls, mode),
            None => Ok(MemOutput {
                f_e: f_ls.clone(),
                f_a: Array4::zeros(f_ls.raw_dim()),
            }),
        }
    }
}

impl<T: Scalar> Parameterized<T> for BranchNet<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        self.encoder.visit(&join(prefix, "enc"), f);
        if let Some(mem) = &mut self.mem {
            mem.visit(&join(prefix, "mem"), f);
        }
        self.decoder.visit(&join(prefix, "dec"), f);
    }
}

/// Independent RNG stream per module so that a module's initialization does
/// not depend on which other modules are enabled.
fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

struct ForwardCache<T> {
    probs_a: Array4<T>,
    probs_b: Array4<T>,
}

/// The full dual-branch model.
pub struct DualBranchNet<T> {
    pub config: NetworkConfig,
    pub branch_a: BranchNet<T>,
    pub branch_b: BranchNet<T>,
    pub cif: Option<Cif<T>>,
    cache: Option<ForwardCache<T>>,
}

impl<T: Scalar> DualBranchNet<T> {
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let branch_a = BranchNet::new(&config, seed, 0);
        let branch_b = BranchNet::new(&config, seed, 10);
        let cif = config
            .enable_cif
            .then(|| Cif::new(config.deepest_channels(), &mut stream(seed, 20)));
        Ok(Self {
            config,
            branch_a,
            branch_b,
            cif,
            cache: None,
        })
    }

    pub fn branch_mut(&mut self, branch: Branch) -> &mut BranchNet<T> {
        match branch {
            Branch::A => &mut self.branch_a,
            Branch::B => &mut self.branch_b,
        }
    }

    fn check_input(&self, image: &ArrayView4<T>) -> Result<()> {
        let (_, c, h, w) = image.dim();
        check_spatial(h, w)?;
        if c != self.config.in_channels {
            return Err(NetworkError::ShapeMismatch(format!(
                "expected {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        Ok(())
    }

    /// Runs one branch's encoder on a `(B, C_in, H, W)` image.
    pub fn encode(&mut self, image: ArrayView4<T>, branch: Branch, mode: Mode) -> Result<FeaturePyramid<T>> {
        self.check_input(&image)?;
        let x = to_cbhw(image);
        let levels = self.branch_mut(branch).encoder.forward(&x, mode);
        Ok(FeaturePyramid { levels })
    }

    /// Enhancing module of one branch on a channel-major deepest map.
    pub fn mem_forward(&mut self, f_ls: &Array4<T>, branch: Branch, mode: Mode) -> Result<MemOutput<T>> {
        let expected = (self.config.deepest_channels(), self.config.deepest_spatial());
        let (c, _, h, w) = f_ls.dim();
        if (c, (h, w)) != expected {
            return Err(NetworkError::ShapeMismatch(format!(
                "deepest map must be {expected:?}, got ({c}, ({h}, {w}))"
            )));
        }
        self.branch_mut(branch).enhance(f_ls, mode)
    }

    pub fn cif_fuse(&mut self, f_e_a: &Array4<T>, f_e_b: &Array4<T>, mode: Mode) -> Result<Array4<T>> {
        match &mut self.cif {
            Some(cif) => cif.forward(f_e_a, f_e_b, mode),
            None => Err(NetworkError::InvalidConfig("fusion is disabled".into())),
        }
    }

    /// Decodes one branch; returns logits `(B, n_classes, H, W)`.
    pub fn decode(
        &mut self,
        pyramid: &FeaturePyramid<T>,
        bottleneck: &Array4<T>,
        branch: Branch,
        mode: Mode,
    ) -> Result<Array4<T>> {
        let decoder = &mut self.branch_mut(branch).decoder;
        check_bottleneck(decoder, bottleneck)?;
        let logits = decoder.forward(&pyramid.levels[..4], bottleneck, mode);
        Ok(to_bchw(logits.view()))
    }

    /// Full forward pass on a pair of `(B, 1, H, W)` images.
    pub fn forward(&mut self, image_a: ArrayView4<T>, image_b: ArrayView4<T>, mode: Mode) -> Result<DualPrediction<T>> {
        self.check_input(&image_a)?;
        self.check_input(&image_b)?;
        if image_a.dim() != image_b.dim() {
            return Err(NetworkError::ShapeMismatch(format!(
                "modalities differ: {:?} vs {:?}",
                image_a.dim(),
                image_b.dim()
            )));
        }
        let la = self.branch_a.encoder.forward(&to_cbhw(image_a), mode);
        let lb = self.branch_b.encoder.forward(&to_cbhw(image_b), mode);
        let ea = self.branch_a.enhance(&la[4], mode)?;
        let eb = self.branch_b.enhance(&lb[4], mode)?;
        let (bott_a, bott_b) = match &mut self.cif {
            Some(cif) => {
                let f_fu = cif.forward(&ea.f_e, &eb.f_e, mode)?;
                (
                    concat_channels(ea.f_e.view(), f_fu.view()),
                    concat_channels(eb.f_e.view(), f_fu.view()),
                )
            }
            None => (ea.f_e, eb.f_e),
        };
        let logits_a = self.branch_a.decoder.forward(&la[..4], &bott_a, mode);
        let logits_b = self.branch_b.decoder.forward(&lb[..4], &bott_b, mode);
        let probs_a = softmax_channels(&logits_a);
        let probs_b = softmax_channels(&logits_b);
        let pred = DualPrediction {
            logits_a: to_bchw(logits_a.view()),
            logits_b: to_bchw(logits_b.view()),
            probs_a: to_bchw(probs_a.view()),
            probs_b: to_bchw(probs_b.view()),
        };
        self.cache = (mode == Mode::Train).then_some(ForwardCache { probs_a, probs_b });
        Ok(pred)
    }

    /// Backpropagates gradients w.r.t. both branches' probabilities
    /// (`(B, n_classes, H, W)`) into every parameter's `grad`.
    pub fn backward(&mut self, d_probs_a: ArrayView4<T>, d_probs_b: ArrayView4<T>) {
        let cache = self.cache.take().expect("forward(Train) before backward");
        let dl_a = softmax_channels_backward(&to_cbhw(d_probs_a), &cache.probs_a);
        let dl_b = softmax_channels_backward(&to_cbhw(d_probs_b), &cache.probs_b);
        let (d_bott_a, skips_a) = self.branch_a.decoder.backward(&dl_a);
        let (d_bott_b, skips_b) = self.branch_b.decoder.backward(&dl_b);
        let c = self.config.deepest_channels();
        let (d_fe_a, d_fe_b) = match &mut self.cif {
            Some(cif) => {
                let (mut d_fe_a, d_fu_a) = split_channels(&d_bott_a, c);
                let (mut d_fe_b, d_fu_b) = split_channels(&d_bott_b, c);
                let (ga, gb) = cif.backward(&(d_fu_a + &d_fu_b));
                d_fe_a += &ga;
                d_fe_b += &gb;
                (d_fe_a, d_fe_b)
            }
            None => (d_bott_a, d_bott_b),
        };
        for (branch, d_fe, mut skips) in [
            (&mut self.branch_a, d_fe_a, skips_a),
            (&mut self.branch_b, d_fe_b, skips_b),
        ] {
            let d_ls = match &mut branch.mem {
                Some(mem) => mem.backward(&d_fe),
                None => d_fe,
            };
            skips.push(d_ls);
            branch.encoder.backward(skips);
        }
    }
}

fn check_bottleneck<T: Scalar>(decoder: &Decoder<T>, bottleneck: &Array4<T>) -> Result<()> {
    let got = bottleneck.dim().0;
    if got != decoder.bottleneck_channels() {
        return Err(NetworkError::BottleneckWidthMismatch {
            expected: decoder.bottleneck_channels(),
            got,
        });
    }
    Ok(())
}

impl<T: Scalar> Parameterized<T> for DualBranchNet<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        self.branch_a.visit(&join(prefix, "a"), f);
        self.branch_b.visit(&join(prefix, "b"), f);
        if let Some(cif) = &mut self.cif {
            cif.visit(&join(prefix, "cif"), f);
        }
    }
}

/// Plain single-modality U-Net (encoder + decoder without enhancement or
/// fusion).
pub struct UNet<T> {
    pub encoder: Encoder<T>,
    pub decoder: Decoder<T>,
}

impl<T: Scalar> UNet<T> {
    pub fn new(config: &NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::new(config.in_channels, &config.channel_dims, &mut rng);
        let decoder = Decoder::new(config.deepest_channels(), &config.channel_dims, config.n_classes, &mut rng);
        Ok(Self { encoder, decoder })
    }

    pub fn from_parts(encoder: Encoder<T>, decoder: Decoder<T>) -> Self {
        Self { encoder, decoder }
    }

    /// `(B, C_in, H, W)` → logits `(B, n_classes, H, W)`.
    pub fn forward(&mut self, image: ArrayView4<T>, mode: Mode) -> Result<Array4<T>> {
        let (_, _, h, w) = image.dim();
        check_spatial(h, w)?;
        let levels = self.encoder.forward(&to_cbhw(image), mode);
        check_bottleneck(&self.decoder, &levels[4])?;
        let logits = self.decoder.forward(&levels[..4], &levels[4], mode);
        Ok(to_bchw(logits.view()))
    }
}

impl<T: Scalar> Parameterized<T> for UNet<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        self.encoder.visit(&join(prefix, "enc"), f);
        self.decoder.visit(&join(prefix, "dec"), f);
    }
}

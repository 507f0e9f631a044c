//! Synthetic dual-modality phantoms with a split-visibility lesion.
//!
//! Each patient gets one ellipsoidal lesion on a smooth background. The
//! lesion voxels are ordered along a randomly oriented, slightly wavy axis;
//! the first `complementarity / 2` share of them carries contrast only in
//! modality a, the last share only in modality b, and the rest in both.
//! Optional distractor blobs carry the same contrast in exactly one modality
//! away from the lesion, so a single modality cannot tell a lesion part from
//! healthy structure without seeing the other one.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{MultiModalVolume, PipelineError, Result};

const MIN_CONTRAST: f64 = 1.0;
const CONTRAST_IN_SIGMAS: f64 = 4.0;
const DISTRACTOR_GAP: f64 = 2.0;
const PLACEMENT_TRIES: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub n_patients: usize,
    /// `(D, H, W)`.
    pub dims: [usize; 3],
    pub lesion_radius_range: (f64, f64),
    pub complementarity: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Lesion-like blobs per modality placed away from the lesion.
    #[serde(default)]
    pub distractors: usize,
}

impl Default for PhantomSpec {
    /// Benchmark geometry: at a 48×48 crop a lesion spans one to two cells of
    /// the 16× downsampled map, and the slices leave room for distractors.
    fn default() -> Self {
        Self {
            n_patients: 20,
            dims: [24, 48, 48],
            lesion_radius_range: (5.0, 10.0),
            complementarity: 0.8,
            noise_sigma: 0.1,
            seed: 2024,
            distractors: 2,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::InvalidSpec(m));
        let (rmin, rmax) = self.lesion_radius_range;
        if self.n_patients == 0 {
            return bad("n_patients must be positive".into());
        }
        if self.dims.contains(&0) {
            return bad(format!("dims {:?} must be positive", self.dims));
        }
        if !(rmin > 0.0 && rmin <= rmax && rmax.is_finite()) {
            return bad(format!("lesion_radius_range {:?}", self.lesion_radius_range));
        }
        let smallest = *self.dims.iter().min().unwrap() as f64;
        if 2.0 * rmax + 1.0 > smallest {
            return bad(format!(
                "lesion radius {rmax} does not fit inside dims {:?}",
                self.dims
            ));
        }
        if !(0.0..=1.0).contains(&self.complementarity) {
            return bad(format!("complementarity {} outside [0, 1]", self.complementarity));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma {}", self.noise_sigma));
        }
        Ok(())
    }

    /// Intensity offset carried by visible lesion voxels.
    pub fn contrast(&self) -> f64 {
        (CONTRAST_IN_SIGMAS * self.noise_sigma).max(MIN_CONTRAST)
    }
}

/// A generated patient plus the ground-truth visibility of its lesion.
#[derive(Debug, Clone)]
pub struct PhantomCase {
    pub volume: MultiModalVolume,
    pub visible_a: Array3<u8>,
    pub visible_b: Array3<u8>,
}

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn norm_dist(&self, p: [usize; 3]) -> f64 {
        (0..3)
            .map(|k| ((p[k] as f64 - self.center[k]) / self.radii[k]).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    fn random(rng: &mut ChaCha8Rng, dims: [usize; 3], rmin: f64, rmax: f64) -> Self {
        let mut radii = [0.0; 3];
        let mut center = [0.0; 3];
        for k in 0..3 {
            radii[k] = if rmax > rmin { rng.random_range(rmin..=rmax) } else { rmin };
            let lo = radii[k];
            let hi = dims[k] as f64 - 1.0 - radii[k];
            center[k] = if hi > lo { rng.random_range(lo..=hi) } else { (dims[k] as f64 - 1.0) / 2.0 };
        }
        Self { center, radii }
    }
}

struct Background {
    base: f64,
    waves: Vec<([f64; 3], f64, f64)>,
}

impl Background {
    fn random(rng: &mut ChaCha8Rng, dims: [usize; 3]) -> Self {
        let base = rng.random_range(-0.5..0.5);
        let waves = (0..3)
            .map(|_| {
                let mut freq = [0.0; 3];
                for (k, f) in freq.iter_mut().enumerate() {
                    let cycles = rng.random_range(0..=2) as f64;
                    *f = 2.0 * std::f64::consts::PI * cycles / dims[k] as f64;
                }
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                let amp = rng.random_range(0.1..0.3);
                (freq, phase, amp)
            })
            .collect();
        Self { base, waves }
    }

    fn at(&self, p: [usize; 3]) -> f64 {
        self.base
            + self
                .waves
                .iter()
                .map(|(f, phase, amp)| {
                    let arg: f64 = (0..3).map(|k| f[k] * p[k] as f64).sum::<f64>() + phase;
                    amp * arg.cos()
                })
                .sum::<f64>()
    }
}

fn random_unit(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let normal = Normal::<f64>::new(0.0, 1.0).unwrap();
    loop {
        let v = [normal.sample(rng), normal.sample(rng), normal.sample(rng)];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-6 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

fn generate_case(spec: &PhantomSpec, index: usize) -> PhantomCase {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let dims = spec.dims;
    let shape = (dims[0], dims[1], dims[2]);
    let (rmin, rmax) = spec.lesion_radius_range;
    let contrast = spec.contrast();

    let bg_a = Background::random(&mut rng, dims);
    let bg_b = Background::random(&mut rng, dims);
    let lesion = Ellipsoid::random(&mut rng, dims, rmin, rmax);

    let mut label = Array3::<u8>::zeros(shape);
    let mut voxels = Vec::new();
    for ((z, y, x), l) in label.indexed_iter_mut() {
        if lesion.norm_dist([z, y, x]) <= 1.0 {
            *l = 1;
            voxels.push([z, y, x]);
        }
    }
    if voxels.is_empty() {
        let c = lesion.center.map(|v| v.round() as usize);
        label[c] = 1;
        voxels.push(c);
    }

    // Order lesion voxels along a random wavy axis and split visibility.
    let axis = random_unit(&mut rng);
    let wave_dir = random_unit(&mut rng);
    let wave_phase = rng.random_range(0.0..std::f64::consts::TAU);
    let mut keyed: Vec<(f64, [usize; 3])> = voxels
        .iter()
        .map(|&p| {
            let rel: Vec<f64> = (0..3)
                .map(|k| (p[k] as f64 - lesion.center[k]) / lesion.radii[k])
                .collect();
            let along: f64 = (0..3).map(|k| axis[k] * rel[k]).sum();
            let across: f64 = (0..3).map(|k| wave_dir[k] * rel[k]).sum();
            (along + 0.35 * (3.0 * across + wave_phase).sin(), p)
        })
        .collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let n_only = ((spec.complementarity * keyed.len() as f64) / 2.0).floor() as usize;
    let mut visible_a = Array3::<u8>::zeros(shape);
    let mut visible_b = Array3::<u8>::zeros(shape);
    for (i, (_, p)) in keyed.iter().enumerate() {
        let a_only = i < n_only;
        let b_only = i >= keyed.len() - n_only;
        if !b_only {
            visible_a[*p] = 1;
        }
        if !a_only {
            visible_b[*p] = 1;
        }
    }

    // Distractors: one-modality blobs kept clear of the lesion and each other.
    let mut blobs: Vec<(Ellipsoid, bool)> = Vec::new();
    for k in 0..2 * spec.distractors {
        let in_a = k % 2 == 0;
        let hi = 0.5 * (rmin + rmax);
        for _ in 0..PLACEMENT_TRIES {
            let cand = Ellipsoid::random(&mut rng, dims, rmin, hi);
            let clear = |other: &Ellipsoid| {
                let d: f64 = (0..3)
                    .map(|k| (cand.center[k] - other.center[k]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                let reach = cand.radii.iter().cloned().fold(0.0, f64::max)
                    + other.radii.iter().cloned().fold(0.0, f64::max);
                d > reach + DISTRACTOR_GAP
            };
            if clear(&lesion) && blobs.iter().all(|(b, _)| clear(b)) {
                blobs.push((cand, in_a));
                break;
            }
        }
    }

    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0)).unwrap();
    let mut a = Array3::<f32>::zeros(shape);
    let mut b = Array3::<f32>::zeros(shape);
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let p = [z, y, x];
                let mut va = bg_a.at(p) + contrast * f64::from(visible_a[p]);
                let mut vb = bg_b.at(p) + contrast * f64::from(visible_b[p]);
                for (blob, in_a) in &blobs {
                    if blob.norm_dist(p) <= 1.0 {
                        if *in_a {
                            va += contrast;
                        } else {
                            vb += contrast;
                        }
                    }
                }
                if spec.noise_sigma > 0.0 {
                    va += noise.sample(&mut rng);
                    vb += noise.sample(&mut rng);
                }
                a[p] = va as f32;
                b[p] = vb as f32;
            }
        }
    }

    let volume = MultiModalVolume::new(format!("ph{index:03}"), a, b, Some(label))
        .expect("phantom arrays are consistent");
    PhantomCase {
        volume,
        visible_a,
        visible_b,
    }
}

pub fn generate_phantom_detailed(spec: &PhantomSpec) -> Result<Vec<PhantomCase>> {
    spec.validate()?;
    Ok((0..spec.n_patients).map(|i| generate_case(spec, i)).collect())
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<Vec<MultiModalVolume>> {
    Ok(generate_phantom_detailed(spec)?
        .into_iter()
        .map(|c| c.volume)
        .collect())
}

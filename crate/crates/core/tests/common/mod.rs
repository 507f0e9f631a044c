#![allow(dead_code)]

use fusionseg::nn::{Param, Parameterized, Slot};

/// Runs `f` on the named learnable parameter.
pub fn with_param<M: Parameterized<f64>, R>(m: &mut M, name: &str, f: impl FnOnce(&mut Param<f64>) -> R) -> R {
    let mut f = Some(f);
    let mut out = None;
    m.visit("", &mut |n, slot| {
        if n == name {
            if let Slot::Param(p) = slot {
                out = Some((f.take().unwrap())(p));
            }
        }
    });
    out.unwrap_or_else(|| panic!("no parameter named {name}"))
}

pub fn param_names<M: Parameterized<f64>>(m: &mut M) -> Vec<String> {
    let mut names = Vec::new();
    m.visit("", &mut |n, slot| {
        if matches!(slot, Slot::Param(_)) {
            names.push(n.to_string());
        }
    });
    names
}

/// Norm-wise relative error between two gradient vectors.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

/// Central-difference gradient of `loss` w.r.t. the given coordinates of a
/// named parameter.
pub fn fd_param<M: Parameterized<f64>>(
    m: &mut M,
    name: &str,
    coords: &[usize],
    eps: f64,
    loss: &mut dyn FnMut(&mut M) -> f64,
) -> Vec<f64> {
    coords
        .iter()
        .map(|&i| {
            let orig = with_param(m, name, |p| {
                let slice = p.value.as_slice_mut().unwrap();
                let o = slice[i];
                slice[i] = o + eps;
                o
            });
            let up = loss(m);
            with_param(m, name, |p| p.value.as_slice_mut().unwrap()[i] = orig - eps);
            let down = loss(m);
            with_param(m, name, |p| p.value.as_slice_mut().unwrap()[i] = orig);
            (up - down) / (2.0 * eps)
        })
        .collect()
}

pub fn analytic<M: Parameterized<f64>>(m: &mut M, name: &str, coords: &[usize]) -> Vec<f64> {
    with_param(m, name, |p| {
        let g = p.grad.as_slice().unwrap();
        coords.iter().map(|&i| g[i]).collect()
    })
}

/// Up to `max` evenly spread flat indices into a parameter of `len` entries.
pub fn spread(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        (0..len).collect()
    } else {
        (0..max).map(|k| k * len / max).collect()
    }
}

pub mod grad {
    use super::*;
    use fusionseg::network::{Cif, Mem};
    use fusionseg::nn::Mode;
    use ndarray::Array4;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    pub const EPS: f64 = 1e-3;

    pub fn randn(shape: (usize, usize, usize, usize), rng: &mut ChaCha8Rng) -> Array4<f64> {
        Array4::from_shape_simple_fn(shape, || StandardNormal.sample(rng))
    }

    fn randomize(p: &mut Param<f64>, std: f64, rng: &mut ChaCha8Rng) {
        p.value.mapv_inplace(|_| { let z: f64 = StandardNormal.sample(rng); std * z });
    }

    fn weighted(y: &Array4<f64>, r: &Array4<f64>) -> f64 {
        (y * r).sum()
    }

    /// Relative error per learnable group of a toy channel-attention module
    /// (B=1, C=4, h=w=2), plus its input, under a random linear loss.
    pub fn mem_errors(seed: u64) -> Vec<(String, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = (4, 1, 2, 2);
        let mut mem = Mem::<f64>::new(4, 4, 3, &mut rng);
        // the zero-initialized projection would zero every upstream gradient
        randomize(&mut mem.out.weight, 0.5, &mut rng);
        if let Some(b) = &mut mem.out.bias {
            randomize(b, 0.5, &mut rng);
        }
        let x = randn(shape, &mut rng);
        let r = randn(shape, &mut rng);

        mem.zero_grad();
        let out = mem.forward(&x, Mode::Train).unwrap();
        let dx = mem.backward(&r);
        let _ = out;

        let mut loss = |m: &mut Mem<f64>| weighted(&m.forward(&x, Mode::Train).unwrap().f_e, &r);
        let mut report = Vec::new();
        for name in param_names(&mut mem) {
            let len = with_param(&mut mem, &name, |p| p.value.len());
            let coords: Vec<usize> = (0..len).collect();
            let a = analytic(&mut mem, &name, &coords);
            let n = fd_param(&mut mem, &name, &coords, EPS, &mut loss);
            report.push((format!("mem.{name}"), rel_err(&a, &n)));
        }
        let fd_x: Vec<f64> = (0..x.len())
            .map(|i| {
                let mut xp = x.clone();
                xp.as_slice_mut().unwrap()[i] += EPS;
                let up = weighted(&mem.forward(&xp, Mode::Train).unwrap().f_e, &r);
                xp.as_slice_mut().unwrap()[i] -= 2.0 * EPS;
                let down = weighted(&mem.forward(&xp, Mode::Train).unwrap().f_e, &r);
                (up - down) / (2.0 * EPS)
            })
            .collect();
        report.push(("mem.input".into(), rel_err(dx.as_slice().unwrap(), &fd_x)));
        report
    }

    /// Relative error per learnable group of a toy fusion layer (C=4,
    /// h=w=2), plus both inputs.
    pub fn cif_errors(seed: u64) -> Vec<(String, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = (4, 1, 2, 2);
        let mut cif = Cif::<f64>::new(4, &mut rng);
        let xa = randn(shape, &mut rng);
        let xb = randn(shape, &mut rng);
        let r = randn(shape, &mut rng);

        cif.zero_grad();
        cif.forward(&xa, &xb, Mode::Train).unwrap();
        let (da, db) = cif.backward(&r);

        let mut report = Vec::new();
        let mut loss = |c: &mut Cif<f64>| weighted(&c.forward(&xa, &xb, Mode::Train).unwrap(), &r);
        for name in param_names(&mut cif) {
            let len = with_param(&mut cif, &name, |p| p.value.len());
            let coords: Vec<usize> = (0..len).collect();
            let a = analytic(&mut cif, &name, &coords);
            let n = fd_param(&mut cif, &name, &coords, EPS, &mut loss);
            report.push((format!("cif.{name}"), rel_err(&a, &n)));
        }
        for (label, which, grad) in [("cif.input_a", 0, &da), ("cif.input_b", 1, &db)] {
            let fd: Vec<f64> = (0..xa.len())
                .map(|i| {
                    let eval = |delta: f64, cif: &mut Cif<f64>| {
                        let (mut a, mut b) = (xa.clone(), xb.clone());
                        let t = if which == 0 { &mut a } else { &mut b };
                        t.as_slice_mut().unwrap()[i] += delta;
                        weighted(&cif.forward(&a, &b, Mode::Train).unwrap(), &r)
                    };
                    (eval(EPS, &mut cif) - eval(-EPS, &mut cif)) / (2.0 * EPS)
                })
                .collect();
            report.push((label.into(), rel_err(grad.as_slice().unwrap(), &fd)));
        }
        report
    }
}

pub mod fixtures {
    use fusionseg::data::{generate_phantom, make_split, DatasetSplit, PhantomSpec};
    use fusionseg::network::NetworkConfig;
    use fusionseg::trainer::TrainConfig;

    pub fn tiny_phantom() -> PhantomSpec {
        PhantomSpec {
            n_patients: 6,
            dims: [8, 16, 16],
            lesion_radius_range: (2.0, 3.0),
            ..PhantomSpec::default()
        }
    }

    pub fn tiny_split(label_fraction: f64) -> DatasetSplit {
        make_split(&generate_phantom(&tiny_phantom()).unwrap(), label_fraction, 3, (16, 16)).unwrap()
    }

    pub fn tiny_net() -> NetworkConfig {
        NetworkConfig {
            channel_dims: vec![4, 8, 16, 32, 64],
            crop: (16, 16),
            attention_dim: 4,
            ..NetworkConfig::default()
        }
    }

    pub fn tiny_train(max_steps: u64) -> TrainConfig {
        TrainConfig {
            max_steps,
            batch_labeled: 2,
            batch_unlabeled: 2,
            eval_every: 5,
            seed: 17,
            ..TrainConfig::default()
        }
    }
}

pub mod nifti {
    /// Hand-assembled single-file NIfTI-1 image: dims `(nx, ny, nz)` in file
    /// order, voxel payload at offset 352.
    pub fn nifti(dims: [i16; 3], datatype: i16, bitpix: i16, slope: f32, inter: f32, payload: &[u8], big_endian: bool) -> Vec<u8> {
        let mut h = vec![0u8; 352];
        let put_i32 = |h: &mut Vec<u8>, at: usize, v: i32| {
            let b = if big_endian { v.to_be_bytes() } else { v.to_le_bytes() };
            h[at..at + 4].copy_from_slice(&b);
        };
        let put_i16 = |h: &mut Vec<u8>, at: usize, v: i16| {
            let b = if big_endian { v.to_be_bytes() } else { v.to_le_bytes() };
            h[at..at + 2].copy_from_slice(&b);
        };
        let put_f32 = |h: &mut Vec<u8>, at: usize, v: f32| {
            let b = if big_endian { v.to_be_bytes() } else { v.to_le_bytes() };
            h[at..at + 4].copy_from_slice(&b);
        };
        put_i32(&mut h, 0, 348);
        put_i16(&mut h, 40, 3);
        for (i, d) in dims.iter().enumerate() {
            put_i16(&mut h, 42 + 2 * i, *d);
        }
        for i in 3..7 {
            put_i16(&mut h, 42 + 2 * i, 1);
        }
        put_i16(&mut h, 70, datatype);
        put_i16(&mut h, 72, bitpix);
        put_f32(&mut h, 108, 352.0);
        put_f32(&mut h, 112, slope);
        put_f32(&mut h, 116, inter);
        h[344..348].copy_from_slice(b"n+1\0");
        h.extend_from_slice(payload);
        h
    }

    pub fn f32_payload(values: &[f32], big_endian: bool) -> Vec<u8> {
        values
            .iter()
            .flat_map(|v| if big_endian { v.to_be_bytes() } else { v.to_le_bytes() })
            .collect()
    }
}

pub mod oracle {
    use ndarray::{Array2, Array3};

    /// Independent confusion counter over row-major pixels.
    pub fn brute_force(pred: &Array2<u8>, gt: &Array2<u8>) -> (u64, u64, u64) {
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for y in 0..pred.nrows() {
            for x in 0..pred.ncols() {
                match (pred[[y, x]], gt[[y, x]]) {
                    (1, 1) => tp += 1,
                    (1, 0) => fp += 1,
                    (0, 1) => fn_ += 1,
                    _ => {}
                }
            }
        }
        (tp, fp, fn_)
    }

    /// Slices along D with any foreground voxel.
    pub fn lesion_slice_count(label: &Array3<u8>) -> usize {
        let (d, h, w) = label.dim();
        let mut n = 0;
        for z in 0..d {
            let mut any = false;
            for y in 0..h {
                for x in 0..w {
                    any |= label[[z, y, x]] != 0;
                }
            }
            n += usize::from(any);
        }
        n
    }
}

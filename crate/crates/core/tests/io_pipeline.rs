mod common;

use common::nifti::{f32_payload, nifti};
use common::oracle::lesion_slice_count;
use fusionseg::data::{
    generate_phantom, load_volume_dir, make_split, normalize_slice, slice_and_filter, write_volume_dir, PhantomSpec,
};
use fusionseg::volume_io::{
    decode_nifti1, read_nifti1, read_portable, write_mask_pgm, write_portable, VolumeError,
};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn nifti_float32_fixture_decodes_written_values() {
    let values: Vec<f32> = (0..8).map(|v| v as f32).collect();
    let bytes = nifti([2, 2, 2], 16, 32, 1.0, 0.0, &f32_payload(&values, false), false);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.nii");
    std::fs::write(&path, &bytes).unwrap();
    let v = read_nifti1(&path).unwrap();
    assert_eq!(v.header.dims, [2, 2, 2]);
    assert_eq!(v.voxels.iter().copied().collect::<Vec<_>>(), values);
}

#[test]
fn nifti_slope_and_intercept() {
    let values: Vec<f32> = (0..8).map(|v| v as f32).collect();
    let bytes = nifti([2, 2, 2], 16, 32, 2.0, 1.0, &f32_payload(&values, false), false);
    let v = decode_nifti1(&bytes).unwrap();
    let expected: Vec<f32> = (0..8).map(|v| 2.0 * v as f32 + 1.0).collect();
    assert_eq!(v.voxels.iter().copied().collect::<Vec<_>>(), expected);

    let zero_slope = nifti([2, 2, 2], 16, 32, 0.0, 0.0, &f32_payload(&values, false), false);
    assert_eq!(decode_nifti1(&zero_slope).unwrap().voxels.iter().copied().collect::<Vec<_>>(), values);
}

#[test]
fn nifti_integer_types_and_byte_swap() {
    // file order is x fastest, so dims (nx=3, ny=2, nz=1) map to (D=1, H=2, W=3)
    let ints: Vec<i16> = vec![-3, -2, -1, 0, 1, 2];
    let payload: Vec<u8> = ints.iter().flat_map(|v| v.to_le_bytes()).collect();
    let v = decode_nifti1(&nifti([3, 2, 1], 4, 16, 1.0, 0.0, &payload, false)).unwrap();
    assert_eq!(v.voxels.dim(), (1, 2, 3));
    assert_eq!(v.voxels[[0, 1, 0]], 0.0);
    assert_eq!(v.voxels[[0, 0, 2]], -1.0);

    let wide: Vec<i32> = vec![100_000, -7, 0, 1, 2, 3];
    let payload: Vec<u8> = wide.iter().flat_map(|v| v.to_be_bytes()).collect();
    let v = decode_nifti1(&nifti([3, 2, 1], 8, 32, 1.0, 0.0, &payload, true)).unwrap();
    assert_eq!(v.voxels.iter().copied().collect::<Vec<_>>(), wide.iter().map(|&x| x as f32).collect::<Vec<_>>());

    let floats = [0.5f32, -1.25, 3.0, 8.0];
    let v = decode_nifti1(&nifti([2, 2, 1], 16, 32, 1.0, 0.0, &f32_payload(&floats, true), true)).unwrap();
    assert_eq!(v.voxels.iter().copied().collect::<Vec<_>>(), floats.to_vec());
}

#[test]
fn nifti_errors() {
    let ok = nifti([2, 2, 2], 16, 32, 1.0, 0.0, &[0u8; 32], false);
    let mut bad_magic = ok.clone();
    bad_magic[344..348].copy_from_slice(b"ni1\0");
    assert!(matches!(decode_nifti1(&bad_magic), Err(VolumeError::BadMagic)));
    let mut bad_type = ok.clone();
    bad_type[70..72].copy_from_slice(&64i16.to_le_bytes());
    assert!(matches!(decode_nifti1(&bad_type), Err(VolumeError::UnsupportedDatatype(64))));
    assert!(matches!(decode_nifti1(&ok[..ok.len() - 4]), Err(VolumeError::TruncatedFile { .. })));
    let mut gz = vec![0x1f, 0x8b];
    gz.extend_from_slice(&ok);
    assert!(matches!(decode_nifti1(&gz), Err(VolumeError::CompressedInput)));
}

#[test]
fn portable_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let specials = [f32::MIN_POSITIVE, -0.0, f32::MAX, f32::MIN, 1e-40];
    let v = Array3::from_shape_fn((3, 4, 5), |(d, y, x)| {
        let i = d * 20 + y * 5 + x;
        if i < specials.len() { specials[i] } else { f32::from_bits(rng.random::<u32>() & 0x3fff_ffff) }
    });
    let path = dir.path().join("vol");
    write_portable(v.view(), &path).unwrap();
    let back = read_portable(&path).unwrap();
    assert_eq!(back.voxels.dim(), (3, 4, 5));
    assert!(back.voxels.iter().zip(v.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));

    std::fs::write(dir.path().join("small.json"), r#"{"dims":[1,2,2],"dtype":"f32","order":"DHW"}"#).unwrap();
    std::fs::write(dir.path().join("small.f32"), f32_payload(&[1.0, 2.0, 3.0, 4.0], false)).unwrap();
    let small = read_portable(dir.path().join("small")).unwrap();
    assert_eq!(small.voxels, Array3::from_shape_vec((1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    std::fs::write(dir.path().join("small.f32"), f32_payload(&[1.0, 2.0, 3.0], false)).unwrap();
    assert!(matches!(read_portable(dir.path().join("small")), Err(VolumeError::HeaderMismatch { .. })));
    assert!(matches!(read_portable(dir.path().join("absent")), Err(VolumeError::MissingSidecar(_))));
}

#[test]
fn pgm_documented_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.pgm");
    let mask = Array2::from_shape_vec((2, 2), vec![1u8, 0, 0, 1]).unwrap();
    write_mask_pgm(mask.view(), &path).unwrap();
    let mut expected = b"P5\n2 2\n255\n".to_vec();
    expected.extend_from_slice(&[0xFF, 0x00, 0x00, 0xFF]);
    assert_eq!(std::fs::read(&path).unwrap(), expected);
}

#[test]
fn volume_dir_round_trip() {
    let spec = PhantomSpec { n_patients: 3, dims: [8, 16, 16], lesion_radius_range: (2.0, 3.0), ..PhantomSpec::default() };
    let volumes = generate_phantom(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for v in &volumes {
        write_volume_dir(v, dir.path()).unwrap();
    }
    let back = load_volume_dir(dir.path()).unwrap();
    assert_eq!(back, volumes);
}

#[test]
fn slice_counts_match_brute_force_on_random_phantoms() {
    for seed in 0..20u64 {
        let spec = PhantomSpec { n_patients: 1, seed, ..PhantomSpec::default() };
        let v = &generate_phantom(&spec).unwrap()[0];
        let slices = slice_and_filter(v).unwrap();
        assert_eq!(slices.len(), lesion_slice_count(v.label.as_ref().unwrap()), "seed {seed}");
        assert!(slices.windows(2).all(|w| w[0].0 < w[1].0));
    }
}

#[test]
fn split_is_patient_disjoint_and_normalized() {
    let volumes = generate_phantom(&PhantomSpec { n_patients: 10, ..PhantomSpec::default() }).unwrap();
    for seed in 0..5 {
        let split = make_split(&volumes, 0.1, seed, (32, 32)).unwrap();
        let train = split.train_patient_ids();
        let test = split.test_patient_ids();
        assert_eq!((train.len(), test.len()), (8, 2));
        assert!(train.is_disjoint(&test));
        let labeled: std::collections::BTreeSet<_> = split.labeled.iter().map(|r| r.patient_id.as_str()).collect();
        assert_eq!(labeled.len(), 1);
        assert!(split.unlabeled.iter().all(|r| r.mask.is_none() && !r.labeled));
        assert!(split.labeled.iter().chain(&split.test).all(|r| r.mask.is_some()));
    }
    // normalization happens on the full slice, before the crop
    let v = &volumes[0];
    for (_, a, _, _) in slice_and_filter(v).unwrap() {
        let n = normalize_slice(a.mapv(f64::from).view());
        let mean = n.mean().unwrap();
        let std = n.mapv(|x| (x - mean).powi(2)).mean().unwrap().sqrt();
        assert!(mean.abs() < 1e-6 && (std - 1.0).abs() < 1e-6);
    }
}

use std::fs;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use resdsn::volume::{self, LoadedVolume, ValueKind, Volume, HU_HIGH, HU_LOW};
use resdsn::Error;

fn random_volume(seed: u64, dims: [usize; 3]) -> Volume<f32> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..dims.iter().product()).map(|_| r.random_range(-1000.0..1500.0)).collect();
    Volume::new(dims, [0.75, 0.5, 1.25], data).unwrap()
}

#[test]
fn hand_written_raw_file_loads_in_xyz_order() {
    let dir = tempfile::tempdir().unwrap();
    let payload: Vec<u8> = (0..8).flat_map(|i| (i as f32).to_le_bytes()).collect();
    fs::write(dir.path().join("tiny.f32raw"), payload).unwrap();
    fs::write(
        dir.path().join("tiny.json"),
        r#"{"dims":[2,2,2],"spacing":[1.0,1.0,2.5],"kind":"intensity","order":"xyz"}"#,
    )
    .unwrap();
    let v = volume::load_intensity(dir.path().join("tiny.f32raw")).unwrap();
    assert_eq!(v.get(1, 1, 1), 7.0);
    assert_eq!(v.get(1, 0, 0), 1.0);
    assert_eq!(v.spacing(), [1.0, 1.0, 2.5]);
}

#[test]
fn short_payload_is_a_size_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let payload: Vec<u8> = (0..63).flat_map(|i| (i as f32).to_le_bytes()).collect();
    fs::write(dir.path().join("c.f32raw"), payload).unwrap();
    fs::write(
        dir.path().join("c.json"),
        r#"{"dims":[4,4,4],"spacing":[1,1,1],"kind":"intensity","order":"xyz"}"#,
    )
    .unwrap();
    let err = volume::load_volume(dir.path().join("c")).unwrap_err();
    assert!(matches!(err, Error::SizeMismatch { expected: 64, actual: 63 }), "{err}");
}

#[test]
fn missing_file_and_empty_path_are_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(volume::load_volume(dir.path().join("nope")), Err(Error::Io { .. })));
    assert!(volume::load_volume("").is_err());
    let v = random_volume(0, [2, 2, 2]);
    assert!(volume::save_intensity(&v, "").is_err());
}

#[test]
fn raw_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let v = random_volume(3, [8, 8, 8]);
    let path = dir.path().join("case");
    volume::save_intensity(&v, &path).unwrap();
    let back = volume::load_intensity(&path).unwrap();
    assert_eq!(back.dims(), v.dims());
    assert_eq!(back.spacing(), v.spacing());
    assert!(back.data().iter().zip(v.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn mask_sidecar_records_kind() {
    let dir = tempfile::tempdir().unwrap();
    let m = Volume::new([2, 2, 1], [1.0; 3], vec![0u8, 1, 1, 0]).unwrap();
    let path = dir.path().join("m");
    volume::save_mask(&m, &path).unwrap();
    let side: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("m.json")).unwrap()).unwrap();
    assert_eq!(side["kind"], "mask");
    assert_eq!(side["order"], "xyz");
    let loaded = volume::load_volume(&path).unwrap();
    assert_eq!(loaded.kind(), ValueKind::Mask);
    assert_eq!(loaded.into_mask().unwrap(), m);
}

#[test]
fn nifti_round_trip_is_bitwise_for_both_kinds() {
    let dir = tempfile::tempdir().unwrap();
    let v = random_volume(9, [8, 8, 8]);
    let p = dir.path().join("ct.nii");
    volume::save_intensity(&v, &p).unwrap();
    assert_eq!(volume::load_intensity(&p).unwrap(), v);
    // load then save reproduces the file byte for byte
    let first = fs::read(&p).unwrap();
    let again = dir.path().join("again.nii");
    volume::save_volume(&volume::load_volume(&p).unwrap(), &again).unwrap();
    assert_eq!(fs::read(&again).unwrap(), first);

    let m = v.map(|x| (x > 0.0) as u8);
    let pm = dir.path().join("mask.nii");
    volume::save_mask(&m, &pm).unwrap();
    match volume::load_volume(&pm).unwrap() {
        LoadedVolume::Mask(back) => assert_eq!(back, m),
        other => panic!("expected a mask, got {:?}", other.kind()),
    }
}

fn nifti_header(datatype: i16, bitpix: i16, dims: [i16; 3]) -> Vec<u8> {
    let mut h = vec![0u8; 352];
    h[0..4].copy_from_slice(&348i32.to_le_bytes());
    h[40..42].copy_from_slice(&3i16.to_le_bytes());
    for (a, d) in dims.iter().enumerate() {
        h[42 + 2 * a..44 + 2 * a].copy_from_slice(&d.to_le_bytes());
    }
    h[70..72].copy_from_slice(&datatype.to_le_bytes());
    h[72..74].copy_from_slice(&bitpix.to_le_bytes());
    for a in 0..3 {
        h[80 + 4 * a..84 + 4 * a].copy_from_slice(&0.8f32.to_le_bytes());
    }
    h[108..112].copy_from_slice(&352f32.to_le_bytes());
    h[344..348].copy_from_slice(b"n+1\0");
    h
}

#[test]
fn nifti_int16_payload_is_read() {
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = nifti_header(4, 16, [2, 1, 2]);
    for v in [-1000i16, 0, 40, 3000] {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let p = dir.path().join("i16.nii");
    fs::write(&p, bytes).unwrap();
    let v = volume::load_intensity(&p).unwrap();
    assert_eq!(v.dims(), [2, 1, 2]);
    assert_eq!(v.data(), &[-1000.0, 0.0, 40.0, 3000.0]);
    assert!((v.spacing()[0] - 0.8).abs() < 1e-6);
}

#[test]
fn nifti_rejects_unsupported_datatype_and_short_payload() {
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = nifti_header(64, 64, [1, 1, 1]);
    bytes.extend_from_slice(&0f64.to_le_bytes());
    let p = dir.path().join("f64.nii");
    fs::write(&p, bytes).unwrap();
    assert!(matches!(volume::load_volume(&p), Err(Error::UnsupportedDatatype(64))));

    let mut bytes = nifti_header(16, 32, [2, 2, 2]);
    bytes.extend_from_slice(&[0u8; 28]);
    fs::write(&p, bytes).unwrap();
    assert!(matches!(volume::load_volume(&p), Err(Error::SizeMismatch { expected: 8, actual: 7 })));
}

#[test]
fn random_volume_truncates_into_window() {
    let v = random_volume(4, [16, 16, 16]);
    let t = volume::truncate_intensity(&v, HU_LOW, HU_HIGH).unwrap();
    let (lo, hi) = t.data().iter().fold((f32::MAX, f32::MIN), |(a, b), &x| (a.min(x), b.max(x)));
    assert!(lo >= -100.0 && hi <= 240.0);
}

#[test]
fn normalised_volume_has_unit_statistics() {
    let v = random_volume(5, [16, 16, 16]);
    let n = volume::normalize_zero_mean_unit_var(&v);
    let len = n.len() as f64;
    let mean = n.data().iter().map(|&x| x as f64).sum::<f64>() / len;
    let var = n.data().iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / len;
    assert!(mean.abs() < 1e-5, "mean {mean}");
    assert!((var - 1.0).abs() < 1e-5, "var {var}");
    assert_eq!(n.spacing(), v.spacing());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn truncation_is_idempotent(seed in any::<u64>(), lo in -500.0f32..0.0, width in 1.0f32..600.0) {
        let v = random_volume(seed, [4, 3, 5]);
        let once = volume::truncate_intensity(&v, lo, lo + width).unwrap();
        let twice = volume::truncate_intensity(&once, lo, lo + width).unwrap();
        prop_assert_eq!(once.spacing(), v.spacing());
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn normalisation_is_idempotent(seed in any::<u64>()) {
        let v = random_volume(seed, [5, 4, 6]);
        let once = volume::normalize_zero_mean_unit_var(&v);
        let twice = volume::normalize_zero_mean_unit_var(&once);
        for (a, b) in once.data().iter().zip(twice.data()) {
            prop_assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn raw_save_load_is_identity(seed in any::<u64>(), w in 1usize..6, h in 1usize..6, d in 1usize..6) {
        let dir = tempfile::tempdir().unwrap();
        let v = random_volume(seed, [w, h, d]);
        let p = dir.path().join("v.f32raw");
        volume::save_intensity(&v, &p).unwrap();
        prop_assert_eq!(volume::load_intensity(&p).unwrap(), v);
    }
}

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3};
use panu::synth::{generate_scene, OffsetModel, SceneConfig};
use panu::tensor_io::{
    load_bundle, read_tensor, save_bundle, write_tensor, BundleError, Tensor, TensorData, TensorError, MANIFEST_NAME,
};
use proptest::prelude::*;

fn arb_tensor() -> impl Strategy<Value = Tensor> {
    prop::collection::vec(1usize..5, 1..=4).prop_flat_map(|shape| {
        let n: usize = shape.iter().product();
        let data = prop_oneof![
            prop::collection::vec(any::<f32>(), n).prop_map(TensorData::F32),
            prop::collection::vec(any::<f64>(), n).prop_map(TensorData::F64),
            prop::collection::vec(any::<i32>(), n).prop_map(TensorData::I32),
            prop::collection::vec(any::<u8>(), n).prop_map(TensorData::U8),
        ];
        data.prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
    })
}

/// Bitwise view, so NaN payloads compare equal.
fn bits(t: &Tensor) -> Vec<u64> {
    match t.data() {
        TensorData::F32(v) => v.iter().map(|x| x.to_bits() as u64).collect(),
        TensorData::F64(v) => v.iter().map(|x| x.to_bits()).collect(),
        TensorData::I32(v) => v.iter().map(|&x| x as u32 as u64).collect(),
        TensorData::U8(v) => v.iter().map(|&x| x as u64).collect(),
    }
}

proptest! {
    #[test]
    fn bytes_round_trip_is_bit_exact(t in arb_tensor()) {
        let back = Tensor::from_bytes(&t.to_bytes().unwrap()).unwrap();
        prop_assert_eq!(back.shape(), t.shape());
        prop_assert_eq!(back.dtype(), t.dtype());
        prop_assert_eq!(bits(&back), bits(&t));
    }

    #[test]
    fn truncation_is_always_detected(t in arb_tensor(), cut in 1usize..8) {
        let bytes = t.to_bytes().unwrap();
        let cut = cut.min(bytes.len());
        prop_assert!(Tensor::from_bytes(&bytes[..bytes.len() - cut]).is_err());
    }
}

#[test]
fn file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let a = Array3::from_shape_fn((3, 4, 2), |(y, x, c)| y as f64 * 10.0 + x as f64 + c as f64 * 0.5);
    let t = Tensor::from_f64(&a).unwrap();
    let path = dir.path().join("a.ppdl");
    write_tensor(&t, &path).unwrap();
    assert_eq!(read_tensor(&path).unwrap().to_array3_f64().unwrap(), a);
    assert!(matches!(read_tensor(dir.path().join("missing.ppdl")), Err(TensorError::Io { .. })));
}

fn write_scene(dir: &Path, cfg: &SceneConfig) {
    let s = generate_scene(cfg).unwrap();
    save_bundle(dir, &s.bundle, &s.gt).unwrap();
}

fn manifest(dir: &Path) -> String {
    fs::read_to_string(dir.join(MANIFEST_NAME)).unwrap()
}

#[test]
fn bundle_round_trip_for_every_offset_kind() {
    for model in [OffsetModel::Point, OffsetModel::Gaussian, OffsetModel::Samples(3)] {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SceneConfig {
            offset_model: model,
            offset_sigma: 1.0,
            flip_rate: 0.1,
            seed: 4,
            ..Default::default()
        };
        let s = generate_scene(&cfg).unwrap();
        save_bundle(dir.path(), &s.bundle, &s.gt).unwrap();
        let (b, gt) = load_bundle(dir.path()).unwrap();
        assert_eq!(b, s.bundle);
        assert_eq!(gt, s.gt);
    }
}

#[test]
fn missing_manifest_names_directory() {
    let dir = tempfile::tempdir().unwrap();
    let err = load_bundle(dir.path()).unwrap_err();
    assert!(matches!(err, BundleError::MissingManifest(_)));
    assert!(err.to_string().contains(&dir.path().display().to_string()));
}

#[test]
fn heatmap_offsets_shape_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    write_scene(dir.path(), &SceneConfig::default());
    let big = Tensor::from_f64(&Array2::<f64>::zeros((64, 64))).unwrap();
    let small = Tensor::from_f64(&Array3::<f64>::zeros((32, 32, 2))).unwrap();
    write_tensor(&big, dir.path().join("heatmap.ppdl")).unwrap();
    write_tensor(&small, dir.path().join("offsets.ppdl")).unwrap();
    match load_bundle(dir.path()).unwrap_err() {
        BundleError::ShapeMismatch { a, a_shape, b, b_shape } => {
            assert_eq!((a.as_str(), a_shape), ("heatmap", vec![64, 64]));
            assert_eq!((b.as_str(), b_shape), ("offsets", vec![32, 32, 2]));
        }
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn manifest_errors() {
    let dir = tempfile::tempdir().unwrap();
    write_scene(dir.path(), &SceneConfig::default());
    let original = manifest(dir.path());
    let path = dir.path().join(MANIFEST_NAME);

    fs::write(&path, format!("{original}heatmap=heatmap.ppdl\n")).unwrap();
    assert!(matches!(load_bundle(dir.path()), Err(BundleError::Ambiguous(_))));

    fs::write(&path, format!("{original}colour=blue\n")).unwrap();
    assert!(matches!(load_bundle(dir.path()), Err(BundleError::InvalidManifest { .. })));

    let without: String = original.lines().filter(|l| !l.starts_with("offsets=")).map(|l| format!("{l}\n")).collect();
    fs::write(&path, without).unwrap();
    assert!(matches!(load_bundle(dir.path()), Err(BundleError::MissingComponent(_))));

    fs::write(&path, &original).unwrap();
    fs::remove_file(dir.path().join("semantic.ppdl")).unwrap();
    assert!(matches!(load_bundle(dir.path()), Err(BundleError::MissingComponent(_))));
}

#[test]
fn corrupt_component_reports_tensor_error() {
    let dir = tempfile::tempdir().unwrap();
    write_scene(dir.path(), &SceneConfig::default());
    let p = dir.path().join("heatmap.ppdl");
    let mut bytes = fs::read(&p).unwrap();
    bytes[0] = b'X';
    fs::write(&p, bytes).unwrap();
    match load_bundle(dir.path()).unwrap_err() {
        BundleError::Tensor { source, .. } => assert!(matches!(source, TensorError::BadMagic(_))),
        e => panic!("unexpected {e}"),
    }
}

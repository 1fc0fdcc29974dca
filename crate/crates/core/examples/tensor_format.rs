//! Write a tensor and a full prediction bundle to disk, then read them back.
//!
//! `cargo run --example tensor_format`

use ndarray::Array3;
use panu::synth::{generate_scene, OffsetModel, SceneConfig};
use panu::tensor_io::{load_bundle, read_tensor, save_bundle, write_tensor, Tensor, MANIFEST_NAME};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;

    let logits = Array3::from_shape_fn((2, 3, 4), |(y, x, c)| (y * 12 + x * 4 + c) as f64 * 0.25);
    let path = dir.path().join("logits.ppdl");
    write_tensor(&Tensor::from_f64(&logits)?, &path)?;
    let back = read_tensor(&path)?;
    println!("{}: shape {:?}, dtype {:?}, {} bytes", path.display(), back.shape(), back.dtype(), std::fs::metadata(&path)?.len());
    assert_eq!(back.to_array3_f64()?, logits);

    let scene = generate_scene(&SceneConfig {
        offset_model: OffsetModel::Samples(4),
        offset_sigma: 1.0,
        ..Default::default()
    })?;
    let bundle_dir = dir.path().join("scene");
    save_bundle(&bundle_dir, &scene.bundle, &scene.gt)?;
    println!("\n{}:\n{}", MANIFEST_NAME, std::fs::read_to_string(bundle_dir.join(MANIFEST_NAME))?);
    let (bundle, gt) = load_bundle(&bundle_dir)?;
    assert_eq!(bundle, scene.bundle);
    assert_eq!(gt, scene.gt);
    println!("bundle round trip ok: offsets {:?}, things {:?}", bundle.offsets.kind(), bundle.thing_ids);
    Ok(())
}

//! Decode a noisy synthetic bundle: center detection, pixel grouping,
//! class voting and the three uncertainty maps.

use panu::synth::{generate_scene, OffsetModel, SceneConfig};
use panu::{run_pipeline, PipelineConfig, VarianceNormalizer};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let scene = generate_scene(&SceneConfig {
        height: 48,
        width: 48,
        num_instances: 4,
        flip_rate: 0.1,
        offset_model: OffsetModel::Gaussian,
        offset_sigma: 1.0,
        spurious_centers: 1,
        seed: 11,
        ..Default::default()
    })?;
    // a fixed scale; the per-bundle default maps this constant-variance field to 1
    let config = PipelineConfig {
        variance_normalizer: Some(VarianceNormalizer::new(8.0)?),
        ..Default::default()
    };
    let out = run_pipeline(&scene.bundle, &config)?;

    println!("true centers: {:?}", scene.centers);
    for (k, c) in out.centers.iter().enumerate() {
        let area = out.panoptic.instance_id.iter().filter(|&&i| i as usize == k + 1).count();
        println!("instance {}: center ({}, {}) score {:.2}, {area} px", k + 1, c.y, c.x, c.score);
    }
    let mean = |m: &panu::UncertaintyMap| m.values().mean().unwrap_or(0.0);
    println!("mean uncertainty: semantic {:.3}, spatial {:.3}, total {:.3}",
        mean(&out.unc_sem), out.unc_spa.as_ref().map_or(0.0, mean), mean(&out.unc_total));

    // coarse rendering of instance ids, one character per 2x2 block
    for y in (0..48).step_by(2) {
        let row: String = (0..48)
            .step_by(2)
            .map(|x| match out.panoptic.instance_id[[y, x]] {
                0 => '.',
                i => char::from_digit(i % 36, 36).unwrap_or('#'),
            })
            .collect();
        println!("{row}");
    }
    Ok(())
}

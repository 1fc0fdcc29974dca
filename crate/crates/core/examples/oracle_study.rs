//! Replace predicted components with ground truth to see which branch limits
//! panoptic quality.
//!
//! `cargo run --release --example oracle_study`

use panu::metrics::{evaluate_image, EvalConfig, OracleOptions};
use panu::synth::{generate_scene, SceneConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let noisy = SceneConfig {
        height: 96,
        width: 96,
        num_instances: 8,
        flip_rate: 0.3,
        offset_sigma: 2.0,
        center_jitter: 2.0,
        spurious_centers: 3,
        ..Default::default()
    };
    let scenes: Vec<_> = (0..20)
        .map(|seed| generate_scene(&SceneConfig { seed, ..noisy.clone() }))
        .collect::<Result<_, _>>()?;

    println!("{:<8}{:<10}{:<9}{:>8}", "centers", "semantics", "offsets", "mean PQ");
    for bits in 0..8u8 {
        let oracle = OracleOptions {
            centers: bits & 1 != 0,
            semantics: bits & 2 != 0,
            offsets: bits & 4 != 0,
        };
        let config = EvalConfig { oracle, ..Default::default() };
        let mut pq = 0.0;
        for s in &scenes {
            pq += evaluate_image(&s.bundle, &s.gt, &config, 0)?.overall.pq;
        }
        let mark = |b: bool| if b { "gt" } else { "pred" };
        println!(
            "{:<8}{:<10}{:<9}{:>8.4}",
            mark(oracle.centers),
            mark(oracle.semantics),
            mark(oracle.offsets),
            pq / scenes.len() as f64
        );
    }
    Ok(())
}

//! Fit a temperature on overconfident logits and compare calibration before
//! and after.
//!
//! `cargo run --release --example temperature_scaling`

use panu::metrics::logit_uece;
use panu::semantic::{cross_entropy, fit_temperature, CalibrationConfig};
use panu::synth::{generate_scene, CalibrationMode, SceneConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    for mode in [CalibrationMode::Perfect, CalibrationMode::Overconfident(10.0), CalibrationMode::Underconfident(3.0)] {
        let scene = generate_scene(&SceneConfig {
            height: 160,
            width: 160,
            flip_rate: 0.2,
            calibration: mode,
            ..Default::default()
        })?;
        let z = scene.bundle.semantic.values();
        let (h, w, c) = z.dim();
        let z = z.to_shape((h * w, c))?;
        let labels: Vec<usize> = scene.gt.semantic().iter().map(|&v| v as usize).collect();

        let fit = fit_temperature(z.view(), &labels, &CalibrationConfig::default())?;
        println!(
            "{mode:?}: T = {:.3} ({} steps), NLL {:.4} -> {:.4}, uECE {:.4} -> {:.4}",
            fit.temperature,
            fit.steps,
            fit.initial_loss,
            cross_entropy(z.view(), &labels, fit.temperature)?,
            logit_uece(z.view(), &labels, 1.0, 10)?,
            logit_uece(z.view(), &labels, fit.temperature, 10)?,
        );
    }
    Ok(())
}

//! Panoptic quality and the calibration family on one scene, plus a
//! reliability table for the pooled pECE bins.

use panu::metrics::{evaluate_image, ConfigEcho, EvalConfig, MetricReport};
use panu::synth::{generate_scene, CalibrationMode, OffsetModel, SceneConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let config = EvalConfig::default();
    for mode in [CalibrationMode::Perfect, CalibrationMode::Overconfident(4.0)] {
        let scene = generate_scene(&SceneConfig {
            height: 128,
            width: 128,
            num_instances: 8,
            flip_rate: 0.15,
            calibration: mode,
            offset_model: OffsetModel::Samples(8),
            offset_sigma: 1.0,
            seed: 2,
            ..Default::default()
        })?;
        let ev = evaluate_image(&scene.bundle, &scene.gt, &config, 0)?;
        let r = MetricReport::pool(&[ev], &[], ConfigEcho::new(&config, vec![], false));
        println!("{mode:?}");
        println!("  PQ {:.3} = SQ {:.3} x RQ {:.3}  (tp {} fp {} fn {})", r.pq, r.sq, r.rq, r.counts.tp, r.counts.fp, r.counts.fn_);
        let f = |v: Option<f64>| v.map_or("n/a".into(), |v| format!("{v:.4}"));
        println!("  uECE {}  pECE {}  pECE_spa {}  pECE_sem {}", f(r.uece), f(r.pece), f(r.pece_spa), f(r.pece_sem));
        println!("  energy score {}  offset rmse {}", f(r.energy_score), f(r.offset_rmse));
        println!("  pECE bins:");
        for b in r.bins.pece.iter().filter(|b| b.count > 0) {
            println!(
                "    ({:.1}, {:.1}] n {:>6}  acc {:.3}  conf {:.3}",
                b.lower,
                b.upper,
                b.count,
                b.accuracy.unwrap_or(0.0),
                b.confidence.unwrap_or(0.0)
            );
        }
    }
    Ok(())
}

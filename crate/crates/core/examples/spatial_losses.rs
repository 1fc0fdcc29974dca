//! Probabilistic offset heads: Gaussian NLL, the energy score on samples,
//! and the spatial uncertainty each one yields.

use ndarray::{Array2, Array3};
use panu::spatial::{
    energy_score_loss, gaussian_nll_loss, sample_gaussian_offsets, spatial_uncertainty_from_samples,
    spatial_uncertainty_from_variance,
};
use panu::{OffsetField, Reduction, VarianceNormalizer};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (h, w) = (4, 4);
    let gt = Array3::from_shape_fn((h, w, 2), |(y, x, a)| if a == 0 { 2.0 - x as f64 } else { 2.0 - y as f64 });
    let mask = Array2::from_elem((h, w), true);
    let normalizer = VarianceNormalizer::new(8.0)?;

    println!("Gaussian head, mean = truth:");
    for var in [0.25, 1.0, 4.0] {
        let field = OffsetField::Gaussian {
            mean: gt.clone(),
            var: Array3::from_elem((h, w, 2), var),
        };
        let nll = gaussian_nll_loss(&field, gt.view(), mask.view(), Reduction::Mean)?;
        let unc = spatial_uncertainty_from_variance(&field, &normalizer)?;
        println!("  var {var:<4} nll {:+.4}  dL/dvar {:+.4}  u_spa {:.3}", nll.loss, nll.grad_var[[0, 0, 0]], unc.values()[[0, 0]]);
    }

    println!("sample head, 8 draws per pixel:");
    for (label, shift) in [("centered", 0.0), ("biased by 2 px", 2.0)] {
        let field = OffsetField::Gaussian {
            mean: gt.mapv(|v| v + shift),
            var: Array3::ones((h, w, 2)),
        };
        let samples = sample_gaussian_offsets(&field, 8, 7)?;
        let es = energy_score_loss(&samples, gt.view(), mask.view(), Reduction::Mean)?;
        let unc = spatial_uncertainty_from_samples(&samples, &normalizer)?;
        println!("  {label:<15} energy score {:.4}  mean u_spa {:.3}", es.loss, unc.values().mean().unwrap_or(0.0));
    }
    Ok(())
}

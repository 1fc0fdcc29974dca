//! Evidential semantic head: raw outputs to a Dirichlet, its uncertainty,
//! and the two training losses with their gradients.

use ndarray::{Array2, Array3};
use panu::semantic::{anneal_coefficient, dirichlet_from_evidence, dirichlet_quantities, edl_loss, kl_regularizer};
use panu::Reduction;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // three pixels, three classes: no evidence, strong evidence, conflict
    let raw = Array3::from_shape_vec((1, 3, 3), vec![-20.0, -20.0, -20.0, 30.0, -5.0, -5.0, 8.0, 8.0, -5.0])?;
    let alpha = dirichlet_from_evidence(&raw)?;
    let q = dirichlet_quantities(&alpha);
    for x in 0..3 {
        println!(
            "pixel {x}: alpha {:.3?} strength {:.2} u {:.3} p {:.3?}",
            alpha.alpha().slice(ndarray::s![0, x, ..]).to_vec(),
            q.strength[[0, x]],
            q.uncertainty[[0, x]],
            q.probs.values().slice(ndarray::s![0, x, ..]).to_vec(),
        );
    }

    let labels = Array2::from_shape_vec((1, 3), vec![0, 0, 1])?;
    let mask = Array2::from_elem((1, 3), true);
    let fit = edl_loss(&alpha, labels.view(), mask.view(), Reduction::Mean)?;
    println!("\nedl loss {:.4}, d/dalpha at pixel 2 {:.4?}", fit.loss, fit.grad.slice(ndarray::s![0, 2, ..]).to_vec());
    for epoch in [0, 3, 6, 20] {
        let lambda = anneal_coefficient(epoch);
        let kl = kl_regularizer(&alpha, labels.view(), lambda, mask.view(), Reduction::Mean)?;
        println!("epoch {epoch:>2}: lambda {lambda:.3}, KL term {:.5}", kl.loss);
    }
    Ok(())
}

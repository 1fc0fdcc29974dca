//! Central finite-difference verification of the analytic loss gradients.

use std::fmt;

use ndarray::{Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::semantic::{edl_loss, kl_regularizer, DirichletMap};
use crate::spatial::{energy_score_loss, gaussian_nll_loss, OffsetField};
use crate::{ClassId, Reduction};

/// Central-difference step.
pub const STEP: f64 = 1e-5;
/// Gradients smaller than this are compared in absolute terms.
pub const MAGNITUDE_FLOOR: f64 = 1e-6;
/// Minimum distance between energy-score samples and to the target, away
/// from the kink of the Euclidean norm.
pub const MIN_SAMPLE_DISTANCE: f64 = 0.05;

const H: usize = 2;
const W: usize = 3;
const CLASSES: usize = 4;
const SAMPLES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kernel {
    Edl,
    Kl,
    GaussianNll,
    EnergyScore,
}

impl Kernel {
    pub const ALL: [Kernel; 4] = [Kernel::Edl, Kernel::Kl, Kernel::GaussianNll, Kernel::EnergyScore];

    pub fn name(self) -> &'static str {
        match self {
            Kernel::Edl => "edl_loss",
            Kernel::Kl => "kl_regularizer",
            Kernel::GaussianNll => "gaussian_nll_loss",
            Kernel::EnergyScore => "energy_score_loss",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelCheck {
    pub kernel: Kernel,
    pub cases: usize,
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub seed: u64,
    pub tolerance: f64,
    pub checks: Vec<KernelCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "gradcheck seed={} tolerance={:e} step={:e}", self.seed, self.tolerance, STEP)?;
        writeln!(f, "{:<20} {:>6} {:>8} {:>14}  result", "kernel", "cases", "coords", "max_rel_err")?;
        for c in &self.checks {
            writeln!(
                f,
                "{:<20} {:>6} {:>8} {:>14.3e}  {}",
                c.kernel.name(),
                c.cases,
                c.coordinates,
                c.max_rel_error,
                if c.passed { "PASS" } else { "FAIL" }
            )?;
        }
        write!(f, "overall: {}", if self.passed() { "PASS" } else { "FAIL" })
    }
}

/// `|a − b| / max(|a|, |b|, MAGNITUDE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR)
}

/// Max relative error between `grad` and central differences of `loss`
/// over every coordinate of `x`.
fn compare(x: &[f64], grad: &[f64], loss: impl Fn(&[f64]) -> f64) -> f64 {
    let mut xp = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        xp[i] = x[i] + STEP;
        let up = loss(&xp);
        xp[i] = x[i] - STEP;
        let down = loss(&xp);
        xp[i] = x[i];
        worst = worst.max(relative_error(grad[i], (up - down) / (2.0 * STEP)));
    }
    worst
}

fn labels_and_mask(rng: &mut ChaCha8Rng) -> (Array2<ClassId>, Array2<bool>) {
    let labels = Array2::from_shape_fn((H, W), |_| rng.gen_range(0..CLASSES as ClassId));
    let mut mask = Array2::from_shape_fn((H, W), |_| rng.gen_bool(0.8));
    mask[[0, 0]] = true;
    (labels, mask)
}

fn check_case(kernel: Kernel, rng: &mut ChaCha8Rng) -> (f64, usize) {
    match kernel {
        Kernel::Edl | Kernel::Kl => {
            let alpha = Array3::from_shape_fn((H, W, CLASSES), |_| rng.gen_range(1.05..12.0));
            let (labels, mask) = labels_and_mask(rng);
            let lambda = rng.gen_range(0.01..1.0);
            let eval = |a: &[f64]| {
                let map = DirichletMap::new(Array3::from_shape_vec((H, W, CLASSES), a.to_vec()).expect("sized"))
                    .expect("alpha stays above 1");
                match kernel {
                    Kernel::Edl => edl_loss(&map, labels.view(), mask.view(), Reduction::Mean),
                    _ => kl_regularizer(&map, labels.view(), lambda, mask.view(), Reduction::Mean),
                }
                .expect("valid inputs")
            };
            let x = alpha.into_raw_vec_and_offset().0;
            let g = eval(&x).grad.into_raw_vec_and_offset().0;
            (compare(&x, &g, |a| eval(a).loss), x.len())
        }
        Kernel::GaussianNll => {
            let mean = Array3::from_shape_fn((H, W, 2), |_| rng.gen_range(-5.0..5.0));
            let var = Array3::from_shape_fn((H, W, 2), |_| rng.gen_range(0.1..5.0));
            let gt = Array3::from_shape_fn((H, W, 2), |_| rng.gen_range(-5.0..5.0));
            let (_, mask) = labels_and_mask(rng);
            let n = H * W * 2;
            let eval = |p: &[f64]| {
                let field = OffsetField::Gaussian {
                    mean: Array3::from_shape_vec((H, W, 2), p[..n].to_vec()).expect("sized"),
                    var: Array3::from_shape_vec((H, W, 2), p[n..].to_vec()).expect("sized"),
                };
                gaussian_nll_loss(&field, gt.view(), mask.view(), Reduction::Mean).expect("valid inputs")
            };
            let mut x = mean.into_raw_vec_and_offset().0;
            x.extend(var.into_raw_vec_and_offset().0);
            let r = eval(&x);
            let mut g = r.grad_mean.into_raw_vec_and_offset().0;
            g.extend(r.grad_var.into_raw_vec_and_offset().0);
            (compare(&x, &g, |p| eval(p).loss), x.len())
        }
        Kernel::EnergyScore => {
            let gt = Array3::from_shape_fn((H, W, 2), |_| rng.gen_range(-3.0..3.0));
            let mut samples = Array4::zeros((H, W, SAMPLES, 2));
            for y in 0..H {
                for x in 0..W {
                    let target = [gt[[y, x, 0]], gt[[y, x, 1]]];
                    let mut placed: Vec<[f64; 2]> = Vec::new();
                    while placed.len() < SAMPLES {
                        let s = [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)];
                        let far = |o: &[f64; 2]| (s[0] - o[0]).hypot(s[1] - o[1]) >= MIN_SAMPLE_DISTANCE;
                        if far(&target) && placed.iter().all(far) {
                            placed.push(s);
                        }
                    }
                    for (j, s) in placed.iter().enumerate() {
                        samples[[y, x, j, 0]] = s[0];
                        samples[[y, x, j, 1]] = s[1];
                    }
                }
            }
            let (_, mask) = labels_and_mask(rng);
            let eval = |p: &[f64]| {
                let field = OffsetField::Samples(Array4::from_shape_vec((H, W, SAMPLES, 2), p.to_vec()).expect("sized"));
                energy_score_loss(&field, gt.view(), mask.view(), Reduction::Mean).expect("valid inputs")
            };
            let x = samples.into_raw_vec_and_offset().0;
            let g = eval(&x).grad_samples.into_raw_vec_and_offset().0;
            (compare(&x, &g, |p| eval(p).loss), x.len())
        }
    }
}

/// Check one kernel on `cases` random inputs drawn from stream `kernel` of `seed`.
pub fn check_kernel(kernel: Kernel, seed: u64, cases: usize, tolerance: f64) -> KernelCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(kernel as u64);
    let mut worst = 0.0f64;
    let mut coordinates = 0;
    for _ in 0..cases {
        let (err, n) = check_case(kernel, &mut rng);
        worst = worst.max(err);
        coordinates += n;
    }
    KernelCheck {
        kernel,
        cases,
        coordinates,
        max_rel_error: worst,
        passed: worst < tolerance,
    }
}

/// Check all four kernels.
pub fn run_gradcheck(seed: u64, cases: usize, tolerance: f64) -> GradcheckReport {
    GradcheckReport {
        seed,
        tolerance,
        checks: Kernel::ALL
            .iter()
            .map(|&k| check_kernel(k, seed, cases, tolerance))
            .collect(),
    }
}

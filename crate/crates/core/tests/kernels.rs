//! Invariants of the semantic and spatial kernels.

use ndarray::{Array2, Array3, Array4};
use panu::postprocess::{assign_pixels, assign_pixels_multisample, find_centers, total_uncertainty, CenterList};
use panu::semantic::{
    cross_entropy, dirichlet_quantities, fit_temperature, kl_regularizer, semantic_uncertainty, softmax_with_temperature,
    CalibrationConfig, DirichletMap, SemanticInput,
};
use panu::spatial::{energy_score, sample_gaussian_offsets, OffsetField};
use panu::{PostprocessConfig, Reduction, UncertaintyMap, UncertaintyMode};
use proptest::prelude::*;

proptest! {
    #[test]
    fn temperature_preserves_argmax(z in prop::collection::vec(-30.0f64..30.0, 12), t in 0.05f64..50.0) {
        let z = Array3::from_shape_vec((1, 3, 4), z).unwrap();
        let a = softmax_with_temperature(z.view(), 1.0).unwrap().argmax();
        let b = softmax_with_temperature(z.view(), t).unwrap().argmax();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn kl_is_non_negative(alpha in prop::collection::vec(1.0f64..40.0, 5), y in 0u32..5, lambda in 0.0f64..1.0) {
        let map = DirichletMap::new(Array3::from_shape_vec((1, 1, 5), alpha).unwrap()).unwrap();
        let r = kl_regularizer(&map, Array2::from_elem((1, 1), y).view(), lambda, Array2::from_elem((1, 1), true).view(), Reduction::Sum).unwrap();
        prop_assert!(r.loss >= -1e-12, "KL = {}", r.loss);
    }

    #[test]
    fn evidential_uncertainty_decreases_with_evidence(alpha in prop::collection::vec(1.0f64..20.0, 4), k in 0usize..4, extra in 0.01f64..10.0) {
        let a = Array3::from_shape_vec((1, 1, 4), alpha).unwrap();
        let mut b = a.clone();
        b[[0, 0, k]] += extra;
        let ua = dirichlet_quantities(&DirichletMap::new(a).unwrap()).uncertainty[[0, 0]];
        let ub = dirichlet_quantities(&DirichletMap::new(b).unwrap()).uncertainty[[0, 0]];
        prop_assert!(ub < ua);
        prop_assert!(ub > 0.0 && ua <= 1.0);
    }

    #[test]
    fn semantic_uncertainty_in_unit_interval(z in prop::collection::vec(-50.0f64..50.0, 24)) {
        let z = Array3::from_shape_vec((2, 3, 4), z).unwrap();
        let p = softmax_with_temperature(z.view(), 1.0).unwrap();
        for mode in [UncertaintyMode::Mcp, UncertaintyMode::Entropy] {
            let u = semantic_uncertainty(SemanticInput::Probs(&p), mode).unwrap();
            prop_assert!(u.values().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn energy_score_non_negative(s in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..8), t in (-10.0f64..10.0, -10.0f64..10.0)) {
        let s: Vec<[f64; 2]> = s.into_iter().map(|(a, b)| [a, b]).collect();
        prop_assert!(energy_score(&s, [t.0, t.1]) >= -1e-12);
    }

    #[test]
    fn total_uncertainty_is_monotone(a in prop::collection::vec(0.0f64..=1.0, 6), b in prop::collection::vec(0.0f64..=1.0, 6), bump in 0.0f64..0.5) {
        let spa = UncertaintyMap::new(Array2::from_shape_vec((2, 3), a).unwrap()).unwrap();
        let sem = UncertaintyMap::new(Array2::from_shape_vec((2, 3), b).unwrap()).unwrap();
        let t = total_uncertainty(Some(&spa), &sem).unwrap();
        let spa2 = UncertaintyMap::new(spa.values().mapv(|v| (v + bump).min(1.0))).unwrap();
        let t2 = total_uncertainty(Some(&spa2), &sem).unwrap();
        for ((x, y), (s, m)) in t.values().iter().zip(t2.values()).zip(spa.values().iter().zip(sem.values())) {
            prop_assert!(y >= x);
            prop_assert!(*x >= *s && *x >= *m);
        }
    }

    #[test]
    fn one_sample_grouping_equals_point_grouping(off in prop::collection::vec(-8.0f64..8.0, 2 * 12 * 12), seed in 0u64..1000) {
        let h = 12;
        let point = Array3::from_shape_vec((h, h, 2), off).unwrap();
        let samples = point.clone().into_shape_with_order((h, h, 1, 2)).unwrap();
        let mut hm = Array2::zeros((h, h));
        hm[[(seed % 12) as usize, 2]] = 0.9;
        hm[[3, 9]] = 0.8;
        hm[[10, (seed % 7) as usize + 4]] = 0.7;
        let centers = find_centers(hm.view(), &PostprocessConfig { nms_kernel: 3, ..Default::default() });
        let mask = Array2::from_shape_fn((h, h), |(y, x)| !(y + x + seed as usize).is_multiple_of(3));
        let a = assign_pixels(&OffsetField::Point(point), &centers, mask.view()).unwrap();
        let b = assign_pixels_multisample(&OffsetField::Samples(samples), &centers, mask.view()).unwrap();
        prop_assert_eq!(a, b);
    }
}

/// Brute-force NMS: a pixel is a center iff no pixel in its window beats it.
fn brute_centers(hm: &Array2<f64>, cfg: &PostprocessConfig) -> Vec<(usize, usize)> {
    let (h, w) = hm.dim();
    let r = (cfg.nms_kernel / 2) as i64;
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let v = hm[[y, x]];
            if v < cfg.heatmap_threshold {
                continue;
            }
            let mut peak = true;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (qy, qx) = (y as i64 + dy, x as i64 + dx);
                    if (dy, dx) == (0, 0) || qy < 0 || qx < 0 || qy >= h as i64 || qx >= w as i64 {
                        continue;
                    }
                    let q = hm[[qy as usize, qx as usize]];
                    let earlier = (qy as usize, qx as usize) < (y, x);
                    if q > v || (q == v && earlier) {
                        peak = false;
                    }
                }
            }
            if peak {
                out.push((y, x));
            }
        }
    }
    out
}

proptest! {
    #[test]
    fn nms_matches_brute_force(v in prop::collection::vec(0u8..6, 15 * 13), kernel in prop::sample::select(vec![1usize, 3, 5, 7])) {
        // coarse levels force plateaus and ties
        let hm = Array2::from_shape_vec((15, 13), v.into_iter().map(|q| q as f64 / 5.0).collect()).unwrap();
        let cfg = PostprocessConfig { nms_kernel: kernel, heatmap_threshold: 0.3, top_k: 10_000 };
        let mut got: Vec<_> = find_centers(hm.view(), &cfg).iter().map(|c| (c.y, c.x)).collect();
        got.sort();
        prop_assert_eq!(got, brute_centers(&hm, &cfg));
    }
}

#[test]
fn top_k_keeps_highest_scores() {
    let mut hm = Array2::zeros((20, 20));
    for (i, (y, x)) in [(2, 2), (2, 12), (12, 2), (12, 12), (17, 17)].into_iter().enumerate() {
        hm[[y, x]] = 0.5 + i as f64 * 0.1;
    }
    let c: CenterList = find_centers(hm.view(), &PostprocessConfig { top_k: 2, ..Default::default() });
    let got: Vec<_> = c.iter().map(|c| (c.y, c.x)).collect();
    assert_eq!(got, vec![(17, 17), (12, 12)]);
}

/// Logits whose softmax at temperature `k` reproduces calibrated
/// probabilities, plus labels drawn from them.
fn scaled_dump(n: usize, k: f64, seed: u64) -> (Array2<f64>, Vec<usize>) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let c = 4;
    let mut z = Array2::zeros((n, c));
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let p: f64 = rng.gen_range(0.3..1.0);
        let top = rng.gen_range(0..c);
        let label = if rng.gen_bool(p) { top } else { (top + rng.gen_range(1..c)) % c };
        for j in 0..c {
            let q = if j == top { p } else { (1.0 - p) / 3.0 };
            z[[i, j]] = k * q.ln();
        }
        y.push(label);
    }
    (z, y)
}

fn grid_optimum(z: &Array2<f64>, y: &[usize]) -> f64 {
    let mut best = (0.0, f64::INFINITY);
    for i in 1..=3000 {
        let t = i as f64 * 0.01;
        let l = cross_entropy(z.view(), y, t).unwrap();
        if l < best.1 {
            best = (t, l);
        }
    }
    best.0
}

#[test]
fn temperature_fit_calibrated_data_stays_near_one() {
    let (z, y) = scaled_dump(20_000, 1.0, 1);
    let fit = fit_temperature(z.view(), &y, &CalibrationConfig::default()).unwrap();
    assert!((fit.temperature - 1.0).abs() < 0.1, "T = {}", fit.temperature);
    // per-sample SGD jitters around the optimum, so the loss may not improve on T = 1
    assert!(fit.final_loss <= fit.initial_loss * (1.0 + 1e-3), "{fit:?}");
}

#[test]
fn temperature_fit_approaches_grid_optimum() {
    let (z, y) = scaled_dump(20_000, 5.0, 2);
    let fit = fit_temperature(z.view(), &y, &CalibrationConfig::default()).unwrap();
    let best = grid_optimum(&z, &y);
    assert!((fit.temperature - best).abs() / best < 0.1, "fit {} grid {best}", fit.temperature);
}

#[test]
fn gaussian_sampling_moments_within_clt_bound() {
    // 4096 pixels × 16 samples around μ = (1, -2), σ² = (4, 0.25)
    let (h, w, k) = (64, 64, 16);
    let mean = Array3::from_shape_fn((h, w, 2), |(_, _, a)| if a == 0 { 1.0 } else { -2.0 });
    let var = Array3::from_shape_fn((h, w, 2), |(_, _, a)| if a == 0 { 4.0 } else { 0.25 });
    let field = OffsetField::Gaussian { mean, var };
    let OffsetField::Samples(s) = sample_gaussian_offsets(&field, k, 99).unwrap() else {
        panic!("expected samples")
    };
    let n = (h * w * k) as f64;
    for (a, mu, v) in [(0, 1.0, 4.0), (1, -2.0, 0.25)] {
        let xs: Vec<f64> = s.slice(ndarray::s![.., .., .., a]).iter().copied().collect();
        let m = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        // 5 standard errors; var of the sample variance is 2σ⁴/(n-1)
        assert!((m - mu).abs() < 5.0 * (v / n).sqrt(), "axis {a} mean {m}");
        assert!((var - v).abs() < 5.0 * (2.0 * v * v / (n - 1.0)).sqrt(), "axis {a} var {var}");
    }
    let again = sample_gaussian_offsets(&field, k, 99).unwrap();
    assert_eq!(again, OffsetField::Samples(s));
}

#[test]
fn sample_field_grouping_rejects_point_field() {
    let p = OffsetField::Point(Array3::zeros((2, 2, 2)));
    let mask = Array2::from_elem((2, 2), true);
    assert!(assign_pixels_multisample(&p, &CenterList::default(), mask.view()).is_err());
    let s = OffsetField::Samples(Array4::zeros((2, 2, 1, 2)));
    assert!(assign_pixels(&s, &CenterList::default(), mask.view()).is_err());
}

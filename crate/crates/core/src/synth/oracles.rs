//! Deliberately naive reference implementations of the evaluation metrics.
//! No maps, no binning helpers: every quantity is recounted by a full scan.

use std::collections::BTreeSet;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::postprocess::PanopticMap;
use crate::tensor_io::GroundTruth;
use crate::ClassId;

type Seg = (ClassId, u32);

fn distinct(mut v: Vec<Seg>) -> Vec<Seg> {
    v.sort();
    v.dedup();
    v
}

/// Panoptic Quality by exhaustive pairwise IoU. Predicted thing pixels with
/// instance 0 and gt pixels labelled `ignore_label` are void.
pub fn brute_force_pq(pred: &PanopticMap, gt: &GroundTruth, ignore_label: ClassId, thing_ids: &BTreeSet<ClassId>) -> f64 {
    let (h, w) = gt.dim();
    let pred_at = |y: usize, x: usize| -> Option<Seg> {
        let (c, i) = (pred.class_id[[y, x]], pred.instance_id[[y, x]]);
        (!(i == 0 && thing_ids.contains(&c))).then_some((c, i))
    };
    let gt_at = |y: usize, x: usize| -> Option<Seg> {
        let c = gt.semantic()[[y, x]];
        (c != ignore_label).then_some((c, gt.instances()[[y, x]]))
    };
    let mut ps = Vec::new();
    let mut gs = Vec::new();
    for y in 0..h {
        for x in 0..w {
            ps.extend(pred_at(y, x));
            gs.extend(gt_at(y, x));
        }
    }
    let (ps, gs) = (distinct(ps), distinct(gs));

    let mut matched_pred = vec![false; ps.len()];
    let mut iou_sum = 0.0;
    let mut tp = 0usize;
    let mut fn_ = 0usize;
    for g in &gs {
        let mut hit = None;
        for (k, p) in ps.iter().enumerate() {
            if p.0 != g.0 {
                continue;
            }
            let (mut inter, mut p_area, mut p_void, mut g_area) = (0u64, 0u64, 0u64, 0u64);
            for y in 0..h {
                for x in 0..w {
                    let in_p = pred_at(y, x) == Some(*p);
                    let here = gt_at(y, x);
                    p_area += in_p as u64;
                    p_void += (in_p && here.is_none()) as u64;
                    g_area += (here == Some(*g)) as u64;
                    inter += (in_p && here == Some(*g)) as u64;
                }
            }
            let union = p_area - p_void + g_area - inter;
            let iou = inter as f64 / union as f64;
            if iou > 0.5 {
                hit = Some((k, iou));
            }
        }
        match hit {
            Some((k, iou)) => {
                matched_pred[k] = true;
                iou_sum += iou;
                tp += 1;
            }
            None => fn_ += 1,
        }
    }
    let mut fp = 0usize;
    for (k, p) in ps.iter().enumerate() {
        if matched_pred[k] {
            continue;
        }
        let (mut area, mut void) = (0u64, 0u64);
        for y in 0..h {
            for x in 0..w {
                if pred_at(y, x) == Some(*p) {
                    area += 1;
                    void += gt_at(y, x).is_none() as u64;
                }
            }
        }
        if 2 * void <= area {
            fp += 1;
        }
    }
    let denom = tp as f64 + 0.5 * fp as f64 + 0.5 * fn_ as f64;
    if denom == 0.0 {
        0.0
    } else {
        iou_sum / denom
    }
}

/// Pixel calibration error: for each bin, rescan all pixels.
pub fn brute_force_uece(bits: &[bool], conf: &[f64], r: usize) -> f64 {
    let n = bits.len();
    let mut e = 0.0;
    for b in 0..r {
        let lo = b as f64 / r as f64;
        let hi = (b + 1) as f64 / r as f64;
        let (mut count, mut correct, mut conf_sum) = (0usize, 0usize, 0.0);
        for i in 0..n {
            let c = conf[i];
            let above = c > lo || b == 0;
            let below = c <= hi || b == r - 1;
            if above && below {
                count += 1;
                correct += bits[i] as usize;
                conf_sum += c;
            }
        }
        if count > 0 {
            let nb = count as f64;
            e += nb / n as f64 * (correct as f64 / nb - conf_sum / nb).abs();
        }
    }
    e
}

/// A random gt/prediction pair built from 4×4 blocks with 2×2 perturbations.
/// Classes `0, 1` are stuff, `2, 3` things, `255` ignore.
pub fn random_panoptic_pair(size: usize, seed: u64) -> (PanopticMap, GroundTruth, BTreeSet<ClassId>) {
    const IGNORE: ClassId = 255;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let things: BTreeSet<ClassId> = [2, 3].into_iter().collect();
    let blocks = size.div_ceil(4);
    let mut block_label = Vec::with_capacity(blocks * blocks);
    for _ in 0..blocks * blocks {
        let c: ClassId = if rng.gen_bool(0.05) { IGNORE } else { rng.gen_range(0..4) };
        let i = if things.contains(&c) { rng.gen_range(1..=3) } else { 0 };
        block_label.push((c, i));
    }
    let gc = Array2::from_shape_fn((size, size), |(y, x)| block_label[(y / 4) * blocks + x / 4].0);
    let gi = Array2::from_shape_fn((size, size), |(y, x)| block_label[(y / 4) * blocks + x / 4].1);
    let mut pc = gc.mapv(|c| if c == IGNORE { rng.gen_range(0..4) } else { c });
    let mut pi = Array2::from_shape_fn((size, size), |(y, x)| {
        if things.contains(&pc[[y, x]]) {
            gi[[y, x]].max(1)
        } else {
            0
        }
    });
    let half = size.div_ceil(2);
    for _ in 0..rng.gen_range(0..=half * half / 2) {
        let (by, bx) = (rng.gen_range(0..half) * 2, rng.gen_range(0..half) * 2);
        let c: ClassId = rng.gen_range(0..4);
        // instance 0 on a thing class leaves the pixels unassigned
        let i = if things.contains(&c) { rng.gen_range(0..=3) } else { 0 };
        for y in by..(by + 2).min(size) {
            for x in bx..(bx + 2).min(size) {
                pc[[y, x]] = c;
                pi[[y, x]] = i;
            }
        }
    }
    let gt = GroundTruth::new(gc, gi).expect("same shape");
    (
        PanopticMap {
            class_id: pc,
            instance_id: pi,
        },
        gt,
        things,
    )
}

//! Brute-force reference implementations and the randomized suite that
//! compares them with the fast paths.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::Serialize;

use crate::eval3d::{ap_from_matches, iou3d, match_class, Detection};
use crate::graph::Mat;
use crate::protobank::{assign_features, GeometricPrototypeBank};
use crate::synthdata::Box3D;

/// Overlap length of two intervals by summing the elementary pieces between
/// the sorted endpoints that both intervals cover.
fn covered_by_both(a: (f64, f64), b: (f64, f64)) -> f64 {
    let mut cuts = [a.0, a.1, b.0, b.1];
    cuts.sort_by(f64::total_cmp);
    let mut total = 0.0;
    for w in cuts.windows(2) {
        let mid = 0.5 * (w[0] + w[1]);
        let inside = |iv: (f64, f64)| iv.0 <= mid && mid <= iv.1;
        if inside(a) && inside(b) {
            total += w[1] - w[0];
        }
    }
    total
}

pub fn iou3d_oracle(a: &Box3D, b: &Box3D) -> f64 {
    let mut inter = 1.0;
    let (amin, amax, bmin, bmax) = (
        a.min_corner(),
        a.max_corner(),
        b.min_corner(),
        b.max_corner(),
    );
    for k in 0..3 {
        inter *= covered_by_both((amin[k], amax[k]), (bmin[k], bmax[k]));
    }
    let va: f64 = (0..3).map(|k| amax[k] - amin[k]).product();
    let vb: f64 = (0..3).map(|k| bmax[k] - bmin[k]).product();
    inter / (va + vb - inter)
}

/// AP of one class in one scene: selection-order matching followed by a
/// quadratic interpolated-precision sum.
pub fn average_precision_oracle(
    detections: &[Detection],
    gts: &[Box3D],
    class_id: usize,
    threshold: f64,
) -> Option<f64> {
    let gts: Vec<&Box3D> = gts.iter().filter(|b| b.class_id == class_id).collect();
    let mut remaining: Vec<(usize, &Detection)> = detections
        .iter()
        .enumerate()
        .filter(|(_, d)| d.class_id == class_id)
        .collect();
    if gts.is_empty() {
        return if remaining.is_empty() {
            None
        } else {
            Some(0.0)
        };
    }
    let mut taken = vec![false; gts.len()];
    let mut flags = Vec::new();
    while !remaining.is_empty() {
        // Highest score, earliest index among equals.
        let mut pick = 0;
        for (j, (idx, d)) in remaining.iter().enumerate() {
            let (bidx, bd) = remaining[pick];
            if d.score > bd.score || (d.score == bd.score && *idx < bidx) {
                pick = j;
            }
        }
        let (_, d) = remaining.remove(pick);
        let as_box = d.to_box();
        let mut best: Option<usize> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let better = match best {
                None => true,
                Some(b) => iou3d_oracle(&as_box, gt) > iou3d_oracle(&as_box, gts[b]),
            };
            if better {
                best = Some(g);
            }
        }
        let hit = best.filter(|&g| iou3d_oracle(&as_box, gts[g]) >= threshold);
        if let Some(g) = hit {
            taken[g] = true;
        }
        flags.push(hit.is_some());
    }
    let n = flags.len();
    let recall_at = |i: usize| flags[..=i].iter().filter(|&&f| f).count() as f64 / gts.len() as f64;
    let precision_at =
        |i: usize| flags[..=i].iter().filter(|&&f| f).count() as f64 / (i + 1) as f64;
    let mut ap = 0.0;
    for i in 0..n {
        let step = recall_at(i) - if i == 0 { 0.0 } else { recall_at(i - 1) };
        if step > 0.0 {
            let interp = (0..n)
                .filter(|&j| recall_at(j) >= recall_at(i))
                .map(precision_at)
                .fold(0.0, f64::max);
            ap += step * interp;
        }
    }
    Some(ap)
}

/// Exhaustive cosine argmax with explicitly normalized vectors.
pub fn assignment_oracle(features: &Mat, foreground: &[bool], bank: &Mat) -> Vec<i64> {
    let unit = |v: Vec<f64>| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 {
            v
        } else {
            v.into_iter().map(|x| x / n).collect()
        }
    };
    let protos: Vec<Vec<f64>> = bank.rows().into_iter().map(|r| unit(r.to_vec())).collect();
    features
        .rows()
        .into_iter()
        .zip(foreground)
        .map(|(f, &fg)| {
            if !fg {
                return -1;
            }
            let f = unit(f.to_vec());
            let scores: Vec<f64> = protos
                .iter()
                .map(|p| p.iter().zip(&f).map(|(a, b)| a * b).sum())
                .collect();
            let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            scores.iter().position(|&s| s == best).unwrap_or(0) as i64
        })
        .collect()
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct OracleReport {
    pub iou_instances: usize,
    pub iou_max_error: f64,
    pub ap_instances: usize,
    pub ap_max_error: f64,
    pub assign_instances: usize,
    pub assign_mismatches: usize,
}

impl OracleReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.iou_max_error <= tol && self.ap_max_error <= tol && self.assign_mismatches == 0
    }
}

/// A box with coordinates on a coarse grid, so exact ties and touching
/// faces appear regularly.
pub fn random_box(rng: &mut impl Rng, class_id: usize, instance_id: usize) -> Box3D {
    let grid = |rng: &mut dyn rand::RngCore, lo: i32, hi: i32| rng.gen_range(lo..=hi) as f64 * 0.25;
    let center = [grid(rng, 0, 12), grid(rng, 0, 12), grid(rng, 0, 4)];
    let size = [grid(rng, 1, 8), grid(rng, 1, 8), grid(rng, 1, 6)];
    Box3D::new(center, size, class_id, instance_id)
}

fn jitter(rng: &mut impl Rng, b: &Box3D, score: f64) -> Detection {
    let u = Uniform::new(-0.3, 0.3);
    let mut center = b.center;
    let mut size = b.size;
    for k in 0..3 {
        center[k] += u.sample(rng);
        size[k] = (size[k] * (1.0 + u.sample(rng))).max(0.05);
    }
    Detection {
        center,
        size,
        class_id: b.class_id,
        score,
    }
}

/// Compare fast paths and oracles on `instances` random cases of each kind.
pub fn run_oracle_suite(seed: u64, instances: usize, assign_instances: usize) -> OracleReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = OracleReport {
        iou_instances: instances,
        ap_instances: instances,
        assign_instances,
        ..Default::default()
    };
    for _ in 0..instances {
        let a = random_box(&mut rng, 0, 0);
        let b = random_box(&mut rng, 0, 1);
        report.iou_max_error = report
            .iou_max_error
            .max((iou3d(&a, &b) - iou3d_oracle(&a, &b)).abs());
    }
    for _ in 0..instances {
        let n_gt = rng.gen_range(0..5);
        let gts: Vec<Box3D> = (0..n_gt)
            .map(|i| {
                let c = rng.gen_range(0..2);
                random_box(&mut rng, c, i)
            })
            .collect();
        let mut dets = Vec::new();
        for g in &gts {
            for _ in 0..rng.gen_range(0..3) {
                let s = (rng.gen_range(0..10) as f64) / 10.0;
                dets.push(jitter(&mut rng, g, s));
            }
        }
        for _ in 0..rng.gen_range(0..4) {
            let c = rng.gen_range(0..2);
            let b = random_box(&mut rng, c, 99);
            let s = (rng.gen_range(0..10) as f64) / 10.0;
            dets.push(jitter(&mut rng, &b, s));
        }
        for class_id in 0..2 {
            for threshold in [0.25, 0.5] {
                let fast = ap_from_matches(&match_class(&[&dets], &[&gts], class_id, threshold));
                let slow = average_precision_oracle(&dets, &gts, class_id, threshold);
                let err = match (fast, slow) {
                    (None, None) => 0.0,
                    (Some(a), Some(b)) => (a - b).abs(),
                    _ => f64::INFINITY,
                };
                report.ap_max_error = report.ap_max_error.max(err);
            }
        }
    }
    for _ in 0..assign_instances {
        let w = rng.gen_range(1..20);
        let d = rng.gen_range(2..12);
        let m = rng.gen_range(1..60);
        let bank = GeometricPrototypeBank {
            prototypes: Array2::from_shape_fn((w, d), |_| StandardNormal.sample(&mut rng)),
            gamma: 0.9,
            usage_count: vec![0; w],
        };
        let features: Mat = Array2::from_shape_fn((m, d), |_| StandardNormal.sample(&mut rng));
        let fg: Vec<bool> = (0..m).map(|_| rng.gen_bool(0.7)).collect();
        let fast = assign_features(&features, &fg, &bank).labels;
        let slow = assignment_oracle(&features, &fg, &bank.prototypes);
        report.assign_mismatches += fast.iter().zip(&slow).filter(|(a, b)| a != b).count();
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interval_overlap_cases() {
        assert_eq!(covered_by_both((0.0, 1.0), (0.5, 2.0)), 0.5);
        assert_eq!(covered_by_both((0.0, 1.0), (2.0, 3.0)), 0.0);
        assert_eq!(covered_by_both((0.0, 4.0), (1.0, 2.0)), 1.0);
    }

    #[test]
    fn small_suite_agrees() {
        let r = run_oracle_suite(5, 50, 10);
        assert!(r.passed(1e-9), "{r:?}");
    }
}

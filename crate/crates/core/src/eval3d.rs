//! Axis-aligned 3D IoU, greedy matching and all-point average precision.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthdata::{Box3D, DatasetSplit, PointCloudScene, Vec3};

/// One scored box, as exported per scene by the detector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub center: Vec3,
    pub size: Vec3,
    pub class_id: usize,
    pub score: f64,
}

impl Detection {
    pub fn to_box(&self) -> Box3D {
        Box3D::new(self.center, self.size, self.class_id, 0)
    }
}

fn overlap_1d(a_min: f64, a_max: f64, b_min: f64, b_max: f64) -> f64 {
    (a_max.min(b_max) - a_min.max(b_min)).max(0.0)
}

/// Intersection over union of two axis-aligned boxes given by center and size.
pub fn iou_center_size(ca: &Vec3, sa: &Vec3, cb: &Vec3, sb: &Vec3) -> f64 {
    let mut inter = 1.0;
    for k in 0..3 {
        inter *= overlap_1d(
            ca[k] - sa[k] / 2.0,
            ca[k] + sa[k] / 2.0,
            cb[k] - sb[k] / 2.0,
            cb[k] + sb[k] / 2.0,
        );
    }
    let va = sa[0] * sa[1] * sa[2];
    let vb = sb[0] * sb[1] * sb[2];
    let union = va + vb - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

pub fn iou3d(a: &Box3D, b: &Box3D) -> f64 {
    iou_center_size(&a.center, &a.size, &b.center, &b.size)
}

/// Ranked predictions of one class with their match outcome.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClassMatches {
    /// Score-descending; ties keep insertion order.
    pub scores: Vec<f64>,
    pub tp: Vec<bool>,
    pub num_gt: usize,
}

pub type MatchTable = BTreeMap<usize, ClassMatches>;

/// Greedy matching of one class over several scenes. `detections[s]` and
/// `gts[s]` belong to the same scene.
pub fn match_class(
    detections: &[&[Detection]],
    gts: &[&[Box3D]],
    class_id: usize,
    threshold: f64,
) -> ClassMatches {
    assert_eq!(
        detections.len(),
        gts.len(),
        "one ground-truth list per scene"
    );
    let mut ranked: Vec<(usize, &Detection)> = Vec::new();
    for (s, dets) in detections.iter().enumerate() {
        ranked.extend(
            dets.iter()
                .filter(|d| d.class_id == class_id)
                .map(|d| (s, d)),
        );
    }
    // Stable sort: equal scores stay in insertion order.
    ranked.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
    let class_gts: Vec<Vec<&Box3D>> = gts
        .iter()
        .map(|g| g.iter().filter(|b| b.class_id == class_id).collect())
        .collect();
    let mut used: Vec<Vec<bool>> = class_gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut out = ClassMatches {
        num_gt: class_gts.iter().map(Vec::len).sum(),
        ..Default::default()
    };
    for (s, det) in ranked {
        let mut best: Option<(usize, f64)> = None;
        for (j, gt) in class_gts[s].iter().enumerate() {
            if used[s][j] {
                continue;
            }
            let iou = iou_center_size(&det.center, &det.size, &gt.center, &gt.size);
            if best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        let hit = match best {
            Some((j, iou)) if iou >= threshold => {
                used[s][j] = true;
                true
            }
            _ => false,
        };
        out.scores.push(det.score);
        out.tp.push(hit);
    }
    out
}

/// Monotone-envelope precision-recall points `(recall, precision)`, one per
/// ranked prediction.
pub fn pr_curve(tp: &[bool], num_gt: usize) -> Vec<(f64, f64)> {
    let mut points = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += t as usize;
        let recall = if num_gt == 0 {
            0.0
        } else {
            hits as f64 / num_gt as f64
        };
        points.push((recall, hits as f64 / (i + 1) as f64));
    }
    for i in (0..points.len().saturating_sub(1)).rev() {
        points[i].1 = points[i].1.max(points[i + 1].1);
    }
    points
}

/// All-point interpolated AP. `None` when the class has neither ground truth
/// nor predictions; `Some(0.0)` for predictions without ground truth.
pub fn ap_from_matches(m: &ClassMatches) -> Option<f64> {
    if m.num_gt == 0 {
        return if m.tp.is_empty() { None } else { Some(0.0) };
    }
    let curve = pr_curve(&m.tp, m.num_gt);
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (recall, precision) in curve {
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Some(ap)
}

/// AP of one class within a single scene.
pub fn average_precision(
    detections: &[Detection],
    gts: &[Box3D],
    class_id: usize,
    threshold: f64,
) -> Option<f64> {
    ap_from_matches(&match_class(&[detections], &[gts], class_id, threshold))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_id: usize,
    pub novel: bool,
    pub num_gt: usize,
    pub ap25: Option<f64>,
    pub ap50: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    pub classes: Vec<ClassAp>,
    pub novel_ap25: Option<f64>,
    pub novel_ap50: Option<f64>,
    pub base_ap25: Option<f64>,
    pub base_ap50: Option<f64>,
    pub k_shot: usize,
    pub num_scenes: usize,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x}"))
}

impl ApReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per class, then the novel and base means.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,split,num_gt,ap25,ap50\n");
        for c in &self.classes {
            let split = if c.novel { "novel" } else { "base" };
            let _ = writeln!(
                out,
                "{},{split},{},{},{}",
                c.class_id,
                c.num_gt,
                fmt_opt(c.ap25),
                fmt_opt(c.ap50)
            );
        }
        let _ = writeln!(
            out,
            "mean_novel,novel,,{},{}",
            fmt_opt(self.novel_ap25),
            fmt_opt(self.novel_ap50)
        );
        let _ = writeln!(
            out,
            "mean_base,base,,{},{}",
            fmt_opt(self.base_ap25),
            fmt_opt(self.base_ap50)
        );
        out
    }

    pub fn class(&self, class_id: usize) -> Option<&ClassAp> {
        self.classes.iter().find(|c| c.class_id == class_id)
    }
}

/// Score every scene of `scenes` against its detections. Scene order does not
/// matter; a scene without detections is an error.
pub fn evaluate_run(
    detections: &BTreeMap<String, Vec<Detection>>,
    scenes: &[PointCloudScene],
    split: &DatasetSplit,
) -> Result<ApReport> {
    let missing: Vec<&str> = scenes
        .iter()
        .filter(|s| !detections.contains_key(&s.scene_id))
        .map(|s| s.scene_id.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Invalid(format!(
            "no detections for scene(s): {}",
            missing.join(", ")
        )));
    }
    let mut order: Vec<&PointCloudScene> = scenes.iter().collect();
    order.sort_by(|a, b| a.scene_id.cmp(&b.scene_id));
    let dets: Vec<&[Detection]> = order
        .iter()
        .map(|s| detections[&s.scene_id].as_slice())
        .collect();
    let gts: Vec<&[Box3D]> = order.iter().map(|s| s.boxes.as_slice()).collect();

    let classes: BTreeSet<usize> = split.all_classes().into_iter().collect();
    let mut rows = Vec::new();
    for &c in &classes {
        let m25 = match_class(&dets, &gts, c, 0.25);
        let m50 = match_class(&dets, &gts, c, 0.5);
        rows.push(ClassAp {
            class_id: c,
            novel: split.is_novel(c),
            num_gt: m25.num_gt,
            ap25: ap_from_matches(&m25),
            ap50: ap_from_matches(&m50),
        });
    }
    let pick = |novel: bool, f: fn(&ClassAp) -> Option<f64>| {
        mean_of(rows.iter().filter(|r| r.novel == novel).map(f))
    };
    Ok(ApReport {
        novel_ap25: pick(true, |r| r.ap25),
        novel_ap50: pick(true, |r| r.ap50),
        base_ap25: pick(false, |r| r.ap25),
        base_ap50: pick(false, |r| r.ap50),
        classes: rows,
        k_shot: split.k,
        num_scenes: scenes.len(),
    })
}

pub fn save_detections(path: &Path, detections: &[Detection]) -> Result<()> {
    let text = serde_json::to_string(detections).expect("detections serialize");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_detections(path: &Path) -> Result<Vec<Detection>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::parse(path.display().to_string(), "<document>", e.to_string()))
}

/// Load `<dir>/<scene_id>.json` for every scene; all missing ids are listed in
/// one error.
pub fn load_detection_dir(
    dir: &Path,
    scene_ids: &[String],
) -> Result<BTreeMap<String, Vec<Detection>>> {
    let missing: Vec<&str> = scene_ids
        .iter()
        .filter(|id| !dir.join(format!("{id}.json")).exists())
        .map(String::as_str)
        .collect();
    if !missing.is_empty() {
        return Err(Error::Invalid(format!(
            "missing detection file(s) in {} for scene(s): {}",
            dir.display(),
            missing.join(", ")
        )));
    }
    scene_ids
        .iter()
        .map(|id| {
            Ok((
                id.clone(),
                load_detections(&dir.join(format!("{id}.json")))?,
            ))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(center: Vec3, size: Vec3, class_id: usize, score: f64) -> Detection {
        Detection {
            center,
            size,
            class_id,
            score,
        }
    }

    #[test]
    fn iou_closed_forms() {
        let a = Box3D::new([0.0; 3], [1.0; 3], 0, 0);
        assert_eq!(iou3d(&a, &a), 1.0);
        let far = Box3D::new([5.0, 0.0, 0.0], [1.0; 3], 0, 1);
        assert_eq!(iou3d(&a, &far), 0.0);
        let shifted = Box3D::new([0.5, 0.0, 0.0], [1.0; 3], 0, 1);
        assert!((iou3d(&a, &shifted) - 0.5 / 1.5).abs() < 1e-12);
    }

    #[test]
    fn single_hit_is_perfect() {
        let gt = [Box3D::new([0.0; 3], [1.0; 3], 2, 0)];
        let d = [det([0.05, 0.0, 0.0], [1.0; 3], 2, 0.9)];
        assert_eq!(average_precision(&d, &gt, 2, 0.25), Some(1.0));
    }

    #[test]
    fn false_positive_ranked_first_halves_ap() {
        let gt = [Box3D::new([0.0; 3], [1.0; 3], 0, 0)];
        let d = [
            det([4.0, 0.0, 0.0], [1.0; 3], 0, 0.9),
            det([0.0; 3], [1.0; 3], 0, 0.5),
        ];
        let m = match_class(&[&d], &[&gt], 0, 0.25);
        assert_eq!(m.tp, vec![false, true]);
        assert_eq!(pr_curve(&m.tp, 1), vec![(0.0, 0.5), (1.0, 0.5)]);
        assert!((ap_from_matches(&m).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn empty_class_handling() {
        let gt: [Box3D; 0] = [];
        assert_eq!(average_precision(&[], &gt, 0, 0.25), None);
        let d = [det([0.0; 3], [1.0; 3], 0, 0.3)];
        assert_eq!(average_precision(&d, &gt, 0, 0.25), Some(0.0));
    }

    #[test]
    fn each_gt_matches_once() {
        let gt = [Box3D::new([0.0; 3], [1.0; 3], 0, 0)];
        let d = [
            det([0.0; 3], [1.0; 3], 0, 0.9),
            det([0.0; 3], [1.0; 3], 0, 0.8),
        ];
        let m = match_class(&[&d], &[&gt], 0, 0.25);
        assert_eq!(m.tp, vec![true, false]);
        assert_eq!(ap_from_matches(&m), Some(1.0));
    }

    #[test]
    fn csv_and_json_carry_the_same_numbers() {
        let split = DatasetSplit {
            base: vec![0],
            novel: vec![1],
            k: 1,
            annotated: vec![],
        };
        let scene = PointCloudScene {
            scene_id: "s".into(),
            points: vec![],
            point_instance: vec![],
            boxes: vec![
                Box3D::new([0.0; 3], [1.0; 3], 0, 0),
                Box3D::new([3.0, 0.0, 0.0], [1.0; 3], 1, 1),
            ],
        };
        let mut dets = BTreeMap::new();
        dets.insert("s".to_string(), vec![det([0.0; 3], [1.0; 3], 0, 0.9)]);
        let r = evaluate_run(&dets, &[scene], &split).unwrap();
        assert_eq!(r.base_ap25, Some(1.0));
        assert_eq!(r.novel_ap25, Some(0.0));
        let back: ApReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
        assert!(r.to_csv().contains("0,base,1,1,1\n"));
        assert!(r.to_csv().contains("1,novel,1,0,0\n"));
    }

    #[test]
    fn missing_scene_lists_ids() {
        let split = DatasetSplit {
            base: vec![0],
            novel: vec![],
            k: 1,
            annotated: vec![],
        };
        let scene = PointCloudScene {
            scene_id: "test_0007".into(),
            points: vec![],
            point_instance: vec![],
            boxes: vec![],
        };
        let err = evaluate_run(&BTreeMap::new(), &[scene], &split).unwrap_err();
        assert!(err.to_string().contains("test_0007"));
    }
}

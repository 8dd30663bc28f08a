//! Static SVG figures: loss curves, precision-recall curves and top-down
//! scene views.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::eval3d::{match_class, pr_curve, Detection};
use crate::synthdata::{Box3D, DatasetSplit, PointCloudScene};
use crate::train::StepRecord;

/// Stroke color of ground-truth rectangles in scene views.
pub const GT_COLOR: &str = "#1a9e3a";
const POINT_COLOR: &str = "#9a9a9a";
const PALETTE: [&str; 12] = [
    "#1f77b4", "#d62728", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf", "#bcbd22",
    "#7f7f7f", "#393b79", "#ad494a", "#637939",
];

pub fn class_color(class_id: usize) -> &'static str {
    PALETTE[class_id % PALETTE.len()]
}

const W: f64 = 640.0;
const H: f64 = 420.0;
const MARGIN: f64 = 50.0;

/// Maps data coordinates into the plotting area of a `W x H` canvas.
struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn new(x0: f64, x1: f64, y0: f64, y1: f64) -> Self {
        let pad = |a: f64, b: f64| if b > a { (a, b) } else { (a - 0.5, a + 0.5) };
        let (x0, x1) = pad(x0, x1);
        let (y0, y1) = pad(y0, y1);
        Self { x0, x1, y0, y1 }
    }

    fn x(&self, v: f64) -> f64 {
        MARGIN + (v - self.x0) / (self.x1 - self.x0) * (W - 2.0 * MARGIN)
    }

    fn y(&self, v: f64) -> f64 {
        H - MARGIN - (v - self.y0) / (self.y1 - self.y0) * (H - 2.0 * MARGIN)
    }
}

fn open_svg(s: &mut String, title: &str) {
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(
        s,
        r#"<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="15" text-anchor="middle">{}</text>"#,
        W / 2.0,
        escape(title)
    );
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn axes(s: &mut String, f: &Frame, xlabel: &str, ylabel: &str) {
    let (l, r, t, b) = (MARGIN, W - MARGIN, MARGIN, H - MARGIN);
    let _ = writeln!(
        s,
        r#"<path d="M{l} {t} L{l} {b} L{r} {b}" fill="none" stroke="black"/>"#
    );
    for (v, anchor, x, y) in [(f.x0, "start", l, b + 16.0), (f.x1, "end", r, b + 16.0)] {
        let _ = writeln!(
            s,
            r#"<text x="{x}" y="{y}" font-size="11" text-anchor="{anchor}">{}</text>"#,
            tick(v)
        );
    }
    for (v, y) in [(f.y0, b), (f.y1, t + 4.0)] {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{y}" font-size="11" text-anchor="end">{}</text>"#,
            l - 4.0,
            tick(v)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">{}</text>"#,
        W / 2.0,
        H - 12.0,
        escape(xlabel)
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" font-size="12" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(ylabel)
    );
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

fn polyline(s: &mut String, f: &Frame, points: &[(f64, f64)], color: &str, label: &str) {
    let path: Vec<String> = points
        .iter()
        .map(|&(x, y)| format!("{:.2},{:.2}", f.x(x), f.y(y)))
        .collect();
    let _ = writeln!(
        s,
        r#"<polyline class="series" data-label="{}" points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
        escape(label),
        path.join(" ")
    );
}

fn legend(s: &mut String, entries: &[(String, &str)]) {
    for (i, (label, color)) in entries.iter().enumerate() {
        let y = MARGIN + 14.0 * i as f64;
        let x = W - MARGIN - 130.0;
        let _ = writeln!(
            s,
            r#"<line x1="{x}" y1="{y}" x2="{}" y2="{y}" stroke="{color}" stroke-width="2"/>"#,
            x + 16.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="11">{}</text>"#,
            x + 20.0,
            y + 4.0,
            escape(label)
        );
    }
}

/// Loss terms against step. `None` for an empty log.
pub fn loss_curves_svg(records: &[StepRecord]) -> Option<String> {
    if records.is_empty() {
        return None;
    }
    type Getter = fn(&StepRecord) -> f64;
    let series: [(&str, Getter, &str); 4] = [
        ("l_total", |r| r.l_total, "#000000"),
        ("l_det", |r| r.l_det, "#1f77b4"),
        ("l_semcl", |r| r.l_semcl, "#d62728"),
        ("l_primcl", |r| r.l_primcl, "#ff7f0e"),
    ];
    let xs: Vec<f64> = (0..records.len()).map(|i| i as f64).collect();
    let ymax = records
        .iter()
        .flat_map(|r| series.iter().map(move |(_, g, _)| g(r)))
        .fold(0.0f64, f64::max);
    let f = Frame::new(0.0, (records.len() - 1) as f64, 0.0, ymax);
    let mut s = String::new();
    open_svg(&mut s, "training losses");
    axes(&mut s, &f, "step", "loss");
    for (name, get, color) in &series {
        let pts: Vec<(f64, f64)> = xs.iter().zip(records).map(|(&x, r)| (x, get(r))).collect();
        polyline(&mut s, &f, &pts, color, name);
    }
    legend(
        &mut s,
        &series
            .iter()
            .map(|(n, _, c)| (n.to_string(), *c))
            .collect::<Vec<_>>(),
    );
    s.push_str("</svg>\n");
    Some(s)
}

/// Curve points as drawn: the envelope preceded by a point at recall zero
/// carrying the precision of the top-ranked prediction's envelope value.
pub fn pr_plot_points(tp: &[bool], num_gt: usize) -> Vec<(f64, f64)> {
    let curve = pr_curve(tp, num_gt);
    let mut pts = Vec::with_capacity(curve.len() + 1);
    if let Some(&(_, p)) = curve.first() {
        pts.push((0.0, p));
    }
    pts.extend(curve);
    pts
}

/// One precision-recall curve per class at IoU `threshold`.
pub fn pr_curves_svg(
    detections: &BTreeMap<String, Vec<Detection>>,
    scenes: &[PointCloudScene],
    split: &DatasetSplit,
    threshold: f64,
) -> String {
    let mut order: Vec<&PointCloudScene> = scenes.iter().collect();
    order.sort_by(|a, b| a.scene_id.cmp(&b.scene_id));
    let empty = Vec::new();
    let dets: Vec<&[Detection]> = order
        .iter()
        .map(|s| detections.get(&s.scene_id).unwrap_or(&empty).as_slice())
        .collect();
    let gts: Vec<&[Box3D]> = order.iter().map(|s| s.boxes.as_slice()).collect();
    let f = Frame::new(0.0, 1.0, 0.0, 1.0);
    let mut s = String::new();
    open_svg(&mut s, &format!("precision-recall at IoU {threshold}"));
    axes(&mut s, &f, "recall", "precision");
    let mut entries = Vec::new();
    for c in split.all_classes() {
        let m = match_class(&dets, &gts, c, threshold);
        if m.num_gt == 0 && m.tp.is_empty() {
            continue;
        }
        let label = format!(
            "class {c} ({})",
            if split.is_novel(c) { "novel" } else { "base" }
        );
        polyline(
            &mut s,
            &f,
            &pr_plot_points(&m.tp, m.num_gt),
            class_color(c),
            &label,
        );
        entries.push((label, class_color(c)));
    }
    legend(&mut s, &entries);
    s.push_str("</svg>\n");
    s
}

/// Top-down view: points in gray, one green rectangle per ground-truth box,
/// detections scoring at least `min_score` outlined in their class color.
pub fn scene_svg(scene: &PointCloudScene, detections: &[Detection], min_score: f64) -> String {
    let (mut x0, mut x1, mut y0, mut y1) = (
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    for p in &scene.points {
        x0 = x0.min(p[0]);
        x1 = x1.max(p[0]);
        y0 = y0.min(p[1]);
        y1 = y1.max(p[1]);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    // Equal scale on both axes.
    let span = (x1 - x0).max(y1 - y0).max(1e-6);
    let f = Frame::new(
        x0,
        x0 + span * (W - 2.0 * MARGIN) / (H - 2.0 * MARGIN),
        y0,
        y0 + span,
    );
    let mut s = String::new();
    open_svg(&mut s, &format!("scene {}", scene.scene_id));
    for p in &scene.points {
        let _ = writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="1" fill="{POINT_COLOR}"/>"#,
            f.x(p[0]),
            f.y(p[1])
        );
    }
    let rect = |s: &mut String,
                class: &str,
                center: &[f64; 3],
                size: &[f64; 3],
                color: &str,
                extra: &str| {
        let (left, right) = (
            f.x(center[0] - 0.5 * size[0]),
            f.x(center[0] + 0.5 * size[0]),
        );
        let (top, bottom) = (
            f.y(center[1] + 0.5 * size[1]),
            f.y(center[1] - 0.5 * size[1]),
        );
        let _ = writeln!(
            s,
            r#"<rect class="{class}" x="{left:.2}" y="{top:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="{color}" stroke-width="2"{extra}/>"#,
            right - left,
            bottom - top
        );
    };
    for b in &scene.boxes {
        rect(&mut s, "gt", &b.center, &b.size, GT_COLOR, "");
    }
    for d in detections.iter().filter(|d| d.score >= min_score) {
        let extra = format!(
            r#" stroke-dasharray="5 3" data-class="{}" data-score="{:.3}""#,
            d.class_id, d.score
        );
        rect(
            &mut s,
            "det",
            &d.center,
            &d.size,
            class_color(d.class_id),
            &extra,
        );
    }
    s.push_str("</svg>\n");
    s
}

pub fn read_metrics(path: &Path) -> Result<Vec<StepRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| {
                Error::parse(
                    path.display().to_string(),
                    format!("line {}", i + 1),
                    e.to_string(),
                )
            })
        })
        .collect()
}

fn write(path: &Path, body: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Write `losses.svg` from a metrics log; an empty log only logs a warning.
/// Returns the written file, if any.
pub fn plot_losses(metrics: &Path, out: &Path) -> Result<Option<PathBuf>> {
    let records = read_metrics(metrics)?;
    match loss_curves_svg(&records) {
        Some(svg) => {
            let path = out.join("losses.svg");
            write(&path, &svg)?;
            Ok(Some(path))
        }
        None => {
            log::warn!(
                "{} holds no records; no loss plot written",
                metrics.display()
            );
            Ok(None)
        }
    }
}

/// Write `pr_ap25.svg`, `pr_ap50.svg` and one `scene_<id>.svg` for each of
/// the first `max_scenes` scenes.
pub fn plot_evaluation(
    detections: &BTreeMap<String, Vec<Detection>>,
    scenes: &[PointCloudScene],
    split: &DatasetSplit,
    out: &Path,
    max_scenes: usize,
    min_score: f64,
) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for (thr, name) in [(0.25, "pr_ap25.svg"), (0.5, "pr_ap50.svg")] {
        let path = out.join(name);
        write(&path, &pr_curves_svg(detections, scenes, split, thr))?;
        written.push(path);
    }
    let mut order: Vec<&PointCloudScene> = scenes.iter().collect();
    order.sort_by(|a, b| a.scene_id.cmp(&b.scene_id));
    for scene in order.into_iter().take(max_scenes) {
        let dets = detections
            .get(&scene.scene_id)
            .map_or(&[][..], Vec::as_slice);
        let path = out.join(format!("scene_{}.svg", scene.scene_id));
        write(&path, &scene_svg(scene, dets, min_score))?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::BACKGROUND;

    #[test]
    fn pr_points_start_at_top_ranked_precision() {
        let pts = pr_plot_points(&[false, true, true], 2);
        assert_eq!(pts[0], (0.0, pts[1].1));
        assert_eq!(pts[1], (0.0, 2.0 / 3.0));
        assert!(pts.windows(2).all(|w| w[0].1 >= w[1].1));
        let pts = pr_plot_points(&[true, false], 1);
        assert_eq!(pts[0], (0.0, 1.0));
    }

    #[test]
    fn scene_has_one_green_rect_per_box() {
        let scene = PointCloudScene {
            scene_id: "s".into(),
            points: vec![[0.0, 0.0, 0.0], [3.0, 2.0, 1.0]],
            point_instance: vec![BACKGROUND, BACKGROUND],
            boxes: vec![
                Box3D::new([1.0, 1.0, 0.5], [0.5, 0.5, 1.0], 0, 0),
                Box3D::new([2.0, 1.0, 0.5], [0.5, 0.8, 1.0], 1, 1),
            ],
        };
        let det = Detection {
            center: [1.0, 1.0, 0.5],
            size: [0.5, 0.5, 1.0],
            class_id: 0,
            score: 0.9,
        };
        let svg = scene_svg(&scene, std::slice::from_ref(&det), 0.5);
        assert_eq!(svg.matches(&format!(r#"stroke="{GT_COLOR}""#)).count(), 2);
        assert_eq!(svg.matches(r#"class="det""#).count(), 1);
        assert_eq!(svg, scene_svg(&scene, &[det], 0.5));
    }

    #[test]
    fn empty_metrics_give_no_plot() {
        assert!(loss_curves_svg(&[]).is_none());
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("metrics.jsonl");
        std::fs::write(&m, "").unwrap();
        assert_eq!(plot_losses(&m, dir.path()).unwrap(), None);
    }
}

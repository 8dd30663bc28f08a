//! 3D IoU and per-class average precision on hand-made boxes.

use cpfs3d::eval3d::{average_precision, iou3d, Detection};
use cpfs3d::synthdata::Box3D;

fn main() {
    let gt = vec![
        Box3D::new([0.0, 0.0, 0.5], [1.0, 1.0, 1.0], 0, 0),
        Box3D::new([3.0, 0.0, 0.5], [1.0, 1.0, 1.0], 0, 1),
    ];
    let shifted = Box3D::new([0.5, 0.0, 0.5], [1.0, 1.0, 1.0], 0, 0);
    println!(
        "IoU of a box shifted by half its width: {:.4}",
        iou3d(&gt[0], &shifted)
    );

    let det = |x: f64, score: f64| Detection {
        center: [x, 0.0, 0.5],
        size: [1.0, 1.0, 1.0],
        class_id: 0,
        score,
    };
    let detections = vec![det(0.05, 0.9), det(6.0, 0.8), det(3.4, 0.7)];
    for thr in [0.25, 0.5] {
        let ap = average_precision(&detections, &gt, 0, thr).expect("class has ground truth");
        println!("AP@{thr}: {ap:.4}");
    }
}

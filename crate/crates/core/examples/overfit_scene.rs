//! Train on a single scene until the detector reproduces its boxes.
//!
//! `cargo run --release --example overfit_scene [steps]`

use cpfs3d::config::RunConfig;
use cpfs3d::synthdata::generate_benchmark;
use cpfs3d::train::{overfit_scene, score_scene};

fn main() -> cpfs3d::Result<()> {
    let steps = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(300);
    let config = RunConfig::desk();
    let bench = generate_benchmark(&config.benchmark())?;
    let (state, records) = overfit_scene(&config, &bench, 0, steps)?;
    for r in records.iter().step_by(50).chain(records.last()) {
        println!(
            "step {:>4}  det {:.3}  vote {:.3}  obj {:.3}  box {:.3}  cls {:.3}",
            r.step, r.l_det, r.l_vote, r.l_objectness, r.l_box, r.l_cls
        );
    }
    let (report, detections) = score_scene(&state.model, &bench, 0)?;
    println!("AP25 {:?}  AP50 {:?}", report.base_ap25, report.base_ap50);
    for b in &bench.train[0].boxes {
        println!("gt   class {:>2} center {:.2?}", b.class_id, b.center);
    }
    for d in detections.iter().take(4) {
        println!(
            "det  class {:>2} center {:.2?} score {:.3}",
            d.class_id, d.center, d.score
        );
    }
    Ok(())
}

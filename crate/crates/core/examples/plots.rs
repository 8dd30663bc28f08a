//! SVG figures: loss curves from a short run and detections on test scenes.
//!
//! `cargo run --release --example plots [out_dir]`

use std::collections::BTreeMap;
use std::path::PathBuf;

use cpfs3d::config::RunConfig;
use cpfs3d::plot::{plot_evaluation, plot_losses};
use cpfs3d::synthdata::generate_benchmark;
use cpfs3d::train::{evaluation_prototypes, pretrain};

fn main() -> cpfs3d::Result<()> {
    let out = PathBuf::from(
        std::env::args()
            .nth(1)
            .unwrap_or_else(|| "runs/example_plots".into()),
    );
    let config = RunConfig::smoke();
    let bench = generate_benchmark(&config.benchmark())?;
    let state = pretrain(&config, &bench, &out.join("pretrain"), false)?;
    if let Some(p) = plot_losses(&out.join("pretrain/metrics.jsonl"), &out)? {
        println!("wrote {}", p.display());
    }

    let (classes, prototypes) = evaluation_prototypes(&state.model, &bench)?;
    let mut detections = BTreeMap::new();
    for scene in &bench.test {
        detections.insert(
            scene.scene_id.clone(),
            state.model.detect(scene, &prototypes, &classes)?,
        );
    }
    for p in plot_evaluation(&detections, &bench.test, &bench.split, &out, 2, 0.3)? {
        println!("wrote {}", p.display());
    }
    Ok(())
}

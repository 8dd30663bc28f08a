//! Pretrain, finetune and evaluate on the smoke profile, writing every
//! artifact under the given directory.
//!
//! `cargo run --release --example train_pipeline [out_dir]`

use std::path::PathBuf;

use cpfs3d::config::RunConfig;
use cpfs3d::synthdata::generate_benchmark;
use cpfs3d::train::{evaluate, finetune, pretrain, write_evaluation};

fn main() -> cpfs3d::Result<()> {
    let out = PathBuf::from(
        std::env::args()
            .nth(1)
            .unwrap_or_else(|| "runs/example_pipeline".into()),
    );
    let config = RunConfig::smoke();
    let bench = generate_benchmark(&config.benchmark())?;

    let pre = pretrain(&config, &bench, &out.join("pretrain"), false)?;
    println!("pretrain: {} steps", pre.step);
    let fine = finetune(
        &config,
        &bench,
        &out.join("pretrain/final.ckpt"),
        &out.join("finetune"),
        false,
    )?;
    println!("finetune: {} steps", fine.step);

    let (report, detections) = evaluate(&fine.model, &bench, &bench.test)?;
    write_evaluation(&out.join("eval"), &report, &detections)?;
    print!("{}", report.to_csv());
    println!("artifacts in {}", out.display());
    Ok(())
}

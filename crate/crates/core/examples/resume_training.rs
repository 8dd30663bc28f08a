//! Interrupt pretraining after one epoch, resume it, and confirm the result
//! matches an uninterrupted run byte for byte.

use cpfs3d::config::RunConfig;
use cpfs3d::synthdata::generate_benchmark;
use cpfs3d::train::{checkpoint_path, pretrain};

fn main() -> cpfs3d::Result<()> {
    let config = RunConfig {
        steps_per_epoch: 2,
        ..RunConfig::smoke()
    };
    let bench = generate_benchmark(&config.benchmark())?;
    let root = std::env::temp_dir().join("cpfs3d_resume_example");
    let (full, part) = (root.join("full"), root.join("part"));
    let _ = std::fs::remove_dir_all(&root);

    pretrain(&config, &bench, &full, false)?;
    pretrain(&config, &bench, &part, false)?;
    std::fs::remove_file(checkpoint_path(&part, config.pretrain_epochs)).ok();
    std::fs::remove_file(part.join("final.ckpt")).ok();
    println!(
        "removed the last epoch; resuming from {}",
        checkpoint_path(&part, 1).display()
    );
    pretrain(&config, &bench, &part, true)?;

    for name in ["metrics.jsonl", "episodes.jsonl", "final.ckpt"] {
        let same = std::fs::read(full.join(name)).ok() == std::fs::read(part.join(name)).ok();
        println!("{name:<15} {}", if same { "identical" } else { "DIFFERS" });
    }
    Ok(())
}

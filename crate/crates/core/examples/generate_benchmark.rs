//! Generate the desk-size benchmark, write it to disk and read it back.
//!
//! `cargo run --release --example generate_benchmark [out_dir]`

use cpfs3d::config::RunConfig;
use cpfs3d::synthdata::{generate_benchmark, load_benchmark, save_benchmark};

fn main() -> cpfs3d::Result<()> {
    let out = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "runs/example_data".into());
    let config = RunConfig::desk();
    let bench = generate_benchmark(&config.benchmark())?;
    println!("base classes  {:?}", bench.split.base);
    println!(
        "novel classes {:?} with k = {}",
        bench.split.novel, bench.split.k
    );
    let scene = &bench.train[0];
    println!(
        "{}: {} points, {} boxes",
        scene.scene_id,
        scene.num_points(),
        scene.boxes.len()
    );
    for b in &scene.boxes {
        println!(
            "  class {:>2} center {:.2?} size {:.2?}",
            b.class_id, b.center, b.size
        );
    }

    let dir = std::path::Path::new(&out);
    save_benchmark(&bench, dir)?;
    let back = load_benchmark(dir)?;
    assert_eq!(back.split, bench.split);
    println!(
        "wrote and reloaded {} train and {} test scenes in {}",
        back.train.len(),
        back.test.len(),
        dir.display()
    );
    Ok(())
}

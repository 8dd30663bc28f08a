//! Run the point backbone on one scene and a support crop.

use cpfs3d::backbone::{encode_scene, encode_support, foreground_mask};
use cpfs3d::config::RunConfig;
use cpfs3d::detector::BoxCodec;
use cpfs3d::episodes::crop_support;
use cpfs3d::model::Model;
use cpfs3d::synthdata::generate_benchmark;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> cpfs3d::Result<()> {
    let config = RunConfig::desk();
    let bench = generate_benchmark(&config.benchmark())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let codec = BoxCodec::from_boxes(bench.train.iter().flat_map(|s| s.boxes.iter()));
    let model = Model::new(&config, codec, &mut rng);

    let scene = &bench.train[0];
    let seeds = encode_scene(&scene.points, &model.backbone, &model.params)?;
    let fg = foreground_mask(&seeds.positions, &scene.boxes);
    println!(
        "{} points -> {} seeds of dimension {}, {} inside a box",
        scene.num_points(),
        seeds.len(),
        seeds.features.ncols(),
        fg.iter().filter(|&&f| f).count()
    );

    let b = &scene.boxes[0];
    let crop = crop_support(scene, b, config.support_min_points, &mut rng);
    let feature = encode_support(&crop, &model.backbone, &model.params)?;
    let norm = feature.iter().map(|v| v * v).sum::<f64>().sqrt();
    println!(
        "support crop of class {}: {} points, feature norm {norm:.3}",
        b.class_id,
        crop.len()
    );
    Ok(())
}

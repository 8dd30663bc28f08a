//! Run the full detector forward on a scene: votes, proposals, boxes.

use cpfs3d::backbone::encode_scene;
use cpfs3d::config::RunConfig;
use cpfs3d::detector::{cluster, BoxCodec};
use cpfs3d::episodes::EpisodeSampler;
use cpfs3d::model::Model;
use cpfs3d::protobank::refine_seeds;
use cpfs3d::synthdata::generate_benchmark;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> cpfs3d::Result<()> {
    let config = RunConfig::desk();
    let bench = generate_benchmark(&config.benchmark())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let codec = BoxCodec::from_boxes(bench.train.iter().flat_map(|s| s.boxes.iter()));
    let model = Model::new(&config, codec, &mut rng);

    let scene = &bench.test[0];
    let seeds = encode_scene(&scene.points, &model.backbone, &model.params)?;
    let refined = refine_seeds(&seeds, &model.bank, &model.seed_attn, &model.params);
    let votes = model.detector.vote_values(&refined, &model.params);
    let proposals = cluster(&votes, config.num_proposals, config.cluster_radius)?;
    println!("{} seeds -> {} proposals", seeds.len(), proposals.len());

    let sampler = EpisodeSampler::new(&bench.train, &bench.split, config.support_min_points)?;
    let classes = bench.split.base.clone();
    let episode = sampler.sample_episode_for(&classes, config.k_shot, &mut rng)?;
    let prototypes = model.class_prototypes(&episode.support)?;
    let detections = model.detect(scene, &prototypes, &classes)?;
    println!(
        "{} detections after NMS (untrained weights); top five:",
        detections.len()
    );
    for d in detections.iter().take(5) {
        println!(
            "  class {:>2} score {:.3} center {:.2?} size {:.2?}",
            d.class_id, d.score, d.center, d.size
        );
    }
    Ok(())
}

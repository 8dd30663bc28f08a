//! Sample pretraining and finetuning episodes and show what each supervises.

use cpfs3d::config::RunConfig;
use cpfs3d::episodes::{AuditLog, EpisodeSampler, Stage};
use cpfs3d::synthdata::generate_benchmark;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> cpfs3d::Result<()> {
    let config = RunConfig::desk();
    let bench = generate_benchmark(&config.benchmark())?;
    let sampler = EpisodeSampler::new(&bench.train, &bench.split, config.support_min_points)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    for stage in [Stage::Pretrain, Stage::Finetune] {
        println!(
            "{stage:?}: eligible classes {:?}",
            sampler.eligible_classes(stage)
        );
        let episode = sampler.sample_episode(stage, config.n_way, config.k_shot, &mut rng)?;
        println!(
            "  query {} classes {:?}",
            episode.query.scene_id, episode.class_ids
        );
        for (c, shots) in episode.class_ids.iter().zip(&episode.support) {
            let sources: Vec<String> = shots
                .iter()
                .map(|s| format!("{}#{}", s.source.0, s.source.1))
                .collect();
            println!("  class {c:>2}: {}", sources.join(" "));
        }
        println!("  query targets: {}", episode.targets().len());
    }

    let batch = sampler.sample_batch(
        Stage::Pretrain,
        config.batch_size,
        config.n_way,
        config.k_shot,
        &mut rng,
    )?;
    let mut audit = AuditLog::new(Vec::new());
    for e in &batch.episodes {
        audit.log(e).expect("write to memory");
    }
    let text = String::from_utf8(audit.into_inner()).expect("utf-8");
    println!("audit log of one batch ({} tasks):", batch.size());
    print!("{text}");
    Ok(())
}

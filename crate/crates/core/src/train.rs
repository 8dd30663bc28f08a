//! Two-stage episodic training, checkpointing, resume and evaluation.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{quantize_f32, Archive};
use crate::config::RunConfig;
use crate::detector::BoxCodec;
use crate::episodes::{EpisodeBatch, EpisodeRecord, EpisodeSampler, Stage};
use crate::error::{Error, Result};
use crate::eval3d::{evaluate_run, save_detections, ApReport, Detection};
use crate::model::Model;
use crate::nn::AdamW;
use crate::synthdata::{Benchmark, DatasetSplit, PointCloudScene};

/// Added to the run seed to separate the random streams of each stage.
const FINETUNE_STREAM: u64 = 0x5EED_F1E7;
const EVAL_STREAM: u64 = 0x5EED_E7A1;

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: Stage,
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub l_vote: f64,
    pub l_objectness: f64,
    pub l_box: f64,
    pub l_cls: f64,
    pub l_det: f64,
    pub l_semcl: f64,
    pub l_primcl: f64,
    pub l_total: f64,
    pub scl_skipped: bool,
    #[serde(rename = "pcl_W'")]
    pub pcl_w: usize,
}

/// One line of `episodes.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub epoch: usize,
    pub step: u64,
    pub episode: EpisodeRecord,
}

/// Everything a stage needs to continue exactly where it stopped.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub optimizer: AdamW,
    pub rng: ChaCha8Rng,
    pub stage: Stage,
    /// Completed epochs of the current stage.
    pub epoch: usize,
    pub step: u64,
}

fn rng_to_text(rng: &ChaCha8Rng) -> String {
    let seed: String = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
    format!("{seed}:{}:{}", rng.get_stream(), rng.get_word_pos())
}

fn rng_from_text(text: &str) -> Result<ChaCha8Rng> {
    let bad = || Error::Checkpoint(format!("malformed rng state {text:?}"));
    let parts: Vec<&str> = text.split(':').collect();
    let [seed_hex, stream, pos] = parts[..] else {
        return Err(bad());
    };
    if seed_hex.len() != 64 {
        return Err(bad());
    }
    let mut seed = [0u8; 32];
    for (i, b) in seed.iter_mut().enumerate() {
        *b = u8::from_str_radix(&seed_hex[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream.parse().map_err(|_| bad())?);
    rng.set_word_pos(pos.parse().map_err(|_| bad())?);
    Ok(rng)
}

fn stage_name(stage: Stage) -> &'static str {
    match stage {
        Stage::Pretrain => "pretrain",
        Stage::Finetune => "finetune",
    }
}

impl TrainState {
    /// Fresh pretraining state; the size prior comes from the base-class
    /// boxes of the training scenes.
    pub fn new_pretrain(config: &RunConfig, bench: &Benchmark) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let codec = BoxCodec::from_boxes(
            bench
                .train
                .iter()
                .flat_map(|s| s.boxes.iter())
                .filter(|b| bench.split.is_base(b.class_id)),
        );
        let model = Model::new(config, codec, &mut rng);
        Self {
            model,
            optimizer: AdamW::new(config.weight_decay),
            rng,
            stage: Stage::Pretrain,
            epoch: 0,
            step: 0,
        }
    }

    /// Start finetuning from a trained model with a fresh optimizer.
    pub fn new_finetune(config: &RunConfig, model: Model) -> Self {
        Self {
            model,
            optimizer: AdamW::new(config.weight_decay),
            rng: ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(FINETUNE_STREAM)),
            stage: Stage::Finetune,
            epoch: 0,
            step: 0,
        }
    }

    /// Round all floating state to `f32`, the archive precision.
    pub fn quantize(&mut self) {
        self.model.quantize();
        for m in self
            .optimizer
            .first
            .values_mut()
            .chain(self.optimizer.second.values_mut())
        {
            quantize_f32(m);
        }
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new();
        self.model.write_archive(&mut a);
        for (name, m) in &self.optimizer.first {
            a.insert(&format!("adamw.m.{name}"), m.clone());
        }
        for (name, m) in &self.optimizer.second {
            a.insert(&format!("adamw.v.{name}"), m.clone());
        }
        a.set_meta("stage", stage_name(self.stage));
        a.set_meta("epoch", self.epoch);
        a.set_meta("step", self.step);
        a.set_meta("adamw_step", self.optimizer.step);
        a.set_meta("rng", rng_to_text(&self.rng));
        a.set_meta("config_hash", self.model.config.hash());
        a
    }

    /// Restore a state saved by [`TrainState::to_archive`]. The archive must
    /// have been written under the same configuration.
    pub fn from_archive(config: &RunConfig, a: &Archive) -> Result<Self> {
        check_hash(config, a)?;
        let model = Model::from_archive(config, a)?;
        let mut optimizer = AdamW::new(config.weight_decay);
        optimizer.step = a.meta_parse("adamw_step")?;
        for (key, m) in &a.entries {
            if let Some(name) = key.strip_prefix("adamw.m.") {
                optimizer.first.insert(name.to_string(), m.clone());
            } else if let Some(name) = key.strip_prefix("adamw.v.") {
                optimizer.second.insert(name.to_string(), m.clone());
            }
        }
        let stage = match a.meta("stage")? {
            "pretrain" => Stage::Pretrain,
            "finetune" => Stage::Finetune,
            other => return Err(Error::Checkpoint(format!("unknown stage {other:?}"))),
        };
        Ok(Self {
            model,
            optimizer,
            rng: rng_from_text(a.meta("rng")?)?,
            stage,
            epoch: a.meta_parse("epoch")?,
            step: a.meta_parse("step")?,
        })
    }
}

/// Reject an archive written under a different configuration.
pub fn check_hash(config: &RunConfig, a: &Archive) -> Result<()> {
    let expected = config.hash();
    let found = a.meta("config_hash")?;
    if found != expected {
        return Err(Error::Checkpoint(format!(
            "checkpoint was written with config {found}, current config is {expected}"
        )));
    }
    Ok(())
}

pub fn steps_per_epoch(config: &RunConfig, n_train: usize) -> usize {
    if config.steps_per_epoch > 0 {
        config.steps_per_epoch
    } else {
        n_train.div_ceil(config.batch_size).max(1)
    }
}

fn stage_epochs(config: &RunConfig, stage: Stage) -> usize {
    match stage {
        Stage::Pretrain => config.pretrain_epochs,
        Stage::Finetune => config.finetune_epochs,
    }
}

fn stage_lr(config: &RunConfig, stage: Stage, epoch: usize) -> f64 {
    match stage {
        Stage::Pretrain => config.lr_at(epoch),
        Stage::Finetune => config.lr_at(config.pretrain_epochs),
    }
}

/// Apply one batch: forward, backward, optimizer step, bank update.
pub fn train_step(state: &mut TrainState, batch: &EpisodeBatch, lr: f64) -> Result<StepRecord> {
    let out = state.model.forward_batch(batch)?;
    let model = &mut state.model;
    state.optimizer.update(&mut model.params, &out.grads, lr);
    crate::protobank::momentum_update(&mut model.bank, &out.assignment);
    if model.config.bank_renormalize {
        model.bank.renormalize();
    }
    if !model.bank.is_finite()
        || model
            .params
            .iter()
            .any(|(_, m)| m.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::Numerical("parameters became non-finite".into()));
    }
    let l = out.losses;
    Ok(StepRecord {
        stage: state.stage,
        step: state.step,
        epoch: state.epoch,
        lr,
        l_vote: l.l_vote,
        l_objectness: l.l_objectness,
        l_box: l.l_box,
        l_cls: l.l_cls,
        l_det: l.l_det,
        l_semcl: l.l_semcl,
        l_primcl: l.l_primcl,
        l_total: l.l_total,
        scl_skipped: out.scl_skipped,
        pcl_w: out.pcl_w,
    })
}

fn jsonl_writer(path: &Path, keep: impl Fn(&str) -> bool) -> Result<BufWriter<File>> {
    let kept: Vec<String> = match File::open(path) {
        Ok(f) => BufReader::new(f)
            .lines()
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(|e| Error::io(path, e))?
            .into_iter()
            .filter(|l| keep(l))
            .collect(),
        Err(_) => Vec::new(),
    };
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    for l in kept {
        writeln!(w, "{l}").map_err(|e| Error::io(path, e))?;
    }
    Ok(w)
}

fn epoch_of(line: &str) -> Option<usize> {
    serde_json::from_str::<serde_json::Value>(line)
        .ok()?
        .get("epoch")?
        .as_u64()
        .map(|e| e as usize)
}

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch_{epoch:03}.ckpt"))
}

/// Latest per-epoch checkpoint in `dir`, if any.
pub fn latest_checkpoint(dir: &Path) -> Option<PathBuf> {
    let mut found: Vec<PathBuf> = std::fs::read_dir(dir)
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("epoch_") && n.ends_with(".ckpt"))
        })
        .collect();
    found.sort();
    found.pop()
}

/// Run the remaining epochs of `state.stage`, writing `metrics.jsonl`,
/// `episodes.jsonl`, one checkpoint per epoch and `final.ckpt` into `dir`.
/// Log lines from epochs at or after `state.epoch` are discarded first, so a
/// resumed run rewrites exactly what the interrupted one would have.
pub fn run_stage(mut state: TrainState, bench: &Benchmark, dir: &Path) -> Result<TrainState> {
    let config = state.model.config.clone();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let sampler = EpisodeSampler::new(&bench.train, &bench.split, config.support_min_points)?;
    let resume_epoch = state.epoch;
    let keep = |l: &str| epoch_of(l).is_some_and(|e| e < resume_epoch);
    let metrics_path = dir.join("metrics.jsonl");
    let audit_path = dir.join("episodes.jsonl");
    let mut metrics = jsonl_writer(&metrics_path, keep)?;
    let mut audit = jsonl_writer(&audit_path, keep)?;

    let epochs = stage_epochs(&config, state.stage);
    let steps = steps_per_epoch(&config, bench.train.len());
    while state.epoch < epochs {
        let lr = stage_lr(&config, state.stage, state.epoch);
        for _ in 0..steps {
            let batch = sampler.sample_batch(
                state.stage,
                config.batch_size,
                config.n_way,
                config.k_shot,
                &mut state.rng,
            )?;
            for ep in &batch.episodes {
                let rec = AuditRecord {
                    epoch: state.epoch,
                    step: state.step,
                    episode: ep.record(),
                };
                writeln!(
                    audit,
                    "{}",
                    serde_json::to_string(&rec).expect("serializes")
                )
                .map_err(|e| Error::io(&audit_path, e))?;
            }
            let record = match train_step(&mut state, &batch, lr) {
                Ok(r) => r,
                Err(e @ Error::Numerical(_)) => {
                    dump_batch(dir, &state, &batch)?;
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            writeln!(
                metrics,
                "{}",
                serde_json::to_string(&record).expect("serializes")
            )
            .map_err(|e| Error::io(&metrics_path, e))?;
            state.step += 1;
        }
        state.epoch += 1;
        log::info!(
            "{} epoch {}/{epochs} done",
            stage_name(state.stage),
            state.epoch
        );
        state.quantize();
        metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
        audit.flush().map_err(|e| Error::io(&audit_path, e))?;
        state
            .to_archive()
            .save(&checkpoint_path(dir, state.epoch))?;
    }
    state.quantize();
    state.to_archive().save(&dir.join("final.ckpt"))?;
    Ok(state)
}

fn dump_batch(dir: &Path, state: &TrainState, batch: &EpisodeBatch) -> Result<()> {
    let path = dir.join("failed_batch.json");
    let records: Vec<EpisodeRecord> = batch.episodes.iter().map(|e| e.record()).collect();
    let body = serde_json::json!({
        "stage": state.stage,
        "epoch": state.epoch,
        "step": state.step,
        "episodes": records,
    });
    std::fs::write(
        &path,
        serde_json::to_string_pretty(&body).expect("serializes"),
    )
    .map_err(|e| Error::io(&path, e))?;
    log::error!("non-finite step; batch written to {}", path.display());
    Ok(())
}

/// Pretrain from scratch, or resume from the latest epoch checkpoint in `dir`.
pub fn pretrain(
    config: &RunConfig,
    bench: &Benchmark,
    dir: &Path,
    resume: bool,
) -> Result<TrainState> {
    let state = match (resume, latest_checkpoint(dir)) {
        (true, Some(path)) => {
            log::info!("resuming from {}", path.display());
            TrainState::from_archive(config, &Archive::load(&path)?)?
        }
        _ => TrainState::new_pretrain(config, bench),
    };
    run_stage(state, bench, dir)
}

/// Finetune from a pretraining checkpoint, or resume from `dir`.
pub fn finetune(
    config: &RunConfig,
    bench: &Benchmark,
    pretrained: &Path,
    dir: &Path,
    resume: bool,
) -> Result<TrainState> {
    let state = match (resume, latest_checkpoint(dir)) {
        (true, Some(path)) => {
            log::info!("resuming from {}", path.display());
            TrainState::from_archive(config, &Archive::load(&path)?)?
        }
        _ => {
            let a = Archive::load(pretrained)?;
            check_hash(config, &a)?;
            TrainState::new_finetune(config, Model::from_archive(config, &a)?)
        }
    };
    run_stage(state, bench, dir)
}

/// Load the model part of any training checkpoint.
pub fn load_model(config: &RunConfig, path: &Path) -> Result<Model> {
    let a = Archive::load(path)?;
    check_hash(config, &a)?;
    Model::from_archive(config, &a)
}

/// Supports used at test time: the designated shots of every novel class and
/// `k` sampled instances of every base class.
pub fn evaluation_prototypes(
    model: &Model,
    bench: &Benchmark,
) -> Result<(Vec<usize>, crate::graph::Mat)> {
    let config = &model.config;
    let sampler = EpisodeSampler::new(&bench.train, &bench.split, config.support_min_points)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(EVAL_STREAM));
    let classes = bench.split.all_classes();
    let episode = sampler.sample_episode_for(&classes, bench.split.k, &mut rng)?;
    Ok((classes, model.class_prototypes(&episode.support)?))
}

/// Detect on every scene and score the result.
pub fn evaluate(
    model: &Model,
    bench: &Benchmark,
    scenes: &[PointCloudScene],
) -> Result<(ApReport, BTreeMap<String, Vec<Detection>>)> {
    let (classes, prototypes) = evaluation_prototypes(model, bench)?;
    let mut detections = BTreeMap::new();
    for scene in scenes {
        detections.insert(
            scene.scene_id.clone(),
            model.detect(scene, &prototypes, &classes)?,
        );
    }
    let report = evaluate_run(&detections, scenes, &bench.split)?;
    Ok((report, detections))
}

/// Write detections and both report formats into `dir`.
pub fn write_evaluation(
    dir: &Path,
    report: &ApReport,
    detections: &BTreeMap<String, Vec<Detection>>,
) -> Result<()> {
    let det_dir = dir.join("detections");
    std::fs::create_dir_all(&det_dir).map_err(|e| Error::io(&det_dir, e))?;
    for (id, dets) in detections {
        save_detections(&det_dir.join(format!("{id}.json")), dets)?;
    }
    let json = dir.join("report.json");
    std::fs::write(&json, report.to_json()).map_err(|e| Error::io(&json, e))?;
    let csv = dir.join("report.csv");
    std::fs::write(&csv, report.to_csv()).map_err(|e| Error::io(&csv, e))
}

/// Train on one fixed scene with every annotated class in every episode,
/// returning the per-step records.
pub fn overfit_scene(
    config: &RunConfig,
    bench: &Benchmark,
    scene_index: usize,
    steps: usize,
) -> Result<(TrainState, Vec<StepRecord>)> {
    let scene = bench.train[scene_index].clone();
    let single = Benchmark {
        categories: bench.categories.clone(),
        split: bench.split.clone(),
        train: vec![scene.clone()],
        test: vec![],
    };
    let mut state = TrainState::new_pretrain(config, &single);
    let sampler = EpisodeSampler::new(&single.train, &single.split, config.support_min_points)?;
    let classes: Vec<usize> = scene
        .class_ids()
        .into_iter()
        .filter(|c| !sampler.pool(*c).is_empty())
        .collect();
    let mut records = Vec::with_capacity(steps);
    for _ in 0..steps {
        let episodes = (0..config.batch_size)
            .map(|_| sampler.sample_episode_for(&classes, config.k_shot, &mut state.rng))
            .collect::<Result<Vec<_>>>()?;
        let batch = crate::episodes::build_batch(episodes)?;
        records.push(train_step(&mut state, &batch, config.lr)?);
        state.step += 1;
    }
    Ok((state, records))
}

/// Detect on the scene used by [`overfit_scene`] with prototypes drawn from
/// that scene, scoring its classes as one split.
pub fn score_scene(
    model: &Model,
    bench: &Benchmark,
    scene_index: usize,
) -> Result<(ApReport, Vec<Detection>)> {
    let scene = &bench.train[scene_index];
    let sampler = EpisodeSampler::new(
        std::slice::from_ref(scene),
        &bench.split,
        model.config.support_min_points,
    )?;
    let classes: Vec<usize> = scene
        .class_ids()
        .into_iter()
        .filter(|c| !sampler.pool(*c).is_empty())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(model.config.seed.wrapping_add(EVAL_STREAM));
    let episode = sampler.sample_episode_for(&classes, model.config.k_shot, &mut rng)?;
    let prototypes = model.class_prototypes(&episode.support)?;
    let detections = model.detect(scene, &prototypes, &classes)?;
    let split = DatasetSplit {
        base: classes,
        novel: vec![],
        k: model.config.k_shot,
        annotated: vec![],
    };
    let mut by_scene = BTreeMap::new();
    by_scene.insert(scene.scene_id.clone(), detections.clone());
    let report = evaluate_run(&by_scene, std::slice::from_ref(scene), &split)?;
    Ok((report, detections))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::generate_benchmark;

    fn tiny() -> RunConfig {
        RunConfig {
            steps_per_epoch: 2,
            ..RunConfig::smoke()
        }
    }

    #[test]
    fn rng_text_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let _: u64 = rand::Rng::gen(&mut rng);
        let back = rng_from_text(&rng_to_text(&rng)).unwrap();
        assert_eq!(back, rng);
        assert!(rng_from_text("zz:0:0").is_err());
    }

    #[test]
    fn resume_reproduces_uninterrupted_run() {
        let config = tiny();
        let bench = generate_benchmark(&config.benchmark()).unwrap();
        let full = tempfile::tempdir().unwrap();
        pretrain(&config, &bench, full.path(), false).unwrap();

        let part = tempfile::tempdir().unwrap();
        pretrain(&config, &bench, part.path(), false).unwrap();
        std::fs::remove_file(checkpoint_path(part.path(), 2)).unwrap();
        std::fs::remove_file(part.path().join("final.ckpt")).unwrap();
        pretrain(&config, &bench, part.path(), true).unwrap();

        for name in ["metrics.jsonl", "episodes.jsonl", "final.ckpt"] {
            let a = std::fs::read(full.path().join(name)).unwrap();
            let b = std::fs::read(part.path().join(name)).unwrap();
            assert!(a == b, "{name} differs after resume");
        }
    }

    #[test]
    fn mismatched_config_is_refused() {
        let config = tiny();
        let bench = generate_benchmark(&config.benchmark()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        pretrain(&config, &bench, dir.path(), false).unwrap();
        let other = RunConfig {
            lr: 0.001,
            ..tiny()
        };
        let err = pretrain(&other, &bench, dir.path(), true).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)), "{err}");
    }

    #[test]
    fn pretrain_logs_never_mention_novel_classes() {
        let config = tiny();
        let bench = generate_benchmark(&config.benchmark()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        pretrain(&config, &bench, dir.path(), false).unwrap();
        let text = std::fs::read_to_string(dir.path().join("episodes.jsonl")).unwrap();
        let mut n = 0;
        for line in text.lines() {
            let rec: AuditRecord = serde_json::from_str(line).unwrap();
            assert!(rec
                .episode
                .class_ids
                .iter()
                .all(|&c| bench.split.is_base(c)));
            n += 1;
        }
        assert_eq!(n, 2 * 2 * config.batch_size);
    }
}

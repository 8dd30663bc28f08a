//! Episodic N-way K-shot sampling.
//!
//! An episode pairs one query scene with `N x K` support instances cropped
//! from annotated training boxes. Pretraining draws classes from the base set
//! only; finetuning mixes base and novel classes, and novel supports can only
//! come from the designated shots (the only novel boxes the training scenes
//! keep).

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthdata::{Box3D, DatasetSplit, PointCloudScene, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
}

/// An annotated training instance that may serve as a support.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceRef {
    pub scene: usize,
    pub instance_id: usize,
    pub class_id: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SupportInstance {
    /// Points inside the source box, translated so the box center is the origin.
    pub points: Vec<Vec3>,
    pub class_id: usize,
    /// (scene_id, instance_id)
    pub source: (String, usize),
}

#[derive(Clone, Debug)]
pub struct Episode {
    pub query: Arc<PointCloudScene>,
    /// `support[n][k]` is the k-th shot of `class_ids[n]`.
    pub support: Vec<Vec<SupportInstance>>,
    pub class_ids: Vec<usize>,
}

impl Episode {
    pub fn n_way(&self) -> usize {
        self.class_ids.len()
    }

    pub fn k_shot(&self) -> usize {
        self.support.first().map_or(0, Vec::len)
    }

    /// Query boxes of the classes in play; the detection targets.
    pub fn targets(&self) -> Vec<Box3D> {
        self.query
            .boxes
            .iter()
            .filter(|b| self.class_ids.contains(&b.class_id))
            .cloned()
            .collect()
    }

    /// Episode-local class index of a global class id.
    pub fn slot_of(&self, class_id: usize) -> Option<usize> {
        self.class_ids.iter().position(|&c| c == class_id)
    }

    /// Every (scene_id, instance_id) whose annotation this episode uses:
    /// all supports plus the query targets.
    pub fn supervised_instances(&self) -> BTreeSet<(String, usize, usize)> {
        let mut out = BTreeSet::new();
        for (n, shots) in self.support.iter().enumerate() {
            for s in shots {
                out.insert((s.source.0.clone(), s.source.1, self.class_ids[n]));
            }
        }
        for b in self.targets() {
            out.insert((self.query.scene_id.clone(), b.instance_id, b.class_id));
        }
        out
    }

    pub fn record(&self) -> EpisodeRecord {
        EpisodeRecord {
            scene_id: self.query.scene_id.clone(),
            class_ids: self.class_ids.clone(),
            supports: self
                .support
                .iter()
                .flat_map(|shots| shots.iter().map(|s| s.source.clone()))
                .collect(),
            targets: self
                .targets()
                .iter()
                .map(|b| (b.instance_id, b.class_id))
                .collect(),
        }
    }
}

/// One line of the episode audit log.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub scene_id: String,
    pub class_ids: Vec<usize>,
    pub supports: Vec<(String, usize)>,
    /// (instance_id, class_id) of the query boxes used as targets.
    pub targets: Vec<(usize, usize)>,
}

/// Append-only JSON-lines audit of sampled episodes.
pub struct AuditLog<W: Write> {
    out: W,
}

impl<W: Write> AuditLog<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn log(&mut self, episode: &Episode) -> std::io::Result<()> {
        let line = serde_json::to_string(&episode.record()).expect("record serializes");
        writeln!(self.out, "{line}")
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

/// Crop the points inside `b` and center them. Crops with fewer than
/// `min_points` points are topped up by resampling with replacement.
pub fn crop_support(
    scene: &PointCloudScene,
    b: &Box3D,
    min_points: usize,
    rng: &mut impl Rng,
) -> Vec<Vec3> {
    let mut pts: Vec<Vec3> = scene
        .points
        .iter()
        .filter(|p| b.contains(p, 0.0))
        .map(|p| [p[0] - b.center[0], p[1] - b.center[1], p[2] - b.center[2]])
        .collect();
    if pts.is_empty() {
        pts.push([0.0; 3]);
    }
    let original = pts.len();
    while pts.len() < min_points {
        let i = rng.gen_range(0..original);
        pts.push(pts[i]);
    }
    pts
}

pub struct EpisodeSampler {
    scenes: Vec<Arc<PointCloudScene>>,
    split: DatasetSplit,
    pools: BTreeMap<usize, Vec<InstanceRef>>,
    /// Classes with a usable annotation, per scene.
    scene_classes: Vec<BTreeSet<usize>>,
    min_support_points: usize,
}

impl EpisodeSampler {
    pub fn new(
        train: &[PointCloudScene],
        split: &DatasetSplit,
        min_support_points: usize,
    ) -> Result<Self> {
        split.validate()?;
        let annotated: BTreeSet<(&str, usize)> = split
            .annotated
            .iter()
            .map(|(s, i)| (s.as_str(), *i))
            .collect();
        let mut pools: BTreeMap<usize, Vec<InstanceRef>> = BTreeMap::new();
        let mut scene_classes = vec![BTreeSet::new(); train.len()];
        for (si, scene) in train.iter().enumerate() {
            for b in &scene.boxes {
                let usable = split.is_base(b.class_id)
                    || (split.is_novel(b.class_id)
                        && annotated.contains(&(scene.scene_id.as_str(), b.instance_id)));
                if usable {
                    scene_classes[si].insert(b.class_id);
                    pools.entry(b.class_id).or_default().push(InstanceRef {
                        scene: si,
                        instance_id: b.instance_id,
                        class_id: b.class_id,
                    });
                }
            }
        }
        Ok(Self {
            scenes: train.iter().cloned().map(Arc::new).collect(),
            split: split.clone(),
            pools,
            scene_classes,
            min_support_points,
        })
    }

    pub fn split(&self) -> &DatasetSplit {
        &self.split
    }

    pub fn scenes(&self) -> &[Arc<PointCloudScene>] {
        &self.scenes
    }

    /// Classes eligible in `stage` that have at least one annotated instance.
    pub fn eligible_classes(&self, stage: Stage) -> Vec<usize> {
        let allowed: Vec<usize> = match stage {
            Stage::Pretrain => self.split.base.clone(),
            Stage::Finetune => self.split.all_classes(),
        };
        allowed
            .into_iter()
            .filter(|c| self.pools.get(c).is_some_and(|p| !p.is_empty()))
            .collect()
    }

    pub fn pool(&self, class_id: usize) -> &[InstanceRef] {
        self.pools.get(&class_id).map_or(&[], Vec::as_slice)
    }

    pub fn sample_classes(
        &self,
        stage: Stage,
        n_way: usize,
        rng: &mut impl Rng,
    ) -> Result<Vec<usize>> {
        let eligible = self.eligible_classes(stage);
        if n_way == 0 || n_way > eligible.len() {
            return Err(Error::Config(format!(
                "n_way = {n_way} but only {} classes are available for {stage:?}",
                eligible.len()
            )));
        }
        let mut classes: Vec<usize> = eligible.choose_multiple(rng, n_way).copied().collect();
        classes.sort_unstable();
        Ok(classes)
    }

    pub fn sample_episode(
        &self,
        stage: Stage,
        n_way: usize,
        k_shot: usize,
        rng: &mut impl Rng,
    ) -> Result<Episode> {
        let classes = self.sample_classes(stage, n_way, rng)?;
        self.sample_episode_for(&classes, k_shot, rng)
    }

    /// An episode over a fixed class list.
    pub fn sample_episode_for(
        &self,
        classes: &[usize],
        k_shot: usize,
        rng: &mut impl Rng,
    ) -> Result<Episode> {
        if k_shot == 0 {
            return Err(Error::Config("k_shot must be at least 1".into()));
        }
        let queries: Vec<usize> = self
            .scene_classes
            .iter()
            .enumerate()
            .filter(|(_, have)| classes.iter().any(|c| have.contains(c)))
            .map(|(si, _)| si)
            .collect();
        let &query = queries.choose(rng).ok_or_else(|| {
            Error::Config(format!(
                "no training scene contains any of the classes {classes:?}"
            ))
        })?;
        let mut support = Vec::with_capacity(classes.len());
        for &c in classes {
            let pool = self.pool(c);
            if pool.is_empty() {
                return Err(Error::Config(format!(
                    "class {c} has no annotated instance"
                )));
            }
            let picks: Vec<&InstanceRef> = if pool.len() >= k_shot {
                pool.choose_multiple(rng, k_shot).collect()
            } else {
                (0..k_shot)
                    .map(|_| pool.choose(rng).expect("non-empty"))
                    .collect()
            };
            let shots = picks
                .into_iter()
                .map(|r| {
                    let scene = &self.scenes[r.scene];
                    let b = scene
                        .box_by_instance(r.instance_id)
                        .expect("pooled box exists");
                    SupportInstance {
                        points: crop_support(scene, b, self.min_support_points, rng),
                        class_id: c,
                        source: (scene.scene_id.clone(), r.instance_id),
                    }
                })
                .collect();
            support.push(shots);
        }
        Ok(Episode {
            query: Arc::clone(&self.scenes[query]),
            support,
            class_ids: classes.to_vec(),
        })
    }

    /// `batch` episodes sharing one sampled class list, so class `n` means the
    /// same category in every task of the batch.
    pub fn sample_batch(
        &self,
        stage: Stage,
        batch: usize,
        n_way: usize,
        k_shot: usize,
        rng: &mut impl Rng,
    ) -> Result<EpisodeBatch> {
        let classes = self.sample_classes(stage, n_way, rng)?;
        let episodes = (0..batch)
            .map(|_| self.sample_episode_for(&classes, k_shot, rng))
            .collect::<Result<Vec<_>>>()?;
        build_batch(episodes)
    }
}

#[derive(Clone, Debug)]
pub struct EpisodeBatch {
    pub episodes: Vec<Episode>,
    pub n_way: usize,
    pub k_shot: usize,
    /// The semantic contrastive loss needs at least two tasks over the same
    /// class list.
    pub scl_feasible: bool,
}

impl EpisodeBatch {
    pub fn size(&self) -> usize {
        self.episodes.len()
    }

    /// The K supports of class slot `n` in task `b`.
    pub fn supports(&self, b: usize, n: usize) -> &[SupportInstance] {
        &self.episodes[b].support[n]
    }
}

pub fn build_batch(episodes: Vec<Episode>) -> Result<EpisodeBatch> {
    let first = episodes
        .first()
        .ok_or_else(|| Error::Config("batch size must be at least 1".into()))?;
    let (n_way, k_shot) = (first.n_way(), first.k_shot());
    for (i, e) in episodes.iter().enumerate() {
        if e.n_way() != n_way || e.support.iter().any(|s| s.len() != k_shot) {
            return Err(Error::Config(format!(
                "episode {i} is {}-way {}-shot, batch is {n_way}-way {k_shot}-shot",
                e.n_way(),
                e.k_shot()
            )));
        }
    }
    let same_classes = episodes.iter().all(|e| e.class_ids == first.class_ids);
    let scl_feasible = episodes.len() >= 2 && same_classes;
    Ok(EpisodeBatch {
        episodes,
        n_way,
        k_shot,
        scl_feasible,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_benchmark, BenchmarkConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_bench(k: usize) -> crate::synthdata::Benchmark {
        generate_benchmark(&BenchmarkConfig {
            n_train: 30,
            n_test: 2,
            k,
            ..BenchmarkConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn pretrain_episode_shape() {
        let bench = small_bench(2);
        let sampler = EpisodeSampler::new(&bench.train, &bench.split, 128).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ep = sampler
            .sample_episode(Stage::Pretrain, 4, 2, &mut rng)
            .unwrap();
        assert_eq!(ep.support.len(), 4);
        assert!(ep.support.iter().all(|s| s.len() == 2));
        assert_eq!(ep.support.iter().map(Vec::len).sum::<usize>(), 8);
        assert!(ep.class_ids.iter().all(|c| bench.split.is_base(*c)));
        assert!(!ep.targets().is_empty());
        for shots in &ep.support {
            for s in shots {
                assert!(s.points.len() >= 128);
            }
        }
    }

    #[test]
    fn one_shot_novel_support_is_the_designated_instance() {
        let bench = small_bench(1);
        let sampler = EpisodeSampler::new(&bench.train, &bench.split, 128).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let novel = bench.split.novel[0];
        let shot = bench
            .split
            .annotated
            .iter()
            .find(|(sid, iid)| {
                bench
                    .train
                    .iter()
                    .find(|s| &s.scene_id == sid)
                    .and_then(|s| s.box_by_instance(*iid))
                    .is_some_and(|b| b.class_id == novel)
            })
            .unwrap()
            .clone();
        for _ in 0..20 {
            let ep = sampler
                .sample_episode_for(&[bench.split.base[0], novel], 1, &mut rng)
                .unwrap();
            assert_eq!(ep.support[1][0].source, shot);
        }
    }

    #[test]
    fn too_many_ways_is_a_config_error() {
        let bench = small_bench(1);
        let sampler = EpisodeSampler::new(&bench.train, &bench.split, 128).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let err = sampler
            .sample_episode(Stage::Pretrain, 9, 1, &mut rng)
            .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn batch_flags_and_errors() {
        let bench = small_bench(1);
        let sampler = EpisodeSampler::new(&bench.train, &bench.split, 64).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let single = sampler
            .sample_batch(Stage::Pretrain, 1, 2, 1, &mut rng)
            .unwrap();
        assert!(!single.scl_feasible);
        let pair = sampler
            .sample_batch(Stage::Pretrain, 2, 2, 1, &mut rng)
            .unwrap();
        assert!(pair.scl_feasible);
        assert_eq!(
            pair.episodes
                .iter()
                .map(|e| e.support.iter().map(Vec::len).sum::<usize>())
                .sum::<usize>(),
            4
        );

        let a = sampler
            .sample_episode(Stage::Pretrain, 2, 1, &mut rng)
            .unwrap();
        let b = sampler
            .sample_episode(Stage::Pretrain, 3, 1, &mut rng)
            .unwrap();
        assert!(build_batch(vec![a, b]).is_err());
        assert!(build_batch(vec![]).is_err());
    }

    #[test]
    fn crop_is_centered_and_resampled() {
        let bench = small_bench(1);
        let scene = &bench.train[0];
        let b = &scene.boxes[0];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let crop = crop_support(scene, b, 2000, &mut rng);
        assert_eq!(crop.len(), 2000);
        for p in &crop {
            for a in 0..3 {
                assert!(p[a].abs() <= 0.5 * b.size[a] + 1e-12);
            }
        }
    }
}

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::io::quantize;
use super::shapes::{catalog, CategorySpec};
use super::{Box3D, DatasetSplit, PointCloudScene, Vec3, BACKGROUND};
use crate::error::{Error, Result};

/// Free difficulty knobs of the generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneParams {
    /// Standard deviation of the per-coordinate Gaussian jitter (meters).
    pub noise: f64,
    /// Range of the background share of all points.
    pub background_fraction: (f64, f64),
    pub min_points: usize,
    pub wall_height: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            noise: 0.01,
            background_fraction: (0.3, 0.5),
            min_points: 1024,
            wall_height: 2.0,
        }
    }
}

struct Placed {
    spec: usize,
    size: Vec3,
    points: usize,
    center: Vec3,
}

fn overlaps(a: &Placed, b: &Placed, margin: f64) -> bool {
    (0..2).all(|k| (a.center[k] - b.center[k]).abs() < 0.5 * (a.size[k] + b.size[k]) + margin)
}

/// Place objects on a square floor without footprint overlap, growing the room
/// until every object fits.
fn layout(objects: &mut [Placed], rng: &mut impl Rng) -> f64 {
    const GAP: f64 = 0.1;
    const WALL_GAP: f64 = 0.1;
    let footprint: f64 = objects
        .iter()
        .map(|o| (o.size[0] + 2.0 * GAP) * (o.size[1] + 2.0 * GAP))
        .sum();
    let mut side = (footprint * 2.5).sqrt().max(3.0);
    'grow: loop {
        for i in 0..objects.len() {
            let mut placed = false;
            for _ in 0..400 {
                let (sx, sy) = (objects[i].size[0], objects[i].size[1]);
                let lo_x = WALL_GAP + 0.5 * sx;
                let lo_y = WALL_GAP + 0.5 * sy;
                let hi_x = side - lo_x;
                let hi_y = side - lo_y;
                if hi_x <= lo_x || hi_y <= lo_y {
                    break;
                }
                objects[i].center = [
                    rng.gen_range(lo_x..hi_x),
                    rng.gen_range(lo_y..hi_y),
                    0.5 * objects[i].size[2],
                ];
                if objects[..i].iter().all(|o| !overlaps(o, &objects[i], GAP)) {
                    placed = true;
                    break;
                }
            }
            if !placed {
                side *= 1.15;
                continue 'grow;
            }
        }
        return side;
    }
}

fn jittered(p: Vec3, noise: &Normal<f64>, rng: &mut impl Rng) -> Vec3 {
    [
        quantize(p[0] + noise.sample(rng)),
        quantize(p[1] + noise.sample(rng)),
        quantize(p[2] + noise.sample(rng)),
    ]
}

fn sample_object(spec: &CategorySpec, size: Vec3, count: usize, rng: &mut impl Rng) -> Vec<Vec3> {
    let patches = spec.shape_program.patches(size);
    let mut cumulative = Vec::with_capacity(patches.len());
    let mut total = 0.0;
    for p in &patches {
        total += p.area();
        cumulative.push(total);
    }
    (0..count)
        .map(|_| {
            let r = rng.gen::<f64>() * total;
            let idx = cumulative
                .partition_point(|&c| c < r)
                .min(patches.len() - 1);
            patches[idx].sample(rng)
        })
        .collect()
}

/// One scene with default difficulty parameters and id derived from the seed.
pub fn generate_scene(
    specs: &[CategorySpec],
    objects: (usize, usize),
    rng_seed: u64,
) -> Result<PointCloudScene> {
    generate_scene_with(
        specs,
        objects,
        rng_seed,
        &SceneParams::default(),
        &format!("scene_{rng_seed:08}"),
    )
}

/// Generate one scene. Output is a pure function of the arguments.
pub fn generate_scene_with(
    specs: &[CategorySpec],
    objects: (usize, usize),
    rng_seed: u64,
    params: &SceneParams,
    scene_id: &str,
) -> Result<PointCloudScene> {
    if specs.is_empty() {
        return Err(Error::Config(
            "scene generation needs at least one category".into(),
        ));
    }
    for s in specs {
        s.validate()?;
    }
    if objects.0 == 0 || objects.1 < objects.0 {
        return Err(Error::Config(format!(
            "objects-per-scene range {}..{} is empty",
            objects.0, objects.1
        )));
    }
    if !(params.noise >= 0.0) {
        return Err(Error::Config("noise must be non-negative".into()));
    }
    let (bf_lo, bf_hi) = params.background_fraction;
    if !(0.0..1.0).contains(&bf_lo) || !(bf_lo..1.0).contains(&bf_hi) {
        return Err(Error::Config(format!(
            "background fraction range {bf_lo}..{bf_hi} must lie in [0, 1)"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let noise = Normal::new(0.0, params.noise).expect("finite noise");
    let count = rng.gen_range(objects.0..=objects.1);
    let mut placed: Vec<Placed> = (0..count)
        .map(|_| {
            let spec = rng.gen_range(0..specs.len());
            let size = specs[spec].sample_size(&mut rng).map(quantize);
            let points = specs[spec].sample_point_count(&mut rng);
            Placed {
                spec,
                size,
                points,
                center: [0.0; 3],
            }
        })
        .collect();
    let side = layout(&mut placed, &mut rng);

    let mut points = Vec::new();
    let mut point_instance = Vec::new();
    let mut boxes = Vec::with_capacity(placed.len());
    for (instance_id, obj) in placed.iter_mut().enumerate() {
        obj.center = obj.center.map(quantize);
        let spec = &specs[obj.spec];
        for local in sample_object(spec, obj.size, obj.points, &mut rng) {
            let p = [
                local[0] + obj.center[0],
                local[1] + obj.center[1],
                local[2] + obj.center[2],
            ];
            points.push(jittered(p, &noise, &mut rng));
            point_instance.push(instance_id as i64);
        }
        boxes.push(Box3D::new(obj.center, obj.size, spec.class_id, instance_id));
    }

    let object_points = points.len();
    let fraction = if bf_hi > bf_lo {
        rng.gen_range(bf_lo..=bf_hi)
    } else {
        bf_lo
    };
    let mut n_background = (object_points as f64 * fraction / (1.0 - fraction)).round() as usize;
    if object_points + n_background < params.min_points {
        n_background = params.min_points - object_points;
    }
    let floor_area = side * side;
    let wall_area = side * params.wall_height;
    let total_area = floor_area + 2.0 * wall_area;
    let mut emitted = 0;
    while emitted < n_background {
        let r = rng.gen::<f64>() * total_area;
        let p = if r < floor_area {
            let p = [rng.gen_range(0.0..side), rng.gen_range(0.0..side), 0.0];
            if placed
                .iter()
                .any(|o| (0..2).all(|k| (p[k] - o.center[k]).abs() <= 0.5 * o.size[k]))
            {
                continue;
            }
            p
        } else if r < floor_area + wall_area {
            [
                0.0,
                rng.gen_range(0.0..side),
                rng.gen_range(0.0..params.wall_height),
            ]
        } else {
            [
                rng.gen_range(0.0..side),
                0.0,
                rng.gen_range(0.0..params.wall_height),
            ]
        };
        points.push(jittered(p, &noise, &mut rng));
        point_instance.push(BACKGROUND);
        emitted += 1;
    }

    Ok(PointCloudScene {
        scene_id: scene_id.to_string(),
        points,
        point_instance,
        boxes,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkConfig {
    pub n_base: usize,
    pub n_novel: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub k: usize,
    pub objects: (usize, usize),
    pub points_per_object: (usize, usize),
    pub seed: u64,
    pub scene: SceneParams,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            n_base: 8,
            n_novel: 4,
            n_train: 200,
            n_test: 50,
            k: 5,
            objects: (4, 8),
            points_per_object: (180, 360),
            seed: 1,
            scene: SceneParams::default(),
        }
    }
}

/// A generated few-shot benchmark. Training scenes keep only base-class boxes
/// and the designated novel shots; all other novel objects stay in the point
/// cloud as unlabeled background.
#[derive(Clone, Debug, PartialEq)]
pub struct Benchmark {
    pub categories: Vec<CategorySpec>,
    pub split: DatasetSplit,
    pub train: Vec<PointCloudScene>,
    pub test: Vec<PointCloudScene>,
}

pub fn generate_benchmark(cfg: &BenchmarkConfig) -> Result<Benchmark> {
    if cfg.n_base < 2 {
        return Err(Error::Config(format!(
            "need at least 2 base classes, got {}",
            cfg.n_base
        )));
    }
    if cfg.n_novel < 1 {
        return Err(Error::Config("need at least 1 novel class".into()));
    }
    if cfg.k < 1 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let n_classes = cfg.n_base + cfg.n_novel;
    let categories = catalog(n_classes, cfg.points_per_object);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut ids: Vec<usize> = (0..n_classes).collect();
    ids.shuffle(&mut rng);
    let mut base = ids[..cfg.n_base].to_vec();
    let mut novel = ids[cfg.n_base..].to_vec();
    base.sort_unstable();
    novel.sort_unstable();

    let train_seeds: Vec<u64> = (0..cfg.n_train).map(|_| rng.gen()).collect();
    let test_seeds: Vec<u64> = (0..cfg.n_test).map(|_| rng.gen()).collect();
    let mut train = train_seeds
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            generate_scene_with(
                &categories,
                cfg.objects,
                s,
                &cfg.scene,
                &format!("train_{i:04}"),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let test = test_seeds
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            generate_scene_with(
                &categories,
                cfg.objects,
                s,
                &cfg.scene,
                &format!("test_{i:04}"),
            )
        })
        .collect::<Result<Vec<_>>>()?;

    let mut annotated = Vec::new();
    for &class in &novel {
        let candidates: Vec<(String, usize)> = train
            .iter()
            .flat_map(|s| {
                s.boxes
                    .iter()
                    .filter(|b| b.class_id == class)
                    .map(|b| (s.scene_id.clone(), b.instance_id))
            })
            .collect();
        if candidates.len() < cfg.k {
            return Err(Error::Config(format!(
                "novel class {class} has {} training instances, fewer than k = {}",
                candidates.len(),
                cfg.k
            )));
        }
        let mut chosen: Vec<(String, usize)> = candidates
            .choose_multiple(&mut rng, cfg.k)
            .cloned()
            .collect();
        chosen.sort();
        annotated.extend(chosen);
    }
    annotated.sort();

    for scene in &mut train {
        let keep = |b: &Box3D| {
            !novel.contains(&b.class_id)
                || annotated
                    .iter()
                    .any(|(sid, iid)| *sid == scene.scene_id && *iid == b.instance_id)
        };
        let dropped: Vec<usize> = scene
            .boxes
            .iter()
            .filter(|b| !keep(b))
            .map(|b| b.instance_id)
            .collect();
        scene.boxes.retain(|b| keep(b));
        for tag in &mut scene.point_instance {
            if *tag >= 0 && dropped.contains(&(*tag as usize)) {
                *tag = BACKGROUND;
            }
        }
    }

    Ok(Benchmark {
        categories,
        split: DatasetSplit {
            base,
            novel,
            k: cfg.k,
            annotated,
        },
        train,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_object_scene_is_contained() {
        let specs = catalog(1, (200, 300));
        let scene = generate_scene(&specs, (1, 1), 7).unwrap();
        assert_eq!(scene.boxes.len(), 1);
        assert!(scene.num_points() >= 1024);
        let b = &scene.boxes[0];
        for (p, &t) in scene.points.iter().zip(&scene.point_instance) {
            if t == 0 {
                assert!(b.distance_outside(p) <= 4.0 * 0.01 * 3f64.sqrt());
            }
        }
        scene.validate(0.07).unwrap();
    }

    #[test]
    fn same_seed_same_scene() {
        let specs = catalog(5, (150, 250));
        let a = generate_scene(&specs, (2, 4), 11).unwrap();
        let b = generate_scene(&specs, (2, 4), 11).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(&specs, (2, 4), 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn background_share_and_boxes_on_floor() {
        let specs = catalog(12, (180, 360));
        for seed in 0..5 {
            let s = generate_scene(&specs, (4, 8), seed).unwrap();
            let bg = s
                .point_instance
                .iter()
                .filter(|&&t| t == BACKGROUND)
                .count();
            let frac = bg as f64 / s.num_points() as f64;
            assert!((0.29..=0.51).contains(&frac), "background fraction {frac}");
            for b in &s.boxes {
                assert!((b.center[2] - 0.5 * b.size[2]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn empty_spec_set_is_rejected() {
        assert!(matches!(
            generate_scene(&[], (1, 2), 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn too_few_novel_instances_fail() {
        let cfg = BenchmarkConfig {
            n_train: 2,
            n_test: 1,
            k: 50,
            ..BenchmarkConfig::default()
        };
        assert!(matches!(generate_benchmark(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn degenerate_class_counts_are_rejected() {
        let cfg = BenchmarkConfig {
            n_base: 1,
            ..BenchmarkConfig::default()
        };
        assert!(generate_benchmark(&cfg).is_err());
    }
}

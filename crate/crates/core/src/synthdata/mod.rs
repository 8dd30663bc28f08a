//! Synthetic indoor-like scenes built from explicit geometric primitives.
//!
//! Every object is a composition of planar patches (faces, thin slabs, facet
//! prisms) so its local geometry (faces, edges, corners) is known exactly.
//! Scenes carry axis-aligned ground-truth boxes, per-point instance tags and a
//! floor plus two walls as background.

mod generate;
mod io;
mod shapes;

pub use generate::{
    generate_benchmark, generate_scene, generate_scene_with, Benchmark, BenchmarkConfig,
    SceneParams,
};
pub use io::{
    format_sig9, load_benchmark, load_scene, load_split, parse_scene, quantize, save_benchmark,
    save_scene, save_split, scene_path, scene_to_string, split_to_string,
};
pub use shapes::{catalog, CategorySpec, ShapeProgram};

use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

/// Background tag in `point_instance`.
pub const BACKGROUND: i64 = -1;

/// Axis-aligned ground-truth box. `heading` is always zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: Vec3,
    pub size: Vec3,
    pub heading: f64,
    pub class_id: usize,
    pub instance_id: usize,
}

impl Box3D {
    pub fn new(center: Vec3, size: Vec3, class_id: usize, instance_id: usize) -> Self {
        Self {
            center,
            size,
            heading: 0.0,
            class_id,
            instance_id,
        }
    }

    pub fn min_corner(&self) -> Vec3 {
        [
            self.center[0] - 0.5 * self.size[0],
            self.center[1] - 0.5 * self.size[1],
            self.center[2] - 0.5 * self.size[2],
        ]
    }

    pub fn max_corner(&self) -> Vec3 {
        [
            self.center[0] + 0.5 * self.size[0],
            self.center[1] + 0.5 * self.size[1],
            self.center[2] + 0.5 * self.size[2],
        ]
    }

    /// Closed containment test, with the box grown by `margin` on every side.
    pub fn contains(&self, p: &Vec3, margin: f64) -> bool {
        (0..3).all(|a| (p[a] - self.center[a]).abs() <= 0.5 * self.size[a] + margin)
    }

    /// Euclidean distance from `p` to the box; zero inside.
    pub fn distance_outside(&self, p: &Vec3) -> f64 {
        (0..3)
            .map(|a| {
                let d = (p[a] - self.center[a]).abs() - 0.5 * self.size[a];
                d.max(0.0).powi(2)
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn volume(&self) -> f64 {
        self.size.iter().product()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloudScene {
    pub scene_id: String,
    pub points: Vec<Vec3>,
    /// Owning instance per point, or [`BACKGROUND`].
    pub point_instance: Vec<i64>,
    pub boxes: Vec<Box3D>,
}

impl PointCloudScene {
    pub fn num_points(&self) -> usize {
        self.points.len()
    }

    pub fn box_by_instance(&self, instance_id: usize) -> Option<&Box3D> {
        self.boxes.iter().find(|b| b.instance_id == instance_id)
    }

    /// Points tagged with `instance_id`.
    pub fn instance_points(&self, instance_id: usize) -> Vec<Vec3> {
        self.points
            .iter()
            .zip(&self.point_instance)
            .filter(|(_, &t)| t == instance_id as i64)
            .map(|(p, _)| *p)
            .collect()
    }

    pub fn class_ids(&self) -> BTreeSet<usize> {
        self.boxes.iter().map(|b| b.class_id).collect()
    }

    /// Check the structural invariants: positive sizes, unique instance ids,
    /// tags referring to existing boxes, tagged points inside their box up to
    /// `margin`.
    pub fn validate(&self, margin: f64) -> Result<()> {
        if self.points.len() != self.point_instance.len() {
            return Err(Error::Invalid(format!(
                "scene {}: {} points but {} instance tags",
                self.scene_id,
                self.points.len(),
                self.point_instance.len()
            )));
        }
        let mut seen = HashSet::new();
        for b in &self.boxes {
            if b.size.iter().any(|&s| !(s > 0.0)) {
                return Err(Error::Invalid(format!(
                    "scene {}: box {} has non-positive size {:?}",
                    self.scene_id, b.instance_id, b.size
                )));
            }
            if !seen.insert((b.class_id, b.instance_id)) {
                return Err(Error::Invalid(format!(
                    "scene {}: duplicate (class, instance) ({}, {})",
                    self.scene_id, b.class_id, b.instance_id
                )));
            }
        }
        for (i, (&tag, p)) in self.point_instance.iter().zip(&self.points).enumerate() {
            if tag == BACKGROUND {
                continue;
            }
            let b = usize::try_from(tag)
                .ok()
                .and_then(|id| self.box_by_instance(id))
                .ok_or_else(|| {
                    Error::Invalid(format!(
                        "scene {}: point {i} tagged with unknown instance {tag}",
                        self.scene_id
                    ))
                })?;
            if margin.is_finite() && b.distance_outside(p) > margin {
                return Err(Error::Invalid(format!(
                    "scene {}: point {i} lies {:.4} m outside box {tag}",
                    self.scene_id,
                    b.distance_outside(p)
                )));
            }
        }
        Ok(())
    }
}

/// Base/novel partition and the designated novel-class shots.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub base: Vec<usize>,
    pub novel: Vec<usize>,
    pub k: usize,
    /// (scene_id, instance_id) of every annotated novel instance.
    pub annotated: Vec<(String, usize)>,
}

impl DatasetSplit {
    pub fn is_base(&self, class_id: usize) -> bool {
        self.base.contains(&class_id)
    }

    pub fn is_novel(&self, class_id: usize) -> bool {
        self.novel.contains(&class_id)
    }

    pub fn all_classes(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.base.iter().chain(&self.novel).copied().collect();
        all.sort_unstable();
        all
    }

    pub fn validate(&self) -> Result<()> {
        let base: HashSet<_> = self.base.iter().collect();
        if let Some(c) = self.novel.iter().find(|c| base.contains(c)) {
            return Err(Error::Invalid(format!("class {c} is both base and novel")));
        }
        if self.k == 0 {
            return Err(Error::Invalid("k must be at least 1".into()));
        }
        Ok(())
    }
}

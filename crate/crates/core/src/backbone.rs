//! Two-level set-abstraction point encoder.
//!
//! Each level picks centers by farthest-point sampling, groups neighbors inside
//! a ball, runs a shared MLP over `[relative xyz / radius, feature]` rows and
//! max-pools each group. Input points are put in lexicographic order first,
//! which makes the encoder invariant to input permutation; every feature is a
//! function of relative coordinates only, which makes it invariant to
//! translation.

use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::nn::{Ctx, ParamStore, SharedMlp};
use crate::synthdata::{Box3D, Vec3};

#[derive(Clone, Debug, PartialEq)]
pub struct LevelConfig {
    pub points: usize,
    pub radius: f64,
    pub nsample: usize,
    pub widths: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub sa1: LevelConfig,
    /// `sa2.points` is the seed count M; its last width is the feature width d.
    pub sa2: LevelConfig,
    /// Center counts of the two levels when encoding a support crop.
    pub support_points: (usize, usize),
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            sa1: LevelConfig {
                points: 512,
                radius: 0.2,
                nsample: 16,
                widths: vec![64, 64, 128],
            },
            sa2: LevelConfig {
                points: 256,
                radius: 0.4,
                nsample: 16,
                widths: vec![128, 128, 256],
            },
            support_points: (64, 32),
        }
    }
}

impl BackboneConfig {
    pub fn num_seeds(&self) -> usize {
        self.sa2.points
    }

    pub fn feature_dim(&self) -> usize {
        *self.sa2.widths.last().expect("non-empty widths")
    }
}

/// Seed descriptors `f (M x d)` with positions `(M x 3)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedFeatureSet {
    pub features: Array2<f64>,
    pub positions: Vec<Vec3>,
    pub foreground_mask: Vec<bool>,
    /// Prototype index per seed, `-1` when unassigned.
    pub primitive_label: Vec<i64>,
}

impl SeedFeatureSet {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Seeds still attached to a forward pass.
#[derive(Clone, Debug)]
pub struct SeedVars {
    pub features: Var,
    pub positions: Vec<Vec3>,
}

fn dist2(a: &Vec3, b: &Vec3) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Points sorted lexicographically by (x, y, z).
pub fn canonical_order(points: &[Vec3]) -> Vec<Vec3> {
    let mut out = points.to_vec();
    out.sort_by(|a, b| {
        a[0].total_cmp(&b[0])
            .then(a[1].total_cmp(&b[1]))
            .then(a[2].total_cmp(&b[2]))
    });
    out
}

/// Farthest-point sampling starting from index 0; ties go to the lowest index.
pub fn farthest_point_sample(points: &[Vec3], n: usize) -> Vec<usize> {
    let n = n.min(points.len());
    if n == 0 {
        return Vec::new();
    }
    let mut chosen = Vec::with_capacity(n);
    let mut nearest = vec![f64::INFINITY; points.len()];
    let mut current = 0;
    chosen.push(current);
    while chosen.len() < n {
        let c = points[current];
        let mut best = 0;
        let mut best_d = -1.0;
        for (i, p) in points.iter().enumerate() {
            let d = dist2(p, &c);
            if d < nearest[i] {
                nearest[i] = d;
            }
            if nearest[i] > best_d {
                best_d = nearest[i];
                best = i;
            }
        }
        current = best;
        chosen.push(current);
    }
    chosen
}

/// For every center, up to `nsample` neighbor indices within `radius` in index
/// order, padded by repeating the first neighbor. Returns a flat
/// `centers.len() * nsample` index list.
pub fn ball_query(points: &[Vec3], centers: &[Vec3], radius: f64, nsample: usize) -> Vec<usize> {
    let r2 = radius * radius;
    let mut out = Vec::with_capacity(centers.len() * nsample);
    for c in centers {
        let start = out.len();
        for (i, p) in points.iter().enumerate() {
            if dist2(p, c) <= r2 {
                out.push(i);
                if out.len() - start == nsample {
                    break;
                }
            }
        }
        if out.len() == start {
            let nearest = points
                .iter()
                .enumerate()
                .min_by(|a, b| dist2(a.1, c).total_cmp(&dist2(b.1, c)))
                .map(|(i, _)| i)
                .expect("non-empty point set");
            out.push(nearest);
        }
        let first = out[start];
        while out.len() - start < nsample {
            out.push(first);
        }
    }
    out
}

#[derive(Clone, Debug)]
struct SetAbstraction {
    radius: f64,
    nsample: usize,
    mlp: SharedMlp,
}

impl SetAbstraction {
    fn forward(
        &self,
        ctx: &mut Ctx,
        xyz: &[Vec3],
        features: Option<Var>,
        npoint: usize,
    ) -> (Vec<Vec3>, Var) {
        let centers_idx = farthest_point_sample(xyz, npoint);
        let centers: Vec<Vec3> = centers_idx.iter().map(|&i| xyz[i]).collect();
        let group = ball_query(xyz, &centers, self.radius, self.nsample);
        let rel = Array2::from_shape_fn((group.len(), 3), |(r, a)| {
            let c = centers[r / self.nsample];
            (xyz[group[r]][a] - c[a]) / self.radius
        });
        let rel = ctx.g.constant(rel);
        let input = match features {
            Some(f) => {
                let gathered = ctx.g.gather_rows(f, &group);
                ctx.g.concat_cols(&[rel, gathered])
            }
            None => rel,
        };
        let h = self.mlp.forward(ctx, input);
        let offsets: Vec<usize> = (0..=centers.len()).map(|s| s * self.nsample).collect();
        let pooled = ctx.g.segment_max(h, &offsets);
        (centers, pooled)
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    sa1: SetAbstraction,
    sa2: SetAbstraction,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, config: &BackboneConfig) -> Self {
        let sa1 = SetAbstraction {
            radius: config.sa1.radius,
            nsample: config.sa1.nsample,
            mlp: SharedMlp::new(store, rng, "backbone.sa1", 3, &config.sa1.widths),
        };
        let sa2 = SetAbstraction {
            radius: config.sa2.radius,
            nsample: config.sa2.nsample,
            mlp: SharedMlp::new(
                store,
                rng,
                "backbone.sa2",
                3 + sa1.mlp.output_width(),
                &config.sa2.widths,
            ),
        };
        Self {
            config: config.clone(),
            sa1,
            sa2,
        }
    }

    fn encode(&self, ctx: &mut Ctx, points: &[Vec3], counts: (usize, usize)) -> SeedVars {
        let pts = canonical_order(points);
        let (xyz1, f1) = self.sa1.forward(ctx, &pts, None, counts.0.min(pts.len()));
        let (xyz2, f2) = self
            .sa2
            .forward(ctx, &xyz1, Some(f1), counts.1.min(xyz1.len()));
        SeedVars {
            features: f2,
            positions: xyz2,
        }
    }

    /// Scene seeds on the tape: `M x d` features and their positions.
    pub fn encode_scene_vars(&self, ctx: &mut Ctx, points: &[Vec3]) -> Result<SeedVars> {
        let m = self.config.num_seeds();
        if points.len() < m {
            return Err(Error::Invalid(format!(
                "scene has {} points but {m} seeds are requested; resample the input to at least {m} points",
                points.len()
            )));
        }
        Ok(self.encode(ctx, points, (self.config.sa1.points.max(m), m)))
    }

    /// Mean seed feature of a support crop, `1 x d`.
    pub fn encode_support_var(&self, ctx: &mut Ctx, points: &[Vec3]) -> Result<Var> {
        if points.is_empty() {
            return Err(Error::Invalid("support instance has no points".into()));
        }
        let seeds = self.encode(ctx, points, self.config.support_points);
        Ok(ctx.g.mean_rows(seeds.features))
    }
}

/// Encode a scene outside of training.
pub fn encode_scene(
    points: &[Vec3],
    backbone: &Backbone,
    params: &ParamStore,
) -> Result<SeedFeatureSet> {
    let mut ctx = Ctx::new(params);
    let seeds = backbone.encode_scene_vars(&mut ctx, points)?;
    let m = seeds.positions.len();
    Ok(SeedFeatureSet {
        features: ctx.g.value(seeds.features).clone(),
        positions: seeds.positions,
        foreground_mask: vec![false; m],
        primitive_label: vec![-1; m],
    })
}

/// Instance feature of a support crop: the unweighted mean of its seed features.
pub fn encode_support(
    points: &[Vec3],
    backbone: &Backbone,
    params: &ParamStore,
) -> Result<Vec<f64>> {
    let mut ctx = Ctx::new(params);
    let v = backbone.encode_support_var(&mut ctx, points)?;
    Ok(ctx.g.value(v).row(0).to_vec())
}

/// `mask[i]` is true iff seed `i` lies inside some box (closed).
pub fn foreground_mask(positions: &[Vec3], boxes: &[Box3D]) -> Vec<bool> {
    positions
        .iter()
        .map(|p| boxes.iter().any(|b| b.contains(p, 0.0)))
        .collect()
}

pub fn mark_foreground(mut seeds: SeedFeatureSet, boxes: &[Box3D]) -> SeedFeatureSet {
    seeds.foreground_mask = foreground_mask(&seeds.positions, boxes);
    seeds
}

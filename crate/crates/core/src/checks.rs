//! Randomized gradient checks of the three training losses, plus the two
//! exact-zero gradient contracts of the full model.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::Serialize;

use crate::config::RunConfig;
use crate::contrast::{primitive_loss_from, semantic_loss, PclDenominator};
use crate::detector::{detection_loss, BoxCodec, DetectorConfig, HeadOutput, Targets};
use crate::episodes::{EpisodeSampler, Stage};
use crate::error::Result;
use crate::gradcheck::{check_gradients, GradCheckOptions, GradCheckReport};
use crate::graph::{Graph, Mat, Var};
use crate::model::Model;
use crate::protobank::{assign_features, GeometricPrototypeBank};
use crate::synthdata::{generate_benchmark, Box3D, Vec3};

/// Relative-error bound every loss must stay under.
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, Default, Serialize)]
pub struct LossCheck {
    pub instances: usize,
    pub entries: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

impl LossCheck {
    fn add(&mut self, r: &GradCheckReport) {
        self.instances += 1;
        self.entries += r.entries_checked;
        self.max_rel_error = self.max_rel_error.max(r.max_rel_error);
        self.max_abs_error = self.max_abs_error.max(r.max_abs_error);
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct GradSuiteReport {
    pub semcl: LossCheck,
    pub primcl: LossCheck,
    pub det: LossCheck,
    /// Largest absolute gradient that reached the prototype bank.
    pub bank_grad_max: f64,
    /// Largest absolute projection gradient with both lambdas at zero.
    pub proj_grad_max_without_contrast: f64,
}

impl GradSuiteReport {
    pub fn passed(&self) -> bool {
        [&self.semcl, &self.primcl, &self.det]
            .iter()
            .all(|c| c.instances > 0 && c.max_rel_error < GRAD_TOLERANCE)
            && self.bank_grad_max == 0.0
            && self.proj_grad_max_without_contrast == 0.0
    }
}

fn randn(rng: &mut impl Rng, r: usize, c: usize, scale: f64) -> Mat {
    Array2::from_shape_fn((r, c), |_| {
        let z: f64 = StandardNormal.sample(rng);
        scale * z
    })
}

/// Two-layer projection followed by row normalization, built from raw leaves
/// `[w1, b1, w2, b2]`.
fn project(g: &mut Graph, x: Var, p: &[Var]) -> Var {
    let h = g.matmul(x, p[0]);
    let h = g.add_row(h, p[1]);
    let h = g.relu(h);
    let h = g.matmul(h, p[2]);
    let h = g.add_row(h, p[3]);
    g.l2_normalize_rows(h)
}

/// Smallest row norm a projection may produce before normalization. The
/// normalization's third derivative grows like `1 / |x|^3`, so nearly-zero
/// rows make the central-difference truncation error exceed the tolerance
/// even when the analytic gradient is exact.
const MIN_PROJECTED_NORM: f64 = 0.2;
/// Smallest distance of a ReLU input from its kink, far above the largest
/// shift a finite-difference step can cause.
const MIN_KINK_DISTANCE: f64 = 1e-3;

fn well_conditioned(x: &Mat, p: &[Mat]) -> bool {
    let pre = x.dot(&p[0]) + &p[1];
    if pre.iter().any(|v| v.abs() < MIN_KINK_DISTANCE) {
        return false;
    }
    let out = pre.mapv(|v| v.max(0.0)).dot(&p[2]) + &p[3];
    out.rows()
        .into_iter()
        .all(|r| r.dot(&r).sqrt() >= MIN_PROJECTED_NORM)
}

/// Projection leaves `[w1, b1, w2, b2]`, redrawn until every row of `rows`
/// stays clear of the ReLU kink and projects to a norm of at least
/// [`MIN_PROJECTED_NORM`].
fn projection_inputs(rng: &mut impl Rng, d: usize, h: usize, rows: &[&Mat]) -> Vec<Mat> {
    loop {
        let p = vec![
            randn(rng, d, d, 0.7),
            randn(rng, 1, d, 0.3),
            randn(rng, d, h, 0.7),
            randn(rng, 1, h, 0.3),
        ];
        if rows.iter().all(|x| well_conditioned(x, &p)) {
            return p;
        }
    }
}

/// Row means of consecutive segments of `x`.
fn segment_means(x: &Mat, offsets: &[usize]) -> Mat {
    let mut out = Array2::zeros((offsets.len() - 1, x.ncols()));
    for (i, w) in offsets.windows(2).enumerate() {
        let seg = x.slice(ndarray::s![w[0]..w[1], ..]);
        out.row_mut(i)
            .assign(&seg.mean_axis(ndarray::Axis(0)).expect("non-empty segment"));
    }
    out
}

fn semantic_instance(rng: &mut ChaCha8Rng, opts: &GradCheckOptions) -> GradCheckReport {
    let batch = rng.gen_range(2..=4);
    let ways = rng.gen_range(2..=4);
    let shots = rng.gen_range(1..=3);
    let (d, h) = (rng.gen_range(3..=5), rng.gen_range(2..=4));
    let features = randn(rng, batch * ways * shots, d, 1.0);
    let offsets: Vec<usize> = (0..=batch * ways).map(|i| i * shots).collect();
    let projection = projection_inputs(rng, d, h, &[&segment_means(&features, &offsets)]);
    let mut inputs = vec![features];
    inputs.extend(projection);
    check_gradients(
        &inputs,
        &|g: &mut Graph, v: &[Var]| {
            let means = g.segment_mean(v[0], &offsets);
            let grid = project(g, means, &v[1..]);
            semantic_loss(g, grid, batch, ways, 0.2)
        },
        opts,
    )
}

fn primitive_instance(
    rng: &mut ChaCha8Rng,
    opts: &GradCheckOptions,
    denominator: PclDenominator,
) -> GradCheckReport {
    let (d, h) = (rng.gen_range(3..=5), rng.gen_range(2..=4));
    let w = rng.gen_range(3..=6);
    let m = rng.gen_range(6..=14);
    let bank = GeometricPrototypeBank {
        prototypes: randn(rng, w, d, 1.0),
        gamma: 0.9,
        usage_count: vec![0; w],
    };
    let features = randn(rng, m, d, 1.0);
    let fg: Vec<bool> = (0..m).map(|i| i < 2 || rng.gen_bool(0.8)).collect();
    let assignment = assign_features(&features, &fg, &bank);
    let nonempty = assignment.nonempty();
    let mut order = Vec::new();
    let mut offsets = vec![0];
    for &k in &nonempty {
        order.extend_from_slice(&assignment.groups[k]);
        offsets.push(order.len());
    }
    let protos = bank.prototypes.select(ndarray::Axis(0), &nonempty);
    let means = segment_means(&features.select(ndarray::Axis(0), &order), &offsets);
    let projection = projection_inputs(rng, d, h, &[&means, &protos]);
    let mut inputs = vec![features];
    inputs.extend(projection);
    check_gradients(
        &inputs,
        &|g: &mut Graph, v: &[Var]| {
            let rows = g.gather_rows(v[0], &order);
            let means = g.segment_mean(rows, &offsets);
            let means = project(g, means, &v[1..]);
            let bank = g.constant(protos.clone());
            let prototypes = project(g, bank, &v[1..]);
            match primitive_loss_from(g, means, prototypes, 0.2, denominator) {
                Some(l) => l,
                None => g.scalar(0.0),
            }
        },
        opts,
    )
}

fn detection_instance(rng: &mut ChaCha8Rng, opts: &GradCheckOptions) -> GradCheckReport {
    let u = Uniform::new(-1.0f64, 1.0);
    let n_boxes = rng.gen_range(1..=3);
    let ways = 2;
    let boxes: Vec<Box3D> = (0..n_boxes)
        .map(|j| {
            let c = [2.0 * u.sample(rng), 2.0 * u.sample(rng), 0.5];
            let s = [
                0.6 + 0.3 * u.sample(rng).abs(),
                0.6 + 0.3 * u.sample(rng).abs(),
                1.0,
            ];
            Box3D::new(c, s, j % ways, j)
        })
        .collect();
    let seeds: Vec<Vec3> = (0..10)
        .map(|i| {
            if i < 6 {
                let b = &boxes[i % n_boxes];
                [
                    b.center[0] + 0.2 * u.sample(rng),
                    b.center[1] + 0.2 * u.sample(rng),
                    0.5,
                ]
            } else {
                [3.0 * u.sample(rng), 3.0 * u.sample(rng), 0.2]
            }
        })
        .collect();
    let centers: Vec<Vec3> = (0..6)
        .map(|i| {
            if i < 3 {
                let b = &boxes[i % n_boxes];
                [b.center[0] + 0.1 * u.sample(rng), b.center[1], b.center[2]]
            } else {
                [5.0 + i as f64, 5.0, 0.0]
            }
        })
        .collect();
    let slots: Vec<usize> = (0..n_boxes).map(|j| j % ways).collect();
    let votes = loop {
        let v = randn(rng, 10, 3, 0.3);
        let clear = seeds.iter().enumerate().all(|(i, s)| {
            boxes.iter().all(|b| {
                (0..3).all(|k| (v[[i, k]] - (b.center[k] - s[k])).abs() >= MIN_KINK_DISTANCE)
            })
        });
        if clear {
            break v;
        }
    };
    let inputs = vec![
        votes,
        randn(rng, 6, 3, 0.2),
        randn(rng, 6, 3, 0.2),
        randn(rng, 6, 2, 1.0),
        randn(rng, 6, ways, 1.0),
    ];
    let codec = BoxCodec {
        mean_size: [0.7, 0.7, 0.9],
    };
    let cfg = DetectorConfig::default();
    check_gradients(
        &inputs,
        &|g: &mut Graph, v: &[Var]| {
            let head = HeadOutput {
                proposal_centers: centers.clone(),
                center_offset: v[1],
                log_size: v[2],
                objectness: v[3],
                class_logits: v[4],
            };
            let targets = Targets {
                boxes: &boxes,
                slots: slots.clone(),
            };
            detection_loss(g, v[0], &seeds, &head, &targets, &codec, &cfg).l_det
        },
        opts,
    )
}

/// Largest absolute gradient on the bank, and on the projection heads with
/// both contrastive weights at zero, over one batch of the smoke profile.
pub fn model_gradient_contracts(seed: u64) -> Result<(f64, f64)> {
    let config = RunConfig {
        seed,
        ..RunConfig::smoke()
    };
    let bench = generate_benchmark(&config.benchmark())?;
    let sampler = EpisodeSampler::new(&bench.train, &bench.split, config.support_min_points)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = sampler.sample_batch(
        Stage::Pretrain,
        config.batch_size,
        config.n_way,
        config.k_shot,
        &mut rng,
    )?;
    let codec = BoxCodec::from_boxes(bench.train.iter().flat_map(|s| s.boxes.iter()));
    let max_abs = |m: &Mat| m.iter().fold(0.0f64, |a, v| a.max(v.abs()));

    let model = Model::new(&config, codec, &mut rng);
    let bank = max_abs(&model.forward_batch(&batch)?.bank_grad);

    let plain = RunConfig {
        lambda1: 0.0,
        lambda2: 0.0,
        ..config
    };
    let model = Model::new(&plain, codec, &mut rng);
    let out = model.forward_batch(&batch)?;
    let proj = out
        .grads
        .iter()
        .filter(|(name, _)| name.starts_with("proj."))
        .map(|(_, g)| max_abs(g))
        .fold(0.0, f64::max);
    Ok((bank, proj))
}

/// Run `instances` random checks of each loss and the model contracts.
pub fn run_grad_suite(seed: u64, instances: usize) -> Result<GradSuiteReport> {
    let opts = GradCheckOptions::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradSuiteReport::default();
    for i in 0..instances {
        report.semcl.add(&semantic_instance(&mut rng, &opts));
        let denominator = if i % 2 == 0 {
            PclDenominator::Feature
        } else {
            PclDenominator::Proto
        };
        report
            .primcl
            .add(&primitive_instance(&mut rng, &opts, denominator));
        report.det.add(&detection_instance(&mut rng, &opts));
    }
    let (bank, proj) = model_gradient_contracts(seed)?;
    report.bank_grad_max = bank;
    report.proj_grad_max_without_contrast = proj;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn short_suite_passes() {
        let r = run_grad_suite(3, 4).unwrap();
        assert!(r.passed(), "{r:?}");
    }
}

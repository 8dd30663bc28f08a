//! Voting, clustering, prototype-guided proposal refinement, box heads and
//! the detection loss.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{farthest_point_sample, Backbone, SeedFeatureSet};
use crate::episodes::SupportInstance;
use crate::error::{Error, Result};
use crate::eval3d::{iou_center_size, Detection};
use crate::graph::{softmax_rows, Graph, Mat, Var};
use crate::nn::{CrossAttention, Ctx, Linear, ParamStore};
use crate::synthdata::{Box3D, Vec3};

/// Transition point of the smooth-L1 box loss.
pub const SMOOTH_L1_BETA: f64 = 1.0 / 9.0;

/// How proposals are scored against the classes of an episode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClsHead {
    /// Scaled cosine between a learned map of the proposal feature and each
    /// semantic prototype.
    Metric,
    /// Linear layer over every known class; the active classes' columns are
    /// gathered per episode.
    Affine,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorConfig {
    pub feature_dim: usize,
    pub num_proposals: usize,
    pub cluster_radius: f64,
    pub max_offset: f64,
    pub positive_radius: f64,
    pub negative_radius: f64,
    pub w_obj: f64,
    pub w_box: f64,
    pub w_cls: f64,
    pub cls_head: ClsHead,
    pub cls_scale: f64,
    /// Total number of class ids, used by the affine head.
    pub num_classes: usize,
    pub nms_iou: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            feature_dim: 256,
            num_proposals: 64,
            cluster_radius: 0.3,
            max_offset: 1.0,
            positive_radius: 0.3,
            negative_radius: 0.6,
            w_obj: 0.5,
            w_box: 1.0,
            w_cls: 1.0,
            cls_head: ClsHead::Metric,
            cls_scale: 10.0,
            num_classes: 12,
            nms_iou: 0.25,
        }
    }
}

/// Votes as plain values.
#[derive(Clone, Debug, PartialEq)]
pub struct VoteSet {
    pub positions: Vec<Vec3>,
    pub features: Mat,
}

/// Votes on the tape. `positions` are the values of `seed + offset`.
#[derive(Clone, Debug)]
pub struct VoteVars {
    pub seeds: Vec<Vec3>,
    pub offsets: Var,
    pub positions: Vec<Vec3>,
    pub features: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Proposal {
    pub center: Vec3,
    pub feature: Vec<f64>,
    pub assigned_gt: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct ProposalVars {
    pub centers: Vec<Vec3>,
    /// Vote rows pooled into each proposal.
    pub members: Vec<Vec<usize>>,
    pub features: Var,
}

/// Raw head outputs, one row per proposal.
#[derive(Clone, Debug)]
pub struct HeadOutput {
    pub proposal_centers: Vec<Vec3>,
    pub center_offset: Var,
    pub log_size: Var,
    pub objectness: Var,
    pub class_logits: Var,
}

/// Decoded predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionResult {
    pub centers: Vec<Vec3>,
    pub sizes: Vec<Vec3>,
    pub objectness: Vec<f64>,
    /// `P x N` class probabilities over `class_ids`.
    pub class_scores: Mat,
    pub class_ids: Vec<usize>,
}

/// Center residual around the proposal anchor and log-size around a global
/// mean size.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxCodec {
    pub mean_size: Vec3,
}

impl BoxCodec {
    pub fn encode(&self, anchor: &Vec3, center: &Vec3, size: &Vec3) -> (Vec3, Vec3) {
        let mut offset = [0.0; 3];
        let mut log_size = [0.0; 3];
        for k in 0..3 {
            offset[k] = center[k] - anchor[k];
            log_size[k] = (size[k] / self.mean_size[k]).ln();
        }
        (offset, log_size)
    }

    pub fn decode(&self, anchor: &Vec3, offset: &[f64], log_size: &[f64]) -> (Vec3, Vec3) {
        let mut center = [0.0; 3];
        let mut size = [0.0; 3];
        for k in 0..3 {
            center[k] = anchor[k] + offset[k];
            size[k] = self.mean_size[k] * log_size[k].exp();
        }
        (center, size)
    }

    /// Mean box size over `boxes`; unit cube if there are none.
    pub fn from_boxes<'a>(boxes: impl IntoIterator<Item = &'a Box3D>) -> Self {
        let mut sum = [0.0; 3];
        let mut n = 0usize;
        for b in boxes {
            for k in 0..3 {
                sum[k] += b.size[k];
            }
            n += 1;
        }
        let mean_size = if n == 0 {
            [1.0; 3]
        } else {
            sum.map(|s| s / n as f64)
        };
        Self { mean_size }
    }
}

/// Proposal label against the ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProposalLabel {
    Positive(usize),
    Negative,
    Ignore,
}

fn dist(a: &Vec3, b: &Vec3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Nearest ground-truth center within `positive` is a positive, beyond
/// `negative` a negative, otherwise ignored. Without boxes every proposal is
/// negative.
pub fn assign_proposals(
    centers: &[Vec3],
    boxes: &[Box3D],
    positive: f64,
    negative: f64,
) -> Vec<ProposalLabel> {
    centers
        .iter()
        .map(|c| {
            let nearest = boxes
                .iter()
                .enumerate()
                .map(|(j, b)| (j, dist(c, &b.center)))
                .fold(None, |best: Option<(usize, f64)>, cur| match best {
                    Some(b) if b.1 <= cur.1 => Some(b),
                    _ => Some(cur),
                });
            match nearest {
                Some((j, d)) if d < positive => ProposalLabel::Positive(j),
                Some((_, d)) if d <= negative => ProposalLabel::Ignore,
                _ => ProposalLabel::Negative,
            }
        })
        .collect()
}

/// Box owning each seed: the smallest-volume target containing it (lowest
/// index on ties), or `None` for background.
pub fn seed_owners(seeds: &[Vec3], boxes: &[Box3D]) -> Vec<Option<usize>> {
    seeds
        .iter()
        .map(|p| {
            let mut best: Option<usize> = None;
            for (j, b) in boxes.iter().enumerate() {
                if b.contains(p, 0.0) && best.is_none_or(|o| b.volume() < boxes[o].volume()) {
                    best = Some(j);
                }
            }
            best
        })
        .collect()
}

/// Farthest-point sample `p` vote positions and group every vote within
/// `radius` of each center. An empty group falls back to the nearest vote.
pub fn cluster_indices(
    positions: &[Vec3],
    p: usize,
    radius: f64,
) -> Result<(Vec<usize>, Vec<Vec<usize>>)> {
    if positions.len() < p {
        return Err(Error::Invalid(format!(
            "{} votes cannot form {p} proposals",
            positions.len()
        )));
    }
    let centers = farthest_point_sample(positions, p);
    let members = centers
        .iter()
        .map(|&c| {
            let group: Vec<usize> = (0..positions.len())
                .filter(|&i| dist(&positions[i], &positions[c]) <= radius)
                .collect();
            if group.is_empty() {
                let nearest = (0..positions.len())
                    .min_by(|&a, &b| {
                        dist(&positions[a], &positions[c])
                            .total_cmp(&dist(&positions[b], &positions[c]))
                    })
                    .expect("non-empty votes");
                vec![nearest]
            } else {
                group
            }
        })
        .collect();
    Ok((centers, members))
}

pub fn cluster_vars(
    g: &mut Graph,
    votes: &VoteVars,
    p: usize,
    radius: f64,
) -> Result<ProposalVars> {
    let (centers, members) = cluster_indices(&votes.positions, p, radius)?;
    let mut order = Vec::new();
    let mut offsets = vec![0];
    for m in &members {
        order.extend_from_slice(m);
        offsets.push(order.len());
    }
    let rows = g.gather_rows(votes.features, &order);
    let features = g.segment_max(rows, &offsets);
    Ok(ProposalVars {
        centers: centers.iter().map(|&c| votes.positions[c]).collect(),
        members,
        features,
    })
}

/// Value-level clustering: max-pooled vote features per proposal.
pub fn cluster(votes: &VoteSet, p: usize, radius: f64) -> Result<Vec<Proposal>> {
    let (centers, members) = cluster_indices(&votes.positions, p, radius)?;
    Ok(centers
        .iter()
        .zip(&members)
        .map(|(&c, m)| {
            let mut feature = vec![f64::NEG_INFINITY; votes.features.ncols()];
            for &i in m {
                for (f, &v) in feature.iter_mut().zip(votes.features.row(i)) {
                    *f = f.max(v);
                }
            }
            Proposal {
                center: votes.positions[c],
                feature,
                assigned_gt: None,
            }
        })
        .collect())
}

/// Class prototypes (mean of the K support features, unprojected) together
/// with the `N * K` instance features, rows ordered `n * K + k`.
pub fn build_semantic_prototypes(
    ctx: &mut Ctx,
    backbone: &Backbone,
    supports: &[Vec<SupportInstance>],
) -> Result<(Var, Var)> {
    let k = supports.first().map_or(0, Vec::len);
    if k == 0 || supports.iter().any(|s| s.len() != k) {
        return Err(Error::Invalid(
            "every class needs the same positive number of shots".into(),
        ));
    }
    let mut rows = Vec::with_capacity(supports.len() * k);
    for shots in supports {
        for s in shots {
            rows.push(backbone.encode_support_var(ctx, &s.points)?);
        }
    }
    let instances = ctx.g.concat_rows(&rows);
    let offsets: Vec<usize> = (0..=supports.len()).map(|n| n * k).collect();
    let prototypes = ctx.g.segment_mean(instances, &offsets);
    Ok((prototypes, instances))
}

/// Value-level prototypes, `N x d`.
pub fn semantic_prototypes(
    backbone: &Backbone,
    params: &ParamStore,
    supports: &[Vec<SupportInstance>],
) -> Result<Mat> {
    let mut ctx = Ctx::new(params);
    let (p, _) = build_semantic_prototypes(&mut ctx, backbone, supports)?;
    Ok(ctx.g.value(p).clone())
}

#[derive(Clone, Debug)]
pub struct Detector {
    pub config: DetectorConfig,
    vote_hidden: Linear,
    vote_out: Linear,
    pub proposal_attn: CrossAttention,
    head_hidden: Linear,
    head_out: Linear,
    cls: Linear,
}

impl Detector {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, config: &DetectorConfig) -> Self {
        let d = config.feature_dim;
        let cls = match config.cls_head {
            ClsHead::Metric => Linear::new(store, rng, "detector.cls", d, d),
            ClsHead::Affine => Linear::new(store, rng, "detector.cls", d, config.num_classes),
        };
        Self {
            config: config.clone(),
            vote_hidden: Linear::new(store, rng, "detector.vote.0", d, d),
            vote_out: Linear::with_gain(store, rng, "detector.vote.1", d, 3 + d, 0.1),
            proposal_attn: CrossAttention::new(store, rng, "detector.proposal_attn", d),
            head_hidden: Linear::new(store, rng, "detector.head.0", d, d),
            head_out: Linear::with_gain(store, rng, "detector.head.1", d, 8, 0.1),
            cls,
        }
    }

    /// Name of the vote layer producing offsets and feature residuals.
    pub fn vote_output_layer(&self) -> &Linear {
        &self.vote_out
    }

    /// `vote = seed + max_offset * tanh(.)`, `vote feature = f + residual`.
    pub fn vote(&self, ctx: &mut Ctx, features: Var, seeds: &[Vec3]) -> VoteVars {
        let h = self.vote_hidden.forward(ctx, features);
        let h = ctx.g.relu(h);
        let out = self.vote_out.forward(ctx, h);
        let raw = ctx.g.slice_cols(out, 0, 3);
        let t = ctx.g.tanh(raw);
        let offsets = ctx.g.scale(t, self.config.max_offset);
        let residual = ctx.g.slice_cols(out, 3, 3 + self.config.feature_dim);
        let features = ctx.g.add(features, residual);
        let off = ctx.g.value(offsets);
        let positions = seeds
            .iter()
            .enumerate()
            .map(|(i, s)| [s[0] + off[[i, 0]], s[1] + off[[i, 1]], s[2] + off[[i, 2]]])
            .collect();
        VoteVars {
            seeds: seeds.to_vec(),
            offsets,
            positions,
            features,
        }
    }

    pub fn vote_values(&self, seeds: &SeedFeatureSet, params: &ParamStore) -> VoteSet {
        let mut ctx = Ctx::new(params);
        let f = ctx.g.constant(seeds.features.clone());
        let v = self.vote(&mut ctx, f, &seeds.positions);
        VoteSet {
            positions: v.positions,
            features: ctx.g.value(v.features).clone(),
        }
    }

    /// Residual cross-attention from proposals to the semantic prototypes.
    pub fn refine_proposals(&self, ctx: &mut Ctx, proposals: Var, prototypes: Var) -> Var {
        self.proposal_attn.forward(ctx, proposals, prototypes)
    }

    /// Box, objectness and class heads. `class_ids` are the active classes,
    /// in the order of the rows of `prototypes`.
    pub fn predict(
        &self,
        ctx: &mut Ctx,
        proposals: &ProposalVars,
        refined: Var,
        prototypes: Var,
        class_ids: &[usize],
    ) -> HeadOutput {
        let h = self.head_hidden.forward(ctx, refined);
        let h = ctx.g.relu(h);
        let out = self.head_out.forward(ctx, h);
        let center_offset = ctx.g.slice_cols(out, 0, 3);
        let log_size = ctx.g.slice_cols(out, 3, 6);
        let objectness = ctx.g.slice_cols(out, 6, 8);
        let class_logits = match self.config.cls_head {
            ClsHead::Metric => {
                let u = self.cls.forward(ctx, h);
                let u = ctx.g.l2_normalize_rows(u);
                let p = ctx.g.l2_normalize_rows(prototypes);
                let cos = ctx.g.matmul_t(u, p);
                ctx.g.scale(cos, self.config.cls_scale)
            }
            ClsHead::Affine => {
                let all = self.cls.forward(ctx, h);
                let t = ctx.g.transpose(all);
                let picked = ctx.g.gather_rows(t, class_ids);
                ctx.g.transpose(picked)
            }
        };
        HeadOutput {
            proposal_centers: proposals.centers.clone(),
            center_offset,
            log_size,
            objectness,
            class_logits,
        }
    }
}

/// Decode head outputs into boxes and probabilities.
pub fn decode(
    g: &Graph,
    head: &HeadOutput,
    codec: &BoxCodec,
    class_ids: &[usize],
) -> DetectionResult {
    let off = g.value(head.center_offset);
    let ls = g.value(head.log_size);
    let obj = softmax_rows(g.value(head.objectness));
    let mut centers = Vec::new();
    let mut sizes = Vec::new();
    for (i, anchor) in head.proposal_centers.iter().enumerate() {
        let (c, s) = codec.decode(anchor, &off.row(i).to_vec(), &ls.row(i).to_vec());
        centers.push(c);
        sizes.push(s);
    }
    DetectionResult {
        centers,
        sizes,
        objectness: obj.column(1).to_vec(),
        class_scores: softmax_rows(g.value(head.class_logits)),
        class_ids: class_ids.to_vec(),
    }
}

/// One detection per proposal and class, scored `objectness * p(class)`.
pub fn to_detections(result: &DetectionResult) -> Vec<Detection> {
    let mut out = Vec::new();
    for i in 0..result.centers.len() {
        for (n, &class_id) in result.class_ids.iter().enumerate() {
            out.push(Detection {
                center: result.centers[i],
                size: result.sizes[i],
                class_id,
                score: result.objectness[i] * result.class_scores[[i, n]],
            });
        }
    }
    out
}

/// Greedy per-class non-maximum suppression; output is score-descending with
/// ties in input order.
pub fn nms(detections: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].score.total_cmp(&detections[a].score));
    let mut kept: Vec<&Detection> = Vec::new();
    for i in order {
        let d = &detections[i];
        let suppressed = kept.iter().any(|k| {
            k.class_id == d.class_id
                && iou_center_size(&k.center, &k.size, &d.center, &d.size) > iou_threshold
        });
        if !suppressed {
            kept.push(d);
        }
    }
    kept.into_iter().cloned().collect()
}

/// Detection-loss terms on the tape.
#[derive(Clone, Copy, Debug)]
pub struct DetLossVars {
    pub l_vote: Var,
    pub l_objectness: Var,
    pub l_box: Var,
    pub l_cls: Var,
    pub l_det: Var,
}

/// Ground truth of one query scene: target boxes and the episode slot of each.
#[derive(Clone, Debug)]
pub struct Targets<'a> {
    pub boxes: &'a [Box3D],
    pub slots: Vec<usize>,
}

fn zero(g: &mut Graph) -> Var {
    g.scalar(0.0)
}

/// Softmax cross-entropy of `logits` rows against `labels`, averaged.
fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Var {
    let logp = g.log_softmax_rows(logits);
    let picked = g.pick_rows(logp, labels);
    let m = g.mean(picked);
    g.scale(m, -1.0)
}

pub fn detection_loss(
    g: &mut Graph,
    votes_offsets: Var,
    seeds: &[Vec3],
    head: &HeadOutput,
    targets: &Targets,
    codec: &BoxCodec,
    config: &DetectorConfig,
) -> DetLossVars {
    let boxes = targets.boxes;

    let owners = seed_owners(seeds, boxes);
    let fg: Vec<usize> = (0..seeds.len()).filter(|&i| owners[i].is_some()).collect();
    let l_vote = if fg.is_empty() {
        zero(g)
    } else {
        let delta = Array2::from_shape_fn((fg.len(), 3), |(r, k)| {
            boxes[owners[fg[r]].expect("foreground")].center[k] - seeds[fg[r]][k]
        });
        let off = g.gather_rows(votes_offsets, &fg);
        let target = g.constant(delta);
        let diff = g.sub(off, target);
        let a = g.abs(diff);
        let per_seed = g.sum_cols(a);
        g.mean(per_seed)
    };

    let labels = assign_proposals(
        &head.proposal_centers,
        boxes,
        config.positive_radius,
        config.negative_radius,
    );
    let mut obj_rows = Vec::new();
    let mut obj_labels = Vec::new();
    let mut positives = Vec::new();
    for (i, l) in labels.iter().enumerate() {
        match *l {
            ProposalLabel::Positive(j) => {
                obj_rows.push(i);
                obj_labels.push(1);
                positives.push((i, j));
            }
            ProposalLabel::Negative => {
                obj_rows.push(i);
                obj_labels.push(0);
            }
            ProposalLabel::Ignore => {}
        }
    }
    let l_objectness = if obj_rows.is_empty() {
        zero(g)
    } else {
        let logits = g.gather_rows(head.objectness, &obj_rows);
        cross_entropy(g, logits, &obj_labels)
    };

    let (l_box, l_cls) = if positives.is_empty() {
        (zero(g), zero(g))
    } else {
        let rows: Vec<usize> = positives.iter().map(|p| p.0).collect();
        let mut target = Array2::zeros((rows.len(), 6));
        for (r, &(i, j)) in positives.iter().enumerate() {
            let (off, ls) =
                codec.encode(&head.proposal_centers[i], &boxes[j].center, &boxes[j].size);
            for k in 0..3 {
                target[[r, k]] = off[k];
                target[[r, 3 + k]] = ls[k];
            }
        }
        let co = g.gather_rows(head.center_offset, &rows);
        let ls = g.gather_rows(head.log_size, &rows);
        let pred = g.concat_cols(&[co, ls]);
        let t = g.constant(target);
        let diff = g.sub(pred, t);
        let s = g.smooth_l1(diff, SMOOTH_L1_BETA);
        let per = g.sum_cols(s);
        let l_box = g.mean(per);

        let cls_logits = g.gather_rows(head.class_logits, &rows);
        let cls_labels: Vec<usize> = positives.iter().map(|&(_, j)| targets.slots[j]).collect();
        (l_box, cross_entropy(g, cls_logits, &cls_labels))
    };

    let l_det = g.weighted_sum(&[
        (l_vote, 1.0),
        (l_objectness, config.w_obj),
        (l_box, config.w_box),
        (l_cls, config.w_cls),
    ]);
    DetLossVars {
        l_vote,
        l_objectness,
        l_box,
        l_cls,
        l_det,
    }
}

/// `l_det + lambda1 * l_semcl + lambda2 * l_primcl`. A term with zero weight
/// or no value is left out of the graph entirely.
pub fn total_loss(
    g: &mut Graph,
    l_det: Var,
    semcl: Option<Var>,
    primcl: Option<Var>,
    lambda1: f64,
    lambda2: f64,
) -> Var {
    let mut terms = vec![(l_det, 1.0)];
    if let (Some(v), true) = (semcl, lambda1 != 0.0) {
        terms.push((v, lambda1));
    }
    if let (Some(v), true) = (primcl, lambda2 != 0.0) {
        terms.push((v, lambda2));
    }
    g.weighted_sum(&terms)
}

/// Scalar values of every loss term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_vote: f64,
    pub l_objectness: f64,
    pub l_box: f64,
    pub l_cls: f64,
    pub l_det: f64,
    pub l_semcl: f64,
    pub l_primcl: f64,
    pub l_total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [
            self.l_vote,
            self.l_objectness,
            self.l_box,
            self.l_cls,
            self.l_det,
            self.l_semcl,
            self.l_primcl,
            self.l_total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, GradCheckOptions};
    use crate::graph::log_sum_exp;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal, Uniform};

    fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Array2::from_shape_fn((r, c), |_| StandardNormal.sample(rng))
    }

    fn small_config() -> DetectorConfig {
        DetectorConfig {
            feature_dim: 8,
            num_proposals: 4,
            num_classes: 5,
            ..Default::default()
        }
    }

    #[test]
    fn zero_vote_head_keeps_seeds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let det = Detector::new(&mut store, &mut rng, &small_config());
        for name in [det.vote_out.weight_name(), det.vote_out.bias_name()] {
            store.get_mut(&name).unwrap().fill(0.0);
        }
        let seeds = SeedFeatureSet {
            features: randn(&mut rng, 6, 8),
            positions: (0..6).map(|i| [i as f64, 0.5, -1.0]).collect(),
            foreground_mask: vec![false; 6],
            primitive_label: vec![-1; 6],
        };
        let v = det.vote_values(&seeds, &store);
        assert_eq!(v.positions, seeds.positions);
    }

    #[test]
    fn offsets_are_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let det = Detector::new(&mut store, &mut rng, &small_config());
        let seeds = SeedFeatureSet {
            features: randn(&mut rng, 50, 8) * 100.0,
            positions: vec![[0.0; 3]; 50],
            foreground_mask: vec![false; 50],
            primitive_label: vec![-1; 50],
        };
        let v = det.vote_values(&seeds, &store);
        assert!(v.positions.iter().flatten().all(|x| x.abs() <= 1.0));
    }

    #[test]
    fn single_proposal_pools_in_radius_votes() {
        let votes = VoteSet {
            positions: vec![[0.0; 3], [0.1, 0.0, 0.0], [2.0, 0.0, 0.0]],
            features: ndarray::array![[1.0, -5.0], [0.0, 3.0], [9.0, 9.0]],
        };
        let p = cluster(&votes, 1, 0.3).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].center, [0.0; 3]);
        assert_eq!(p[0].feature, vec![1.0, 3.0]);

        let same = VoteSet {
            positions: vec![[1.0, 2.0, 3.0]; 5],
            features: Array2::zeros((5, 2)),
        };
        let p = cluster(&same, 3, 0.3).unwrap();
        assert_eq!(p.len(), 3);
        assert!(p.iter().all(|q| q.center == [1.0, 2.0, 3.0]));
        assert!(cluster(&same, 6, 0.3).is_err());
    }

    #[test]
    fn codec_round_trip_and_identity() {
        let codec = BoxCodec {
            mean_size: [0.8, 0.6, 1.1],
        };
        let (c, s) = codec.decode(&[1.0, 2.0, 3.0], &[0.0; 3], &[0.0; 3]);
        assert_eq!(c, [1.0, 2.0, 3.0]);
        assert_eq!(s, codec.mean_size);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u = Uniform::new(0.05, 3.0);
        for _ in 0..100 {
            let anchor = [u.sample(&mut rng), u.sample(&mut rng), u.sample(&mut rng)];
            let center = [u.sample(&mut rng), u.sample(&mut rng), u.sample(&mut rng)];
            let size = [u.sample(&mut rng), u.sample(&mut rng), u.sample(&mut rng)];
            let (o, l) = codec.encode(&anchor, &center, &size);
            let (c2, s2) = codec.decode(&anchor, &o, &l);
            for k in 0..3 {
                assert!((c2[k] - center[k]).abs() < 1e-5);
                assert!((s2[k] - size[k]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn assignment_thresholds() {
        let boxes = [Box3D::new([0.0; 3], [1.0; 3], 0, 0)];
        let centers = [[0.2, 0.0, 0.0], [0.45, 0.0, 0.0], [0.7, 0.0, 0.0]];
        assert_eq!(
            assign_proposals(&centers, &boxes, 0.3, 0.6),
            vec![
                ProposalLabel::Positive(0),
                ProposalLabel::Ignore,
                ProposalLabel::Negative
            ]
        );
        assert_eq!(
            assign_proposals(&centers, &[], 0.3, 0.6),
            vec![ProposalLabel::Negative; 3]
        );
    }

    struct Case {
        seeds: Vec<Vec3>,
        centers: Vec<Vec3>,
        boxes: Vec<Box3D>,
        slots: Vec<usize>,
        inputs: Vec<Mat>,
    }

    fn random_case(rng: &mut ChaCha8Rng, n_boxes: usize) -> Case {
        let u = Uniform::new(-1.0, 1.0);
        let mut boxes = Vec::new();
        for j in 0..n_boxes {
            let c = [u.sample(rng) * 2.0, u.sample(rng) * 2.0, 0.5];
            boxes.push(Box3D::new(c, [0.8, 0.6, 1.0], j % 2, j));
        }
        let mut seeds = Vec::new();
        for i in 0..10 {
            if i < 6 && n_boxes > 0 {
                let b = &boxes[i % n_boxes];
                seeds.push([
                    b.center[0] + u.sample(rng) * 0.3,
                    b.center[1] + u.sample(rng) * 0.2,
                    0.5,
                ]);
            } else {
                seeds.push([u.sample(rng) * 3.0, u.sample(rng) * 3.0, 0.2]);
            }
        }
        let mut centers = Vec::new();
        for i in 0..6 {
            if i < 3 && n_boxes > 0 {
                let b = &boxes[i % n_boxes];
                centers.push([b.center[0] + 0.1, b.center[1], b.center[2]]);
            } else {
                centers.push([5.0 + i as f64, 5.0, 0.0]);
            }
        }
        let slots = (0..n_boxes).map(|j| j % 2).collect();
        let inputs = vec![
            randn(rng, 10, 3) * 0.3,
            randn(rng, 6, 3) * 0.2,
            randn(rng, 6, 3) * 0.2,
            randn(rng, 6, 2),
            randn(rng, 6, 2),
        ];
        Case {
            seeds,
            centers,
            boxes,
            slots,
            inputs,
        }
    }

    fn loss_on(g: &mut Graph, v: &[Var], case: &Case, codec: &BoxCodec) -> DetLossVars {
        let head = HeadOutput {
            proposal_centers: case.centers.clone(),
            center_offset: v[1],
            log_size: v[2],
            objectness: v[3],
            class_logits: v[4],
        };
        let targets = Targets {
            boxes: &case.boxes,
            slots: case.slots.clone(),
        };
        detection_loss(
            g,
            v[0],
            &case.seeds,
            &head,
            &targets,
            codec,
            &DetectorConfig::default(),
        )
    }

    fn smooth(x: f64) -> f64 {
        if x.abs() < SMOOTH_L1_BETA {
            0.5 * x * x / SMOOTH_L1_BETA
        } else {
            x.abs() - 0.5 * SMOOTH_L1_BETA
        }
    }

    fn ce(row: &[f64], label: usize) -> f64 {
        log_sum_exp(row.iter().copied()) - row[label]
    }

    /// Loop-based reimplementation of the detection loss.
    fn loss_oracle(case: &Case, codec: &BoxCodec) -> f64 {
        let [off, co, ls, obj, cls] = [0, 1, 2, 3, 4].map(|i| &case.inputs[i]);
        let mut vote = Vec::new();
        for (i, s) in case.seeds.iter().enumerate() {
            let owner = case
                .boxes
                .iter()
                .enumerate()
                .filter(|(_, b)| b.contains(s, 0.0))
                .min_by(|a, b| a.1.volume().total_cmp(&b.1.volume()));
            if let Some((_, b)) = owner {
                vote.push(
                    (0..3)
                        .map(|k| (s[k] + off[[i, k]] - b.center[k]).abs())
                        .sum::<f64>(),
                );
            }
        }
        let mean = |v: &[f64]| {
            if v.is_empty() {
                0.0
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        let (mut objl, mut boxl, mut clsl) = (Vec::new(), Vec::new(), Vec::new());
        for (i, c) in case.centers.iter().enumerate() {
            let mut best: Option<(usize, f64)> = None;
            for (j, b) in case.boxes.iter().enumerate() {
                let d = dist(c, &b.center);
                if best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((j, d));
                }
            }
            let orow = [obj[[i, 0]], obj[[i, 1]]];
            match best {
                Some((j, d)) if d < 0.3 => {
                    objl.push(ce(&orow, 1));
                    let b = &case.boxes[j];
                    let mut s = 0.0;
                    for k in 0..3 {
                        s += smooth(c[k] + co[[i, k]] - b.center[k]);
                        s += smooth(ls[[i, k]] - (b.size[k] / codec.mean_size[k]).ln());
                    }
                    boxl.push(s);
                    clsl.push(ce(&[cls[[i, 0]], cls[[i, 1]]], case.slots[j]));
                }
                Some((_, d)) if d <= 0.6 => {}
                _ => objl.push(ce(&orow, 0)),
            }
        }
        mean(&vote) + 0.5 * mean(&objl) + mean(&boxl) + mean(&clsl)
    }

    #[test]
    fn loss_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let codec = BoxCodec {
            mean_size: [0.7, 0.7, 0.9],
        };
        for n_boxes in [0, 1, 2, 3] {
            let case = random_case(&mut rng, n_boxes);
            let mut g = Graph::new();
            let v: Vec<Var> = case.inputs.iter().map(|m| g.param(m.clone())).collect();
            let l = loss_on(&mut g, &v, &case, &codec);
            let expect = loss_oracle(&case, &codec);
            assert!(
                (g.scalar_value(l.l_det) - expect).abs() < 1e-9,
                "{n_boxes} boxes"
            );
        }
    }

    #[test]
    fn empty_scene_is_objectness_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let case = random_case(&mut rng, 0);
        let mut g = Graph::new();
        let v: Vec<Var> = case.inputs.iter().map(|m| g.param(m.clone())).collect();
        let l = loss_on(
            &mut g,
            &v,
            &case,
            &BoxCodec {
                mean_size: [1.0; 3],
            },
        );
        assert_eq!(g.scalar_value(l.l_vote), 0.0);
        assert_eq!(g.scalar_value(l.l_box), 0.0);
        assert_eq!(g.scalar_value(l.l_cls), 0.0);
        assert!((g.scalar_value(l.l_det) - 0.5 * g.scalar_value(l.l_objectness)).abs() < 1e-15);
    }

    #[test]
    fn perfect_predictions_zero_box_and_vote() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let codec = BoxCodec {
            mean_size: [0.7, 0.7, 0.9],
        };
        let mut case = random_case(&mut rng, 2);
        for (i, s) in case.seeds.iter().enumerate() {
            if let Some(j) = seed_owners(&[*s], &case.boxes)[0] {
                for k in 0..3 {
                    case.inputs[0][[i, k]] = case.boxes[j].center[k] - s[k];
                }
            }
        }
        for (i, l) in assign_proposals(&case.centers, &case.boxes, 0.3, 0.6)
            .iter()
            .enumerate()
        {
            if let ProposalLabel::Positive(j) = l {
                let (o, ls) = codec.encode(
                    &case.centers[i],
                    &case.boxes[*j].center,
                    &case.boxes[*j].size,
                );
                for k in 0..3 {
                    case.inputs[1][[i, k]] = o[k];
                    case.inputs[2][[i, k]] = ls[k];
                }
            }
        }
        let mut g = Graph::new();
        let v: Vec<Var> = case.inputs.iter().map(|m| g.param(m.clone())).collect();
        let l = loss_on(&mut g, &v, &case, &codec);
        assert_eq!(g.scalar_value(l.l_box), 0.0);
        assert_eq!(g.scalar_value(l.l_vote), 0.0);
    }

    #[test]
    fn detection_loss_passes_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let codec = BoxCodec {
            mean_size: [0.7, 0.7, 0.9],
        };
        for n_boxes in [1, 2, 3] {
            let case = random_case(&mut rng, n_boxes);
            let report = check_gradients(
                &case.inputs,
                &|g: &mut Graph, v: &[Var]| loss_on(g, v, &case, &codec).l_det,
                &GradCheckOptions::default(),
            );
            assert!(report.max_rel_error < 1e-4, "{report:?}");
        }
    }

    #[test]
    fn total_loss_arithmetic() {
        let mut g = Graph::new();
        let a = g.scalar(1.0);
        let b = g.scalar(0.5);
        let c = g.scalar(0.25);
        let t = total_loss(&mut g, a, Some(b), Some(c), 0.1, 0.1);
        assert!((g.scalar_value(t) - 1.075).abs() < 1e-12);
        let t = total_loss(&mut g, a, Some(b), Some(c), 0.0, 0.0);
        assert_eq!(t, a);
    }

    #[test]
    fn nms_keeps_best_per_class() {
        let d = |x: f64, c: usize, s: f64| Detection {
            center: [x, 0.0, 0.0],
            size: [1.0; 3],
            class_id: c,
            score: s,
        };
        let kept = nms(
            &[
                d(0.0, 0, 0.5),
                d(0.05, 0, 0.9),
                d(0.0, 1, 0.4),
                d(3.0, 0, 0.2),
            ],
            0.25,
        );
        assert_eq!(kept, vec![d(0.05, 0, 0.9), d(0.0, 1, 0.4), d(3.0, 0, 0.2)]);
    }
}

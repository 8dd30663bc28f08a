//! The full detector: backbone, prototype bank, detection heads and the
//! training-only projection heads, with a batch forward pass and inference.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{foreground_mask, Backbone};
use crate::checkpoint::{quantize_f32, Archive};
use crate::config::RunConfig;
use crate::contrast::{build_primitive_means, build_semantic_grid, primitive_loss, semantic_loss};
use crate::detector::{
    build_semantic_prototypes, cluster_vars, decode, detection_loss, nms, to_detections,
    total_loss, BoxCodec, Detector, LossBreakdown, Targets,
};
use crate::episodes::{EpisodeBatch, SupportInstance};
use crate::error::{Error, Result};
use crate::eval3d::Detection;
use crate::graph::{Mat, Var};
use crate::nn::{CrossAttention, Ctx, ParamStore, ProjectionHead};
use crate::protobank::{
    assign_features, init_bank, refine_vars, AssignmentResult, GeometricPrototypeBank,
};
use crate::synthdata::PointCloudScene;

pub const BANK_KEY: &str = "protobank.g";
pub const GAMMA_KEY: &str = "protobank.gamma";
pub const MEAN_SIZE_KEY: &str = "detector.mean_size";

#[derive(Clone, Debug)]
pub struct Model {
    pub config: RunConfig,
    pub params: ParamStore,
    pub backbone: Backbone,
    pub seed_attn: CrossAttention,
    pub detector: Detector,
    pub bank: GeometricPrototypeBank,
    pub codec: BoxCodec,
    pub proj_semantic: ProjectionHead,
    /// `None` when the primitive branch shares the semantic projection.
    pub proj_primitive: Option<ProjectionHead>,
}

/// Outcome of one batch forward and backward pass. Nothing is applied yet.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub losses: LossBreakdown,
    pub scl_skipped: bool,
    /// Number of prototypes with at least one assigned seed.
    pub pcl_w: usize,
    pub grads: BTreeMap<String, Mat>,
    /// Gradient that reached the bank leaf; zero when the detach holds.
    pub bank_grad: Mat,
    pub assignment: AssignmentResult,
}

impl Model {
    /// Fresh parameters. Contrastive heads are created last so that the rest
    /// of the initialization does not depend on them.
    pub fn new(config: &RunConfig, codec: BoxCodec, rng: &mut impl Rng) -> Self {
        let mut params = ParamStore::new();
        let backbone = Backbone::new(&mut params, rng, &config.backbone());
        let seed_attn = CrossAttention::new(&mut params, rng, "protobank.attn", config.feature_dim);
        let detector = Detector::new(&mut params, rng, &config.detector());
        let bank = init_bank(rng, config.bank_size, config.feature_dim, config.gamma);
        let proj_semantic = ProjectionHead::new(
            &mut params,
            rng,
            "proj.semantic",
            config.feature_dim,
            config.proj_dim,
        );
        let proj_primitive = (!config.share_projection).then(|| {
            ProjectionHead::new(
                &mut params,
                rng,
                "proj.primitive",
                config.feature_dim,
                config.proj_dim,
            )
        });
        let mut model = Self {
            config: config.clone(),
            params,
            backbone,
            seed_attn,
            detector,
            bank,
            codec,
            proj_semantic,
            proj_primitive,
        };
        model.quantize();
        model
    }

    /// Round parameters, bank and size prior to `f32` so that an archive
    /// round trip is exact.
    pub fn quantize(&mut self) {
        for (_, m) in self.params.iter_mut() {
            quantize_f32(m);
        }
        quantize_f32(&mut self.bank.prototypes);
        self.codec.mean_size = self.codec.mean_size.map(|v| v as f32 as f64);
    }

    fn semantic_head(&self) -> Option<&ProjectionHead> {
        self.config.use_projection.then_some(&self.proj_semantic)
    }

    fn primitive_head(&self) -> Option<&ProjectionHead> {
        if !self.config.use_projection {
            return None;
        }
        Some(self.proj_primitive.as_ref().unwrap_or(&self.proj_semantic))
    }

    /// Forward and backward over one batch of episodes.
    pub fn forward_batch(&self, batch: &EpisodeBatch) -> Result<StepOutput> {
        let cfg = &self.config;
        let dcfg = self.detector.config.clone();
        let mut ctx = Ctx::new(&self.params);
        let bank_leaf = ctx.g.param(self.bank.prototypes.clone());
        let bank = ctx.g.detach(bank_leaf);

        let b = batch.episodes.len();
        let mut det_terms = Vec::with_capacity(b);
        let mut instance_rows = Vec::with_capacity(b);
        let mut seed_rows = Vec::with_capacity(b);
        let mut foreground = Vec::new();
        for ep in &batch.episodes {
            let (protos, instances) =
                build_semantic_prototypes(&mut ctx, &self.backbone, &ep.support)?;
            instance_rows.push(instances);
            let seeds = self
                .backbone
                .encode_scene_vars(&mut ctx, &ep.query.points)?;
            let targets = ep.targets();
            foreground.extend(foreground_mask(&seeds.positions, &targets));
            seed_rows.push(seeds.features);

            let refined = refine_vars(&mut ctx, &self.seed_attn, seeds.features, bank);
            let votes = self.detector.vote(&mut ctx, refined, &seeds.positions);
            let proposals =
                cluster_vars(&mut ctx.g, &votes, dcfg.num_proposals, dcfg.cluster_radius)?;
            let refined_props =
                self.detector
                    .refine_proposals(&mut ctx, proposals.features, protos);
            let head =
                self.detector
                    .predict(&mut ctx, &proposals, refined_props, protos, &ep.class_ids);
            let slots = targets
                .iter()
                .map(|t| {
                    ep.slot_of(t.class_id)
                        .expect("targets belong to the episode")
                })
                .collect();
            let t = Targets {
                boxes: &targets,
                slots,
            };
            det_terms.push(detection_loss(
                &mut ctx.g,
                votes.offsets,
                &seeds.positions,
                &head,
                &t,
                &self.codec,
                &dcfg,
            ));
        }
        let inv = 1.0 / b as f64;
        let avg = |f: fn(&crate::detector::DetLossVars) -> Var, ctx: &mut Ctx| {
            let terms: Vec<(Var, f64)> = det_terms.iter().map(|d| (f(d), inv)).collect();
            ctx.g.weighted_sum(&terms)
        };
        let l_vote = avg(|d| d.l_vote, &mut ctx);
        let l_objectness = avg(|d| d.l_objectness, &mut ctx);
        let l_box = avg(|d| d.l_box, &mut ctx);
        let l_cls = avg(|d| d.l_cls, &mut ctx);
        let l_det = avg(|d| d.l_det, &mut ctx);

        let all_seeds = ctx.g.concat_rows(&seed_rows);
        let assignment = assign_features(ctx.g.value(all_seeds), &foreground, &self.bank);

        let scl_skipped = !batch.scl_feasible;
        let semcl = if cfg.lambda1 != 0.0 && batch.scl_feasible {
            let inst = ctx.g.concat_rows(&instance_rows);
            let grid = build_semantic_grid(
                &mut ctx,
                inst,
                b,
                batch.n_way,
                batch.k_shot,
                self.semantic_head(),
                cfg.normalize_sim,
            );
            Some(semantic_loss(&mut ctx.g, grid, b, batch.n_way, cfg.tau))
        } else {
            None
        };
        let pcl_w = assignment.nonempty().len();
        let primcl = if cfg.lambda2 != 0.0 && pcl_w >= 2 {
            let set = build_primitive_means(
                &mut ctx,
                all_seeds,
                &assignment,
                bank,
                self.primitive_head(),
                cfg.normalize_sim,
            );
            primitive_loss(&mut ctx.g, &set, cfg.tau, cfg.pcl_denominator)
        } else {
            None
        };
        let total = total_loss(&mut ctx.g, l_det, semcl, primcl, cfg.lambda1, cfg.lambda2);

        let value = |v: Option<Var>, ctx: &Ctx| v.map_or(0.0, |v| ctx.g.scalar_value(v));
        let losses = LossBreakdown {
            l_vote: ctx.g.scalar_value(l_vote),
            l_objectness: ctx.g.scalar_value(l_objectness),
            l_box: ctx.g.scalar_value(l_box),
            l_cls: ctx.g.scalar_value(l_cls),
            l_det: ctx.g.scalar_value(l_det),
            l_semcl: value(semcl, &ctx),
            l_primcl: value(primcl, &ctx),
            l_total: ctx.g.scalar_value(total),
            lambda1: cfg.lambda1,
            lambda2: cfg.lambda2,
        };
        if !losses.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss {losses:?}")));
        }
        ctx.g.backward(total);
        Ok(StepOutput {
            losses,
            scl_skipped,
            pcl_w,
            grads: ctx.param_grads(),
            bank_grad: ctx.g.grad_or_zeros(bank_leaf),
            assignment,
        })
    }

    /// Class prototypes (`N x d`) from support instances, rows in the order of
    /// `supports`.
    pub fn class_prototypes(&self, supports: &[Vec<SupportInstance>]) -> Result<Mat> {
        let mut ctx = Ctx::new(&self.params);
        let (p, _) = build_semantic_prototypes(&mut ctx, &self.backbone, supports)?;
        Ok(ctx.g.value(p).clone())
    }

    /// Inference on one scene: no foreground mask, no bank write, no
    /// projection. Detections are suppressed per class.
    pub fn detect(
        &self,
        scene: &PointCloudScene,
        prototypes: &Mat,
        class_ids: &[usize],
    ) -> Result<Vec<Detection>> {
        let dcfg = &self.detector.config;
        let mut ctx = Ctx::new(&self.params);
        let seeds = self.backbone.encode_scene_vars(&mut ctx, &scene.points)?;
        let bank = ctx.g.constant(self.bank.prototypes.clone());
        let refined = refine_vars(&mut ctx, &self.seed_attn, seeds.features, bank);
        let votes = self.detector.vote(&mut ctx, refined, &seeds.positions);
        let proposals = cluster_vars(&mut ctx.g, &votes, dcfg.num_proposals, dcfg.cluster_radius)?;
        let protos = ctx.g.constant(prototypes.clone());
        let refined_props = self
            .detector
            .refine_proposals(&mut ctx, proposals.features, protos);
        let head = self
            .detector
            .predict(&mut ctx, &proposals, refined_props, protos, class_ids);
        let result = decode(&ctx.g, &head, &self.codec, class_ids);
        let dets = to_detections(&result);
        if dets
            .iter()
            .any(|d| !d.score.is_finite() || d.size.iter().any(|s| !s.is_finite()))
        {
            return Err(Error::Numerical(format!(
                "non-finite detection on scene {}",
                scene.scene_id
            )));
        }
        Ok(nms(&dets, dcfg.nms_iou))
    }

    /// Parameters, bank and size prior as archive entries.
    pub fn write_archive(&self, archive: &mut Archive) {
        for (name, m) in self.params.iter() {
            archive.insert(name, m.clone());
        }
        archive.insert(BANK_KEY, self.bank.prototypes.clone());
        archive.insert(GAMMA_KEY, Array2::from_elem((1, 1), self.bank.gamma));
        archive.insert(
            MEAN_SIZE_KEY,
            Array2::from_shape_vec((1, 3), self.codec.mean_size.to_vec()).expect("1x3"),
        );
        archive.set_meta(
            "bank_usage",
            self.bank
                .usage_count
                .iter()
                .map(u64::to_string)
                .collect::<Vec<_>>()
                .join(","),
        );
    }

    /// Rebuild a model from `config` and the arrays of `archive`. Every
    /// parameter the architecture needs must be present with the right shape.
    pub fn from_archive(config: &RunConfig, archive: &Archive) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = Self::new(
            config,
            BoxCodec {
                mean_size: [1.0; 3],
            },
            &mut rng,
        );
        let missing: Vec<&String> = model
            .params
            .names()
            .filter(|n| !archive.entries.contains_key(*n))
            .collect();
        if !missing.is_empty() {
            let list: Vec<&str> = missing.iter().map(|s| s.as_str()).collect();
            return Err(Error::Checkpoint(format!(
                "checkpoint lacks parameter(s): {}",
                list.join(", ")
            )));
        }
        let names: Vec<String> = model.params.names().cloned().collect();
        for name in names {
            let src = archive.get(&name)?;
            let dst = model.params.get_mut(&name).expect("listed");
            if src.dim() != dst.dim() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?} in the checkpoint but {:?} in the model",
                    src.dim(),
                    dst.dim()
                )));
            }
            dst.assign(src);
        }
        let bank = archive.get(BANK_KEY)?;
        if bank.dim() != model.bank.prototypes.dim() {
            return Err(Error::Checkpoint(format!(
                "bank has shape {:?}, expected {:?}",
                bank.dim(),
                model.bank.prototypes.dim()
            )));
        }
        model.bank.prototypes = bank.clone();
        let size = archive.get(MEAN_SIZE_KEY)?;
        if size.dim() != (1, 3) {
            return Err(Error::Checkpoint("mean size prior must be 1x3".into()));
        }
        model.codec.mean_size = [size[[0, 0]], size[[0, 1]], size[[0, 2]]];
        if let Some(usage) = archive.meta.get("bank_usage") {
            let counts: std::result::Result<Vec<u64>, _> = usage
                .split(',')
                .filter(|s| !s.is_empty())
                .map(str::parse)
                .collect();
            match counts {
                Ok(c) if c.len() == model.bank.len() => model.bank.usage_count = c,
                _ => return Err(Error::Checkpoint("malformed bank_usage metadata".into())),
            }
        }
        Ok(model)
    }
}

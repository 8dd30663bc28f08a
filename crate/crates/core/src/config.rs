//! Run configuration: `key = value` text with typo-safe keys.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::backbone::{BackboneConfig, LevelConfig};
use crate::contrast::{ContrastConfig, PclDenominator};
use crate::detector::{ClsHead, DetectorConfig};
use crate::error::{Error, Result};
use crate::synthdata::BenchmarkConfig;

/// Which ablation arms to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblateArms {
    /// The loss-toggle grid only.
    Core,
    /// Loss toggles, symmetric and asymmetric lambda sweeps, projection toggle.
    All,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub seeds: Vec<u64>,

    pub data_seed: u64,
    pub n_base: usize,
    pub n_novel: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub k_shot: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    pub points_min: usize,
    pub points_max: usize,

    pub n_way: usize,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    /// 0 means one step per `batch_size` training scenes.
    pub steps_per_epoch: usize,
    pub lr: f64,
    pub lr_decay_epoch: usize,
    pub lr_decay_factor: f64,
    pub weight_decay: f64,

    pub bank_size: usize,
    pub gamma: f64,
    pub bank_renormalize: bool,

    pub tau: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub use_projection: bool,
    pub share_projection: bool,
    pub normalize_sim: bool,
    pub pcl_denominator: PclDenominator,

    pub feature_dim: usize,
    pub proj_dim: usize,
    pub num_seeds: usize,
    pub sa1_points: usize,
    pub sa1_radius: f64,
    pub sa2_radius: f64,
    pub nsample: usize,
    pub sa1_widths: Vec<usize>,
    pub sa2_hidden: Vec<usize>,
    pub support_centers: (usize, usize),
    pub support_min_points: usize,

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
    pub nms_iou: f64,

    pub ablate_arms: AblateArms,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            seeds: vec![1, 2, 3],
            data_seed: 1,
            n_base: 8,
            n_novel: 4,
            n_train: 200,
            n_test: 50,
            k_shot: 5,
            objects_min: 4,
            objects_max: 8,
            points_min: 180,
            points_max: 360,
            n_way: 4,
            batch_size: 16,
            pretrain_epochs: 36,
            finetune_epochs: 5,
            steps_per_epoch: 0,
            lr: 0.008,
            lr_decay_epoch: 24,
            lr_decay_factor: 0.1,
            weight_decay: 0.01,
            bank_size: 128,
            gamma: 0.999,
            bank_renormalize: true,
            tau: 0.2,
            lambda1: 0.1,
            lambda2: 0.1,
            use_projection: true,
            share_projection: false,
            normalize_sim: true,
            pcl_denominator: PclDenominator::Feature,
            feature_dim: 256,
            proj_dim: 128,
            num_seeds: 256,
            sa1_points: 512,
            sa1_radius: 0.2,
            sa2_radius: 0.4,
            nsample: 16,
            sa1_widths: vec![64, 64, 128],
            sa2_hidden: vec![128, 128],
            support_centers: (64, 32),
            support_min_points: 64,
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
            nms_iou: 0.25,
            ablate_arms: AblateArms::All,
        }
    }
}

/// Every accepted key, in canonical order.
pub const KEYS: &[&str] = &[
    "seed",
    "seeds",
    "data_seed",
    "n_base",
    "n_novel",
    "n_train",
    "n_test",
    "k_shot",
    "objects_min",
    "objects_max",
    "points_min",
    "points_max",
    "n_way",
    "batch_size",
    "pretrain_epochs",
    "finetune_epochs",
    "steps_per_epoch",
    "lr",
    "lr_decay_epoch",
    "lr_decay_factor",
    "weight_decay",
    "bank_size",
    "gamma",
    "bank_renormalize",
    "tau",
    "lambda1",
    "lambda2",
    "use_projection",
    "share_projection",
    "normalize_sim",
    "pcl_denominator",
    "feature_dim",
    "proj_dim",
    "num_seeds",
    "sa1_points",
    "sa1_radius",
    "sa2_radius",
    "nsample",
    "sa1_widths",
    "sa2_hidden",
    "support_centers",
    "support_min_points",
    "num_proposals",
    "cluster_radius",
    "max_offset",
    "positive_radius",
    "negative_radius",
    "w_obj",
    "w_box",
    "w_cls",
    "cls_head",
    "cls_scale",
    "nms_iou",
    "ablate_arms",
];

fn scalar<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

fn list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| scalar(key, s))
        .collect()
}

fn join<T: Display>(v: &[T]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl RunConfig {
    /// Set one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = scalar(key, v)?,
            "seeds" => self.seeds = list(key, v)?,
            "data_seed" => self.data_seed = scalar(key, v)?,
            "n_base" => self.n_base = scalar(key, v)?,
            "n_novel" => self.n_novel = scalar(key, v)?,
            "n_train" => self.n_train = scalar(key, v)?,
            "n_test" => self.n_test = scalar(key, v)?,
            "k_shot" => self.k_shot = scalar(key, v)?,
            "objects_min" => self.objects_min = scalar(key, v)?,
            "objects_max" => self.objects_max = scalar(key, v)?,
            "points_min" => self.points_min = scalar(key, v)?,
            "points_max" => self.points_max = scalar(key, v)?,
            "n_way" => self.n_way = scalar(key, v)?,
            "batch_size" => self.batch_size = scalar(key, v)?,
            "pretrain_epochs" => self.pretrain_epochs = scalar(key, v)?,
            "finetune_epochs" => self.finetune_epochs = scalar(key, v)?,
            "steps_per_epoch" => self.steps_per_epoch = scalar(key, v)?,
            "lr" => self.lr = scalar(key, v)?,
            "lr_decay_epoch" => self.lr_decay_epoch = scalar(key, v)?,
            "lr_decay_factor" => self.lr_decay_factor = scalar(key, v)?,
            "weight_decay" => self.weight_decay = scalar(key, v)?,
            "bank_size" => self.bank_size = scalar(key, v)?,
            "gamma" => self.gamma = scalar(key, v)?,
            "bank_renormalize" => self.bank_renormalize = scalar(key, v)?,
            "tau" => self.tau = scalar(key, v)?,
            "lambda1" => self.lambda1 = scalar(key, v)?,
            "lambda2" => self.lambda2 = scalar(key, v)?,
            "use_projection" => self.use_projection = scalar(key, v)?,
            "share_projection" => self.share_projection = scalar(key, v)?,
            "normalize_sim" => self.normalize_sim = scalar(key, v)?,
            "pcl_denominator" => {
                self.pcl_denominator = match v {
                    "feature" => PclDenominator::Feature,
                    "proto" => PclDenominator::Proto,
                    _ => {
                        return Err(Error::Config(format!(
                            "pcl_denominator: expected feature|proto, got {v:?}"
                        )))
                    }
                }
            }
            "feature_dim" => self.feature_dim = scalar(key, v)?,
            "proj_dim" => self.proj_dim = scalar(key, v)?,
            "num_seeds" => self.num_seeds = scalar(key, v)?,
            "sa1_points" => self.sa1_points = scalar(key, v)?,
            "sa1_radius" => self.sa1_radius = scalar(key, v)?,
            "sa2_radius" => self.sa2_radius = scalar(key, v)?,
            "nsample" => self.nsample = scalar(key, v)?,
            "sa1_widths" => self.sa1_widths = list(key, v)?,
            "sa2_hidden" => self.sa2_hidden = list(key, v)?,
            "support_centers" => {
                let l: Vec<usize> = list(key, v)?;
                if l.len() != 2 {
                    return Err(Error::Config(format!(
                        "support_centers: expected two counts, got {v:?}"
                    )));
                }
                self.support_centers = (l[0], l[1]);
            }
            "support_min_points" => self.support_min_points = scalar(key, v)?,
            "num_proposals" => self.num_proposals = scalar(key, v)?,
            "cluster_radius" => self.cluster_radius = scalar(key, v)?,
            "max_offset" => self.max_offset = scalar(key, v)?,
            "positive_radius" => self.positive_radius = scalar(key, v)?,
            "negative_radius" => self.negative_radius = scalar(key, v)?,
            "w_obj" => self.w_obj = scalar(key, v)?,
            "w_box" => self.w_box = scalar(key, v)?,
            "w_cls" => self.w_cls = scalar(key, v)?,
            "cls_head" => {
                self.cls_head = match v {
                    "metric" => ClsHead::Metric,
                    "affine" => ClsHead::Affine,
                    _ => {
                        return Err(Error::Config(format!(
                            "cls_head: expected metric|affine, got {v:?}"
                        )))
                    }
                }
            }
            "cls_scale" => self.cls_scale = scalar(key, v)?,
            "nms_iou" => self.nms_iou = scalar(key, v)?,
            "ablate_arms" => {
                self.ablate_arms = match v {
                    "core" => AblateArms::Core,
                    "all" => AblateArms::All,
                    _ => {
                        return Err(Error::Config(format!(
                            "ablate_arms: expected core|all, got {v:?}"
                        )))
                    }
                }
            }
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Text form of one field.
    pub fn get(&self, key: &str) -> Option<String> {
        let s = match key {
            "seed" => self.seed.to_string(),
            "seeds" => join(&self.seeds),
            "data_seed" => self.data_seed.to_string(),
            "n_base" => self.n_base.to_string(),
            "n_novel" => self.n_novel.to_string(),
            "n_train" => self.n_train.to_string(),
            "n_test" => self.n_test.to_string(),
            "k_shot" => self.k_shot.to_string(),
            "objects_min" => self.objects_min.to_string(),
            "objects_max" => self.objects_max.to_string(),
            "points_min" => self.points_min.to_string(),
            "points_max" => self.points_max.to_string(),
            "n_way" => self.n_way.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "pretrain_epochs" => self.pretrain_epochs.to_string(),
            "finetune_epochs" => self.finetune_epochs.to_string(),
            "steps_per_epoch" => self.steps_per_epoch.to_string(),
            "lr" => self.lr.to_string(),
            "lr_decay_epoch" => self.lr_decay_epoch.to_string(),
            "lr_decay_factor" => self.lr_decay_factor.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "bank_size" => self.bank_size.to_string(),
            "gamma" => self.gamma.to_string(),
            "bank_renormalize" => self.bank_renormalize.to_string(),
            "tau" => self.tau.to_string(),
            "lambda1" => self.lambda1.to_string(),
            "lambda2" => self.lambda2.to_string(),
            "use_projection" => self.use_projection.to_string(),
            "share_projection" => self.share_projection.to_string(),
            "normalize_sim" => self.normalize_sim.to_string(),
            "pcl_denominator" => match self.pcl_denominator {
                PclDenominator::Feature => "feature".into(),
                PclDenominator::Proto => "proto".into(),
            },
            "feature_dim" => self.feature_dim.to_string(),
            "proj_dim" => self.proj_dim.to_string(),
            "num_seeds" => self.num_seeds.to_string(),
            "sa1_points" => self.sa1_points.to_string(),
            "sa1_radius" => self.sa1_radius.to_string(),
            "sa2_radius" => self.sa2_radius.to_string(),
            "nsample" => self.nsample.to_string(),
            "sa1_widths" => join(&self.sa1_widths),
            "sa2_hidden" => join(&self.sa2_hidden),
            "support_centers" => format!("{},{}", self.support_centers.0, self.support_centers.1),
            "support_min_points" => self.support_min_points.to_string(),
            "num_proposals" => self.num_proposals.to_string(),
            "cluster_radius" => self.cluster_radius.to_string(),
            "max_offset" => self.max_offset.to_string(),
            "positive_radius" => self.positive_radius.to_string(),
            "negative_radius" => self.negative_radius.to_string(),
            "w_obj" => self.w_obj.to_string(),
            "w_box" => self.w_box.to_string(),
            "w_cls" => self.w_cls.to_string(),
            "cls_head" => match self.cls_head {
                ClsHead::Metric => "metric".into(),
                ClsHead::Affine => "affine".into(),
            },
            "cls_scale" => self.cls_scale.to_string(),
            "nms_iou" => self.nms_iou.to_string(),
            "ablate_arms" => match self.ablate_arms {
                AblateArms::Core => "core".into(),
                AblateArms::All => "all".into(),
            },
            _ => return None,
        };
        Some(s)
    }

    /// Apply `key=value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "{origin}:{}: expected key=value, got {line:?}",
                    lineno + 1
                ))
            })?;
            self.set(k.trim(), v)
                .map_err(|e| Error::Config(format!("{origin}:{}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text, "<text>")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text, &path.display().to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply `key=value` overrides, then validate.
    pub fn with_overrides<S: AsRef<str>>(mut self, overrides: &[S]) -> Result<Self> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            self.set(k.trim(), v)?;
        }
        self.validate()?;
        Ok(self)
    }

    /// Canonical text: every key in order, one per line.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("known key")))
            .collect()
    }

    /// SHA-256 of the canonical text, hex.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let positive_counts = [
            ("n_base", self.n_base),
            ("n_train", self.n_train),
            ("n_test", self.n_test),
            ("k_shot", self.k_shot),
            ("objects_min", self.objects_min),
            ("points_min", self.points_min),
            ("n_way", self.n_way),
            ("batch_size", self.batch_size),
            ("bank_size", self.bank_size),
            ("feature_dim", self.feature_dim),
            ("proj_dim", self.proj_dim),
            ("num_seeds", self.num_seeds),
            ("sa1_points", self.sa1_points),
            ("nsample", self.nsample),
            ("support_min_points", self.support_min_points),
            ("num_proposals", self.num_proposals),
        ];
        for (k, v) in positive_counts {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        let positive_reals = [
            ("lr", self.lr),
            ("tau", self.tau),
            ("sa1_radius", self.sa1_radius),
            ("sa2_radius", self.sa2_radius),
            ("cluster_radius", self.cluster_radius),
            ("max_offset", self.max_offset),
            ("positive_radius", self.positive_radius),
            ("cls_scale", self.cls_scale),
        ];
        for (k, v) in positive_reals {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!(
                    "{k} must be a positive number, got {v}"
                )));
            }
        }
        let non_negative = [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("weight_decay", self.weight_decay),
            ("lr_decay_factor", self.lr_decay_factor),
            ("w_obj", self.w_obj),
            ("w_box", self.w_box),
            ("w_cls", self.w_cls),
        ];
        for (k, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{k} must be non-negative, got {v}")));
            }
        }
        let unit = [("gamma", self.gamma), ("nms_iou", self.nms_iou)];
        for (k, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{k} must lie in [0, 1], got {v}")));
            }
        }
        if self.objects_max < self.objects_min {
            return Err(Error::Config(
                "objects_max must be at least objects_min".into(),
            ));
        }
        if self.points_max < self.points_min {
            return Err(Error::Config(
                "points_max must be at least points_min".into(),
            ));
        }
        if self.negative_radius < self.positive_radius {
            return Err(Error::Config(
                "negative_radius must be at least positive_radius".into(),
            ));
        }
        if self.num_proposals > self.num_seeds {
            return Err(Error::Config(
                "num_proposals cannot exceed num_seeds".into(),
            ));
        }
        if self.sa1_widths.is_empty()
            || self.sa1_widths.contains(&0)
            || self.sa2_hidden.contains(&0)
        {
            return Err(Error::Config(
                "layer widths must be positive and sa1_widths non-empty".into(),
            ));
        }
        if self.support_centers.0 == 0 || self.support_centers.1 == 0 {
            return Err(Error::Config("support_centers must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must list at least one seed".into()));
        }
        Ok(())
    }

    pub fn benchmark(&self) -> BenchmarkConfig {
        BenchmarkConfig {
            n_base: self.n_base,
            n_novel: self.n_novel,
            n_train: self.n_train,
            n_test: self.n_test,
            k: self.k_shot,
            objects: (self.objects_min, self.objects_max),
            points_per_object: (self.points_min, self.points_max),
            seed: self.data_seed,
            scene: Default::default(),
        }
    }

    pub fn backbone(&self) -> BackboneConfig {
        let mut sa2_widths = self.sa2_hidden.clone();
        sa2_widths.push(self.feature_dim);
        BackboneConfig {
            sa1: LevelConfig {
                points: self.sa1_points,
                radius: self.sa1_radius,
                nsample: self.nsample,
                widths: self.sa1_widths.clone(),
            },
            sa2: LevelConfig {
                points: self.num_seeds,
                radius: self.sa2_radius,
                nsample: self.nsample,
                widths: sa2_widths,
            },
            support_points: self.support_centers,
        }
    }

    pub fn detector(&self) -> DetectorConfig {
        DetectorConfig {
            feature_dim: self.feature_dim,
            num_proposals: self.num_proposals,
            cluster_radius: self.cluster_radius,
            max_offset: self.max_offset,
            positive_radius: self.positive_radius,
            negative_radius: self.negative_radius,
            w_obj: self.w_obj,
            w_box: self.w_box,
            w_cls: self.w_cls,
            cls_head: self.cls_head,
            cls_scale: self.cls_scale,
            num_classes: self.n_base + self.n_novel,
            nms_iou: self.nms_iou,
        }
    }

    pub fn contrast(&self) -> ContrastConfig {
        ContrastConfig {
            tau: self.tau,
            normalize_sim: self.normalize_sim,
            pcl_denominator: self.pcl_denominator,
        }
    }

    /// Learning rate in effect during `epoch` (0-based) of pretraining.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.lr_decay_epoch {
            self.lr * self.lr_decay_factor
        } else {
            self.lr
        }
    }

    /// A small profile that trains in minutes on one CPU core.
    pub fn desk() -> Self {
        Self {
            n_train: 60,
            n_test: 20,
            objects_min: 3,
            objects_max: 5,
            batch_size: 4,
            n_way: 3,
            k_shot: 3,
            pretrain_epochs: 6,
            finetune_epochs: 2,
            lr: 0.004,
            lr_decay_epoch: 4,
            bank_size: 32,
            gamma: 0.99,
            feature_dim: 48,
            proj_dim: 24,
            num_seeds: 96,
            sa1_points: 192,
            sa1_widths: vec![16, 32],
            sa2_hidden: vec![48],
            nsample: 12,
            support_centers: (24, 12),
            support_min_points: 48,
            num_proposals: 64,
            ..Self::default()
        }
    }

    /// The desk profile shrunk to a two-epoch run over a handful of scenes.
    pub fn smoke() -> Self {
        Self {
            n_base: 5,
            n_novel: 2,
            n_train: 20,
            n_test: 6,
            k_shot: 2,
            pretrain_epochs: 2,
            finetune_epochs: 1,
            lr_decay_epoch: 2,
            ..Self::desk()
        }
    }

    /// The desk model on the default benchmark with a schedule long enough
    /// for novel classes to register; the four loss arms over three seeds.
    pub fn ablation() -> Self {
        let data = Self::default();
        Self {
            n_train: data.n_train,
            n_test: data.n_test,
            k_shot: data.k_shot,
            objects_min: data.objects_min,
            objects_max: data.objects_max,
            pretrain_epochs: 40,
            lr_decay_epoch: 30,
            finetune_epochs: 6,
            ablate_arms: AblateArms::Core,
            ..Self::desk()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_published_settings() {
        let c = RunConfig::default();
        assert_eq!(c.batch_size, 16);
        assert_eq!((c.pretrain_epochs, c.finetune_epochs), (36, 5));
        assert_eq!(c.lr, 0.008);
        assert_eq!(c.weight_decay, 0.01);
        assert_eq!((c.bank_size, c.gamma), (128, 0.999));
        assert_eq!(c.tau, 0.2);
        assert_eq!((c.lambda1, c.lambda2), (0.1, 0.1));
        assert_eq!((c.feature_dim, c.proj_dim), (256, 128));
        assert_eq!((c.num_seeds, c.num_proposals), (256, 64));
        c.validate().unwrap();
    }

    #[test]
    fn every_key_round_trips() {
        let c = RunConfig::default();
        for k in KEYS {
            let mut d = RunConfig::default();
            d.set(k, &c.get(k).unwrap()).unwrap();
            assert_eq!(d, c, "{k}");
        }
        assert_eq!(RunConfig::from_text(&c.to_text()).unwrap(), c);
        for p in [RunConfig::desk(), RunConfig::smoke(), RunConfig::ablation()] {
            p.validate().unwrap();
            assert_eq!(RunConfig::from_text(&p.to_text()).unwrap(), p);
        }
    }

    #[test]
    fn unknown_and_invalid_values_are_rejected() {
        assert!(RunConfig::from_text("lamda1 = 0.1").is_err());
        assert!(RunConfig::from_text("tau = 0").is_err());
        assert!(RunConfig::from_text("gamma = 1.5").is_err());
        assert!(RunConfig::from_text("batch_size = -3").is_err());
        assert!(RunConfig::from_text("cls_head = cosine").is_err());
        let c = RunConfig::from_text("# comment\nlambda1 = 0.4  # trailing\n\n").unwrap();
        assert_eq!(c.lambda1, 0.4);
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let b = a.clone().with_overrides(&["lambda2=0.4"]).unwrap();
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), RunConfig::default().hash());
    }

    #[test]
    fn lr_schedule_decays_once() {
        let c = RunConfig::default();
        assert_eq!(c.lr_at(0), 0.008);
        assert_eq!(c.lr_at(23), 0.008);
        assert!((c.lr_at(24) - 0.0008).abs() < 1e-15);
    }
}

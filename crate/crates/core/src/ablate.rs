//! Ablation sweeps over the contrastive loss weights and the projection head.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::config::{AblateArms, RunConfig};
use crate::error::{Error, Result};
use crate::eval3d::ApReport;
use crate::synthdata::Benchmark;
use crate::train::{evaluate, finetune, pretrain, write_evaluation};

/// One configuration of the sweep.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Arm {
    /// Table the arm belongs to: `loss`, `lambda`, `asymmetric` or `projection`.
    pub table: &'static str,
    pub name: String,
    pub lambda1: f64,
    pub lambda2: f64,
    pub use_projection: bool,
}

impl Arm {
    fn new(
        table: &'static str,
        name: &str,
        lambda1: f64,
        lambda2: f64,
        use_projection: bool,
    ) -> Self {
        Self {
            table,
            name: name.to_string(),
            lambda1,
            lambda2,
            use_projection,
        }
    }

    pub fn apply(&self, base: &RunConfig, seed: u64) -> RunConfig {
        RunConfig {
            seed,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            use_projection: self.use_projection,
            ..base.clone()
        }
    }
}

/// The loss-toggle grid at weight `lambda`.
pub fn core_arms(lambda: f64) -> Vec<Arm> {
    vec![
        Arm::new("loss", "none", 0.0, 0.0, true),
        Arm::new("loss", "scl", lambda, 0.0, true),
        Arm::new("loss", "pcl", 0.0, lambda, true),
        Arm::new("loss", "both", lambda, lambda, true),
    ]
}

/// Arms for one seed. `All` adds the symmetric weight sweep, the two
/// asymmetric pairs and the projection toggle.
pub fn arms(kind: AblateArms, lambda: f64) -> Vec<Arm> {
    let mut out = core_arms(lambda);
    if kind == AblateArms::All {
        for l in [0.025, 0.1, 0.4] {
            out.push(Arm::new("lambda", &format!("lambda_{l}"), l, l, true));
        }
        out.push(Arm::new("asymmetric", "l1_0.1_l2_0.4", 0.1, 0.4, true));
        out.push(Arm::new("asymmetric", "l1_0.4_l2_0.1", 0.4, 0.1, true));
        out.push(Arm::new(
            "projection",
            "projection_on",
            lambda,
            lambda,
            true,
        ));
        out.push(Arm::new(
            "projection",
            "projection_off",
            lambda,
            lambda,
            false,
        ));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ArmScores {
    pub novel_ap25: f64,
    pub novel_ap50: f64,
    pub base_ap25: f64,
    pub base_ap50: f64,
}

impl ArmScores {
    /// Class-mean scores of a report; both splits must have been scored.
    pub fn from_report(r: &ApReport) -> std::result::Result<Self, String> {
        match (r.novel_ap25, r.novel_ap50, r.base_ap25, r.base_ap50) {
            (Some(novel_ap25), Some(novel_ap50), Some(base_ap25), Some(base_ap50)) => Ok(Self {
                novel_ap25,
                novel_ap50,
                base_ap25,
                base_ap50,
            }),
            _ => Err("evaluation produced no score for the novel or base split".into()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ArmResult {
    pub arm: Arm,
    pub seed: u64,
    /// `Err` holds the failure message of an arm that did not finish.
    pub outcome: std::result::Result<ArmScores, String>,
}

/// Pretrain, finetune and evaluate one configuration inside `dir`.
pub fn run_arm(config: &RunConfig, bench: &Benchmark, dir: &Path) -> Result<ApReport> {
    let pre_dir = dir.join("pretrain");
    pretrain(config, bench, &pre_dir, false)?;
    let fine_dir = dir.join("finetune");
    let state = finetune(config, bench, &pre_dir.join("final.ckpt"), &fine_dir, false)?;
    let (report, detections) = evaluate(&state.model, bench, &bench.test)?;
    write_evaluation(&dir.join("eval"), &report, &detections)?;
    Ok(report)
}

/// Run every arm for every seed in `config.seeds`. Arms whose configuration
/// coincides with one already run for the same seed reuse its scores. A
/// failing arm is recorded and the sweep goes on.
pub fn run_ablation(config: &RunConfig, bench: &Benchmark, out: &Path) -> Result<Vec<ArmResult>> {
    let arm_list = arms(config.ablate_arms, config.lambda1);
    let mut results = Vec::new();
    let mut done: BTreeMap<String, std::result::Result<ArmScores, String>> = BTreeMap::new();
    for &seed in &config.seeds {
        for arm in &arm_list {
            let cfg = arm.apply(config, seed);
            let key = cfg.hash();
            let outcome = match done.get(&key) {
                Some(o) => {
                    log::info!(
                        "arm {} seed {seed}: same configuration as an earlier arm",
                        arm.name
                    );
                    o.clone()
                }
                None => {
                    let dir = out.join(format!("{}_seed{seed}", arm.name));
                    log::info!("arm {} seed {seed}", arm.name);
                    let o = match run_arm(&cfg, bench, &dir) {
                        Ok(r) => ArmScores::from_report(&r),
                        Err(e) => {
                            log::warn!("arm {} seed {seed} FAILED: {e}", arm.name);
                            Err(e.to_string())
                        }
                    };
                    done.insert(key, o.clone());
                    o
                }
            };
            results.push(ArmResult {
                arm: arm.clone(),
                seed,
                outcome,
            });
        }
    }
    Ok(results)
}

/// Mean scores per arm name over the seeds that finished, in arm order.
/// Arms with no finished seed are absent.
pub fn arm_means(results: &[ArmResult]) -> Vec<(Arm, ArmScores, usize)> {
    let mut order: Vec<Arm> = Vec::new();
    for r in results {
        if !order.iter().any(|a| a.name == r.arm.name) {
            order.push(r.arm.clone());
        }
    }
    order
        .into_iter()
        .filter_map(|arm| {
            let ok: Vec<&ArmScores> = results
                .iter()
                .filter(|r| r.arm.name == arm.name)
                .filter_map(|r| r.outcome.as_ref().ok())
                .collect();
            if ok.is_empty() {
                return None;
            }
            let n = ok.len() as f64;
            let mean = |f: fn(&ArmScores) -> f64| ok.iter().map(|s| f(s)).sum::<f64>() / n;
            let scores = ArmScores {
                novel_ap25: mean(|s| s.novel_ap25),
                novel_ap50: mean(|s| s.novel_ap50),
                base_ap25: mean(|s| s.base_ap25),
                base_ap50: mean(|s| s.base_ap50),
            };
            Some((arm, scores, ok.len()))
        })
        .collect()
}

/// Per-seed rows followed by one `mean` row per arm. AP values in percent.
pub fn ablation_csv(results: &[ArmResult]) -> String {
    let mut s = String::from("table,arm,lambda1,lambda2,projection,seed,status,novel_ap25,novel_ap50,base_ap25,base_ap50\n");
    let prefix = |a: &Arm| {
        format!(
            "{},{},{},{},{}",
            a.table,
            a.name,
            a.lambda1,
            a.lambda2,
            if a.use_projection { "on" } else { "off" }
        )
    };
    for r in results {
        match &r.outcome {
            Ok(sc) => writeln!(
                s,
                "{},{},ok,{:.2},{:.2},{:.2},{:.2}",
                prefix(&r.arm),
                r.seed,
                100.0 * sc.novel_ap25,
                100.0 * sc.novel_ap50,
                100.0 * sc.base_ap25,
                100.0 * sc.base_ap50
            ),
            Err(_) => writeln!(s, "{},{},FAILED,,,,", prefix(&r.arm), r.seed),
        }
        .expect("write to string");
    }
    let means = arm_means(results);
    let mut names: Vec<&Arm> = Vec::new();
    for r in results {
        if !names.iter().any(|a| a.name == r.arm.name) {
            names.push(&r.arm);
        }
    }
    for arm in names {
        match means.iter().find(|(a, _, _)| a.name == arm.name) {
            Some((_, sc, _)) => writeln!(
                s,
                "{},mean,ok,{:.2},{:.2},{:.2},{:.2}",
                prefix(arm),
                100.0 * sc.novel_ap25,
                100.0 * sc.novel_ap50,
                100.0 * sc.base_ap25,
                100.0 * sc.base_ap50
            ),
            None => writeln!(s, "{},mean,FAILED,,,,", prefix(arm)),
        }
        .expect("write to string");
    }
    s
}

pub fn write_ablation(path: &Path, results: &[ArmResult]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, ablation_csv(results)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_sizes() {
        assert_eq!(arms(AblateArms::All, 0.1).len(), 4 + 3 + 2 + 2);
        assert_eq!(arms(AblateArms::Core, 0.1).len(), 4);
        let lambdas: Vec<f64> = arms(AblateArms::All, 0.1)
            .iter()
            .filter(|a| a.table == "lambda")
            .map(|a| a.lambda1)
            .collect();
        assert_eq!(lambdas, vec![0.025, 0.1, 0.4]);
    }

    #[test]
    fn duplicate_arms_share_a_configuration() {
        let all = arms(AblateArms::All, 0.1);
        let base = RunConfig::default();
        let hash = |name: &str| {
            all.iter()
                .find(|a| a.name == name)
                .unwrap()
                .apply(&base, 1)
                .hash()
        };
        assert_eq!(hash("both"), hash("lambda_0.1"));
        assert_eq!(hash("both"), hash("projection_on"));
        assert_ne!(hash("both"), hash("projection_off"));
    }

    #[test]
    fn csv_marks_failures_and_averages_the_rest() {
        let arm = core_arms(0.1).remove(3);
        let scores = |v: f64| ArmScores {
            novel_ap25: v,
            novel_ap50: v / 2.0,
            base_ap25: v,
            base_ap50: v,
        };
        let results = vec![
            ArmResult {
                arm: arm.clone(),
                seed: 1,
                outcome: Ok(scores(0.2)),
            },
            ArmResult {
                arm: arm.clone(),
                seed: 2,
                outcome: Err("boom".into()),
            },
            ArmResult {
                arm,
                seed: 3,
                outcome: Ok(scores(0.4)),
            },
        ];
        let csv = ablation_csv(&results);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[2], "loss,both,0.1,0.1,on,2,FAILED,,,,");
        assert!(
            lines[4].starts_with("loss,both,0.1,0.1,on,mean,ok,30.00,15.00"),
            "{}",
            lines[4]
        );
    }
}

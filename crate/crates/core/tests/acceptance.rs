//! End-to-end acceptance checks. Each test prints one `criterion N: PASS|FAIL`
//! line with the measured values before asserting.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use cpfs3d::ablate::{ablation_csv, arm_means, run_ablation, write_ablation};
use cpfs3d::checks::{model_gradient_contracts, run_grad_suite, GRAD_TOLERANCE};
use cpfs3d::config::RunConfig;
use cpfs3d::contrast::{primitive_loss_from, semantic_loss, PclDenominator};
use cpfs3d::detector::BoxCodec;
use cpfs3d::episodes::{EpisodeSampler, Stage};
use cpfs3d::graph::Graph;
use cpfs3d::model::Model;
use cpfs3d::oracle::run_oracle_suite;
use cpfs3d::protobank::{assign_features, momentum_update, GeometricPrototypeBank};
use cpfs3d::synthdata::{generate_benchmark, BenchmarkConfig};
use cpfs3d::train::{evaluate, finetune, overfit_scene, pretrain, score_scene, write_evaluation};
use ndarray::{array, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Mat = Array2<f64>;

const CLOSED_FORM_TOL: f64 = 1e-6;
const MOMENTUM_TOL: f64 = 1e-12;
const ORACLE_TOL: f64 = 1e-9;
const ABLATION_SLACK_AP: f64 = 1.0;
const TAU: f64 = 0.2;
const ABLATION_BUDGET: Duration = Duration::from_secs(2 * 3600);
const SMOKE_BUDGET: Duration = Duration::from_secs(10 * 60);

fn verdict(n: usize, ok: bool, detail: &str, started: Instant) {
    // Straight to the stream, so the line shows without --nocapture.
    let _ = writeln!(
        std::io::stderr(),
        "criterion {n}: {}  {detail}  ({:.1} s)",
        if ok { "PASS" } else { "FAIL" },
        started.elapsed().as_secs_f64()
    );
}

fn semantic_value(grid: Mat, batch: usize, ways: usize) -> f64 {
    let mut g = Graph::new();
    let v = g.constant(grid);
    let l = semantic_loss(&mut g, v, batch, ways, TAU);
    g.scalar_value(l)
}

fn primitive_value(means: Mat, protos: Mat, d: PclDenominator) -> f64 {
    let mut g = Graph::new();
    let m = g.constant(means);
    let p = g.constant(protos);
    let l = primitive_loss_from(&mut g, m, p, TAU, d).expect("at least two prototypes");
    g.scalar_value(l)
}

#[test]
fn criterion_1_uniform_closed_forms() {
    let t = Instant::now();
    let mut worst: f64 = 0.0;
    for ways in [2, 4, 8] {
        for batch in [2, 3] {
            let grid = Array2::from_elem((batch * ways, 5), 1.0 / 5f64.sqrt());
            worst = worst.max((semantic_value(grid, batch, ways) - (ways as f64).ln()).abs());
        }
    }
    for w in [2, 16, 128] {
        let row = Array2::from_elem((w, 4), 0.5);
        for d in [PclDenominator::Feature, PclDenominator::Proto] {
            worst =
                worst.max((primitive_value(row.clone(), row.clone(), d) - (w as f64).ln()).abs());
        }
    }
    let ok = worst < CLOSED_FORM_TOL;
    verdict(1, ok, &format!("max |L - ln n| = {worst:.2e}"), t);
    assert!(ok);
}

#[test]
fn criterion_2_hand_computed_infonce() {
    let t = Instant::now();
    // One positive at 1/tau = 5 against one negative at 0.
    let expected = (1.0 + (-5.0f64).exp()).ln();
    let grid = array![[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]];
    let scl = semantic_value(grid, 2, 2);
    let eye = array![[1.0, 0.0], [0.0, 1.0]];
    let pcl_f = primitive_value(eye.clone(), eye.clone(), PclDenominator::Feature);
    let pcl_p = primitive_value(eye.clone(), eye, PclDenominator::Proto);
    let errs = [
        (scl - 0.0067153).abs(),
        (scl - expected).abs(),
        (pcl_f - expected).abs(),
        (pcl_p - expected).abs(),
    ];
    let ok = errs.iter().all(|&e| e < CLOSED_FORM_TOL);
    verdict(
        2,
        ok,
        &format!("L_semcl {scl:.7}  L_primcl {pcl_f:.7}/{pcl_p:.7}  ln(1+e^-5) {expected:.7}"),
        t,
    );
    assert!(ok);
}

#[test]
fn criterion_3_gradient_checks() {
    let t = Instant::now();
    let r = run_grad_suite(2024, 20).unwrap();
    let parts = [
        ("semcl", &r.semcl),
        ("primcl", &r.primcl),
        ("l_det", &r.det),
    ];
    let ok = parts
        .iter()
        .all(|(_, c)| c.instances >= 20 && c.max_rel_error < GRAD_TOLERANCE);
    let detail: Vec<String> = parts
        .iter()
        .map(|(n, c)| format!("{n} {}x max rel {:.1e}", c.instances, c.max_rel_error))
        .collect();
    verdict(3, ok, &detail.join("  "), t);
    assert!(ok);
}

#[test]
fn criterion_4_detach_and_momentum() {
    let t = Instant::now();
    let (bank_grad, _) = model_gradient_contracts(5).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut worst: f64 = 0.0;
    let mut endpoints_ok = true;
    for _ in 0..50 {
        let (w, d, m) = (
            rng.gen_range(2..8),
            rng.gen_range(2..6),
            rng.gen_range(4..30),
        );
        let protos = Array2::from_shape_fn((w, d), |_| rng.gen_range(-1.0..1.0));
        let feats = Array2::from_shape_fn((m, d), |_| rng.gen_range(-1.0..1.0));
        let fg: Vec<bool> = (0..m).map(|_| rng.gen_bool(0.7)).collect();
        let gamma: f64 = rng.gen_range(0.0..1.0);
        let make = |gamma| GeometricPrototypeBank {
            prototypes: protos.clone(),
            gamma,
            usage_count: vec![0; w],
        };
        let assignment = assign_features(&feats, &fg, &make(gamma));
        // Group means recomputed from the labels.
        let mut f = Array2::<f64>::zeros((w, d));
        let mut counts = vec![0usize; w];
        for (i, &l) in assignment.labels.iter().enumerate() {
            if l >= 0 {
                let k = l as usize;
                counts[k] += 1;
                for j in 0..d {
                    f[[k, j]] += feats[[i, j]];
                }
            }
        }
        for k in 0..w {
            let expected: Vec<f64> = (0..d)
                .map(|j| {
                    if counts[k] == 0 {
                        protos[[k, j]]
                    } else {
                        gamma * protos[[k, j]] + (1.0 - gamma) * f[[k, j]] / counts[k] as f64
                    }
                })
                .collect();
            let mut bank = make(gamma);
            momentum_update(&mut bank, &assignment);
            for j in 0..d {
                worst = worst.max((bank.prototypes[[k, j]] - expected[j]).abs());
            }
        }
        let mut fixed = make(1.0);
        momentum_update(&mut fixed, &assignment);
        endpoints_ok &= fixed.prototypes == protos;
        let mut copied = make(0.0);
        momentum_update(&mut copied, &assignment);
        for k in 0..w {
            if counts[k] > 0 {
                endpoints_ok &= copied.prototypes.row(k) == assignment.means.row(k);
            }
        }
    }
    let ok = bank_grad == 0.0 && worst <= MOMENTUM_TOL && endpoints_ok;
    verdict(
        4,
        ok,
        &format!(
            "bank grad {bank_grad:e}  momentum max err {worst:.1e}  gamma endpoints {endpoints_ok}"
        ),
        t,
    );
    assert!(ok);
}

#[test]
fn criterion_5_oracle_equivalence() {
    let t = Instant::now();
    let r = run_oracle_suite(99, 200, 50);
    let ok = r.passed(ORACLE_TOL)
        && r.iou_instances >= 200
        && r.ap_instances >= 200
        && r.assign_instances >= 50;
    verdict(
        5,
        ok,
        &format!(
            "iou {}x err {:.1e}  AP {}x err {:.1e}  assignment {}x mismatches {}",
            r.iou_instances,
            r.iou_max_error,
            r.ap_instances,
            r.ap_max_error,
            r.assign_instances,
            r.assign_mismatches
        ),
        t,
    );
    assert!(ok);
}

#[test]
fn criterion_6_episodic_protocol() {
    let t = Instant::now();
    let bench = generate_benchmark(&BenchmarkConfig::default()).unwrap();
    let split = &bench.split;
    let sampler = EpisodeSampler::new(&bench.train, split, 16).unwrap();
    let (n_way, k) = (3, split.k);
    let mut rng = ChaCha8Rng::seed_from_u64(6);

    let mut novel_supervision = 0usize;
    let mut bad_shape = 0usize;
    for _ in 0..10_000 {
        let e = sampler
            .sample_episode(Stage::Pretrain, n_way, k, &mut rng)
            .unwrap();
        novel_supervision += e
            .supervised_instances()
            .iter()
            .filter(|(_, _, c)| split.is_novel(*c))
            .count();
        novel_supervision += e.class_ids.iter().filter(|c| split.is_novel(**c)).count();
        bad_shape +=
            usize::from(e.support.len() != n_way || e.support.iter().any(|s| s.len() != k));
    }

    let mut designated: BTreeMap<usize, BTreeSet<(String, usize)>> = BTreeMap::new();
    for (scene_id, inst) in &split.annotated {
        let scene = bench
            .train
            .iter()
            .find(|s| &s.scene_id == scene_id)
            .unwrap();
        let class = scene.box_by_instance(*inst).unwrap().class_id;
        designated
            .entry(class)
            .or_default()
            .insert((scene_id.clone(), *inst));
    }
    let mut wrong_shots = 0usize;
    let mut novel_slots = 0usize;
    for _ in 0..2_000 {
        let e = sampler
            .sample_episode(Stage::Finetune, n_way, k, &mut rng)
            .unwrap();
        bad_shape +=
            usize::from(e.support.len() != n_way || e.support.iter().any(|s| s.len() != k));
        for (c, shots) in e.class_ids.iter().zip(&e.support) {
            if split.is_novel(*c) {
                novel_slots += 1;
                let used: BTreeSet<(String, usize)> =
                    shots.iter().map(|s| s.source.clone()).collect();
                wrong_shots += usize::from(used != designated[c]);
            }
        }
    }
    let ok = novel_supervision == 0 && bad_shape == 0 && wrong_shots == 0 && novel_slots > 0;
    verdict(
        6,
        ok,
        &format!(
            "novel supervision in 10000 pretrain episodes {novel_supervision}  finetune novel slots {novel_slots} with wrong shots {wrong_shots}  malformed episodes {bad_shape}"
        ),
        t,
    );
    assert!(ok);
}

#[test]
fn criterion_7_detector_sanity() {
    let t = Instant::now();
    let config = RunConfig::desk();
    let bench = generate_benchmark(&config.benchmark()).unwrap();
    let (state, records) = overfit_scene(&config, &bench, 0, 300).unwrap();
    let (report, _) = score_scene(&state.model, &bench, 0).unwrap();
    let ap25 = report.base_ap25.unwrap_or(0.0);

    let plain = RunConfig {
        lambda1: 0.0,
        lambda2: 0.0,
        ..RunConfig::smoke()
    };
    let small = generate_benchmark(&plain.benchmark()).unwrap();
    let sampler =
        EpisodeSampler::new(&small.train, &small.split, plain.support_min_points).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut reduced = true;
    for _ in 0..3 {
        let batch = sampler
            .sample_batch(
                Stage::Pretrain,
                plain.batch_size,
                plain.n_way,
                plain.k_shot,
                &mut rng,
            )
            .unwrap();
        let model = Model::new(
            &plain,
            BoxCodec::from_boxes(small.train.iter().flat_map(|s| &s.boxes)),
            &mut rng,
        );
        let out = model.forward_batch(&batch).unwrap();
        reduced &= out.losses.l_total == out.losses.l_det;
    }
    let ok = ap25 == 1.0 && reduced && records.len() == 300;
    verdict(
        7,
        ok,
        &format!(
            "overfit AP25 {ap25:.3} after {} steps (final l_det {:.3})  l_total == l_det with zero weights: {reduced}",
            records.len(),
            records.last().map_or(f64::NAN, |r| r.l_det)
        ),
        t,
    );
    assert!(ok);
}

#[test]
fn criterion_8_directional_ablation() {
    let t = Instant::now();
    let config = RunConfig::ablation();
    let bench = generate_benchmark(&config.benchmark()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let results = run_ablation(&config, &bench, dir.path()).unwrap();
    let out = Path::new(env!("CARGO_TARGET_TMPDIR")).join("ablation.csv");
    write_ablation(&out, &results).unwrap();
    let _ = writeln!(std::io::stderr(), "{}", ablation_csv(&results));

    let means: BTreeMap<String, (f64, usize)> = arm_means(&results)
        .into_iter()
        .map(|(a, s, n)| (a.name, (100.0 * s.novel_ap25, n)))
        .collect();
    let get = |name: &str| means.get(name).copied().unwrap_or((f64::NAN, 0));
    let (none, scl, pcl, both) = (get("none"), get("scl"), get("pcl"), get("both"));
    let complete = [none, scl, pcl, both]
        .iter()
        .all(|(_, n)| *n == config.seeds.len());
    let ok = complete
        && both.0 > none.0
        && both.0 >= scl.0.max(pcl.0) - ABLATION_SLACK_AP
        && t.elapsed() < ABLATION_BUDGET;
    verdict(
        8,
        ok,
        &format!(
            "mean novel AP25 over {} seeds: none {:.2}  scl {:.2}  pcl {:.2}  both {:.2}",
            config.seeds.len(),
            none.0,
            scl.0,
            pcl.0,
            both.0
        ),
        t,
    );
    assert!(ok);
}

fn smoke_run(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let config = RunConfig::smoke();
    let bench = generate_benchmark(&config.benchmark()).unwrap();
    pretrain(&config, &bench, &dir.join("pretrain"), false).unwrap();
    let state = finetune(
        &config,
        &bench,
        &dir.join("pretrain/final.ckpt"),
        &dir.join("finetune"),
        false,
    )
    .unwrap();
    let (report, detections) = evaluate(&state.model, &bench, &bench.test).unwrap();
    write_evaluation(&dir.join("eval"), &report, &detections).unwrap();
    [
        "pretrain/metrics.jsonl",
        "pretrain/episodes.jsonl",
        "finetune/metrics.jsonl",
        "finetune/episodes.jsonl",
        "eval/report.json",
        "eval/report.csv",
    ]
    .iter()
    .map(|f| (f.to_string(), std::fs::read(dir.join(f)).unwrap()))
    .collect()
}

#[test]
fn criterion_9_determinism() {
    let t = Instant::now();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = smoke_run(a.path());
    let second = smoke_run(b.path());
    let differing: Vec<&str> = first
        .iter()
        .zip(&second)
        .filter(|(x, y)| x.1 != y.1)
        .map(|(x, _)| x.0.as_str())
        .collect();
    let ok = differing.is_empty()
        && first.iter().all(|(_, bytes)| !bytes.is_empty())
        && t.elapsed() < SMOKE_BUDGET;
    verdict(
        9,
        ok,
        &format!(
            "{} metrics files compared, differing: {differing:?}",
            first.len()
        ),
        t,
    );
    assert!(ok);
}

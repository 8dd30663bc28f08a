//! Command-line front end.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::ablate::{ablation_csv, arm_means, run_ablation, write_ablation};
use crate::checks::{run_grad_suite, GRAD_TOLERANCE};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval3d::load_detection_dir;
use crate::oracle::run_oracle_suite;
use crate::plot::{plot_evaluation, plot_losses};
use crate::synthdata::{generate_benchmark, load_benchmark, save_benchmark, Benchmark};
use crate::train::{evaluate, finetune, load_model, pretrain, write_evaluation};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "CPFS3D_OUT";

#[derive(Debug, Parser)]
#[command(
    name = "cpfs3d",
    version,
    about = "Few-shot 3D detection with contrastive prototypes"
)]
pub struct Cli {
    /// Base settings the configuration file and overrides apply to.
    #[arg(long, value_enum, default_value_t = Profile::Paper, global = true)]
    pub profile: Profile,
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    /// Run seed (overrides `seed`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output root; defaults to $CPFS3D_OUT, then `runs`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Dataset directory; defaults to `<out>/data`.
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Profile {
    /// Published hyperparameters at full model size.
    Paper,
    /// Reduced model and data that train in minutes on one core.
    Desk,
    /// The desk model on a handful of scenes, two epochs.
    Smoke,
    /// The desk model on the full benchmark, long schedule, loss arms only.
    Ablation,
}

impl Profile {
    pub fn config(self) -> RunConfig {
        match self {
            Profile::Paper => RunConfig::default(),
            Profile::Desk => RunConfig::desk(),
            Profile::Smoke => RunConfig::smoke(),
            Profile::Ablation => RunConfig::ablation(),
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic benchmark.
    GenData,
    /// Episodic training on base classes.
    Pretrain {
        /// Continue from the latest epoch checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Episodic training on base classes and the novel shots.
    Finetune {
        /// Pretraining checkpoint; defaults to `<out>/pretrain/final.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        resume: bool,
    },
    /// Detect on the test scenes and score the detections.
    Eval {
        /// Defaults to `<out>/finetune/final.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Score the training scenes instead of the test scenes.
        #[arg(long)]
        train_scenes: bool,
    },
    /// Loss-weight and projection ablation over `seeds`.
    Ablate,
    /// Finite-difference checks of the loss gradients.
    GradCheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
    /// Compare IoU, AP and assignment with brute-force references.
    Oracle {
        #[arg(long, default_value_t = 200)]
        instances: usize,
        #[arg(long, default_value_t = 50)]
        assign_instances: usize,
    },
    /// Write SVG figures from a metrics log and an evaluation directory.
    Plot {
        /// Defaults to `<out>/pretrain/metrics.jsonl`.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Defaults to `<out>/eval`.
        #[arg(long)]
        eval_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        max_scenes: usize,
        #[arg(long, default_value_t = 0.3)]
        min_score: f64,
    },
}

struct Paths {
    out: PathBuf,
    data: PathBuf,
}

fn output_root(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut config = cli.profile.config();
    if let Some(p) = &cli.config {
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        config.apply_text(&text, &p.display().to_string())?;
    }
    config = config.with_overrides(&cli.set)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn load_data(config: &RunConfig, dir: &Path) -> Result<Benchmark> {
    if !dir.join("split.json").exists() {
        return Err(Error::Invalid(format!(
            "no dataset in {}; run `cpfs3d gen-data` first",
            dir.display()
        )));
    }
    let bench = load_benchmark(dir)?;
    if bench.split.k != config.k_shot {
        return Err(Error::Config(format!(
            "dataset in {} has k = {}, configuration has k_shot = {}",
            dir.display(),
            bench.split.k,
            config.k_shot
        )));
    }
    Ok(bench)
}

fn print_summary(bench: &Benchmark) {
    println!(
        "train scenes {}  test scenes {}",
        bench.train.len(),
        bench.test.len()
    );
    println!("k = {}", bench.split.k);
    println!("class  split  train_boxes  test_boxes");
    for c in bench.split.all_classes() {
        let count = |scenes: &[crate::synthdata::PointCloudScene]| {
            scenes
                .iter()
                .flat_map(|s| &s.boxes)
                .filter(|b| b.class_id == c)
                .count()
        };
        let split = if bench.split.is_novel(c) {
            "novel"
        } else {
            "base"
        };
        println!(
            "{c:>5}  {split:<5}  {:>11}  {:>10}",
            count(&bench.train),
            count(&bench.test)
        );
    }
}

fn print_report(report: &crate::eval3d::ApReport) {
    print!("{}", report.to_csv());
}

fn execute(cli: Cli) -> Result<()> {
    let config = load_config(&cli)?;
    let out = output_root(cli.out.clone());
    let paths = Paths {
        data: cli.data.clone().unwrap_or_else(|| out.join("data")),
        out,
    };
    match cli.command {
        Command::GenData => {
            let bench = generate_benchmark(&config.benchmark())?;
            save_benchmark(&bench, &paths.data)?;
            println!("wrote {}", paths.data.display());
            print_summary(&bench);
        }
        Command::Pretrain { resume } => {
            let bench = load_data(&config, &paths.data)?;
            let dir = paths.out.join("pretrain");
            let state = pretrain(&config, &bench, &dir, resume)?;
            println!(
                "pretrained {} steps; checkpoint {}",
                state.step,
                dir.join("final.ckpt").display()
            );
        }
        Command::Finetune { checkpoint, resume } => {
            let bench = load_data(&config, &paths.data)?;
            let ckpt = checkpoint.unwrap_or_else(|| paths.out.join("pretrain").join("final.ckpt"));
            let dir = paths.out.join("finetune");
            let state = finetune(&config, &bench, &ckpt, &dir, resume)?;
            println!(
                "finetuned {} steps; checkpoint {}",
                state.step,
                dir.join("final.ckpt").display()
            );
        }
        Command::Eval {
            checkpoint,
            train_scenes,
        } => {
            let bench = load_data(&config, &paths.data)?;
            let ckpt = checkpoint.unwrap_or_else(|| paths.out.join("finetune").join("final.ckpt"));
            let model = load_model(&config, &ckpt)?;
            let scenes = if train_scenes {
                &bench.train
            } else {
                &bench.test
            };
            let (report, detections) = evaluate(&model, &bench, scenes)?;
            let dir = paths.out.join("eval");
            write_evaluation(&dir, &report, &detections)?;
            print_report(&report);
        }
        Command::Ablate => {
            let bench = load_data(&config, &paths.data)?;
            let dir = paths.out.join("ablate");
            let results = run_ablation(&config, &bench, &dir)?;
            let path = dir.join("ablation.csv");
            write_ablation(&path, &results)?;
            print!("{}", ablation_csv(&results));
            for (arm, s, n) in arm_means(&results) {
                log::info!(
                    "{:<16} novel AP25 {:.2} over {n} seed(s)",
                    arm.name,
                    100.0 * s.novel_ap25
                );
            }
            println!("wrote {}", path.display());
        }
        Command::GradCheck { instances } => {
            let r = run_grad_suite(config.seed, instances)?;
            for (name, c) in [
                ("l_semcl", &r.semcl),
                ("l_primcl", &r.primcl),
                ("l_det", &r.det),
            ] {
                println!(
                    "{name:<9} instances {:>3}  entries {:>6}  max rel err {:.3e}",
                    c.instances, c.entries, c.max_rel_error
                );
            }
            println!("bank gradient max |g|               {:e}", r.bank_grad_max);
            println!(
                "projection gradient max |g| (λ = 0) {:e}",
                r.proj_grad_max_without_contrast
            );
            if !r.passed() {
                return Err(Error::Numerical(format!(
                    "gradient check failed (tolerance {GRAD_TOLERANCE:e})"
                )));
            }
            println!("all gradient checks passed");
        }
        Command::Oracle {
            instances,
            assign_instances,
        } => {
            let r = run_oracle_suite(config.seed, instances, assign_instances);
            println!(
                "iou3d      {:>4} instances  max |err| {:e}",
                r.iou_instances, r.iou_max_error
            );
            println!(
                "AP         {:>4} instances  max |err| {:e}",
                r.ap_instances, r.ap_max_error
            );
            println!(
                "assignment {:>4} instances  mismatches {}",
                r.assign_instances, r.assign_mismatches
            );
            if !r.passed(1e-9) {
                return Err(Error::Numerical("oracle mismatch".into()));
            }
            println!("all oracle checks passed");
        }
        Command::Plot {
            metrics,
            eval_dir,
            max_scenes,
            min_score,
        } => {
            let dir = paths.out.join("plots");
            let metrics =
                metrics.unwrap_or_else(|| paths.out.join("pretrain").join("metrics.jsonl"));
            if let Some(p) = plot_losses(&metrics, &dir)? {
                println!("wrote {}", p.display());
            }
            let eval_dir = eval_dir.unwrap_or_else(|| paths.out.join("eval"));
            let det_dir = eval_dir.join("detections");
            if det_dir.is_dir() {
                let bench = load_data(&config, &paths.data)?;
                let ids: Vec<String> = bench.test.iter().map(|s| s.scene_id.clone()).collect();
                let detections = load_detection_dir(&det_dir, &ids)?;
                for p in plot_evaluation(
                    &detections,
                    &bench.test,
                    &bench.split,
                    &dir,
                    max_scenes,
                    min_score,
                )? {
                    println!("wrote {}", p.display());
                }
            } else {
                log::warn!(
                    "no detections in {}; skipping evaluation plots",
                    det_dir.display()
                );
            }
        }
    }
    Ok(())
}

/// Parse `args` and run; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

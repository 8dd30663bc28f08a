//! The four-arm loss ablation (none, semantic, primitive, both) on the smoke
//! profile with two seeds.

use cpfs3d::ablate::{ablation_csv, run_ablation};
use cpfs3d::config::{AblateArms, RunConfig};
use cpfs3d::synthdata::generate_benchmark;

fn main() -> cpfs3d::Result<()> {
    let config = RunConfig {
        ablate_arms: AblateArms::Core,
        seeds: vec![1, 2],
        ..RunConfig::smoke()
    };
    let bench = generate_benchmark(&config.benchmark())?;
    let dir = std::env::temp_dir().join("cpfs3d_ablation_example");
    let results = run_ablation(&config, &bench, &dir)?;
    print!("{}", ablation_csv(&results));
    Ok(())
}

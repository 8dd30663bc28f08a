//! Build a configuration from a profile, a `key = value` file and overrides.

use cpfs3d::config::RunConfig;

fn main() -> cpfs3d::Result<()> {
    let text = "# lighter contrastive weights\nlambda1 = 0.05\nlambda2 = 0.05\n";
    let mut config = RunConfig::desk();
    config.apply_text(text, "inline")?;
    let config = config.with_overrides(&["seed=9".to_string(), "k_shot=1".to_string()])?;
    config.validate()?;
    println!("{}", config.to_text());
    println!("hash {}", config.hash());
    println!(
        "lr at epoch 0: {}, after decay: {}",
        config.lr_at(0),
        config.lr_at(config.lr_decay_epoch)
    );
    Ok(())
}

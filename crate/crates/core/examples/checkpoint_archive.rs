//! Save a model to an archive and restore it.

use cpfs3d::checkpoint::Archive;
use cpfs3d::config::RunConfig;
use cpfs3d::detector::BoxCodec;
use cpfs3d::model::Model;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> cpfs3d::Result<()> {
    let config = RunConfig::smoke();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let codec = BoxCodec {
        mean_size: [0.6, 0.6, 0.8],
    };
    let mut model = Model::new(&config, codec, &mut rng);
    model.quantize();

    let mut archive = Archive::new();
    model.write_archive(&mut archive);
    archive.set_meta("note", "example");
    let bytes = archive.to_bytes()?;
    println!("{} tensors, {} bytes", archive.entries.len(), bytes.len());

    let back = Model::from_archive(&config, &Archive::from_bytes(&bytes)?)?;
    println!("bank restored exactly: {}", back.bank == model.bank);
    println!("note = {}", Archive::from_bytes(&bytes)?.meta("note")?);
    Ok(())
}

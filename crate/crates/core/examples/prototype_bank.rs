//! Assign features to the geometric prototype bank and apply the momentum update.

use cpfs3d::protobank::{assign_features, init_bank, momentum_update};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut bank = init_bank(&mut rng, 6, 4, 0.9);
    let features = Array2::from_shape_fn((20, 4), |_| rng.gen_range(-1.0..1.0));
    let foreground: Vec<bool> = (0..20).map(|i| i % 4 != 0).collect();

    let assignment = assign_features(&features, &foreground, &bank);
    println!("labels {:?}", assignment.labels);
    println!("prototypes in use {:?}", assignment.nonempty());

    let before = bank.prototypes.clone();
    momentum_update(&mut bank, &assignment);
    for w in 0..bank.len() {
        let moved = (&bank.prototypes.row(w) - &before.row(w))
            .mapv(f64::abs)
            .sum();
        println!(
            "prototype {w}: {} members, moved {moved:.4}, usage {}",
            assignment.groups[w].len(),
            bank.usage_count[w]
        );
    }
}

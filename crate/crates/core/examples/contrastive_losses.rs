//! Evaluate both contrastive losses and their gradients on small inputs.
//!
//! With identical prototypes every logit ties and each loss equals the log of
//! the number of candidates.

use cpfs3d::contrast::{primitive_loss_from, semantic_loss, PclDenominator};
use cpfs3d::graph::Graph;
use ndarray::{array, Array2};
use std::f64::consts::FRAC_1_SQRT_2;

fn main() {
    let (batch, ways) = (2, 4);
    let mut g = Graph::new();
    let grid = g.constant(Array2::from_elem((batch * ways, 3), 1.0 / 3f64.sqrt()));
    let l = semantic_loss(&mut g, grid, batch, ways, 0.2);
    println!(
        "semantic loss, all prototypes equal: {:.6} (ln {ways} = {:.6})",
        g.value(l)[[0, 0]],
        (ways as f64).ln()
    );

    let mut g = Graph::new();
    let grid = g.param(array![[1.0, 0.0], [0.0, 1.0], [0.6, 0.8], [0.0, 1.0]]);
    let l = semantic_loss(&mut g, grid, 2, 2, 0.2);
    g.backward(l);
    println!(
        "semantic loss, two tasks of two classes: {:.6}",
        g.value(l)[[0, 0]]
    );
    println!(
        "gradient on the grid:\n{:.4}",
        g.grad(grid).expect("grid is a parameter")
    );

    for denominator in [PclDenominator::Feature, PclDenominator::Proto] {
        let mut g = Graph::new();
        let means = g.param(array![
            [1.0, 0.0],
            [0.0, 1.0],
            [FRAC_1_SQRT_2, FRAC_1_SQRT_2]
        ]);
        let protos = g.constant(array![[0.9, 0.1], [0.1, 0.9], [0.6, 0.6]]);
        let l =
            primitive_loss_from(&mut g, means, protos, 0.2, denominator).expect("three prototypes");
        g.backward(l);
        println!(
            "primitive loss ({denominator:?} denominator): {:.6}",
            g.value(l)[[0, 0]]
        );
    }
}

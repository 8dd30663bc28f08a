//! Semantic and primitive contrastive objectives.
//!
//! Semantic: for a batch of `B` tasks over the same `N` classes, each class
//! prototype `P[b][n]` (mean support feature, projected) is contrasted against
//! the prototypes of the other classes. Similarities are averaged over tasks:
//! same-class pairs over the `B - 1` other tasks, cross-class pairs over all
//! `B` tasks. The loss is InfoNCE over the `N` classes with temperature `tau`.
//!
//! Primitive: for every non-empty prototype `w`, the projected mean of the seed
//! features assigned to it is the positive for the (detached, projected)
//! prototype `g_w`; the means of the other non-empty groups are negatives.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::graph::{Graph, Mat, Var};
use crate::nn::{Ctx, ProjectionHead};
use crate::protobank::AssignmentResult;

/// Which side of the primitive InfoNCE denominator varies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PclDenominator {
    /// `sum_j exp(<M_j, g_w>/tau)`: group means vary against a fixed prototype.
    Feature,
    /// `sum_j exp(<M_w, g_j>/tau)`: prototypes vary against a fixed mean.
    Proto,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContrastConfig {
    pub tau: f64,
    pub normalize_sim: bool,
    pub pcl_denominator: PclDenominator,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        Self {
            tau: 0.2,
            normalize_sim: true,
            pcl_denominator: PclDenominator::Feature,
        }
    }
}

fn project(ctx: &mut Ctx, x: Var, proj: Option<&ProjectionHead>, normalize: bool) -> Var {
    let p = match proj {
        Some(head) => head.forward(ctx, x),
        None => x,
    };
    if normalize {
        ctx.g.l2_normalize_rows(p)
    } else {
        p
    }
}

/// Semantic prototype grid, rows ordered `b * N + n`.
///
/// `supports` holds `B * N * K` instance features, rows ordered
/// `(b * N + n) * K + k`. Each prototype is the mean over its `K` shots, then
/// projected and (optionally) L2-normalized.
pub fn build_semantic_grid(
    ctx: &mut Ctx,
    supports: Var,
    batch: usize,
    ways: usize,
    shots: usize,
    proj: Option<&ProjectionHead>,
    normalize: bool,
) -> Var {
    assert_eq!(
        ctx.g.shape(supports).0,
        batch * ways * shots,
        "support rows"
    );
    let offsets: Vec<usize> = (0..=batch * ways).map(|i| i * shots).collect();
    let means = ctx.g.segment_mean(supports, &offsets);
    project(ctx, means, proj, normalize)
}

/// Weights turning the Gram matrix of the grid into task-averaged similarities.
/// Entry `[(b,n), (i,m)]`: `1/B` when `n != m`; `1/(B-1)` when `n == m` and
/// `i != b`; zero on the task's own prototype.
fn similarity_weights(batch: usize, ways: usize) -> (Mat, Mat) {
    let rows = batch * ways;
    let weights = Array2::from_shape_fn((rows, rows), |(r, c)| {
        let (b, n) = (r / ways, r % ways);
        let (i, m) = (c / ways, c % ways);
        if n != m {
            1.0 / batch as f64
        } else if i != b {
            1.0 / (batch - 1) as f64
        } else {
            0.0
        }
    });
    let fold = Array2::from_shape_fn((rows, ways), |(c, m)| if c % ways == m { 1.0 } else { 0.0 });
    (weights, fold)
}

/// `sim(b, n, m)` for every task and class pair, as a `(B * N) x N` matrix.
pub fn semantic_similarity_matrix(g: &mut Graph, grid: Var, batch: usize, ways: usize) -> Var {
    assert!(batch >= 2, "semantic similarity needs at least two tasks");
    let (weights, fold) = similarity_weights(batch, ways);
    let gram = g.matmul_t(grid, grid);
    let w = g.constant(weights);
    let weighted = g.mul(gram, w);
    let f = g.constant(fold);
    g.matmul(weighted, f)
}

/// InfoNCE over each row of `logits` with the positive at column `positives[r]`.
fn info_nce(g: &mut Graph, logits: Var, positives: &[usize], tau: f64) -> Var {
    let scaled = g.scale(logits, 1.0 / tau);
    let logp = g.log_softmax_rows(scaled);
    let picked = g.pick_rows(logp, positives);
    let mean = g.mean(picked);
    g.scale(mean, -1.0)
}

/// Semantic contrastive loss of a prototype grid.
pub fn semantic_loss(g: &mut Graph, grid: Var, batch: usize, ways: usize, tau: f64) -> Var {
    let sim = semantic_similarity_matrix(g, grid, batch, ways);
    let positives: Vec<usize> = (0..batch * ways).map(|r| r % ways).collect();
    info_nce(g, sim, &positives, tau)
}

/// Direct evaluation of one similarity entry from grid values.
pub fn semantic_similarity(
    grid: &Mat,
    batch: usize,
    ways: usize,
    b: usize,
    n: usize,
    m: usize,
) -> f64 {
    let row = |t: usize, c: usize| grid.row(t * ways + c);
    let p = row(b, n);
    if n != m {
        (0..batch).map(|i| p.dot(&row(i, m))).sum::<f64>() / batch as f64
    } else {
        (0..batch)
            .filter(|&i| i != b)
            .map(|i| p.dot(&row(i, n)))
            .sum::<f64>()
            / (batch - 1) as f64
    }
}

/// Projected group means and detached projected prototypes of the non-empty
/// bank entries.
#[derive(Clone, Debug)]
pub struct PrimitiveMeanSet {
    /// `W' x h`
    pub means: Var,
    /// `W' x h`, computed from the detached bank.
    pub prototypes: Var,
    pub nonempty_ids: Vec<usize>,
}

/// `features` are the rows the assignment was computed on (pre-refinement
/// seed features, on the tape); `bank` holds the prototypes, detached.
pub fn build_primitive_means(
    ctx: &mut Ctx,
    features: Var,
    assignment: &AssignmentResult,
    bank: Var,
    proj: Option<&ProjectionHead>,
    normalize: bool,
) -> PrimitiveMeanSet {
    let nonempty_ids = assignment.nonempty();
    let mut order = Vec::with_capacity(assignment.num_assigned());
    let mut offsets = vec![0];
    for &w in &nonempty_ids {
        order.extend_from_slice(&assignment.groups[w]);
        offsets.push(order.len());
    }
    let rows = ctx.g.gather_rows(features, &order);
    let means = ctx.g.segment_mean(rows, &offsets);
    let means = project(ctx, means, proj, normalize);
    let rows = ctx.g.gather_rows(bank, &nonempty_ids);
    let prototypes = project(ctx, rows, proj, normalize);
    PrimitiveMeanSet {
        means,
        prototypes,
        nonempty_ids,
    }
}

/// Primitive contrastive loss; `None` when fewer than two prototypes are in use.
pub fn primitive_loss(
    g: &mut Graph,
    set: &PrimitiveMeanSet,
    tau: f64,
    denominator: PclDenominator,
) -> Option<Var> {
    primitive_loss_from(g, set.means, set.prototypes, tau, denominator)
}

pub fn primitive_loss_from(
    g: &mut Graph,
    means: Var,
    prototypes: Var,
    tau: f64,
    denominator: PclDenominator,
) -> Option<Var> {
    let w = g.shape(means).0;
    if w < 2 {
        return None;
    }
    let logits = match denominator {
        PclDenominator::Feature => g.matmul_t(prototypes, means),
        PclDenominator::Proto => g.matmul_t(means, prototypes),
    };
    let positives: Vec<usize> = (0..w).collect();
    Some(info_nce(g, logits, &positives, tau))
}

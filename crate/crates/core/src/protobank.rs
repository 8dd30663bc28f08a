//! Memory bank of geometric prototypes.
//!
//! Foreground seed features are assigned to their most cosine-similar
//! prototype; the assignment doubles as a primitive pseudo-label. Prototypes
//! move only through the momentum update `g_w <- gamma g_w + (1 - gamma) f_w`,
//! where `f_w` is the mean feature assigned to `w` in the current step. On the
//! tape the bank is always a constant, so no loss can write to it.

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::backbone::SeedFeatureSet;
use crate::graph::{Mat, Var};
use crate::nn::{CrossAttention, Ctx, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct GeometricPrototypeBank {
    /// `W x d`
    pub prototypes: Mat,
    pub gamma: f64,
    pub usage_count: Vec<u64>,
}

impl GeometricPrototypeBank {
    pub fn len(&self) -> usize {
        self.prototypes.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.prototypes.ncols()
    }

    /// Rescale every row to unit L2 norm (zero rows stay zero).
    pub fn renormalize(&mut self) {
        for mut row in self.prototypes.rows_mut() {
            let n = row.dot(&row).sqrt();
            if n > 0.0 {
                row.mapv_inplace(|v| v / n);
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.prototypes.iter().all(|v| v.is_finite())
    }
}

/// Gaussian rows, L2-normalized.
pub fn init_bank(rng: &mut impl Rng, w: usize, d: usize, gamma: f64) -> GeometricPrototypeBank {
    assert!(w >= 1, "bank needs at least one prototype");
    let prototypes = Array2::from_shape_fn((w, d), |_| {
        let z: f64 = StandardNormal.sample(rng);
        z
    });
    let mut bank = GeometricPrototypeBank {
        prototypes,
        gamma,
        usage_count: vec![0; w],
    };
    bank.renormalize();
    bank
}

#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentResult {
    /// Prototype index per seed; `-1` for background seeds.
    pub labels: Vec<i64>,
    /// Seed rows assigned to each prototype.
    pub groups: Vec<Vec<usize>>,
    /// `W x d` group means; zero rows for empty groups.
    pub means: Mat,
}

impl AssignmentResult {
    pub fn nonempty(&self) -> Vec<usize> {
        (0..self.groups.len())
            .filter(|&w| !self.groups[w].is_empty())
            .collect()
    }

    pub fn num_assigned(&self) -> usize {
        self.groups.iter().map(Vec::len).sum()
    }
}

fn cosine_scores(
    feature: ndarray::ArrayView1<f64>,
    bank: &Mat,
    bank_norms: &[f64],
) -> Option<Vec<f64>> {
    let fnorm = feature.dot(&feature).sqrt();
    if fnorm == 0.0 {
        return None;
    }
    Some(
        bank.rows()
            .into_iter()
            .zip(bank_norms)
            .map(|(g, &gn)| {
                if gn == 0.0 {
                    0.0
                } else {
                    g.dot(&feature) / (fnorm * gn)
                }
            })
            .collect(),
    )
}

/// Nearest prototype by cosine similarity for every foreground row of
/// `features`; ties go to the lowest index. A zero feature scores 0 against
/// every prototype and lands on prototype 0.
pub fn assign_features(
    features: &Mat,
    foreground: &[bool],
    bank: &GeometricPrototypeBank,
) -> AssignmentResult {
    assert_eq!(features.nrows(), foreground.len());
    let w = bank.len();
    let bank_norms: Vec<f64> = bank
        .prototypes
        .rows()
        .into_iter()
        .map(|r| r.dot(&r).sqrt())
        .collect();
    let mut labels = vec![-1i64; features.nrows()];
    let mut groups = vec![Vec::new(); w];
    let mut zero_features = 0;
    for (i, row) in features.rows().into_iter().enumerate() {
        if !foreground[i] {
            continue;
        }
        let best = match cosine_scores(row, &bank.prototypes, &bank_norms) {
            Some(scores) => {
                let mut best = 0;
                for (k, &s) in scores.iter().enumerate() {
                    if s > scores[best] {
                        best = k;
                    }
                }
                best
            }
            None => {
                zero_features += 1;
                0
            }
        };
        labels[i] = best as i64;
        groups[best].push(i);
    }
    if zero_features > 0 {
        log::warn!("{zero_features} zero-norm seed feature(s) assigned to prototype 0");
    }
    let mut means = Array2::zeros((w, features.ncols()));
    for (k, rows) in groups.iter().enumerate() {
        if !rows.is_empty() {
            let mean = features
                .select(Axis(0), rows)
                .mean_axis(Axis(0))
                .expect("non-empty");
            means.row_mut(k).assign(&mean);
        }
    }
    AssignmentResult {
        labels,
        groups,
        means,
    }
}

pub fn assign(seeds: &SeedFeatureSet, bank: &GeometricPrototypeBank) -> AssignmentResult {
    assign_features(&seeds.features, &seeds.foreground_mask, bank)
}

/// `g_w <- gamma g_w + (1 - gamma) f_w` for every non-empty group.
pub fn momentum_update(bank: &mut GeometricPrototypeBank, assignment: &AssignmentResult) {
    let gamma = bank.gamma;
    for (k, rows) in assignment.groups.iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        let mean = assignment.means.row(k);
        let mut g = bank.prototypes.row_mut(k);
        ndarray::Zip::from(&mut g)
            .and(&mean)
            .for_each(|g, &f| *g = gamma * *g + (1.0 - gamma) * f);
        bank.usage_count[k] += rows.len() as u64;
    }
}

/// Residual cross-attention of seed features against the bank rows, which
/// the caller passes in detached.
pub fn refine_vars(ctx: &mut Ctx, attn: &CrossAttention, features: Var, bank: Var) -> Var {
    attn.forward(ctx, features, bank)
}

pub fn refine_seeds(
    seeds: &SeedFeatureSet,
    bank: &GeometricPrototypeBank,
    attn: &CrossAttention,
    params: &ParamStore,
) -> SeedFeatureSet {
    let mut ctx = Ctx::new(params);
    let f = ctx.g.constant(seeds.features.clone());
    let g = ctx.g.constant(bank.prototypes.clone());
    let out = refine_vars(&mut ctx, attn, f, g);
    SeedFeatureSet {
        features: ctx.g.value(out).clone(),
        ..seeds.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bank_from(rows: Mat, gamma: f64) -> GeometricPrototypeBank {
        let w = rows.nrows();
        GeometricPrototypeBank {
            prototypes: rows,
            gamma,
            usage_count: vec![0; w],
        }
    }

    #[test]
    fn hand_assignment() {
        let bank = bank_from(array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], 0.9);
        let f = array![
            [0.9, 0.1, 0.0],
            [0.0, 1.0, 0.0],
            [0.5, 0.5, 0.0],
            [3.0, 3.0, 0.0]
        ];
        let a = assign_features(&f, &[true, true, true, false], &bank);
        assert_eq!(a.labels, vec![0, 1, 0, -1]);
        assert_eq!(a.groups, vec![vec![0, 2], vec![1]]);
        assert_eq!(a.means.row(0).to_vec(), vec![0.7, 0.3, 0.0]);
    }

    #[test]
    fn zero_feature_goes_to_prototype_zero() {
        let bank = bank_from(array![[0.0, 1.0], [1.0, 0.0]], 0.9);
        let a = assign_features(&array![[0.0, 0.0]], &[true], &bank);
        assert_eq!(a.labels, vec![0]);
    }

    #[test]
    fn momentum_endpoints_and_hand_value() {
        let f = array![[0.0, 2.0]];
        let mut bank = bank_from(array![[1.0, 0.0]], 0.9);
        let a = AssignmentResult {
            labels: vec![0],
            groups: vec![vec![0]],
            means: f.clone(),
        };
        momentum_update(&mut bank, &a);
        assert!((bank.prototypes[[0, 0]] - 0.9).abs() < 1e-12);
        assert!((bank.prototypes[[0, 1]] - 0.2).abs() < 1e-12);
        assert_eq!(bank.usage_count, vec![1]);

        let mut frozen = bank_from(array![[1.0, 0.0]], 1.0);
        momentum_update(&mut frozen, &a);
        assert_eq!(frozen.prototypes, array![[1.0, 0.0]]);

        let mut copy = bank_from(array![[1.0, 0.0]], 0.0);
        momentum_update(&mut copy, &a);
        assert_eq!(copy.prototypes, f);
    }

    #[test]
    fn empty_groups_are_untouched() {
        let mut bank = bank_from(array![[1.0, 0.0], [0.0, 1.0]], 0.5);
        let a = assign_features(&array![[2.0, 0.1]], &[true], &bank);
        momentum_update(&mut bank, &a);
        assert_eq!(bank.prototypes.row(1).to_vec(), vec![0.0, 1.0]);
        assert_eq!(bank.usage_count, vec![1, 0]);
    }

    #[test]
    fn init_is_deterministic_and_normalized() {
        let a = init_bank(&mut ChaCha8Rng::seed_from_u64(3), 128, 256, 0.999);
        let b = init_bank(&mut ChaCha8Rng::seed_from_u64(3), 128, 256, 0.999);
        assert_eq!(a, b);
        assert_eq!(a.prototypes.dim(), (128, 256));
        for row in a.prototypes.rows() {
            assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn single_prototype_attention_weight_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let attn = CrossAttention::new(&mut store, &mut rng, "att", 6);
        let bank = init_bank(&mut rng, 1, 6, 0.9);
        let mut ctx = Ctx::new(&store);
        let q = ctx.g.constant(Array2::from_shape_fn((5, 6), |(i, j)| {
            (i as f64 - j as f64) * 0.3
        }));
        let g = ctx.g.constant(bank.prototypes.clone());
        let w = attn.weights(&mut ctx, q, g);
        assert!(ctx.g.value(w).iter().all(|&v| v == 1.0));
    }
}
